#pragma once

// Synthetic-data experiments: linear-teacher regression data, deterministic
// training loops with full-dataset metric logging, unbalanced initialization,
// and the paired-trajectory equivariance audit.
//
// Each run is single-threaded and fully determined by its seeds. The logged
// loss and gradient norm are always evaluated on the full dataset, never on
// the current minibatch.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "psi/error.hpp"
#include "psi/linalg.hpp"
#include "psi/manifold.hpp"
#include "psi/network.hpp"
#include "psi/optim.hpp"

namespace psi {

/// Linear-teacher regression task: x ~ N(0, I), y = mu.x + noise. The
/// defaults are 1000 samples of dimension 10 with unit noise and a width-100
/// hidden layer.
struct ToyRegressionSpec {
  std::size_t n_samples = 1000;
  std::size_t in_dim = 10;
  std::size_t hidden = 100;
  double noise_std = 1.0;
  std::uint64_t mu_seed = 0;
  std::uint64_t data_seed = 0;
  std::uint64_t init_seed = 0;
};

/// Draw order is fixed: mu from mu_seed, then inputs row by row and finally
/// the noise vector from data_seed.
inline std::pair<Batch, Vector> gen_toy_regression(
    const ToyRegressionSpec &spec) {
  Rng mu_rng(spec.mu_seed);
  const Vector mu = sample_gaussian(mu_rng, spec.in_dim, 0.0, 1.0);

  Rng data_rng(spec.data_seed);
  Batch batch;
  batch.inputs = Matrix(spec.n_samples, spec.in_dim);
  batch.inputs.data = sample_gaussian(data_rng, spec.n_samples * spec.in_dim,
                                      0.0, 1.0);
  const Vector noise =
      sample_gaussian(data_rng, spec.n_samples, 0.0, spec.noise_std);

  batch.targets = Matrix(spec.n_samples, 1);
  for (std::size_t i = 0; i < spec.n_samples; ++i)
    batch.targets(i, 0) = dot(batch.inputs.row(i), std::span<const double>(mu)) +
                          noise[i];
  return {std::move(batch), mu};
}

/// Two-layer net for the regression task: in -> hidden with BN, then a
/// plain linear readout. Only the hidden rows are PSI groups; the readout
/// weights belong to the scale-variant block.
inline BnMlp make_toy_net(const ToyRegressionSpec &spec,
                          Activation activation = Activation::Elu,
                          double bn_epsilon = 1e-5,
                          LossKind loss = LossKind::Mse) {
  BnMlp net = make_mlp({{spec.in_dim, spec.hidden, true},
                        {spec.hidden, 1, false}},
                       activation, bn_epsilon, loss);
  Rng rng(spec.init_seed);
  init_he(net, rng);
  return net;
}

/// Balanced init made unbalanced: the pattern is repeated cyclically over
/// the PSI groups and applied as a rescale. All-ones leaves the net as-is.
inline BnMlp make_unbalanced_init(const BnMlp &net, const Rescale &pattern) {
  if (pattern.factors.empty())
    throw DomainError("make_unbalanced_init: empty pattern");
  Rescale full = Rescale::identity(net.psi_group_count());
  for (std::size_t i = 0; i < full.factors.size(); ++i)
    full.factors[i] = pattern.factors[i % pattern.factors.size()];
  return apply_rescale(net, full);
}

struct RunRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;      // full-dataset loss
  double grad_norm = 0.0; // full-dataset gradient norm
  Vector group_norms;     // |w_i| per PSI group at logging time
  double wall_ms = 0.0;
};

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::size_t log_every = 1; // in steps; the final step is always logged
  std::uint64_t shuffle_seed = 0;
};

struct TrainResult {
  std::vector<RunRecord> records;
  bool diverged = false;
  std::size_t steps_run = 0;
};

namespace detail {

inline Batch gather_batch(const Batch &dataset,
                          const std::vector<std::size_t> &order,
                          std::size_t begin, std::size_t count) {
  Batch out;
  out.inputs = Matrix(count, dataset.inputs.cols);
  out.targets = Matrix(count, dataset.targets.cols);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t src = order[begin + k];
    auto in_row = dataset.inputs.row(src);
    std::copy(in_row.begin(), in_row.end(), out.inputs.row(k).begin());
    auto tg_row = dataset.targets.row(src);
    std::copy(tg_row.begin(), tg_row.end(), out.targets.row(k).begin());
  }
  return out;
}

inline RunRecord snapshot(const BnMlp &net, const Batch &dataset,
                          std::size_t step, std::size_t epoch,
                          double wall_ms) {
  auto [loss, cache] = forward(net, dataset);
  const GradBundle grads = backward(net, cache);
  RunRecord rec;
  rec.step = step;
  rec.epoch = epoch;
  rec.loss = loss;
  rec.grad_norm = grad_norm(grads);
  rec.group_norms.reserve(net.psi_group_count());
  for (std::size_t i = 0; i < net.psi_group_count(); ++i)
    rec.group_norms.push_back(norm2(net.psi_row(i)));
  rec.wall_ms = wall_ms;
  return rec;
}

} // namespace detail

/// Seeded minibatch training. Overflow renormalization runs after every
/// parameter update, before any logging. A non-finite minibatch loss stops
/// the run: the bad update is not applied and the records collected so far
/// are returned with the diverged flag set.
inline TrainResult run_training(BnMlp &net, const Batch &dataset,
                                const OptConfig &cfg,
                                const TrainOptions &opt) {
  cfg.validate();
  const std::size_t n = dataset.inputs.rows;
  if (n == 0)
    throw DimensionError("run_training: empty dataset");
  if (opt.batch_size == 0)
    throw ConfigError("run_training: batch_size must be positive");
  if (net.has_any_bn() && opt.batch_size < 2)
    throw ConfigError("run_training: batch_size must be >= 2 with batch norm");
  if (opt.log_every == 0)
    throw ConfigError("run_training: log_every must be positive");

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&t0] {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - t0)
        .count();
  };

  TrainResult result;
  OptState state = make_opt_state(net);
  Rng shuffle_rng(opt.shuffle_seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i)
    order[i] = i;

  std::size_t step = 0;
  auto try_log = [&](std::size_t epoch) {
    RunRecord rec = detail::snapshot(net, dataset, step, epoch, elapsed_ms());
    if (!std::isfinite(rec.loss) || !std::isfinite(rec.grad_norm)) {
      result.diverged = true; // keep the good records, drop this one
      return false;
    }
    result.records.push_back(std::move(rec));
    return true;
  };

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    for (std::size_t begin = 0; begin < n; begin += opt.batch_size) {
      const std::size_t count = std::min(opt.batch_size, n - begin);
      if (count == 1 && net.has_any_bn())
        break; // a single trailing sample cannot be batch-normalized
      const Batch minibatch = detail::gather_batch(dataset, order, begin,
                                                   count);
      auto [loss, cache] = forward(net, minibatch);
      if (!std::isfinite(loss)) {
        result.diverged = true;
        result.steps_run = step;
        return result;
      }
      const GradBundle grads = backward(net, cache);
      apply_step(net, grads, cfg, state);
      renormalize_overflow(net, state, cfg.renorm_threshold);
      ++step;
      if (step % opt.log_every == 0 && !try_log(epoch)) {
        result.steps_run = step;
        return result;
      }
    }
  }
  if (step > 0 &&
      (result.records.empty() || result.records.back().step != step))
    try_log(opt.epochs);
  result.steps_run = step;
  return result;
}

/// Runs paired trajectories from W and T_a(W) with identical batch streams
/// and returns the largest relative coordinate deviation between the second
/// trajectory and the rescaled first one. PSI optimizers should keep this at
/// rounding level; Euclidean ones drift. Overflow renormalization is not
/// applied here (the two runs would trigger it at different times).
inline double equivariance_audit(const BnMlp &net, const Batch &dataset,
                                 const OptConfig &cfg, const Rescale &a,
                                 std::size_t steps, std::size_t batch_size,
                                 std::uint64_t shuffle_seed) {
  cfg.validate();
  BnMlp base = net;
  BnMlp hat = apply_rescale(net, a);
  OptState base_state = make_opt_state(base);
  OptState hat_state = make_opt_state(hat);

  const std::size_t n = dataset.inputs.rows;
  Rng shuffle_rng(shuffle_seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i)
    order[i] = i;

  double max_dev = 0.0;
  auto record_dev = [&] {
    constexpr double tiny = std::numeric_limits<double>::min();
    for (std::size_t i = 0; i < base.psi_group_count(); ++i) {
      const auto w = base.psi_row(i);
      const auto wh = hat.psi_row(i);
      double denom = tiny;
      for (std::size_t j = 0; j < w.size(); ++j)
        denom = std::max(denom, std::abs(a.factors[i] * w[j]));
      for (std::size_t j = 0; j < w.size(); ++j)
        max_dev = std::max(max_dev,
                           std::abs(wh[j] - a.factors[i] * w[j]) / denom);
    }
    auto base_g = base.g_param_spans();
    auto hat_g = hat.g_param_spans();
    for (std::size_t s = 0; s < base_g.size(); ++s) {
      double denom = tiny;
      for (double x : base_g[s])
        denom = std::max(denom, std::abs(x));
      for (std::size_t j = 0; j < base_g[s].size(); ++j)
        max_dev = std::max(max_dev,
                           std::abs(hat_g[s][j] - base_g[s][j]) / denom);
    }
  };

  std::size_t done = 0;
  while (done < steps) {
    shuffle(order, shuffle_rng);
    for (std::size_t begin = 0; begin < n && done < steps;
         begin += batch_size) {
      const std::size_t count = std::min(batch_size, n - begin);
      if (count == 1 && net.has_any_bn())
        break;
      const Batch minibatch = detail::gather_batch(dataset, order, begin,
                                                   count);
      {
        auto [loss, cache] = forward(base, minibatch);
        (void)loss;
        apply_step(base, backward(base, cache), cfg, base_state);
      }
      {
        auto [loss, cache] = forward(hat, minibatch);
        (void)loss;
        apply_step(hat, backward(hat, cache), cfg, hat_state);
      }
      ++done;
      record_dev();
    }
  }
  return max_dev;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

} // namespace detail

/// First line is a '#'-prefixed single-line JSON metadata blob, then the
/// header and one row per record. wall_ms is written as 0 unless timing is
/// requested, keeping the output byte-reproducible.
inline void write_csv(std::ostream &os, const std::string &meta_json,
                      const std::vector<RunRecord> &records,
                      bool include_timing = false) {
  os << "# " << meta_json << "\n";
  os << "step,epoch,loss,grad_norm,norm_min,norm_max,wall_ms\n";
  for (const auto &r : records) {
    double nmin = 0.0;
    double nmax = 0.0;
    if (!r.group_norms.empty()) {
      nmin = r.group_norms.front();
      nmax = r.group_norms.front();
      for (double v : r.group_norms) {
        nmin = std::min(nmin, v);
        nmax = std::max(nmax, v);
      }
    }
    os << r.step << ',' << r.epoch << ',' << detail::fmt_double(r.loss) << ','
       << detail::fmt_double(r.grad_norm) << ',' << detail::fmt_double(nmin)
       << ',' << detail::fmt_double(nmax) << ','
       << detail::fmt_double(include_timing ? r.wall_ms : 0.0) << "\n";
  }
}

} // namespace psi
