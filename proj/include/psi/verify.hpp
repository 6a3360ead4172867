#pragma once

// Numeric verification suite behind `psi verify`: every algebraic identity
// the optimizer stack relies on, checked on seeded random instances with
// fixed tolerances. Each check reports its worst observed error so the
// report stays useful when something drifts.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "psi/experiments.hpp"
#include "psi/linalg.hpp"
#include "psi/manifold.hpp"
#include "psi/network.hpp"
#include "psi/optim.hpp"

namespace psi {

struct CheckResult {
  std::string name;
  double observed = 0.0;
  double threshold = 0.0;
  bool must_exceed = false; // negative controls pass by exceeding
  bool pass = false;
};

struct VerifyOptions {
  // Flips the sign of the BN input gradient inside backward; the finite
  // difference check must then fail. Exists only for mutation testing.
  bool inject_bn_backward_bug = false;
};

namespace detail {

inline CheckResult make_check(std::string name, double observed,
                              double threshold, bool must_exceed = false) {
  CheckResult r;
  r.name = std::move(name);
  r.observed = observed;
  r.threshold = threshold;
  r.must_exceed = must_exceed;
  r.pass = must_exceed ? observed > threshold : observed <= threshold;
  return r;
}

inline BnMlp verify_net(std::uint64_t seed, double eps, LossKind loss) {
  const std::size_t out = loss == LossKind::Mse ? 2 : 3;
  BnMlp net = make_mlp({{6, 10, true}, {10, out, false}}, Activation::Elu,
                       eps, loss);
  Rng rng(seed);
  init_he(net, rng);
  return net;
}

inline Batch verify_batch(std::uint64_t seed, LossKind loss,
                          std::size_t n = 12) {
  Rng rng(seed);
  Batch b;
  b.inputs = Matrix(n, 6);
  b.inputs.data = sample_gaussian(rng, n * 6, 0.0, 1.0);
  if (loss == LossKind::Mse) {
    b.targets = Matrix(n, 2);
    b.targets.data = sample_gaussian(rng, n * 2, 0.0, 1.0);
  } else {
    b.targets = Matrix(n, 1);
    for (std::size_t i = 0; i < n; ++i)
      b.targets(i, 0) = static_cast<double>(rng.next_below(3));
  }
  return b;
}

inline Rescale log_uniform_rescale(Rng &rng, std::size_t m, double lo,
                                   double hi) {
  Rescale a = Rescale::identity(m);
  const double span = std::log(hi / lo);
  for (auto &f : a.factors)
    f = std::exp(std::log(lo) + span * rng.next_uniform());
  return a;
}

/// Worst relative disagreement between backward() and central finite
/// differences with step 1e-5 * max(1, |theta|) per parameter.
inline double fd_worst_rel_err(BnMlp &net, const Batch &batch,
                               const BackwardHooks &hooks) {
  auto [loss0, cache] = forward(net, batch);
  (void)loss0;
  const GradBundle analytic = backward(net, cache, hooks);

  Vector analytic_flat;
  analytic_flat.reserve(net.param_count());
  std::size_t gi = 0;
  std::size_t goff = 0;
  for (const auto &l : net.layers) {
    if (l.has_bn) {
      for (std::size_t r = 0; r < l.weight.rows; ++r)
        for (double v : analytic.psi_grads[gi + r])
          analytic_flat.push_back(v);
      gi += l.weight.rows;
      for (std::size_t k = 0; k < l.gamma.size() + l.beta.size(); ++k)
        analytic_flat.push_back(analytic.g_grad[goff++]);
    } else {
      for (std::size_t k = 0; k < l.weight.data.size(); ++k)
        analytic_flat.push_back(analytic.g_grad[goff++]);
    }
  }

  const Vector theta = flatten_params(net);
  double worst = 0.0;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta[k]));
    Vector bumped = theta;
    bumped[k] = theta[k] + h;
    load_params(net, bumped);
    const double lp = forward(net, batch).first;
    bumped[k] = theta[k] - h;
    load_params(net, bumped);
    const double lm = forward(net, batch).first;
    const double fd = (lp - lm) / (2.0 * h);
    const double denom =
        std::max({std::abs(fd), std::abs(analytic_flat[k]), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic_flat[k]) / denom);
  }
  load_params(net, theta);
  return worst;
}

inline double rel_diff(double got, double want) {
  return std::abs(got - want) /
         std::max({std::abs(got), std::abs(want), 1e-300});
}

} // namespace detail

inline std::vector<CheckResult> run_verification(std::uint64_t seed,
                                                 const VerifyOptions &opts =
                                                     {}) {
  std::vector<CheckResult> results;
  Rng seeder(seed);
  BackwardHooks hooks;
  hooks.negate_bn_input_grad = opts.inject_bn_backward_bug;

  // Analytic gradients against central finite differences, both losses.
  {
    BnMlp net = detail::verify_net(seeder.next_u64(), 1e-5, LossKind::Mse);
    const Batch batch = detail::verify_batch(seeder.next_u64(),
                                             LossKind::Mse);
    results.push_back(detail::make_check(
        "gradient_fd_mse", detail::fd_worst_rel_err(net, batch, hooks),
        1e-5));
  }
  {
    BnMlp net = detail::verify_net(seeder.next_u64(), 1e-5,
                                   LossKind::SoftmaxCrossEntropy);
    const Batch batch = detail::verify_batch(seeder.next_u64(),
                                             LossKind::SoftmaxCrossEntropy);
    results.push_back(detail::make_check(
        "gradient_fd_softmax_ce",
        detail::fd_worst_rel_err(net, batch, hooks), 1e-5));
  }

  // Loss invariance under 20 random positive rescales, eps = 0.
  {
    const BnMlp net = detail::verify_net(seeder.next_u64(), 0.0,
                                         LossKind::Mse);
    const Batch batch = detail::verify_batch(seeder.next_u64(),
                                             LossKind::Mse);
    const double base = forward(net, batch).first;
    Rng rng(seeder.next_u64());
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const Rescale a = detail::log_uniform_rescale(
          rng, net.psi_group_count(), 1e-3, 1e3);
      worst = std::max(
          worst, detail::rel_diff(forward(apply_rescale(net, a), batch).first,
                                  base));
    }
    results.push_back(detail::make_check("psi_loss_invariance", worst,
                                         1e-10));
  }

  // Gradient scaling across representatives, 10 rescales.
  {
    const BnMlp net = detail::verify_net(seeder.next_u64(), 0.0,
                                         LossKind::Mse);
    const Batch batch = detail::verify_batch(seeder.next_u64(),
                                             LossKind::Mse);
    auto [l0, c0] = forward(net, batch);
    (void)l0;
    const GradBundle base = backward(net, c0);
    Rng rng(seeder.next_u64());
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const Rescale a = detail::log_uniform_rescale(
          rng, net.psi_group_count(), 1e-3, 1e3);
      const BnMlp scaled = apply_rescale(net, a);
      auto [l1, c1] = forward(scaled, batch);
      (void)l1;
      const GradBundle mapped = backward(scaled, c1);
      for (std::size_t i = 0; i < base.psi_grads.size(); ++i) {
        double num = 0.0;
        double den = 1e-300;
        for (std::size_t j = 0; j < base.psi_grads[i].size(); ++j) {
          num = std::max(num, std::abs(a.factors[i] * mapped.psi_grads[i][j] -
                                       base.psi_grads[i][j]));
          den = std::max(den, std::abs(base.psi_grads[i][j]));
        }
        worst = std::max(worst, num / den);
      }
    }
    results.push_back(detail::make_check("gradient_scaling", worst, 1e-8));
  }

  // PSI rows are perpendicular to their gradients on random batches.
  {
    const BnMlp net = detail::verify_net(seeder.next_u64(), 0.0,
                                         LossKind::Mse);
    Rng rng(seeder.next_u64());
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const Batch batch = detail::verify_batch(rng.next_u64(),
                                               LossKind::Mse);
      auto [loss, cache] = forward(net, batch);
      (void)loss;
      const GradBundle g = backward(net, cache);
      for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
        const auto row = net.psi_row(i);
        const Vector w(row.begin(), row.end());
        const double denom =
            std::max(norm2(w) * norm2(g.psi_grads[i]), 1e-300);
        worst = std::max(worst, std::abs(dot(w, g.psi_grads[i])) / denom);
      }
    }
    results.push_back(detail::make_check("perpendicularity", worst, 1e-8));
  }

  // Norm growth identity along 100 full-batch steps, GD and PSI-GD.
  for (OptKind kind : {OptKind::Gd, OptKind::PsiGd}) {
    BnMlp net = detail::verify_net(seeder.next_u64(), 0.0, LossKind::Mse);
    const Batch batch = detail::verify_batch(seeder.next_u64(),
                                             LossKind::Mse, 24);
    OptState st = make_opt_state(net);
    OptConfig cfg;
    cfg.kind = kind;
    cfg.lr_w = 0.05;
    cfg.lr_g = 0.05;
    double worst = 0.0;
    for (int s = 0; s < 100; ++s) {
      auto [loss, cache] = forward(net, batch);
      (void)loss;
      const GradBundle g = backward(net, cache);
      std::vector<double> nsq(net.psi_group_count());
      std::vector<double> step_sq(net.psi_group_count());
      for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
        const auto row = net.psi_row(i);
        nsq[i] = dot(row, row);
        const double gn = norm2(g.psi_grads[i]);
        const double eff = kind == OptKind::PsiGd ? cfg.lr_w * nsq[i]
                                                  : cfg.lr_w;
        step_sq[i] = eff * eff * gn * gn;
      }
      apply_step(net, g, cfg, st);
      for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
        const auto row = net.psi_row(i);
        worst = std::max(worst, std::abs(dot(row, row) - nsq[i] -
                                         step_sq[i]) /
                                    nsq[i]);
      }
    }
    results.push_back(detail::make_check(
        kind == OptKind::Gd ? "norm_identity_gd" : "norm_identity_psi_gd",
        worst, 1e-10));
  }

  // Paired-trajectory equivariance plus the Euclidean negative control.
  {
    ToyRegressionSpec spec;
    spec.n_samples = 128;
    spec.in_dim = 6;
    spec.hidden = 12;
    spec.mu_seed = seeder.next_u64();
    spec.data_seed = seeder.next_u64();
    spec.init_seed = seeder.next_u64();
    auto [dataset, mu] = gen_toy_regression(spec);
    (void)mu;
    const BnMlp net = make_toy_net(spec, Activation::Elu, 0.0);
    Rng rng(seeder.next_u64());
    const Rescale a = detail::log_uniform_rescale(
        rng, net.psi_group_count(), 1e-3, 1e3);

    OptConfig psi_cfg;
    psi_cfg.kind = OptKind::PsiSgdm;
    psi_cfg.lr_w = 0.1;
    psi_cfg.lr_g = 0.1;
    psi_cfg.momentum = 0.9;
    results.push_back(detail::make_check(
        "equivariance_psi_sgdm",
        equivariance_audit(net, dataset, psi_cfg, a, 200, 16,
                           spec.data_seed + 1),
        1e-6));

    OptConfig sgd_cfg;
    sgd_cfg.kind = OptKind::Sgd;
    sgd_cfg.lr_w = 0.1;
    sgd_cfg.lr_g = 0.1;
    results.push_back(detail::make_check(
        "equivariance_negative_control_sgd",
        equivariance_audit(net, dataset, sgd_cfg, a, 50, 16,
                           spec.data_seed + 1),
        1e-2, /*must_exceed=*/true));
  }

  // Metric duality: <grad, Xi>_W equals the Euclidean pairing.
  {
    Rng rng(seeder.next_u64());
    std::vector<Vector> w;
    GradBundle g;
    for (int i = 0; i < 5; ++i) {
      w.push_back(sample_gaussian(rng, 7, 0.0, 1.0));
      g.psi_grads.push_back(sample_gaussian(rng, 7, 0.0, 1.0));
    }
    const Tangent grad = riemannian_grad(w, g);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Tangent xi;
      for (int i = 0; i < 5; ++i)
        xi.components.push_back(sample_gaussian(rng, 7, 0.0, 1.0));
      double euclid = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i)
        euclid += dot(g.psi_grads[i], xi.components[i]);
      worst = std::max(worst,
                       detail::rel_diff(metric_inner(w, grad, xi), euclid));
    }
    results.push_back(detail::make_check("metric_duality", worst, 1e-10));
  }

  // Metric value is independent of the chosen representative.
  {
    Rng rng(seeder.next_u64());
    std::vector<Vector> w;
    Tangent x1;
    Tangent x2;
    for (int i = 0; i < 5; ++i) {
      w.push_back(sample_gaussian(rng, 7, 0.0, 1.0));
      x1.components.push_back(sample_gaussian(rng, 7, 0.0, 1.0));
      x2.components.push_back(sample_gaussian(rng, 7, 0.0, 1.0));
    }
    const double base = metric_inner(w, x1, x2);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const Rescale a = detail::log_uniform_rescale(rng, w.size(), 1e-3,
                                                    1e3);
      std::vector<Vector> ws = w;
      Tangent x1s = x1;
      Tangent x2s = x2;
      for (std::size_t i = 0; i < w.size(); ++i) {
        for (auto &v : ws[i])
          v *= a.factors[i];
        for (auto &v : x1s.components[i])
          v *= a.factors[i];
        for (auto &v : x2s.components[i])
          v *= a.factors[i];
      }
      worst = std::max(worst,
                       detail::rel_diff(metric_inner(ws, x1s, x2s), base));
    }
    results.push_back(detail::make_check("metric_rescale_invariance", worst,
                                         1e-10));
  }

  // Retraction axioms: exact at zero, tangent recovered by the quotient.
  {
    Rng rng(seeder.next_u64());
    std::vector<Vector> w;
    Tangent xi;
    Tangent zero;
    for (int i = 0; i < 4; ++i) {
      w.push_back(sample_gaussian(rng, 6, 0.0, 1.0));
      xi.components.push_back(sample_gaussian(rng, 6, 0.0, 1.0));
      zero.components.emplace_back(6, 0.0);
    }
    double zero_err = 0.0;
    const auto at_zero = retract(w, zero);
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = 0; j < w[i].size(); ++j)
        zero_err = std::max(zero_err, std::abs(at_zero[i][j] - w[i][j]));
    results.push_back(detail::make_check("retraction_zero", zero_err, 0.0));

    double quot_err = 0.0;
    for (double t : {1e-2, 1e-3, 1e-4}) {
      Tangent txi = xi;
      for (auto &c : txi.components)
        for (auto &v : c)
          v *= t;
      const auto moved = retract(w, txi);
      for (std::size_t i = 0; i < w.size(); ++i)
        for (std::size_t j = 0; j < w[i].size(); ++j)
          quot_err = std::max(
              quot_err, detail::rel_diff((moved[i][j] - w[i][j]) / t,
                                         xi.components[i][j]));
    }
    results.push_back(detail::make_check("retraction_tangency", quot_err,
                                         1e-10));
  }

  return results;
}

inline bool all_pass(const std::vector<CheckResult> &results) {
  for (const auto &r : results)
    if (!r.pass)
      return false;
  return true;
}

/// Fixed-width pass/fail table, one line per check plus an overall verdict.
inline void write_verify_report(std::ostream &os,
                                const std::vector<CheckResult> &results) {
  char line[160];
  std::snprintf(line, sizeof line, "%-36s %13s %15s  %s\n", "check",
                "max_error", "tolerance", "status");
  os << line;
  for (const auto &r : results) {
    std::snprintf(line, sizeof line, "%-36s %13.3e %s%14.3e  %s\n",
                  r.name.c_str(), r.observed, r.must_exceed ? ">" : "<",
                  r.threshold, r.pass ? "PASS" : "FAIL");
    os << line;
  }
  os << "overall: " << (all_pass(results) ? "PASS" : "FAIL") << "\n";
}

} // namespace psi
