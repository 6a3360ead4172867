#pragma once

// Batch-normalized multilayer perceptron with analytic forward/backward
// passes and an explicit partition of the parameters into scale-invariant
// neuron rows (the rows of BN-fed weight matrices) and everything else.
//
// Layer l computes z = x W_l^T, optionally y = BN(z), and feeds act(y) to
// the next layer; the last layer emits y directly. Batch norm uses the
// biased (divide-by-batch) variance: that is what makes each BN-fed weight
// row positively scale-invariant at eps = 0.
//
// Canonical parameter orders, stable across runs:
//   flatten: per layer, weight row-major, then gamma, then beta.
//   scale-variant block g: per layer, the whole weight if the layer has no
//   BN, then gamma and beta if it does.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "psi/error.hpp"
#include "psi/linalg.hpp"

namespace psi {

enum class Activation { Elu, Relu, Identity };
enum class LossKind { Mse, SoftmaxCrossEntropy };

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bn = false;
};

struct BnLayer {
  Matrix weight;     // out x in
  Vector gamma;      // out when has_bn, empty otherwise
  Vector beta;       // out when has_bn, empty otherwise
  bool has_bn = false;
};

/// Identifies one scale-invariant weight row: W[layer].row(row).
struct PsiGroupId {
  std::size_t layer = 0;
  std::size_t row = 0;
};

struct BnMlp {
  std::vector<BnLayer> layers;
  Activation activation = Activation::Elu;
  double bn_epsilon = 1e-5;
  LossKind loss = LossKind::Mse;
  std::vector<PsiGroupId> psi_groups; // every BN-fed weight row, layer order

  std::size_t psi_group_count() const { return psi_groups.size(); }

  std::span<double> psi_row(std::size_t i) {
    const auto &id = psi_groups[i];
    return layers[id.layer].weight.row(id.row);
  }
  std::span<const double> psi_row(std::size_t i) const {
    const auto &id = psi_groups[i];
    return layers[id.layer].weight.row(id.row);
  }

  bool has_any_bn() const {
    for (const auto &l : layers)
      if (l.has_bn)
        return true;
    return false;
  }

  std::size_t in_dim() const { return layers.front().weight.cols; }
  std::size_t out_dim() const { return layers.back().weight.rows; }

  /// Scale-variant parameter blocks in canonical g order.
  std::vector<std::span<double>> g_param_spans() {
    std::vector<std::span<double>> spans;
    for (auto &l : layers) {
      if (l.has_bn) {
        spans.emplace_back(l.gamma);
        spans.emplace_back(l.beta);
      } else {
        spans.emplace_back(l.weight.data);
      }
    }
    return spans;
  }

  std::size_t g_param_count() const {
    std::size_t n = 0;
    for (const auto &l : layers)
      n += l.has_bn ? l.gamma.size() + l.beta.size() : l.weight.data.size();
    return n;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto &l : layers)
      n += l.weight.data.size() + l.gamma.size() + l.beta.size();
    return n;
  }
};

inline BnMlp make_mlp(const std::vector<LayerSpec> &specs,
                      Activation activation = Activation::Elu,
                      double bn_epsilon = 1e-5,
                      LossKind loss = LossKind::Mse) {
  if (specs.empty())
    throw ConfigError("network needs at least one layer");
  if (bn_epsilon < 0.0)
    throw ConfigError("bn_epsilon must be >= 0");
  BnMlp net;
  net.activation = activation;
  net.bn_epsilon = bn_epsilon;
  net.loss = loss;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto &s = specs[l];
    if (s.in == 0 || s.out == 0)
      throw ConfigError("layer dimensions must be positive");
    if (l > 0 && specs[l - 1].out != s.in)
      throw ConfigError("layer input does not match previous layer output");
    BnLayer layer;
    layer.weight = Matrix(s.out, s.in);
    layer.has_bn = s.bn;
    if (s.bn) {
      layer.gamma = Vector(s.out, 1.0);
      layer.beta = Vector(s.out, 0.0);
      for (std::size_t r = 0; r < s.out; ++r)
        net.psi_groups.push_back({l, r});
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

/// He-style init: weight entries ~ N(0, 2/in_dim), drawn layer by layer,
/// row-major. BN affine parameters stay at gamma = 1, beta = 0.
inline void init_he(BnMlp &net, Rng &rng) {
  for (auto &l : net.layers) {
    const double std = std::sqrt(2.0 / static_cast<double>(l.weight.cols));
    for (auto &w : l.weight.data)
      w = std * rng.next_gaussian();
  }
}

struct Batch {
  Matrix inputs;  // batch x in_dim
  Matrix targets; // batch x out_dim for MSE; batch x 1 class ids for CE
};

/// Euclidean gradients partitioned exactly like the parameters.
struct GradBundle {
  std::vector<Vector> psi_grads; // one per PSI group, same shape as the row
  Vector g_grad;                 // flat, canonical g order
};

inline double grad_norm(const GradBundle &g) {
  double acc = 0.0;
  for (const auto &grp : g.psi_grads)
    for (double x : grp)
      acc += x * x;
  for (double x : g.g_grad)
    acc += x * x;
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BnCache {
  Vector mean;    // per feature
  Vector var;     // biased, per feature
  Vector inv_std; // 1/sqrt(var + eps)
  Matrix xhat;    // normalized pre-affine values
};

/// Per-feature batch norm: gamma * (z - mean)/sqrt(var + eps) + beta.
/// Variance is the biased two-pass estimate (divide by batch size).
inline std::pair<Matrix, BnCache> bn_forward(const Matrix &z,
                                             const Vector &gamma,
                                             const Vector &beta, double eps) {
  const std::size_t n = z.rows;
  const std::size_t dim = z.cols;
  if (n < 2)
    throw DimensionError("bn_forward: batch size must be >= 2");
  if (gamma.size() != dim || beta.size() != dim)
    throw DimensionError("bn_forward: affine parameter length mismatch");
  if (eps < 0.0)
    throw DomainError("bn_forward: eps must be >= 0");

  BnCache cache;
  cache.mean.resize(dim);
  cache.var.resize(dim);
  cache.inv_std.resize(dim);
  cache.xhat = Matrix(n, dim);
  Matrix out(n, dim);

  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < dim; ++j) {
    double mean = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      mean += z(b, j);
    mean *= inv_n;

    double var = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double d = z(b, j) - mean;
      var += d * d;
    }
    var *= inv_n;

    const double s = var + eps;
    if (s == 0.0)
      throw DegenerateVarianceError("bn_forward: var + eps == 0 for feature " +
                                    std::to_string(j));
    const double inv_std = 1.0 / std::sqrt(s);

    cache.mean[j] = mean;
    cache.var[j] = var;
    cache.inv_std[j] = inv_std;
    for (std::size_t b = 0; b < n; ++b) {
      const double xh = (z(b, j) - mean) * inv_std;
      cache.xhat(b, j) = xh;
      out(b, j) = gamma[j] * xh + beta[j];
    }
  }
  return {std::move(out), std::move(cache)};
}

/// Fault-injection switches used by the verification suite's mutation test.
struct BackwardHooks {
  bool negate_bn_input_grad = false;
};

struct BnGrads {
  Matrix dz;
  Vector dgamma;
  Vector dbeta;
};

/// Exact gradient of bn_forward for any eps >= 0:
///   dz = inv_std * gamma * (dout - mean(dout) - xhat * mean(dout .* xhat))
inline BnGrads bn_backward(const Matrix &dout, const BnCache &cache,
                           const Vector &gamma,
                           const BackwardHooks &hooks = {}) {
  const std::size_t n = dout.rows;
  const std::size_t dim = dout.cols;
  BnGrads g;
  g.dz = Matrix(n, dim);
  g.dgamma.resize(dim);
  g.dbeta.resize(dim);

  const double inv_n = 1.0 / static_cast<double>(n);
  const double flip = hooks.negate_bn_input_grad ? -1.0 : 1.0;
  for (std::size_t j = 0; j < dim; ++j) {
    double sum_d = 0.0;
    double sum_dx = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      sum_d += dout(b, j);
      sum_dx += dout(b, j) * cache.xhat(b, j);
    }
    g.dgamma[j] = sum_dx;
    g.dbeta[j] = sum_d;

    const double mean_g = gamma[j] * sum_d * inv_n;
    const double mean_gx = gamma[j] * sum_dx * inv_n;
    const double scale = flip * cache.inv_std[j];
    for (std::size_t b = 0; b < n; ++b) {
      const double gb = gamma[j] * dout(b, j);
      g.dz(b, j) = scale * (gb - mean_g - cache.xhat(b, j) * mean_gx);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Forward / backward over the whole net
// ---------------------------------------------------------------------------

namespace detail {

inline double act_value(Activation a, double x) {
  switch (a) {
  case Activation::Elu:
    return x > 0.0 ? x : std::expm1(x);
  case Activation::Relu:
    return x > 0.0 ? x : 0.0;
  case Activation::Identity:
    return x;
  }
  return x;
}

inline double act_deriv(Activation a, double x) {
  switch (a) {
  case Activation::Elu:
    return x > 0.0 ? 1.0 : std::exp(x);
  case Activation::Relu:
    return x > 0.0 ? 1.0 : 0.0;
  case Activation::Identity:
    return 1.0;
  }
  return 1.0;
}

// z = x W^T, batch rows against weight rows.
inline Matrix linear_forward(const Matrix &x, const Matrix &w) {
  if (x.cols != w.cols)
    throw DimensionError("forward: input width does not match layer");
  Matrix z(x.rows, w.rows);
  for (std::size_t b = 0; b < x.rows; ++b)
    for (std::size_t r = 0; r < w.rows; ++r)
      z(b, r) = dot(x.row(b), w.row(r));
  return z;
}

} // namespace detail

struct LayerCache {
  Matrix input;     // batch x in (value fed to this layer)
  BnCache bn;       // populated when the layer has BN
  Matrix act_input; // post-BN value fed to the activation (or emitted raw)
};

struct FwdCache {
  std::vector<LayerCache> layers;
  Matrix output;  // batch x out_dim
  Matrix targets; // copied from the batch
  double loss = 0.0;
};

/// Mean per-sample loss over the batch plus everything backward needs.
inline std::pair<double, FwdCache> forward(const BnMlp &net,
                                           const Batch &batch) {
  const std::size_t n = batch.inputs.rows;
  if (n == 0)
    throw DimensionError("forward: empty batch");
  if (net.has_any_bn() && n < 2)
    throw DimensionError("forward: batch size must be >= 2 with batch norm");
  if (batch.targets.rows != n)
    throw DimensionError("forward: target row count mismatch");

  FwdCache cache;
  cache.targets = batch.targets;
  Matrix h = batch.inputs;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto &layer = net.layers[l];
    LayerCache lc;
    lc.input = h;
    Matrix y = detail::linear_forward(h, layer.weight);
    if (layer.has_bn) {
      auto [bn_out, bn_cache] =
          bn_forward(y, layer.gamma, layer.beta, net.bn_epsilon);
      y = std::move(bn_out);
      lc.bn = std::move(bn_cache);
    }
    lc.act_input = y;
    const bool last = l + 1 == net.layers.size();
    if (!last) {
      for (auto &v : y.data)
        v = detail::act_value(net.activation, v);
    }
    cache.layers.push_back(std::move(lc));
    h = std::move(y);
  }
  cache.output = h;

  const std::size_t out_dim = cache.output.cols;
  double loss = 0.0;
  switch (net.loss) {
  case LossKind::Mse: {
    if (batch.targets.cols != out_dim)
      throw DimensionError("forward: MSE target width mismatch");
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < out_dim; ++j) {
        const double d = cache.output(b, j) - batch.targets(b, j);
        loss += d * d;
      }
    loss /= static_cast<double>(n);
    break;
  }
  case LossKind::SoftmaxCrossEntropy: {
    if (batch.targets.cols != 1)
      throw DimensionError("forward: CE targets must be one class id per row");
    for (std::size_t b = 0; b < n; ++b) {
      const auto cls = static_cast<std::size_t>(batch.targets(b, 0));
      if (cls >= out_dim)
        throw DimensionError("forward: class id out of range");
      double mx = cache.output(b, 0);
      for (std::size_t j = 1; j < out_dim; ++j)
        mx = std::max(mx, cache.output(b, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j)
        sum += std::exp(cache.output(b, j) - mx);
      loss += mx + std::log(sum) - cache.output(b, cls);
    }
    loss /= static_cast<double>(n);
    break;
  }
  }
  cache.loss = loss;
  return {loss, std::move(cache)};
}

/// Analytic gradient of the batch loss for every parameter, split into the
/// PSI rows and the flat scale-variant block.
inline GradBundle backward(const BnMlp &net, const FwdCache &cache,
                           const BackwardHooks &hooks = {}) {
  const std::size_t n = cache.output.rows;
  const std::size_t out_dim = cache.output.cols;
  const double inv_n = 1.0 / static_cast<double>(n);

  // dL/d(output)
  Matrix d(n, out_dim);
  switch (net.loss) {
  case LossKind::Mse:
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < out_dim; ++j)
        d(b, j) = 2.0 * inv_n * (cache.output(b, j) - cache.targets(b, j));
    break;
  case LossKind::SoftmaxCrossEntropy:
    for (std::size_t b = 0; b < n; ++b) {
      double mx = cache.output(b, 0);
      for (std::size_t j = 1; j < out_dim; ++j)
        mx = std::max(mx, cache.output(b, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j)
        sum += std::exp(cache.output(b, j) - mx);
      const auto cls = static_cast<std::size_t>(cache.targets(b, 0));
      for (std::size_t j = 0; j < out_dim; ++j) {
        const double p = std::exp(cache.output(b, j) - mx) / sum;
        d(b, j) = inv_n * (p - (j == cls ? 1.0 : 0.0));
      }
    }
    break;
  }

  std::vector<Matrix> weight_grads(net.layers.size());
  std::vector<Vector> gamma_grads(net.layers.size());
  std::vector<Vector> beta_grads(net.layers.size());

  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto &layer = net.layers[li];
    const auto &lc = cache.layers[li];
    const bool last = li + 1 == net.layers.size();

    if (!last) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < d.cols; ++j)
          d(b, j) *= detail::act_deriv(net.activation, lc.act_input(b, j));
    }

    if (layer.has_bn) {
      BnGrads bg = bn_backward(d, lc.bn, layer.gamma, hooks);
      gamma_grads[li] = std::move(bg.dgamma);
      beta_grads[li] = std::move(bg.dbeta);
      d = std::move(bg.dz);
    }

    // dW = d^T . input  (out x in), and d_input = d . W
    Matrix dw(layer.weight.rows, layer.weight.cols);
    for (std::size_t r = 0; r < dw.rows; ++r)
      for (std::size_t c = 0; c < dw.cols; ++c) {
        double acc = 0.0;
        for (std::size_t b = 0; b < n; ++b)
          acc += d(b, r) * lc.input(b, c);
        dw(r, c) = acc;
      }
    weight_grads[li] = std::move(dw);

    if (li > 0) {
      Matrix dprev(n, layer.weight.cols);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < layer.weight.cols; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < layer.weight.rows; ++r)
            acc += d(b, r) * layer.weight(r, c);
          dprev(b, c) = acc;
        }
      d = std::move(dprev);
    }
  }

  GradBundle out;
  out.psi_grads.reserve(net.psi_groups.size());
  for (const auto &id : net.psi_groups) {
    const auto row = weight_grads[id.layer].row(id.row);
    out.psi_grads.emplace_back(row.begin(), row.end());
  }
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    if (net.layers[li].has_bn) {
      out.g_grad.insert(out.g_grad.end(), gamma_grads[li].begin(),
                        gamma_grads[li].end());
      out.g_grad.insert(out.g_grad.end(), beta_grads[li].begin(),
                        beta_grads[li].end());
    } else {
      out.g_grad.insert(out.g_grad.end(), weight_grads[li].data.begin(),
                        weight_grads[li].data.end());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter flattening and snapshots
// ---------------------------------------------------------------------------

inline Vector flatten_params(const BnMlp &net) {
  Vector flat;
  flat.reserve(net.param_count());
  for (const auto &l : net.layers) {
    flat.insert(flat.end(), l.weight.data.begin(), l.weight.data.end());
    flat.insert(flat.end(), l.gamma.begin(), l.gamma.end());
    flat.insert(flat.end(), l.beta.begin(), l.beta.end());
  }
  return flat;
}

inline void load_params(BnMlp &net, const Vector &flat) {
  if (flat.size() != net.param_count())
    throw DimensionError("load_params: length mismatch");
  std::size_t off = 0;
  for (auto &l : net.layers) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off),
                l.weight.data.size(), l.weight.data.begin());
    off += l.weight.data.size();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off),
                l.gamma.size(), l.gamma.begin());
    off += l.gamma.size();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off),
                l.beta.size(), l.beta.begin());
    off += l.beta.size();
  }
}

namespace detail {

inline void put_u64_le(std::ostream &os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i)
    buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char *>(buf), 8);
}

inline std::uint64_t get_u64_le(std::istream &is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char *>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void put_f64_le(std::ostream &os, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  put_u64_le(os, bits);
}

inline double get_f64_le(std::istream &is) {
  const std::uint64_t bits = get_u64_le(is);
  double x;
  std::memcpy(&x, &bits, sizeof x);
  return x;
}

} // namespace detail

/// Snapshot format: u64 little-endian value count, then that many f64
/// values (little-endian) in canonical flatten order.
inline void write_param_snapshot(const BnMlp &net, std::ostream &os) {
  const Vector flat = flatten_params(net);
  detail::put_u64_le(os, flat.size());
  for (double x : flat)
    detail::put_f64_le(os, x);
}

inline void read_param_snapshot(BnMlp &net, std::istream &is) {
  const std::uint64_t count = detail::get_u64_le(is);
  if (!is || count != net.param_count())
    throw DimensionError("param snapshot: length mismatch");
  Vector flat(count);
  for (auto &x : flat)
    x = detail::get_f64_le(is);
  if (!is)
    throw Error("param snapshot: truncated stream");
  load_params(net, flat);
}

// ---------------------------------------------------------------------------
// Architecture JSON
// ---------------------------------------------------------------------------

inline std::string to_string(Activation a) {
  switch (a) {
  case Activation::Elu:
    return "elu";
  case Activation::Relu:
    return "relu";
  case Activation::Identity:
    return "identity";
  }
  return "elu";
}

inline std::string to_string(LossKind k) {
  return k == LossKind::Mse ? "mse" : "softmax_ce";
}

inline Activation activation_from_string(const std::string &s) {
  if (s == "elu")
    return Activation::Elu;
  if (s == "relu")
    return Activation::Relu;
  if (s == "identity")
    return Activation::Identity;
  throw ConfigError("unknown activation: " + s);
}

inline LossKind loss_from_string(const std::string &s) {
  if (s == "mse")
    return LossKind::Mse;
  if (s == "softmax_ce")
    return LossKind::SoftmaxCrossEntropy;
  throw ConfigError("unknown loss: " + s);
}

namespace detail {

inline void require_keys(const nlohmann::json &obj,
                         std::initializer_list<const char *> allowed,
                         const std::string &where) {
  for (const auto &item : obj.items()) {
    bool ok = false;
    for (const char *k : allowed)
      ok = ok || item.key() == k;
    if (!ok)
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

} // namespace detail

inline nlohmann::json arch_to_json(const BnMlp &net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto &l : net.layers)
    layers.push_back({{"in", l.weight.cols},
                      {"out", l.weight.rows},
                      {"bn", l.has_bn}});
  return {{"layers", layers},
          {"activation", to_string(net.activation)},
          {"bn_epsilon", net.bn_epsilon},
          {"loss", to_string(net.loss)}};
}

inline BnMlp arch_from_json(const nlohmann::json &j) {
  detail::require_keys(j, {"layers", "activation", "bn_epsilon", "loss"},
                       "network");
  if (!j.contains("layers") || !j["layers"].is_array())
    throw ConfigError("network: 'layers' array required");
  std::vector<LayerSpec> specs;
  for (const auto &lj : j["layers"]) {
    detail::require_keys(lj, {"in", "out", "bn"}, "network.layers[]");
    LayerSpec s;
    s.in = lj.at("in").get<std::size_t>();
    s.out = lj.at("out").get<std::size_t>();
    s.bn = lj.value("bn", false);
    specs.push_back(s);
  }
  return make_mlp(specs,
                  activation_from_string(j.value("activation", "elu")),
                  j.value("bn_epsilon", 1e-5),
                  loss_from_string(j.value("loss", "mse")));
}

} // namespace psi
