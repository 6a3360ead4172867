#pragma once

// Update rules on the PSI manifold (PSI-GD, PSI-SGD, PSI-SGDM) and their
// Euclidean baselines (GD, SGD, SGDM, Adam), plus overflow renormalization.
//
// A PSI step moves each scale-invariant row by -lr * |w|^2 * grad with the
// norm taken at the pre-update iterate; it is exactly a Euclidean step with
// per-group learning rate lr * |w|^2. Scale-variant parameters always take
// plain Euclidean updates. The momentum variant applies momentum to the PSI
// rows only; its scale-variant block uses plain SGD.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "psi/error.hpp"
#include "psi/linalg.hpp"
#include "psi/manifold.hpp"
#include "psi/network.hpp"

namespace psi {

enum class OptKind { PsiGd, PsiSgd, PsiSgdm, Gd, Sgd, Sgdm, Adam };

inline std::string to_string(OptKind k) {
  switch (k) {
  case OptKind::PsiGd:
    return "psi_gd";
  case OptKind::PsiSgd:
    return "psi_sgd";
  case OptKind::PsiSgdm:
    return "psi_sgdm";
  case OptKind::Gd:
    return "gd";
  case OptKind::Sgd:
    return "sgd";
  case OptKind::Sgdm:
    return "sgdm";
  case OptKind::Adam:
    return "adam";
  }
  return "sgd";
}

inline OptKind opt_kind_from_string(const std::string &s) {
  if (s == "psi_gd")
    return OptKind::PsiGd;
  if (s == "psi_sgd")
    return OptKind::PsiSgd;
  if (s == "psi_sgdm")
    return OptKind::PsiSgdm;
  if (s == "gd")
    return OptKind::Gd;
  if (s == "sgd")
    return OptKind::Sgd;
  if (s == "sgdm")
    return OptKind::Sgdm;
  if (s == "adam")
    return OptKind::Adam;
  throw ConfigError("unknown optimizer kind: " + s);
}

/// Piecewise-constant decay: from `step` onward the base learning rates are
/// multiplied by `factor` (factors are absolute, not cumulative).
struct LrStage {
  std::size_t step = 0;
  double factor = 1.0;
};

struct OptConfig {
  OptKind kind = OptKind::Sgd;
  double lr_w = 0.1;
  double lr_g = 0.1;
  double momentum = 0.0; // rho; ignored by the non-momentum rules
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::vector<LrStage> lr_schedule;
  double renorm_threshold = 1e4;

  void validate() const {
    if (!(lr_w > 0.0) || !(lr_g > 0.0))
      throw ConfigError("learning rates must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ConfigError("momentum must lie in [0,1)");
    if (!(renorm_threshold > 0.0))
      throw ConfigError("renorm_threshold must be positive");
  }

  bool is_psi() const {
    return kind == OptKind::PsiGd || kind == OptKind::PsiSgd ||
           kind == OptKind::PsiSgdm;
  }
};

/// Schedule factor in effect at step t (largest stage step <= t wins).
inline double lr_factor(const OptConfig &cfg, std::size_t t) {
  double factor = 1.0;
  std::size_t best = 0;
  bool found = false;
  for (const auto &st : cfg.lr_schedule) {
    if (st.step <= t && (!found || st.step >= best)) {
      best = st.step;
      factor = st.factor;
      found = true;
    }
  }
  return factor;
}

struct OptState {
  std::vector<Vector> momentum_psi; // U, one buffer per PSI group
  Vector momentum_g;
  std::vector<Vector> adam_m_psi;
  std::vector<Vector> adam_v_psi;
  Vector adam_m_g;
  Vector adam_v_g;
  std::size_t step = 0;
};

inline OptState make_opt_state(const BnMlp &net) {
  OptState st;
  const std::size_t m = net.psi_group_count();
  st.momentum_psi.reserve(m);
  for (std::size_t i = 0; i < m; ++i)
    st.momentum_psi.emplace_back(net.psi_row(i).size(), 0.0);
  st.momentum_g = Vector(net.g_param_count(), 0.0);
  st.adam_m_psi = st.momentum_psi;
  st.adam_v_psi = st.momentum_psi;
  st.adam_m_g = st.momentum_g;
  st.adam_v_g = st.momentum_g;
  return st;
}

namespace detail {

inline void check_grad_shapes(const BnMlp &net, const GradBundle &grads) {
  if (grads.psi_grads.size() != net.psi_group_count())
    throw DimensionError("step: PSI gradient group count mismatch");
  if (grads.g_grad.size() != net.g_param_count())
    throw DimensionError("step: scale-variant gradient length mismatch");
}

/// |w|^2 of a PSI row at the pre-update iterate; zero is a hard error.
inline double psi_norm_sq(std::span<const double> row) {
  const double nsq = dot(row, row);
  if (nsq == 0.0)
    throw DegeneratePointError("step: zero-norm PSI group");
  return nsq;
}

inline void sgd_update_g(BnMlp &net, const GradBundle &grads, double eff_g) {
  std::size_t off = 0;
  for (auto span : net.g_param_spans()) {
    for (std::size_t j = 0; j < span.size(); ++j)
      span[j] -= eff_g * grads.g_grad[off + j];
    off += span.size();
  }
}

} // namespace detail

/// Plain Euclidean step for both partitions (GD and SGD share this rule;
/// they differ only in what gradient the caller computed).
inline void step_gd(BnMlp &net, const GradBundle &grads, const OptConfig &cfg,
                    OptState &state) {
  detail::check_grad_shapes(net, grads);
  const double f = lr_factor(cfg, state.step);
  const double eff_w = cfg.lr_w * f;
  for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
    auto row = net.psi_row(i);
    const auto &g = grads.psi_grads[i];
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] -= eff_w * g[j];
  }
  detail::sgd_update_g(net, grads, cfg.lr_g * f);
  ++state.step;
}

inline void step_sgd(BnMlp &net, const GradBundle &grads, const OptConfig &cfg,
                     OptState &state) {
  step_gd(net, grads, cfg, state);
}

/// Heavy-ball momentum on every parameter: u <- rho*u - lr*grad; theta += u.
inline void step_sgdm(BnMlp &net, const GradBundle &grads,
                      const OptConfig &cfg, OptState &state) {
  detail::check_grad_shapes(net, grads);
  const double f = lr_factor(cfg, state.step);
  const double eff_w = cfg.lr_w * f;
  const double eff_g = cfg.lr_g * f;
  const double rho = cfg.momentum;
  for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
    auto row = net.psi_row(i);
    auto &u = state.momentum_psi[i];
    const auto &g = grads.psi_grads[i];
    for (std::size_t j = 0; j < row.size(); ++j) {
      u[j] = rho * u[j] - eff_w * g[j];
      row[j] += u[j];
    }
  }
  std::size_t off = 0;
  for (auto span : net.g_param_spans()) {
    for (std::size_t j = 0; j < span.size(); ++j) {
      auto &u = state.momentum_g[off + j];
      u = rho * u - eff_g * grads.g_grad[off + j];
      span[j] += u;
    }
    off += span.size();
  }
  ++state.step;
}

/// Riemannian step: w <- w - lr * |w|^2 * grad per group, norm taken before
/// the update; scale-variant block takes a plain Euclidean step.
inline void step_psi_gd(BnMlp &net, const GradBundle &grads,
                        const OptConfig &cfg, OptState &state) {
  detail::check_grad_shapes(net, grads);
  const double f = lr_factor(cfg, state.step);
  const double eff_w = cfg.lr_w * f;
  for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
    auto row = net.psi_row(i);
    const double scale = eff_w * detail::psi_norm_sq(row);
    const auto &g = grads.psi_grads[i];
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] -= scale * g[j];
  }
  detail::sgd_update_g(net, grads, cfg.lr_g * f);
  ++state.step;
}

inline void step_psi_sgd(BnMlp &net, const GradBundle &grads,
                         const OptConfig &cfg, OptState &state) {
  step_psi_gd(net, grads, cfg, state);
}

/// u <- rho*u - lr * |w|^2 * grad; w <- w + u. The scale-variant block is
/// updated by plain SGD, without momentum.
inline void step_psi_sgdm(BnMlp &net, const GradBundle &grads,
                          const OptConfig &cfg, OptState &state) {
  detail::check_grad_shapes(net, grads);
  const double f = lr_factor(cfg, state.step);
  const double eff_w = cfg.lr_w * f;
  const double rho = cfg.momentum;
  for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
    auto row = net.psi_row(i);
    auto &u = state.momentum_psi[i];
    const double scale = eff_w * detail::psi_norm_sq(row);
    const auto &g = grads.psi_grads[i];
    for (std::size_t j = 0; j < row.size(); ++j) {
      u[j] = rho * u[j] - scale * g[j];
      row[j] += u[j];
    }
  }
  detail::sgd_update_g(net, grads, cfg.lr_g * f);
  ++state.step;
}

/// Standard Adam with bias correction, applied uniformly to all parameters
/// (lr_w for the PSI rows, lr_g for the rest).
inline void step_adam(BnMlp &net, const GradBundle &grads,
                      const OptConfig &cfg, OptState &state) {
  detail::check_grad_shapes(net, grads);
  const double f = lr_factor(cfg, state.step);
  const auto t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);

  auto update = [&](double &theta, double &m, double &v, double g,
                    double eff) {
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g;
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    theta -= eff * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  };

  const double eff_w = cfg.lr_w * f;
  for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
    auto row = net.psi_row(i);
    const auto &g = grads.psi_grads[i];
    for (std::size_t j = 0; j < row.size(); ++j)
      update(row[j], state.adam_m_psi[i][j], state.adam_v_psi[i][j], g[j],
             eff_w);
  }
  const double eff_g = cfg.lr_g * f;
  std::size_t off = 0;
  for (auto span : net.g_param_spans()) {
    for (std::size_t j = 0; j < span.size(); ++j)
      update(span[j], state.adam_m_g[off + j], state.adam_v_g[off + j],
             grads.g_grad[off + j], eff_g);
    off += span.size();
  }
  ++state.step;
}

inline void apply_step(BnMlp &net, const GradBundle &grads,
                       const OptConfig &cfg, OptState &state) {
  switch (cfg.kind) {
  case OptKind::PsiGd:
    return step_psi_gd(net, grads, cfg, state);
  case OptKind::PsiSgd:
    return step_psi_sgd(net, grads, cfg, state);
  case OptKind::PsiSgdm:
    return step_psi_sgdm(net, grads, cfg, state);
  case OptKind::Gd:
    return step_gd(net, grads, cfg, state);
  case OptKind::Sgd:
    return step_sgd(net, grads, cfg, state);
  case OptKind::Sgdm:
    return step_sgdm(net, grads, cfg, state);
  case OptKind::Adam:
    return step_adam(net, grads, cfg, state);
  }
}

/// Rescales every PSI group whose norm exceeds the threshold back to unit
/// norm. The momentum buffer is rescaled by the same factor so that the
/// (W, U) pair keeps transforming jointly and trajectory equivariance
/// survives the renormalization. Returns the rescale that was applied.
inline Rescale renormalize_overflow(BnMlp &net, OptState &state,
                                    double threshold) {
  if (!(threshold > 0.0))
    throw DomainError("renormalize_overflow: threshold must be positive");
  Rescale applied = Rescale::identity(net.psi_group_count());
  for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
    auto row = net.psi_row(i);
    const double nrm = norm2(row);
    if (nrm > threshold) {
      const double c = 1.0 / nrm;
      for (auto &x : row)
        x *= c;
      if (i < state.momentum_psi.size())
        for (auto &x : state.momentum_psi[i])
          x *= c;
      applied.factors[i] = c;
    }
  }
  return applied;
}

} // namespace psi
