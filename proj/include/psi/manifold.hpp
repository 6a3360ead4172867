#pragma once

// Geometry of the quotient manifold of positively scale-invariant weights.
// Points are represented by the current weight rows themselves (horizontal
// lift at the representative); tangent vectors share that shape.
//
// Metric:     <X1, X2>_W = sum_i <x1_i, x2_i> / |w_i|^2
// Gradient:   grad_i = |w_i|^2 * euclid_i   (metric dual of the differential)
// Retraction: R_W(X) = W + X

#include <cstddef>
#include <utility>
#include <vector>

#include "psi/error.hpp"
#include "psi/linalg.hpp"
#include "psi/network.hpp"

namespace psi {

/// One positive factor per PSI group.
struct Rescale {
  Vector factors;

  static Rescale identity(std::size_t m) { return Rescale{Vector(m, 1.0)}; }

  Rescale inverse() const {
    Rescale inv{factors};
    for (auto &f : inv.factors)
      f = 1.0 / f;
    return inv;
  }
};

/// Tangent vector stored in the representative's coordinates.
struct Tangent {
  std::vector<Vector> components;
};

/// Copies of the PSI rows, in group order.
inline std::vector<Vector> psi_group_vectors(const BnMlp &net) {
  std::vector<Vector> groups;
  groups.reserve(net.psi_group_count());
  for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
    const auto row = net.psi_row(i);
    groups.emplace_back(row.begin(), row.end());
  }
  return groups;
}

/// w_i <- a_i * w_i for every PSI group; scale-variant parameters untouched.
inline BnMlp apply_rescale(const BnMlp &net, const Rescale &a) {
  if (a.factors.size() != net.psi_group_count())
    throw DimensionError("apply_rescale: factor count != PSI group count");
  for (double f : a.factors)
    if (!(f > 0.0))
      throw DomainError("apply_rescale: factors must be positive");
  BnMlp out = net;
  for (std::size_t i = 0; i < out.psi_group_count(); ++i) {
    auto row = out.psi_row(i);
    for (auto &x : row)
      x *= a.factors[i];
  }
  return out;
}

inline double metric_inner(const std::vector<Vector> &w_groups,
                           const Tangent &xi1, const Tangent &xi2) {
  if (xi1.components.size() != w_groups.size() ||
      xi2.components.size() != w_groups.size())
    throw DimensionError("metric_inner: group count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < w_groups.size(); ++i) {
    const double nrm = norm2(w_groups[i]);
    if (nrm == 0.0)
      throw DegeneratePointError("metric_inner: zero-norm PSI group");
    acc += dot(xi1.components[i], xi2.components[i]) / (nrm * nrm);
  }
  return acc;
}

/// Riemannian gradient from the Euclidean one; the scale-variant block of
/// the bundle is not part of the manifold and is left to the caller.
inline Tangent riemannian_grad(const std::vector<Vector> &w_groups,
                               const GradBundle &euclid) {
  if (euclid.psi_grads.size() != w_groups.size())
    throw DimensionError("riemannian_grad: group count mismatch");
  Tangent out;
  out.components.reserve(w_groups.size());
  for (std::size_t i = 0; i < w_groups.size(); ++i) {
    const double nrm = norm2(w_groups[i]);
    if (nrm == 0.0)
      throw DegeneratePointError("riemannian_grad: zero-norm PSI group");
    const double scale = nrm * nrm;
    Vector comp = euclid.psi_grads[i];
    for (auto &x : comp)
      x *= scale;
    out.components.push_back(std::move(comp));
  }
  return out;
}

/// R_W(X) = W + X, applied per group.
inline std::vector<Vector> retract(const std::vector<Vector> &w_groups,
                                   const Tangent &xi) {
  if (xi.components.size() != w_groups.size())
    throw DimensionError("retract: group count mismatch");
  std::vector<Vector> out = w_groups;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (xi.components[i].size() != out[i].size())
      throw DimensionError("retract: component shape mismatch");
    for (std::size_t j = 0; j < out[i].size(); ++j)
      out[i][j] += xi.components[i][j];
  }
  return out;
}

} // namespace psi
