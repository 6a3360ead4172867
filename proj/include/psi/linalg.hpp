#pragma once

// Minimal dense double-precision kernels shared by the whole library.
//
// Every reduction runs in plain left-to-right order so results are
// bit-stable on a given platform. No parallel or blocked summation here.

#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "psi/error.hpp"

namespace psi {

using Vector = std::vector<double>;

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vector data; // rows * cols, row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double &operator()(std::size_t r, std::size_t c) {
    return data[r * cols + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }

  std::span<double> row(std::size_t r) {
    return {data.data() + r * cols, cols};
  }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      m(i, i) = 1.0;
    return m;
  }

  bool operator==(const Matrix &other) const = default;
};

/// Inner product, summed left to right. dot(a,b) and dot(b,a) agree bitwise
/// because each product a_i*b_i commutes exactly.
inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += a[i] * b[i];
  return acc;
}

inline double dot(const Vector &a, const Vector &b) {
  return dot(std::span<const double>(a), std::span<const double>(b));
}

/// Euclidean norm; empty input gives 0.
inline double norm2(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v)
    acc += x * x;
  return std::sqrt(acc);
}

inline double norm2(const Vector &v) {
  return norm2(std::span<const double>(v));
}

/// Matrix-vector product with the same deterministic summation order.
inline Vector matvec(const Matrix &m, const Vector &v) {
  if (m.cols != v.size())
    throw DimensionError("matvec: dimension mismatch");
  Vector out(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r)
    out[r] = dot(m.row(r), std::span<const double>(v));
  return out;
}

/// Deterministic seeded generator: a splitmix64 sequence expands the seed
/// into the state of xoshiro256**. Integer-only state transitions, so the
/// stream is identical on every platform.
class Rng {
public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto &word : state_)
      word = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform draw in [0,1) with 53 random bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller, cosine branch only; consumes exactly
  /// two uniforms per draw. u1 is shifted into (0,1] so log(u1) is finite.
  double next_gaussian() {
    const double u1 =
        static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * kPi * u2);
  }

  /// Unbiased integer in [0, bound) via rejection sampling.
  std::uint64_t next_below(std::uint64_t bound) {
    assert(bound > 0);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = next_u64();
    while (x >= limit)
      x = next_u64();
    return x % bound;
  }

private:
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  static std::uint64_t splitmix64(std::uint64_t &x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
};

/// n gaussian draws scaled to N(mean, std^2). std == 0 returns exact copies
/// of mean (the underlying draws are still consumed).
inline Vector sample_gaussian(Rng &rng, std::size_t n, double mean,
                              double std) {
  assert(std >= 0.0);
  Vector out(n);
  for (auto &x : out)
    x = mean + std * rng.next_gaussian();
  return out;
}

/// In-place Fisher-Yates shuffle driven by the deterministic Rng.
template <typename T>
void shuffle(std::vector<T> &items, Rng &rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(items[i - 1], items[j]);
  }
}

} // namespace psi
