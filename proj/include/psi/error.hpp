#pragma once

#include <stdexcept>
#include <string>

namespace psi {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between operands (vector lengths, matrix dims, batch sizes).
class DimensionError : public Error {
public:
  using Error::Error;
};

/// A batch-norm feature saw var + eps == 0; the normalization is undefined.
class DegenerateVarianceError : public Error {
public:
  using Error::Error;
};

/// A scale-invariant weight group has zero norm; the manifold metric is
/// undefined there. Deliberately a hard error rather than a clamp.
class DegeneratePointError : public Error {
public:
  using Error::Error;
};

/// Argument outside its mathematical domain (e.g. nonpositive rescale factor).
class DomainError : public Error {
public:
  using Error::Error;
};

/// Malformed or inconsistent run configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

} // namespace psi
