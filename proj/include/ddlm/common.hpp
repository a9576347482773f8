#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>

namespace ddlm {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

template <typename S>
constexpr S neg_inf() {
  return -std::numeric_limits<S>::infinity();
}

/// Numerically stable softmax of one row; -inf entries map to exact zeros.
template <typename Derived>
RowVec<typename Derived::Scalar> softmax_row(const Eigen::MatrixBase<Derived>& z) {
  using S = typename Derived::Scalar;
  const S m = z.maxCoeff();
  require(std::isfinite(double(m)), "softmax_row: no finite entry");
  RowVec<S> e = (z.array() - m).exp();
  return e / e.sum();
}

/// log softmax(z)[idx] of one row, computed without forming the full softmax.
template <typename Derived>
typename Derived::Scalar log_softmax_at(const Eigen::MatrixBase<Derived>& z, int idx) {
  using S = typename Derived::Scalar;
  const S m = z.maxCoeff();
  const S lse = std::log((z.array() - m).exp().sum());
  return (z(idx) - m) - lse;
}

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2)));
}

}  // namespace ddlm
