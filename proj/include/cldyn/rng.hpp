#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cldyn/tensor.hpp"

namespace cldyn {

/// Deterministic random source. mt19937_64 has a standardized sequence and
/// the distributions below are hand-rolled, so draws are reproducible across
/// platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// uniform in [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// integer in [lo, hi] inclusive
  long uniform_int(long lo, long hi) {
    return lo + static_cast<long>(std::floor(uniform() * static_cast<double>(hi - lo + 1)));
  }

  /// standard normal via Box-Muller
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  std::vector<double> gaussian_vec(size_t n, double std_dev = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = gaussian() * std_dev;
    return v;
  }

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Stable derivation of per-purpose sub-seeds from a master seed (splitmix64
/// finalizer over master ^ stream).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// rows x cols matrix whose rows are orthonormal (rows <= cols), produced by
/// modified Gram-Schmidt on gaussian draws with one re-orthogonalization pass.
inline Tensor orthonormal_rows(long rows, long cols, Rng& rng, bool requires_grad = false) {
  if (rows > cols) throw ShapeError("orthonormal_rows: rows must be <= cols");
  std::vector<std::vector<double>> basis(static_cast<size_t>(rows));
  for (long r = 0; r < rows; ++r) {
    std::vector<double> v = rng.gaussian_vec(static_cast<size_t>(cols));
    for (int pass = 0; pass < 2; ++pass) {
      for (long p = 0; p < r; ++p) {
        double dot = 0.0;
        for (long j = 0; j < cols; ++j) dot += v[static_cast<size_t>(j)] * basis[static_cast<size_t>(p)][static_cast<size_t>(j)];
        for (long j = 0; j < cols; ++j) v[static_cast<size_t>(j)] -= dot * basis[static_cast<size_t>(p)][static_cast<size_t>(j)];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw Error("degenerate draw during orthonormalization");
    for (auto& x : v) x /= norm;
    basis[static_cast<size_t>(r)] = std::move(v);
  }
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(rows * cols));
  for (auto& row : basis) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::from_data(Shape{rows, cols}, std::move(flat), requires_grad);
}

/// He-style init for conv kernels (fan_in = Cin * k * k) and linear weights.
inline Tensor he_normal(const Shape& s, long fan_in, Rng& rng, bool requires_grad = true) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  return Tensor::from_data(s, rng.gaussian_vec(static_cast<size_t>(s.numel()), std_dev), requires_grad);
}

}  // namespace cldyn
