#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cldyn/ops.hpp"

namespace cldyn {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  long coords_checked = 0;
  bool pass = true;
};

/// Central finite-difference check of reverse-mode gradients.
///
/// `forward` must rebuild the graph from the current parameter values and
/// return the scalar root. Gradients of each tensor in `params` are compared
/// against (f(x+h) - f(x-h)) / 2h coordinate-wise. Pass rule is
/// |ad - fd| <= atol + rtol * max(|ad|, |fd|), the usual guard so that
/// exact-zero gradients are not divided by finite-difference noise.
/// `coords_per_tensor` limits the probe to that many deterministically
/// sampled coordinates (0 = all).
inline GradCheckResult fd_check(const std::string& name,
                                const std::function<Tensor()>& forward,
                                std::vector<Tensor> params, double h = 1e-5,
                                double rtol = 1e-4, double atol = 1e-7,
                                long coords_per_tensor = 0,
                                std::uint64_t coord_seed = 0x5EEDC0DE) {
  GradCheckResult res;
  res.name = name;

  for (auto& p : params) p.zero_grad();
  Tensor root = forward();
  backward(root);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.grad().size() == p.data().size()) analytic.push_back(p.grad());
    else analytic.emplace_back(p.data().size(), 0.0);
  }

  std::uint64_t state = coord_seed;
  auto next = [&state]() {
    state ^= state << 13;
    state ^= state >> 7;
    state ^= state << 17;
    return state;
  };

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].data();
    const long n = static_cast<long>(data.size());
    std::vector<long> coords;
    if (coords_per_tensor <= 0 || coords_per_tensor >= n) {
      coords.resize(static_cast<size_t>(n));
      for (long i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (long i = 0; i < coords_per_tensor; ++i)
        coords.push_back(static_cast<long>(next() % static_cast<std::uint64_t>(n)));
    }
    for (long ci : coords) {
      const double orig = data[static_cast<size_t>(ci)];
      data[static_cast<size_t>(ci)] = orig + h;
      const double fp = forward().item();
      data[static_cast<size_t>(ci)] = orig - h;
      const double fm = forward().item();
      data[static_cast<size_t>(ci)] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = analytic[pi][static_cast<size_t>(ci)];
      const double diff = std::abs(ad - fd);
      const double mag = std::max(std::abs(ad), std::abs(fd));
      if (diff > atol + rtol * mag) res.pass = false;
      const double rel = diff / std::max(mag, 1e-3);
      if (rel > res.max_rel_err) res.max_rel_err = rel;
      ++res.coords_checked;
    }
  }
  return res;
}

}  // namespace cldyn
