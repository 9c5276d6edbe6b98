#pragma once

#include <array>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cldyn/tensor.hpp"

namespace cldyn {

// Fusion quality measures over (fused, ir, vi) triples: mutual information,
// the Xydeas-Petrovic gradient preservation measure and the mean Pearson
// correlation. Pure functions of pixel data; degenerate inputs (no variance,
// no edges) return flagged zeros so batch evaluation never aborts.

struct MetricConfig {
  long bins = 256;
  // Q_AB/F preservation constants (standard values from the metric's
  // literature)
  double gamma_g = 0.9994, kappa_g = -15.0, sigma_g = 0.5;
  double gamma_a = 0.9879, kappa_a = -22.0, sigma_a = 0.8;

  void validate() const {
    if (bins < 2) throw ConfigError("metric histogram needs bins >= 2");
  }
};

namespace detail {

inline void check_triple(const Tensor& f, const Tensor& a, const Tensor& b) {
  if (f.shape() != a.shape() || f.shape() != b.shape())
    throw ShapeError("metric triple shape mismatch: " + f.shape().str() + ", " + a.shape().str() +
                     ", " + b.shape().str());
}

inline double mi_of_pair(const std::vector<double>& x, const std::vector<double>& y, long bins) {
  std::vector<long> joint(static_cast<size_t>(bins * bins), 0);
  auto bin_of = [bins](double v) {
    long b = static_cast<long>(v * static_cast<double>(bins));
    return std::min(std::max(b, 0L), bins - 1);
  };
  for (size_t i = 0; i < x.size(); ++i)
    ++joint[static_cast<size_t>(bin_of(x[i]) * bins + bin_of(y[i]))];
  std::vector<long> mx(static_cast<size_t>(bins), 0), my(static_cast<size_t>(bins), 0);
  for (long i = 0; i < bins; ++i)
    for (long j = 0; j < bins; ++j) {
      mx[static_cast<size_t>(i)] += joint[static_cast<size_t>(i * bins + j)];
      my[static_cast<size_t>(j)] += joint[static_cast<size_t>(i * bins + j)];
    }
  const double n = static_cast<double>(x.size());
  double mi = 0.0;
  for (long i = 0; i < bins; ++i) {
    if (mx[static_cast<size_t>(i)] == 0) continue;
    for (long j = 0; j < bins; ++j) {
      const long c = joint[static_cast<size_t>(i * bins + j)];
      if (c == 0) continue;
      const double pij = static_cast<double>(c) / n;
      const double pi = static_cast<double>(mx[static_cast<size_t>(i)]) / n;
      const double pj = static_cast<double>(my[static_cast<size_t>(j)]) / n;
      mi += pij * std::log2(pij / (pi * pj));
    }
  }
  return mi;
}

struct EdgeField {
  std::vector<double> strength, angle;
};

// Sobel strength/orientation per pixel, zero padding; angle uses
// atan(gy/gx) with the vertical limit at gx == 0.
inline EdgeField edge_field(const std::vector<double>& img, long h, long w) {
  static const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  const double pi_2 = 1.57079632679489661923;
  EdgeField e;
  e.strength.assign(img.size(), 0.0);
  e.angle.assign(img.size(), 0.0);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double gx = 0.0, gy = 0.0;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double v = img[static_cast<size_t>(yy * w + xx)];
          gx += kx[dy + 1][dx + 1] * v;
          gy += ky[dy + 1][dx + 1] * v;
        }
      const size_t i = static_cast<size_t>(y * w + x);
      e.strength[i] = std::sqrt(gx * gx + gy * gy);
      if (gx == 0.0)
        e.angle[i] = gy == 0.0 ? 0.0 : (gy > 0.0 ? pi_2 : -pi_2);
      else
        e.angle[i] = std::atan(gy / gx);
    }
  return e;
}

}  // namespace detail

/// MI(F;A) + MI(F;B) from joint histograms over [0,1].
inline double mutual_information(const Tensor& fused, const Tensor& a, const Tensor& b,
                                 long bins = 256) {
  detail::check_triple(fused, a, b);
  return detail::mi_of_pair(fused.data(), a.data(), bins) +
         detail::mi_of_pair(fused.data(), b.data(), bins);
}

/// Edge-strength weighted gradient preservation of both sources in the
/// fused image; 0 with the degenerate flag when neither source has edges.
inline double q_abf(const Tensor& fused, const Tensor& a, const Tensor& b,
                    const MetricConfig& cfg = {}, bool* degenerate = nullptr) {
  detail::check_triple(fused, a, b);
  if (fused.shape().rank != 3 || fused.shape()[0] != 1)
    throw ShapeError("q_abf expects 1 x H x W images");
  const long h = fused.shape()[1], w = fused.shape()[2];
  const double pi_2 = 1.57079632679489661923;
  detail::EdgeField ef = detail::edge_field(fused.data(), h, w);
  detail::EdgeField ea = detail::edge_field(a.data(), h, w);
  detail::EdgeField eb = detail::edge_field(b.data(), h, w);
  auto q = [&](const detail::EdgeField& src, size_t i) {
    const double gs = src.strength[i], gf = ef.strength[i];
    double rel = 0.0;
    if (gs != 0.0 || gf != 0.0) rel = std::min(gs, gf) / std::max(gs, gf);
    const double dor = 1.0 - std::abs(src.angle[i] - ef.angle[i]) / pi_2;
    const double qg = cfg.gamma_g / (1.0 + std::exp(cfg.kappa_g * (rel - cfg.sigma_g)));
    const double qa = cfg.gamma_a / (1.0 + std::exp(cfg.kappa_a * (dor - cfg.sigma_a)));
    return qg * qa;
  };
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < ef.strength.size(); ++i) {
    num += q(ea, i) * ea.strength[i] + q(eb, i) * eb.strength[i];
    den += ea.strength[i] + eb.strength[i];
  }
  if (den == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return num / den;
}

/// Mean of corr(F,A) and corr(F,B); a zero-variance image contributes a
/// flagged 0 term.
inline double q_cc(const Tensor& fused, const Tensor& a, const Tensor& b,
                   bool* degenerate = nullptr) {
  detail::check_triple(fused, a, b);
  if (degenerate) *degenerate = false;
  auto corr = [&](const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      mx += x[i];
      my += y[i];
    }
    mx /= n;
    my /= n;
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      cov += (x[i] - mx) * (y[i] - my);
      vx += (x[i] - mx) * (x[i] - mx);
      vy += (y[i] - my) * (y[i] - my);
    }
    if (vx == 0.0 || vy == 0.0) {
      if (degenerate) *degenerate = true;
      return 0.0;
    }
    return cov / std::sqrt(vx * vy);
  };
  return 0.5 * (corr(fused.data(), a.data()) + corr(fused.data(), b.data()));
}

struct ImageMetrics {
  std::string name;
  double mi = 0.0, qabf = 0.0, qcc = 0.0;
  bool qabf_degenerate = false, qcc_degenerate = false;
};

struct MetricReport {
  MetricConfig config;
  std::vector<ImageMetrics> per_image;
  double mean_mi = 0.0, mean_qabf = 0.0, mean_qcc = 0.0;
};

struct MetricTriple {
  std::string name;
  Tensor fused, ir, vi;
};

inline MetricReport evaluate_suite(const std::vector<MetricTriple>& triples,
                                   const MetricConfig& cfg = {}) {
  cfg.validate();
  if (triples.empty()) throw ConfigError("evaluate_suite: no input triples");
  MetricReport report;
  report.config = cfg;
  for (const auto& t : triples) {
    ImageMetrics m;
    m.name = t.name;
    m.mi = mutual_information(t.fused, t.ir, t.vi, cfg.bins);
    m.qabf = q_abf(t.fused, t.ir, t.vi, cfg, &m.qabf_degenerate);
    m.qcc = q_cc(t.fused, t.ir, t.vi, &m.qcc_degenerate);
    report.mean_mi += m.mi;
    report.mean_qabf += m.qabf;
    report.mean_qcc += m.qcc;
    report.per_image.push_back(std::move(m));
  }
  const double n = static_cast<double>(report.per_image.size());
  report.mean_mi /= n;
  report.mean_qabf /= n;
  report.mean_qcc /= n;
  return report;
}

/// Q_CB / Q_CV are out of scope; the schema keeps no columns for them.
inline std::string report_csv(const MetricReport& r, std::uint32_t config_hash) {
  std::ostringstream os;
  os.precision(17);
  os << "# config_hash=" << config_hash << " bins=" << r.config.bins << "\n";
  os << "image,mi,qabf,qcc,qabf_degenerate,qcc_degenerate\n";
  for (const auto& m : r.per_image)
    os << m.name << "," << m.mi << "," << m.qabf << "," << m.qcc << "," << (m.qabf_degenerate ? 1 : 0)
       << "," << (m.qcc_degenerate ? 1 : 0) << "\n";
  os << "mean," << r.mean_mi << "," << r.mean_qabf << "," << r.mean_qcc << ",,\n";
  return os.str();
}

inline std::string report_table(const MetricReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "image" << std::right << std::setw(10) << "MI"
     << std::setw(10) << "Q_AB/F" << std::setw(10) << "Q_CC" << "\n";
  os << std::string(50, '-') << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& m : r.per_image)
    os << std::left << std::setw(20) << m.name << std::right << std::setw(10) << m.mi
       << std::setw(10) << m.qabf << std::setw(10) << m.qcc << "\n";
  os << std::string(50, '-') << "\n";
  os << std::left << std::setw(20) << "mean" << std::right << std::setw(10) << r.mean_mi
     << std::setw(10) << r.mean_qabf << std::setw(10) << r.mean_qcc << "\n";
  return os.str();
}

}  // namespace cldyn
