#pragma once

#include <array>
#include <string>
#include <vector>

#include "cldyn/checkpoint.hpp"
#include "cldyn/config.hpp"
#include "cldyn/ops.hpp"
#include "cldyn/rng.hpp"
#include "cldyn/vfn.hpp"

namespace cldyn {

// Requirement-driven semantic compensation: task-conditioned dynamic
// depthwise kernels injected residually into the fusion features. The
// convolution configuration of each branch is chosen against frozen
// orthonormal prototypes; kernel weights are predicted from a basis vector
// selected from a learnable bank by cosine similarity.

struct ConvConfig {
  long k, d;
};

/// The four candidate configurations, index order fixed: (1,1) (3,1) (3,2) (3,3).
inline constexpr std::array<ConvConfig, 4> kConvConfigs{{{1, 1}, {3, 1}, {3, 2}, {3, 3}}};

struct Prototypes {
  Tensor p;  // 4 x e1, orthonormal rows, frozen
};

inline Prototypes init_prototypes(std::uint64_t seed, long e1 = 16) {
  Rng rng(derive_seed(seed, 0x9807));
  return {orthonormal_rows(4, e1, rng, false)};
}

/// Four configuration-indexed sub-banks of 32 basis vectors per modality.
/// Rows start pairwise orthonormal; training is free to move them.
struct BasisVectorBank {
  std::array<Tensor, 4> ir, vi;  // each 32 x e2
};

inline BasisVectorBank init_bvb(std::uint64_t seed, long e2 = 256) {
  BasisVectorBank bank;
  for (size_t c = 0; c < 4; ++c) {
    Rng rng_ir(derive_seed(seed, 0xB0B0 + c));
    Rng rng_vi(derive_seed(seed, 0xB1B1 + c));
    bank.ir[c] = orthonormal_rows(32, e2, rng_ir, true);
    bank.vi[c] = orthonormal_rows(32, e2, rng_vi, true);
  }
  return bank;
}

/// Two 3x3 convolutions with a LeakyReLU between; the task-feature side
/// carries an extra 1x1 head that maps its channel count onto the fusion
/// width before the shared stack.
struct ProjConv {
  bool has_head = false;
  ConvLayer head;         // 1x1, task channels -> width
  ConvLayer conv1, conv2; // 3x3, width -> width
};

inline ProjConv make_proj_conv(long width, long head_cin, Rng& rng) {
  ProjConv p;
  if (head_cin > 0) {
    p.has_head = true;
    p.head = make_conv(width, head_cin, 1, rng);
  }
  p.conv1 = make_conv(width, width, 3, rng);
  p.conv2 = make_conv(width, width, 3, rng);
  return p;
}

inline Tensor apply_proj_conv(const ProjConv& p, const Tensor& x) {
  Tensor h = x;
  if (p.has_head) h = apply_conv(p.head, h);
  return apply_conv(p.conv2, leaky_relu(apply_conv(p.conv1, h), 0.2));
}

struct ProjLinear {
  Tensor w1, b1, w2, b2;  // in -> hidden -> out, LeakyReLU between
};

inline ProjLinear make_proj_linear(long in, long hidden, long out, Rng& rng, bool zero_out = false) {
  ProjLinear p;
  p.w1 = he_normal(Shape{in, hidden}, in, rng, true);
  p.b1 = Tensor::zeros(Shape{hidden}, true);
  p.w2 = zero_out ? Tensor::zeros(Shape{hidden, out}, true)
                  : he_normal(Shape{hidden, out}, hidden, rng, true);
  p.b2 = Tensor::zeros(Shape{out}, true);
  return p;
}

inline Tensor apply_proj_linear(const ProjLinear& p, const Tensor& x) {
  return linear(leaky_relu(linear(x, p.w1, p.b1), 0.2), p.w2, p.b2);
}

/// One A2SI block: the configuration-query path (proj1..3), the basis-query
/// path (proj4..6) and the four configuration-specific prediction heads.
struct A2siParams {
  ProjConv proj1, proj2, proj4, proj5;
  ProjLinear proj3, proj6;
  std::array<ProjLinear, 4> pred;  // e2 -> 128 -> C*k*k, output layer zero-initialized
};

inline A2siParams init_a2si(long width, long task_channels, long e1, long e2, long branches,
                            Rng& rng) {
  A2siParams a;
  a.proj1 = make_proj_conv(width, 0, rng);
  a.proj2 = make_proj_conv(width, task_channels, rng);
  a.proj4 = make_proj_conv(width, 0, rng);
  a.proj5 = make_proj_conv(width, task_channels, rng);
  a.proj3 = make_proj_linear(2 * width, 128, e1 * branches, rng);
  a.proj6 = make_proj_linear(2 * width, 128, e2, rng);
  for (size_t c = 0; c < 4; ++c)
    a.pred[c] = make_proj_linear(e2, 128, width * kConvConfigs[c].k * kConvConfigs[c].k, rng,
                                 /*zero_out=*/true);
  return a;
}

struct RscParams {
  long layers = 2;        // L; one (ir, vi) block pair per layer 1..L-1
  long branches = 4;      // M
  long e1 = 16, e2 = 256;
  long channels = 32;
  long task_channels = 16;
  Prototypes prototypes;            // frozen, excluded from trainable()
  BasisVectorBank bank;
  std::vector<A2siParams> blocks;   // index 2*(l-1) = ir, 2*(l-1)+1 = vi
  bool frozen = false;

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (size_t c = 0; c < 4; ++c) {
      out.push_back(bank.ir[c]);
      out.push_back(bank.vi[c]);
    }
    auto add_conv = [&out](const ProjConv& p) {
      if (p.has_head) {
        out.push_back(p.head.w);
        out.push_back(p.head.b);
      }
      out.push_back(p.conv1.w);
      out.push_back(p.conv1.b);
      out.push_back(p.conv2.w);
      out.push_back(p.conv2.b);
    };
    auto add_lin = [&out](const ProjLinear& p) {
      out.push_back(p.w1);
      out.push_back(p.b1);
      out.push_back(p.w2);
      out.push_back(p.b2);
    };
    for (const auto& b : blocks) {
      add_conv(b.proj1);
      add_conv(b.proj2);
      add_lin(b.proj3);
      add_conv(b.proj4);
      add_conv(b.proj5);
      add_lin(b.proj6);
      for (const auto& h : b.pred) add_lin(h);
    }
    return out;
  }

  NamedTensorList named_tensors() const {
    NamedTensorList out;
    out.emplace_back("prototypes", prototypes.p);
    static const char* cfg_names[4] = {"k1d1", "k3d1", "k3d2", "k3d3"};
    for (size_t c = 0; c < 4; ++c) {
      out.emplace_back(std::string("bank.ir.") + cfg_names[c], bank.ir[c]);
      out.emplace_back(std::string("bank.vi.") + cfg_names[c], bank.vi[c]);
    }
    auto add_conv = [&out](const std::string& prefix, const ProjConv& p) {
      if (p.has_head) {
        out.emplace_back(prefix + ".head.w", p.head.w);
        out.emplace_back(prefix + ".head.b", p.head.b);
      }
      out.emplace_back(prefix + ".conv1.w", p.conv1.w);
      out.emplace_back(prefix + ".conv1.b", p.conv1.b);
      out.emplace_back(prefix + ".conv2.w", p.conv2.w);
      out.emplace_back(prefix + ".conv2.b", p.conv2.b);
    };
    auto add_lin = [&out](const std::string& prefix, const ProjLinear& p) {
      out.emplace_back(prefix + ".w1", p.w1);
      out.emplace_back(prefix + ".b1", p.b1);
      out.emplace_back(prefix + ".w2", p.w2);
      out.emplace_back(prefix + ".b2", p.b2);
    };
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string prefix = "block" + std::to_string(i);
      add_conv(prefix + ".proj1", blocks[i].proj1);
      add_conv(prefix + ".proj2", blocks[i].proj2);
      add_lin(prefix + ".proj3", blocks[i].proj3);
      add_conv(prefix + ".proj4", blocks[i].proj4);
      add_conv(prefix + ".proj5", blocks[i].proj5);
      add_lin(prefix + ".proj6", blocks[i].proj6);
      for (size_t c = 0; c < 4; ++c)
        add_lin(prefix + ".pred." + cfg_names[c], blocks[i].pred[c]);
    }
    return out;
  }

  void set_frozen(bool f) {
    frozen = f;
    for (auto& t : trainable()) const_cast<Tensor&>(t).set_requires_grad(!f);
  }

  std::uint32_t checksum() const { return params_crc32(named_tensors()); }
};

/// Exact count of trainable scalars (bank + projections + heads).
inline long rsc_param_count(const RscParams& p) {
  long n = 0;
  for (const auto& t : p.trainable()) n += t.numel();
  return n;
}

inline RscParams init_rsc(const RunConfig& cfg) {
  RscParams p;
  p.layers = cfg.layers;
  p.branches = cfg.branches;
  p.e1 = cfg.e1;
  p.e2 = cfg.e2;
  p.channels = cfg.base_channels;
  p.task_channels = 16;
  p.prototypes = init_prototypes(cfg.seed, cfg.e1);
  p.bank = init_bvb(cfg.seed, cfg.e2);
  Rng rng(derive_seed(cfg.seed, 0xA251));
  for (long l = 1; l < cfg.layers; ++l) {
    p.blocks.push_back(init_a2si(p.channels, p.task_channels, p.e1, p.e2, p.branches, rng));
    p.blocks.push_back(init_a2si(p.channels, p.task_channels, p.e1, p.e2, p.branches, rng));
  }
  return p;
}

/// Shared aggregation of scene and task evidence into a query vector: the
/// task feature is bilinearly resized to the fusion feature's extent,
/// both are projected, concatenated, globally pooled and passed through the
/// two-layer head.
inline Tensor aggregate_query(const Tensor& f_l, const Tensor& f_d, const ProjConv& proj_scene,
                              const ProjConv& proj_task, const ProjLinear& head) {
  detail::check_map(f_l, "aggregate_query");
  detail::check_map(f_d, "aggregate_query");
  Tensor f_d_aligned = bilinear_resize(f_d, f_l.shape()[1], f_l.shape()[2]);
  Tensor cat = concat_channels(apply_proj_conv(proj_scene, f_l), apply_proj_conv(proj_task, f_d_aligned));
  Tensor pooled = reshape(pool(cat, PoolKind::GAP), Shape{cat.shape()[0]});
  return apply_proj_linear(head, pooled);
}

/// Column j of S is the configuration distribution of branch j; the forward
/// structure commits to the argmax (lowest index on ties).
struct ConfigSelection {
  Tensor S;                  // 4 x M, columns sum to 1
  std::vector<long> chosen;  // M config indices
};

inline ConfigSelection select_configurations(const Tensor& v, const Prototypes& prototypes,
                                             long branches) {
  const long e1 = prototypes.p.shape()[1];
  if (v.shape().rank != 1 || v.shape()[0] != e1 * branches)
    throw ShapeError("select_configurations expects length e1*M = " + std::to_string(e1 * branches) +
                     ", got " + v.shape().str());
  // column-major reshape: column j of Resh(v) is the j-th e1-chunk of v
  Tensor resh = transpose(reshape(v, Shape{branches, e1}));
  Tensor logits = matmul(prototypes.p, resh);  // 4 x M
  ConfigSelection sel;
  sel.S = softmax(logits, 0);
  sel.chosen.resize(static_cast<size_t>(branches));
  for (long j = 0; j < branches; ++j) {
    long best = 0;
    for (long i = 1; i < 4; ++i)
      if (sel.S.data()[static_cast<size_t>(i * branches + j)] >
          sel.S.data()[static_cast<size_t>(best * branches + j)])
        best = i;
    sel.chosen[static_cast<size_t>(j)] = best;
  }
  return sel;
}

/// Maximum-similarity row of the sub-bank. Scores are plain data (selection
/// is structural); the returned row is a graph view so its values keep
/// receiving gradient.
inline std::pair<long, Tensor> select_basis(const Tensor& query, const Tensor& subbank) {
  if (query.shape().rank != 1 || subbank.shape().rank != 2 ||
      query.shape()[0] != subbank.shape()[1])
    throw ShapeError("select_basis: query " + query.shape().str() + " vs bank " + subbank.shape().str());
  const long rows = subbank.shape()[0], cols = subbank.shape()[1];
  const auto& q = query.data();
  double qn = 0.0;
  for (double x : q) qn += x * x;
  qn = std::sqrt(qn);
  long best = 0;
  double best_score = -2.0;
  for (long i = 0; i < rows; ++i) {
    const double* r = subbank.data().data() + i * cols;
    double dot = 0.0, rn = 0.0;
    for (long j = 0; j < cols; ++j) {
      dot += q[static_cast<size_t>(j)] * r[j];
      rn += r[j] * r[j];
    }
    const double score = dot / (qn * std::sqrt(rn) + 1e-12);
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return {best, select_row(subbank, best)};
}

/// Kernel weights for one branch, reshaped from the configuration-specific
/// head output to C x k x k.
inline Tensor predict_kernel(const Tensor& basis, const ProjLinear& head, long channels, long k) {
  Tensor flat = apply_proj_linear(head, basis);
  if (flat.shape()[0] != channels * k * k)
    throw ShapeError("predict_kernel head output " + flat.shape().str() + " != C*k*k");
  return reshape(flat, Shape{channels, k, k});
}

/// Per-branch structural decisions of one A2SI application, for diagnostics
/// and for pinning the structure during finite-difference checks.
struct BranchChoice {
  long config = 0;
  long basis = 0;
};
using SelectionTrace = std::vector<BranchChoice>;  // length M

/// F_out = F_l + (1/M) sum_m depthwise(F_l, W_m). With `pinned` the
/// structural choices are taken as given instead of recomputed.
inline Tensor a2si_forward(const Tensor& f_l, const Tensor& f_d, const A2siParams& a,
                           const Prototypes& prototypes, const std::array<Tensor, 4>& subbanks,
                           long branches, const SelectionTrace* pinned = nullptr,
                           SelectionTrace* trace_out = nullptr) {
  SelectionTrace trace(static_cast<size_t>(branches));
  Tensor q_basis = aggregate_query(f_l, f_d, a.proj4, a.proj5, a.proj6);
  if (pinned) {
    if (pinned->size() != static_cast<size_t>(branches))
      throw ShapeError("pinned selection trace arity mismatch");
    trace = *pinned;
  } else {
    Tensor v = aggregate_query(f_l, f_d, a.proj1, a.proj2, a.proj3);
    ConfigSelection sel = select_configurations(v, prototypes, branches);
    for (long m = 0; m < branches; ++m) trace[static_cast<size_t>(m)].config = sel.chosen[static_cast<size_t>(m)];
  }

  Tensor acc;
  for (long m = 0; m < branches; ++m) {
    auto& choice = trace[static_cast<size_t>(m)];
    const ConvConfig cfg = kConvConfigs[static_cast<size_t>(choice.config)];
    Tensor basis;
    if (pinned) {
      basis = select_row(subbanks[static_cast<size_t>(choice.config)], choice.basis);
    } else {
      auto [idx, row] = select_basis(q_basis, subbanks[static_cast<size_t>(choice.config)]);
      choice.basis = idx;
      basis = row;
    }
    Tensor kernel = predict_kernel(basis, a.pred[static_cast<size_t>(choice.config)],
                                   f_l.shape()[0], cfg.k);
    Tensor branch = depthwise_conv2d(f_l, kernel, cfg.d);
    acc = m == 0 ? branch : add(acc, branch);
  }
  if (trace_out) *trace_out = trace;
  return add(f_l, scale(acc, 1.0 / static_cast<double>(branches)));
}

/// Every exposed layer of both modalities rewritten under the same task
/// feature. Trace layout: blocks in (layer, modality) order, M choices each.
inline FeatureStack rsc_forward(const FeatureStack& stack, const Tensor& f_d, const RscParams& p,
                                const std::vector<SelectionTrace>* pinned = nullptr,
                                std::vector<SelectionTrace>* traces_out = nullptr) {
  if (stack.ir.size() != static_cast<size_t>(p.layers - 1) ||
      stack.vi.size() != static_cast<size_t>(p.layers - 1))
    throw ShapeError("rsc_forward: stack must carry layers 1..L-1 (" + std::to_string(p.layers - 1) +
                     "), got " + std::to_string(stack.ir.size()));
  if (pinned && pinned->size() != p.blocks.size())
    throw ShapeError("rsc_forward: pinned trace arity mismatch");
  FeatureStack out;
  std::vector<SelectionTrace> traces(p.blocks.size());
  for (long l = 0; l < p.layers - 1; ++l) {
    const size_t bi = static_cast<size_t>(2 * l);
    out.ir.push_back(a2si_forward(stack.ir[static_cast<size_t>(l)], f_d, p.blocks[bi], p.prototypes,
                                  p.bank.ir, p.branches, pinned ? &(*pinned)[bi] : nullptr,
                                  &traces[bi]));
    out.vi.push_back(a2si_forward(stack.vi[static_cast<size_t>(l)], f_d, p.blocks[bi + 1],
                                  p.prototypes, p.bank.vi, p.branches,
                                  pinned ? &(*pinned)[bi + 1] : nullptr, &traces[bi + 1]));
  }
  if (traces_out) *traces_out = std::move(traces);
  return out;
}

}  // namespace cldyn
