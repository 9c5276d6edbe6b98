#pragma once

#include <string>
#include <vector>

#include "cldyn/adam.hpp"
#include "cldyn/checkpoint.hpp"
#include "cldyn/config.hpp"
#include "cldyn/ops.hpp"
#include "cldyn/rng.hpp"

namespace cldyn {

/// Registered infrared/visible pair, both 1 x H x W in [0,1].
struct ImagePair {
  Tensor ir, vi;
};

inline void check_pair(const ImagePair& p) {
  if (p.ir.shape().rank != 3 || p.ir.shape()[0] != 1)
    throw ShapeError("pair images must be 1 x H x W, got " + p.ir.shape().str());
  if (p.ir.shape() != p.vi.shape())
    throw ShapeError("pair spatial mismatch: " + p.ir.shape().str() + " vs " + p.vi.shape().str());
}

struct ConvLayer {
  Tensor w;  // Cout x Cin x k x k
  Tensor b;  // Cout
};

inline ConvLayer make_conv(long cout, long cin, long k, Rng& rng) {
  ConvLayer l;
  l.w = he_normal(Shape{cout, cin, k, k}, cin * k * k, rng, true);
  l.b = Tensor::zeros(Shape{cout}, true);
  return l;
}

inline Tensor apply_conv(const ConvLayer& l, const Tensor& x, long dilation = 1) {
  return conv2d(x, l.w, dilation, l.b);
}

/// Feature extraction block: a single widening conv for the entry layer,
/// three convolutions for deeper layers, LeakyReLU(0.2) after each.
struct FebParams {
  std::vector<ConvLayer> convs;
};

inline FebParams make_feb(long layer_index, long cin, long cout, Rng& rng) {
  FebParams f;
  if (layer_index == 1) {
    f.convs.push_back(make_conv(cout, cin, 3, rng));
  } else {
    f.convs.push_back(make_conv(cout, cin, 3, rng));
    f.convs.push_back(make_conv(cout, cout, 3, rng));
    f.convs.push_back(make_conv(cout, cout, 3, rng));
  }
  return f;
}

inline Tensor feb_forward(const Tensor& x, const FebParams& feb) {
  Tensor h = x;
  for (const auto& conv : feb.convs) h = leaky_relu(apply_conv(conv, h), 0.2);
  return h;
}

/// Fusion reconstruction: Sobel-driven pooled attention over the
/// concatenated final features, L fusion FEBs at doubled width, then a
/// three-step reconstruction to one sigmoid channel.
struct FrbParams {
  std::vector<FebParams> fuse_febs;  // L blocks at 2*C channels
  ConvLayer recon1, recon2, recon3;  // 2C -> C -> C/2 -> 1
};

struct VfnParams {
  long layers = 2;         // L
  long channels = 32;      // base width
  std::vector<FebParams> feb_ir, feb_vi;  // one per layer 1..L
  FrbParams frb;
  bool frozen = false;

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    auto add_feb = [&out](const FebParams& f) {
      for (const auto& c : f.convs) {
        out.push_back(c.w);
        out.push_back(c.b);
      }
    };
    for (const auto& f : feb_ir) add_feb(f);
    for (const auto& f : feb_vi) add_feb(f);
    for (const auto& f : frb.fuse_febs) add_feb(f);
    for (const ConvLayer* c : {&frb.recon1, &frb.recon2, &frb.recon3}) {
      out.push_back(c->w);
      out.push_back(c->b);
    }
    return out;
  }

  NamedTensorList named_tensors() const {
    NamedTensorList out;
    auto add_feb = [&out](const std::string& prefix, const FebParams& f) {
      for (size_t i = 0; i < f.convs.size(); ++i) {
        out.emplace_back(prefix + ".conv" + std::to_string(i + 1) + ".w", f.convs[i].w);
        out.emplace_back(prefix + ".conv" + std::to_string(i + 1) + ".b", f.convs[i].b);
      }
    };
    for (size_t l = 0; l < feb_ir.size(); ++l) add_feb("feb_ir." + std::to_string(l + 1), feb_ir[l]);
    for (size_t l = 0; l < feb_vi.size(); ++l) add_feb("feb_vi." + std::to_string(l + 1), feb_vi[l]);
    for (size_t l = 0; l < frb.fuse_febs.size(); ++l)
      add_feb("frb.feb." + std::to_string(l + 1), frb.fuse_febs[l]);
    out.emplace_back("frb.recon1.w", frb.recon1.w);
    out.emplace_back("frb.recon1.b", frb.recon1.b);
    out.emplace_back("frb.recon2.w", frb.recon2.w);
    out.emplace_back("frb.recon2.b", frb.recon2.b);
    out.emplace_back("frb.recon3.w", frb.recon3.w);
    out.emplace_back("frb.recon3.b", frb.recon3.b);
    return out;
  }

  long param_count() const {
    long n = 0;
    for (const auto& t : trainable()) n += t.numel();
    return n;
  }

  void set_frozen(bool f) {
    frozen = f;
    for (auto& t : trainable()) const_cast<Tensor&>(t).set_requires_grad(!f);
  }

  std::uint32_t checksum() const { return params_crc32(named_tensors()); }
};

inline VfnParams init_vfn(long layers, long channels, std::uint64_t seed) {
  if (layers < 2) throw ConfigError("VFN needs L >= 2");
  Rng rng(derive_seed(seed, 0x7F11));
  VfnParams p;
  p.layers = layers;
  p.channels = channels;
  for (long l = 1; l <= layers; ++l) {
    p.feb_ir.push_back(make_feb(l, l == 1 ? 1 : channels, channels, rng));
    p.feb_vi.push_back(make_feb(l, l == 1 ? 1 : channels, channels, rng));
  }
  const long wide = 2 * channels;
  for (long l = 0; l < layers; ++l) {
    FebParams f;
    f.convs.push_back(make_conv(wide, wide, 3, rng));
    f.convs.push_back(make_conv(wide, wide, 3, rng));
    f.convs.push_back(make_conv(wide, wide, 3, rng));
    p.frb.fuse_febs.push_back(std::move(f));
  }
  p.frb.recon1 = make_conv(channels, wide, 3, rng);
  p.frb.recon2 = make_conv(channels / 2, channels, 3, rng);
  p.frb.recon3 = make_conv(1, channels / 2, 3, rng);
  return p;
}

/// Per-modality intermediate features F^l for l = 1..L-1, the layers the
/// compensation module rewrites.
struct FeatureStack {
  std::vector<Tensor> ir, vi;
};

inline Tensor frb_forward(const Tensor& f_ir, const Tensor& f_vi, const FrbParams& frb) {
  if (f_ir.shape() != f_vi.shape())
    throw ShapeError("frb_forward: " + f_ir.shape().str() + " vs " + f_vi.shape().str());
  const long h = f_ir.shape()[1], w = f_ir.shape()[2];
  Tensor grad_cat = concat_channels(sobel(f_ir), sobel(f_vi));
  Tensor att = sigmoid(mul(mul(broadcast_hw(pool(grad_cat, PoolKind::GAP), h, w),
                               broadcast_hw(pool(grad_cat, PoolKind::GMP), h, w)),
                           mul(pool(grad_cat, PoolKind::MeanP), pool(grad_cat, PoolKind::MaxP))));
  Tensor x = mul(att, concat_channels(f_ir, f_vi));
  for (const auto& feb : frb.fuse_febs) x = feb_forward(x, feb);
  x = leaky_relu(apply_conv(frb.recon1, x), 0.2);
  x = leaky_relu(apply_conv(frb.recon2, x), 0.2);
  return sigmoid(apply_conv(frb.recon3, x));
}

namespace detail {
/// Last extraction layer plus reconstruction; both the plain forward pass
/// and the injection path run through here so that injecting the native
/// stack reproduces the native output bitwise.
inline Tensor finish_fusion(const Tensor& f_ir_prev, const Tensor& f_vi_prev, const VfnParams& p) {
  Tensor f_ir_last = feb_forward(f_ir_prev, p.feb_ir.back());
  Tensor f_vi_last = feb_forward(f_vi_prev, p.feb_vi.back());
  return frb_forward(f_ir_last, f_vi_last, p.frb);
}
}  // namespace detail

struct VfnOutput {
  Tensor fused;        // I_f, 1 x H x W in (0,1)
  FeatureStack stack;  // F^l for l = 1..L-1
};

inline VfnOutput vfn_forward(const ImagePair& pair, const VfnParams& p) {
  check_pair(pair);
  VfnOutput out;
  Tensor f_ir = pair.ir, f_vi = pair.vi;
  for (long l = 0; l < p.layers - 1; ++l) {
    f_ir = feb_forward(f_ir, p.feb_ir[static_cast<size_t>(l)]);
    f_vi = feb_forward(f_vi, p.feb_vi[static_cast<size_t>(l)]);
    out.stack.ir.push_back(f_ir);
    out.stack.vi.push_back(f_vi);
  }
  out.fused = detail::finish_fusion(f_ir, f_vi, p);
  return out;
}

/// Re-enters the frozen network with replaced intermediate features
/// (the stack as a whole substitutes layers 1..L-1; computation resumes
/// from the deepest replaced layer).
inline Tensor vfn_forward_with_injection(const ImagePair& pair, const VfnParams& p,
                                         const FeatureStack& replaced) {
  check_pair(pair);
  if (replaced.ir.size() != static_cast<size_t>(p.layers - 1) ||
      replaced.vi.size() != static_cast<size_t>(p.layers - 1))
    throw ShapeError("injection stack must carry layers 1..L-1");
  const Shape expect{p.channels, pair.ir.shape()[1], pair.ir.shape()[2]};
  for (const auto& t : replaced.ir)
    if (t.shape() != expect) throw ShapeError("injection stack shape " + t.shape().str() + " != " + expect.str());
  for (const auto& t : replaced.vi)
    if (t.shape() != expect) throw ShapeError("injection stack shape " + t.shape().str() + " != " + expect.str());
  return detail::finish_fusion(replaced.ir.back(), replaced.vi.back(), p);
}

/// Pixel intensity plus Sobel-gradient consistency against the elementwise
/// maximum of the sources.
inline Tensor fusion_loss(const Tensor& fused, const ImagePair& pair, double lambda) {
  check_pair(pair);
  if (fused.shape() != pair.ir.shape())
    throw ShapeError("fusion_loss: fused " + fused.shape().str() + " vs pair " + pair.ir.shape().str());
  if (lambda < 0) throw ConfigError("lambda must be >= 0");
  Tensor pixel = l1_distance(fused, maximum(pair.ir, pair.vi));
  if (lambda == 0.0) return pixel;
  Tensor grad_term = l1_distance(sobel(fused), maximum(sobel(pair.ir), sobel(pair.vi)));
  return add(pixel, scale(grad_term, lambda));
}

struct Stage1Report {
  std::vector<double> epoch_loss;
};

/// Stage-1 optimization of the fusion network; parameters come back frozen.
inline Stage1Report train_vfn(VfnParams& p, const std::vector<ImagePair>& pairs,
                              const RunConfig& cfg) {
  if (pairs.empty()) throw ConfigError("train_vfn: empty dataset");
  if (p.frozen) throw ConfigError("train_vfn: parameters are frozen");
  Adam opt(p.trainable(), cfg.stage1_lr);
  Stage1Report report;
  const long n = static_cast<long>(pairs.size());
  const long batch = std::min<long>(cfg.stage1_batch, n);
  for (long epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    double epoch_sum = 0.0;
    long seen = 0;
    for (long start = 0; start < n; start += batch) {
      const long stop = std::min(n, start + batch);
      opt.zero_grad();
      for (long i = start; i < stop; ++i) {
        VfnOutput out = vfn_forward(pairs[static_cast<size_t>(i)], p);
        Tensor loss = fusion_loss(out.fused, pairs[static_cast<size_t>(i)], cfg.lambda);
        const double lv = loss.item();
        if (!std::isfinite(lv))
          throw Error("train_vfn: non-finite loss at epoch " + std::to_string(epoch) +
                      " sample " + std::to_string(i));
        epoch_sum += lv;
        ++seen;
        backward(scale(loss, 1.0 / static_cast<double>(stop - start)));
      }
      opt.step();
    }
    report.epoch_loss.push_back(epoch_sum / static_cast<double>(seen));
  }
  p.set_frozen(true);
  return report;
}

}  // namespace cldyn
