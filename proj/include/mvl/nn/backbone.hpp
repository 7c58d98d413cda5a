#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "mvl/error.hpp"
#include "mvl/nn/layers.hpp"

namespace mvl::nn {

enum class BackboneVariant { residual3d_18_pretrained, tiny3d };

inline std::string to_string(BackboneVariant v) {
  return v == BackboneVariant::tiny3d ? "tiny3d" : "residual3d_18_pretrained";
}

inline BackboneVariant backbone_variant_from_string(const std::string& s) {
  if (s == "tiny3d") return BackboneVariant::tiny3d;
  if (s == "residual3d_18_pretrained") return BackboneVariant::residual3d_18_pretrained;
  throw SchemaError("unknown backbone variant '" + s + "'");
}

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::tiny3d;
  std::size_t embed_dim = 64;
  std::size_t input_height = 112;
  std::size_t input_width = 112;
  std::size_t clip_length = 32;
  /// Optional backbone weight file (see tools/export_r3d18.py).
  std::string pretrained_weights;

  void validate() const {
    if (variant == BackboneVariant::residual3d_18_pretrained && embed_dim != 512) {
      throw SchemaError("residual3d_18 has a fixed embed_dim of 512");
    }
    if (variant == BackboneVariant::tiny3d && (embed_dim < 8 || embed_dim % 8 != 0)) {
      throw SchemaError("tiny3d embed_dim must be a positive multiple of 8");
    }
    if (input_height < 16 || input_width < 16) throw SchemaError("backbone input must be at least 16x16");
    if (clip_length < 1) throw SchemaError("clip_length must be positive");
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Activations saved during a training forward pass, consumed by backward.
template <class T>
struct Tape {
  std::vector<Tensor<T>> saved;
  std::size_t cursor = 0;

  void push(Tensor<T> t) { saved.push_back(std::move(t)); }
  const Tensor<T>& at(std::size_t i) const { return saved.at(i); }
  void clear() {
    saved.clear();
    cursor = 0;
  }
};

/// Maps a clip batch [N, 3, T, H, W] to embeddings [N, embed_dim].
template <class T>
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual std::size_t embed_dim() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& clips, Tape<T>* tape) const = 0;
  /// Accumulates parameter gradients. The input gradient is never needed.
  virtual void backward(const Tape<T>& tape, const Tensor<T>& d_embed) = 0;
  virtual void parameters(ParamList<T>& out) = 0;
  virtual void init(Rng& rng) = 0;
  virtual std::unique_ptr<Backbone<T>> clone() const = 0;
};

// ---------------------------------------------------------------------------
// tiny3d: four stride-2 3x3x3 conv + ReLU stages, then global average pooling.
// Widths are embed/8, embed/4, embed/2, embed.

template <class T>
class Tiny3d final : public Backbone<T> {
 public:
  explicit Tiny3d(std::size_t embed_dim) : embed_dim_(embed_dim) {
    const std::size_t widths[4] = {embed_dim / 8, embed_dim / 4, embed_dim / 2, embed_dim};
    std::size_t in = 3;
    for (std::size_t s = 0; s < 4; ++s) {
      Conv3dSpec spec;
      spec.in_channels = in;
      spec.out_channels = widths[s];
      spec.stride = {2, 2, 2};
      convs_.emplace_back("backbone.stage" + std::to_string(s + 1), spec);
      in = widths[s];
    }
  }

  // Fixed input standardization of [0, 1] clips.
  static constexpr double kInputCenter = 0.5;
  static constexpr double kInputScale = 4.0;

  std::size_t embed_dim() const override { return embed_dim_; }

  Tensor<T> forward(const Tensor<T>& clips, Tape<T>* tape) const override {
    if (clips.rank() != 5 || clips.dim(1) != 3) {
      throw RuntimeError("backbone expects [N,3,T,H,W] clips, got " + shape_str(clips.shape()));
    }
    Tensor<T> x = clips;
    for (auto& v : x.values()) v = (v - T(kInputCenter)) * T(kInputScale);
    if (tape) {
      tape->clear();
      tape->push(x);
    }
    Tensor<T> a = relu(convs_[0].forward(x));
    for (std::size_t s = 1; s < convs_.size(); ++s) {
      Tensor<T> next = relu(convs_[s].forward(a));
      if (tape) tape->push(std::move(a));
      a = std::move(next);
    }
    Tensor<T> emb = global_avg_pool(a);
    if (tape) tape->push(std::move(a));
    return emb;
  }

  void backward(const Tape<T>& tape, const Tensor<T>& d_embed) override {
    // tape: [input, a1, a2, a3, a4]
    Tensor<T> d = global_avg_pool_backward(tape.at(4).shape(), d_embed);
    for (std::size_t s = convs_.size(); s-- > 0;) {
      d = relu_backward(tape.at(s + 1), d);
      d = convs_[s].backward(tape.at(s), d, s > 0);
    }
  }

  void parameters(ParamList<T>& out) override {
    for (auto& c : convs_) c.parameters(out);
  }

  void init(Rng& rng) override {
    for (auto& c : convs_) c.init_he(rng);
  }

  std::unique_ptr<Backbone<T>> clone() const override { return std::make_unique<Tiny3d>(*this); }

 private:
  std::size_t embed_dim_;
  std::vector<Conv3d<T>> convs_;
};

// ---------------------------------------------------------------------------
// 18-layer 3D ResNet (R3D-18 layout). Batch norm is represented by frozen
// per-channel affine maps; pretrained statistics are folded in on import.

template <class T>
class BasicBlock3d {
 public:
  BasicBlock3d(const std::string& name, std::size_t in, std::size_t out, std::size_t stride)
      : conv1_(name + ".conv1", conv_spec(in, out, 3, stride, 1)),
        bn1_(name + ".bn1", out),
        conv2_(name + ".conv2", conv_spec(out, out, 3, 1, 1)),
        bn2_(name + ".bn2", out),
        has_downsample_(stride != 1 || in != out) {
    if (has_downsample_) {
      down_conv_ = Conv3d<T>(name + ".downsample.conv", conv_spec(in, out, 1, stride, 0));
      down_bn_ = ChannelAffine<T>(name + ".downsample.bn", out);
    }
  }

  // Saves x, z1, r1, z2, [zd], out on the tape.
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
    Tensor<T> z1 = conv1_.forward(x);
    Tensor<T> r1 = relu(bn1_.forward(z1));
    Tensor<T> z2 = conv2_.forward(r1);
    Tensor<T> sum = bn2_.forward(z2);
    Tensor<T> zd;
    if (has_downsample_) {
      zd = down_conv_.forward(x);
      add_inplace<T>(sum.values(), down_bn_.forward(zd).values());
    } else {
      add_inplace<T>(sum.values(), x.values());
    }
    Tensor<T> out = relu(sum);
    if (tape) {
      tape->push(x);
      tape->push(std::move(z1));
      tape->push(std::move(r1));
      tape->push(std::move(z2));
      if (has_downsample_) tape->push(std::move(zd));
      tape->push(out);
    }
    return out;
  }

  std::size_t tape_entries() const { return has_downsample_ ? 6 : 5; }

  Tensor<T> backward(const Tape<T>& tape, std::size_t base, const Tensor<T>& dout, bool need_dx) {
    const Tensor<T>& x = tape.at(base);
    const Tensor<T>& z1 = tape.at(base + 1);
    const Tensor<T>& r1 = tape.at(base + 2);
    const Tensor<T>& z2 = tape.at(base + 3);
    const Tensor<T>& out = tape.at(base + tape_entries() - 1);
    Tensor<T> dsum = relu_backward(out, dout);
    Tensor<T> d = bn2_.backward(z2, dsum);
    d = conv2_.backward(r1, d, true);
    d = relu_backward(r1, d);
    d = bn1_.backward(z1, d);
    Tensor<T> dx = conv1_.backward(x, d, need_dx);
    if (has_downsample_) {
      const Tensor<T>& zd = tape.at(base + 4);
      Tensor<T> dd = down_bn_.backward(zd, dsum);
      Tensor<T> dxs = down_conv_.backward(x, dd, need_dx);
      if (need_dx) add_inplace<T>(dx.values(), dxs.values());
    } else if (need_dx) {
      add_inplace<T>(dx.values(), dsum.values());
    }
    return dx;
  }

  void parameters(ParamList<T>& out) {
    conv1_.parameters(out);
    bn1_.parameters(out);
    conv2_.parameters(out);
    bn2_.parameters(out);
    if (has_downsample_) {
      down_conv_.parameters(out);
      down_bn_.parameters(out);
    }
  }

  void init(Rng& rng) {
    conv1_.init_he(rng);
    conv2_.init_he(rng);
    if (has_downsample_) down_conv_.init_he(rng);
  }

  static Conv3dSpec conv_spec(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                              std::size_t pad) {
    Conv3dSpec s;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel = {k, k, k};
    s.stride = {stride, stride, stride};
    s.padding = {pad, pad, pad};
    s.bias = false;
    return s;
  }

 private:
  Conv3d<T> conv1_;
  ChannelAffine<T> bn1_;
  Conv3d<T> conv2_;
  ChannelAffine<T> bn2_;
  bool has_downsample_;
  Conv3d<T> down_conv_;
  ChannelAffine<T> down_bn_;
};

template <class T>
class Residual3d18 final : public Backbone<T> {
 public:
  Residual3d18() {
    Conv3dSpec stem;
    stem.in_channels = 3;
    stem.out_channels = 64;
    stem.kernel = {3, 7, 7};
    stem.stride = {1, 2, 2};
    stem.padding = {1, 3, 3};
    stem.bias = false;
    stem_conv_ = Conv3d<T>("backbone.stem.conv", stem);
    stem_bn_ = ChannelAffine<T>("backbone.stem.bn", 64);
    const std::size_t widths[4] = {64, 128, 256, 512};
    std::size_t in = 64;
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string prefix = "backbone.layer" + std::to_string(l + 1);
      blocks_.emplace_back(prefix + ".0", in, widths[l], l == 0 ? 1 : 2);
      blocks_.emplace_back(prefix + ".1", widths[l], widths[l], 1);
      in = widths[l];
    }
  }

  std::size_t embed_dim() const override { return 512; }

  // Per-channel standardization the Kinetics-400 weights were trained with.
  static constexpr double kInputMean[3] = {0.43216, 0.394666, 0.37645};
  static constexpr double kInputStd[3] = {0.22803, 0.22145, 0.216989};

  // Tape layout: [input, stem_z, stem_out, block entries..., final]
  Tensor<T> forward(const Tensor<T>& clips, Tape<T>* tape) const override {
    if (clips.rank() != 5 || clips.dim(1) != 3) {
      throw RuntimeError("backbone expects [N,3,T,H,W] clips, got " + shape_str(clips.shape()));
    }
    Tensor<T> x = clips;
    const std::size_t plane = x.size() / (x.dim(0) * 3);
    for (std::size_t n = 0; n < x.dim(0); ++n)
      for (std::size_t c = 0; c < 3; ++c) {
        T* v = x.data() + (n * 3 + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v[i] = (v[i] - T(kInputMean[c])) / T(kInputStd[c]);
      }
    if (tape) {
      tape->clear();
      tape->push(x);
    }
    Tensor<T> z = stem_conv_.forward(x);
    Tensor<T> a = relu(stem_bn_.forward(z));
    if (tape) {
      tape->push(std::move(z));
      tape->push(a);
    }
    for (const auto& b : blocks_) a = b.forward(a, tape);
    return global_avg_pool(a);
  }

  void backward(const Tape<T>& tape, const Tensor<T>& d_embed) override {
    std::vector<std::size_t> bases;
    std::size_t base = 3;
    for (const auto& b : blocks_) {
      bases.push_back(base);
      base += b.tape_entries();
    }
    const Tensor<T>& last = tape.at(base - 1);
    Tensor<T> d = global_avg_pool_backward(last.shape(), d_embed);
    for (std::size_t i = blocks_.size(); i-- > 0;) d = blocks_[i].backward(tape, bases[i], d, true);
    d = relu_backward(tape.at(2), d);
    d = stem_bn_.backward(tape.at(1), d);
    stem_conv_.backward(tape.at(0), d, false);
  }

  void parameters(ParamList<T>& out) override {
    stem_conv_.parameters(out);
    stem_bn_.parameters(out);
    for (auto& b : blocks_) b.parameters(out);
  }

  void init(Rng& rng) override {
    stem_conv_.init_he(rng);
    for (auto& b : blocks_) b.init(rng);
  }

  std::unique_ptr<Backbone<T>> clone() const override {
    return std::make_unique<Residual3d18>(*this);
  }

 private:
  Conv3d<T> stem_conv_;
  ChannelAffine<T> stem_bn_;
  std::vector<BasicBlock3d<T>> blocks_;
};

template <class T>
std::unique_ptr<Backbone<T>> make_backbone(const BackboneConfig& cfg) {
  cfg.validate();
  if (cfg.variant == BackboneVariant::tiny3d) return std::make_unique<Tiny3d<T>>(cfg.embed_dim);
  return std::make_unique<Residual3d18<T>>();
}

}  // namespace mvl::nn
