#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "mvl/error.hpp"
#include "mvl/nn/backbone.hpp"
#include "mvl/nn/layers.hpp"

namespace mvl::nn {

enum class HeadKind { mean, recurrent, attention };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::mean: return "mean";
    case HeadKind::recurrent: return "recurrent";
    case HeadKind::attention: return "attention";
  }
  return "mean";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "mean") return HeadKind::mean;
  if (s == "recurrent") return HeadKind::recurrent;
  if (s == "attention") return HeadKind::attention;
  throw SchemaError("unknown fusion head kind '" + s + "'");
}

struct AttentionConfig {
  std::size_t proj_dim = 256;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 512;

  friend bool operator==(const AttentionConfig&, const AttentionConfig&) = default;
};

struct FusionHeadConfig {
  HeadKind kind = HeadKind::recurrent;
  std::size_t hidden_dim = 128;
  AttentionConfig attn;

  void validate() const {
    if (kind == HeadKind::recurrent && hidden_dim == 0) throw SchemaError("hidden_dim must be positive");
    if (kind == HeadKind::attention) {
      if (attn.proj_dim == 0 || attn.heads == 0 || attn.proj_dim % attn.heads != 0) {
        throw SchemaError("attention proj_dim must be a positive multiple of heads");
      }
      if (attn.layers == 0 || attn.ffn_dim == 0) throw SchemaError("attention layers/ffn_dim must be positive");
    }
  }

  friend bool operator==(const FusionHeadConfig&, const FusionHeadConfig&) = default;
};

/// Fuses the embeddings of one study's views, [L, D] with L >= 1, into a
/// single vector [1, output_dim].
template <class T>
class FusionHead {
 public:
  virtual ~FusionHead() = default;
  virtual std::size_t output_dim() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& tokens, Tape<T>* tape) const = 0;
  /// Accumulates parameter gradients and returns dL/dtokens.
  virtual Tensor<T> backward(const Tape<T>& tape, const Tensor<T>& d_out) = 0;
  virtual void parameters(ParamList<T>& out) = 0;
  virtual void init(Rng& rng) = 0;
  virtual std::unique_ptr<FusionHead<T>> clone() const = 0;
};

template <class T>
void check_tokens(const Tensor<T>& tokens, std::size_t dim) {
  if (tokens.rank() != 2 || tokens.dim(0) == 0) throw RuntimeError("fusion needs at least one embedding");
  if (tokens.dim(1) != dim) {
    throw RuntimeError("embedding dimension mismatch: expected " + std::to_string(dim) + ", got " +
                       std::to_string(tokens.dim(1)));
  }
}

template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  const std::size_t l = x.dim(0), d = x.dim(1);
  Tensor<T> y({1, d});
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < d; ++j) y[j] += x[i * d + j];
  for (std::size_t j = 0; j < d; ++j) y[j] /= static_cast<T>(l);
  return y;
}

template <class T>
Tensor<T> mean_rows_backward(std::size_t rows, const Tensor<T>& dy) {
  const std::size_t d = dy.size();
  Tensor<T> dx({rows, d});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) dx[i * d + j] = dy[j] / static_cast<T>(rows);
  return dx;
}

// ---------------------------------------------------------------------------

template <class T>
class MeanHead final : public FusionHead<T> {
 public:
  explicit MeanHead(std::size_t dim) : dim_(dim) {}

  std::size_t output_dim() const override { return dim_; }

  Tensor<T> forward(const Tensor<T>& tokens, Tape<T>* tape) const override {
    check_tokens(tokens, dim_);
    if (tape) {
      tape->clear();
      tape->push(Tensor<T>({tokens.dim(0)}));
    }
    return mean_rows(tokens);
  }

  Tensor<T> backward(const Tape<T>& tape, const Tensor<T>& d_out) override {
    return mean_rows_backward(tape.at(0).dim(0), d_out);
  }

  void parameters(ParamList<T>&) override {}
  void init(Rng&) override {}
  std::unique_ptr<FusionHead<T>> clone() const override { return std::make_unique<MeanHead>(*this); }

 private:
  std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Single-layer LSTM over the views in the given order; the fused vector is the
// final hidden state. Gate order: input, forget, cell, output.

template <class T>
class LstmHead final : public FusionHead<T> {
 public:
  LstmHead(std::size_t input_dim, std::size_t hidden)
      : in_(input_dim),
        hidden_(hidden),
        w_ih_("head.lstm.weight_ih", {4 * hidden, input_dim}),
        w_hh_("head.lstm.weight_hh", {4 * hidden, hidden}),
        bias_("head.lstm.bias", {4 * hidden}) {}

  std::size_t output_dim() const override { return hidden_; }

  // Tape: [tokens, gates (L x 4H, post-activation), cell (L x H), hidden (L x H)]
  Tensor<T> forward(const Tensor<T>& tokens, Tape<T>* tape) const override {
    check_tokens(tokens, in_);
    const std::size_t l = tokens.dim(0), h = hidden_, g4 = 4 * hidden_;
    Tensor<T> zx({l, g4});
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t k = 0; k < g4; ++k) zx[t * g4 + k] = bias_.value[k];
    gemm_nt(l, g4, in_, tokens.data(), w_ih_.value.data(), zx.data());

    Tensor<T> gates({l, g4}), cell({l, h}), hid({l, h});
    std::vector<T> h_prev(h, T{0}), c_prev(h, T{0}), z(g4);
    for (std::size_t t = 0; t < l; ++t) {
      std::copy_n(zx.data() + t * g4, g4, z.begin());
      gemm_nt(std::size_t{1}, g4, h, h_prev.data(), w_hh_.value.data(), z.data());
      T* gt = gates.data() + t * g4;
      for (std::size_t k = 0; k < h; ++k) {
        gt[k] = sigmoid(z[k]);
        gt[h + k] = sigmoid(z[h + k]);
        gt[2 * h + k] = std::tanh(z[2 * h + k]);
        gt[3 * h + k] = sigmoid(z[3 * h + k]);
        const T c = gt[h + k] * c_prev[k] + gt[k] * gt[2 * h + k];
        cell[t * h + k] = c;
        hid[t * h + k] = gt[3 * h + k] * std::tanh(c);
      }
      std::copy_n(cell.data() + t * h, h, c_prev.begin());
      std::copy_n(hid.data() + t * h, h, h_prev.begin());
    }
    Tensor<T> out({1, h}, std::vector<T>(h_prev));
    if (tape) {
      tape->clear();
      tape->push(tokens);
      tape->push(std::move(gates));
      tape->push(std::move(cell));
      tape->push(std::move(hid));
    }
    return out;
  }

  Tensor<T> backward(const Tape<T>& tape, const Tensor<T>& d_out) override {
    const Tensor<T>& tokens = tape.at(0);
    const Tensor<T>& gates = tape.at(1);
    const Tensor<T>& cell = tape.at(2);
    const Tensor<T>& hid = tape.at(3);
    const std::size_t l = tokens.dim(0), h = hidden_, g4 = 4 * hidden_;

    Tensor<T> dz({l, g4});
    std::vector<T> dh(d_out.vec()), dc(h, T{0}), dh_prev(h);
    for (std::size_t t = l; t-- > 0;) {
      const T* gt = gates.data() + t * g4;
      T* dzt = dz.data() + t * g4;
      for (std::size_t k = 0; k < h; ++k) {
        const T i = gt[k], f = gt[h + k], g = gt[2 * h + k], o = gt[3 * h + k];
        const T c = cell[t * h + k];
        const T c_prev = t > 0 ? cell[(t - 1) * h + k] : T{0};
        const T tc = std::tanh(c);
        const T d_o = dh[k] * tc;
        const T d_c = dc[k] + dh[k] * o * (T{1} - tc * tc);
        dzt[k] = d_c * g * i * (T{1} - i);
        dzt[h + k] = d_c * c_prev * f * (T{1} - f);
        dzt[2 * h + k] = d_c * i * (T{1} - g * g);
        dzt[3 * h + k] = d_o * o * (T{1} - o);
        dc[k] = d_c * f;
      }
      // dh_{t-1} = W_hh^T dz_t; dW_hh += dz_t h_{t-1}^T
      std::fill(dh_prev.begin(), dh_prev.end(), T{0});
      gemm_nn(std::size_t{1}, h, g4, dzt, w_hh_.value.data(), dh_prev.data());
      if (t > 0) gemm_tn(g4, h, std::size_t{1}, dzt, hid.data() + (t - 1) * h, w_hh_.grad.data());
      dh = dh_prev;
    }
    gemm_tn(g4, in_, l, dz.data(), tokens.data(), w_ih_.grad.data());
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t k = 0; k < g4; ++k) bias_.grad[k] += dz[t * g4 + k];
    Tensor<T> dtokens({l, in_});
    gemm_nn(l, in_, g4, dz.data(), w_ih_.value.data(), dtokens.data());
    return dtokens;
  }

  void parameters(ParamList<T>& out) override {
    out.push_back(&w_ih_);
    out.push_back(&w_hh_);
    out.push_back(&bias_);
  }

  void init(Rng& rng) override {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_));
    init_uniform(w_ih_.value, rng, bound);
    init_uniform(w_hh_.value, rng, bound);
    init_uniform(bias_.value, rng, bound);
  }

  std::unique_ptr<FusionHead<T>> clone() const override { return std::make_unique<LstmHead>(*this); }

 private:
  std::size_t in_;
  std::size_t hidden_;
  Param<T> w_ih_;
  Param<T> w_hh_;
  Param<T> bias_;
};

// ---------------------------------------------------------------------------
// Post-LN transformer encoder layer (BERT layout) without positional encoding.

template <class T>
class EncoderLayer {
 public:
  EncoderLayer(const std::string& name, const AttentionConfig& cfg)
      : dim_(cfg.proj_dim),
        heads_(cfg.heads),
        q_(name + ".attn.q", cfg.proj_dim, cfg.proj_dim),
        k_(name + ".attn.k", cfg.proj_dim, cfg.proj_dim),
        v_(name + ".attn.v", cfg.proj_dim, cfg.proj_dim),
        o_(name + ".attn.out", cfg.proj_dim, cfg.proj_dim),
        ln1_(name + ".ln1", cfg.proj_dim),
        ff1_(name + ".ffn.in", cfg.proj_dim, cfg.ffn_dim),
        ff2_(name + ".ffn.out", cfg.ffn_dim, cfg.proj_dim),
        ln2_(name + ".ln2", cfg.proj_dim) {}

  static constexpr std::size_t kTapeEntries = 11;

  // Tape: [x, q, k, v, attn, ctx, s1, y1, h1, g, s2]
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
    const std::size_t l = x.dim(0), dk = dim_ / heads_;
    const T scale = T{1} / std::sqrt(static_cast<T>(dk));
    Tensor<T> q = q_.forward(x), k = k_.forward(x), v = v_.forward(x);
    Tensor<T> attn({heads_, l, l}), ctx({l, dim_});
    for (std::size_t hd = 0; hd < heads_; ++hd) {
      const std::size_t off = hd * dk;
      for (std::size_t i = 0; i < l; ++i) {
        T* row = attn.data() + (hd * l + i) * l;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < l; ++j) {
          T s{0};
          for (std::size_t c = 0; c < dk; ++c) s += q[i * dim_ + off + c] * k[j * dim_ + off + c];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        T sum{0};
        for (std::size_t j = 0; j < l; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < l; ++j) row[j] /= sum;
        for (std::size_t j = 0; j < l; ++j)
          for (std::size_t c = 0; c < dk; ++c) ctx[i * dim_ + off + c] += row[j] * v[j * dim_ + off + c];
      }
    }
    Tensor<T> s1 = o_.forward(ctx);
    add_inplace<T>(s1.values(), x.values());
    Tensor<T> y1 = ln1_.forward(s1);
    Tensor<T> h1 = ff1_.forward(y1);
    Tensor<T> g(h1.shape());
    for (std::size_t i = 0; i < h1.size(); ++i) g[i] = gelu(h1[i]);
    Tensor<T> s2 = ff2_.forward(g);
    add_inplace<T>(s2.values(), y1.values());
    Tensor<T> y2 = ln2_.forward(s2);
    if (tape) {
      tape->push(x);
      tape->push(std::move(q));
      tape->push(std::move(k));
      tape->push(std::move(v));
      tape->push(std::move(attn));
      tape->push(std::move(ctx));
      tape->push(std::move(s1));
      tape->push(std::move(y1));
      tape->push(std::move(h1));
      tape->push(std::move(g));
      tape->push(std::move(s2));
    }
    return y2;
  }

  Tensor<T> backward(const Tape<T>& tape, std::size_t base, const Tensor<T>& dy) {
    const Tensor<T>& x = tape.at(base);
    const Tensor<T>& q = tape.at(base + 1);
    const Tensor<T>& k = tape.at(base + 2);
    const Tensor<T>& v = tape.at(base + 3);
    const Tensor<T>& attn = tape.at(base + 4);
    const Tensor<T>& ctx = tape.at(base + 5);
    const Tensor<T>& s1 = tape.at(base + 6);
    const Tensor<T>& y1 = tape.at(base + 7);
    const Tensor<T>& h1 = tape.at(base + 8);
    const Tensor<T>& g = tape.at(base + 9);
    const Tensor<T>& s2 = tape.at(base + 10);
    const std::size_t l = x.dim(0), dk = dim_ / heads_;
    const T scale = T{1} / std::sqrt(static_cast<T>(dk));

    Tensor<T> ds2 = ln2_.backward(s2, dy);
    Tensor<T> dg = ff2_.backward(g, ds2);
    for (std::size_t i = 0; i < dg.size(); ++i) dg[i] *= gelu_grad(h1[i]);
    Tensor<T> dy1 = ff1_.backward(y1, dg);
    add_inplace<T>(dy1.values(), ds2.values());
    Tensor<T> ds1 = ln1_.backward(s1, dy1);
    Tensor<T> dctx = o_.backward(ctx, ds1);

    Tensor<T> dq({l, dim_}), dk_t({l, dim_}), dv({l, dim_});
    std::vector<T> da(l);
    for (std::size_t hd = 0; hd < heads_; ++hd) {
      const std::size_t off = hd * dk;
      for (std::size_t i = 0; i < l; ++i) {
        const T* a = attn.data() + (hd * l + i) * l;
        T dot{0};
        for (std::size_t j = 0; j < l; ++j) {
          T s{0};
          for (std::size_t c = 0; c < dk; ++c) {
            s += dctx[i * dim_ + off + c] * v[j * dim_ + off + c];
            dv[j * dim_ + off + c] += a[j] * dctx[i * dim_ + off + c];
          }
          da[j] = s;
          dot += s * a[j];
        }
        for (std::size_t j = 0; j < l; ++j) {
          const T dsc = a[j] * (da[j] - dot) * scale;
          for (std::size_t c = 0; c < dk; ++c) {
            dq[i * dim_ + off + c] += dsc * k[j * dim_ + off + c];
            dk_t[j * dim_ + off + c] += dsc * q[i * dim_ + off + c];
          }
        }
      }
    }
    Tensor<T> dx = ds1;
    add_inplace<T>(dx.values(), q_.backward(x, dq).values());
    add_inplace<T>(dx.values(), k_.backward(x, dk_t).values());
    add_inplace<T>(dx.values(), v_.backward(x, dv).values());
    return dx;
  }

  void parameters(ParamList<T>& out) {
    q_.parameters(out);
    k_.parameters(out);
    v_.parameters(out);
    o_.parameters(out);
    ln1_.parameters(out);
    ff1_.parameters(out);
    ff2_.parameters(out);
    ln2_.parameters(out);
  }

  void init(Rng& rng) {
    for (auto* lin : {&q_, &k_, &v_, &o_, &ff1_, &ff2_}) lin->init_normal(rng, 0.02);
  }

 private:
  std::size_t dim_;
  std::size_t heads_;
  Linear<T> q_, k_, v_, o_;
  LayerNorm<T> ln1_;
  Linear<T> ff1_, ff2_;
  LayerNorm<T> ln2_;
};

/// Input projection, encoder stack, then mean pooling over output tokens.
/// Permutation invariant in the order of the views.
template <class T>
class AttentionHead final : public FusionHead<T> {
 public:
  AttentionHead(std::size_t input_dim, const AttentionConfig& cfg)
      : in_(input_dim), cfg_(cfg), proj_("head.proj", input_dim, cfg.proj_dim) {
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      layers_.emplace_back("head.layer" + std::to_string(i), cfg);
    }
  }

  std::size_t output_dim() const override { return cfg_.proj_dim; }

  // Tape: [tokens, layer entries..., final tokens]
  Tensor<T> forward(const Tensor<T>& tokens, Tape<T>* tape) const override {
    check_tokens(tokens, in_);
    if (tape) {
      tape->clear();
      tape->push(tokens);
    }
    Tensor<T> x = proj_.forward(tokens);
    for (const auto& layer : layers_) x = layer.forward(x, tape);
    Tensor<T> out = mean_rows(x);
    if (tape) tape->push(std::move(x));
    return out;
  }

  Tensor<T> backward(const Tape<T>& tape, const Tensor<T>& d_out) override {
    const Tensor<T>& tokens = tape.at(0);
    Tensor<T> d = mean_rows_backward(tokens.dim(0), d_out);
    for (std::size_t i = layers_.size(); i-- > 0;) {
      d = layers_[i].backward(tape, 1 + i * EncoderLayer<T>::kTapeEntries, d);
    }
    return proj_.backward(tokens, d);
  }

  void parameters(ParamList<T>& out) override {
    proj_.parameters(out);
    for (auto& layer : layers_) layer.parameters(out);
  }

  void init(Rng& rng) override {
    proj_.init_default(rng);
    for (auto& layer : layers_) layer.init(rng);
  }

  std::unique_ptr<FusionHead<T>> clone() const override { return std::make_unique<AttentionHead>(*this); }

 private:
  std::size_t in_;
  AttentionConfig cfg_;
  Linear<T> proj_;
  std::vector<EncoderLayer<T>> layers_;
};

template <class T>
std::unique_ptr<FusionHead<T>> make_head(const FusionHeadConfig& cfg, std::size_t embed_dim) {
  cfg.validate();
  switch (cfg.kind) {
    case HeadKind::mean: return std::make_unique<MeanHead<T>>(embed_dim);
    case HeadKind::recurrent: return std::make_unique<LstmHead<T>>(embed_dim, cfg.hidden_dim);
    case HeadKind::attention: return std::make_unique<AttentionHead<T>>(embed_dim, cfg.attn);
  }
  throw SchemaError("unknown head kind");
}

}  // namespace mvl::nn
