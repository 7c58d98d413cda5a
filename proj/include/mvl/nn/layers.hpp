#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "mvl/nn/gemm.hpp"
#include "mvl/rng.hpp"
#include "mvl/tensor.hpp"

namespace mvl::nn {

/// A trainable tensor and its accumulated gradient.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}

  std::size_t size() const { return value.size(); }
};

template <class T>
using ParamList = std::vector<Param<T>*>;

template <class T>
std::size_t count_parameters(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

template <class T>
void zero_grad(const ParamList<T>& params) {
  for (auto* p : params) p->grad.zero();
}

template <class T>
void init_uniform(Tensor<T>& t, Rng& rng, double bound) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
void init_normal(Tensor<T>& t, Rng& rng, double stddev) {
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
}

// ---------------------------------------------------------------------------
// Linear: y[N,out] = x[N,in] W^T + b

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out)
      : in_(in), out_(out), weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out}) {}

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  /// PyTorch-style default: U(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  void init_default(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    init_uniform(weight_.value, rng, bound);
    init_uniform(bias_.value, rng, bound);
  }

  void init_normal(Rng& rng, double stddev) {
    nn::init_normal(weight_.value, rng, stddev);
    bias_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::size_t n = x.size() / in_;
    if (n * in_ != x.size()) throw RuntimeError("linear input size mismatch");
    Tensor<T> y({n, out_});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_; ++o) y[i * out_ + o] = bias_.value[o];
    gemm_nt(n, out_, in_, x.data(), weight_.value.data(), y.data());
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx shaped like `x`.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_dx = true) {
    const std::size_t n = x.size() / in_;
    // dW[out,in] += dy^T[out,n] x[n,in]
    gemm_tn(out_, in_, n, dy.data(), x.data(), weight_.grad.data());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += dy[i * out_ + o];
    if (!need_dx) return {};
    Tensor<T> dx(x.shape());
    gemm_nn(n, in_, out_, dy.data(), weight_.value.data(), dx.data());
    return dx;
  }

  void parameters(ParamList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  Param<T> weight_;
  Param<T> bias_;
};

// ---------------------------------------------------------------------------
// Conv3d over [N, C, D, H, W] via im2col.

struct Conv3dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 3> kernel{3, 3, 3};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{1, 1, 1};
  bool bias = true;
};

template <class T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(const std::string& name, Conv3dSpec spec)
      : spec_(spec),
        weight_(name + ".weight",
                {spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]}) {
    if (spec.bias) bias_ = Param<T>(name + ".bias", {spec.out_channels});
  }

  const Conv3dSpec& spec() const { return spec_; }

  std::size_t patch_size() const {
    return spec_.in_channels * spec_.kernel[0] * spec_.kernel[1] * spec_.kernel[2];
  }

  /// He-normal weights, zero bias.
  void init_he(Rng& rng) {
    nn::init_normal(weight_.value, rng, std::sqrt(2.0 / static_cast<double>(patch_size())));
    if (spec_.bias) bias_.value.zero();
  }

  std::array<std::size_t, 3> output_extent(std::size_t d, std::size_t h, std::size_t w) const {
    const std::array<std::size_t, 3> in{d, h, w};
    std::array<std::size_t, 3> out{};
    for (int i = 0; i < 3; ++i) {
      const std::size_t padded = in[i] + 2 * spec_.padding[i];
      if (padded < spec_.kernel[i]) throw RuntimeError("conv3d input smaller than kernel");
      out[i] = (padded - spec_.kernel[i]) / spec_.stride[i] + 1;
    }
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    check_input(x);
    const std::size_t n = x.dim(0);
    const auto [od, oh, ow] = output_extent(x.dim(2), x.dim(3), x.dim(4));
    const std::size_t cout = spec_.out_channels;
    const std::size_t plane = od * oh * ow;
    Tensor<T> y({n, cout, od, oh, ow});
    std::vector<T> col(patch_size() * plane);
    for (std::size_t s = 0; s < n; ++s) {
      im2col(x.slab(s).data(), x.dim(2), x.dim(3), x.dim(4), {od, oh, ow}, col.data());
      T* ys = y.slab(s).data();
      if (spec_.bias) {
        for (std::size_t c = 0; c < cout; ++c) std::fill_n(ys + c * plane, plane, bias_.value[c]);
      }
      gemm_nn(cout, plane, patch_size(), weight_.value.data(), col.data(), ys);
    }
    return y;
  }

  /// Accumulates weight/bias gradients; returns dL/dx unless `need_dx` is false.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_dx = true) {
    const std::size_t n = x.dim(0);
    const std::array<std::size_t, 3> oext{dy.dim(2), dy.dim(3), dy.dim(4)};
    const std::size_t cout = spec_.out_channels;
    const std::size_t plane = oext[0] * oext[1] * oext[2];
    const std::size_t k = patch_size();
    std::vector<T> col(k * plane);
    std::vector<T> dcol;
    Tensor<T> dx;
    if (need_dx) {
      dx = Tensor<T>(x.shape());
      dcol.resize(k * plane);
    }
    for (std::size_t s = 0; s < n; ++s) {
      const T* dys = dy.slab(s).data();
      im2col(x.slab(s).data(), x.dim(2), x.dim(3), x.dim(4), oext, col.data());
      gemm_nt(cout, k, plane, dys, col.data(), weight_.grad.data());
      if (spec_.bias) {
        for (std::size_t c = 0; c < cout; ++c) {
          T acc{0};
          const T* row = dys + c * plane;
#pragma omp simd reduction(+ : acc)
          for (std::size_t p = 0; p < plane; ++p) acc += row[p];
          bias_.grad[c] += acc;
        }
      }
      if (need_dx) {
        std::fill(dcol.begin(), dcol.end(), T{0});
        gemm_tn(k, plane, cout, weight_.value.data(), dys, dcol.data());
        col2im(dcol.data(), x.dim(2), x.dim(3), x.dim(4), oext, dx.slab(s).data());
      }
    }
    return dx;
  }

  void parameters(ParamList<T>& out) {
    out.push_back(&weight_);
    if (spec_.bias) out.push_back(&bias_);
  }

  Param<T>& weight() { return weight_; }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 5 || x.dim(1) != spec_.in_channels) {
      throw RuntimeError("conv3d expects [N," + std::to_string(spec_.in_channels) +
                         ",D,H,W] input, got " + shape_str(x.shape()));
    }
  }

  void im2col(const T* x, std::size_t d, std::size_t h, std::size_t w,
              std::array<std::size_t, 3> oext, T* col) const {
    const auto [kd, kh, kw] = spec_.kernel;
    const auto [sd, sh, sw] = spec_.stride;
    const auto [pd, ph, pw] = spec_.padding;
    const auto [od, oh, ow] = oext;
    const std::size_t plane = od * oh * ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec_.in_channels; ++c) {
      const T* xc = x + c * d * h * w;
      for (std::size_t a = 0; a < kd; ++a)
        for (std::size_t b = 0; b < kh; ++b)
          for (std::size_t e = 0; e < kw; ++e, ++row) {
            T* out = col + row * plane;
            for (std::size_t zo = 0; zo < od; ++zo) {
              const auto zi = static_cast<std::ptrdiff_t>(zo * sd + a) - static_cast<std::ptrdiff_t>(pd);
              for (std::size_t yo = 0; yo < oh; ++yo) {
                const auto yi = static_cast<std::ptrdiff_t>(yo * sh + b) - static_cast<std::ptrdiff_t>(ph);
                T* o = out + (zo * oh + yo) * ow;
                if (zi < 0 || zi >= static_cast<std::ptrdiff_t>(d) || yi < 0 ||
                    yi >= static_cast<std::ptrdiff_t>(h)) {
                  std::fill_n(o, ow, T{0});
                  continue;
                }
                const T* src = xc + (static_cast<std::size_t>(zi) * h + static_cast<std::size_t>(yi)) * w;
                for (std::size_t xo = 0; xo < ow; ++xo) {
                  const auto xi = static_cast<std::ptrdiff_t>(xo * sw + e) - static_cast<std::ptrdiff_t>(pw);
                  o[xo] = (xi < 0 || xi >= static_cast<std::ptrdiff_t>(w)) ? T{0} : src[xi];
                }
              }
            }
          }
    }
  }

  void col2im(const T* col, std::size_t d, std::size_t h, std::size_t w,
              std::array<std::size_t, 3> oext, T* x) const {
    const auto [kd, kh, kw] = spec_.kernel;
    const auto [sd, sh, sw] = spec_.stride;
    const auto [pd, ph, pw] = spec_.padding;
    const auto [od, oh, ow] = oext;
    const std::size_t plane = od * oh * ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec_.in_channels; ++c) {
      T* xc = x + c * d * h * w;
      for (std::size_t a = 0; a < kd; ++a)
        for (std::size_t b = 0; b < kh; ++b)
          for (std::size_t e = 0; e < kw; ++e, ++row) {
            const T* in = col + row * plane;
            for (std::size_t zo = 0; zo < od; ++zo) {
              const auto zi = static_cast<std::ptrdiff_t>(zo * sd + a) - static_cast<std::ptrdiff_t>(pd);
              if (zi < 0 || zi >= static_cast<std::ptrdiff_t>(d)) continue;
              for (std::size_t yo = 0; yo < oh; ++yo) {
                const auto yi = static_cast<std::ptrdiff_t>(yo * sh + b) - static_cast<std::ptrdiff_t>(ph);
                if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                const T* g = in + (zo * oh + yo) * ow;
                T* dst = xc + (static_cast<std::size_t>(zi) * h + static_cast<std::size_t>(yi)) * w;
                for (std::size_t xo = 0; xo < ow; ++xo) {
                  const auto xi = static_cast<std::ptrdiff_t>(xo * sw + e) - static_cast<std::ptrdiff_t>(pw);
                  if (xi >= 0 && xi < static_cast<std::ptrdiff_t>(w)) dst[xi] += g[xo];
                }
              }
            }
          }
    }
  }

  Conv3dSpec spec_;
  Param<T> weight_;
  Param<T> bias_;
};

// ---------------------------------------------------------------------------
// Per-channel affine map over [N, C, ...]. Stands in for batch norm with
// frozen statistics (scale = gamma / sqrt(var + eps), shift = beta - mean * scale).

template <class T>
class ChannelAffine {
 public:
  ChannelAffine() = default;
  ChannelAffine(const std::string& name, std::size_t channels)
      : scale_(name + ".scale", {channels}), shift_(name + ".shift", {channels}) {
    scale_.value.fill(T{1});
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y(x.shape());
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.size() / (n * c);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T a = scale_.value[ch], b = shift_.value[ch];
        const T* src = x.data() + (s * c + ch) * plane;
        T* dst = y.data() + (s * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = a * src[p] + b;
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx(x.shape());
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.size() / (n * c);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T a = scale_.value[ch];
        const T* src = x.data() + (s * c + ch) * plane;
        const T* g = dy.data() + (s * c + ch) * plane;
        T* dst = dx.data() + (s * c + ch) * plane;
        T gs{0}, gb{0};
        for (std::size_t p = 0; p < plane; ++p) {
          gs += g[p] * src[p];
          gb += g[p];
          dst[p] = a * g[p];
        }
        scale_.grad[ch] += gs;
        shift_.grad[ch] += gb;
      }
    return dx;
  }

  void parameters(ParamList<T>& out) {
    out.push_back(&scale_);
    out.push_back(&shift_);
  }

  Param<T>& scale() { return scale_; }
  Param<T>& shift() { return shift_; }

 private:
  Param<T> scale_;
  Param<T> shift_;
};

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension of [N, D]. Backward recomputes the row
// statistics from the saved input.

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim, double eps = 1e-5)
      : dim_(dim), eps_(eps), gamma_(name + ".weight", {dim}), beta_(name + ".bias", {dim}) {
    gamma_.value.fill(T{1});
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::size_t n = x.size() / dim_;
    Tensor<T> y(x.shape());
    std::vector<T> xhat(dim_);
    for (std::size_t i = 0; i < n; ++i) {
      normalize_row(x.data() + i * dim_, xhat.data());
      for (std::size_t j = 0; j < dim_; ++j) y[i * dim_ + j] = gamma_.value[j] * xhat[j] + beta_.value[j];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const std::size_t n = dy.size() / dim_;
    Tensor<T> dx(dy.shape());
    std::vector<T> xh(dim_), g(dim_);
    for (std::size_t i = 0; i < n; ++i) {
      const T inv_std = normalize_row(x.data() + i * dim_, xh.data());
      const T* d = dy.data() + i * dim_;
      T sum_g{0}, sum_gx{0};
      for (std::size_t j = 0; j < dim_; ++j) {
        gamma_.grad[j] += d[j] * xh[j];
        beta_.grad[j] += d[j];
        g[j] = d[j] * gamma_.value[j];
        sum_g += g[j];
        sum_gx += g[j] * xh[j];
      }
      const T inv_n = T{1} / static_cast<T>(dim_);
      for (std::size_t j = 0; j < dim_; ++j) {
        dx[i * dim_ + j] = inv_std * (g[j] - inv_n * sum_g - xh[j] * inv_n * sum_gx);
      }
    }
    return dx;
  }

  void parameters(ParamList<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

 private:
  T normalize_row(const T* row, T* xhat) const {
    T mean{0};
    for (std::size_t j = 0; j < dim_; ++j) mean += row[j];
    mean /= static_cast<T>(dim_);
    T var{0};
    for (std::size_t j = 0; j < dim_; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(dim_);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(eps_));
    for (std::size_t j = 0; j < dim_; ++j) xhat[j] = (row[j] - mean) * inv;
    return inv;
  }

  std::size_t dim_ = 0;
  double eps_ = 1e-5;
  Param<T> gamma_;
  Param<T> beta_;
};

// ---------------------------------------------------------------------------
// Elementwise helpers.

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

/// Gradient through relu given its output.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <class T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

/// Exact (erf) GELU.
template <class T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// Mean over all spatial positions: [N, C, ...] -> [N, C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.size() / (n * c);
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* src = x.data() + i * plane;
    for (std::size_t p = 0; p < plane; ++p) acc += src[p];
    y[i] = acc / static_cast<T>(plane);
  }
  return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  const std::size_t nc = dy.size(), plane = dx.size() / nc;
  for (std::size_t i = 0; i < nc; ++i) {
    const T g = dy[i] / static_cast<T>(plane);
    std::fill_n(dx.data() + i * plane, plane, g);
  }
  return dx;
}

}  // namespace mvl::nn
