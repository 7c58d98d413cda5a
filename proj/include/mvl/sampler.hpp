#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mvl/error.hpp"
#include "mvl/rng.hpp"
#include "mvl/study.hpp"
#include "mvl/tensor.hpp"

namespace mvl {

inline constexpr std::size_t kDefaultClipLength = 32;

/// Backbone input: C x T x H x W with values in [0, 1].
template <class T>
struct Clip {
  Tensor<T> frames;
  std::string source_view_id;
};

/// Frame indices for a fixed-length clip. Short views are padded by repeating
/// the last frame; long views are subsampled uniformly, i -> floor(i*T/L).
inline std::vector<std::size_t> sample_frames(std::size_t num_frames, std::size_t target_len = kDefaultClipLength) {
  if (num_frames == 0) throw ValidationError("cannot sample frames from an empty view");
  if (target_len == 0) throw ValidationError("target clip length must be positive");
  std::vector<std::size_t> idx(target_len);
  if (num_frames <= target_len) {
    for (std::size_t i = 0; i < target_len; ++i) idx[i] = std::min(i, num_frames - 1);
  } else {
    for (std::size_t i = 0; i < target_len; ++i) idx[i] = i * num_frames / target_len;
  }
  return idx;
}

inline std::vector<std::size_t> sample_frames(const View& view, std::size_t target_len = kDefaultClipLength) {
  return sample_frames(view.video.frames, target_len);
}

/// Gathers the indexed frames, scales to [0, 1], replicates the gray channel
/// three times and resizes bilinearly (half-pixel centres, edge clamp) to
/// out_h x out_w.
template <class T>
Clip<T> normalize(const View& view, const std::vector<std::size_t>& indices, std::size_t out_h,
                  std::size_t out_w) {
  const Video& v = view.video;
  const std::size_t l = indices.size();
  Clip<T> clip;
  clip.source_view_id = view.id;
  clip.frames = Tensor<T>({3, l, out_h, out_w});
  const std::size_t plane = out_h * out_w;
  const double sy = static_cast<double>(v.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(v.width) / static_cast<double>(out_w);

  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t n_out, std::size_t n_in, double scale) {
    std::vector<Tap> out(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, n_in - 1);
      out[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return out;
  };
  const auto ty = taps(out_h, v.height, sy);
  const auto tx = taps(out_w, v.width, sx);

  for (std::size_t t = 0; t < l; ++t) {
    if (indices[t] >= v.frames) throw ValidationError("frame index out of range");
    const std::uint8_t* f = v.frame(indices[t]);
    T* dst = clip.frames.data() + t * plane;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const double top = (1.0 - b.w1) * f[a.i0 * v.width + b.i0] + b.w1 * f[a.i0 * v.width + b.i1];
        const double bot = (1.0 - b.w1) * f[a.i1 * v.width + b.i0] + b.w1 * f[a.i1 * v.width + b.i1];
        dst[y * out_w + x] = static_cast<T>(((1.0 - a.w1) * top + a.w1 * bot) / 255.0);
      }
    }
  }
  const std::size_t channel = l * plane;
  std::copy_n(clip.frames.data(), channel, clip.frames.data() + channel);
  std::copy_n(clip.frames.data(), channel, clip.frames.data() + 2 * channel);
  return clip;
}

enum class AugmentPolicy { none, light };

inline AugmentPolicy augment_policy_from_string(const std::string& s) {
  if (s == "none") return AugmentPolicy::none;
  if (s == "light") return AugmentPolicy::light;
  throw SchemaError("augmentation policy must be \"none\" or \"light\"");
}

inline std::string to_string(AugmentPolicy p) { return p == AugmentPolicy::none ? "none" : "light"; }

struct AugmentParams {
  int shift_x = 0;
  int shift_y = 0;
  double brightness = 1.0;
};

inline constexpr int kMaxShift = 8;

inline AugmentParams draw_augment_params(std::uint64_t seed) {
  Rng rng(seed);
  AugmentParams p;
  p.shift_x = static_cast<int>(rng.uniform_int(-kMaxShift, kMaxShift));
  p.shift_y = static_cast<int>(rng.uniform_int(-kMaxShift, kMaxShift));
  p.brightness = rng.uniform(0.9, 1.1);
  return p;
}

/// Translation with edge replication, then brightness scaling clamped to [0, 1].
template <class T>
Clip<T> apply_augment(const Clip<T>& clip, const AugmentParams& p) {
  Clip<T> out{Tensor<T>(clip.frames.shape()), clip.source_view_id};
  const std::size_t planes = clip.frames.dim(0) * clip.frames.dim(1);
  const std::size_t h = clip.frames.dim(2), w = clip.frames.dim(3);
  const auto hi = static_cast<long>(h) - 1, wi = static_cast<long>(w) - 1;
  for (std::size_t k = 0; k < planes; ++k) {
    const T* src = clip.frames.data() + k * h * w;
    T* dst = out.frames.data() + k * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = std::clamp(static_cast<long>(y) - p.shift_y, 0L, hi);
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = std::clamp(static_cast<long>(x) - p.shift_x, 0L, wi);
        const double v = static_cast<double>(src[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)]) *
                         p.brightness;
        dst[y * w + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

template <class T>
Clip<T> augment(const Clip<T>& clip, AugmentPolicy policy, std::uint64_t seed) {
  if (policy == AugmentPolicy::none) return clip;
  return apply_augment(clip, draw_augment_params(seed));
}

/// Stacks preprocessed clips of the given views into [N, 3, L, H, W].
template <class T>
Tensor<T> make_clip_batch(const std::vector<const View*>& views, std::size_t clip_len, std::size_t out_h,
                          std::size_t out_w, AugmentPolicy policy = AugmentPolicy::none,
                          std::uint64_t aug_seed = 0) {
  const std::size_t per = 3 * clip_len * out_h * out_w;
  Tensor<T> batch({views.size(), 3, clip_len, out_h, out_w});
  for (std::size_t i = 0; i < views.size(); ++i) {
    Clip<T> c = normalize<T>(*views[i], sample_frames(*views[i], clip_len), out_h, out_w);
    if (policy != AugmentPolicy::none) c = augment(c, policy, derive_seed(aug_seed, i));
    std::copy_n(c.frames.data(), per, batch.data() + i * per);
  }
  return batch;
}

}  // namespace mvl
