#pragma once

// Toy multi-scale image encoder: five 3x3 stride-2 convolutions with ReLU.
// The first two form block 1 (stride 4); each later conv is one block.
// Level outputs are the post-activation maps at strides {4, 8, 16, 32}.

#include "unibev/features.hpp"
#include "unibev/tensor.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace unibev {

inline constexpr int kEncoderConvs = 5;
inline constexpr int kEncoderLevels = 4;
inline constexpr int kMaxEncoderStride = 32;

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // (out, 3, 3, in)
  Tensor<T> bias;    // (out)

  int out_channels() const { return static_cast<int>(weight.shape[0]); }
  int in_channels() const { return static_cast<int>(weight.shape[3]); }
};

template <typename T>
struct EncoderParams {
  std::vector<ConvParams<T>> convs;

  static EncoderParams zeros(int in_channels, int channels) {
    EncoderParams p;
    for (int k = 0; k < kEncoderConvs; ++k) {
      const auto cin = static_cast<std::size_t>(k == 0 ? in_channels : channels);
      const auto cout = static_cast<std::size_t>(channels);
      p.convs.push_back({Tensor<T>({cout, 3, 3, cin}), Tensor<T>({cout})});
    }
    return p;
  }

  int channels() const { return convs.empty() ? 0 : convs.back().out_channels(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t k = 0; k < convs.size(); ++k) {
      f(prefix + "conv" + std::to_string(k) + ".weight", convs[k].weight);
      f(prefix + "conv" + std::to_string(k) + ".bias", convs[k].bias);
    }
  }
};

namespace detail {

template <typename T>
FeatureMap<T> conv3x3_s2(const FeatureMap<T>& in, const ConvParams<T>& p) {
  const int cin = in.channels, cout = p.out_channels();
  if (p.in_channels() != cin) throw std::invalid_argument("conv input channel mismatch");
  FeatureMap<T> out(in.height / 2, in.width / 2, cout, in.stride * 2);
  const T* w = p.weight.ptr();
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      T* o = out.at(r, c);
      for (int oc = 0; oc < cout; ++oc) o[oc] = p.bias[oc];
      for (int kr = 0; kr < 3; ++kr) {
        const int ir = 2 * r + kr - 1;
        if (ir < 0 || ir >= in.height) continue;
        for (int kc = 0; kc < 3; ++kc) {
          const int ic = 2 * c + kc - 1;
          if (ic < 0 || ic >= in.width) continue;
          const T* x = in.at(ir, ic);
          for (int oc = 0; oc < cout; ++oc) {
            const T* wk = w + ((static_cast<std::size_t>(oc) * 3 + kr) * 3 + kc) * cin;
            T acc = T(0);
            for (int i = 0; i < cin; ++i) acc += wk[i] * x[i];
            o[oc] += acc;
          }
        }
      }
    }
  }
  return out;
}

/// Accumulates weight/bias grads and (optionally) the input gradient.
template <typename T>
void conv3x3_s2_backward(const FeatureMap<T>& in, const ConvParams<T>& p, const FeatureMap<T>& grad_out,
                         ConvParams<T>& grad_p, FeatureMap<T>* grad_in) {
  const int cin = in.channels, cout = p.out_channels();
  const T* w = p.weight.ptr();
  T* gw = grad_p.weight.ptr();
  for (int r = 0; r < grad_out.height; ++r) {
    for (int c = 0; c < grad_out.width; ++c) {
      const T* go = grad_out.at(r, c);
      for (int oc = 0; oc < cout; ++oc) grad_p.bias[oc] += go[oc];
      for (int kr = 0; kr < 3; ++kr) {
        const int ir = 2 * r + kr - 1;
        if (ir < 0 || ir >= in.height) continue;
        for (int kc = 0; kc < 3; ++kc) {
          const int ic = 2 * c + kc - 1;
          if (ic < 0 || ic >= in.width) continue;
          const T* x = in.at(ir, ic);
          T* gx = grad_in ? grad_in->at(ir, ic) : nullptr;
          for (int oc = 0; oc < cout; ++oc) {
            const T g = go[oc];
            if (g == T(0)) continue;
            const std::size_t base = ((static_cast<std::size_t>(oc) * 3 + kr) * 3 + kc) * cin;
            for (int i = 0; i < cin; ++i) gw[base + i] += g * x[i];
            if (gx) {
              for (int i = 0; i < cin; ++i) gx[i] += g * w[base + i];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(FeatureMap<T>& m) {
  for (T& v : m.data) v = std::max(v, T(0));
}

}  // namespace detail

/// Activations kept for the backward pass; stages[k] is the post-ReLU output
/// of conv k.
template <typename T>
struct EncoderCache {
  FeatureMap<T> image;
  std::vector<FeatureMap<T>> stages;
};

template <typename T>
void check_encoder_input(const FeatureMap<T>& image) {
  if (image.height % kMaxEncoderStride != 0 || image.width % kMaxEncoderStride != 0) {
    throw std::invalid_argument("image size must be divisible by " + std::to_string(kMaxEncoderStride) + ", got " +
                                std::to_string(image.height) + "x" + std::to_string(image.width));
  }
}

template <typename T>
MultiScaleFeatures<T> encode_image(const FeatureMap<T>& image, const EncoderParams<T>& params,
                                   EncoderCache<T>* cache = nullptr) {
  check_encoder_input(image);
  std::vector<FeatureMap<T>> stages;
  const FeatureMap<T>* x = &image;
  for (int k = 0; k < kEncoderConvs; ++k) {
    stages.push_back(detail::conv3x3_s2(*x, params.convs[k]));
    detail::relu_inplace(stages.back());
    x = &stages.back();
  }
  MultiScaleFeatures<T> out;
  for (int k = 1; k < kEncoderConvs; ++k) out.levels.push_back(stages[k]);
  if (cache) {
    cache->image = image;
    cache->stages = std::move(stages);
  }
  return out;
}

/// Overload for float images feeding a model of another scalar type.
template <typename T>
  requires(!std::is_same_v<T, float>)
MultiScaleFeatures<T> encode_image(const Image& image, const EncoderParams<T>& params,
                                   EncoderCache<T>* cache = nullptr) {
  return encode_image(image.template cast<T>(), params, cache);
}

/// level_grads[l] is dLoss/d(level l output). Accumulates into grads.
template <typename T>
void encode_image_backward(const EncoderCache<T>& cache, const EncoderParams<T>& params,
                           const std::vector<FeatureMap<T>>& level_grads, EncoderParams<T>& grads) {
  std::vector<FeatureMap<T>> g(kEncoderConvs);
  for (int k = 0; k < kEncoderConvs; ++k) {
    const FeatureMap<T>& s = cache.stages[k];
    g[k] = FeatureMap<T>(s.height, s.width, s.channels, s.stride);
  }
  for (int l = 0; l < kEncoderLevels; ++l) {
    const auto& src = level_grads[l].data;
    auto& dst = g[l + 1].data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  for (int k = kEncoderConvs - 1; k >= 0; --k) {
    FeatureMap<T>& gk = g[k];
    const FeatureMap<T>& out = cache.stages[k];
    for (std::size_t i = 0; i < gk.data.size(); ++i) {
      if (!(out.data[i] > T(0))) gk.data[i] = T(0);
    }
    const FeatureMap<T>& in = k == 0 ? cache.image : cache.stages[k - 1];
    detail::conv3x3_s2_backward(in, params.convs[k], gk, grads.convs[k], k == 0 ? nullptr : &g[k - 1]);
  }
}

}  // namespace unibev
