#pragma once

// Differentiable operations on [C,H,W] feature maps. Every op records its own backward
// closure through nn::record; gradients flow into every Var argument, never into plain
// Tensor arguments.

#include <cstdint>
#include <span>
#include <vector>

#include "dpflow/nn/autograd.hpp"

namespace dpflow::nn {

enum class ResampleBorder { Clamp, Extrapolate };

/// Zero-padded 2-D convolution. w is [O, C, k, k]; b is [O] or null. pad < 0 selects k/2.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = -1);

/// Per-channel k x k convolution with "same" zero padding. w is [C, k, k]; b is [C] or null.
template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T factor);
template <class T> Var<T> add_scalar(const Var<T>& a, T offset);

/// x[c] * lambda[c]
template <class T> Var<T> mul_channel(const Var<T>& x, const Var<T>& lambda);
/// x[c] * factors[c] with constant factors.
template <class T> Var<T> scale_channels(const Var<T>& x, std::vector<T> factors);

template <class T> Var<T> sigmoid(const Var<T>& x);
template <class T> Var<T> tanh(const Var<T>& x);
/// Exact (erf) GELU.
template <class T> Var<T> gelu(const Var<T>& x);
template <class T> Var<T> softplus(const Var<T>& x);
template <class T> Var<T> relu(const Var<T>& x);

template <class T> Var<T> concat(const std::vector<Var<T>>& parts);
template <class T> Var<T> slice_channels(const Var<T>& x, int begin, int end);

/// 2x2 average pooling with ceil output size; edge windows average the samples they cover.
template <class T> Var<T> avg_pool2(const Var<T>& x);
/// Per-channel standardisation over the spatial plane: (x - mean) / sqrt(var + eps).
template <class T> Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5));

/// Half-pixel-centre bilinear resampling to (height, width).
template <class T>
Var<T> resize_bilinear(const Var<T>& x, int height, int width, ResampleBorder border);

/// Bilinear backward warp by a constant flow [2,H,W]; coordinates clamp to the border.
template <class T> Var<T> warp(const Var<T>& x, const Tensor<T>& flow);

/// out[(dy+r)*(2r+1)+(dx+r), y, x] = <f1(:,y,x), f2(:, clamp(y+dy), clamp(x+dx))> / sqrt(C).
template <class T> Var<T> local_correlation(const Var<T>& f1, const Var<T>& f2, int radius);

/// Convex combination upsampling. mask is [9*f*f, h, w] logits, softmax over the 9 neighbours
/// (border-replicated); output is f times the combined flow, cropped to (height, width).
template <class T>
Var<T> convex_upsample(const Var<T>& flow, const Var<T>& mask, int factor, int height, int width);

/// Mean over valid pixels and both axes of the two-component Laplace mixture NLL.
/// mixture holds [alpha, b1, b2]. An empty mask yields 0.
template <class T>
Var<T> mol_nll(const Var<T>& flow, const Var<T>& mixture, const Tensor<T>& gt, std::span<const std::uint8_t> mask);

template <class T> Var<T> sum(const Var<T>& x);
/// sum(x * r) for a constant r of the same shape.
template <class T> Var<T> dot(const Var<T>& x, const Tensor<T>& r);
/// sum_i weights[i] * scalars[i]
template <class T> Var<T> weighted_sum(const std::vector<Var<T>>& scalars, const std::vector<T>& weights);

}  // namespace dpflow::nn
