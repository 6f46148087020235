#pragma once

#include <utility>
#include <vector>

#include "dpflow/cgu.hpp"
#include "dpflow/core.hpp"

namespace dpflow {

/// Weights of the recurrent dual-pyramid encoder. One set of weights serves every pyramid
/// level, so the parameter count does not depend on the depth used at run time.
template <class T>
struct EncoderParams {
    Conv<T> stem1;     // 3 -> C, stride 2
    Conv<T> stem2;     // C -> C
    Conv<T> stem_x;    // 1x1 head producing the initial forward feature
    Conv<T> stem_h;    // 1x1 head producing the initial forward hidden state
    ConvGRUParams<T> gru_fwd;
    ConvGRUParams<T> gru_bwd;
    CGUParams<T> cgu_fwd;
    CGUParams<T> cgu_bwd;
    Conv<T> image1;    // image branch, 3 -> C
    Conv<T> image2;    // image branch, C -> C
    Conv<T> fuse;      // 1x1, 3C -> C

    static EncoderParams make(Initializer& init, int width);

    int width() const { return stem2.weight->value.dim(0); }

    template <class F>
    void visit(const std::string& prefix, F&& f) const {
        stem1.visit(prefix + ".stem1", f);
        stem2.visit(prefix + ".stem2", f);
        stem_x.visit(prefix + ".stem_x", f);
        stem_h.visit(prefix + ".stem_h", f);
        gru_fwd.visit(prefix + ".gru_fwd", f);
        gru_bwd.visit(prefix + ".gru_bwd", f);
        cgu_fwd.visit(prefix + ".cgu_fwd", f);
        cgu_bwd.visit(prefix + ".cgu_bwd", f);
        image1.visit(prefix + ".image1", f);
        image2.visit(prefix + ".image2", f);
        fuse.visit(prefix + ".fuse", f);
    }
};

/// Fused per-level features; levels[0] is the finest level (s = 1).
template <class T>
struct PyramidFeatures {
    std::vector<nn::Var<T>> levels;

    int count() const { return static_cast<int>(levels.size()); }
    const nn::Var<T>& level(int s) const { return levels.at(static_cast<std::size_t>(s - 1)); }
};

template <class T>
struct StemOutput {
    nn::Var<T> features;
    nn::Var<T> hidden;
};

/// Hooks used to probe the backward path.
template <class T>
struct EncodeOptions {
    /// Zero the backward hidden state and backward features at every level.
    bool ablate_backward = false;
    /// Added to the deepest level's forward feature before the backward pass runs.
    const nn::Tensor<T>* deep_forward_perturbation = nullptr;
};

constexpr int kStemStride = 2;

/// Smallest image side the stem accepts.
constexpr int stem_min_side() { return 2 * kStemStride; }

/// Smallest image side that still gives every level of an n-level pyramid two parent pixels.
int encoder_min_side(int n_levels);

/// Spatial (height, width) of levels s = 1..n: stem output halved s times with ceil division.
std::vector<std::pair<int, int>> pyramid_dims(int height, int width, int n_levels);

/// Per-image mean/std normalisation into a [3,H,W] constant.
template <class T>
nn::Var<T> normalize_image(const Image& image);

template <class T>
StemOutput<T> stem_forward(const EncoderParams<T>& params, const nn::Var<T>& image);

template <class T>
StemOutput<T> stem_forward(const EncoderParams<T>& params, const Image& image);

template <class T>
PyramidFeatures<T> encode(const EncoderParams<T>& params, const nn::Var<T>& image, int n_levels,
                          const EncodeOptions<T>& options = {});

template <class T>
PyramidFeatures<T> encode(const EncoderParams<T>& params, const Image& image, int n_levels,
                          const EncodeOptions<T>& options = {});

/// True when a perturbation of the deepest forward feature reaches the finest fused feature.
template <class T>
bool perturbation_reach(const EncoderParams<T>& params, const Image& image, int n_levels,
                        bool ablate_backward = false);

}  // namespace dpflow
