#include "dpflow/encoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dpflow {

template <class T>
EncoderParams<T> EncoderParams<T>::make(Initializer& init, int width) {
    if (width < 2) throw std::invalid_argument("encoder width must be at least 2");
    EncoderParams p;
    p.stem1 = Conv<T>::make(init, 3, width, 3, kStemStride);
    p.stem2 = Conv<T>::make(init, width, width, 3);
    p.stem_x = Conv<T>::make(init, width, width, 1);
    p.stem_h = Conv<T>::make(init, width, width, 1);
    p.gru_fwd = ConvGRUParams<T>::make(init, width, width);
    p.gru_bwd = ConvGRUParams<T>::make(init, width, width);
    p.cgu_fwd = CGUParams<T>::make(init, width);
    p.cgu_bwd = CGUParams<T>::make(init, width);
    p.image1 = Conv<T>::make(init, 3, width, 3);
    p.image2 = Conv<T>::make(init, width, width, 3);
    p.fuse = Conv<T>::make(init, 3 * width, width, 1);
    return p;
}

int encoder_min_side(int n_levels) {
    if (n_levels < 1) throw std::invalid_argument("pyramid needs at least one level");
    if (n_levels > 20) throw std::invalid_argument("pyramid depth " + std::to_string(n_levels) + " is unreasonable");
    return 1 << (n_levels + 1);
}

std::vector<std::pair<int, int>> pyramid_dims(int height, int width, int n_levels) {
    std::vector<std::pair<int, int>> dims;
    int h = (height + 1) / 2, w = (width + 1) / 2;
    for (int s = 1; s <= n_levels; ++s) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        dims.emplace_back(h, w);
    }
    return dims;
}

template <class T>
nn::Var<T> normalize_image(const Image& image) {
    if (image.channels() != 3) throw std::invalid_argument("encoder expects RGB input");
    const auto data = image.data();
    double mean = 0.0;
    for (float x : data) mean += x;
    mean /= static_cast<double>(data.size());
    double var = 0.0;
    for (float x : data) var += (x - mean) * (x - mean);
    const double stdev = std::sqrt(var / static_cast<double>(data.size()));
    const double inv = stdev > 1e-6 ? 1.0 / stdev : 0.0;
    nn::Tensor<T> t({3, image.height(), image.width()});
    for (std::size_t i = 0; i < data.size(); ++i) t[i] = static_cast<T>((data[i] - mean) * inv);
    return nn::constant(std::move(t));
}

template <class T>
StemOutput<T> stem_forward(const EncoderParams<T>& params, const nn::Var<T>& image) {
    const auto& v = image->value;
    if (v.rank() != 3 || v.channels() != 3) throw std::invalid_argument("stem_forward: expected a [3,H,W] image");
    if (v.height() < stem_min_side() || v.width() < stem_min_side()) {
        throw std::invalid_argument("stem_forward: input " + std::to_string(v.width()) + "x" +
                                    std::to_string(v.height()) + " is below the minimum size of " +
                                    std::to_string(stem_min_side()) + "x" + std::to_string(stem_min_side()));
    }
    auto x = nn::gelu(params.stem1(image));
    x = nn::gelu(params.stem2(x));
    return {params.stem_x(x), nn::tanh(params.stem_h(x))};
}

template <class T>
StemOutput<T> stem_forward(const EncoderParams<T>& params, const Image& image) {
    return stem_forward(params, normalize_image<T>(image));
}

template <class T>
PyramidFeatures<T> encode(const EncoderParams<T>& params, const nn::Var<T>& image, int n_levels,
                          const EncodeOptions<T>& options) {
    const int min_side = encoder_min_side(n_levels);
    const int H = image->value.height(), W = image->value.width();
    if (H < min_side || W < min_side) {
        throw std::invalid_argument("encode: " + std::to_string(n_levels) + " levels need at least " +
                                    std::to_string(min_side) + "x" + std::to_string(min_side) + " input, got " +
                                    std::to_string(W) + "x" + std::to_string(H));
    }
    const int C = params.width();
    const auto dims = pyramid_dims(H, W, n_levels);
    auto stem = stem_forward(params, image);

    std::vector<nn::Var<T>> fwd(n_levels);
    nn::Var<T> hf = stem.hidden, xf = stem.features;
    for (int s = 0; s < n_levels; ++s) {
        hf = convgru_forward(params.gru_fwd, nn::avg_pool2(hf), nn::avg_pool2(xf));
        xf = cgu_forward(params.cgu_fwd, hf);
        fwd[s] = xf;
    }
    if (options.deep_forward_perturbation) {
        fwd.back() = nn::add(fwd.back(), nn::constant(*options.deep_forward_perturbation));
    }

    std::vector<nn::Var<T>> image_levels(n_levels);
    nn::Var<T> img = nn::avg_pool2(image);
    for (int s = 0; s < n_levels; ++s) {
        img = nn::avg_pool2(img);
        image_levels[s] = img;
    }

    PyramidFeatures<T> out;
    out.levels.resize(n_levels);
    nn::Var<T> hb;
    for (int s = n_levels - 1; s >= 0; --s) {
        const auto [h, w] = dims[s];
        nn::Var<T> h_in = hb ? nn::resize_bilinear(hb, h, w, nn::ResampleBorder::Clamp)
                             : nn::constant(nn::Tensor<T>({C, h, w}));
        hb = convgru_forward(params.gru_bwd, h_in, fwd[s]);
        nn::Var<T> xb = cgu_forward(params.cgu_bwd, hb);
        if (options.ablate_backward) {
            hb = nn::constant(nn::Tensor<T>({C, h, w}));
            xb = nn::constant(nn::Tensor<T>({C, h, w}));
        }
        auto xi = params.image2(nn::gelu(params.image1(image_levels[s])));
        out.levels[s] = params.fuse(nn::concat<T>({fwd[s], xb, xi}));
    }
    return out;
}

template <class T>
PyramidFeatures<T> encode(const EncoderParams<T>& params, const Image& image, int n_levels,
                          const EncodeOptions<T>& options) {
    return encode(params, normalize_image<T>(image), n_levels, options);
}

template <class T>
bool perturbation_reach(const EncoderParams<T>& params, const Image& image, int n_levels, bool ablate_backward) {
    if (n_levels < 2) throw std::invalid_argument("perturbation_reach needs at least two levels");
    nn::NoGradGuard no_grad;
    EncodeOptions<T> options;
    options.ablate_backward = ablate_backward;
    const auto base = encode(params, image, n_levels, options);

    const auto& deep = base.levels.back()->value;
    Initializer init(0x5eedULL);
    auto delta = init.uniform_tensor<T>(deep.shape(), 1.0);
    options.deep_forward_perturbation = &delta;
    const auto moved = encode(params, image, n_levels, options);

    const auto& a = base.levels.front()->value;
    const auto& b = moved.levels.front()->value;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return true;
    return false;
}

#define DPFLOW_INSTANTIATE_ENCODER(T)                                                                         \
    template struct EncoderParams<T>;                                                                         \
    template nn::Var<T> normalize_image<T>(const Image&);                                                     \
    template StemOutput<T> stem_forward(const EncoderParams<T>&, const nn::Var<T>&);                          \
    template StemOutput<T> stem_forward(const EncoderParams<T>&, const Image&);                               \
    template PyramidFeatures<T> encode(const EncoderParams<T>&, const nn::Var<T>&, int, const EncodeOptions<T>&); \
    template PyramidFeatures<T> encode(const EncoderParams<T>&, const Image&, int, const EncodeOptions<T>&);  \
    template bool perturbation_reach(const EncoderParams<T>&, const Image&, int, bool);

DPFLOW_INSTANTIATE_ENCODER(float)
DPFLOW_INSTANTIATE_ENCODER(double)

}  // namespace dpflow
