#include "dpflow/policy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>

namespace dpflow {

int select_levels(Resolution res, Resolution reference) {
    const double ratio = std::max(1.0, res.diagonal() / reference.diagonal());
    return static_cast<int>(std::round(std::log2(ratio))) + 3;
}

namespace {

int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

Image reflect_pad(const Image& img, int height, int width) {
    if (img.height() == height && img.width() == width) return img;
    Image out(img.channels(), height, width);
    for (int c = 0; c < img.channels(); ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) out.at(c, y, x) = img.at(c, reflect(y, img.height()), reflect(x, img.width()));
    return out;
}

Image crop(const Image& img, const TileRect& r) {
    Image out(img.channels(), r.height, r.width);
    for (int c = 0; c < img.channels(); ++c)
        for (int y = 0; y < r.height; ++y)
            for (int x = 0; x < r.width; ++x) out.at(c, y, x) = img.at(c, r.y + y, r.x + x);
    return out;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

std::vector<int> axis_starts(int length, int tile, int overlap) {
    if (tile >= length) return {0};
    const int step = tile - overlap;
    const int n = (length - overlap + step - 1) / step;
    std::vector<int> starts;
    for (int i = 0; i < n; ++i) {
        const long long num = static_cast<long long>(i) * (length - tile);
        starts.push_back(static_cast<int>((2 * num + (n - 1)) / (2 * (n - 1))));
    }
    return starts;
}

// Ramp 1..overlap+1 towards interior tile edges, flat elsewhere.
double feather(int i, int size, bool ramp_low, bool ramp_high, int overlap) {
    double w = 1.0;
    if (ramp_low) w = std::min(w, (i + 1.0) / (overlap + 1.0));
    if (ramp_high) w = std::min(w, (size - i) / (overlap + 1.0));
    return w;
}

}  // namespace

PredictResult predict(const DPFlowModel<float>& model, const ImagePair& pair, const PredictOptions& options) {
    const Resolution res = pair.resolution();
    const int N = options.n_levels ? *options.n_levels : select_levels(res, model.config.reference);
    const int iters = options.iters ? *options.iters : model.config.iters;
    const int stride = encoder_min_side(N);
    if (res.width < stride || res.height < stride) {
        throw std::invalid_argument("input " + std::to_string(res.width) + "x" + std::to_string(res.height) +
                                    " is too small for " + std::to_string(N) + " levels (minimum " +
                                    std::to_string(stride) + "x" + std::to_string(stride) + ")");
    }
    if (iters < 1) throw std::invalid_argument("iters must be at least 1");
    const int H = round_up(res.height, stride), W = round_up(res.width, stride);

    nn::NoGradGuard no_grad;
    ImagePair padded{reflect_pad(pair.first, H, W), reflect_pad(pair.second, H, W)};
    DecodeOptions dopt;
    dopt.iters = iters;
    dopt.all_predictions = false;
    auto preds = model.forward(padded, N, dopt);
    auto full = to_mixture_prediction(preds.back());

    PredictResult out;
    out.n_levels = N;
    out.iters = iters;
    out.flow = FlowField(res.height, res.width);
    out.mixture.level = full.level;
    out.mixture.iteration = full.iteration;
    const std::size_t n = static_cast<std::size_t>(res.height) * res.width;
    out.mixture.alpha.resize(n);
    out.mixture.b1.resize(n);
    out.mixture.b2.resize(n);
    for (int y = 0; y < res.height; ++y) {
        for (int x = 0; x < res.width; ++x) {
            const std::size_t src = static_cast<std::size_t>(y) * W + x;
            const std::size_t dst = static_cast<std::size_t>(y) * res.width + x;
            out.flow.u(y, x) = full.flow.u(y, x);
            out.flow.v(y, x) = full.flow.v(y, x);
            out.mixture.alpha[dst] = full.alpha[src];
            out.mixture.b1[dst] = full.b1[src];
            out.mixture.b2[dst] = full.b2[src];
        }
    }
    out.mixture.flow = out.flow;
    return out;
}

std::vector<TileRect> tile_layout(Resolution image, Resolution tile, int overlap) {
    if (tile.width > image.width || tile.height > image.height) {
        throw std::invalid_argument("tile " + std::to_string(tile.width) + "x" + std::to_string(tile.height) +
                                    " exceeds the image");
    }
    if (overlap < 0 || 2 * overlap >= std::min(tile.width, tile.height)) {
        throw std::invalid_argument("tile overlap must be non-negative and below half the tile size");
    }
    std::vector<TileRect> tiles;
    for (int y : axis_starts(image.height, tile.height, overlap))
        for (int x : axis_starts(image.width, tile.width, overlap)) tiles.push_back({x, y, tile.width, tile.height});
    return tiles;
}

TileWeights tile_weights(Resolution image, Resolution tile, int overlap) {
    TileWeights tw;
    tw.tiles = tile_layout(image, tile, overlap);
    const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
    std::vector<double> raw_total(n, 0.0);
    for (const auto& t : tw.tiles) {
        std::vector<double> w(static_cast<std::size_t>(t.width) * t.height);
        const bool left = t.x > 0, right = t.x + t.width < image.width;
        const bool top = t.y > 0, bottom = t.y + t.height < image.height;
        for (int y = 0; y < t.height; ++y) {
            const double wy = feather(y, t.height, top, bottom, overlap);
            for (int x = 0; x < t.width; ++x) {
                const double v = wy * feather(x, t.width, left, right, overlap);
                w[static_cast<std::size_t>(y) * t.width + x] = v;
                raw_total[static_cast<std::size_t>(t.y + y) * image.width + t.x + x] += v;
            }
        }
        tw.weights.push_back(std::move(w));
    }
    tw.total.assign(n, 0.0);
    for (std::size_t k = 0; k < tw.tiles.size(); ++k) {
        const auto& t = tw.tiles[k];
        for (int y = 0; y < t.height; ++y) {
            for (int x = 0; x < t.width; ++x) {
                const std::size_t g = static_cast<std::size_t>(t.y + y) * image.width + t.x + x;
                auto& w = tw.weights[k][static_cast<std::size_t>(y) * t.width + x];
                w /= raw_total[g];
                tw.total[g] += w;
            }
        }
    }
    return tw;
}

FlowField tiled_inference(const DPFlowModel<float>& model, const ImagePair& pair, Resolution tile, int overlap,
                          const PredictOptions& options) {
    const Resolution res = pair.resolution();
    const auto tw = tile_weights(res, tile, overlap);
    PredictOptions tile_opts = options;
    if (!tile_opts.n_levels) tile_opts.n_levels = select_levels(tile, model.config.reference);

    std::vector<FlowField> flows(tw.tiles.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    auto worker = [&] {
        for (std::size_t k = next++; k < tw.tiles.size() && !failed; k = next++) {
            try {
                const ImagePair sub{crop(pair.first, tw.tiles[k]), crop(pair.second, tw.tiles[k])};
                flows[k] = predict(model, sub, tile_opts).flow;
            } catch (...) {
                if (!failed.exchange(true)) error = std::current_exception();
            }
        }
    };
    const int n_threads = std::min<int>(worker_threads(), static_cast<int>(tw.tiles.size()));
    std::vector<std::thread> pool;
    for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);

    FlowField out(res.height, res.width);
    for (std::size_t k = 0; k < tw.tiles.size(); ++k) {
        const auto& t = tw.tiles[k];
        for (int y = 0; y < t.height; ++y) {
            for (int x = 0; x < t.width; ++x) {
                const double w = tw.weights[k][static_cast<std::size_t>(y) * t.width + x];
                out.u(t.y + y, t.x + x) += w * flows[k].u(y, x);
                out.v(t.y + y, t.x + x) += w * flows[k].v(y, x);
            }
        }
    }
    return out;
}

FlowField downsampled_inference(const DPFlowModel<float>& model, const ImagePair& pair, Resolution working,
                                const PredictOptions& options) {
    const Resolution res = pair.resolution();
    if (working.width > res.width || working.height > res.height) {
        throw std::invalid_argument("working resolution must not exceed the input resolution");
    }
    if (working == res) return predict(model, pair, options).flow;
    const auto small = resize_image(pair, working, ResizeMode::Bilinear);
    const auto flow = predict(model, small, options).flow;
    return resize_flow(flow, res.height, res.width);
}

long long peak_activation_elements(const DPFlowModel<float>& model, Resolution res, int n_levels, int iters) {
    Image img(3, res.height, res.width);
    auto data = img.data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>((i * 2654435761u % 1000) / 1000.0);
    const auto pair = ImagePair::make(img, img);
    PredictOptions opts;
    opts.n_levels = n_levels;
    opts.iters = iters;
    const long long before = nn::ElementCounter::live();
    nn::ElementCounter::reset_peak();
    predict(model, pair, opts);
    return nn::ElementCounter::peak() - before;
}

}  // namespace dpflow
