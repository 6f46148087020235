#include "dpflow/synthgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dpflow/io.hpp"

namespace dpflow {

namespace fs = std::filesystem;

Point Affine::apply(Point p) const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double dx = p.x - center.x, dy = p.y - center.y;
    return {center.x + scale * (c * dx - s * dy) + tx, center.y + scale * (s * dx + c * dy) + ty};
}

Point Affine::inverse(Point p) const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double dx = (p.x - tx - center.x) / scale, dy = (p.y - ty - center.y) / scale;
    return {center.x + c * dx + s * dy, center.y - s * dx + c * dy};
}

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double lattice(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
    const auto h = mix64(seed ^ mix64(static_cast<std::uint64_t>(ix) * 0x632be59bd9b4e019ULL ^
                                      mix64(static_cast<std::uint64_t>(iy))));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double value_noise(double x, double y, std::uint64_t seed) {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double tx = fade(x - fx), ty = fade(y - fy);
    const double a = lattice(ix, iy, seed), b = lattice(ix + 1, iy, seed);
    const double c = lattice(ix, iy + 1, seed), d = lattice(ix + 1, iy + 1, seed);
    return (a + (b - a) * tx) * (1.0 - ty) + (c + (d - c) * tx) * ty;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    double uniform(double lo, double hi) { return lo + (hi - lo) * static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    int integer(int lo, int hi) { return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1)); }
    std::uint64_t bits() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

Texture random_texture(Rng& rng) {
    Texture t;
    t.seed = rng.bits();
    for (auto& c : t.color) c = rng.uniform(0.15, 0.85);
    t.contrast = rng.uniform(0.5, 0.9);
    return t;
}

double coverage(double sdf_px) { return std::clamp(0.5 - sdf_px, 0.0, 1.0); }

// Index of the top-most layer containing p in frame 1, -1 for the background.
int owner_frame1(const SceneSpec& scene, Point p) {
    for (int l = static_cast<int>(scene.layers.size()) - 1; l >= 0; --l)
        if (scene.layers[static_cast<std::size_t>(l)].sdf(p) < 0.0) return l;
    return -1;
}

int owner_frame2(const SceneSpec& scene, Point p) {
    for (int l = static_cast<int>(scene.layers.size()) - 1; l >= 0; --l) {
        const auto& layer = scene.layers[static_cast<std::size_t>(l)];
        if (layer.sdf(layer.motion.inverse(p)) < 0.0) return l;
    }
    return -1;
}

const Affine& motion_of(const SceneSpec& scene, int owner) {
    return owner < 0 ? scene.background_motion : scene.layers[static_cast<std::size_t>(owner)].motion;
}

}  // namespace

std::array<double, 3> Texture::sample(Point q) const {
    std::array<double, 3> out{};
    double amp_total = 0.0;
    for (double a : amplitude) amp_total += a;
    for (int c = 0; c < 3; ++c) {
        double n = 0.0;
        for (int o = 0; o < 3; ++o) {
            const std::uint64_t s = mix64(seed + static_cast<std::uint64_t>(c * 3 + o));
            n += amplitude[static_cast<std::size_t>(o)] *
                 value_noise(q.x / cell[static_cast<std::size_t>(o)], q.y / cell[static_cast<std::size_t>(o)], s);
        }
        out[static_cast<std::size_t>(c)] =
            std::clamp(color[static_cast<std::size_t>(c)] + contrast * (n / amp_total - 0.5), 0.0, 1.0);
    }
    return out;
}

double Layer::sdf(Point p) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = p.x - center.x, dy = p.y - center.y;
    const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
    if (shape == Shape::Rectangle) {
        const double qx = std::abs(lx) - rx, qy = std::abs(ly) - ry;
        const double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
        return outside + std::min(std::max(qx, qy), 0.0);
    }
    return (std::hypot(lx / rx, ly / ry) - 1.0) * std::min(rx, ry);
}

SceneSpec random_scene(std::uint64_t seed, const SceneOptions& o) {
    if (o.min_layers < 0 || o.max_layers < o.min_layers) throw std::invalid_argument("bad layer count range");
    Rng rng(seed);
    SceneSpec scene;
    scene.seed = seed;
    scene.base = o.base;
    scene.background = random_texture(rng);
    const Point mid{o.base.width / 2.0, o.base.height / 2.0};
    auto motion = [&](double t, double r, double s, Point c) {
        Affine a;
        a.tx = rng.uniform(-t, t);
        a.ty = rng.uniform(-t, t);
        const double theta = rng.uniform(-r, r);
        const double scale = rng.uniform(1.0 - s, 1.0 + s);
        if (!o.translation_only) {
            a.theta = theta;
            a.scale = scale;
        }
        a.center = c;
        return a;
    };
    scene.background_motion = motion(o.background_translation, o.background_rotation, o.background_scale, mid);
    const int n = rng.integer(o.min_layers, o.max_layers);
    for (int i = 0; i < n; ++i) {
        Layer l;
        l.shape = rng.uniform(0.0, 1.0) < 0.5 ? Layer::Shape::Ellipse : Layer::Shape::Rectangle;
        l.center = {rng.uniform(0.0, o.base.width), rng.uniform(0.0, o.base.height)};
        l.rx = rng.uniform(o.min_radius, o.max_radius);
        l.ry = rng.uniform(o.min_radius, o.max_radius);
        l.angle = rng.uniform(0.0, std::numbers::pi);
        l.texture = random_texture(rng);
        l.motion = motion(o.layer_translation, o.layer_rotation, o.layer_scale, l.center);
        scene.layers.push_back(l);
    }
    return scene;
}

Point analytic_flow(const SceneSpec& scene, Point p, int factor) {
    const Point q = motion_of(scene, owner_frame1(scene, p)).apply(p);
    return {factor * (q.x - p.x), factor * (q.y - p.y)};
}

RenderedScene render(const SceneSpec& scene, int factor) {
    if (factor != 1 && factor != 2 && factor != 4 && factor != 8) {
        throw std::invalid_argument("render factor must be 1, 2, 4 or 8, got " + std::to_string(factor));
    }
    const int W = scene.base.width * factor, H = scene.base.height * factor;
    Image img1(3, H, W), img2(3, H, W);
    RenderedScene out;
    out.factor = factor;
    out.flow = FlowField(H, W);
    out.mask = ValidityMask(H, W, false);
    out.owner.assign(static_cast<std::size_t>(W) * H, -1);
    const double n = factor;

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const Point p{(x + 0.5) / n, (y + 0.5) / n};

            auto c1 = scene.background.sample(p);
            auto c2 = scene.background.sample(scene.background_motion.inverse(p));
            for (const auto& layer : scene.layers) {
                const double a1 = coverage(layer.sdf(p) * n);
                if (a1 > 0.0) {
                    const auto t = layer.texture.sample(p);
                    for (int c = 0; c < 3; ++c) c1[c] += a1 * (t[c] - c1[c]);
                }
                const Point q = layer.motion.inverse(p);
                const double a2 = coverage(layer.sdf(q) * layer.motion.scale * n);
                if (a2 > 0.0) {
                    const auto t = layer.texture.sample(q);
                    for (int c = 0; c < 3; ++c) c2[c] += a2 * (t[c] - c2[c]);
                }
            }
            for (int c = 0; c < 3; ++c) {
                img1.at(c, y, x) = static_cast<float>(c1[c]);
                img2.at(c, y, x) = static_cast<float>(c2[c]);
            }

            const int owner = owner_frame1(scene, p);
            const Point q = motion_of(scene, owner).apply(p);
            out.flow.u(y, x) = n * (q.x - p.x);
            out.flow.v(y, x) = n * (q.y - p.y);
            out.owner[static_cast<std::size_t>(y) * W + x] = owner;
            const bool inside = q.x >= 0.0 && q.x <= scene.base.width && q.y >= 0.0 && q.y <= scene.base.height;
            out.mask.set(y, x, inside && owner_frame2(scene, q) == owner);
        }
    }
    out.pair = ImagePair::make(std::move(img1), std::move(img2));
    return out;
}

std::uint64_t scene_seed(std::uint64_t seed, int scene_index) {
    return mix64(seed ^ mix64(static_cast<std::uint64_t>(scene_index) + 0x5c3e5eedULL));
}

std::vector<ManifestRow> generate_suite(std::uint64_t seed, int n_scenes, const std::vector<int>& factors,
                                        const std::string& out_dir, const SceneOptions& options) {
    if (n_scenes < 1) throw std::invalid_argument("generate_suite: n_scenes must be at least 1");
    if (factors.empty()) throw std::invalid_argument("generate_suite: no factors given");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw std::runtime_error("cannot create output directory " + out_dir);

    std::vector<ManifestRow> rows;
    for (int s = 0; s < n_scenes; ++s) {
        for (int f : factors) {
            char stem[64];
            std::snprintf(stem, sizeof stem, "scene%05d_x%d", s, f);
            const std::string b(stem);
            rows.push_back({s, f, b + "_img1.png", b + "_img2.png", b + "_flow.flo", b + "_mask.png"});
        }
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    auto worker = [&] {
        for (std::size_t i = next++; i < rows.size() && !failed; i = next++) {
            try {
                const auto& r = rows[i];
                const auto scene = random_scene(scene_seed(seed, r.scene_id), options);
                const auto rs = render(scene, r.factor);
                const fs::path dir(out_dir);
                write_png((dir / r.image1).string(), rs.pair.first);
                write_png((dir / r.image2).string(), rs.pair.second);
                write_flo((dir / r.flow).string(), rs.flow);
                write_mask_png((dir / r.mask).string(), rs.mask);
            } catch (...) {
                if (!failed.exchange(true)) error = std::current_exception();
            }
        }
    };
    const int n_threads = std::min<int>(worker_threads(), static_cast<int>(rows.size()));
    std::vector<std::thread> pool;
    for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);

    write_manifest((fs::path(out_dir) / "manifest.csv").string(), rows);
    return rows;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "scene_id,factor,image1_path,image2_path,flow_path,mask_path\n";
    for (const auto& r : rows)
        os << r.scene_id << ',' << r.factor << ',' << r.image1 << ',' << r.image2 << ',' << r.flow << ',' << r.mask
           << '\n';
    if (!os) throw std::runtime_error("failed writing " + path);
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest " + path);
    const fs::path dir = fs::path(path).parent_path();
    std::string line;
    std::getline(is, line);
    if (line.rfind("scene_id,factor,", 0) != 0) throw std::runtime_error(path + ": missing manifest header");
    std::vector<ManifestRow> rows;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 6) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 6 columns");
        ManifestRow r;
        try {
            r.scene_id = std::stoi(cells[0]);
            r.factor = std::stoi(cells[1]);
        } catch (const std::exception&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad scene id or factor");
        }
        auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (dir / p).string(); };
        r.image1 = resolve(cells[2]);
        r.image2 = resolve(cells[3]);
        r.flow = resolve(cells[4]);
        r.mask = resolve(cells[5]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace dpflow
