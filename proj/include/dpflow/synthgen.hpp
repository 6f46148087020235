#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dpflow/core.hpp"

namespace dpflow {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// p -> c + s R(theta) (p - c) + t, in base-resolution pixel units.
struct Affine {
    double tx = 0.0;
    double ty = 0.0;
    double theta = 0.0;
    double scale = 1.0;
    Point center;

    Point apply(Point p) const;
    Point inverse(Point p) const;
};

/// Band-limited value noise around a base colour.
struct Texture {
    std::uint64_t seed = 0;
    std::array<double, 3> color{0.5, 0.5, 0.5};
    double contrast = 0.5;
    std::array<double, 3> cell{12.0, 6.0, 3.0};  // octave cell sizes, base px
    std::array<double, 3> amplitude{0.5, 0.3, 0.2};

    std::array<double, 3> sample(Point q) const;
};

struct Layer {
    enum class Shape { Ellipse, Rectangle };
    Shape shape = Shape::Ellipse;
    Point center;
    double rx = 10.0;
    double ry = 10.0;
    double angle = 0.0;
    Texture texture;
    Affine motion;

    /// Signed distance (approximate for ellipses) in frame-1 base px; negative inside.
    double sdf(Point p) const;
};

struct SceneSpec {
    std::uint64_t seed = 0;
    Resolution base{192, 108};
    Texture background;
    Affine background_motion;
    std::vector<Layer> layers;  // back to front
};

struct SceneOptions {
    Resolution base{192, 108};
    int min_layers = 1;
    int max_layers = 4;
    double min_radius = 10.0;
    double max_radius = 40.0;
    double background_translation = 5.0;
    double background_rotation = 0.03;
    double background_scale = 0.03;
    double layer_translation = 8.0;
    double layer_rotation = 0.1;
    double layer_scale = 0.05;
    bool translation_only = false;
};

SceneSpec random_scene(std::uint64_t seed, const SceneOptions& options = {});

struct RenderedScene {
    ImagePair pair;
    FlowField flow;
    ValidityMask mask;
    std::vector<int> owner;  // -1 background, else layer index
    int factor = 1;
};

/// Rasterises both frames at factor x base resolution with the exact affine flow. Pixel (x, y)
/// sits at base coordinate ((x+0.5)/n, (y+0.5)/n). The mask drops out-of-frame and occluded pixels.
RenderedScene render(const SceneSpec& scene, int factor);

/// Flow of the owning surface at base point p, in factor-n pixel units.
Point analytic_flow(const SceneSpec& scene, Point p, int factor);

struct ManifestRow {
    int scene_id = 0;
    int factor = 1;
    std::string image1;
    std::string image2;
    std::string flow;
    std::string mask;
};

/// Per-scene seed: independent of rendering order.
std::uint64_t scene_seed(std::uint64_t seed, int scene_index);

/// Renders n_scenes scenes at every factor into out_dir and writes out_dir/manifest.csv.
/// Paths in the manifest are relative to out_dir.
std::vector<ManifestRow> generate_suite(std::uint64_t seed, int n_scenes, const std::vector<int>& factors,
                                        const std::string& out_dir, const SceneOptions& options = {});

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
/// Rows with paths resolved against the manifest's directory.
std::vector<ManifestRow> read_manifest(const std::string& path);

}  // namespace dpflow
