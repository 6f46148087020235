#pragma once

#include <optional>
#include <vector>

#include "dpflow/model.hpp"

namespace dpflow {

/// round(log2(max(1, diag / reference_diag))) + 3 with halves rounded away from zero.
int select_levels(Resolution res, Resolution reference = {960, 540});

struct PredictOptions {
    std::optional<int> n_levels;
    std::optional<int> iters;
};

struct PredictResult {
    FlowField flow;
    MixturePrediction mixture;
    int n_levels = 0;
    int iters = 0;
};

/// Full-resolution inference. The pair is reflect-padded to a multiple of 2^(N+1) and the
/// output cropped back. Throws std::invalid_argument when a side is below 2^(N+1).
PredictResult predict(const DPFlowModel<float>& model, const ImagePair& pair, const PredictOptions& options = {});

struct TileRect {
    int x = 0;
    int y = 0;
    int width = 0;
    int height = 0;
};

/// Tile origins covering the image with at least `overlap` shared pixels between neighbours.
std::vector<TileRect> tile_layout(Resolution image, Resolution tile, int overlap);

/// Normalised blending weight of every tile (row-major per tile), plus the per-pixel sum.
struct TileWeights {
    std::vector<TileRect> tiles;
    std::vector<std::vector<double>> weights;
    std::vector<double> total;
};
TileWeights tile_weights(Resolution image, Resolution tile, int overlap);

/// Predicts each tile independently and blends overlaps with linear feathering. Tiles may run
/// on up to DPFLOWKIT_THREADS worker threads; the result does not depend on scheduling.
FlowField tiled_inference(const DPFlowModel<float>& model, const ImagePair& pair, Resolution tile, int overlap,
                          const PredictOptions& options = {});

/// Resizes the pair to `working`, predicts, and resizes the flow back with magnitude scaling.
FlowField downsampled_inference(const DPFlowModel<float>& model, const ImagePair& pair, Resolution working,
                                const PredictOptions& options = {});

/// Peak number of live tensor elements during one inference on a dummy input.
long long peak_activation_elements(const DPFlowModel<float>& model, Resolution res, int n_levels, int iters = 1);

}  // namespace dpflow
