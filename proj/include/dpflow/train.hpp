#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpflow/loss.hpp"
#include "dpflow/model.hpp"
#include "dpflow/synthgen.hpp"

namespace dpflow {

struct Sample {
    ImagePair pair;
    FlowField flow;
    ValidityMask mask;
};

std::vector<Sample> load_samples(const std::vector<ManifestRow>& rows);
/// Renders n scenes at one factor in memory.
std::vector<Sample> synthetic_samples(std::uint64_t seed, int n, int factor, const SceneOptions& options = {});

struct TrainConfig {
    ModelConfig model;
    std::uint64_t seed = 1;
    int steps = 1000;
    int batch = 2;
    int accumulation = 1;
    double lr = 2.5e-4;
    double weight_decay = 1e-4;
    double pct_start = 0.05;
    double clip = 1.0;
    double gamma = 0.8;
    int levels = 3;
    Resolution crop{128, 96};

    void validate() const;
};

/// One-cycle schedule with linear ramps: max/25 -> max over pct_start, then down to max/25/1e4.
double one_cycle_lr(const TrainConfig& cfg, int step);

struct StepReport {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

class Trainer {
public:
    /// Throws std::invalid_argument when the data cannot provide crops of the configured size.
    Trainer(TrainConfig cfg, std::vector<Sample> data);

    /// Gradient accumulation over batch x accumulation samples, clipping and one AdamW update.
    StepReport step();

    /// Summed gradient of one step's samples without updating the weights.
    std::vector<nn::Tensor<float>> step_gradient(int step_index, double* loss = nullptr) const;

    int completed_steps() const { return step_; }
    const DPFlowModel<float>& model() const { return model_; }
    DPFlowModel<float>& model() { return model_; }
    const TrainConfig& config() const { return cfg_; }

    void save_checkpoint(const std::string& path) const;
    /// Restores weights, optimizer moments and the step counter.
    void load_checkpoint(const std::string& path);

private:
    std::vector<Sample> batch_for(int step_index) const;

    TrainConfig cfg_;
    std::vector<Sample> data_;
    DPFlowModel<float> model_;
    std::vector<nn::Tensor<float>> m_;
    std::vector<nn::Tensor<float>> v_;
    int step_ = 0;
};

/// Writes "step,lr,loss,grad_norm" rows; the callback sees every report.
void train(Trainer& trainer, int steps, const std::string& log_path,
           const std::function<void(const StepReport&)>& on_step = {});

}  // namespace dpflow
