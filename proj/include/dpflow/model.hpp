#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dpflow/decoder.hpp"
#include "dpflow/encoder.hpp"

namespace dpflow {

struct ModelConfig {
    int width = 32;
    int radius = DecoderParams<float>::kDefaultRadius;
    int iters = 4;
    /// Resolution at which automatic depth selection picks three levels.
    Resolution reference{960, 540};
};

template <class T>
struct DPFlowModel {
    ModelConfig config;
    EncoderParams<T> encoder;
    DecoderParams<T> decoder;

    static DPFlowModel make(const ModelConfig& config, std::uint64_t seed);

    template <class F>
    void visit(F&& f) const {
        encoder.visit("encoder", f);
        decoder.visit("decoder", f);
    }

    std::vector<nn::Var<T>> parameters() const;
    std::size_t parameter_count() const;

    /// Runs encoder and decoder on a pair whose sides are already multiples of 2^(N+1).
    std::vector<ScalePrediction<T>> forward(const ImagePair& pair, int n_levels, const DecodeOptions& options) const;

    /// Same weights at another precision.
    template <class U>
    DPFlowModel<U> cast() const;
};

/// One named array of a parameter container.
struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

constexpr std::uint32_t kContainerVersion = 1;

/// "DPFK", u32 version, then arrays (u16 name length, name, u8 rank, u32 dims, f32 data), all little-endian.
void write_container(const std::string& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_container(const std::string& path);

template <class T>
std::vector<NamedArray> model_arrays(const DPFlowModel<T>& model);

/// Rebuilds a model from container arrays; other arrays are ignored. Throws std::runtime_error
/// on missing or mis-shaped parameters.
DPFlowModel<float> model_from_arrays(const std::vector<NamedArray>& arrays);

void save_model(const DPFlowModel<float>& model, const std::string& path);
DPFlowModel<float> load_model(const std::string& path);

extern template struct DPFlowModel<float>;
extern template struct DPFlowModel<double>;

}  // namespace dpflow
