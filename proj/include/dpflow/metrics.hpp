#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dpflow/core.hpp"

namespace dpflow {

/// Per-pixel outlier threshold as a function of the ground-truth vector (gu, gv).
using ThresholdRule = std::function<double(double gu, double gv)>;

/// Mean end-point error over valid pixels. All metrics throw std::invalid_argument on shape
/// mismatch or an empty mask.
double epe(const FlowField& pred, const FlowField& gt, const ValidityMask& mask);

/// Percentage of valid pixels whose end-point error is strictly above the threshold.
double outlier_ratio(const FlowField& pred, const FlowField& gt, const ValidityMask& mask, const ThresholdRule& tau);
double outlier_ratio(const FlowField& pred, const FlowField& gt, const ValidityMask& mask, double tau);

/// KITTI outliers: tau = max(3, 0.05 |G|).
double fl_all(const FlowField& pred, const FlowField& gt, const ValidityMask& mask);
double one_px(const FlowField& pred, const FlowField& gt, const ValidityMask& mask);

/// Weighted accuracy-threshold area in [0, 100]; thresholds i/20, weights 1 - (i-1)/100.
double wauc(const FlowField& pred, const FlowField& gt, const ValidityMask& mask);

/// Block grid (H/2 x W/2): a block is valid when every pair of its four flows differs by less than 1 px.
ValidityMask spring_4k_block_mask(const FlowField& gt4k);
/// The block grid nearest-upsampled back to the ground-truth resolution.
ValidityMask spring_4k_mask(const FlowField& gt4k);

/// 1px percentage where each prediction pixel takes the smallest error over its four
/// ground-truth samples. Ground-truth values are used as stored.
double spring_eval(const FlowField& pred2k, const FlowField& gt4k);

struct MagnitudeHistogram {
    std::vector<double> edges;   // bins [edges[i], edges[i+1])
    std::vector<long long> counts;

    long long total() const;
};

/// Log-spaced edges from 0.1 to 1000 px.
std::vector<double> default_magnitude_edges(int bins = 16);

/// Magnitudes below the first edge count into the first bin, those at or above the last edge
/// into the last bin.
MagnitudeHistogram magnitude_histogram(const FlowField& flow, const std::vector<double>& edges);
MagnitudeHistogram magnitude_histogram(const FlowField& flow, const ValidityMask& mask,
                                       const std::vector<double>& edges);

struct EvalReport {
    std::string sample;
    double epe = 0.0;
    double fl_all = 0.0;
    double one_px = 0.0;
    double wauc = 0.0;
    long long n_valid = 0;
    MagnitudeHistogram magnitude_histogram;
    bool skipped = false;
    std::string note;

    std::string to_key_value() const;
    static std::string csv_header();
    std::string to_csv_row() const;
};

EvalReport evaluate(const FlowField& pred, const FlowField& gt, const ValidityMask& mask, std::string sample = "");

/// Mean of every non-skipped report, labelled "ALL". Histogram counts are summed.
EvalReport aggregate(const std::vector<EvalReport>& reports, std::string label = "ALL");

}  // namespace dpflow
