#include "dpflow/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dpflow {

void LossConfig::validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("loss gamma must lie in (0, 1)");
    if (n_scales < 1 || n_iters < 1) throw std::invalid_argument("loss needs at least one scale and one iteration");
}

double LossConfig::weight(int scale, int iteration) const {
    return std::pow(gamma, n_iters * scale - iteration);
}

namespace {

void check_shapes(int h, int w, const FlowField& gt, const ValidityMask& mask) {
    if (gt.height() != h || gt.width() != w || !mask.matches(gt)) {
        throw std::invalid_argument("loss: prediction " + std::to_string(w) + "x" + std::to_string(h) +
                                    " does not match ground truth " + std::to_string(gt.width()) + "x" +
                                    std::to_string(gt.height()));
    }
}

// Index permutation sorting predictions by (s, k) after checking full coverage.
template <class P>
std::vector<std::size_t> canonical_order(const std::vector<P>& preds, const LossConfig& cfg) {
    cfg.validate();
    std::vector<int> seen(static_cast<std::size_t>(cfg.n_scales * cfg.n_iters), -1);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int s = preds[i].level, k = preds[i].iteration;
        if (s < 1 || s > cfg.n_scales || k < 1 || k > cfg.n_iters) {
            throw std::invalid_argument("loss: prediction (s=" + std::to_string(s) + ", k=" + std::to_string(k) +
                                        ") outside the configured range");
        }
        auto& slot = seen[static_cast<std::size_t>((s - 1) * cfg.n_iters + (k - 1))];
        if (slot >= 0) {
            throw std::invalid_argument("loss: duplicate prediction (s=" + std::to_string(s) +
                                        ", k=" + std::to_string(k) + ")");
        }
        slot = static_cast<int>(i);
    }
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < seen.size(); ++j) {
        if (seen[j] < 0) {
            throw std::invalid_argument("loss: missing prediction (s=" + std::to_string(j / cfg.n_iters + 1) +
                                        ", k=" + std::to_string(j % cfg.n_iters + 1) + ")");
        }
        order.push_back(static_cast<std::size_t>(seen[j]));
    }
    return order;
}

}  // namespace

template <class T>
nn::Var<T> mol_nll(const ScalePrediction<T>& pred, const nn::Tensor<T>& gt, const ValidityMask& mask) {
    return nn::mol_nll(pred.flow, pred.mixture, gt, mask.data());
}

LossValue mol_nll(const MixturePrediction& pred, const FlowField& gt, const ValidityMask& mask) {
    check_shapes(pred.height(), pred.width(), gt, mask);
    nn::NoGradGuard guard;
    const auto p = from_mixture_prediction<double>(pred);
    auto v = mol_nll(p, flow_to_tensor<double>(gt), mask);
    return {v->value[0], mask.count() == 0};
}

template <class T>
nn::Var<T> multiscale_loss(const std::vector<ScalePrediction<T>>& preds, const FlowField& gt,
                           const ValidityMask& mask, const LossConfig& cfg) {
    const auto order = canonical_order(preds, cfg);
    const auto gt_t = flow_to_tensor<T>(gt);
    std::vector<nn::Var<T>> terms;
    std::vector<T> weights;
    for (auto i : order) {
        const auto& p = preds[i];
        check_shapes(p.flow->value.height(), p.flow->value.width(), gt, mask);
        terms.push_back(mol_nll(p, gt_t, mask));
        weights.push_back(static_cast<T>(cfg.weight(p.level, p.iteration)));
    }
    return nn::weighted_sum(terms, weights);
}

LossValue multiscale_loss(const std::vector<MixturePrediction>& preds, const FlowField& gt, const ValidityMask& mask,
                          const LossConfig& cfg) {
    const auto order = canonical_order(preds, cfg);
    LossValue total;
    for (auto i : order) {
        const auto term = mol_nll(preds[i], gt, mask);
        total.value += cfg.weight(preds[i].level, preds[i].iteration) * term.value;
        total.empty_mask = term.empty_mask;
    }
    return total;
}

template nn::Var<float> mol_nll(const ScalePrediction<float>&, const nn::Tensor<float>&, const ValidityMask&);
template nn::Var<double> mol_nll(const ScalePrediction<double>&, const nn::Tensor<double>&, const ValidityMask&);
template nn::Var<float> multiscale_loss(const std::vector<ScalePrediction<float>>&, const FlowField&,
                                        const ValidityMask&, const LossConfig&);
template nn::Var<double> multiscale_loss(const std::vector<ScalePrediction<double>>&, const FlowField&,
                                         const ValidityMask&, const LossConfig&);

}  // namespace dpflow
