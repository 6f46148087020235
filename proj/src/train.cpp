#include "dpflow/train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <stdexcept>

#include "dpflow/io.hpp"

namespace dpflow {

std::vector<Sample> load_samples(const std::vector<ManifestRow>& rows) {
    std::vector<Sample> out;
    for (const auto& r : rows) {
        Sample s{ImagePair::make(read_png(r.image1), read_png(r.image2)), read_flo(r.flow), read_mask_png(r.mask)};
        if (s.flow.height() != s.pair.first.height() || s.flow.width() != s.pair.first.width() ||
            !s.mask.matches(s.flow)) {
            throw std::invalid_argument("sample " + r.flow + " does not match its images");
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Sample> synthetic_samples(std::uint64_t seed, int n, int factor, const SceneOptions& options) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto r = render(random_scene(scene_seed(seed, i), options), factor);
        out.push_back({std::move(r.pair), std::move(r.flow), std::move(r.mask)});
    }
    return out;
}

void TrainConfig::validate() const {
    if (steps < 1 || batch < 1 || accumulation < 1) throw std::invalid_argument("steps, batch and accumulation must be positive");
    if (!(lr > 0.0) || weight_decay < 0.0) throw std::invalid_argument("bad learning rate or weight decay");
    if (!(pct_start > 0.0 && pct_start < 1.0)) throw std::invalid_argument("pct_start must lie in (0, 1)");
    const int stride = encoder_min_side(levels);
    if (crop.width % stride != 0 || crop.height % stride != 0) {
        throw std::invalid_argument("crop " + std::to_string(crop.width) + "x" + std::to_string(crop.height) +
                                    " must be a multiple of " + std::to_string(stride) + " for " +
                                    std::to_string(levels) + " levels");
    }
    LossConfig{gamma, levels, model.iters}.validate();
}

double one_cycle_lr(const TrainConfig& cfg, int step) {
    const double start = cfg.lr / 25.0, final_lr = start / 1e4;
    const double warm = std::max(1.0, cfg.pct_start * cfg.steps);
    const double t = static_cast<double>(step);
    if (t < warm) return start + (cfg.lr - start) * t / warm;
    const double rest = std::max(1.0, cfg.steps - warm);
    return cfg.lr + (final_lr - cfg.lr) * std::min(1.0, (t - warm) / rest);
}

Trainer::Trainer(TrainConfig cfg, std::vector<Sample> data)
    : cfg_(std::move(cfg)), data_(std::move(data)), model_(DPFlowModel<float>::make(cfg_.model, cfg_.seed)) {
    cfg_.validate();
    if (data_.empty()) throw std::invalid_argument("training set is empty");
    for (const auto& s : data_) {
        if (s.pair.first.width() < cfg_.crop.width || s.pair.first.height() < cfg_.crop.height) {
            throw std::invalid_argument("training sample smaller than the " + std::to_string(cfg_.crop.width) + "x" +
                                        std::to_string(cfg_.crop.height) + " crop");
        }
    }
    for (const auto& p : model_.parameters()) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

std::vector<Sample> Trainer::batch_for(int step_index) const {
    std::mt19937_64 rng(cfg_.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(step_index) + 1);
    const int n = cfg_.batch * cfg_.accumulation;
    const int cw = cfg_.crop.width, ch = cfg_.crop.height;
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) {
        const auto& s = data_[static_cast<std::size_t>(rng() % data_.size())];
        const int W = s.pair.first.width(), H = s.pair.first.height();
        const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(W - cw + 1));
        const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(H - ch + 1));
        Image a(3, ch, cw), b(3, ch, cw);
        FlowField f(ch, cw);
        ValidityMask m(ch, cw);
        for (int y = 0; y < ch; ++y) {
            for (int x = 0; x < cw; ++x) {
                for (int c = 0; c < 3; ++c) {
                    a.at(c, y, x) = s.pair.first.at(c, y0 + y, x0 + x);
                    b.at(c, y, x) = s.pair.second.at(c, y0 + y, x0 + x);
                }
                f.u(y, x) = s.flow.u(y0 + y, x0 + x);
                f.v(y, x) = s.flow.v(y0 + y, x0 + x);
                m.set(y, x, s.mask(y0 + y, x0 + x));
            }
        }
        out.push_back({ImagePair{std::move(a), std::move(b)}, std::move(f), std::move(m)});
    }
    return out;
}

std::vector<nn::Tensor<float>> Trainer::step_gradient(int step_index, double* loss) const {
    const auto params = model_.parameters();
    for (const auto& p : params) p->grad = nn::Tensor<float>();
    const auto batch = batch_for(step_index);
    const LossConfig lc{cfg_.gamma, cfg_.levels, cfg_.model.iters};
    DecodeOptions opts;
    opts.iters = cfg_.model.iters;
    const float w = 1.0f / static_cast<float>(batch.size());
    double total = 0.0;
    for (const auto& s : batch) {
        auto preds = model_.forward(s.pair, cfg_.levels, opts);
        auto l = multiscale_loss(preds, s.flow, s.mask, lc);
        total += l->value[0];
        nn::backward(nn::scale(l, w));
    }
    if (loss) *loss = total / static_cast<double>(batch.size());
    std::vector<nn::Tensor<float>> grads;
    for (const auto& p : params) {
        grads.push_back(p->has_grad() ? p->grad : nn::Tensor<float>(p->value.shape()));
        p->grad = nn::Tensor<float>();
    }
    return grads;
}

StepReport Trainer::step() {
    StepReport r;
    r.step = step_ + 1;
    r.lr = one_cycle_lr(cfg_, step_);
    auto grads = step_gradient(step_, &r.loss);

    double sq = 0.0;
    for (const auto& g : grads)
        for (std::size_t i = 0; i < g.numel(); ++i) sq += static_cast<double>(g[i]) * g[i];
    r.grad_norm = std::sqrt(sq);
    const double clip = (cfg_.clip > 0.0 && r.grad_norm > cfg_.clip) ? cfg_.clip / r.grad_norm : 1.0;

    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const int t = step_ + 1;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    const auto params = model_.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k]->value;
        auto& m = m_[k];
        auto& v = v_[k];
        const auto& g = grads[k];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double gi = g[i] * clip;
            m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
            v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps) + cfg_.weight_decay * p[i];
            p[i] = static_cast<float>(p[i] - r.lr * update);
        }
    }
    ++step_;
    return r;
}

void Trainer::save_checkpoint(const std::string& path) const {
    auto arrays = model_arrays(model_);
    std::vector<std::string> names;
    model_.visit([&](const std::string& name, const nn::Var<float>&) { names.push_back(name); });
    for (std::size_t k = 0; k < names.size(); ++k) {
        for (auto [prefix, t] : {std::pair{"optim.m.", &m_[k]}, std::pair{"optim.v.", &v_[k]}}) {
            NamedArray a{prefix + names[k], {}, {}};
            for (int d : t->shape()) a.dims.push_back(static_cast<std::uint32_t>(d));
            a.data.assign(t->data(), t->data() + t->numel());
            arrays.push_back(std::move(a));
        }
    }
    arrays.push_back({"train.step", {1}, {static_cast<float>(step_)}});
    write_container(path, arrays);
}

void Trainer::load_checkpoint(const std::string& path) {
    const auto arrays = read_container(path);
    auto loaded = model_from_arrays(arrays);
    if (loaded.config.width != cfg_.model.width || loaded.config.radius != cfg_.model.radius) {
        throw std::invalid_argument("checkpoint " + path + " was trained with a different model configuration");
    }
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    std::vector<std::string> names;
    loaded.visit([&](const std::string& name, const nn::Var<float>&) { names.push_back(name); });
    for (std::size_t k = 0; k < names.size(); ++k) {
        for (auto [prefix, t] : {std::pair{"optim.m.", &m_[k]}, std::pair{"optim.v.", &v_[k]}}) {
            auto it = by_name.find(prefix + names[k]);
            if (it == by_name.end() || it->second->data.size() != t->numel()) {
                throw std::runtime_error("checkpoint " + path + " lacks optimizer state for " + names[k]);
            }
            std::copy(it->second->data.begin(), it->second->data.end(), t->data());
        }
    }
    auto it = by_name.find("train.step");
    if (it == by_name.end() || it->second->data.size() != 1) throw std::runtime_error("checkpoint lacks train.step");
    step_ = static_cast<int>(it->second->data[0]);
    loaded.config.iters = cfg_.model.iters;
    loaded.config.reference = cfg_.model.reference;
    model_ = std::move(loaded);
}

void train(Trainer& trainer, int steps, const std::string& log_path, const std::function<void(const StepReport&)>& on_step) {
    std::ofstream log;
    if (!log_path.empty()) {
        const bool fresh = trainer.completed_steps() == 0;
        log.open(log_path, fresh ? std::ios::trunc : std::ios::app);
        if (!log) throw std::runtime_error("cannot open loss log " + log_path);
        if (fresh) log << "step,lr,loss,grad_norm\n";
        log << std::setprecision(9);
    }
    for (int i = 0; i < steps; ++i) {
        const auto r = trainer.step();
        if (log.is_open()) log << r.step << ',' << r.lr << ',' << r.loss << ',' << r.grad_norm << '\n' << std::flush;
        if (on_step) on_step(r);
    }
}

}  // namespace dpflow
