#include "dpflow/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dpflow {

namespace {

void check(const FlowField& pred, const FlowField& gt, const ValidityMask& mask) {
    if (!pred.same_shape(gt) || !mask.matches(gt)) throw std::invalid_argument("metric inputs differ in shape");
    if (mask.count() == 0) throw std::invalid_argument("metric mask has no valid pixel");
}

double error_at(const FlowField& pred, const FlowField& gt, std::size_t i) {
    const double du = pred.u_plane()[i] - gt.u_plane()[i];
    const double dv = pred.v_plane()[i] - gt.v_plane()[i];
    return std::sqrt(du * du + dv * dv);
}

constexpr int kWaucSteps = 100;

double wauc_weight(int i) { return 1.0 - (i - 1) / 100.0; }
double wauc_delta(int i) { return i / 20.0; }

// suffix[i] = sum of weights for thresholds i..100
const std::array<double, kWaucSteps + 2>& wauc_suffix() {
    static const auto table = [] {
        std::array<double, kWaucSteps + 2> t{};
        for (int i = kWaucSteps; i >= 1; --i) t[i] = t[i + 1] + wauc_weight(i);
        return t;
    }();
    return table;
}

void check_spring_gt(const FlowField& gt4k) {
    if (gt4k.empty() || gt4k.height() % 2 != 0 || gt4k.width() % 2 != 0) {
        throw std::invalid_argument("spring ground truth needs even, non-zero dimensions, got " +
                                    std::to_string(gt4k.width()) + "x" + std::to_string(gt4k.height()));
    }
}

}  // namespace

double epe(const FlowField& pred, const FlowField& gt, const ValidityMask& mask) {
    check(pred, gt, mask);
    double total = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i)
        if (mask.at(i)) total += error_at(pred, gt, i);
    return total / static_cast<double>(mask.count());
}

double outlier_ratio(const FlowField& pred, const FlowField& gt, const ValidityMask& mask, const ThresholdRule& tau) {
    check(pred, gt, mask);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (!mask.at(i)) continue;
        if (error_at(pred, gt, i) > tau(gt.u_plane()[i], gt.v_plane()[i])) ++bad;
    }
    return 100.0 * static_cast<double>(bad) / static_cast<double>(mask.count());
}

double outlier_ratio(const FlowField& pred, const FlowField& gt, const ValidityMask& mask, double tau) {
    return outlier_ratio(pred, gt, mask, [tau](double, double) { return tau; });
}

double fl_all(const FlowField& pred, const FlowField& gt, const ValidityMask& mask) {
    return outlier_ratio(pred, gt, mask, [](double gu, double gv) { return std::max(3.0, 0.05 * std::hypot(gu, gv)); });
}

double one_px(const FlowField& pred, const FlowField& gt, const ValidityMask& mask) {
    return outlier_ratio(pred, gt, mask, 1.0);
}

double wauc(const FlowField& pred, const FlowField& gt, const ValidityMask& mask) {
    check(pred, gt, mask);
    const auto& suffix = wauc_suffix();
    double acc = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (!mask.at(i)) continue;
        const double e = error_at(pred, gt, i);
        // first threshold index with e <= delta
        int first = std::clamp(static_cast<int>(std::ceil(e * 20.0)), 1, kWaucSteps + 1);
        while (first > 1 && e <= wauc_delta(first - 1)) --first;
        while (first <= kWaucSteps && e > wauc_delta(first)) ++first;
        acc += suffix[static_cast<std::size_t>(first)];
    }
    return 100.0 * acc / (static_cast<double>(mask.count()) * suffix[1]);
}

ValidityMask spring_4k_block_mask(const FlowField& gt4k) {
    check_spring_gt(gt4k);
    const int bh = gt4k.height() / 2, bw = gt4k.width() / 2;
    ValidityMask out(bh, bw, false);
    for (int by = 0; by < bh; ++by) {
        for (int bx = 0; bx < bw; ++bx) {
            std::array<double, 4> u{}, v{};
            for (int j = 0; j < 4; ++j) {
                u[j] = gt4k.u(2 * by + j / 2, 2 * bx + j % 2);
                v[j] = gt4k.v(2 * by + j / 2, 2 * bx + j % 2);
            }
            double worst = 0.0;
            for (int a = 0; a < 4; ++a)
                for (int b = a + 1; b < 4; ++b) worst = std::max(worst, std::hypot(u[a] - u[b], v[a] - v[b]));
            out.set(by, bx, worst < 1.0);
        }
    }
    return out;
}

ValidityMask spring_4k_mask(const FlowField& gt4k) {
    const auto blocks = spring_4k_block_mask(gt4k);
    ValidityMask out(gt4k.height(), gt4k.width(), false);
    for (int y = 0; y < gt4k.height(); ++y)
        for (int x = 0; x < gt4k.width(); ++x) out.set(y, x, blocks(y / 2, x / 2));
    return out;
}

double spring_eval(const FlowField& pred2k, const FlowField& gt4k) {
    check_spring_gt(gt4k);
    if (gt4k.height() != 2 * pred2k.height() || gt4k.width() != 2 * pred2k.width()) {
        throw std::invalid_argument("spring_eval: ground truth must be exactly twice the prediction size");
    }
    std::size_t bad = 0;
    for (int y = 0; y < pred2k.height(); ++y) {
        for (int x = 0; x < pred2k.width(); ++x) {
            double best = std::numeric_limits<double>::infinity();
            for (int j = 0; j < 4; ++j) {
                const int gy = 2 * y + j / 2, gx = 2 * x + j % 2;
                best = std::min(best, std::hypot(pred2k.u(y, x) - gt4k.u(gy, gx), pred2k.v(y, x) - gt4k.v(gy, gx)));
            }
            if (best > 1.0) ++bad;
        }
    }
    return 100.0 * static_cast<double>(bad) / static_cast<double>(pred2k.size());
}

long long MagnitudeHistogram::total() const {
    long long n = 0;
    for (auto c : counts) n += c;
    return n;
}

std::vector<double> default_magnitude_edges(int bins) {
    if (bins < 1) throw std::invalid_argument("histogram needs at least one bin");
    std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i) edges[static_cast<std::size_t>(i)] = std::pow(10.0, -1.0 + 4.0 * i / bins);
    return edges;
}

MagnitudeHistogram magnitude_histogram(const FlowField& flow, const ValidityMask& mask,
                                       const std::vector<double>& edges) {
    if (edges.size() < 2) throw std::invalid_argument("histogram needs at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("histogram edges must increase strictly");
    if (!mask.matches(flow)) throw std::invalid_argument("histogram mask does not match the flow");
    MagnitudeHistogram h{edges, std::vector<long long>(edges.size() - 1, 0)};
    const auto last = static_cast<std::ptrdiff_t>(h.counts.size()) - 1;
    for (std::size_t i = 0; i < flow.size(); ++i) {
        if (!mask.at(i)) continue;
        const double m = std::hypot(flow.u_plane()[i], flow.v_plane()[i]);
        auto bin = std::upper_bound(edges.begin(), edges.end(), m) - edges.begin() - 1;
        h.counts[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(bin, 0, last))]++;
    }
    return h;
}

MagnitudeHistogram magnitude_histogram(const FlowField& flow, const std::vector<double>& edges) {
    return magnitude_histogram(flow, ValidityMask(flow.height(), flow.width(), true), edges);
}

std::string EvalReport::to_key_value() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "sample=" << sample << "\nepe=" << epe << "\nfl_all=" << fl_all << "\none_px=" << one_px
       << "\nwauc=" << wauc << "\nn_valid=" << n_valid << "\nskipped=" << (skipped ? 1 : 0);
    if (!note.empty()) os << "\nnote=" << note;
    if (!magnitude_histogram.counts.empty()) {
        os << "\nhistogram_edges=";
        for (std::size_t i = 0; i < magnitude_histogram.edges.size(); ++i)
            os << (i ? "," : "") << magnitude_histogram.edges[i];
        os << "\nhistogram_counts=";
        for (std::size_t i = 0; i < magnitude_histogram.counts.size(); ++i)
            os << (i ? "," : "") << magnitude_histogram.counts[i];
    }
    os << '\n';
    return os.str();
}

std::string EvalReport::csv_header() { return "sample,epe,fl_all,one_px,wauc,n_valid,skipped,note"; }

std::string EvalReport::to_csv_row() const {
    std::ostringstream os;
    os << std::setprecision(10) << sample << ',' << epe << ',' << fl_all << ',' << one_px << ',' << wauc << ','
       << n_valid << ',' << (skipped ? 1 : 0) << ',' << note;
    return os.str();
}

EvalReport evaluate(const FlowField& pred, const FlowField& gt, const ValidityMask& mask, std::string sample) {
    EvalReport r;
    r.sample = std::move(sample);
    r.epe = epe(pred, gt, mask);
    r.fl_all = fl_all(pred, gt, mask);
    r.one_px = one_px(pred, gt, mask);
    r.wauc = wauc(pred, gt, mask);
    r.n_valid = static_cast<long long>(mask.count());
    r.magnitude_histogram = magnitude_histogram(gt, mask, default_magnitude_edges());
    return r;
}

EvalReport aggregate(const std::vector<EvalReport>& reports, std::string label) {
    EvalReport out;
    out.sample = std::move(label);
    int used = 0;
    for (const auto& r : reports) {
        if (r.skipped) continue;
        ++used;
        out.epe += r.epe;
        out.fl_all += r.fl_all;
        out.one_px += r.one_px;
        out.wauc += r.wauc;
        out.n_valid += r.n_valid;
        if (out.magnitude_histogram.counts.empty()) {
            out.magnitude_histogram = r.magnitude_histogram;
        } else if (out.magnitude_histogram.edges == r.magnitude_histogram.edges) {
            for (std::size_t i = 0; i < out.magnitude_histogram.counts.size(); ++i)
                out.magnitude_histogram.counts[i] += r.magnitude_histogram.counts[i];
        }
    }
    if (used == 0) {
        out.skipped = true;
        out.note = "no evaluated samples";
        return out;
    }
    out.epe /= used;
    out.fl_all /= used;
    out.one_px /= used;
    out.wauc /= used;
    if (used != static_cast<int>(reports.size())) {
        out.note = std::to_string(reports.size() - static_cast<std::size_t>(used)) + " skipped";
    }
    return out;
}

}  // namespace dpflow
