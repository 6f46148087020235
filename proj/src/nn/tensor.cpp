#include "dpflow/nn/tensor.hpp"

#include <algorithm>
#include <stdexcept>

namespace dpflow::nn {

namespace {
std::atomic<long long> g_live{0};
std::atomic<long long> g_peak{0};
}  // namespace

void ElementCounter::add(std::size_t n) {
    long long now = g_live.fetch_add(static_cast<long long>(n)) + static_cast<long long>(n);
    long long prev = g_peak.load();
    while (now > prev && !g_peak.compare_exchange_weak(prev, now)) {
    }
}

void ElementCounter::sub(std::size_t n) { g_live.fetch_sub(static_cast<long long>(n)); }
long long ElementCounter::live() { return g_live.load(); }
long long ElementCounter::peak() { return g_peak.load(); }
void ElementCounter::reset_peak() { g_peak.store(g_live.load()); }

template <class T>
Tensor<T>::Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (int d : shape_) {
        if (d < 0) throw std::invalid_argument("negative tensor dimension");
        n *= static_cast<std::size_t>(d);
    }
    data_.assign(n, fill);
}

template <class T>
void Tensor<T>::fill(T value) {
    std::fill(data_.begin(), data_.end(), value);
}

template <class T>
std::string Tensor<T>::shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape_[i]);
    }
    return s + "]";
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace dpflow::nn
