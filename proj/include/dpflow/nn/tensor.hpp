#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace dpflow::nn {

/// Process-wide count of live tensor elements, used to measure peak activation memory.
struct ElementCounter {
    static void add(std::size_t n);
    static void sub(std::size_t n);
    static long long live();
    static long long peak();
    static void reset_peak();
};

template <class T>
struct CountingAllocator {
    using value_type = T;
    // fixed alignment keeps vectorised reductions independent of heap addresses
    static constexpr std::size_t kAlignment = 64;
    CountingAllocator() = default;
    template <class U>
    CountingAllocator(const CountingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        ElementCounter::add(n);
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
    }
    void deallocate(T* p, std::size_t n) noexcept {
        ElementCounter::sub(n);
        ::operator delete(p, std::align_val_t{kAlignment});
    }
    template <class U>
    bool operator==(const CountingAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major tensor. Feature maps use the rank-3 layout [C, H, W].
template <class T>
class Tensor {
public:
    using Storage = std::vector<T, CountingAllocator<T>>;

    Tensor() = default;
    explicit Tensor(std::vector<int> shape, T fill = T(0));

    const std::vector<int>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    int dim(std::size_t i) const { return shape_[i]; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    int channels() const { return shape_[0]; }
    int height() const { return shape_[1]; }
    int width() const { return shape_[2]; }
    std::size_t plane() const { return static_cast<std::size_t>(shape_[1]) * static_cast<std::size_t>(shape_[2]); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return {data_.data(), data_.size()}; }
    std::span<const T> span() const { return {data_.data(), data_.size()}; }

    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    T& at(int c, int y, int x) { return data_[offset(c, y, x)]; }
    T at(int c, int y, int x) const { return data_[offset(c, y, x)]; }

    void fill(T value);
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_string() const;

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t offset(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(shape_[2]) +
               static_cast<std::size_t>(x);
    }

    std::vector<int> shape_;
    Storage data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dpflow::nn
