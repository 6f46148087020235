#pragma once

// Shared 1-D sampling taps for the half-pixel-centre resampling convention:
// output index o of an m-sample axis maps to source coordinate (o + 0.5) * n / m - 0.5.

#include <algorithm>
#include <array>
#include <cmath>

namespace dpflow::detail {

enum class Border { Clamp, Extrapolate };

struct LinearTap {
    int i0;
    int i1;
    double w0;
    double w1;
};

inline double source_coord(int o, int n, int m) {
    return (static_cast<double>(o) + 0.5) * static_cast<double>(n) / static_cast<double>(m) - 0.5;
}

/// Two-tap linear weights at continuous coordinate s on an axis of n samples.
/// Clamp: s is clamped to [0, n-1]. Extrapolate: the outermost pair is extended linearly,
/// so affine signals are reproduced exactly everywhere.
inline LinearTap linear_tap(double s, int n, Border border) {
    if (n == 1) return {0, 0, 1.0, 0.0};
    if (border == Border::Clamp) {
        s = std::clamp(s, 0.0, static_cast<double>(n - 1));
        int i0 = std::min(static_cast<int>(std::floor(s)), n - 2);
        double f = s - i0;
        return {i0, i0 + 1, 1.0 - f, f};
    }
    int i0 = std::clamp(static_cast<int>(std::floor(s)), 0, n - 2);
    double f = s - i0;
    return {i0, i0 + 1, 1.0 - f, f};
}

inline double keys_cubic(double t, double a = -0.75) {
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return (((t - 5.0) * t + 8.0) * t - 4.0) * a;
    return 0.0;
}

struct CubicTap {
    std::array<int, 4> idx;
    std::array<double, 4> w;
};

inline CubicTap cubic_tap(double s, int n) {
    int base = static_cast<int>(std::floor(s));
    double f = s - base;
    CubicTap tap{};
    for (int k = 0; k < 4; ++k) {
        tap.idx[k] = std::clamp(base - 1 + k, 0, n - 1);
        tap.w[k] = keys_cubic(f - (k - 1));
    }
    return tap;
}

}  // namespace dpflow::detail
