#include "dpflow/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "../resample.hpp"

namespace dpflow::nn {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

void fail(const std::string& op, const std::string& what) { throw std::invalid_argument(op + ": " + what); }

template <class T>
void require_map(const Tensor<T>& t, const char* op) {
    if (t.rank() != 3) fail(op, "expected a [C,H,W] map, got " + t.shape_string());
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b)) fail(op, "shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

// Range of output indices o with 0 <= o*s - p + k < n.
inline void valid_range(int n, int out, int s, int p, int k, int& lo, int& hi) {
    int off = k - p;
    lo = off >= 0 ? 0 : (-off + s - 1) / s;
    int last = n - 1 - off;
    hi = last < 0 ? 0 : std::min(out, last / s + 1);
    if (lo > hi) lo = hi;
}

template <class T>
void im2col(const T* x, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* cols) {
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        const T* xc = x + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            int ylo, yhi;
            valid_range(H, Ho, s, p, ky, ylo, yhi);
            for (int kx = 0; kx < k; ++kx) {
                int xlo, xhi;
                valid_range(W, Wo, s, p, kx, xlo, xhi);
                T* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
                std::fill(row, row + plane, T(0));
                for (int oy = ylo; oy < yhi; ++oy) {
                    const T* src = xc + static_cast<std::size_t>(oy * s - p + ky) * W;
                    T* dst = row + static_cast<std::size_t>(oy) * Wo;
                    if (s == 1) {
                        const T* sp = src + (xlo - p + kx);
                        std::copy(sp, sp + (xhi - xlo), dst + xlo);
                    } else {
                        for (int ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * s - p + kx];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* x) {
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        T* xc = x + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            int ylo, yhi;
            valid_range(H, Ho, s, p, ky, ylo, yhi);
            for (int kx = 0; kx < k; ++kx) {
                int xlo, xhi;
                valid_range(W, Wo, s, p, kx, xlo, xhi);
                const T* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
                for (int oy = ylo; oy < yhi; ++oy) {
                    T* dst = xc + static_cast<std::size_t>(oy * s - p + ky) * W;
                    const T* src = row + static_cast<std::size_t>(oy) * Wo;
                    for (int ox = xlo; ox < xhi; ++ox) dst[ox * s - p + kx] += src[ox];
                }
            }
        }
    }
}

template <class T>
T gelu_value(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

template <class T>
T sigmoid_value(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
T softplus_value(T x) {
    if (x > T(20)) return x;
    return std::log1p(std::exp(x));
}

template <class T, class Fwd, class Grad>
Var<T> unary(const Var<T>& x, Fwd fwd, Grad grad_of) {
    Tensor<T> out(x->value.shape());
    const T* in = x->value.data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] = fwd(in[i]);
    return record(std::move(out), {x}, [xn = x.get(), grad_of](Node<T>& self) {
        T* gx = xn->ensure_grad().data();
        const T* g = self.grad.data();
        const T* in = xn->value.data();
        const T* out = self.value.data();
        for (std::size_t i = 0; i < self.value.numel(); ++i) gx[i] += g[i] * grad_of(in[i], out[i]);
    });
}

}  // namespace

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const auto& X = x->value;
    const auto& Wt = w->value;
    require_map(X, "conv2d");
    if (Wt.rank() != 4 || Wt.dim(1) != X.channels() || Wt.dim(2) != Wt.dim(3)) {
        fail("conv2d", "weight " + Wt.shape_string() + " incompatible with input " + X.shape_string());
    }
    const int C = X.channels(), H = X.height(), W = X.width();
    const int O = Wt.dim(0), k = Wt.dim(2);
    if (pad < 0) pad = k / 2;
    if (stride < 1) fail("conv2d", "stride must be positive");
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho < 1 || Wo < 1) fail("conv2d", "input " + X.shape_string() + " too small for kernel");
    if (b && (b->value.rank() != 1 || b->value.dim(0) != O)) fail("conv2d", "bias shape mismatch");

    const bool pointwise = k == 1 && stride == 1 && pad == 0;
    const int rows = C * k * k;
    const int cols_n = Ho * Wo;
    Tensor<T> out({O, Ho, Wo});
    {
        Tensor<T> cols;
        const T* colp = X.data();
        if (!pointwise) {
            cols = Tensor<T>({rows, cols_n});
            im2col(X.data(), C, H, W, k, stride, pad, Ho, Wo, cols.data());
            colp = cols.data();
        }
        MapR<T> om(out.data(), O, cols_n);
        om.noalias() = CMapR<T>(Wt.data(), O, rows) * CMapR<T>(colp, rows, cols_n);
        if (b) {
            for (int o = 0; o < O; ++o) om.row(o).array() += b->value[o];
        }
    }
    return record(std::move(out), {x, w, b}, [xn = x.get(), wn = w.get(), bn = b.get(), stride, pad, pointwise, C, H,
                                               W, O, k, Ho, Wo, rows, cols_n](Node<T>& self) {
        CMapR<T> g(self.grad.data(), O, cols_n);
        if (wn->requires_grad) {
            Tensor<T> cols;
            const T* colp = xn->value.data();
            if (!pointwise) {
                cols = Tensor<T>({rows, cols_n});
                im2col(xn->value.data(), C, H, W, k, stride, pad, Ho, Wo, cols.data());
                colp = cols.data();
            }
            MapR<T>(wn->ensure_grad().data(), O, rows).noalias() += g * CMapR<T>(colp, rows, cols_n).transpose();
        }
        if (bn && bn->requires_grad) {
            T* gb = bn->ensure_grad().data();
            for (int o = 0; o < O; ++o) gb[o] += g.row(o).sum();
        }
        if (xn->requires_grad) {
            CMapR<T> wm(wn->value.data(), O, rows);
            if (pointwise) {
                MapR<T>(xn->ensure_grad().data(), C, cols_n).noalias() += wm.transpose() * g;
            } else {
                Tensor<T> dcols({rows, cols_n});
                MapR<T>(dcols.data(), rows, cols_n).noalias() = wm.transpose() * g;
                col2im_add(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, xn->ensure_grad().data());
            }
        }
    });
}

template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& X = x->value;
    const auto& Wt = w->value;
    require_map(X, "depthwise_conv2d");
    if (Wt.rank() != 3 || Wt.dim(0) != X.channels() || Wt.dim(1) != Wt.dim(2) || Wt.dim(1) % 2 == 0) {
        fail("depthwise_conv2d", "weight " + Wt.shape_string() + " incompatible with input " + X.shape_string());
    }
    const int C = X.channels(), H = X.height(), W = X.width(), k = Wt.dim(1), p = k / 2;
    Tensor<T> out(X.shape());
    for (int c = 0; c < C; ++c) {
        T* oc = out.data() + static_cast<std::size_t>(c) * H * W;
        const T* xc = X.data() + static_cast<std::size_t>(c) * H * W;
        if (b) std::fill(oc, oc + static_cast<std::size_t>(H) * W, b->value[c]);
        for (int ky = 0; ky < k; ++ky) {
            const int dy = ky - p;
            for (int kx = 0; kx < k; ++kx) {
                const int dx = kx - p;
                const T wv = Wt[(static_cast<std::size_t>(c) * k + ky) * k + kx];
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                for (int y = std::max(0, -dy); y < std::min(H, H - dy); ++y) {
                    T* orow = oc + static_cast<std::size_t>(y) * W;
                    const T* irow = xc + static_cast<std::size_t>(y + dy) * W + dx;
                    for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
                }
            }
        }
    }
    return record(std::move(out), {x, w, b}, [xn = x.get(), wn = w.get(), bn = b.get(), C, H, W, k, p](Node<T>& self) {
        const T* g = self.grad.data();
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        if (bn && bn->requires_grad) {
            T* gb = bn->ensure_grad().data();
            for (int c = 0; c < C; ++c) {
                T s = 0;
                for (std::size_t i = 0; i < plane; ++i) s += g[c * plane + i];
                gb[c] += s;
            }
        }
        T* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
        T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        for (int c = 0; c < C; ++c) {
            const T* gc = g + c * plane;
            const T* xc = xn->value.data() + c * plane;
            for (int ky = 0; ky < k; ++ky) {
                const int dy = ky - p;
                for (int kx = 0; kx < k; ++kx) {
                    const int dx = kx - p;
                    const std::size_t widx = (static_cast<std::size_t>(c) * k + ky) * k + kx;
                    const T wv = wn->value[widx];
                    const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                    T acc = 0;
                    for (int y = std::max(0, -dy); y < std::min(H, H - dy); ++y) {
                        const T* grow = gc + static_cast<std::size_t>(y) * W;
                        const std::size_t irow = static_cast<std::size_t>(y + dy) * W + dx;
                        if (gw) {
                            for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * xc[irow + xx];
                        }
                        if (gx) {
                            T* gxr = gx + c * plane + irow;
                            for (int xx = x0; xx < x1; ++xx) gxr[xx] += wv * grow[xx];
                        }
                    }
                    if (gw) gw[widx] += acc;
                }
            }
        }
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same(a->value, b->value, "add");
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
    return record(std::move(out), {a, b}, [an = a.get(), bn = b.get()](Node<T>& self) {
        for (Node<T>* n : {an, bn}) {
            if (!n->requires_grad) continue;
            T* g = n->ensure_grad().data();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same(a->value, b->value, "sub");
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
    return record(std::move(out), {a, b}, [an = a.get(), bn = b.get()](Node<T>& self) {
        if (an->requires_grad) {
            T* g = an->ensure_grad().data();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            T* g = bn->ensure_grad().data();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same(a->value, b->value, "mul");
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
    return record(std::move(out), {a, b}, [an = a.get(), bn = b.get()](Node<T>& self) {
        if (an->requires_grad) {
            T* g = an->ensure_grad().data();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            T* g = bn->ensure_grad().data();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * an->value[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * factor;
    return record(std::move(out), {a}, [an = a.get(), factor](Node<T>& self) {
        T* g = an->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T offset) {
    Tensor<T> out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + offset;
    return record(std::move(out), {a}, [an = a.get()](Node<T>& self) {
        T* g = an->ensure_grad().data();
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& lambda) {
    require_map(x->value, "mul_channel");
    const int C = x->value.channels();
    if (lambda->value.rank() != 1 || lambda->value.dim(0) != C) fail("mul_channel", "scale length mismatch");
    const std::size_t plane = x->value.plane();
    Tensor<T> out(x->value.shape());
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = x->value[c * plane + i] * lambda->value[c];
    return record(std::move(out), {x, lambda}, [xn = x.get(), ln = lambda.get(), C, plane](Node<T>& self) {
        const T* g = self.grad.data();
        if (xn->requires_grad) {
            T* gx = xn->ensure_grad().data();
            for (int c = 0; c < C; ++c)
                for (std::size_t i = 0; i < plane; ++i) gx[c * plane + i] += g[c * plane + i] * ln->value[c];
        }
        if (ln->requires_grad) {
            T* gl = ln->ensure_grad().data();
            for (int c = 0; c < C; ++c) {
                T s = 0;
                for (std::size_t i = 0; i < plane; ++i) s += g[c * plane + i] * xn->value[c * plane + i];
                gl[c] += s;
            }
        }
    });
}

template <class T>
Var<T> scale_channels(const Var<T>& x, std::vector<T> factors) {
    require_map(x->value, "scale_channels");
    const int C = x->value.channels();
    if (static_cast<int>(factors.size()) != C) fail("scale_channels", "factor count mismatch");
    const std::size_t plane = x->value.plane();
    Tensor<T> out(x->value.shape());
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = x->value[c * plane + i] * factors[c];
    return record(std::move(out), {x}, [xn = x.get(), factors = std::move(factors), C, plane](Node<T>& self) {
        T* gx = xn->ensure_grad().data();
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i) gx[c * plane + i] += self.grad[c * plane + i] * factors[c];
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    return unary(x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
    return unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
    return unary(x, [](T v) { return gelu_value(v); }, [](T v, T) { return gelu_grad(v); });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
    return unary(x, [](T v) { return softplus_value(v); }, [](T v, T) { return sigmoid_value(v); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    if (parts.empty()) fail("concat", "no inputs");
    const int H = parts[0]->value.height(), W = parts[0]->value.width();
    int C = 0;
    for (const auto& p : parts) {
        require_map(p->value, "concat");
        if (p->value.height() != H || p->value.width() != W) fail("concat", "spatial size mismatch");
        C += p->value.channels();
    }
    Tensor<T> out({C, H, W});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data(), p->value.data() + p->value.numel(), out.data() + off);
        off += p->value.numel();
    }
    std::vector<Node<T>*> raw;
    for (const auto& p : parts) raw.push_back(p.get());
    return record(std::move(out), parts, [raw](Node<T>& self) {
        std::size_t off = 0;
        for (Node<T>* p : raw) {
            const std::size_t n = p->value.numel();
            if (p->requires_grad) {
                T* g = p->ensure_grad().data();
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
            }
            off += n;
        }
    });
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int begin, int end) {
    require_map(x->value, "slice_channels");
    if (begin < 0 || end > x->value.channels() || begin >= end) fail("slice_channels", "bad channel range");
    const std::size_t plane = x->value.plane();
    Tensor<T> out({end - begin, x->value.height(), x->value.width()});
    std::copy(x->value.data() + begin * plane, x->value.data() + end * plane, out.data());
    return record(std::move(out), {x}, [xn = x.get(), begin, plane](Node<T>& self) {
        T* g = xn->ensure_grad().data() + begin * plane;
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> avg_pool2(const Var<T>& x) {
    require_map(x->value, "avg_pool2");
    const int C = x->value.channels(), H = x->value.height(), W = x->value.width();
    const int Ho = (H + 1) / 2, Wo = (W + 1) / 2;
    Tensor<T> out({C, Ho, Wo});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                T s = 0;
                int n = 0;
                for (int y = 2 * oy; y < std::min(H, 2 * oy + 2); ++y)
                    for (int xx = 2 * ox; xx < std::min(W, 2 * ox + 2); ++xx, ++n) s += x->value.at(c, y, xx);
                out.at(c, oy, ox) = s / T(n);
            }
    return record(std::move(out), {x}, [xn = x.get(), C, H, W, Ho, Wo](Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const int ny = std::min(H, 2 * oy + 2) - 2 * oy, nx = std::min(W, 2 * ox + 2) - 2 * ox;
                    const T share = self.grad.at(c, oy, ox) / T(ny * nx);
                    for (int y = 2 * oy; y < 2 * oy + ny; ++y)
                        for (int xx = 2 * ox; xx < 2 * ox + nx; ++xx) g.at(c, y, xx) += share;
                }
    });
}

template <class T>
Var<T> instance_norm(const Var<T>& x, T eps) {
    require_map(x->value, "instance_norm");
    if (!(eps > T(0))) fail("instance_norm", "eps must be positive");
    const int C = x->value.channels();
    const std::size_t plane = static_cast<std::size_t>(x->value.height()) * x->value.width();
    Tensor<T> out(x->value.shape());
    std::vector<T> inv_std(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        const T* src = x->value.data() + c * plane;
        T* dst = out.data() + c * plane;
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < plane; ++i) mean += src[i];
        mean /= static_cast<double>(plane);
        for (std::size_t i = 0; i < plane; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(plane);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        inv_std[c] = static_cast<T>(is);
        for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>((src[i] - mean) * is);
    }
    return record(std::move(out), {x}, [xn = x.get(), C, plane, inv_std = std::move(inv_std)](Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (int c = 0; c < C; ++c) {
            const T* dy = self.grad.data() + c * plane;
            const T* y = self.value.data() + c * plane;
            T* dx = g.data() + c * plane;
            double mdy = 0, mdyy = 0;
            for (std::size_t i = 0; i < plane; ++i) {
                mdy += dy[i];
                mdyy += static_cast<double>(dy[i]) * y[i];
            }
            mdy /= static_cast<double>(plane);
            mdyy /= static_cast<double>(plane);
            for (std::size_t i = 0; i < plane; ++i) dx[i] += static_cast<T>(inv_std[c] * (dy[i] - mdy - y[i] * mdyy));
        }
    });
}

template <class T>
Var<T> resize_bilinear(const Var<T>& x, int height, int width, ResampleBorder border) {
    require_map(x->value, "resize_bilinear");
    if (height < 1 || width < 1) fail("resize_bilinear", "target must be at least 1x1");
    const int C = x->value.channels(), H = x->value.height(), W = x->value.width();
    const auto mode = border == ResampleBorder::Clamp ? detail::Border::Clamp : detail::Border::Extrapolate;
    std::vector<detail::LinearTap> xt(width), yt(height);
    for (int i = 0; i < width; ++i) xt[i] = detail::linear_tap(detail::source_coord(i, W, width), W, mode);
    for (int i = 0; i < height; ++i) yt[i] = detail::linear_tap(detail::source_coord(i, H, height), H, mode);
    Tensor<T> out({C, height, width});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < height; ++y) {
            const auto& ty = yt[y];
            for (int xx = 0; xx < width; ++xx) {
                const auto& tx = xt[xx];
                const double top = tx.w0 * x->value.at(c, ty.i0, tx.i0) + tx.w1 * x->value.at(c, ty.i0, tx.i1);
                const double bot = tx.w0 * x->value.at(c, ty.i1, tx.i0) + tx.w1 * x->value.at(c, ty.i1, tx.i1);
                out.at(c, y, xx) = static_cast<T>(ty.w0 * top + ty.w1 * bot);
            }
        }
    return record(std::move(out), {x}, [xn = x.get(), xt = std::move(xt), yt = std::move(yt), C, height,
                                        width](Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < height; ++y) {
                const auto& ty = yt[y];
                for (int xx = 0; xx < width; ++xx) {
                    const auto& tx = xt[xx];
                    const double gv = self.grad.at(c, y, xx);
                    g.at(c, ty.i0, tx.i0) += static_cast<T>(gv * ty.w0 * tx.w0);
                    g.at(c, ty.i0, tx.i1) += static_cast<T>(gv * ty.w0 * tx.w1);
                    g.at(c, ty.i1, tx.i0) += static_cast<T>(gv * ty.w1 * tx.w0);
                    g.at(c, ty.i1, tx.i1) += static_cast<T>(gv * ty.w1 * tx.w1);
                }
            }
    });
}

template <class T>
Var<T> warp(const Var<T>& x, const Tensor<T>& flow) {
    require_map(x->value, "warp");
    const int C = x->value.channels(), H = x->value.height(), W = x->value.width();
    if (flow.rank() != 3 || flow.channels() != 2 || flow.height() != H || flow.width() != W) {
        fail("warp", "flow " + flow.shape_string() + " does not match features " + x->value.shape_string());
    }
    struct Tap {
        detail::LinearTap tx, ty;
    };
    std::vector<Tap> taps(static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
            auto& t = taps[static_cast<std::size_t>(y) * W + xx];
            t.tx = detail::linear_tap(xx + static_cast<double>(flow.at(0, y, xx)), W, detail::Border::Clamp);
            t.ty = detail::linear_tap(y + static_cast<double>(flow.at(1, y, xx)), H, detail::Border::Clamp);
        }
    Tensor<T> out({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                const auto& t = taps[static_cast<std::size_t>(y) * W + xx];
                const double top = t.tx.w0 * x->value.at(c, t.ty.i0, t.tx.i0) + t.tx.w1 * x->value.at(c, t.ty.i0, t.tx.i1);
                const double bot = t.tx.w0 * x->value.at(c, t.ty.i1, t.tx.i0) + t.tx.w1 * x->value.at(c, t.ty.i1, t.tx.i1);
                out.at(c, y, xx) = static_cast<T>(t.ty.w0 * top + t.ty.w1 * bot);
            }
    return record(std::move(out), {x}, [xn = x.get(), taps = std::move(taps), C, H, W](Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    const auto& t = taps[static_cast<std::size_t>(y) * W + xx];
                    const double gv = self.grad.at(c, y, xx);
                    g.at(c, t.ty.i0, t.tx.i0) += static_cast<T>(gv * t.ty.w0 * t.tx.w0);
                    g.at(c, t.ty.i0, t.tx.i1) += static_cast<T>(gv * t.ty.w0 * t.tx.w1);
                    g.at(c, t.ty.i1, t.tx.i0) += static_cast<T>(gv * t.ty.w1 * t.tx.w0);
                    g.at(c, t.ty.i1, t.tx.i1) += static_cast<T>(gv * t.ty.w1 * t.tx.w1);
                }
    });
}

template <class T>
Var<T> local_correlation(const Var<T>& f1, const Var<T>& f2, int radius) {
    require_map(f1->value, "local_correlation");
    require_same(f1->value, f2->value, "local_correlation");
    if (radius < 1) fail("local_correlation", "radius must be at least 1");
    const int C = f1->value.channels(), H = f1->value.height(), W = f1->value.width();
    const int side = 2 * radius + 1;
    const T norm = T(1) / std::sqrt(static_cast<T>(C));
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    std::vector<int> xidx(static_cast<std::size_t>(side) * W), yidx(static_cast<std::size_t>(side) * H);
    for (int d = 0; d < side; ++d) {
        for (int xx = 0; xx < W; ++xx) xidx[d * W + xx] = std::clamp(xx + d - radius, 0, W - 1);
        for (int y = 0; y < H; ++y) yidx[d * H + y] = std::clamp(y + d - radius, 0, H - 1);
    }

    Tensor<T> out({side * side, H, W});
    for (int dy = 0; dy < side; ++dy)
        for (int dx = 0; dx < side; ++dx) {
            T* od = out.data() + static_cast<std::size_t>(dy * side + dx) * plane;
            const int* xi = xidx.data() + dx * W;
            for (int c = 0; c < C; ++c) {
                const T* a = f1->value.data() + c * plane;
                const T* bsrc = f2->value.data() + c * plane;
                for (int y = 0; y < H; ++y) {
                    const T* arow = a + static_cast<std::size_t>(y) * W;
                    const T* brow = bsrc + static_cast<std::size_t>(yidx[dy * H + y]) * W;
                    T* orow = od + static_cast<std::size_t>(y) * W;
                    for (int xx = 0; xx < W; ++xx) orow[xx] += arow[xx] * brow[xi[xx]];
                }
            }
            for (std::size_t i = 0; i < plane; ++i) od[i] *= norm;
        }
    return record(std::move(out), {f1, f2}, [an = f1.get(), bn = f2.get(), xidx = std::move(xidx),
                                             yidx = std::move(yidx), C, H, W, side, norm, plane](Node<T>& self) {
        T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
        T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (int dy = 0; dy < side; ++dy)
            for (int dx = 0; dx < side; ++dx) {
                const T* gd = self.grad.data() + static_cast<std::size_t>(dy * side + dx) * plane;
                const int* xi = xidx.data() + dx * W;
                for (int c = 0; c < C; ++c) {
                    const T* a = an->value.data() + c * plane;
                    const T* bsrc = bn->value.data() + c * plane;
                    for (int y = 0; y < H; ++y) {
                        const std::size_t arow = static_cast<std::size_t>(y) * W;
                        const std::size_t brow = static_cast<std::size_t>(yidx[dy * H + y]) * W;
                        const T* grow = gd + arow;
                        if (ga) {
                            T* gar = ga + c * plane + arow;
                            for (int xx = 0; xx < W; ++xx) gar[xx] += grow[xx] * bsrc[brow + xi[xx]] * norm;
                        }
                        if (gb) {
                            T* gbr = gb + c * plane + brow;
                            for (int xx = 0; xx < W; ++xx) gbr[xi[xx]] += grow[xx] * a[arow + xx] * norm;
                        }
                    }
                }
            }
    });
}

template <class T>
Var<T> convex_upsample(const Var<T>& flow, const Var<T>& mask, int factor, int height, int width) {
    require_map(flow->value, "convex_upsample");
    require_map(mask->value, "convex_upsample");
    const int h = flow->value.height(), w = flow->value.width(), ff = factor * factor;
    if (flow->value.channels() != 2) fail("convex_upsample", "flow must have 2 channels");
    if (mask->value.channels() != 9 * ff || mask->value.height() != h || mask->value.width() != w) {
        fail("convex_upsample", "mask " + mask->value.shape_string() + " does not match flow");
    }
    if (height > factor * h || width > factor * w || height < 1 || width < 1) {
        fail("convex_upsample", "target exceeds the upsampled extent");
    }
    const std::size_t cplane = static_cast<std::size_t>(h) * w;
    // Softmax weights per (subpixel, coarse pixel), stored [9][ff][h][w].
    Tensor<T> weights({9 * ff, h, w});
    for (int s = 0; s < ff; ++s)
        for (std::size_t p = 0; p < cplane; ++p) {
            T m = -std::numeric_limits<T>::infinity();
            for (int n = 0; n < 9; ++n) m = std::max(m, mask->value[(n * ff + s) * cplane + p]);
            T z = 0;
            for (int n = 0; n < 9; ++n) {
                T e = std::exp(mask->value[(n * ff + s) * cplane + p] - m);
                weights[(n * ff + s) * cplane + p] = e;
                z += e;
            }
            for (int n = 0; n < 9; ++n) weights[(n * ff + s) * cplane + p] /= z;
        }
    auto nb = [h, w](int y, int x, int n, int& ny, int& nx) {
        ny = std::clamp(y + n / 3 - 1, 0, h - 1);
        nx = std::clamp(x + n % 3 - 1, 0, w - 1);
    };
    Tensor<T> out({2, height, width});
    for (int Y = 0; Y < height; ++Y)
        for (int X = 0; X < width; ++X) {
            const int y = Y / factor, x = X / factor, s = (Y % factor) * factor + (X % factor);
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            T acc0 = 0, acc1 = 0;
            for (int n = 0; n < 9; ++n) {
                int ny, nx;
                nb(y, x, n, ny, nx);
                const T wt = weights[(n * ff + s) * cplane + p];
                acc0 += wt * flow->value.at(0, ny, nx);
                acc1 += wt * flow->value.at(1, ny, nx);
            }
            out.at(0, Y, X) = acc0 * T(factor);
            out.at(1, Y, X) = acc1 * T(factor);
        }
    return record(std::move(out), {flow, mask}, [fn = flow.get(), mn = mask.get(), weights = std::move(weights), nb,
                                                 factor, ff, w, cplane, height, width](Node<T>& self) {
        T* gf = fn->requires_grad ? fn->ensure_grad().data() : nullptr;
        T* gm = mn->requires_grad ? mn->ensure_grad().data() : nullptr;
        const std::size_t fplane = cplane;
        for (int Y = 0; Y < height; ++Y)
            for (int X = 0; X < width; ++X) {
                const int y = Y / factor, x = X / factor, s = (Y % factor) * factor + (X % factor);
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                const T g0 = self.grad.at(0, Y, X) * T(factor), g1 = self.grad.at(1, Y, X) * T(factor);
                T a[9];
                T mean = 0;
                for (int n = 0; n < 9; ++n) {
                    int ny, nx;
                    nb(y, x, n, ny, nx);
                    const std::size_t q = static_cast<std::size_t>(ny) * w + nx;
                    const T wt = weights[(n * ff + s) * cplane + p];
                    if (gf) {
                        gf[q] += wt * g0;
                        gf[fplane + q] += wt * g1;
                    }
                    a[n] = g0 * fn->value[q] + g1 * fn->value[fplane + q];
                    mean += wt * a[n];
                }
                if (gm) {
                    for (int n = 0; n < 9; ++n) {
                        const std::size_t idx = (n * ff + s) * cplane + p;
                        gm[idx] += weights[idx] * (a[n] - mean);
                    }
                }
            }
    });
}

template <class T>
Var<T> mol_nll(const Var<T>& flow, const Var<T>& mixture, const Tensor<T>& gt, std::span<const std::uint8_t> mask) {
    require_map(flow->value, "mol_nll");
    if (flow->value.channels() != 2 || !flow->value.same_shape(gt)) fail("mol_nll", "flow/gt shape mismatch");
    const int H = flow->value.height(), W = flow->value.width();
    if (mixture->value.rank() != 3 || mixture->value.channels() != 3 || mixture->value.height() != H ||
        mixture->value.width() != W) {
        fail("mol_nll", "mixture must be [3,H,W] matching the flow");
    }
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    if (mask.size() != plane) fail("mol_nll", "mask size mismatch");
    std::size_t valid = 0;
    for (auto m : mask) valid += m ? 1 : 0;
    Tensor<T> out({1});
    if (valid == 0) return constant(std::move(out));

    const T* f = flow->value.data();
    const T* mx = mixture->value.data();
    const T* g = gt.data();
    const T ninf = -std::numeric_limits<T>::infinity();
    double total = 0;
    for (std::size_t i = 0; i < plane; ++i) {
        if (!mask[i]) continue;
        const T alpha = mx[i], b1 = mx[plane + i], b2 = mx[2 * plane + i];
        const T la = alpha > T(0) ? std::log(alpha) : ninf;
        const T lb = alpha < T(1) ? std::log1p(-alpha) : ninf;
        for (int ax = 0; ax < 2; ++ax) {
            const T r = std::abs(f[ax * plane + i] - g[ax * plane + i]);
            const T t1 = la - r / b1 - std::log(T(2) * b1);
            const T t2 = lb - r / b2 - std::log(T(2) * b2);
            const T m = std::max(t1, t2);
            total -= m + std::log(std::exp(t1 - m) + std::exp(t2 - m));
        }
    }
    const T denom = T(2 * valid);
    out[0] = static_cast<T>(total / static_cast<double>(denom));
    std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
    return record(std::move(out), {flow, mixture}, [fn = flow.get(), mn = mixture.get(), gt, mask = std::move(mask_copy),
                                                    plane, denom, ninf](Node<T>& self) {
        const T up = self.grad[0] / denom;
        T* gf = fn->requires_grad ? fn->ensure_grad().data() : nullptr;
        T* gm = mn->requires_grad ? mn->ensure_grad().data() : nullptr;
        const T* f = fn->value.data();
        const T* mx = mn->value.data();
        for (std::size_t i = 0; i < plane; ++i) {
            if (!mask[i]) continue;
            const T alpha = mx[i], b1 = mx[plane + i], b2 = mx[2 * plane + i];
            const T la = alpha > T(0) ? std::log(alpha) : ninf;
            const T lb = alpha < T(1) ? std::log1p(-alpha) : ninf;
            for (int ax = 0; ax < 2; ++ax) {
                const T diff = f[ax * plane + i] - gt[ax * plane + i];
                const T r = std::abs(diff);
                const T l1 = -r / b1 - std::log(T(2) * b1);
                const T l2 = -r / b2 - std::log(T(2) * b2);
                const T t1 = la + l1, t2 = lb + l2;
                const T m = std::max(t1, t2);
                const T lse = m + std::log(std::exp(t1 - m) + std::exp(t2 - m));
                const T w1 = std::exp(t1 - lse), w2 = std::exp(t2 - lse);
                if (gf) {
                    const T sgn = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
                    gf[ax * plane + i] += up * sgn * (w1 / b1 + w2 / b2);
                }
                if (gm) {
                    gm[i] -= up * (std::exp(l1 - lse) - std::exp(l2 - lse));
                    gm[plane + i] += up * w1 * (T(1) / b1 - r / (b1 * b1));
                    gm[2 * plane + i] += up * w2 * (T(1) / b2 - r / (b2 * b2));
                }
            }
        }
    });
}

template <class T>
Var<T> sum(const Var<T>& x) {
    Tensor<T> out({1});
    double s = 0;
    for (std::size_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
    out[0] = static_cast<T>(s);
    return record(std::move(out), {x}, [xn = x.get()](Node<T>& self) {
        T* g = xn->ensure_grad().data();
        for (std::size_t i = 0; i < xn->value.numel(); ++i) g[i] += self.grad[0];
    });
}

template <class T>
Var<T> dot(const Var<T>& x, const Tensor<T>& r) {
    require_same(x->value, r, "dot");
    Tensor<T> out({1});
    double s = 0;
    for (std::size_t i = 0; i < r.numel(); ++i) s += static_cast<double>(x->value[i]) * r[i];
    out[0] = static_cast<T>(s);
    return record(std::move(out), {x}, [xn = x.get(), r](Node<T>& self) {
        T* g = xn->ensure_grad().data();
        for (std::size_t i = 0; i < r.numel(); ++i) g[i] += self.grad[0] * r[i];
    });
}

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& scalars, const std::vector<T>& weights) {
    if (scalars.size() != weights.size()) fail("weighted_sum", "size mismatch");
    Tensor<T> out({1});
    double s = 0;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i]->value.numel() != 1) fail("weighted_sum", "inputs must be scalars");
        s += static_cast<double>(weights[i]) * scalars[i]->value[0];
    }
    out[0] = static_cast<T>(s);
    std::vector<Node<T>*> raw;
    for (const auto& v : scalars) raw.push_back(v.get());
    return record(std::move(out), scalars, [raw, weights](Node<T>& self) {
        for (std::size_t i = 0; i < raw.size(); ++i)
            if (raw[i]->requires_grad) raw[i]->ensure_grad()[0] += self.grad[0] * weights[i];
    });
}

#define DPFLOW_INSTANTIATE_OPS(T)                                                                          \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                         \
    template Var<T> depthwise_conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                         \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                     \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                     \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                     \
    template Var<T> scale(const Var<T>&, T);                                                               \
    template Var<T> add_scalar(const Var<T>&, T);                                                          \
    template Var<T> mul_channel(const Var<T>&, const Var<T>&);                                             \
    template Var<T> scale_channels(const Var<T>&, std::vector<T>);                                         \
    template Var<T> sigmoid(const Var<T>&);                                                                \
    template Var<T> tanh(const Var<T>&);                                                                   \
    template Var<T> gelu(const Var<T>&);                                                                   \
    template Var<T> softplus(const Var<T>&);                                                               \
    template Var<T> relu(const Var<T>&);                                                                   \
    template Var<T> concat(const std::vector<Var<T>>&);                                                    \
    template Var<T> slice_channels(const Var<T>&, int, int);                                               \
    template Var<T> avg_pool2(const Var<T>&);                                                              \
    template Var<T> instance_norm(const Var<T>&, T);                                                       \
    template Var<T> resize_bilinear(const Var<T>&, int, int, ResampleBorder);                              \
    template Var<T> warp(const Var<T>&, const Tensor<T>&);                                                 \
    template Var<T> local_correlation(const Var<T>&, const Var<T>&, int);                                  \
    template Var<T> convex_upsample(const Var<T>&, const Var<T>&, int, int, int);                          \
    template Var<T> mol_nll(const Var<T>&, const Var<T>&, const Tensor<T>&, std::span<const std::uint8_t>); \
    template Var<T> sum(const Var<T>&);                                                                    \
    template Var<T> dot(const Var<T>&, const Tensor<T>&);                                                  \
    template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);

DPFLOW_INSTANTIATE_OPS(float)
DPFLOW_INSTANTIATE_OPS(double)

}  // namespace dpflow::nn
