#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include "mrgseq/num/rng.hpp"
#include "mrgseq/num/tensor.hpp"

namespace mrgseq::num {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace detail {

inline ConstMatMap as_mat(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
    return ConstMatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline MatMap as_mat(std::vector<double>& v, std::size_t rows, std::size_t cols) {
    return MatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             " operand, got " + shape_str(t.shape()));
    }
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    const bool track = detail::tracks({&a, &b});
    Tensor out = Tensor::zeros({m, n}, track);
    {
        auto* o = out.impl();
        detail::as_mat(o->data, m, n).noalias() =
            detail::as_mat(a.impl()->data, m, k) * detail::as_mat(b.impl()->data, k, n);
    }
    if (track) {
        Tape::current().record([ai = a.shared_impl(), bi = b.shared_impl(), oi = out.shared_impl(), m, k, n] {
            if (oi->grad.empty()) return;
            auto dC = detail::as_mat(oi->grad, m, n);
            if (ai->requires_grad) {
                detail::as_mat(detail::grad_of(ai), m, k).noalias() +=
                    dC * detail::as_mat(bi->data, k, n).transpose();
            }
            if (bi->requires_grad) {
                detail::as_mat(detail::grad_of(bi), k, n).noalias() +=
                    detail::as_mat(ai->data, m, k).transpose() * dC;
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const auto r = x.dim(0), c = x.dim(1);
    const bool track = detail::tracks({&x});
    Tensor out = Tensor::zeros({c, r}, track);
    detail::as_mat(out.impl()->data, c, r) = detail::as_mat(x.impl()->data, r, c).transpose();
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), r, c] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            detail::as_mat(detail::grad_of(xi), r, c) += detail::as_mat(oi->grad, c, r).transpose();
        });
    }
    return out;
}

/// x[m,n] + bias[n] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 2, "add_row_bias");
    const auto m = x.dim(0), n = x.dim(1);
    if (bias.size() != n) {
        throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of " +
                             shape_str(x.shape()));
    }
    const bool track = detail::tracks({&x, &bias});
    Tensor out(x.shape(), x.values(), track);
    auto& o = out.impl()->data;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) o[i * n + j] += bias[j];
    if (track) {
        Tape::current().record([xi = x.shared_impl(), bi = bias.shared_impl(), oi = out.shared_impl(), m, n] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                auto& g = detail::grad_of(xi);
                for (std::size_t i = 0; i < m * n; ++i) g[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                auto& g = detail::grad_of(bi);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += oi->grad[i * n + j];
            }
        });
    }
    return out;
}

/// Column-wise concatenation of [T, d_i] blocks into [T, sum d_i].
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no operands");
    const auto rows = parts.front().dim(0);
    std::size_t cols = 0;
    bool track = false;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) +
                                 " vs " + shape_str(p.shape()));
        }
        cols += p.dim(1);
        track = track || detail::tracks({&p});
    }
    Tensor out = Tensor::zeros({rows, cols}, track);
    auto& o = out.impl()->data;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto w = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(r * w), w,
                        o.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
        offset += w;
    }
    if (track) {
        std::vector<std::shared_ptr<Tensor::Impl>> impls;
        for (const auto& p : parts) impls.push_back(p.shared_impl());
        Tape::current().record([impls, oi = out.shared_impl(), rows, cols] {
            if (oi->grad.empty()) return;
            std::size_t offset = 0;
            for (const auto& pi : impls) {
                const auto w = pi->shape[1];
                if (pi->requires_grad) {
                    auto& g = detail::grad_of(pi);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < w; ++c) g[r * w + c] += oi->grad[r * cols + offset + c];
                }
                offset += w;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class Elementwise { relu, add, mul, scale, mean_pair };

inline Tensor relu(const Tensor& x) {
    const bool track = detail::tracks({&x});
    Tensor out(x.shape(), x.values(), track);
    for (auto& v : out.impl()->data) v = v > 0.0 ? v : 0.0;
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl()] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xi->data[i] > 0.0) g[i] += oi->grad[i];
        });
    }
    return out;
}

/// alpha*a + beta*b, the shared kernel behind add and mean_pair.
inline Tensor axpby(double alpha, const Tensor& a, double beta, const Tensor& b, const char* op = "add") {
    detail::require_same(a, b, op);
    const bool track = detail::tracks({&a, &b});
    Tensor out = Tensor::zeros(a.shape(), track);
    auto& o = out.impl()->data;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * a[i] + beta * b[i];
    if (track) {
        Tape::current().record([ai = a.shared_impl(), bi = b.shared_impl(), oi = out.shared_impl(), alpha, beta] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                auto& g = detail::grad_of(ai);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * oi->grad[i];
            }
            if (bi->requires_grad) {
                auto& g = detail::grad_of(bi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += beta * oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return axpby(1.0, a, 1.0, b, "add"); }
inline Tensor mean_pair(const Tensor& a, const Tensor& b) { return axpby(0.5, a, 0.5, b, "mean_pair"); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same(a, b, "mul");
    const bool track = detail::tracks({&a, &b});
    Tensor out = Tensor::zeros(a.shape(), track);
    auto& o = out.impl()->data;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
    if (track) {
        Tape::current().record([ai = a.shared_impl(), bi = b.shared_impl(), oi = out.shared_impl()] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                auto& g = detail::grad_of(ai);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += bi->data[i] * oi->grad[i];
            }
            if (bi->requires_grad) {
                auto& g = detail::grad_of(bi);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += ai->data[i] * oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double s) {
    const bool track = detail::tracks({&x});
    Tensor out(x.shape(), x.values(), track);
    for (auto& v : out.impl()->data) v *= s;
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), s] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * oi->grad[i];
        });
    }
    return out;
}

inline Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b = {}, double s = 1.0) {
    switch (op) {
        case Elementwise::relu: return relu(a);
        case Elementwise::add: return add(a, b);
        case Elementwise::mul: return mul(a, b);
        case Elementwise::scale: return scale(a, s);
        case Elementwise::mean_pair: return mean_pair(a, b);
    }
    throw ContractError("elementwise: unknown op");
}

inline Tensor sum(const Tensor& x) {
    const bool track = detail::tracks({&x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc, track);
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl()] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (auto& v : g) v += oi->grad[0];
        });
    }
    return out;
}

/// Inverted dropout.  Identity when `train` is false or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
    if (!train || p <= 0.0) return x;
    if (p >= 1.0) throw ContractError("dropout: rate must be < 1");
    const bool track = detail::tracks({&x});
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
    Tensor out(x.shape(), x.values(), track);
    auto& o = out.impl()->data;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mask[i];
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), mask = std::move(mask)] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * oi->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Temporal operators.  The kernels work on frame-major [T, C] sequences; the
// channel-major [C, T] entry points wrap them with transposes.
// ---------------------------------------------------------------------------

enum class ConvPrecision { Double, Single };

namespace detail {

inline ConvPrecision& conv_precision_slot() {
    thread_local ConvPrecision p = ConvPrecision::Double;
    return p;
}

template <class S>
Tensor causal_conv_impl(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Strided = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    const auto T = x.dim(0), c_in = x.dim(1);
    const auto c_out = kernel.dim(0), W = kernel.dim(2);
    const bool track = tracks({&x, &kernel, &bias});
    const auto rows = static_cast<Eigen::Index>(T);
    const auto width = static_cast<Eigen::Index>(W * c_in);
    const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(c_in));

    auto padded = std::make_shared<std::vector<S>>((T + W - 1) * c_in, S(0));
    std::transform(x.values().begin(), x.values().end(), padded->begin() + static_cast<std::ptrdiff_t>((W - 1) * c_in),
                   [](double v) { return static_cast<S>(v); });
    auto taps = std::make_shared<std::vector<S>>(c_out * W * c_in);
    const auto& kd = kernel.values();
    for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t c = 0; c < c_in; ++c)
            for (std::size_t w = 0; w < W; ++w) (*taps)[(o * W + w) * c_in + c] = static_cast<S>(kd[(o * c_in + c) * W + w]);
    auto taps_mat = [taps, c_out, W, c_in] {
        return Eigen::Map<const Mat>(taps->data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(W * c_in));
    };

    Tensor out = Tensor::zeros({T, c_out}, track);
    {
        auto y = as_mat(out.impl()->data, T, c_out);
        if constexpr (std::is_same_v<S, double>) {
            y.noalias() = Strided(padded->data(), rows, width, stride) * taps_mat().transpose();
        } else {
            y = (Strided(padded->data(), rows, width, stride) * taps_mat().transpose()).template cast<double>();
        }
        Eigen::Map<const Eigen::RowVectorXd> b(bias.values().data(), static_cast<Eigen::Index>(c_out));
        y.rowwise() += b;
    }
    if (track) {
        Tape::current().record([xi = x.shared_impl(), ki = kernel.shared_impl(), bi = bias.shared_impl(),
                                oi = out.shared_impl(), padded, taps_mat, T, c_in, c_out, W, rows, width, stride] {
            if (oi->grad.empty()) return;
            const Mat dY = as_mat(oi->grad, T, c_out).template cast<S>();
            if (ki->requires_grad) {
                const Mat dtaps = dY.transpose() * Strided(padded->data(), rows, width, stride);
                auto& g = grad_of(ki);
                for (std::size_t o = 0; o < c_out; ++o)
                    for (std::size_t c = 0; c < c_in; ++c)
                        for (std::size_t w = 0; w < W; ++w)
                            g[(o * c_in + c) * W + w] +=
                                static_cast<double>(dtaps(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(w * c_in + c)));
            }
            if (bi->requires_grad) {
                auto& g = grad_of(bi);
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t o = 0; o < c_out; ++o) g[o] += oi->grad[t * c_out + o];
            }
            if (xi->requires_grad) {
                const Mat dcols = dY * taps_mat();
                auto& g = grad_of(xi);
                // Padded frame p = t + w maps to input frame p - (W-1).
                for (std::size_t t = 0; t < T; ++t) {
                    const S* src = dcols.data() + t * W * c_in;
                    for (std::size_t w = 0; w < W; ++w) {
                        const std::size_t p = t + w;
                        if (p < W - 1) continue;
                        double* dst = g.data() + (p - (W - 1)) * c_in;
                        const S* s = src + w * c_in;
                        for (std::size_t c = 0; c < c_in; ++c) dst[c] += static_cast<double>(s[c]);
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

/// GEMM precision used by causal_conv on this thread.  Single trades ~1e-6
/// relative error for roughly twice the throughput; accumulation into
/// parameters and gradients stays double.
inline ConvPrecision conv_precision() { return detail::conv_precision_slot(); }

class ConvPrecisionGuard {
public:
    explicit ConvPrecisionGuard(ConvPrecision p) : prev_(detail::conv_precision_slot()) { detail::conv_precision_slot() = p; }
    ~ConvPrecisionGuard() { detail::conv_precision_slot() = prev_; }
    ConvPrecisionGuard(const ConvPrecisionGuard&) = delete;
    ConvPrecisionGuard& operator=(const ConvPrecisionGuard&) = delete;

private:
    ConvPrecision prev_;
};

/// Causal 1-D convolution over a frame-major [T, C_in] sequence: output frame
/// t sees input frames t-W+1 .. t, with the history zero-padded.
///
/// The padded input is viewed as an overlapping [T, W*C_in] matrix (row t
/// starts at padded frame t), so the whole convolution is one GEMM against
/// the kernel reordered to [C_out, W*C_in].
inline Tensor causal_conv(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    detail::require_rank(x, 2, "causal_conv");
    detail::require_rank(kernel, 3, "causal_conv");
    if (kernel.dim(1) != x.dim(1)) {
        throw DimensionError("conv1d_causal: input channels " + std::to_string(x.dim(1)) + " vs kernel " +
                             shape_str(kernel.shape()));
    }
    if (bias.size() != kernel.dim(0)) {
        throw DimensionError("conv1d_causal: bias " + shape_str(bias.shape()) + " vs kernel " +
                             shape_str(kernel.shape()));
    }
    if (conv_precision() == ConvPrecision::Single) return detail::causal_conv_impl<float>(x, kernel, bias);
    return detail::causal_conv_impl<double>(x, kernel, bias);
}

/// Width-2 stride-2 max pooling over frames of [T, C]; a trailing odd frame
/// is dropped.
inline Tensor frame_maxpool2(const Tensor& x) {
    detail::require_rank(x, 2, "maxpool2");
    const auto T = x.dim(0), C = x.dim(1);
    if (T < 2) throw DimensionError("maxpool2: need at least 2 frames, got " + std::to_string(T));
    const auto half = T / 2;
    const bool track = detail::tracks({&x});
    Tensor out = Tensor::zeros({half, C}, track);
    std::vector<std::uint32_t> argmax(half * C);
    auto& o = out.impl()->data;
    const auto& xd = x.values();
    for (std::size_t i = 0; i < half; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            const auto a = 2 * i * C + c;
            const auto pick = xd[a + C] > xd[a] ? a + C : a;
            argmax[i * C + c] = static_cast<std::uint32_t>(pick);
            o[i * C + c] = xd[pick];
        }
    }
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), argmax = std::move(argmax)] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += oi->grad[i];
        });
    }
    return out;
}

/// Nearest-neighbour repetition of every frame of [T, C].
inline Tensor frame_upsample2(const Tensor& x) {
    detail::require_rank(x, 2, "upsample2");
    const auto T = x.dim(0), C = x.dim(1);
    const bool track = detail::tracks({&x});
    Tensor out = Tensor::zeros({2 * T, C}, track);
    auto& o = out.impl()->data;
    const auto& xd = x.values();
    for (std::size_t t = 0; t < T; ++t) {
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(t * C), C, o.begin() + static_cast<std::ptrdiff_t>(2 * t * C));
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(t * C), C,
                    o.begin() + static_cast<std::ptrdiff_t>((2 * t + 1) * C));
    }
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), T, C] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t c = 0; c < C; ++c)
                    g[t * C + c] += oi->grad[2 * t * C + c] + oi->grad[(2 * t + 1) * C + c];
        });
    }
    return out;
}

/// Extends [T, C] to [length, C] by repeating the last frame.
inline Tensor frame_pad_repeat(const Tensor& x, std::size_t length) {
    detail::require_rank(x, 2, "pad_repeat");
    const auto T = x.dim(0), C = x.dim(1);
    if (length < T) throw DimensionError("pad_repeat: target shorter than " + shape_str(x.shape()));
    if (length == T) return x;
    const bool track = detail::tracks({&x});
    Tensor out = Tensor::zeros({length, C}, track);
    auto& o = out.impl()->data;
    std::copy(x.values().begin(), x.values().end(), o.begin());
    for (std::size_t t = T; t < length; ++t)
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>((T - 1) * C), C,
                    o.begin() + static_cast<std::ptrdiff_t>(t * C));
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), T, C, length] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t t = 0; t < length; ++t)
                for (std::size_t c = 0; c < C; ++c) g[std::min(t, T - 1) * C + c] += oi->grad[t * C + c];
        });
    }
    return out;
}

inline constexpr double kChannelNormEps = 1e-5;

/// Divides every frame of a non-negative [T, C] map by its largest channel
/// value plus a small epsilon.
inline Tensor frame_norm(const Tensor& x) {
    detail::require_rank(x, 2, "channel_norm");
    const auto T = x.dim(0), C = x.dim(1);
    const bool track = detail::tracks({&x});
    Tensor out = Tensor::zeros({T, C}, track);
    std::vector<std::uint32_t> argmax(T);
    std::vector<double> denom(T);
    auto& o = out.impl()->data;
    const auto& xd = x.values();
    for (std::size_t t = 0; t < T; ++t) {
        const double* row = xd.data() + t * C;
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (row[c] > row[best]) best = c;
        argmax[t] = static_cast<std::uint32_t>(best);
        denom[t] = row[best] + kChannelNormEps;
        for (std::size_t c = 0; c < C; ++c) o[t * C + c] = row[c] / denom[t];
    }
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), argmax = std::move(argmax),
                                denom = std::move(denom), T, C] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t t = 0; t < T; ++t) {
                const double* gy = oi->grad.data() + t * C;
                const double* xr = xi->data.data() + t * C;
                double dot = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    g[t * C + c] += gy[c] / denom[t];
                    dot += gy[c] * xr[c];
                }
                g[t * C + argmax[t]] -= dot / (denom[t] * denom[t]);
            }
        });
    }
    return out;
}

/// Channel-major causal convolution: x [C_in, T] -> [C_out, T].
inline Tensor conv1d_causal(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    detail::require_rank(x, 2, "conv1d_causal");
    return transpose(causal_conv(transpose(x), kernel, bias));
}

enum class PoolMode { maxpool2, upsample2 };

inline Tensor maxpool2(const Tensor& x) { return transpose(frame_maxpool2(transpose(x))); }
inline Tensor upsample2(const Tensor& x) { return transpose(frame_upsample2(transpose(x))); }
inline Tensor pad_repeat(const Tensor& x, std::size_t length) {
    return transpose(frame_pad_repeat(transpose(x), length));
}

/// Per-frame max normalisation of a non-negative [C, T] map.
inline Tensor channel_norm(const Tensor& x) { return transpose(frame_norm(transpose(x))); }

inline Tensor pool_upsample(const Tensor& x, PoolMode mode) {
    return mode == PoolMode::maxpool2 ? maxpool2(x) : upsample2(x);
}

// ---------------------------------------------------------------------------
// Probabilities and losses
// ---------------------------------------------------------------------------

namespace detail {

inline void softmax_inplace(std::span<double> row) {
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : row) v /= z;
}

}  // namespace detail

/// Row-wise softmax of a [T, K] matrix (a rank-1 input is one row).
inline Tensor softmax(const Tensor& x) {
    const auto K = x.shape().back();
    const auto rows = x.size() / K;
    const bool track = detail::tracks({&x});
    Tensor out(x.shape(), x.values(), track);
    auto& o = out.impl()->data;
    for (std::size_t r = 0; r < rows; ++r) detail::softmax_inplace(std::span<double>(o.data() + r * K, K));
    if (track) {
        Tape::current().record([xi = x.shared_impl(), oi = out.shared_impl(), rows, K] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            auto& g = detail::grad_of(xi);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* p = oi->data.data() + r * K;
                const double* gy = oi->grad.data() + r * K;
                double dot = 0.0;
                for (std::size_t k = 0; k < K; ++k) dot += p[k] * gy[k];
                for (std::size_t k = 0; k < K; ++k) g[r * K + k] += p[k] * (gy[k] - dot);
            }
        });
    }
    return out;
}

inline constexpr double kLogClamp = 1e-12;

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t T, std::size_t K, std::span<const double> alpha,
                         const char* op) {
    if (labels.size() != T) {
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(T) + " frames");
    }
    if (alpha.size() != K) {
        throw DimensionError(std::string(op) + ": " + std::to_string(alpha.size()) + " class weights for " +
                             std::to_string(K) + " classes");
    }
    for (std::size_t t = 0; t < T; ++t) {
        if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= K) {
            throw ContractError(std::string(op) + ": label " + std::to_string(labels[t]) + " at frame " +
                                std::to_string(t) + " outside [0," + std::to_string(K) + ")");
        }
    }
}

}  // namespace detail

/// (1/T) * sum_t -alpha[y_t] * log(max(p_t[y_t], 1e-12)) over a row-stochastic [T, K] input.
inline Tensor weighted_ce(const Tensor& probs, std::span<const int> labels, std::span<const double> alpha) {
    detail::require_rank(probs, 2, "weighted_ce");
    const auto T = probs.dim(0), K = probs.dim(1);
    detail::check_labels(labels, T, K, alpha, "weighted_ce");
    const bool track = detail::tracks({&probs});
    double loss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        const auto y = static_cast<std::size_t>(labels[t]);
        loss -= alpha[y] * std::log(std::max(probs[t * K + y], kLogClamp));
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(T), track);
    if (track) {
        Tape::current().record([pi = probs.shared_impl(), oi = out.shared_impl(),
                                labels = std::vector<int>(labels.begin(), labels.end()),
                                alpha = std::vector<double>(alpha.begin(), alpha.end()), T, K] {
            if (oi->grad.empty() || !pi->requires_grad) return;
            auto& g = detail::grad_of(pi);
            const double scale = oi->grad[0] / static_cast<double>(T);
            for (std::size_t t = 0; t < T; ++t) {
                const auto y = static_cast<std::size_t>(labels[t]);
                const double p = pi->data[t * K + y];
                if (p > kLogClamp) g[t * K + y] -= scale * alpha[y] / p;
            }
        });
    }
    return out;
}

/// Same loss evaluated from unnormalised logits via a stable log-softmax.
/// Agrees with weighted_ce(softmax(logits)) wherever the true-class
/// probability exceeds the log clamp.
inline Tensor weighted_ce_logits(const Tensor& logits, std::span<const int> labels, std::span<const double> alpha) {
    detail::require_rank(logits, 2, "weighted_ce_logits");
    const auto T = logits.dim(0), K = logits.dim(1);
    detail::check_labels(labels, T, K, alpha, "weighted_ce_logits");
    const bool track = detail::tracks({&logits});
    std::vector<double> probs(logits.values());
    double loss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        std::span<double> row(probs.data() + t * K, K);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const auto y = static_cast<std::size_t>(labels[t]);
        const double log_p = row[y] - mx - std::log(z);
        loss -= alpha[y] * std::max(log_p, std::log(kLogClamp));
        detail::softmax_inplace(row);
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(T), track);
    if (track) {
        Tape::current().record([li = logits.shared_impl(), oi = out.shared_impl(), probs = std::move(probs),
                                labels = std::vector<int>(labels.begin(), labels.end()),
                                alpha = std::vector<double>(alpha.begin(), alpha.end()), T, K] {
            if (oi->grad.empty() || !li->requires_grad) return;
            auto& g = detail::grad_of(li);
            const double scale = oi->grad[0] / static_cast<double>(T);
            for (std::size_t t = 0; t < T; ++t) {
                const auto y = static_cast<std::size_t>(labels[t]);
                if (probs[t * K + y] <= kLogClamp) continue;
                const double w = scale * alpha[y];
                for (std::size_t k = 0; k < K; ++k) g[t * K + k] += w * probs[t * K + k];
                g[t * K + y] -= w;
            }
        });
    }
    return out;
}

}  // namespace mrgseq::num
