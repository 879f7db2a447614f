#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "mrgseq/num/ops.hpp"

namespace mrgseq::num {

namespace detail {
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace detail

/// Unidirectional LSTM over a [T, D] sequence with zero initial state.
///
/// Gate layout along the 4H axis is (input, forget, cell, output).  The whole
/// recurrence is one tape node; backward is truncated-free BPTT.
inline Tensor lstm(const Tensor& x, const Tensor& w_in, const Tensor& w_rec, const Tensor& bias) {
    detail::require_rank(x, 2, "lstm");
    detail::require_rank(w_in, 2, "lstm");
    detail::require_rank(w_rec, 2, "lstm");
    const auto T = x.dim(0), D = x.dim(1), H = w_rec.dim(0);
    const auto G = 4 * H;
    if (w_in.dim(0) != D || w_in.dim(1) != G || w_rec.dim(1) != G || bias.size() != G) {
        throw DimensionError("lstm: input " + shape_str(x.shape()) + ", w_in " + shape_str(w_in.shape()) +
                             ", w_rec " + shape_str(w_rec.shape()) + ", bias " + shape_str(bias.shape()));
    }
    const bool track = detail::tracks({&x, &w_in, &w_rec, &bias});

    // gates[t] holds activated (i, f, g, o); cells[t] the cell state after step t.
    auto gates = std::make_shared<std::vector<double>>(T * G);
    auto cells = std::make_shared<std::vector<double>>(T * H);
    Tensor out = Tensor::zeros({T, H}, track);
    auto& h_all = out.impl()->data;

    auto Z = detail::as_mat(*gates, T, G);
    Z.noalias() = detail::as_mat(x.impl()->data, T, D) * detail::as_mat(w_in.impl()->data, D, G);
    const auto Wh = detail::as_mat(w_rec.impl()->data, H, G);
    Eigen::RowVectorXd rec(G);
    for (std::size_t t = 0; t < T; ++t) {
        double* z = gates->data() + t * G;
        if (t > 0) {
            rec.noalias() = detail::as_mat(h_all, T, H).row(static_cast<Eigen::Index>(t - 1)) * Wh;
            for (std::size_t j = 0; j < G; ++j) z[j] += rec[static_cast<Eigen::Index>(j)];
        }
        for (std::size_t j = 0; j < G; ++j) z[j] += bias[j];
        for (std::size_t j = 0; j < H; ++j) {
            const double i = detail::sigmoid(z[j]);
            const double f = detail::sigmoid(z[H + j]);
            const double g = std::tanh(z[2 * H + j]);
            const double o = detail::sigmoid(z[3 * H + j]);
            const double c_prev = t > 0 ? (*cells)[(t - 1) * H + j] : 0.0;
            const double c = f * c_prev + i * g;
            (*cells)[t * H + j] = c;
            h_all[t * H + j] = o * std::tanh(c);
            z[j] = i;
            z[H + j] = f;
            z[2 * H + j] = g;
            z[3 * H + j] = o;
        }
    }

    if (track) {
        Tape::current().record([xi = x.shared_impl(), wi = w_in.shared_impl(), ri = w_rec.shared_impl(),
                                bi = bias.shared_impl(), oi = out.shared_impl(), gates, cells, T, D, H, G] {
            if (oi->grad.empty()) return;
            std::vector<double> dz(T * G, 0.0);
            std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0);
            const auto Wh = detail::as_mat(ri->data, H, G);
            Eigen::RowVectorXd back(H);
            for (std::size_t step = T; step-- > 0;) {
                const double* a = gates->data() + step * G;
                double* d = dz.data() + step * G;
                for (std::size_t j = 0; j < H; ++j) {
                    const double i = a[j], f = a[H + j], g = a[2 * H + j], o = a[3 * H + j];
                    const double c = (*cells)[step * H + j];
                    const double c_prev = step > 0 ? (*cells)[(step - 1) * H + j] : 0.0;
                    const double tc = std::tanh(c);
                    const double dh = oi->grad[step * H + j] + dh_next[j];
                    const double dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                    d[j] = dc * g * i * (1.0 - i);
                    d[H + j] = dc * c_prev * f * (1.0 - f);
                    d[2 * H + j] = dc * i * (1.0 - g * g);
                    d[3 * H + j] = dh * tc * o * (1.0 - o);
                    dc_next[j] = dc * f;
                }
                Eigen::Map<const Eigen::RowVectorXd> drow(d, static_cast<Eigen::Index>(G));
                back.noalias() = drow * Wh.transpose();
                for (std::size_t j = 0; j < H; ++j) dh_next[j] = back[static_cast<Eigen::Index>(j)];
            }
            const auto dZ = detail::as_mat(dz, T, G);
            if (wi->requires_grad) {
                detail::as_mat(detail::grad_of(wi), D, G).noalias() +=
                    detail::as_mat(xi->data, T, D).transpose() * dZ;
            }
            if (ri->requires_grad && T > 1) {
                detail::as_mat(detail::grad_of(ri), H, G).noalias() +=
                    detail::as_mat(oi->data, T, H).topRows(static_cast<Eigen::Index>(T - 1)).transpose() *
                    dZ.bottomRows(static_cast<Eigen::Index>(T - 1));
            }
            if (bi->requires_grad) {
                auto& g = detail::grad_of(bi);
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t j = 0; j < G; ++j) g[j] += dz[t * G + j];
            }
            if (xi->requires_grad) {
                detail::as_mat(detail::grad_of(xi), T, D).noalias() +=
                    dZ * detail::as_mat(wi->data, D, G).transpose();
            }
        });
    }
    return out;
}

/// out = sum_b coeffs[row, b] * bases[b], differentiable in both coeffs and bases.
inline Tensor basis_combine(const Tensor& coeffs, std::size_t row, const std::vector<Tensor>& bases) {
    detail::require_rank(coeffs, 2, "basis_combine");
    const auto B = coeffs.dim(1);
    if (bases.size() != B) {
        throw DimensionError("basis_combine: " + std::to_string(bases.size()) + " bases for coefficients " +
                             shape_str(coeffs.shape()));
    }
    if (row >= coeffs.dim(0)) throw ContractError("basis_combine: coefficient row out of range");
    bool track = detail::tracks({&coeffs});
    for (const auto& b : bases) {
        detail::require_same(b, bases.front(), "basis_combine");
        track = track || detail::tracks({&b});
    }
    Tensor out = Tensor::zeros(bases.front().shape(), track);
    auto& o = out.impl()->data;
    for (std::size_t b = 0; b < B; ++b) {
        const double a = coeffs[row * B + b];
        const auto& v = bases[b].values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += a * v[i];
    }
    if (track) {
        std::vector<std::shared_ptr<Tensor::Impl>> impls;
        for (const auto& b : bases) impls.push_back(b.shared_impl());
        Tape::current().record([ci = coeffs.shared_impl(), impls, oi = out.shared_impl(), row, B] {
            if (oi->grad.empty()) return;
            for (std::size_t b = 0; b < B; ++b) {
                const auto& vi = impls[b];
                if (ci->requires_grad) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < vi->data.size(); ++i) dot += vi->data[i] * oi->grad[i];
                    detail::grad_of(ci)[row * B + b] += dot;
                }
                if (vi->requires_grad) {
                    auto& g = detail::grad_of(vi);
                    const double a = ci->data[row * B + b];
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += a * oi->grad[i];
                }
            }
        });
    }
    return out;
}

}  // namespace mrgseq::num
