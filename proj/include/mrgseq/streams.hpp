#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mrgseq/num/ops.hpp"
#include "mrgseq/num/recurrent.hpp"
#include "mrgseq/trial.hpp"

namespace mrgseq::streams {

using num::Rng;
using num::Tensor;

/// Train-time switches threaded through every forward pass.  Dropout is
/// active only when `train` is set and an RNG is supplied.
struct ForwardContext {
    bool train = false;
    Rng* rng = nullptr;

    bool dropout_active() const { return train && rng != nullptr; }
};

struct TCNConfig {
    std::vector<std::size_t> encoder_filters{64, 96, 128};
    std::vector<std::size_t> decoder_filters{96, 64, 64};
    std::size_t kernel_width = 51;
    double dropout = 0.2;

    std::size_t embedding_dim() const { return decoder_filters.back(); }
    std::size_t min_frames() const { return std::size_t{1} << encoder_filters.size(); }
};

struct ConvLayer {
    Tensor kernel;  // [C_out, C_in, W]
    Tensor bias;    // [C_out]
};

struct TCNParams {
    std::vector<ConvLayer> encoder;
    std::vector<ConvLayer> decoder;
};

struct LSTMParams {
    Tensor w_in;   // [D, 4H]
    Tensor w_rec;  // [H, 4H]
    Tensor bias;   // [4H], gate order (input, forget, cell, output)

    std::size_t input_dim() const { return w_in.dim(0); }
    std::size_t hidden_dim() const { return w_rec.dim(0); }
};

/// TCN and LSTM branches of one kinematics stream.
struct KinEncoder {
    TCNParams tcn;
    LSTMParams lstm;
};

struct EmbeddingTriple {
    Tensor s;    // [T, E] visual
    Tensor k_l;  // [T, E] left kinematics
    Tensor k_r;  // [T, E] right kinematics
};

inline Tensor uniform_init(num::Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<double> v(num::shape_size(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

inline TCNParams init_tcn(std::size_t in_dim, const TCNConfig& cfg, Rng& rng) {
    if (cfg.encoder_filters.empty() || cfg.encoder_filters.size() != cfg.decoder_filters.size()) {
        throw ContractError("TCN needs matching, non-empty encoder and decoder stacks");
    }
    if (cfg.kernel_width == 0) throw ContractError("TCN kernel width must be >= 1");
    TCNParams p;
    std::size_t c_in = in_dim;
    auto make = [&](std::size_t c_out) {
        ConvLayer l{uniform_init({c_out, c_in, cfg.kernel_width}, c_in * cfg.kernel_width, rng),
                    Tensor::zeros({c_out}, true)};
        c_in = c_out;
        return l;
    };
    for (auto f : cfg.encoder_filters) p.encoder.push_back(make(f));
    for (auto f : cfg.decoder_filters) p.decoder.push_back(make(f));
    return p;
}

inline LSTMParams init_lstm(std::size_t in_dim, std::size_t hidden, Rng& rng) {
    LSTMParams p{uniform_init({in_dim, 4 * hidden}, in_dim, rng), uniform_init({hidden, 4 * hidden}, hidden, rng),
                 Tensor::zeros({4 * hidden}, true)};
    auto b = p.bias.mutable_data();
    for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;
    return p;
}

namespace detail {

inline Tensor conv_block(const Tensor& h, const ConvLayer& layer, const TCNConfig& cfg, const ForwardContext& ctx) {
    auto y = num::causal_conv(h, layer.kernel, layer.bias);
    if (ctx.dropout_active()) y = num::dropout(y, cfg.dropout, *ctx.rng, true);
    return num::frame_norm(num::relu(y));
}

}  // namespace detail

/// Encoder-decoder TCN over a [T, D] sequence, returning [T, E].
///
/// Encoder stages: causal conv, ReLU with per-frame max normalisation, width-2
/// max pooling.  Decoder stages mirror them with nearest-neighbour
/// upsampling; each upsampled map is right-padded by repetition to the length
/// of the matching encoder level, so the output has exactly T frames.
inline Tensor tcn_forward(const Tensor& x, const TCNParams& p, const TCNConfig& cfg, const ForwardContext& ctx = {}) {
    if (x.rank() != 2) throw DimensionError("tcn_forward: expected [T, D], got " + num::shape_str(x.shape()));
    const auto T = x.dim(0);
    if (T < cfg.min_frames()) {
        throw ContractError("tcn_forward: need at least " + std::to_string(cfg.min_frames()) + " frames, got " +
                            std::to_string(T));
    }
    std::vector<std::size_t> lengths{T};
    Tensor h = x;
    for (const auto& layer : p.encoder) {
        h = num::frame_maxpool2(detail::conv_block(h, layer, cfg, ctx));
        lengths.push_back(h.dim(0));
    }
    lengths.pop_back();
    for (const auto& layer : p.decoder) {
        h = num::frame_pad_repeat(num::frame_upsample2(h), lengths.back());
        lengths.pop_back();
        h = detail::conv_block(h, layer, cfg, ctx);
    }
    return h;
}

inline Tensor lstm_forward(const Tensor& x, const LSTMParams& p) {
    return num::lstm(x, p.w_in, p.w_rec, p.bias);
}

/// Mean of the TCN and LSTM views of one kinematics stream.
inline Tensor fuse_kin(const Tensor& tcn_out, const Tensor& lstm_out) { return num::mean_pair(tcn_out, lstm_out); }

inline Tensor encode_kinematics(const Tensor& x, const KinEncoder& enc, const TCNConfig& cfg,
                                const ForwardContext& ctx = {}) {
    return fuse_kin(tcn_forward(x, enc.tcn, cfg, ctx), lstm_forward(x, enc.lstm));
}

/// Which embeddings a caller needs; unrequested streams are never touched.
struct StreamSelection {
    bool visual = true;
    bool kinematics = true;
};

struct StreamParams {
    TCNParams visual;
    KinEncoder left;
    KinEncoder right;
};

inline EmbeddingTriple extract_embeddings(const Trial& trial, const StreamParams& p, const TCNConfig& cfg,
                                          const ForwardContext& ctx = {}, StreamSelection use = {}) {
    EmbeddingTriple out;
    if (use.visual) {
        if (!trial.has_visual()) throw ContractError("trial " + trial.id + " has no visual features");
        out.s = tcn_forward(trial.visual, p.visual, cfg, ctx);
    }
    if (use.kinematics) {
        if (!trial.has_kinematics()) throw ContractError("trial " + trial.id + " has no kinematics");
        out.k_l = encode_kinematics(trial.kin_left.values, p.left, cfg, ctx);
        out.k_r = encode_kinematics(trial.kin_right.values, p.right, cfg, ctx);
    }
    return out;
}

inline void collect(const TCNParams& p, const std::string& prefix, std::vector<std::pair<std::string, Tensor>>& out) {
    for (std::size_t i = 0; i < p.encoder.size(); ++i) {
        out.emplace_back(prefix + ".enc" + std::to_string(i) + ".kernel", p.encoder[i].kernel);
        out.emplace_back(prefix + ".enc" + std::to_string(i) + ".bias", p.encoder[i].bias);
    }
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
        out.emplace_back(prefix + ".dec" + std::to_string(i) + ".kernel", p.decoder[i].kernel);
        out.emplace_back(prefix + ".dec" + std::to_string(i) + ".bias", p.decoder[i].bias);
    }
}

inline void collect(const KinEncoder& e, const std::string& prefix, std::vector<std::pair<std::string, Tensor>>& out) {
    collect(e.tcn, prefix + ".tcn", out);
    out.emplace_back(prefix + ".lstm.w_in", e.lstm.w_in);
    out.emplace_back(prefix + ".lstm.w_rec", e.lstm.w_rec);
    out.emplace_back(prefix + ".lstm.bias", e.lstm.bias);
}

}  // namespace mrgseq::streams
