#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mrgseq/kinpre.hpp"
#include "mrgseq/num/ops.hpp"
#include "mrgseq/relgraph.hpp"
#include "mrgseq/streams.hpp"
#include "mrgseq/trial.hpp"

namespace mrgseq::model {

using num::Rng;
using num::Tensor;
using streams::ForwardContext;

/// Ablation ladder, in reporting order.
enum class Variant : std::uint32_t { PureVis = 0, PureKin = 1, TCNKV_NoSplit = 2, TCNKV = 3, GCNKV = 4, MRG = 5 };

inline constexpr std::array<Variant, 6> kAllVariants{Variant::PureVis, Variant::PureKin, Variant::TCNKV_NoSplit,
                                                     Variant::TCNKV,   Variant::GCNKV,   Variant::MRG};

inline std::string_view variant_name(Variant v) {
    switch (v) {
        case Variant::PureVis: return "Pure-Vis";
        case Variant::PureKin: return "Pure-Kin";
        case Variant::TCNKV_NoSplit: return "TCN-KV(w/o split)";
        case Variant::TCNKV: return "TCN-KV";
        case Variant::GCNKV: return "GCN-KV";
        case Variant::MRG: return "MRG";
    }
    return "?";
}

/// Accepts the display names plus a few spellings convenient on a command line.
inline Variant parse_variant(std::string_view s) {
    std::string k;
    for (char c : s)
        if (c != '-' && c != '_' && c != ' ' && c != '(' && c != ')' && c != '/') k.push_back(static_cast<char>(std::tolower(c)));
    if (k == "purevis") return Variant::PureVis;
    if (k == "purekin") return Variant::PureKin;
    if (k == "tcnkvwosplit" || k == "tcnkvnosplit") return Variant::TCNKV_NoSplit;
    if (k == "tcnkv") return Variant::TCNKV;
    if (k == "gcnkv") return Variant::GCNKV;
    if (k == "mrg" || k == "mrgnet") return Variant::MRG;
    throw ContractError("unknown variant '" + std::string(s) + "'");
}

inline bool uses_visual(Variant v) { return v != Variant::PureKin; }
inline bool uses_kinematics(Variant v) { return v != Variant::PureVis; }

struct ModelConfig {
    Variant variant = Variant::MRG;
    std::size_t num_classes = 10;
    std::size_t visual_dim = 128;
    std::size_t kin_dim = kin::kFeatureDim;
    streams::TCNConfig tcn;
    std::size_t lstm_hidden = 64;
    std::size_t num_bases = 2;
    double graph_dropout = 0.2;

    std::size_t embedding_dim() const { return tcn.embedding_dim(); }
};

/// Kinematics normalisation statistics of the training split.
struct KinStats {
    kin::ZStats left;
    kin::ZStats right;
};

/// Every trainable tensor of one variant plus the loss weights and the
/// normalisation statistics it was trained with.
struct ModelParams {
    ModelConfig config;
    streams::TCNParams visual;
    streams::KinEncoder left;
    streams::KinEncoder right;
    streams::KinEncoder joint;  // both arms stacked, TCNKV_NoSplit only
    std::array<graph::RelLayerParams, 2> graph;
    Tensor w_fc;  // [head_in, K]
    Tensor b_fc;  // [K]
    std::vector<double> class_weights;
    std::optional<KinStats> kin_stats;

    /// Trainable tensors in a fixed order; names double as checkpoint keys.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        const auto v = config.variant;
        if (uses_visual(v)) streams::collect(visual, "visual", out);
        if (v == Variant::TCNKV_NoSplit) {
            streams::collect(joint, "kin_joint", out);
        } else if (uses_kinematics(v)) {
            streams::collect(left, "kin_left", out);
            streams::collect(right, "kin_right", out);
        }
        if (v == Variant::GCNKV || v == Variant::MRG) {
            graph::collect(graph[0], "graph0", out);
            graph::collect(graph[1], "graph1", out);
        }
        out.emplace_back("head.w", w_fc);
        out.emplace_back("head.b", b_fc);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.size();
        return n;
    }
};

inline std::size_t head_input_dim(const ModelConfig& c) {
    const auto e = c.embedding_dim();
    switch (c.variant) {
        case Variant::PureVis: return e;
        case Variant::PureKin:
        case Variant::TCNKV_NoSplit: return 2 * e;
        default: return 3 * e;
    }
}

inline ModelParams init_params(const ModelConfig& cfg, const Rng& seed_rng) {
    if (cfg.lstm_hidden != cfg.embedding_dim()) {
        throw ContractError("LSTM hidden size must equal the TCN embedding size to average the two branches");
    }
    if (cfg.num_classes < 2) throw ContractError("need at least two classes");
    ModelParams p;
    p.config = cfg;
    const auto v = cfg.variant;
    // Independent named streams keep each component's draws stable across variants.
    if (uses_visual(v)) {
        auto r = seed_rng.stream("init/visual");
        p.visual = streams::init_tcn(cfg.visual_dim, cfg.tcn, r);
    }
    if (v == Variant::TCNKV_NoSplit) {
        auto r = seed_rng.stream("init/kin_joint");
        p.joint = {streams::init_tcn(2 * cfg.kin_dim, cfg.tcn, r), streams::init_lstm(2 * cfg.kin_dim, cfg.lstm_hidden, r)};
    } else if (uses_kinematics(v)) {
        auto rl = seed_rng.stream("init/kin_left");
        p.left = {streams::init_tcn(cfg.kin_dim, cfg.tcn, rl), streams::init_lstm(cfg.kin_dim, cfg.lstm_hidden, rl)};
        auto rr = seed_rng.stream("init/kin_right");
        p.right = {streams::init_tcn(cfg.kin_dim, cfg.tcn, rr), streams::init_lstm(cfg.kin_dim, cfg.lstm_hidden, rr)};
    }
    if (v == Variant::MRG || v == Variant::GCNKV) {
        auto rg = seed_rng.stream("init/graph");
        const auto e = cfg.embedding_dim();
        for (auto& layer : p.graph) {
            if (v == Variant::MRG) {
                layer = graph::init_layer(e, graph::kNumRelations, cfg.num_bases, rg);
            } else {
                layer = graph::init_layer(e, 1, 1, rg);
                layer.coeffs = Tensor({1, 1}, {1.0}, false);
            }
        }
    }
    auto rh = seed_rng.stream("init/head");
    const auto in = head_input_dim(cfg);
    p.w_fc = streams::uniform_init({in, cfg.num_classes}, in, rh);
    p.b_fc = Tensor::zeros({cfg.num_classes}, true);
    p.class_weights.assign(cfg.num_classes, 1.0);
    return p;
}

inline const graph::RelGraphSpec& graph_for(Variant v) {
    static const auto multi = graph::RelGraphSpec::multi_relational();
    static const auto single = graph::RelGraphSpec::single_relation();
    return v == Variant::MRG ? multi : single;
}

/// concat[parts] * W_fc + b, one row of logits per frame.
inline Tensor head_logits(const std::vector<Tensor>& parts, const Tensor& w_fc, const Tensor& b_fc) {
    auto joined = parts.size() == 1 ? parts.front() : num::concat_cols(parts);
    return num::add_row_bias(num::matmul(joined, w_fc), b_fc);
}

/// Softmax(concat[s, k_l, k_r] W_fc + b) for one frame; inputs are vectors.
inline Tensor head_predict(const Tensor& s, const Tensor& k_l, const Tensor& k_r, const Tensor& w_fc, const Tensor& b_fc) {
    auto row = [](const Tensor& t) { return t.reshaped({1, t.size()}); };
    auto p = num::softmax(head_logits({row(s), row(k_l), row(k_r)}, w_fc, b_fc));
    return p.reshaped({p.size()});
}

inline Tensor joint_kinematics(const Trial& trial) {
    return num::concat_cols({trial.kin_left.values, trial.kin_right.values});
}

/// Per-frame logits [T, K] for the configured variant.
inline Tensor forward_logits(const Trial& trial, const ModelParams& p, const ForwardContext& ctx = {}) {
    const auto& cfg = p.config;
    const auto v = cfg.variant;
    if (uses_visual(v) && !trial.has_visual()) {
        throw ContractError(std::string(variant_name(v)) + " needs visual features for trial " + trial.id);
    }
    if (uses_kinematics(v) && !trial.has_kinematics()) {
        throw ContractError(std::string(variant_name(v)) + " needs kinematics for trial " + trial.id);
    }
    switch (v) {
        case Variant::PureVis:
            return head_logits({streams::tcn_forward(trial.visual, p.visual, cfg.tcn, ctx)}, p.w_fc, p.b_fc);
        case Variant::PureKin: {
            auto e = streams::extract_embeddings(trial, {{}, p.left, p.right}, cfg.tcn, ctx, {false, true});
            return head_logits({e.k_l, e.k_r}, p.w_fc, p.b_fc);
        }
        case Variant::TCNKV_NoSplit: {
            auto s = streams::tcn_forward(trial.visual, p.visual, cfg.tcn, ctx);
            auto k = streams::encode_kinematics(joint_kinematics(trial), p.joint, cfg.tcn, ctx);
            return head_logits({s, k}, p.w_fc, p.b_fc);
        }
        case Variant::TCNKV: {
            auto e = streams::extract_embeddings(trial, {p.visual, p.left, p.right}, cfg.tcn, ctx);
            return head_logits({e.s, e.k_l, e.k_r}, p.w_fc, p.b_fc);
        }
        case Variant::GCNKV:
        case Variant::MRG: {
            auto e = streams::extract_embeddings(trial, {p.visual, p.left, p.right}, cfg.tcn, ctx);
            auto h = graph::rgcn_forward({e.s, e.k_l, e.k_r}, graph_for(v), p.graph, cfg.graph_dropout, ctx);
            return head_logits({h[0], h[1], h[2]}, p.w_fc, p.b_fc);
        }
    }
    throw ContractError("unknown variant");
}

/// Row-stochastic [T, K] class probabilities.
inline Tensor forward(const Trial& trial, const ModelParams& p, const ForwardContext& ctx = {}) {
    return num::softmax(forward_logits(trial, p, ctx));
}

inline std::vector<int> argmax_rows(const Tensor& m) {
    const auto T = m.dim(0), K = m.dim(1);
    std::vector<int> out(T);
    for (std::size_t t = 0; t < T; ++t) {
        const auto row = m.data().subspan(t * K, K);
        out[t] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

using num::weighted_ce;
using num::weighted_ce_logits;

/// Inverse-frequency class weights, alpha_c = N / (K * max(n_c, 1)), rescaled
/// to mean 1.
inline std::vector<double> class_weights(const std::vector<std::span<const int>>& label_seqs, std::size_t K) {
    std::vector<double> counts(K, 0.0);
    double total = 0.0;
    for (auto seq : label_seqs) {
        for (int y : seq) {
            if (y < 0 || static_cast<std::size_t>(y) >= K) throw ContractError("class_weights: label out of range");
            counts[static_cast<std::size_t>(y)] += 1.0;
            total += 1.0;
        }
    }
    std::vector<double> alpha(K);
    for (std::size_t c = 0; c < K; ++c) alpha[c] = total / (static_cast<double>(K) * std::max(counts[c], 1.0));
    double mean = 0.0;
    for (double a : alpha) mean += a;
    mean /= static_cast<double>(K);
    for (auto& a : alpha) a /= mean;
    return alpha;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'M', 'R', 'G', 'S', 'E', 'Q', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<double> arch_block(const ModelConfig& c) {
    std::vector<double> a{static_cast<double>(c.visual_dim), static_cast<double>(c.kin_dim),
                          static_cast<double>(c.tcn.kernel_width), static_cast<double>(c.tcn.encoder_filters.size())};
    for (auto f : c.tcn.encoder_filters) a.push_back(static_cast<double>(f));
    for (auto f : c.tcn.decoder_filters) a.push_back(static_cast<double>(f));
    a.push_back(static_cast<double>(c.lstm_hidden));
    a.push_back(static_cast<double>(c.num_bases));
    a.push_back(c.tcn.dropout);
    a.push_back(c.graph_dropout);
    return a;
}

inline ModelConfig config_from_arch(Variant v, std::size_t K, const std::vector<double>& a) {
    auto at = [&](std::size_t i) {
        if (i >= a.size()) throw CheckpointError("checkpoint architecture block is truncated");
        return a[i];
    };
    auto count = [&](std::size_t i) { return static_cast<std::size_t>(at(i)); };
    ModelConfig c;
    c.variant = v;
    c.num_classes = K;
    c.visual_dim = count(0);
    c.kin_dim = count(1);
    c.tcn.kernel_width = count(2);
    const auto levels = count(3);
    c.tcn.encoder_filters.clear();
    c.tcn.decoder_filters.clear();
    for (std::size_t i = 0; i < levels; ++i) c.tcn.encoder_filters.push_back(count(4 + i));
    for (std::size_t i = 0; i < levels; ++i) c.tcn.decoder_filters.push_back(count(4 + levels + i));
    c.lstm_hidden = count(4 + 2 * levels);
    c.num_bases = count(5 + 2 * levels);
    c.tcn.dropout = at(6 + 2 * levels);
    c.graph_dropout = at(7 + 2 * levels);
    return c;
}

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint is truncated");
    return v;
}

struct Block {
    num::Shape shape;
    std::vector<double> values;
};

inline void put_block(std::ostream& os, const std::string& name, const num::Shape& shape, std::span<const double> values) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

}  // namespace detail

/// Layout: magic "MRGSEQCK", u32 version, u32 variant, u32 K, u32 block count,
/// then per block: u32 name length, name bytes, u32 rank, u64 extents,
/// row-major little-endian doubles.
inline void save_checkpoint(std::ostream& os, const ModelParams& p) {
    std::vector<std::pair<std::string, std::pair<num::Shape, std::vector<double>>>> blocks;
    auto arch = detail::arch_block(p.config);
    blocks.push_back({"arch", {{arch.size()}, arch}});
    blocks.push_back({"class_weights", {{p.class_weights.size()}, p.class_weights}});
    if (p.kin_stats) {
        const auto& s = *p.kin_stats;
        blocks.push_back({"norm.left.mean", {{s.left.mean.size()}, s.left.mean}});
        blocks.push_back({"norm.left.std", {{s.left.std.size()}, s.left.std}});
        blocks.push_back({"norm.right.mean", {{s.right.mean.size()}, s.right.mean}});
        blocks.push_back({"norm.right.std", {{s.right.std.size()}, s.right.std}});
    }
    for (const auto& [name, t] : p.named_parameters()) blocks.push_back({name, {t.shape(), t.values()}});

    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put<std::uint32_t>(os, kCheckpointVersion);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.config.variant));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.config.num_classes));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(blocks.size()));
    for (const auto& [name, b] : blocks) detail::put_block(os, name, b.first, b.second);
}

inline void save_checkpoint(const std::string& path, const ModelParams& p) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + path);
    save_checkpoint(os, p);
    if (!os) throw CheckpointError("failed writing checkpoint " + path);
}

inline ModelParams load_checkpoint(std::istream& is) {
    char magic[sizeof kCheckpointMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
        throw CheckpointError("not a checkpoint (bad magic)");
    }
    const auto version = detail::get<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto kind = detail::get<std::uint32_t>(is);
    if (kind > static_cast<std::uint32_t>(Variant::MRG)) throw CheckpointError("unknown variant id " + std::to_string(kind));
    const auto K = detail::get<std::uint32_t>(is);
    const auto count = detail::get<std::uint32_t>(is);
    std::map<std::string, detail::Block> blocks;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::get<std::uint32_t>(is);
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw CheckpointError("checkpoint is truncated");
        const auto rank = detail::get<std::uint32_t>(is);
        detail::Block b;
        for (std::uint32_t r = 0; r < rank; ++r) b.shape.push_back(detail::get<std::uint64_t>(is));
        b.values.resize(num::shape_size(b.shape));
        if (!is.read(reinterpret_cast<char*>(b.values.data()), static_cast<std::streamsize>(b.values.size() * sizeof(double)))) {
            throw CheckpointError("checkpoint is truncated in block " + name);
        }
        blocks.emplace(std::move(name), std::move(b));
    }
    auto take = [&](const std::string& name) -> detail::Block& {
        auto it = blocks.find(name);
        if (it == blocks.end()) throw CheckpointError("checkpoint lacks block " + name);
        return it->second;
    };
    const auto cfg = detail::config_from_arch(static_cast<Variant>(kind), K, take("arch").values);
    ModelParams p = init_params(cfg, Rng(0));
    p.class_weights = take("class_weights").values;
    if (blocks.contains("norm.left.mean")) {
        p.kin_stats = KinStats{{take("norm.left.mean").values, take("norm.left.std").values},
                               {take("norm.right.mean").values, take("norm.right.std").values}};
    }
    for (auto& [name, t] : p.named_parameters()) {
        auto& b = take(name);
        if (b.shape != t.shape()) {
            throw CheckpointError("block " + name + " has shape " + num::shape_str(b.shape) + ", expected " +
                                  num::shape_str(t.shape()));
        }
        std::copy(b.values.begin(), b.values.end(), t.mutable_data().begin());
    }
    return p;
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path);
    return load_checkpoint(is);
}

}  // namespace mrgseq::model
