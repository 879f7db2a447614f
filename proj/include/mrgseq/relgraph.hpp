#pragma once

#include <array>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mrgseq/num/ops.hpp"
#include "mrgseq/num/recurrent.hpp"
#include "mrgseq/streams.hpp"

namespace mrgseq::graph {

using num::Rng;
using num::Tensor;

enum Node : std::size_t { video = 0, kin_left = 1, kin_right = 2 };
enum Relation : std::size_t { vision_to_motion = 0, motion_to_vision = 1, in_between_motions = 2 };

inline constexpr std::size_t kNumNodes = 3;
inline constexpr std::size_t kNumRelations = 3;

inline const char* node_name(std::size_t n) {
    static constexpr const char* names[] = {"video", "kin_left", "kin_right"};
    return n < kNumNodes ? names[n] : "?";
}

inline const char* relation_name(std::size_t r) {
    static constexpr const char* names[] = {"vision_to_motion", "motion_to_vision", "in_between_motions"};
    return r < kNumRelations ? names[r] : "?";
}

struct Edge {
    std::size_t src;
    std::size_t relation;
    std::size_t dst;
};

/// Directed, relation-typed graph over the three modality nodes.
///
/// `norm` holds c for every (dst, relation) pair that has incoming edges.
struct RelGraphSpec {
    std::size_t num_relations = kNumRelations;
    std::vector<Edge> edges;
    std::map<std::pair<std::size_t, std::size_t>, double> norm;

    double c(std::size_t dst, std::size_t relation) const {
        auto it = norm.find({dst, relation});
        return it == norm.end() ? 0.0 : it->second;
    }

    std::vector<std::size_t> sources(std::size_t dst, std::size_t relation) const {
        std::vector<std::size_t> out;
        for (const auto& e : edges)
            if (e.dst == dst && e.relation == relation) out.push_back(e.src);
        return out;
    }

    /// The modality graph: kinematics nodes feed the video node under
    /// motion-to-vision, video feeds each arm under vision-to-motion, and the
    /// arms exchange messages under in-between-motions.  No self loops;
    /// c = 1 / |N_i^r|.
    static RelGraphSpec multi_relational() {
        RelGraphSpec g;
        g.num_relations = kNumRelations;
        g.edges = {{video, vision_to_motion, kin_left},     {video, vision_to_motion, kin_right},
                   {kin_left, motion_to_vision, video},     {kin_right, motion_to_vision, video},
                   {kin_left, in_between_motions, kin_right}, {kin_right, in_between_motions, kin_left}};
        for (const auto& e : g.edges) g.norm[{e.dst, e.relation}] = 0.0;
        for (auto& [key, value] : g.norm) value = 1.0 / static_cast<double>(g.sources(key.first, key.second).size());
        return g;
    }

    /// Same edges collapsed onto one shared relation.  Each node keeps the
    /// normalisation constant it has in the multi-relational graph, so tying
    /// the relation matrices of multi_relational() reproduces this graph.
    static RelGraphSpec single_relation() {
        const auto multi = multi_relational();
        RelGraphSpec g;
        g.num_relations = 1;
        for (const auto& e : multi.edges) {
            g.edges.push_back({e.src, 0, e.dst});
            g.norm[{e.dst, 0}] = multi.c(e.dst, e.relation);
        }
        return g;
    }

    void validate() const {
        for (const auto& e : edges) {
            if (e.src == e.dst) throw ContractError(std::string("self loop on node ") + node_name(e.src));
            if (e.src >= kNumNodes || e.dst >= kNumNodes || e.relation >= num_relations) {
                throw ContractError("edge references an unknown node or relation");
            }
        }
    }

    /// Plain-text adjacency listing, one `src -[relation]-> dst (c=...)` per edge.
    std::string adjacency_text() const {
        std::ostringstream os;
        os << "nodes: video kin_left kin_right\n";
        os << "relations: " << num_relations << '\n';
        for (const auto& e : edges) {
            os << node_name(e.src) << " -[" << (num_relations == 1 ? "shared" : relation_name(e.relation)) << "]-> "
               << node_name(e.dst) << " (c=" << c(e.dst, e.relation) << ")\n";
        }
        return os.str();
    }
};

/// Basis-decomposed relation weights of one layer: W_r = sum_b coeffs[r, b] * bases[b].
struct RelLayerParams {
    std::vector<Tensor> bases;  // B x [dim, dim]
    Tensor coeffs;              // [R, B]

    std::size_t num_bases() const { return bases.size(); }
    std::size_t num_relations() const { return coeffs.dim(0); }
};

inline RelLayerParams init_layer(std::size_t dim, std::size_t relations, std::size_t bases, Rng& rng) {
    if (bases == 0 || bases > kNumRelations) throw ContractError("number of bases must be in 1..3");
    RelLayerParams p;
    for (std::size_t b = 0; b < bases; ++b) p.bases.push_back(streams::uniform_init({dim, dim}, dim, rng));
    p.coeffs = streams::uniform_init({relations, bases}, bases, rng);
    return p;
}

inline Tensor basis_compose(const RelLayerParams& p, std::size_t relation) {
    if (relation >= p.num_relations()) {
        throw ContractError("basis_compose: unknown relation " + std::to_string(relation));
    }
    return num::basis_combine(p.coeffs, relation, p.bases);
}

/// Node states, each [N, dim] for N frames processed at once.
using NodeStates = std::array<Tensor, kNumNodes>;

/// One propagation step: h_i' = ReLU(sum_r c_{i,r} * (sum_{j in N_i^r} h_j) W_r).
/// Frames are independent; batching them is equivalent to applying the
/// layer frame by frame.
inline NodeStates layer_forward(const NodeStates& h, const RelGraphSpec& spec, const RelLayerParams& p) {
    if (p.num_relations() != spec.num_relations) {
        throw ContractError("layer has " + std::to_string(p.num_relations()) + " relations, graph has " +
                            std::to_string(spec.num_relations));
    }
    std::vector<Tensor> weights;
    for (std::size_t r = 0; r < spec.num_relations; ++r) weights.push_back(basis_compose(p, r));

    NodeStates out;
    for (std::size_t i = 0; i < kNumNodes; ++i) {
        Tensor pre;
        for (std::size_t r = 0; r < spec.num_relations; ++r) {
            const auto src = spec.sources(i, r);
            if (src.empty()) continue;
            Tensor agg = h[src.front()];
            for (std::size_t k = 1; k < src.size(); ++k) agg = num::add(agg, h[src[k]]);
            const double c = spec.c(i, r);
            if (c != 1.0) agg = num::scale(agg, c);
            auto msg = num::matmul(agg, weights[r]);
            pre = pre.defined() ? num::add(pre, msg) : msg;
        }
        out[i] = pre.defined() ? num::relu(pre) : Tensor::zeros(h[i].shape());
    }
    return out;
}

/// Two stacked layers with independent weights, dropout between them at
/// train time.  Output order is (video, left, right).
inline NodeStates rgcn_forward(const NodeStates& h, const RelGraphSpec& spec, const std::array<RelLayerParams, 2>& layers,
                               double dropout = 0.2, const streams::ForwardContext& ctx = {}) {
    auto mid = layer_forward(h, spec, layers[0]);
    if (ctx.dropout_active()) {
        for (auto& t : mid) t = num::dropout(t, dropout, *ctx.rng, true);
    }
    return layer_forward(mid, spec, layers[1]);
}

inline void collect(const RelLayerParams& p, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor>>& out) {
    for (std::size_t b = 0; b < p.bases.size(); ++b) out.emplace_back(prefix + ".basis" + std::to_string(b), p.bases[b]);
    out.emplace_back(prefix + ".coeffs", p.coeffs);
}

}  // namespace mrgseq::graph
