#include <gtest/gtest.h>

#include <algorithm>

#include "mrgseq/num/gradcheck.hpp"
#include "mrgseq/relgraph.hpp"
#include "test_util.hpp"

using namespace mrgseq;
using namespace mrgseq::graph;
using mrgseq::num::Rng;
using mrgseq::num::Tensor;
using mrgseq::testing::probe_weights;
using mrgseq::testing::random_tensor;

namespace {

constexpr std::size_t kDim = 64;

RelLayerParams random_layer(std::size_t dim, std::size_t relations, std::size_t bases, Rng& rng) {
    RelLayerParams p;
    for (std::size_t b = 0; b < bases; ++b) p.bases.push_back(random_tensor({dim, dim}, rng, -0.3, 0.3));
    p.coeffs = random_tensor({relations, bases}, rng, -1.0, 1.0);
    return p;
}

NodeStates random_states(std::size_t frames, std::size_t dim, Rng& rng, bool grad = false) {
    return {random_tensor({frames, dim}, rng, -1, 1, grad), random_tensor({frames, dim}, rng, -1, 1, grad),
            random_tensor({frames, dim}, rng, -1, 1, grad)};
}

// Relation matrices by explicit summation over raw storage.
std::vector<std::vector<double>> relation_matrices(const RelLayerParams& p) {
    const auto R = p.coeffs.dim(0), B = p.coeffs.dim(1);
    const auto n = p.bases.front().size();
    std::vector<std::vector<double>> W(R, std::vector<double>(n, 0.0));
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < n; ++i) W[r][i] += p.coeffs[r * B + b] * p.bases[b][i];
    return W;
}

// Dense [3d, 3d] propagation matrix: block (src, dst) = sum over relations of
// c * W_r for every edge src -> dst.  Edge list and constants are written out
// by hand rather than taken from RelGraphSpec.
std::vector<double> dense_propagation(const RelLayerParams& p, std::size_t d) {
    struct HandEdge {
        int src, rel, dst;
        double c;
    };
    const HandEdge edges[] = {{0, 0, 1, 1.0}, {0, 0, 2, 1.0}, {1, 1, 0, 0.5},
                              {2, 1, 0, 0.5}, {1, 2, 2, 1.0}, {2, 2, 1, 1.0}};
    const auto W = relation_matrices(p);
    const auto n = 3 * d;
    std::vector<double> M(n * n, 0.0);
    for (const auto& e : edges)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                M[(e.src * d + a) * n + (e.dst * d + b)] += e.c * W[e.rel][a * d + b];
    return M;
}

std::vector<double> dense_layer(const std::vector<double>& h, const std::vector<double>& M) {
    const auto n = h.size();
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += h[i] * M[i * n + j];
        out[j] = std::max(acc, 0.0);
    }
    return out;
}

}  // namespace

TEST(RelGraphSpec, EdgeSetAndConstants) {
    const auto g = RelGraphSpec::multi_relational();
    ASSERT_EQ(g.edges.size(), 6u);
    for (const auto& e : g.edges) EXPECT_NE(e.src, e.dst);
    EXPECT_DOUBLE_EQ(g.c(video, motion_to_vision), 0.5);
    EXPECT_DOUBLE_EQ(g.c(kin_left, vision_to_motion), 1.0);
    EXPECT_DOUBLE_EQ(g.c(kin_right, vision_to_motion), 1.0);
    EXPECT_DOUBLE_EQ(g.c(kin_left, in_between_motions), 1.0);
    EXPECT_DOUBLE_EQ(g.c(kin_right, in_between_motions), 1.0);
    EXPECT_EQ(g.sources(video, motion_to_vision), (std::vector<std::size_t>{kin_left, kin_right}));
    EXPECT_TRUE(g.sources(video, vision_to_motion).empty());
    EXPECT_NO_THROW(g.validate());

    const auto text = g.adjacency_text();
    EXPECT_NE(text.find("kin_left -[motion_to_vision]-> video (c=0.5)"), std::string::npos) << text;
}

TEST(RelGraphSpec, SelfLoopRejected) {
    auto g = RelGraphSpec::multi_relational();
    g.edges.push_back({video, motion_to_vision, video});
    EXPECT_THROW(g.validate(), ContractError);
}

TEST(BasisCompose, SingleBasisTiesRelations) {
    Rng rng(1);
    auto p = random_layer(4, 3, 1, rng);
    p.coeffs = Tensor({3, 1}, {1, 1, 1});
    for (std::size_t r = 0; r < 3; ++r) {
        auto w = basis_compose(p, r);
        for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i], p.bases[0][i]);
    }
}

TEST(BasisCompose, SelectorCoefficients) {
    Rng rng(2);
    auto p = random_layer(4, 3, 2, rng);
    p.coeffs = Tensor({3, 2}, {1, 0, 0, 1, 1, 0});
    auto w0 = basis_compose(p, 0), w1 = basis_compose(p, 1);
    for (std::size_t i = 0; i < w0.size(); ++i) {
        EXPECT_EQ(w0[i], p.bases[0][i]);
        EXPECT_EQ(w1[i], p.bases[1][i]);
    }
}

TEST(BasisCompose, MatchesDirectSum) {
    Rng rng(3);
    auto p = random_layer(kDim, 3, 2, rng);
    const auto W = relation_matrices(p);
    for (std::size_t r = 0; r < 3; ++r) {
        auto w = basis_compose(p, r);
        for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], W[r][i], 1e-12);
    }
}

TEST(BasisCompose, UnknownRelationThrows) {
    Rng rng(4);
    auto p = random_layer(4, 3, 2, rng);
    EXPECT_THROW(basis_compose(p, 3), ContractError);
}

TEST(InitLayer, BasisCountBounds) {
    Rng rng(5);
    EXPECT_THROW(init_layer(4, 3, 0, rng), ContractError);
    EXPECT_THROW(init_layer(4, 3, 4, rng), ContractError);
    auto p = init_layer(kDim, 3, 2, rng);
    EXPECT_EQ(p.num_bases(), 2u);
    // Fewer parameters than three unconstrained matrices.
    EXPECT_LT(2 * kDim * kDim + 6, 3 * kDim * kDim);
}

TEST(LayerForward, ZeroStatesGiveZero) {
    Rng rng(6);
    auto p = random_layer(kDim, 3, 2, rng);
    NodeStates h{Tensor::zeros({1, kDim}), Tensor::zeros({1, kDim}), Tensor::zeros({1, kDim})};
    auto out = layer_forward(h, RelGraphSpec::multi_relational(), p);
    for (const auto& t : out)
        for (double v : t.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerForward, VideoSeesOnlyKinematics) {
    Rng rng(7);
    auto p = random_layer(kDim, 3, 2, rng);
    auto h = random_states(1, kDim, rng);
    h[kin_left] = Tensor::zeros({1, kDim});
    h[kin_right] = Tensor::zeros({1, kDim});
    auto out = layer_forward(h, RelGraphSpec::multi_relational(), p);
    for (double v : out[video].data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerForward, HandEvaluatedToy) {
    // d = 2, every W_r the identity.
    RelLayerParams p{{Tensor({2, 2}, {1, 0, 0, 1})}, Tensor({3, 1}, {1, 1, 1})};
    NodeStates h{Tensor({1, 2}, {1.0, -2.0}), Tensor({1, 2}, {3.0, 0.5}), Tensor({1, 2}, {-1.0, 4.0})};
    auto out = layer_forward(h, RelGraphSpec::multi_relational(), p);
    auto relu = [](double x) { return std::max(x, 0.0); };
    for (std::size_t k = 0; k < 2; ++k) {
        const double s = h[0][k], kl = h[1][k], kr = h[2][k];
        EXPECT_DOUBLE_EQ(out[video][k], relu((kl + kr) / 2));
        EXPECT_DOUBLE_EQ(out[kin_left][k], relu(s + kr));
        EXPECT_DOUBLE_EQ(out[kin_right][k], relu(s + kl));
    }
}

TEST(LayerForward, RelationCountMismatchThrows) {
    Rng rng(8);
    auto p = random_layer(4, 1, 1, rng);
    auto h = random_states(1, 4, rng);
    EXPECT_THROW(layer_forward(h, RelGraphSpec::multi_relational(), p), ContractError);
}

TEST(RgcnForward, MatchesDenseBlockOracle) {
    Rng rng(9);
    std::array<RelLayerParams, 2> layers{random_layer(kDim, 3, 2, rng), random_layer(kDim, 3, 2, rng)};
    const std::size_t N = 100;
    auto h = random_states(N, kDim, rng);
    auto out = rgcn_forward(h, RelGraphSpec::multi_relational(), layers);
    const auto M1 = dense_propagation(layers[0], kDim);
    const auto M2 = dense_propagation(layers[1], kDim);
    double worst = 0.0;
    for (std::size_t f = 0; f < N; ++f) {
        std::vector<double> x(3 * kDim);
        for (std::size_t node = 0; node < 3; ++node)
            for (std::size_t k = 0; k < kDim; ++k) x[node * kDim + k] = h[node].at(f, k);
        const auto y = dense_layer(dense_layer(x, M1), M2);
        for (std::size_t node = 0; node < 3; ++node)
            for (std::size_t k = 0; k < kDim; ++k)
                worst = std::max(worst, std::abs(y[node * kDim + k] - out[node].at(f, k)));
    }
    EXPECT_LE(worst, 1e-10);
}

TEST(RgcnForward, ZeroInputsGiveZero) {
    Rng rng(10);
    std::array<RelLayerParams, 2> layers{random_layer(kDim, 3, 2, rng), random_layer(kDim, 3, 2, rng)};
    NodeStates h{Tensor::zeros({3, kDim}), Tensor::zeros({3, kDim}), Tensor::zeros({3, kDim})};
    for (const auto& t : rgcn_forward(h, RelGraphSpec::multi_relational(), layers))
        for (double v : t.data()) EXPECT_EQ(v, 0.0);
}

TEST(RgcnForward, ArmSwapEquivariance) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        std::array<RelLayerParams, 2> layers{random_layer(kDim, 3, 2, rng), random_layer(kDim, 3, 2, rng)};
        auto h = random_states(5, kDim, rng);
        const auto& g = RelGraphSpec::multi_relational();
        auto a = rgcn_forward(h, g, layers);
        auto b = rgcn_forward({h[0], h[2], h[1]}, g, layers);
        EXPECT_EQ(a[video].values(), b[video].values());
        EXPECT_EQ(a[kin_left].values(), b[kin_right].values());
        EXPECT_EQ(a[kin_right].values(), b[kin_left].values());
    }
}

TEST(RgcnForward, NoSelfLoopThroughOneLayer) {
    Rng rng(11);
    auto p = random_layer(kDim, 3, 2, rng);
    auto h = random_states(4, kDim, rng, true);
    auto w = probe_weights(Tensor::zeros({4, kDim}), rng);
    auto out = layer_forward(h, RelGraphSpec::multi_relational(), p);
    num::backward(num::sum(num::mul(out[video], w)));
    if (h[video].has_grad()) {
        for (double g : h[video].grad()) EXPECT_EQ(g, 0.0);
    }
    ASSERT_TRUE(h[kin_left].has_grad());
    EXPECT_TRUE(std::any_of(h[kin_left].grad().begin(), h[kin_left].grad().end(), [](double g) { return g != 0.0; }));
}

TEST(RgcnForward, VideoReachesItselfThroughTwoLayers) {
    Rng rng(12);
    std::array<RelLayerParams, 2> layers{random_layer(kDim, 3, 2, rng), random_layer(kDim, 3, 2, rng)};
    auto h = random_states(4, kDim, rng, true);
    auto w = probe_weights(Tensor::zeros({4, kDim}), rng);
    auto out = rgcn_forward(h, RelGraphSpec::multi_relational(), layers);
    num::backward(num::sum(num::mul(out[video], w)));
    ASSERT_TRUE(h[video].has_grad());
    EXPECT_TRUE(std::any_of(h[video].grad().begin(), h[video].grad().end(), [](double g) { return g != 0.0; }));
}

TEST(LayerForward, VideoPreActivationIsHomogeneous) {
    // ReLU is positively homogeneous, so scaling the pre-activation shows up
    // unchanged in the output.
    Rng rng(13);
    auto p = random_layer(kDim, 3, 2, rng);
    auto h = random_states(3, kDim, rng);
    const auto& g = RelGraphSpec::multi_relational();
    auto base = layer_forward(h, g, p);
    for (double lambda : {0.0, 0.25, 1.0, 3.5}) {
        NodeStates scaled{h[0], num::scale(h[1], lambda), num::scale(h[2], lambda)};
        auto out = layer_forward(scaled, g, p);
        for (std::size_t i = 0; i < out[video].size(); ++i) EXPECT_NEAR(out[video][i], lambda * base[video][i], 1e-12);
    }
}

TEST(RgcnForward, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(200 + seed);
        const std::size_t d = 5;
        std::array<RelLayerParams, 2> layers{random_layer(d, 3, 2, rng), random_layer(d, 3, 2, rng)};
        auto h = random_states(3, d, rng, true);
        auto w = probe_weights(Tensor::zeros({3, d}), rng);
        const auto& g = RelGraphSpec::multi_relational();
        auto f = [&] {
            auto out = rgcn_forward(h, g, layers);
            return num::add(num::add(num::sum(num::mul(out[0], w)), num::sum(num::mul(out[1], w))),
                            num::sum(num::mul(out[2], w)));
        };
        std::vector<Tensor> inputs{h[0], h[1], h[2]};
        for (const auto& l : layers) {
            inputs.insert(inputs.end(), l.bases.begin(), l.bases.end());
            inputs.push_back(l.coeffs);
        }
        EXPECT_LE(num::grad_check(f, inputs).max_rel_error, 1e-4) << "seed " << seed;
    }
}

TEST(RgcnForward, IdentityCoefficientsEqualUnconstrained) {
    Rng rng(14);
    const auto& g = RelGraphSpec::multi_relational();
    std::array<RelLayerParams, 2> layers;
    for (auto& l : layers) {
        l = random_layer(kDim, 3, 3, rng);
        l.coeffs = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    }
    auto h = random_states(6, kDim, rng);
    auto out = rgcn_forward(h, g, layers);

    // Unconstrained reference: each relation gets its own matrix outright.
    auto plain = [&](const NodeStates& in, const RelLayerParams& l) {
        auto W = [&](std::size_t r) { return l.bases[r]; };
        NodeStates o;
        o[video] = num::relu(num::matmul(num::scale(num::add(in[1], in[2]), 0.5), W(motion_to_vision)));
        o[kin_left] = num::relu(num::add(num::matmul(in[0], W(vision_to_motion)), num::matmul(in[2], W(in_between_motions))));
        o[kin_right] = num::relu(num::add(num::matmul(in[0], W(vision_to_motion)), num::matmul(in[1], W(in_between_motions))));
        return o;
    };
    auto ref = plain(plain(h, layers[0]), layers[1]);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < ref[n].size(); ++i) EXPECT_NEAR(out[n][i], ref[n][i], 1e-12);
}

TEST(RgcnForward, TiedCoefficientsEqualSingleRelation) {
    Rng rng(15);
    std::array<RelLayerParams, 2> multi, single;
    for (std::size_t l = 0; l < 2; ++l) {
        multi[l] = random_layer(kDim, 3, 2, rng);
        const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
        multi[l].coeffs = Tensor({3, 2}, {a, b, a, b, a, b});
        single[l] = {multi[l].bases, Tensor({1, 2}, {a, b})};
    }
    auto h = random_states(8, kDim, rng);
    auto x = rgcn_forward(h, RelGraphSpec::multi_relational(), multi);
    auto y = rgcn_forward(h, RelGraphSpec::single_relation(), single);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < x[n].size(); ++i) EXPECT_NEAR(x[n][i], y[n][i], 1e-10);
}

TEST(RgcnForward, DropoutOnlyWhenTraining) {
    Rng rng(16);
    std::array<RelLayerParams, 2> layers{random_layer(kDim, 3, 2, rng), random_layer(kDim, 3, 2, rng)};
    auto h = random_states(4, kDim, rng);
    const auto& g = RelGraphSpec::multi_relational();
    auto eval1 = rgcn_forward(h, g, layers);
    Rng drop(3);
    auto eval2 = rgcn_forward(h, g, layers, 0.2, {false, &drop});
    EXPECT_EQ(eval1[0].values(), eval2[0].values());
    auto train = rgcn_forward(h, g, layers, 0.2, {true, &drop});
    EXPECT_NE(eval1[0].values(), train[0].values());
}
