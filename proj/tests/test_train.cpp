#include <gtest/gtest.h>

#include <cmath>

#include "mrgseq/train.hpp"

using namespace mrgseq;
using namespace mrgseq::train;
using mrgseq::num::Rng;

namespace {

model::ModelConfig tiny_model() {
    model::ModelConfig m;
    m.tcn.encoder_filters = {8, 8};
    m.tcn.decoder_filters = {8, 8};
    m.tcn.kernel_width = 5;
    m.lstm_hidden = 8;
    return m;
}

data::SynthConfig tiny_synth(std::uint64_t seed = 1) {
    data::SynthConfig c;
    c.seed = seed;
    c.num_users = 2;
    c.trials_per_user = 1;
    c.min_frames = 100;
    c.max_frames = 100;
    c.visual_dim = 12;
    c.dwell_mean = {12.0};
    return c;
}

std::vector<Trial> normalised(const std::vector<data::RawTrial>& raw) {
    std::vector<const data::RawTrial*> ptrs;
    for (const auto& r : raw) ptrs.push_back(&r);
    const auto stats = data::fit_kin_stats(ptrs);
    std::vector<Trial> out;
    for (const auto& r : raw) out.push_back(data::normalize_trial(r, stats));
    return out;
}

}  // namespace

TEST(TrainConfig, DefaultsAndParsing) {
    TrainConfig d;
    EXPECT_EQ(d.learning_rate, 5e-3);
    EXPECT_EQ(d.weight_decay, 5e-4);
    EXPECT_EQ(d.epochs, 100u);
    EXPECT_EQ(d.repeats, 3u);
    EXPECT_EQ(d.beta1, 0.9);
    EXPECT_EQ(d.beta2, 0.999);
    EXPECT_EQ(d.epsilon, 1e-8);
    const auto c = parse_train_config("# desk scale\nepochs = 30\nvariant = GCN-KV\nlearning_rate=0.01 # faster\n"
                                      "class_weighting = off\n");
    EXPECT_EQ(c.epochs, 30u);
    EXPECT_EQ(c.variant, Variant::GCNKV);
    EXPECT_EQ(c.learning_rate, 0.01);
    EXPECT_FALSE(c.class_weighting);
    EXPECT_THROW(parse_train_config("epoch = 3\n"), ConfigError);
    EXPECT_THROW(parse_train_config("learning_rate = -1\n"), ConfigError);
    EXPECT_THROW(parse_train_config("repeats = 0\n"), ConfigError);
    EXPECT_THROW(parse_train_config("epochs = ten\n"), ConfigError);
    EXPECT_THROW(parse_train_config("epochs\n"), ConfigError);
}

TEST(Adam, ZeroGradientZeroDecayIsFixedPoint) {
    Tensor w({3}, {1.0, -2.0, 0.5}, true);
    w.mutable_grad();  // zeros
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    AdamState st;
    for (int i = 0; i < 5; ++i) adam_step({{"w", w}}, st, cfg);
    EXPECT_EQ(w.values(), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, FirstStepsByHand) {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    Tensor w({1}, {0.0}, true);
    AdamState st;
    w.mutable_grad()[0] = 1.0;
    adam_step({{"w", w}}, st, cfg);
    // m_hat = 1, v_hat = 1 after bias correction.
    EXPECT_NEAR(w.item(), -cfg.learning_rate / (1.0 + cfg.epsilon), 1e-15);

    // Second step with gradient 3, evaluated independently.
    w.mutable_grad()[0] = 3.0;
    adam_step({{"w", w}}, st, cfg);
    const double m = 0.9 * 0.1 + 0.1 * 3.0, v = 0.999 * 0.001 + 0.001 * 9.0;
    const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
    EXPECT_NEAR(w.item(), -cfg.learning_rate / (1.0 + cfg.epsilon) - cfg.learning_rate * mh / (std::sqrt(vh) + 1e-8), 1e-15);

    // Decoupled decay: theta shrinks by lr * wd before the Adam delta.
    TrainConfig wd;
    Tensor u({1}, {2.0}, true);
    u.mutable_grad();
    AdamState s2;
    adam_step({{"u", u}}, s2, wd);
    EXPECT_DOUBLE_EQ(u.item(), 2.0 * (1.0 - wd.learning_rate * wd.weight_decay));
}

TEST(Adam, NonFiniteGradientNamesBlock) {
    Tensor a({1}, {0.0}, true), b({2}, {0.0, 0.0}, true);
    a.mutable_grad()[0] = 1.0;
    b.mutable_grad()[1] = std::nan("");
    AdamState st;
    try {
        adam_step({{"head.w", a}, {"graph0.bases", b}}, st, TrainConfig{});
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("graph0.bases"), std::string::npos);
    }
    EXPECT_EQ(a.item(), 0.0);  // nothing applied
}

TEST(RunTraining, ContractsAndNoOp) {
    TrainConfig cfg;
    cfg.model = tiny_model();
    EXPECT_THROW(run_training({}, 6, cfg, Rng(0)), ContractError);
    const auto trials = normalised(data::synth_raw_trials(tiny_synth()));
    cfg.epochs = 0;
    const auto r = run_training(trials, 6, cfg, Rng(5));
    const auto fresh = model::init_params(resolve_model_config(cfg, trials, 6), Rng(5));
    const auto a = r.params.named_parameters(), b = fresh.named_parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
    EXPECT_TRUE(r.loss_curve.empty());
    ASSERT_TRUE(r.params.kin_stats.has_value());
}

TEST(RunTraining, OverfitProbeTinyMRG) {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.epochs = 300;
    const auto trials = normalised(data::synth_raw_trials(tiny_synth()));
    const auto r = run_training(trials, 6, cfg, Rng(2));
    EXPECT_GE(evaluate_split(trials, r.params).frame_accuracy, 99.0);
    EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
}

TEST(RunTraining, LossMonotoneWithinBandWithoutDropout) {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.model.tcn.dropout = 0.0;
    cfg.model.graph_dropout = 0.0;
    cfg.epochs = 300;
    const auto trials = normalised(data::synth_raw_trials(tiny_synth()));
    const auto r = run_training(trials, 6, cfg, Rng(2));
    EXPECT_GE(evaluate_split(trials, r.params).frame_accuracy, 99.0);
    // After epoch 10 no epoch rises above the running minimum by more than
    // 5% of the epoch-10 loss.
    const double band = 0.05 * r.loss_curve[9];
    double best = r.loss_curve[9];
    for (std::size_t e = 10; e < r.loss_curve.size(); ++e) {
        EXPECT_LE(r.loss_curve[e], best + band) << "epoch " << e + 1;
        best = std::min(best, r.loss_curve[e]);
    }
}

TEST(RunTraining, DeterministicAndEvaluationPure) {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.epochs = 3;
    const auto trials = normalised(data::synth_raw_trials(tiny_synth()));
    const auto a = run_training(trials, 6, cfg, Rng(9)), b = run_training(trials, 6, cfg, Rng(9));
    EXPECT_EQ(a.loss_curve, b.loss_curve);
    const auto pa = a.params.named_parameters(), pb = b.params.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
    const auto e1 = evaluate_split(trials, a.params), e2 = evaluate_split(trials, a.params);
    EXPECT_EQ(e1.frame_accuracy, e2.frame_accuracy);
    EXPECT_EQ(e1.confusion, e2.confusion);
}

TEST(CrossValidate, CellCountAndAggregateOracle) {
    auto sc = tiny_synth();
    sc.num_users = 4;
    sc.min_frames = 40;
    sc.max_frames = 50;
    const auto raw = data::synth_raw_trials(sc);
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.epochs = 1;
    cfg.repeats = 3;
    cfg.variant = Variant::TCNKV;
    std::size_t hooked = 0;
    const auto r = cross_validate(raw, 6, cfg, {}, [&](const Cell&, const ModelParams& p, const data::Fold& f, const auto&) {
        ++hooked;
        // The held-out user never contributes to training statistics.
        for (const auto& t : f.train) EXPECT_NE(t.user, f.test_user);
        EXPECT_EQ(p.kin_stats->left.mean, f.stats->left.mean);
    });
    ASSERT_EQ(r.cells.size(), 12u);
    EXPECT_EQ(hooked, 12u);
    double acc = 0, ed = 0;
    for (const auto& c : r.cells) acc += c.report.frame_accuracy, ed += c.report.edit_score;
    EXPECT_NEAR(r.accuracy.mean, acc / 12, 1e-9);
    EXPECT_NEAR(r.edit.mean, ed / 12, 1e-9);
    double ss = 0;
    for (const auto& c : r.cells) ss += std::pow(c.report.frame_accuracy - acc / 12, 2);
    EXPECT_NEAR(r.accuracy.std, std::sqrt(ss / 11), 1e-9);
    EXPECT_EQ(r.cells[4].repeat, 1u);
    EXPECT_EQ(r.cells[4].test_user, "U1");
}

TEST(CrossValidate, PureVisReadsNoKinematics) {
    auto sc = tiny_synth();
    sc.min_frames = sc.max_frames = 40;
    const auto dir = std::filesystem::temp_directory_path() / "mrgseq_test_lazy";
    std::filesystem::remove_all(dir);
    data::write_synthetic_dataset(sc, dir);
    std::filesystem::remove_all(dir / "kinematics");
    const auto m = data::read_manifest(dir / "manifest.txt");
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.epochs = 1;
    cfg.repeats = 1;
    cfg.variant = Variant::PureVis;
    EXPECT_EQ(cross_validate(m, cfg).cells.size(), 2u);
    cfg.variant = Variant::PureKin;
    EXPECT_THROW(cross_validate(m, cfg), data::ParseError);
}
