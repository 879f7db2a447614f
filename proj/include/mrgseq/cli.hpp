#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mrgseq/data.hpp"
#include "mrgseq/metrics.hpp"
#include "mrgseq/model.hpp"
#include "mrgseq/num/gradcheck.hpp"
#include "mrgseq/num/recurrent.hpp"
#include "mrgseq/relgraph.hpp"
#include "mrgseq/train.hpp"

namespace mrgseq::cli {

namespace fs = std::filesystem;
using num::Rng;
using num::Tensor;

// ---------------------------------------------------------------------------
// Ablation table
// ---------------------------------------------------------------------------

struct VariantSummary {
    model::Variant variant = model::Variant::MRG;
    train::MeanStd accuracy;
    train::MeanStd edit;
};

inline std::string mean_pm(const train::MeanStd& m) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f \xC2\xB1 %.1f", m.mean, m.std);
    return buf;
}

/// One row per variant in the canonical ablation order, whatever order the
/// results arrive in.
inline std::string report_table(std::vector<VariantSummary> rows) {
    if (rows.empty()) throw ContractError("report_table: no results");
    auto rank = [](model::Variant v) {
        return std::find(model::kAllVariants.begin(), model::kAllVariants.end(), v) - model::kAllVariants.begin();
    };
    std::stable_sort(rows.begin(), rows.end(), [&](const auto& a, const auto& b) { return rank(a.variant) < rank(b.variant); });
    std::vector<std::array<std::string, 5>> cells{{"Variant", "Kin", "Vid", "Accuracy", "Edit"}};
    for (const auto& r : rows) {
        cells.push_back({std::string(model::variant_name(r.variant)), model::uses_kinematics(r.variant) ? "x" : "-",
                         model::uses_visual(r.variant) ? "x" : "-", mean_pm(r.accuracy), mean_pm(r.edit)});
    }
    // Display width: count code points so the plus-minus sign pads correctly.
    auto width = [](const std::string& s) {
        return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
    };
    std::array<std::size_t, 5> w{};
    for (const auto& row : cells)
        for (std::size_t c = 0; c < 5; ++c) w[c] = std::max(w[c], width(row[c]));
    std::string out;
    for (const auto& row : cells) {
        std::string line;
        for (std::size_t c = 0; c < 5; ++c) {
            if (c) line += "  ";
            line += row[c] + std::string(w[c] - width(row[c]), ' ');
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + '\n';
    }
    return out;
}

inline std::string report_table(const std::vector<train::RunResult>& runs) {
    std::vector<VariantSummary> rows;
    for (const auto& r : runs) rows.push_back({r.variant, r.accuracy, r.edit});
    return report_table(std::move(rows));
}

// ---------------------------------------------------------------------------
// Label files: one integer class per line
// ---------------------------------------------------------------------------

inline std::string format_labels(std::span<const int> labels) {
    std::string s;
    for (int l : labels) s += std::to_string(l) + '\n';
    return s;
}

inline std::vector<int> read_labels(const fs::path& path) {
    const auto text = data::detail::read_file(path);
    std::vector<int> out;
    std::size_t row = 0;
    for (auto tok : data::detail::split_ws(text)) {
        ++row;
        const long v = data::detail::parse_long(tok, row, "label");
        if (v < 0) throw data::ParseError(path.string() + ": negative label on row " + std::to_string(row));
        out.push_back(static_cast<int>(v));
    }
    if (out.empty()) throw data::ParseError(path.string() + ": no labels");
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference suite
// ---------------------------------------------------------------------------

struct LayerCheck {
    std::string layer;
    double max_rel_error = 0.0;
    std::size_t entries = 0;
};

inline constexpr double kGradTolerance = 1e-4;

namespace detail {

inline Tensor uniform(num::Shape s, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
    std::vector<double> v(num::shape_size(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(s), std::move(v), grad);
}

inline Tensor probe(const Tensor& y, const Tensor& w) { return num::sum(num::mul(y, w)); }

}  // namespace detail

/// Every layer type checked against central differences over `configs`
/// seeded random configurations; reports the worst error per layer.
inline std::vector<LayerCheck> gradcheck_suite(std::uint64_t seed, std::size_t configs = 10) {
    using detail::probe;
    using detail::uniform;
    num::ConvPrecisionGuard precision(num::ConvPrecision::Double);
    std::map<std::string, LayerCheck> acc;
    std::vector<std::string> order;
    auto record = [&](const std::string& name, const num::GradCheckResult& r) {
        if (!acc.count(name)) order.push_back(name);
        auto& c = acc[name];
        c.layer = name;
        c.max_rel_error = std::max(c.max_rel_error, r.max_rel_error);
        c.entries += r.entries;
    };
    for (std::size_t i = 0; i < configs; ++i) {
        auto rng = Rng(seed).stream("gradcheck", i);
        const std::size_t T = 8 + rng.below(9), C = 2 + rng.below(3), O = 2 + rng.below(3), W = 1 + rng.below(6);
        {
            auto x = uniform({T, C}, rng), k = uniform({O, C, W}, rng), b = uniform({O}, rng);
            auto w = uniform({T, O}, rng, -1, 1, false);
            record("causal_conv", num::grad_check([&] { return probe(num::causal_conv(x, k, b), w); }, {x, k, b}));
        }
        {
            auto x = uniform({T, C}, rng);
            auto w = uniform({T, C}, rng, -1, 1, false);
            record("pool_upsample", num::grad_check(
                                        [&] { return probe(num::frame_pad_repeat(num::frame_upsample2(num::frame_maxpool2(x)), T), w); },
                                        {x}));
        }
        {
            auto x = uniform({T, C}, rng, 0.1, 1.0);
            auto w = uniform({T, C}, rng, -1, 1, false);
            record("channel_norm", num::grad_check([&] { return probe(num::frame_norm(x), w); }, {x}));
        }
        {
            const std::size_t H = 2 + rng.below(3);
            auto x = uniform({T, C}, rng), wi = uniform({C, 4 * H}, rng, -0.5, 0.5), wr = uniform({H, 4 * H}, rng, -0.5, 0.5);
            auto b = uniform({4 * H}, rng, -0.5, 0.5);
            auto w = uniform({T, H}, rng, -1, 1, false);
            record("lstm", num::grad_check([&] { return probe(num::lstm(x, wi, wr, b), w); }, {x, wi, wr, b}));
        }
        {
            const std::size_t d = 2 + rng.below(3), bases = 1 + rng.below(3);
            graph::NodeStates h{uniform({T, d}, rng), uniform({T, d}, rng), uniform({T, d}, rng)};
            std::array<graph::RelLayerParams, 2> layers{graph::init_layer(d, graph::kNumRelations, bases, rng),
                                                        graph::init_layer(d, graph::kNumRelations, bases, rng)};
            auto w = uniform({T, d}, rng, -1, 1, false);
            const auto& spec = graph::RelGraphSpec::multi_relational();
            auto f = [&] {
                auto out = graph::rgcn_forward(h, spec, layers);
                return num::add(num::add(probe(out[0], w), probe(out[1], w)), probe(out[2], w));
            };
            std::vector<Tensor> inputs{h[0], h[1], h[2]};
            for (const auto& l : layers) {
                inputs.insert(inputs.end(), l.bases.begin(), l.bases.end());
                inputs.push_back(l.coeffs);
            }
            record("relational_graph", num::grad_check(f, inputs));
        }
        const std::size_t K = 2 + rng.below(4);
        {
            auto a = uniform({T, C}, rng), b = uniform({T, C}, rng), c = uniform({T, C}, rng);
            auto wf = uniform({3 * C, K}, rng), bf = uniform({K}, rng);
            auto w = uniform({T, K}, rng, -1, 1, false);
            record("head", num::grad_check([&] { return probe(model::head_logits({a, b, c}, wf, bf), w); }, {a, b, c, wf, bf}));
        }
        {
            auto logits = uniform({T, K}, rng, -2, 2);
            std::vector<int> labels(T);
            for (auto& l : labels) l = static_cast<int>(rng.below(K));
            std::vector<double> alpha(K);
            for (auto& a : alpha) a = rng.uniform(0.2, 2.0);
            record("weighted_ce", num::grad_check([&] { return num::weighted_ce(num::softmax(logits), labels, alpha); }, {logits}));
            record("weighted_ce_logits", num::grad_check([&] { return num::weighted_ce_logits(logits, labels, alpha); }, {logits}));
        }
    }
    std::vector<LayerCheck> out;
    for (const auto& n : order) out.push_back(acc[n]);
    return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    data::detail::write_file(path, text);
}

inline std::string loss_log(const std::vector<double>& curve) {
    std::string s;
    char buf[64];
    for (std::size_t e = 0; e < curve.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu %.9g\n", e + 1, curve[e]);
        s += buf;
    }
    return s;
}

inline std::string safe_name(std::string s) {
    for (auto& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    return s;
}

/// Split holding out `user`, or every trial in train when `user` is empty.
inline data::Split split_for(const std::vector<data::RawTrial>& raw, const std::string& user) {
    data::Split s;
    s.test_user = user;
    bool seen = user.empty();
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (!user.empty() && raw[i].user == user) {
            s.test.push_back(i);
            seen = true;
        } else {
            s.train.push_back(i);
        }
    }
    if (!seen) throw ContractError("no trials for user '" + user + "'");
    if (s.train.empty()) throw ContractError("holding out '" + user + "' leaves no training trials");
    return s;
}

}  // namespace detail

struct Streams {
    std::ostream& out;
    std::ostream& err;
};

inline int cmd_gen_data(std::uint64_t seed, const fs::path& out, std::size_t users, std::size_t trials, std::size_t classes,
                        const Streams& io) {
    data::SynthConfig cfg;
    cfg.seed = seed;
    cfg.num_users = users;
    cfg.trials_per_user = trials;
    cfg.num_classes = classes;
    const auto m = data::write_synthetic_dataset(cfg, out);
    io.out << "wrote " << m.entries.size() << " trials to " << out.string() << '\n';
    return 0;
}

inline int cmd_train(const fs::path& manifest, const std::string& variant, const std::string& config, const fs::path& out,
                     const std::string& fold_user, bool verbose, const Streams& io) {
    const auto m = data::read_manifest(manifest);
    auto cfg = config.empty() ? train::TrainConfig{} : train::read_train_config(config);
    if (!variant.empty()) cfg.variant = model::parse_variant(variant);
    const auto raw = data::load_all(m, {model::uses_visual(cfg.variant), model::uses_kinematics(cfg.variant)});
    const auto fold = data::make_fold(raw, detail::split_for(raw, fold_user));
    train::Logger log;
    if (verbose) log = [&io](const std::string& s) { io.err << s << '\n'; };
    const auto r = train::run_training(fold.train, m.num_classes, cfg, Rng(cfg.seed).stream("train"), log);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    model::save_checkpoint(out.string(), r.params);
    detail::write_text(out.string() + ".loss", detail::loss_log(r.loss_curve));
    io.out << "trained " << model::variant_name(cfg.variant) << " on " << fold.train.size() << " trials, final loss "
           << (r.loss_curve.empty() ? std::string("n/a") : std::to_string(r.loss_curve.back())) << '\n';
    return 0;
}

inline int cmd_eval(const fs::path& manifest, const fs::path& checkpoint, const std::string& fold_user, const fs::path& report,
                    const std::string& pred_dir, const Streams& io) {
    const auto m = data::read_manifest(manifest);
    const auto params = model::load_checkpoint(checkpoint.string());
    const auto v = params.config.variant;
    if (params.config.num_classes != m.num_classes) {
        throw ContractError("checkpoint has " + std::to_string(params.config.num_classes) + " classes, manifest " +
                            std::to_string(m.num_classes));
    }
    std::vector<Trial> tests;
    for (const auto& e : m.entries) {
        if (e.user != fold_user) continue;
        tests.push_back(data::normalize_trial(data::load_raw_trial(m, e, {model::uses_visual(v), model::uses_kinematics(v)}),
                                              params.kin_stats));
    }
    if (tests.empty()) throw ContractError("no trials for user '" + fold_user + "'");
    std::vector<std::vector<int>> preds;
    const auto r = train::evaluate_split(tests, params, &preds);
    if (report.has_parent_path()) fs::create_directories(report.parent_path());
    metrics::write_report(report.string(), r);
    if (!pred_dir.empty()) {
        for (std::size_t i = 0; i < tests.size(); ++i) {
            const auto stem = fs::path(pred_dir) / detail::safe_name(tests[i].id);
            detail::write_text(stem.string() + ".pred", format_labels(preds[i]));
            detail::write_text(stem.string() + ".gt", format_labels(tests[i].labels));
        }
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "accuracy %.2f edit %.2f over %zu trials\n", r.frame_accuracy, r.edit_score, r.trials);
    io.out << buf;
    return 0;
}

inline int cmd_ablate(const fs::path& manifest, const std::string& config, const fs::path& out, const std::string& artifacts,
                      bool verbose, const Streams& io) {
    const auto m = data::read_manifest(manifest);
    const auto base = config.empty() ? train::TrainConfig{} : train::read_train_config(config);
    const auto raw = data::load_all(m);
    std::vector<train::RunResult> runs;
    train::Logger log;
    if (verbose) log = [&io](const std::string& s) { io.err << s << '\n'; };
    const auto palette = metrics::default_palette(m.num_classes);
    for (auto v : model::kAllVariants) {
        auto cfg = base;
        cfg.variant = v;
        train::CellHook hook;
        if (!artifacts.empty()) {
            hook = [&](const train::Cell& cell, const train::ModelParams& p, const data::Fold& fold,
                       const std::vector<std::vector<int>>& preds) {
                const auto stem = fs::path(artifacts) / (detail::safe_name(std::string(model::variant_name(v))) + "_r" +
                                                         std::to_string(cell.repeat + 1) + "_" + detail::safe_name(cell.test_user));
                fs::create_directories(stem.parent_path());
                model::save_checkpoint(stem.string() + ".ckpt", p);
                data::detail::write_file(stem.string() + ".ppm", metrics::render_ribbon(preds.front(), fold.test.front().labels, palette));
            };
        }
        runs.push_back(train::cross_validate(raw, m.num_classes, cfg, log, hook));
    }
    const auto table = report_table(runs);
    detail::write_text(out, table);
    io.out << table;
    return 0;
}

inline int cmd_gradcheck(std::uint64_t seed, const Streams& io) {
    bool ok = true;
    for (const auto& c : gradcheck_suite(seed)) {
        const bool pass = c.max_rel_error <= kGradTolerance;
        ok = ok && pass;
        char buf[128];
        std::snprintf(buf, sizeof buf, "%-20s max_rel_error %.3e over %zu entries  %s\n", c.layer.c_str(), c.max_rel_error,
                      c.entries, pass ? "ok" : "FAIL");
        io.out << buf;
    }
    if (!ok) io.err << "gradcheck: relative error above " << kGradTolerance << '\n';
    return ok ? 0 : 1;
}

inline int cmd_ribbon(const fs::path& pred, const fs::path& gt, const fs::path& out, std::size_t classes, const Streams& io) {
    const auto p = read_labels(pred), g = read_labels(gt);
    if (p.size() != g.size()) {
        throw ContractError("prediction has " + std::to_string(p.size()) + " frames, ground truth " + std::to_string(g.size()));
    }
    std::size_t K = classes;
    if (K == 0) K = static_cast<std::size_t>(std::max(*std::max_element(p.begin(), p.end()), *std::max_element(g.begin(), g.end()))) + 1;
    detail::write_text(out, metrics::render_ribbon(p, g, metrics::default_palette(K)));
    io.out << "wrote " << out.string() << '\n';
    return 0;
}

/// Parses argv and runs one command.  Every failure becomes a one-line
/// diagnostic on `err` and a nonzero exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Multi-modal relational graph gesture segmentation", "mrgseq"};
    app.require_subcommand(1);
    const Streams io{out, err};

    std::uint64_t seed = 0;
    std::string out_path, manifest, variant, config, fold_user, checkpoint, report, pred, gt, pred_dir, artifacts;
    std::size_t users = 4, trials = 3, classes = 6, ribbon_classes = 0;
    bool verbose = false;

    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
    gen->add_option("--seed", seed, "generator seed")->required();
    gen->add_option("--out", out_path, "output directory")->required();
    gen->add_option("--users", users, "number of users")->check(CLI::PositiveNumber);
    gen->add_option("--trials-per-user", trials, "trials per user")->check(CLI::PositiveNumber);
    gen->add_option("--classes", classes, "gesture classes")->check(CLI::Range(2, 1000));

    auto* tr = app.add_subcommand("train", "train one variant and write a checkpoint");
    tr->add_option("--manifest", manifest, "dataset manifest")->required();
    tr->add_option("--variant", variant, "variant name (overrides the config)");
    tr->add_option("--config", config, "training config file");
    tr->add_option("--out", out_path, "checkpoint path; the loss log goes to <out>.loss")->required();
    tr->add_option("--fold-user", fold_user, "hold out this user");
    tr->add_flag("--verbose", verbose, "log every epoch to stderr");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on one user's trials");
    ev->add_option("--manifest", manifest, "dataset manifest")->required();
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    ev->add_option("--fold-user", fold_user, "user whose trials are evaluated")->required();
    ev->add_option("--report", report, "report path")->required();
    ev->add_option("--pred-dir", pred_dir, "also write per-trial .pred/.gt label files here");

    auto* ab = app.add_subcommand("ablate", "cross-validate all six variants and write the table");
    ab->add_option("--manifest", manifest, "dataset manifest")->required();
    ab->add_option("--config", config, "training config file");
    ab->add_option("--out", out_path, "table path")->required();
    ab->add_option("--artifacts", artifacts, "write per-cell checkpoints and ribbons here");
    ab->add_flag("--verbose", verbose, "log progress to stderr");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every layer type");
    gc->add_option("--seed", seed, "seed of the random configurations");

    auto* rb = app.add_subcommand("ribbon", "render prediction/ground-truth ribbons as PPM");
    rb->add_option("--pred", pred, "predicted labels, one per line")->required();
    rb->add_option("--gt", gt, "ground-truth labels, one per line")->required();
    rb->add_option("--out", out_path, "output .ppm")->required();
    rb->add_option("--classes", ribbon_classes, "palette size (default: largest label + 1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "mrgseq: " << msg << '\n';
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(seed, out_path, users, trials, classes, io);
        if (tr->parsed()) return cmd_train(manifest, variant, config, out_path, fold_user, verbose, io);
        if (ev->parsed()) return cmd_eval(manifest, checkpoint, fold_user, report, pred_dir, io);
        if (ab->parsed()) return cmd_ablate(manifest, config, out_path, artifacts, verbose, io);
        if (gc->parsed()) return cmd_gradcheck(seed, io);
        if (rb->parsed()) return cmd_ribbon(pred, gt, out_path, ribbon_classes, io);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "mrgseq: " << msg << '\n';
        return 1;
    }
    return 1;
}

}  // namespace mrgseq::cli
