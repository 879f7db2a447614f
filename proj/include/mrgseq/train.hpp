#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mrgseq/data.hpp"
#include "mrgseq/metrics.hpp"
#include "mrgseq/model.hpp"
#include "mrgseq/num/rng.hpp"

namespace mrgseq::train {

using model::ModelParams;
using model::Variant;
using num::Rng;
using num::Tensor;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double learning_rate = 5e-3;
    double weight_decay = 5e-4;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    std::size_t repeats = 3;
    Variant variant = Variant::MRG;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    bool class_weighting = true;  // false trains with alpha = 1
    std::size_t batch_size = 1;   // trials averaged per Adam step; 0 = whole split
    num::ConvPrecision conv_precision = num::ConvPrecision::Single;
    /// Architecture; visual_dim and num_classes are overwritten from the data.
    model::ModelConfig model;

    void validate() const {
        if (!(learning_rate > 0) || !(epsilon > 0)) throw ConfigError("learning_rate and epsilon must be positive");
        if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0,1)");
        if (repeats < 1) throw ConfigError("repeats must be at least 1");
    }
};

/// `key = value` lines; `#` starts a comment.  Unknown keys are errors.
inline TrainConfig parse_train_config(std::string_view text, TrainConfig cfg = {}) {
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const auto where = "config line " + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            if (!data::detail::split_ws(line).empty()) throw ConfigError(where + ": expected key = value");
            continue;
        }
        const auto ktok = data::detail::split_ws(line.substr(0, eq));
        const auto vtok = data::detail::split_ws(line.substr(eq + 1));
        if (ktok.size() != 1 || vtok.size() != 1) throw ConfigError(where + ": expected key = value");
        const std::string key(ktok[0]);
        const std::string value(vtok[0]);
        auto real = [&] {
            double v = 0;
            auto res = std::from_chars(value.data(), value.data() + value.size(), v);
            if (res.ec != std::errc{} || res.ptr != value.data() + value.size() || !std::isfinite(v)) {
                throw ConfigError(where + ": bad number '" + value + "' for " + key);
            }
            return v;
        };
        auto count = [&] {
            unsigned long long v = 0;
            auto res = std::from_chars(value.data(), value.data() + value.size(), v);
            if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
                throw ConfigError(where + ": bad integer '" + value + "' for " + key);
            }
            return static_cast<std::uint64_t>(v);
        };
        if (key == "learning_rate") cfg.learning_rate = real();
        else if (key == "weight_decay") cfg.weight_decay = real();
        else if (key == "epochs") cfg.epochs = count();
        else if (key == "seed") cfg.seed = count();
        else if (key == "repeats") cfg.repeats = count();
        else if (key == "beta1") cfg.beta1 = real();
        else if (key == "beta2") cfg.beta2 = real();
        else if (key == "epsilon") cfg.epsilon = real();
        else if (key == "variant") {
            try {
                cfg.variant = model::parse_variant(value);
            } catch (const std::exception& e) {
                throw ConfigError(where + ": " + e.what());
            }
        } else if (key == "class_weighting") {
            if (value == "on" || value == "true" || value == "1") cfg.class_weighting = true;
            else if (value == "off" || value == "false" || value == "0") cfg.class_weighting = false;
            else throw ConfigError(where + ": class_weighting must be on or off");
        } else if (key == "kernel_width") cfg.model.tcn.kernel_width = count();
        else if (key == "tcn_dropout") cfg.model.tcn.dropout = real();
        else if (key == "graph_dropout") cfg.model.graph_dropout = real();
        else if (key == "num_bases") cfg.model.num_bases = count();
        else if (key == "batch_size") cfg.batch_size = count();
        else if (key == "conv_precision") {
            if (value == "single") cfg.conv_precision = num::ConvPrecision::Single;
            else if (value == "double") cfg.conv_precision = num::ConvPrecision::Double;
            else throw ConfigError(where + ": conv_precision must be single or double");
        }
        else throw ConfigError(where + ": unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

inline TrainConfig read_train_config(const std::string& path, TrainConfig base = {}) {
    try {
        return parse_train_config(data::detail::read_file(path), std::move(base));
    } catch (const data::ParseError& e) {
        throw ConfigError(e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::size_t step = 0;
};

/// One Adam update over the named blocks.  Decoupled weight decay shrinks
/// each block before the moment-based step.  A block that received no
/// gradient is treated as having a zero gradient.
inline void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& st, const TrainConfig& cfg) {
    if (st.m.empty()) {
        for (const auto& [name, t] : params) {
            st.m.emplace_back(t.size(), 0.0);
            st.v.emplace_back(t.size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) throw ContractError("adam_step: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& t = params[i].second;
        if (!t.has_grad()) continue;
        for (double g : t.grad())
            if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in parameter block '" + params[i].first + "'");
    }
    ++st.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    const double decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto t = params[i].second;
        auto w = t.mutable_data();
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.size() != w.size()) throw ContractError("adam_step: block '" + params[i].first + "' changed size");
        const bool has = t.has_grad();
        const auto g = has ? t.grad() : std::span<const double>{};
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            w[j] *= decay;
            w[j] -= cfg.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

using Logger = std::function<void(const std::string&)>;

struct TrainResult {
    ModelParams params;
    std::vector<double> loss_curve;  // mean per-trial loss of each epoch
};

/// Architecture for this data: class count and visual width come from the trials.
inline model::ModelConfig resolve_model_config(const TrainConfig& cfg, const std::vector<Trial>& trials, std::size_t K) {
    auto mc = cfg.model;
    mc.variant = cfg.variant;
    mc.num_classes = K;
    if (model::uses_visual(cfg.variant)) {
        if (trials.empty() || !trials.front().has_visual()) throw ContractError("variant needs visual features");
        mc.visual_dim = trials.front().visual.dim(1);
    }
    return mc;
}

inline std::vector<double> split_class_weights(const std::vector<Trial>& trials, std::size_t K) {
    std::vector<std::span<const int>> seqs;
    for (const auto& t : trials) seqs.emplace_back(t.labels);
    return model::class_weights(seqs, K);
}

/// `rng` seeds initialisation, shuffling and dropout through named streams.
inline TrainResult run_training(const std::vector<Trial>& trials, std::size_t K, const TrainConfig& cfg, const Rng& rng,
                                const Logger& log = {}) {
    cfg.validate();
    if (trials.empty()) throw ContractError("run_training: empty training set");
    num::ConvPrecisionGuard precision(cfg.conv_precision);
    for (const auto& t : trials) t.validate(K);
    TrainResult out;
    out.params = model::init_params(resolve_model_config(cfg, trials, K), rng);
    auto& p = out.params;
    p.class_weights = cfg.class_weighting ? split_class_weights(trials, K) : std::vector<double>(K, 1.0);
    if (model::uses_kinematics(cfg.variant)) {
        p.kin_stats = model::KinStats{trials.front().kin_left.stats, trials.front().kin_right.stats};
    }
    const auto named = p.named_parameters();
    AdamState state;
    std::vector<std::size_t> order(trials.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto shuffle = rng.stream("train/shuffle", epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        auto dropout = rng.stream("train/dropout", epoch);
        double total = 0.0;
        const std::size_t B = cfg.batch_size == 0 ? order.size() : cfg.batch_size;
        for (std::size_t start = 0; start < order.size(); start += B) {
            const auto stop = std::min(order.size(), start + B);
            for (auto [name, t] : named) t.zero_grad();
            for (std::size_t i = start; i < stop; ++i) {
                const auto& trial = trials[order[i]];
                const auto logits = model::forward_logits(trial, p, {true, &dropout});
                const auto loss = num::weighted_ce_logits(logits, trial.labels, p.class_weights);
                total += loss.item();
                num::backward(stop - start == 1 ? loss : num::scale(loss, 1.0 / static_cast<double>(stop - start)));
            }
            adam_step(named, state, cfg);
        }
        out.loss_curve.push_back(total / static_cast<double>(trials.size()));
        if (log) {
            char buf[96];
            std::snprintf(buf, sizeof buf, "epoch %zu/%zu loss %.6f", epoch + 1, cfg.epochs, out.loss_curve.back());
            log(buf);
        }
    }
    for (auto [name, t] : named) t.zero_grad();
    return out;
}

inline std::vector<int> predict(const Trial& trial, const ModelParams& p) {
    num::NoGradGuard guard;
    return model::argmax_rows(model::forward_logits(trial, p));
}

/// Dropout off, no tape; metrics pooled as in metrics::evaluate_sequences.
inline metrics::EvalReport evaluate_split(const std::vector<Trial>& trials, const ModelParams& p,
                                          std::vector<std::vector<int>>* predictions = nullptr) {
    std::vector<std::vector<int>> preds, gts;
    for (const auto& t : trials) {
        preds.push_back(predict(t, p));
        gts.push_back(t.labels);
    }
    auto r = metrics::evaluate_sequences(preds, gts, p.config.num_classes);
    if (predictions) *predictions = std::move(preds);
    return r;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct Cell {
    std::size_t repeat = 0;
    std::string test_user;
    metrics::EvalReport report;
    std::vector<double> loss_curve;
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return r;
}

struct RunResult {
    Variant variant = Variant::MRG;
    std::vector<Cell> cells;  // repeat-major, folds in split order
    MeanStd accuracy;
    MeanStd edit;
    std::vector<double> loss_curve;  // mean over cells, per epoch

    void aggregate() {
        std::vector<double> acc, ed;
        for (const auto& c : cells) {
            acc.push_back(c.report.frame_accuracy);
            ed.push_back(c.report.edit_score);
        }
        accuracy = mean_std(acc);
        edit = mean_std(ed);
        loss_curve.clear();
        if (cells.empty()) return;
        loss_curve.assign(cells.front().loss_curve.size(), 0.0);
        for (const auto& c : cells)
            for (std::size_t e = 0; e < loss_curve.size() && e < c.loss_curve.size(); ++e)
                loss_curve[e] += c.loss_curve[e] / static_cast<double>(cells.size());
    }
};

/// Seed stream of one repeat; folds inside a repeat share it, so every
/// fold starts from the same initialisation.
inline Rng repeat_rng(const TrainConfig& cfg, std::size_t repeat) { return Rng(cfg.seed).stream("repeat", repeat); }

/// Called after each (repeat, fold) with the trained parameters and the
/// fold it was evaluated on.
using CellHook = std::function<void(const Cell&, const ModelParams&, const data::Fold&,
                                    const std::vector<std::vector<int>>& predictions)>;

inline RunResult cross_validate(const std::vector<data::RawTrial>& raw, std::size_t K, const TrainConfig& cfg,
                                const Logger& log = {}, const CellHook& hook = {}) {
    cfg.validate();
    num::ConvPrecisionGuard precision(cfg.conv_precision);
    std::vector<std::string> users;
    for (const auto& r : raw) users.push_back(r.user);
    const auto splits = data::louo_splits(users);
    RunResult result;
    result.variant = cfg.variant;
    for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
        for (const auto& split : splits) {
            const auto fold = data::make_fold(raw, split);
            Logger cell_log;
            if (log) {
                const auto prefix = std::string(model::variant_name(cfg.variant)) + " repeat " + std::to_string(rep + 1) +
                                    " fold " + split.test_user + ": ";
                cell_log = [&log, prefix](const std::string& s) { log(prefix + s); };
            }
            auto trained = run_training(fold.train, K, cfg, repeat_rng(cfg, rep), cell_log);
            std::vector<std::vector<int>> preds;
            Cell cell{rep, split.test_user, evaluate_split(fold.test, trained.params, &preds), trained.loss_curve};
            if (log) {
                char buf[128];
                std::snprintf(buf, sizeof buf, "accuracy %.2f edit %.2f", cell.report.frame_accuracy, cell.report.edit_score);
                cell_log(buf);
            }
            if (hook) hook(cell, trained.params, fold, preds);
            result.cells.push_back(std::move(cell));
        }
    }
    result.aggregate();
    return result;
}

/// Loads only the modalities the variant consumes.
inline RunResult cross_validate(const data::DatasetManifest& m, const TrainConfig& cfg, const Logger& log = {},
                                const CellHook& hook = {}) {
    const auto raw = data::load_all(m, {model::uses_visual(cfg.variant), model::uses_kinematics(cfg.variant)});
    return cross_validate(raw, m.num_classes, cfg, log, hook);
}

}  // namespace mrgseq::train
