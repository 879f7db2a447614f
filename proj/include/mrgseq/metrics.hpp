#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mrgseq/num/tensor.hpp"

namespace mrgseq::metrics {

using Labels = std::span<const int>;

/// Maximal run of one label over [start, end).
struct Segment {
    int label;
    std::size_t start;
    std::size_t end;

    bool operator==(const Segment&) const = default;
};

using SegmentSeq = std::vector<Segment>;

namespace detail {

inline void require_pair(Labels pred, Labels gt, const char* op) {
    if (pred.size() != gt.size()) {
        throw ContractError(std::string(op) + ": prediction has " + std::to_string(pred.size()) +
                            " frames, ground truth has " + std::to_string(gt.size()));
    }
    if (gt.empty()) throw ContractError(std::string(op) + ": empty sequences");
}

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

}  // namespace detail

inline double frame_accuracy(Labels pred, Labels gt) {
    detail::require_pair(pred, gt, "frame_accuracy");
    std::size_t hit = 0;
    for (std::size_t t = 0; t < gt.size(); ++t) hit += pred[t] == gt[t];
    return 100.0 * static_cast<double>(hit) / static_cast<double>(gt.size());
}

inline SegmentSeq segment_labels(Labels frames) {
    SegmentSeq out;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        if (out.empty() || out.back().label != frames[t])
            out.push_back({frames[t], t, t + 1});
        else
            out.back().end = t + 1;
    }
    return out;
}

inline std::vector<int> expand_segments(const SegmentSeq& segs) {
    std::vector<int> out;
    for (const auto& s : segs) out.insert(out.end(), s.end - s.start, s.label);
    return out;
}

/// Unit-cost insert/delete/substitute distance.
inline std::size_t levenshtein(std::span<const int> a, std::span<const int> b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

/// Segmental edit score in [0, 100]: Levenshtein distance between the run
/// label sequences, normalised by the longer one.
inline double edit_score(Labels pred, Labels gt) {
    if (pred.empty() || gt.empty()) throw ContractError("edit_score: empty sequences");
    auto labels_of = [](Labels frames) {
        std::vector<int> out;
        for (const auto& s : segment_labels(frames)) out.push_back(s.label);
        return out;
    };
    const auto p = labels_of(pred), g = labels_of(gt);
    const double d = static_cast<double>(levenshtein(p, g));
    const double n = static_cast<double>(std::max(p.size(), g.size()));
    return std::max(0.0, 100.0 * (1.0 - d / n));
}

/// K x K counts, row = ground truth, column = prediction.
using Confusion = std::vector<std::vector<std::size_t>>;

inline Confusion confusion(Labels pred, Labels gt, std::size_t K) {
    detail::require_pair(pred, gt, "confusion");
    Confusion m(K, std::vector<std::size_t>(K, 0));
    for (std::size_t t = 0; t < gt.size(); ++t) {
        if (gt[t] < 0 || pred[t] < 0 || static_cast<std::size_t>(gt[t]) >= K || static_cast<std::size_t>(pred[t]) >= K) {
            throw ContractError("confusion: label outside [0," + std::to_string(K) + ") at frame " + std::to_string(t));
        }
        ++m[static_cast<std::size_t>(gt[t])][static_cast<std::size_t>(pred[t])];
    }
    return m;
}

/// Recall per class; classes with no ground-truth support are absent (nullopt).
inline std::vector<std::optional<double>> per_class_accuracy(const Confusion& m) {
    std::vector<std::optional<double>> out(m.size());
    for (std::size_t c = 0; c < m.size(); ++c) {
        std::size_t support = 0;
        for (auto n : m[c]) support += n;
        if (support > 0) out[c] = 100.0 * static_cast<double>(m[c][c]) / static_cast<double>(support);
    }
    return out;
}

inline std::vector<std::optional<double>> per_class_accuracy(Labels pred, Labels gt, std::size_t K) {
    return per_class_accuracy(confusion(pred, gt, K));
}

/// Metrics for one evaluation split.  Frame accuracy and per-class accuracy
/// pool frames across trials (so they agree with `confusion`); the edit score
/// is the mean of per-trial scores.
struct EvalReport {
    double frame_accuracy = 0.0;
    double edit_score = 0.0;
    std::vector<std::optional<double>> per_class;
    Confusion confusion;
    std::size_t trials = 0;
    std::size_t frames = 0;
};

inline EvalReport evaluate_sequences(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& gts,
                                     std::size_t K) {
    if (preds.size() != gts.size()) throw ContractError("evaluate_sequences: prediction and label counts differ");
    if (gts.empty()) throw ContractError("evaluate_sequences: no trials");
    EvalReport r;
    r.confusion.assign(K, std::vector<std::size_t>(K, 0));
    double edit = 0.0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
        const auto m = confusion(preds[i], gts[i], K);
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t b = 0; b < K; ++b) r.confusion[a][b] += m[a][b];
        edit += edit_score(preds[i], gts[i]);
        r.frames += gts[i].size();
    }
    std::size_t hit = 0;
    for (std::size_t c = 0; c < K; ++c) hit += r.confusion[c][c];
    r.frame_accuracy = 100.0 * static_cast<double>(hit) / static_cast<double>(r.frames);
    r.edit_score = edit / static_cast<double>(gts.size());
    r.per_class = per_class_accuracy(r.confusion);
    r.trials = gts.size();
    return r;
}

/// Flat `metric = value` listing.
inline void write_report(std::ostream& os, const EvalReport& r) {
    os << "frame_accuracy = " << detail::fmt("%.6f", r.frame_accuracy) << '\n';
    os << "edit_score = " << detail::fmt("%.6f", r.edit_score) << '\n';
    os << "trials = " << r.trials << '\n';
    os << "frames = " << r.frames << '\n';
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        os << "class_accuracy." << c << " = "
           << (r.per_class[c] ? detail::fmt("%.6f", *r.per_class[c]) : std::string("absent")) << '\n';
    }
    for (std::size_t a = 0; a < r.confusion.size(); ++a) {
        os << "confusion." << a << " =";
        for (auto n : r.confusion[a]) os << ' ' << n;
        os << '\n';
    }
}

inline void write_report(const std::string& path, const EvalReport& r) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write report " + path);
    write_report(os, r);
}

// ---------------------------------------------------------------------------
// Ribbons
// ---------------------------------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;

/// Deterministic colour for class `c`: a fixed table, then a hashed colour.
inline Rgb class_colour(std::size_t c) {
    static constexpr Rgb table[] = {{200, 200, 200}, {31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                    {214, 39, 40},   {148, 103, 189}, {140, 86, 75},  {227, 119, 194},
                                    {127, 127, 127}, {188, 189, 34},  {23, 190, 207}, {0, 0, 0}};
    if (c < std::size(table)) return table[c];
    std::uint64_t h = 0x9e3779b97f4a7c15ULL * (c + 1);
    h ^= h >> 29;
    return {static_cast<std::uint8_t>(h), static_cast<std::uint8_t>(h >> 8), static_cast<std::uint8_t>(h >> 16)};
}

inline std::vector<Rgb> default_palette(std::size_t K) {
    std::vector<Rgb> p(K);
    for (std::size_t c = 0; c < K; ++c) p[c] = class_colour(c);
    return p;
}

/// Binary PPM (P6): ground truth on the top band, prediction below, one
/// pixel column per frame.
inline std::string render_ribbon(Labels pred, Labels gt, const std::vector<Rgb>& palette, std::size_t band_height = 16) {
    detail::require_pair(pred, gt, "render_ribbon");
    if (band_height == 0) throw ContractError("render_ribbon: zero band height");
    auto colour = [&](int label) {
        if (label < 0 || static_cast<std::size_t>(label) >= palette.size()) {
            throw ContractError("render_ribbon: no palette entry for class " + std::to_string(label));
        }
        return palette[static_cast<std::size_t>(label)];
    };
    const auto T = gt.size();
    std::string out = "P6\n" + std::to_string(T) + " " + std::to_string(2 * band_height) + "\n255\n";
    const auto header = out.size();
    out.resize(header + T * 2 * band_height * 3);
    auto* px = reinterpret_cast<std::uint8_t*>(out.data() + header);
    for (std::size_t row = 0; row < 2 * band_height; ++row) {
        const auto seq = row < band_height ? gt : pred;
        for (std::size_t t = 0; t < T; ++t) {
            const auto c = colour(seq[t]);
            std::copy(c.begin(), c.end(), px + (row * T + t) * 3);
        }
    }
    return out;
}

}  // namespace mrgseq::metrics
