#include <gtest/gtest.h>

#include <functional>
#include <map>
#include <sstream>

#include "mrgseq/metrics.hpp"
#include "mrgseq/num/rng.hpp"

using namespace mrgseq;
using namespace mrgseq::metrics;
using mrgseq::num::Rng;

namespace {

// Full-table recursion with memoisation; deliberately unlike the rolling-row
// implementation under test.
std::size_t oracle_levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    std::function<std::size_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::size_t {
        if (i == 0) return j;
        if (j == 0) return i;
        auto key = std::make_pair(i, j);
        if (auto it = memo.find(key); it != memo.end()) return it->second;
        std::size_t best = std::min(d(i - 1, j) + 1, d(i, j - 1) + 1);
        best = std::min(best, d(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0u : 1u));
        return memo[key] = best;
    };
    return d(a.size(), b.size());
}

std::vector<int> oracle_runs(const std::vector<int>& frames) {
    std::vector<int> out;
    for (std::size_t t = 0; t < frames.size(); ++t)
        if (t == 0 || frames[t] != frames[t - 1]) out.push_back(frames[t]);
    return out;
}

std::vector<int> random_frames(Rng& rng, std::size_t max_len, std::size_t alphabet) {
    std::vector<int> v(1 + rng.below(max_len));
    for (auto& x : v) x = static_cast<int>(rng.below(alphabet));
    return v;
}

}  // namespace

TEST(FrameAccuracy, Examples) {
    std::vector<int> a{1, 2, 3, 4}, b{0, 0, 0, 0}, c{1, 2, 0, 0};
    EXPECT_EQ(frame_accuracy(a, a), 100.0);
    EXPECT_EQ(frame_accuracy(a, b), 0.0);
    EXPECT_EQ(frame_accuracy(c, a), 50.0);
    std::vector<int> short_seq{1};
    EXPECT_THROW(frame_accuracy(short_seq, a), ContractError);
}

TEST(SegmentLabels, Examples) {
    std::vector<int> f{1, 1, 2, 2, 2, 1};
    EXPECT_EQ(segment_labels(f), (SegmentSeq{{1, 0, 2}, {2, 2, 5}, {1, 5, 6}}));
    std::vector<int> k(7, 3);
    EXPECT_EQ(segment_labels(k).size(), 1u);
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        auto v = random_frames(rng, 30, 3);
        EXPECT_EQ(expand_segments(segment_labels(v)), v);
    }
}

TEST(EditScore, Examples) {
    std::vector<int> a{0, 0, 1, 1, 2};
    EXPECT_EQ(edit_score(a, a), 100.0);
    std::vector<int> pred{0, 0, 0, 0}, gt{0, 0, 1, 1};
    EXPECT_EQ(edit_score(pred, gt), 50.0);
    std::vector<int> stretched;
    for (int x : a) stretched.insert(stretched.end(), 3, x);
    std::vector<int> other{0, 2, 2, 1, 1};
    std::vector<int> other3;
    for (int x : other) other3.insert(other3.end(), 3, x);
    EXPECT_EQ(edit_score(other, a), edit_score(other3, stretched));
}

TEST(EditScore, MatchesBruteForceOracle) {
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        const auto alphabet = 2 + rng.below(9);
        auto a = random_frames(rng, 15, alphabet), b = random_frames(rng, 15, alphabet);
        const auto ra = oracle_runs(a), rb = oracle_runs(b);
        const double expect =
            std::max(0.0, 100.0 * (1.0 - static_cast<double>(oracle_levenshtein(ra, rb)) /
                                             static_cast<double>(std::max(ra.size(), rb.size()))));
        EXPECT_EQ(edit_score(a, b), expect) << "pair " << i;
        EXPECT_EQ(edit_score(a, b), edit_score(b, a));
        EXPECT_EQ(edit_score(a, a), 100.0);
        EXPECT_EQ(frame_accuracy(a, a), 100.0);
    }
}

TEST(PerClassAccuracy, AbsentAndConfusionRows) {
    std::vector<int> gt{0, 0, 1, 1, 1}, pred{0, 1, 1, 1, 0};
    auto acc = per_class_accuracy(pred, gt, 3);
    EXPECT_EQ(*acc[0], 50.0);
    EXPECT_NEAR(*acc[1], 200.0 / 3, 1e-12);
    EXPECT_FALSE(acc[2].has_value());
    EXPECT_EQ(*per_class_accuracy(gt, gt, 3)[1], 100.0);

    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        std::vector<int> g(40), p(40);
        for (std::size_t t = 0; t < 40; ++t) {
            g[t] = static_cast<int>(rng.below(4));
            p[t] = static_cast<int>(rng.below(4));
        }
        const auto m = confusion(p, g, 5);
        const auto a = per_class_accuracy(p, g, 5);
        for (std::size_t c = 0; c < 5; ++c) {
            std::size_t support = 0, hit = 0;
            for (std::size_t t = 0; t < 40; ++t)
                if (g[t] == static_cast<int>(c)) {
                    ++support;
                    hit += p[t] == g[t];
                }
            std::size_t row = 0;
            for (auto n : m[c]) row += n;
            EXPECT_EQ(row, support);
            if (support == 0)
                EXPECT_FALSE(a[c].has_value());
            else
                EXPECT_DOUBLE_EQ(*a[c], 100.0 * static_cast<double>(hit) / static_cast<double>(support));
        }
    }
}

TEST(EvalReport, AccuracyEqualsConfusionTrace) {
    Rng rng(4);
    std::vector<std::vector<int>> preds, gts;
    for (int i = 0; i < 4; ++i) {
        auto g = random_frames(rng, 60, 4);
        std::vector<int> p(g.size());
        for (std::size_t t = 0; t < g.size(); ++t) p[t] = rng.uniform() < 0.7 ? g[t] : static_cast<int>(rng.below(4));
        preds.push_back(p);
        gts.push_back(g);
    }
    auto r = evaluate_sequences(preds, gts, 4);
    double trace = 0, total = 0;
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b) {
            total += static_cast<double>(r.confusion[a][b]);
            if (a == b) trace += static_cast<double>(r.confusion[a][b]);
        }
    EXPECT_NEAR(r.frame_accuracy, 100.0 * trace / total, 1e-9);
    double edit = 0;
    for (std::size_t i = 0; i < 4; ++i) edit += edit_score(preds[i], gts[i]) / 4;
    EXPECT_NEAR(r.edit_score, edit, 1e-12);

    std::ostringstream os;
    write_report(os, r);
    EXPECT_NE(os.str().find("frame_accuracy = "), std::string::npos);
    EXPECT_NE(os.str().find("confusion.0 = "), std::string::npos);
}

TEST(EvalReport, AbsentClassesSerialised) {
    std::vector<std::vector<int>> p{{0, 0, 1}}, g{{0, 0, 0}};
    std::ostringstream os;
    write_report(os, evaluate_sequences(p, g, 3));
    EXPECT_NE(os.str().find("class_accuracy.1 = absent"), std::string::npos) << os.str();
}

TEST(RenderRibbon, Layout) {
    std::vector<int> gt{0, 1, 1, 2}, pred{0, 1, 2, 2};
    const auto pal = default_palette(3);
    const auto img = render_ribbon(pred, gt, pal, 2);
    const std::string header = "P6\n4 4\n255\n";
    ASSERT_EQ(img.substr(0, header.size()), header);
    ASSERT_EQ(img.size(), header.size() + 4 * 4 * 3);
    auto pixel = [&](std::size_t row, std::size_t col) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(img.data() + header.size() + (row * 4 + col) * 3);
        return Rgb{p[0], p[1], p[2]};
    };
    EXPECT_EQ(pixel(0, 2), pal[1]);
    EXPECT_EQ(pixel(1, 2), pal[1]);
    EXPECT_EQ(pixel(2, 2), pal[2]);
    EXPECT_EQ(pixel(3, 3), pal[2]);
    EXPECT_EQ(render_ribbon(pred, gt, pal, 2), img);

    const auto same = render_ribbon(gt, gt, pal, 2);
    EXPECT_EQ(same.substr(header.size(), 24), same.substr(header.size() + 24, 24));
}

TEST(RenderRibbon, UnknownClassRejected) {
    std::vector<int> gt{0, 5};
    EXPECT_THROW(render_ribbon(gt, gt, default_palette(3)), ContractError);
}
