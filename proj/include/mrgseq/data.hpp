#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mrgseq/kinpre.hpp"
#include "mrgseq/model.hpp"
#include "mrgseq/num/rng.hpp"
#include "mrgseq/trial.hpp"

namespace mrgseq::data {

namespace fs = std::filesystem;
using num::Rng;
using num::Tensor;

/// Malformed input file; the message names the file position.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        const auto start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

inline double parse_double(std::string_view tok, std::size_t row, std::size_t col) {
    double v = 0.0;
    const auto* end = tok.data() + tok.size();
    auto res = std::from_chars(tok.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end || !std::isfinite(v)) {
        throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(col) + ": non-numeric token '" +
                         std::string(tok) + "'");
    }
    return v;
}

inline long parse_long(std::string_view tok, std::size_t row, const char* what) {
    long v = 0;
    const auto* end = tok.data() + tok.size();
    auto res = std::from_chars(tok.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw ParseError("line " + std::to_string(row) + ": bad " + what + " '" + std::string(tok) + "'");
    }
    return v;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kinematics text files
// ---------------------------------------------------------------------------

inline constexpr std::size_t kKinColumns = 76;
inline constexpr std::size_t kArmColumns = 19;
inline constexpr std::size_t kMasterColumns = 38;
inline constexpr std::size_t kLeftSlaveOffset = 38;   // columns 39-57, 1-based
inline constexpr std::size_t kRightSlaveOffset = 57;  // columns 58-76, 1-based

/// Full contents of one kinematics file.  Master-arm columns are carried
/// verbatim so files round-trip, but nothing downstream reads them.
struct KinematicsTable {
    std::vector<std::array<double, kMasterColumns>> master;
    kin::ArmKinematics left;
    kin::ArmKinematics right;

    std::size_t frames() const { return left.frames(); }
};

namespace detail {

inline void read_arm(const std::vector<std::string_view>& tok, std::size_t offset, std::size_t row,
                     kin::ArmKinematics& arm, const char* side) {
    auto v = [&](std::size_t i) { return parse_double(tok[offset + i], row, offset + i + 1); };
    arm.position.push_back({v(0), v(1), v(2)});
    kin::Mat3 R;
    for (std::size_t i = 0; i < 9; ++i) R[i] = v(3 + i);
    if (!kin::is_rotation(R)) {
        throw IngestionError("row " + std::to_string(row) + ": " + side + " arm rotation is not orthonormal");
    }
    arm.rotation.push_back(R);
    arm.linear_velocity.push_back({v(12), v(13), v(14)});
    arm.angular_velocity.push_back({v(15), v(16), v(17)});
    arm.gripper_angle.push_back(v(18));
}

inline void write_arm(std::string& out, const kin::ArmKinematics& arm, std::size_t t) {
    auto put = [&](double x) {
        out += ' ';
        out += format_double(x);
    };
    for (double x : arm.position[t]) put(x);
    for (double x : arm.rotation[t]) put(x);
    for (double x : arm.linear_velocity[t]) put(x);
    for (double x : arm.angular_velocity[t]) put(x);
    put(arm.gripper_angle[t]);
}

}  // namespace detail

/// Whitespace-separated rows of 76 numbers; rows are 1-based in diagnostics.
inline KinematicsTable parse_kinematics_text(std::string_view text) {
    KinematicsTable table;
    std::size_t row = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++row;
        const auto tok = detail::split_ws(line);
        if (tok.empty()) continue;
        if (tok.size() != kKinColumns) {
            throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(kKinColumns) +
                             " columns, found " + std::to_string(tok.size()));
        }
        std::array<double, kMasterColumns> master{};
        for (std::size_t i = 0; i < kMasterColumns; ++i) master[i] = detail::parse_double(tok[i], row, i + 1);
        table.master.push_back(master);
        detail::read_arm(tok, kLeftSlaveOffset, row, table.left, "left");
        detail::read_arm(tok, kRightSlaveOffset, row, table.right, "right");
    }
    if (table.master.empty()) throw ParseError("kinematics file has no rows");
    return table;
}

inline std::string write_kinematics_text(const KinematicsTable& table) {
    table.left.validate();
    table.right.validate();
    if (table.left.frames() != table.right.frames() || table.master.size() != table.left.frames()) {
        throw IngestionError("kinematics table columns have unequal lengths");
    }
    std::string out;
    for (std::size_t t = 0; t < table.frames(); ++t) {
        std::string line;
        for (double x : table.master[t]) {
            line += ' ';
            line += detail::format_double(x);
        }
        detail::write_arm(line, table.left, t);
        detail::write_arm(line, table.right, t);
        out.append(line, 1, std::string::npos);
        out += '\n';
    }
    return out;
}

inline KinematicsTable read_kinematics_table(const fs::path& path) {
    try {
        return parse_kinematics_text(detail::read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

inline std::pair<kin::ArmKinematics, kin::ArmKinematics> parse_kinematics_file(const fs::path& path) {
    auto t = read_kinematics_table(path);
    return {std::move(t.left), std::move(t.right)};
}

// ---------------------------------------------------------------------------
// Transcriptions
// ---------------------------------------------------------------------------

/// `start end G<k>` lines, 1-based inclusive source frames.  Unannotated
/// frames take class 0.  `frames` is the target-rate length; target frame i
/// reads source frame i * rate_ratio.
inline std::vector<int> parse_transcription_text(std::string_view text, std::size_t frames, std::size_t rate_ratio,
                                                 std::size_t num_classes) {
    if (rate_ratio == 0) throw ContractError("parse_transcription: zero rate ratio");
    const std::size_t source_frames = frames * rate_ratio;
    std::vector<int> source(source_frames, 0);
    std::vector<bool> covered(source_frames, false);
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        const auto tok = detail::split_ws(line);
        if (tok.empty()) continue;
        if (tok.size() != 3) throw ParseError("line " + std::to_string(line_no) + ": expected 'start end G<k>'");
        const long start = detail::parse_long(tok[0], line_no, "start frame");
        const long end = detail::parse_long(tok[1], line_no, "end frame");
        if (tok[2].size() < 2 || tok[2][0] != 'G') {
            throw ParseError("line " + std::to_string(line_no) + ": bad gesture token '" + std::string(tok[2]) + "'");
        }
        const long k = detail::parse_long(tok[2].substr(1), line_no, "gesture index");
        if (k < 0 || static_cast<std::size_t>(k) >= num_classes) {
            throw ParseError("line " + std::to_string(line_no) + ": gesture G" + std::to_string(k) + " outside [0," +
                             std::to_string(num_classes) + ")");
        }
        if (start < 1 || end < start) throw ParseError("line " + std::to_string(line_no) + ": bad frame range");
        if (static_cast<std::size_t>(start) > source_frames) {
            throw ParseError("line " + std::to_string(line_no) + ": range starts after the recording ends");
        }
        const auto last = std::min(static_cast<std::size_t>(end), source_frames);
        for (auto f = static_cast<std::size_t>(start) - 1; f < last; ++f) {
            if (covered[f]) throw ParseError("line " + std::to_string(line_no) + ": overlaps an earlier range at frame " +
                                             std::to_string(f + 1));
            covered[f] = true;
            source[f] = static_cast<int>(k);
        }
    }
    std::vector<int> out(frames);
    for (std::size_t i = 0; i < frames; ++i) out[i] = source[i * rate_ratio];
    return out;
}

/// Inverse of parse_transcription at ratio 1; background runs are left as gaps.
inline std::string write_transcription_text(std::span<const int> labels) {
    std::string out;
    std::size_t t = 0;
    while (t < labels.size()) {
        auto e = t;
        while (e < labels.size() && labels[e] == labels[t]) ++e;
        if (labels[t] != 0) {
            out += std::to_string(t + 1) + ' ' + std::to_string(e) + " G" + std::to_string(labels[t]) + '\n';
        }
        t = e;
    }
    return out;
}

inline std::vector<int> parse_transcription(const fs::path& path, std::size_t frames, std::size_t rate_ratio,
                                            std::size_t num_classes) {
    try {
        return parse_transcription_text(detail::read_file(path), frames, rate_ratio, num_classes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Visual feature files: magic, u64 T, u64 D, row-major doubles
// ---------------------------------------------------------------------------

inline constexpr char kVisualMagic[8] = {'M', 'R', 'G', 'V', 'I', 'S', '0', '1'};

inline std::string write_visual_bytes(const Tensor& v) {
    if (v.rank() != 2) throw DimensionError("visual features must be [T, D]");
    std::string out(kVisualMagic, sizeof kVisualMagic);
    const std::uint64_t dims[2] = {v.dim(0), v.dim(1)};
    out.append(reinterpret_cast<const char*>(dims), sizeof dims);
    out.append(reinterpret_cast<const char*>(v.data().data()), v.size() * sizeof(double));
    return out;
}

inline Tensor parse_visual_bytes(std::string_view bytes, const std::string& name = "visual file") {
    if (bytes.size() < 24 || std::memcmp(bytes.data(), kVisualMagic, sizeof kVisualMagic) != 0) {
        throw ParseError(name + ": bad magic");
    }
    std::uint64_t dims[2];
    std::memcpy(dims, bytes.data() + 8, sizeof dims);
    if (dims[0] == 0 || dims[1] == 0 || bytes.size() != 24 + dims[0] * dims[1] * sizeof(double)) {
        throw ParseError(name + ": size does not match header [" + std::to_string(dims[0]) + "," +
                         std::to_string(dims[1]) + "]");
    }
    std::vector<double> v(dims[0] * dims[1]);
    std::memcpy(v.data(), bytes.data() + 24, v.size() * sizeof(double));
    for (double x : v)
        if (!std::isfinite(x)) throw ParseError(name + ": non-finite feature value");
    return Tensor({dims[0], dims[1]}, std::move(v));
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string id;
    std::string user;
    std::string kin;  // paths relative to the manifest directory; "-" if absent
    std::string vis;
    std::string transcript;
};

struct DatasetManifest {
    std::string task = "unnamed";
    std::size_t num_classes = 0;
    std::vector<std::string> gestures;
    double rate = 10.0;
    double source_rate = 30.0;
    std::vector<ManifestEntry> entries;
    fs::path dir;

    /// Users in order of first appearance.
    std::vector<std::string> users() const {
        std::vector<std::string> out;
        for (const auto& e : entries)
            if (std::find(out.begin(), out.end(), e.user) == out.end()) out.push_back(e.user);
        return out;
    }

    fs::path resolve(const std::string& rel) const { return dir / rel; }
};

inline DatasetManifest parse_manifest_text(std::string_view text, const fs::path& dir = {}) {
    DatasetManifest m;
    m.dir = dir;
    std::size_t line_no = 0, pos = 0;
    bool have_classes = false;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        const auto where = "manifest line " + std::to_string(line_no);
        if (!line.empty() && line.front() == '#') {
            line.remove_prefix(1);
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) continue;
            auto trim = [](std::string_view s) {
                const auto tok = detail::split_ws(s);
                std::string out;
                for (std::size_t i = 0; i < tok.size(); ++i) out += (i ? " " : "") + std::string(tok[i]);
                return out;
            };
            const auto key = trim(line.substr(0, eq));
            const auto value = trim(line.substr(eq + 1));
            if (key == "task") {
                m.task = value;
            } else if (key == "classes") {
                m.num_classes = static_cast<std::size_t>(detail::parse_long(value, line_no, "class count"));
                have_classes = true;
            } else if (key == "gestures") {
                for (auto t : detail::split_ws(value)) m.gestures.emplace_back(t);
            } else if (key == "rate" || key == "source_rate") {
                double v = 0;
                auto res = std::from_chars(value.data(), value.data() + value.size(), v);
                if (res.ec != std::errc{} || !(v > 0)) throw ParseError(where + ": bad " + key);
                (key == "rate" ? m.rate : m.source_rate) = v;
            }
            continue;
        }
        const auto tok = detail::split_ws(line);
        if (tok.empty()) continue;
        if (tok.size() != 5) throw ParseError(where + ": expected 'id user kin vis transcript'");
        m.entries.push_back({std::string(tok[0]), std::string(tok[1]), std::string(tok[2]), std::string(tok[3]),
                             std::string(tok[4])});
    }
    if (!have_classes || m.num_classes < 2) throw ParseError("manifest lacks a '# classes = K' header (K >= 2)");
    if (!m.gestures.empty() && m.gestures.size() != m.num_classes) {
        throw ParseError("manifest lists " + std::to_string(m.gestures.size()) + " gesture names for " +
                         std::to_string(m.num_classes) + " classes");
    }
    if (m.entries.empty()) throw ParseError("manifest lists no trials");
    return m;
}

inline std::string write_manifest_text(const DatasetManifest& m) {
    std::ostringstream os;
    os << "# task = " << m.task << '\n';
    os << "# classes = " << m.num_classes << '\n';
    if (!m.gestures.empty()) {
        os << "# gestures =";
        for (const auto& g : m.gestures) os << ' ' << g;
        os << '\n';
    }
    os << "# rate = " << detail::format_double(m.rate) << '\n';
    os << "# source_rate = " << detail::format_double(m.source_rate) << '\n';
    for (const auto& e : m.entries) os << e.id << ' ' << e.user << ' ' << e.kin << ' ' << e.vis << ' ' << e.transcript << '\n';
    return os.str();
}

inline DatasetManifest read_manifest(const fs::path& path) {
    try {
        return parse_manifest_text(detail::read_file(path), path.parent_path());
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Loading and fold normalisation
// ---------------------------------------------------------------------------

/// A trial at the target rate before kinematics normalisation.
struct RawTrial {
    std::string id;
    std::string user;
    Tensor visual;     // [T, D_vis] or undefined
    Tensor kin_left;   // [T, 13] or undefined
    Tensor kin_right;  // [T, 13] or undefined
    std::vector<int> labels;
    double rate = 10.0;

    std::size_t frames() const { return labels.size(); }
};

/// Reads only the modalities in `use`; transcripts are always read.
inline RawTrial load_raw_trial(const DatasetManifest& m, const ManifestEntry& e, streams::StreamSelection use = {}) {
    RawTrial r;
    r.id = e.id;
    r.user = e.user;
    r.rate = m.rate;
    const auto ratio = kin::resample_stride(m.source_rate, m.rate);
    std::optional<std::size_t> T;
    if (use.kinematics) {
        if (e.kin == "-") throw ContractError("trial " + e.id + " has no kinematics file");
        auto table = read_kinematics_table(m.resolve(e.kin));
        auto f = kin::arm_feature_pair(table.left, table.right, m.source_rate, m.rate);
        r.kin_left = std::move(f.left);
        r.kin_right = std::move(f.right);
        T = r.kin_left.dim(0);
    }
    if (use.visual) {
        if (e.vis == "-") throw ContractError("trial " + e.id + " has no visual feature file");
        const auto path = m.resolve(e.vis);
        r.visual = parse_visual_bytes(detail::read_file(path), path.string());
        if (T && *T != r.visual.dim(0)) {
            throw IngestionError("trial " + e.id + ": kinematics give " + std::to_string(*T) +
                                 " frames at the target rate, visual features have " + std::to_string(r.visual.dim(0)));
        }
        T = r.visual.dim(0);
    }
    if (!T) throw ContractError("load_raw_trial: no modality requested for " + e.id);
    r.labels = parse_transcription(m.resolve(e.transcript), *T, ratio, m.num_classes);
    return r;
}

inline std::vector<RawTrial> load_all(const DatasetManifest& m, streams::StreamSelection use = {}) {
    std::vector<RawTrial> out;
    for (const auto& e : m.entries) out.push_back(load_raw_trial(m, e, use));
    return out;
}

/// Pooled per-arm statistics over the given (training) trials.
inline model::KinStats fit_kin_stats(const std::vector<const RawTrial*>& train) {
    std::vector<const Tensor*> left, right;
    for (const auto* t : train) {
        if (!t->kin_left.defined()) return {};
        left.push_back(&t->kin_left);
        right.push_back(&t->kin_right);
    }
    if (left.empty()) throw ContractError("fit_kin_stats: no training trials");
    return {kin::compute_stats(left), kin::compute_stats(right)};
}

inline Trial normalize_trial(const RawTrial& r, const std::optional<model::KinStats>& stats) {
    Trial t;
    t.id = r.id;
    t.user = r.user;
    t.visual = r.visual;
    t.labels = r.labels;
    t.rate = r.rate;
    if (r.kin_left.defined()) {
        if (!stats) throw ContractError("normalize_trial: kinematics present but no statistics given");
        t.kin_left = {kin::apply_stats(r.kin_left, stats->left), stats->left};
        t.kin_right = {kin::apply_stats(r.kin_right, stats->right), stats->right};
    }
    return t;
}

struct Split {
    std::string test_user;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// One fold per user, users in order of first appearance.
inline std::vector<Split> louo_splits(const std::vector<std::string>& trial_users) {
    std::vector<std::string> users;
    for (const auto& u : trial_users)
        if (std::find(users.begin(), users.end(), u) == users.end()) users.push_back(u);
    if (users.size() < 2) throw ContractError("leave-one-user-out needs at least two users");
    std::vector<Split> out;
    for (const auto& u : users) {
        Split s{u, {}, {}};
        for (std::size_t i = 0; i < trial_users.size(); ++i) (trial_users[i] == u ? s.test : s.train).push_back(i);
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<Split> louo_splits(const DatasetManifest& m) {
    std::vector<std::string> users;
    for (const auto& e : m.entries) users.push_back(e.user);
    return louo_splits(users);
}

/// Train and test trials of one split, both normalised with statistics
/// fitted on the training side only.
struct Fold {
    std::string test_user;
    std::vector<Trial> train;
    std::vector<Trial> test;
    std::optional<model::KinStats> stats;
};

inline Fold make_fold(const std::vector<RawTrial>& raw, const Split& split) {
    Fold f;
    f.test_user = split.test_user;
    std::vector<const RawTrial*> train;
    for (auto i : split.train) train.push_back(&raw.at(i));
    if (!train.empty() && train.front()->kin_left.defined()) f.stats = fit_kin_stats(train);
    for (auto i : split.train) f.train.push_back(normalize_trial(raw[i], f.stats));
    for (auto i : split.test) f.test.push_back(normalize_trial(raw[i], f.stats));
    return f;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Which modality tells a gesture apart from the others.
enum class Role { idle, anchor, vision_only, left_only, right_only, cross };

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t num_users = 4;
    std::size_t trials_per_user = 3;
    std::size_t num_classes = 6;
    std::size_t min_frames = 300;
    std::size_t max_frames = 600;
    double rate = 10.0;
    double source_rate = 30.0;
    std::size_t visual_dim = 128;
    /// Mean segment length in target frames, per class (a single entry applies to all).
    std::vector<double> dwell_mean{30.0};
    /// Relative weight of each class as a jump target (a single entry applies to all).
    std::vector<double> jump_weight{1.0};
    /// Shares of the non-anchor gestures routed to each role: vision only,
    /// left arm only, right arm only, cross-modal agreement only.
    std::array<double, 4> informativeness{0.25, 0.25, 0.25, 0.25};
    double vision_noise = 1.0;
    double kin_noise = 0.3;
    double vision_bias_scale = 0.6;
    double vision_mix_gain = 0.15;  // weight of arm latents in the visual features
    double user_offset = 0.25;

    void validate() const {
        if (num_classes < 2) throw ContractError("synthetic data needs at least two classes");
        if (num_users == 0 || trials_per_user == 0) throw ContractError("synthetic data needs users and trials");
        if (min_frames < 8 || max_frames < min_frames) throw ContractError("bad synthetic frame range");
        double s = 0;
        for (double f : informativeness) {
            if (f < 0) throw ContractError("informativeness fractions must be non-negative");
            s += f;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ContractError("informativeness fractions must sum to 1");
        if (vision_noise < 0 || kin_noise < 0 || user_offset < 0) throw ContractError("noise levels must be >= 0");
        auto check = [&](const std::vector<double>& v, const char* what) {
            if (v.size() != 1 && v.size() != num_classes) {
                throw ContractError(std::string(what) + " needs one entry or one per class");
            }
            for (double x : v)
                if (!(x > 0)) throw ContractError(std::string(what) + " entries must be positive");
        };
        check(dwell_mean, "dwell_mean");
        check(jump_weight, "jump_weight");
        for (double d : dwell_mean)
            if (d < 1.0) throw ContractError("dwell means must be at least one frame");
        kin::resample_stride(source_rate, rate);
    }

    double dwell(std::size_t c) const { return dwell_mean.size() == 1 ? dwell_mean[0] : dwell_mean[c]; }
    double weight(std::size_t c) const { return jump_weight.size() == 1 ? jump_weight[0] : jump_weight[c]; }
};

/// Role of every class: 0 is idle, 1 the anchor, the rest split by the
/// informativeness shares (largest remainder, ties to the earlier role).
inline std::vector<Role> gesture_roles(const SynthConfig& cfg) {
    std::vector<Role> roles(cfg.num_classes, Role::anchor);
    roles[0] = Role::idle;
    if (cfg.num_classes <= 2) return roles;
    const auto n = cfg.num_classes - 2;
    std::array<std::size_t, 4> count{};
    std::array<double, 4> rem{};
    std::size_t used = 0;
    for (std::size_t k = 0; k < 4; ++k) {
        const double exact = cfg.informativeness[k] * static_cast<double>(n);
        count[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        rem[k] = exact - static_cast<double>(count[k]);
        used += count[k];
    }
    while (used < n) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < 4; ++k)
            if (rem[k] > rem[best] + 1e-12) best = k;
        ++count[best];
        rem[best] = -1;
        ++used;
    }
    static constexpr Role order[] = {Role::vision_only, Role::left_only, Role::right_only, Role::cross};
    std::size_t g = 2;
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < count[k]; ++i) roles[g++] = order[k];
    return roles;
}

/// Signature indices per class and modality.  Classes sharing an index are
/// indistinguishable in that modality.
struct SignatureCodes {
    std::vector<std::size_t> vision, left, right;
};

inline SignatureCodes signature_codes(const std::vector<Role>& roles) {
    const auto K = roles.size();
    SignatureCodes c{std::vector<std::size_t>(K), std::vector<std::size_t>(K), std::vector<std::size_t>(K)};
    std::size_t next_v = 0, next_l = 0, next_r = 0;
    auto fresh = [](std::size_t& n) { return n++; };
    std::optional<std::size_t> anchor;
    for (std::size_t g = 0; g < K; ++g) {
        if (roles[g] == Role::idle || (roles[g] == Role::anchor && !anchor)) {
            c.vision[g] = fresh(next_v);
            c.left[g] = fresh(next_l);
            c.right[g] = fresh(next_r);
            if (roles[g] == Role::anchor) anchor = g;
        }
    }
    const auto a = anchor.value_or(0);
    std::optional<std::size_t> first_vision, first_left, first_right;
    for (std::size_t g = 0; g < K; ++g) {
        switch (roles[g]) {
            case Role::vision_only:
                c.vision[g] = fresh(next_v), c.left[g] = c.left[a], c.right[g] = c.right[a];
                if (!first_vision) first_vision = g;
                break;
            case Role::left_only:
                c.vision[g] = c.vision[a], c.left[g] = fresh(next_l), c.right[g] = c.right[a];
                if (!first_left) first_left = g;
                break;
            case Role::right_only:
                c.vision[g] = c.vision[a], c.left[g] = c.left[a], c.right[g] = fresh(next_r);
                if (!first_right) first_right = g;
                break;
            default: break;
        }
    }
    for (std::size_t g = 0; g < K; ++g) {
        if (roles[g] != Role::cross) continue;
        // Vision agrees with a vision-only gesture, kinematics with an
        // arm-only gesture; only the combination singles this class out.
        c.vision[g] = first_vision ? c.vision[*first_vision] : fresh(next_v);
        if (first_left) {
            c.left[g] = c.left[*first_left], c.right[g] = c.right[*first_left];
        } else if (first_right) {
            c.left[g] = c.left[*first_right], c.right[g] = c.right[*first_right];
        } else {
            c.left[g] = fresh(next_l), c.right[g] = c.right[a];
        }
    }
    return c;
}

/// Jump-chain transition matrix: leave the current class for j with
/// probability proportional to jump_weight[j].
inline std::vector<std::vector<double>> transition_matrix(const SynthConfig& cfg) {
    const auto K = cfg.num_classes;
    std::vector<std::vector<double>> P(K, std::vector<double>(K, 0.0));
    for (std::size_t i = 0; i < K; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < K; ++j)
            if (j != i) total += cfg.weight(j);
        for (std::size_t j = 0; j < K; ++j)
            if (j != i) P[i][j] = cfg.weight(j) / total;
    }
    return P;
}

/// Long-run share of frames per class: jump-chain stationary distribution
/// weighted by mean dwell.
inline std::vector<double> stationary_frame_distribution(const SynthConfig& cfg) {
    const auto K = cfg.num_classes;
    const auto P = transition_matrix(cfg);
    std::vector<double> pi(K, 1.0 / static_cast<double>(K));
    for (int it = 0; it < 10000; ++it) {
        std::vector<double> next(K, 0.0);
        for (std::size_t i = 0; i < K; ++i)
            for (std::size_t j = 0; j < K; ++j) next[j] += pi[i] * P[i][j];
        // Averaging with the previous iterate damps the period-2 oscillation of K = 2.
        for (std::size_t j = 0; j < K; ++j) next[j] = 0.5 * (next[j] + pi[j]);
        pi = std::move(next);
    }
    double total = 0;
    for (std::size_t c = 0; c < K; ++c) total += (pi[c] *= cfg.dwell(c));
    for (auto& p : pi) p /= total;
    return pi;
}

inline constexpr std::size_t kLatentDim = 4;

/// Sinusoidal motion primitive of one arm for one signature code.
struct ArmPrimitive {
    std::array<double, kLatentDim> freq, amp, phase, centre;
    double gripper;
};

struct SynthWorld {
    std::vector<Role> roles;
    SignatureCodes codes;
    std::vector<ArmPrimitive> left, right;         // by code
    std::vector<std::vector<double>> vision_bias;  // by code, D_vis each
    std::vector<double> mix;                       // [D_vis, 2 * kLatentDim]
    struct User {
        std::array<double, kLatentDim> left_shift, right_shift;
        double left_scale, right_scale;
    };
    std::vector<User> users;
};

inline SynthWorld make_world(const SynthConfig& cfg) {
    cfg.validate();
    SynthWorld w;
    w.roles = gesture_roles(cfg);
    w.codes = signature_codes(w.roles);
    auto rng = Rng(cfg.seed).stream("synth/world");
    auto primitive = [&](bool idle) {
        ArmPrimitive p{};
        for (std::size_t i = 0; i < kLatentDim; ++i) {
            p.freq[i] = rng.uniform(0.15, 0.9);  // Hz
            p.amp[i] = idle ? 0.05 : rng.uniform(0.4, 1.2);
            p.phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
            p.centre[i] = idle ? 0.0 : rng.uniform(-1.0, 1.0);
        }
        p.gripper = idle ? 0.0 : rng.uniform(-1.0, 1.0);
        return p;
    };
    const auto max_code = [](const std::vector<std::size_t>& v) { return *std::max_element(v.begin(), v.end()) + 1; };
    const auto idle_l = w.codes.left[0], idle_r = w.codes.right[0], idle_v = w.codes.vision[0];
    for (std::size_t c = 0; c < max_code(w.codes.left); ++c) w.left.push_back(primitive(c == idle_l));
    for (std::size_t c = 0; c < max_code(w.codes.right); ++c) w.right.push_back(primitive(c == idle_r));
    for (std::size_t c = 0; c < max_code(w.codes.vision); ++c) {
        std::vector<double> b(cfg.visual_dim);
        for (auto& x : b) x = c == idle_v ? 0.0 : cfg.vision_bias_scale * rng.normal();
        w.vision_bias.push_back(std::move(b));
    }
    w.mix.resize(cfg.visual_dim * 2 * kLatentDim);
    for (auto& x : w.mix) x = rng.normal() / std::sqrt(2.0 * kLatentDim);
    for (std::size_t u = 0; u < cfg.num_users; ++u) {
        auto ur = Rng(cfg.seed).stream("synth/user", u);
        SynthWorld::User user{};
        for (std::size_t i = 0; i < kLatentDim; ++i) {
            user.left_shift[i] = cfg.user_offset * ur.normal();
            user.right_shift[i] = cfg.user_offset * ur.normal();
        }
        user.left_scale = 1.0 + cfg.user_offset * ur.uniform(-0.5, 0.5);
        user.right_scale = 1.0 + cfg.user_offset * ur.uniform(-0.5, 0.5);
        w.users.push_back(user);
    }
    return w;
}

/// One generated recording: kinematics at the source rate, visual features
/// and labels at the target rate.
struct SynthRecording {
    std::string id;
    std::string user;
    KinematicsTable kinematics;
    Tensor visual;
    std::vector<int> labels;
};

inline std::vector<int> sample_labels(const SynthConfig& cfg, std::size_t T, Rng& rng) {
    const auto P = transition_matrix(cfg);
    std::vector<int> labels;
    labels.reserve(T);
    std::size_t g = 0;
    {
        // First class drawn in proportion to the jump weights.
        double total = 0;
        for (std::size_t c = 0; c < cfg.num_classes; ++c) total += cfg.weight(c);
        double u = rng.uniform() * total;
        for (g = 0; g + 1 < cfg.num_classes; ++g) {
            u -= cfg.weight(g);
            if (u < 0) break;
        }
    }
    while (labels.size() < T) {
        // Geometric dwell on {1, 2, ...} with the configured mean.
        const double stop = 1.0 / cfg.dwell(g);
        std::size_t len = 1;
        while (rng.uniform() >= stop) ++len;
        labels.insert(labels.end(), std::min(len, T - labels.size()), static_cast<int>(g));
        double u = rng.uniform();
        std::size_t next = 0;
        for (std::size_t j = 0; j < cfg.num_classes; ++j) {
            if (j == g) continue;
            next = j;
            u -= P[g][j];
            if (u < 0) break;
        }
        g = next;
    }
    return labels;
}

inline SynthRecording generate_recording(const SynthConfig& cfg, const SynthWorld& w, std::size_t user,
                                         std::size_t index) {
    auto rng = Rng(cfg.seed).stream("synth/trial", user * 1000003 + index);
    SynthRecording rec;
    rec.user = "U" + std::to_string(user + 1);
    rec.id = rec.user + "_T" + std::to_string(index + 1);
    const auto T = cfg.min_frames + rng.below(cfg.max_frames - cfg.min_frames + 1);
    rec.labels = sample_labels(cfg, T, rng);

    const auto ratio = kin::resample_stride(cfg.source_rate, cfg.rate);
    const auto S = T * ratio;
    const double dt = 1.0 / cfg.source_rate;
    const auto& u = w.users[user];
    const double start_time = rng.uniform(0.0, 100.0);

    auto noise = [&](double sigma) { return sigma * rng.normal(); };
    std::vector<std::array<double, kLatentDim>> lat_l(S), lat_r(S);
    auto arm_step = [&](const ArmPrimitive& p, const std::array<double, kLatentDim>& shift, double scale, double t,
                        kin::ArmKinematics& arm, std::array<double, kLatentDim>& latent) {
        std::array<double, kLatentDim> z{}, dz{};
        for (std::size_t i = 0; i < kLatentDim; ++i) {
            const double w2 = 2.0 * std::numbers::pi * p.freq[i];
            z[i] = p.centre[i] + shift[i] + scale * p.amp[i] * std::sin(w2 * t + p.phase[i]);
            dz[i] = scale * p.amp[i] * w2 * std::cos(w2 * t + p.phase[i]);
        }
        latent = z;
        const double kn = cfg.kin_noise;
        arm.position.push_back({0.1 * z[0] + 0.1 * kn * noise(1), 0.1 * z[1] + 0.1 * kn * noise(1),
                                0.1 * z[2] + 0.1 * kn * noise(1)});
        const kin::Euler e{0.5 * z[3], 0.4 * std::tanh(z[0] - z[1]), 0.5 * z[2]};
        arm.rotation.push_back(kin::euler_to_rotmat(e));
        arm.linear_velocity.push_back({0.1 * dz[0] + kn * noise(0.1), 0.1 * dz[1] + kn * noise(0.1),
                                       0.1 * dz[2] + kn * noise(0.1)});
        arm.angular_velocity.push_back({0.5 * dz[3] + kn * noise(0.5), kn * noise(0.5), 0.5 * dz[2] + kn * noise(0.5)});
        arm.gripper_angle.push_back(p.gripper + 0.2 * std::sin(z[3]) + kn * noise(0.3));
    };
    auto& table = rec.kinematics;
    table.master.assign(S, {});
    for (std::size_t s = 0; s < S; ++s) {
        const auto g = static_cast<std::size_t>(rec.labels[s / ratio]);
        const double t = start_time + static_cast<double>(s) * dt;
        arm_step(w.left[w.codes.left[g]], u.left_shift, u.left_scale, t, table.left, lat_l[s]);
        arm_step(w.right[w.codes.right[g]], u.right_shift, u.right_scale, t, table.right, lat_r[s]);
    }

    const auto D = cfg.visual_dim;
    std::vector<double> vis(T * D);
    for (std::size_t i = 0; i < T; ++i) {
        const auto g = static_cast<std::size_t>(rec.labels[i]);
        const auto& zl = lat_l[i * ratio];
        const auto& zr = lat_r[i * ratio];
        const auto& bias = w.vision_bias[w.codes.vision[g]];
        for (std::size_t d = 0; d < D; ++d) {
            double a = 0;
            const double* m = &w.mix[d * 2 * kLatentDim];
            for (std::size_t k = 0; k < kLatentDim; ++k) a += m[k] * zl[k] + m[kLatentDim + k] * zr[k];
            vis[i * D + d] = cfg.vision_mix_gain * std::tanh(a) + bias[d] + noise(cfg.vision_noise);
        }
    }
    rec.visual = Tensor({T, D}, std::move(vis));
    return rec;
}

inline std::vector<SynthRecording> synth_generate(const SynthConfig& cfg) {
    const auto w = make_world(cfg);
    std::vector<SynthRecording> out;
    for (std::size_t u = 0; u < cfg.num_users; ++u)
        for (std::size_t i = 0; i < cfg.trials_per_user; ++i) out.push_back(generate_recording(cfg, w, u, i));
    return out;
}

/// The in-memory equivalent of writing a recording and loading it back.
inline RawTrial to_raw_trial(const SynthRecording& rec, const SynthConfig& cfg) {
    RawTrial r;
    r.id = rec.id;
    r.user = rec.user;
    r.visual = rec.visual;
    auto f = kin::arm_feature_pair(rec.kinematics.left, rec.kinematics.right, cfg.source_rate, cfg.rate);
    r.kin_left = std::move(f.left);
    r.kin_right = std::move(f.right);
    r.labels = rec.labels;
    r.rate = cfg.rate;
    return r;
}

inline std::vector<RawTrial> synth_raw_trials(const SynthConfig& cfg) {
    std::vector<RawTrial> out;
    for (const auto& rec : synth_generate(cfg)) out.push_back(to_raw_trial(rec, cfg));
    return out;
}

inline std::vector<std::string> synth_gesture_names(const SynthConfig& cfg) {
    std::vector<std::string> out;
    for (std::size_t c = 0; c < cfg.num_classes; ++c) out.push_back("G" + std::to_string(c));
    return out;
}

/// Writes manifest.txt plus per-trial kinematics (.kin, source rate),
/// visual features (.vis) and transcripts (.txt, source-rate frames).
inline DatasetManifest write_synthetic_dataset(const SynthConfig& cfg, const fs::path& dir) {
    const auto recs = synth_generate(cfg);
    const auto ratio = kin::resample_stride(cfg.source_rate, cfg.rate);
    DatasetManifest m;
    m.task = "synthetic";
    m.num_classes = cfg.num_classes;
    m.gestures = synth_gesture_names(cfg);
    m.rate = cfg.rate;
    m.source_rate = cfg.source_rate;
    m.dir = dir;
    fs::create_directories(dir);
    for (const auto& r : recs) {
        ManifestEntry e{r.id, r.user, "kinematics/" + r.id + ".kin", "visual/" + r.id + ".vis",
                        "transcriptions/" + r.id + ".txt"};
        detail::write_file(dir / e.kin, write_kinematics_text(r.kinematics));
        detail::write_file(dir / e.vis, write_visual_bytes(r.visual));
        std::vector<int> source_labels;
        for (int y : r.labels) source_labels.insert(source_labels.end(), ratio, y);
        detail::write_file(dir / e.transcript, write_transcription_text(source_labels));
        m.entries.push_back(std::move(e));
    }
    detail::write_file(dir / "manifest.txt", write_manifest_text(m));
    return m;
}

}  // namespace mrgseq::data
