#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mrgseq/num/tensor.hpp"

namespace mrgseq {

/// Raised when raw recordings violate ingestion invariants.
class IngestionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace kin {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline constexpr double kOrthoTolerance = 1e-3;
inline constexpr double kGimbalTolerance = 1e-6;
inline constexpr double kStdFloor = 1e-8;
inline constexpr std::size_t kFeatureDim = 13;

/// Per-frame tool-tip state of one arm.
struct ArmKinematics {
    std::vector<Vec3> position;
    std::vector<Mat3> rotation;
    std::vector<Vec3> linear_velocity;
    std::vector<Vec3> angular_velocity;
    std::vector<double> gripper_angle;

    std::size_t frames() const { return position.size(); }

    void validate() const {
        const auto T = position.size();
        if (rotation.size() != T || linear_velocity.size() != T || angular_velocity.size() != T ||
            gripper_angle.size() != T) {
            throw IngestionError("arm kinematics channels have unequal lengths");
        }
    }
};

struct Euler {
    double roll = 0.0;
    double pitch = 0.0;
    double yaw = 0.0;
};

/// R = Rz(yaw) * Ry(pitch) * Rx(roll), the intrinsic Z-Y-X convention.
inline Mat3 euler_to_rotmat(const Euler& e) {
    const double cr = std::cos(e.roll), sr = std::sin(e.roll);
    const double cp = std::cos(e.pitch), sp = std::sin(e.pitch);
    const double cy = std::cos(e.yaw), sy = std::sin(e.yaw);
    return {cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
            sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
            -sp,     cp * sr,                cp * cr};
}

inline bool is_rotation(const Mat3& R, double tol = kOrthoTolerance) {
    const double det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
                       R[2] * (R[3] * R[7] - R[4] * R[6]);
    if (!(std::abs(det - 1.0) <= tol)) return false;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 3; ++k) dot += R[k * 3 + i] * R[k * 3 + j];
            if (!(std::abs(dot - (i == j ? 1.0 : 0.0)) <= tol)) return false;
        }
    }
    return true;
}

/// Decomposes an orthonormal matrix into intrinsic Z-Y-X angles with pitch in
/// [-pi/2, pi/2].  At gimbal lock roll is pinned to 0 and the remaining
/// rotation is folded into yaw.
inline Euler rotmat_to_euler(const Mat3& R, std::size_t frame = 0) {
    if (!is_rotation(R)) {
        throw IngestionError("rotation matrix at frame " + std::to_string(frame) + " is not orthonormal");
    }
    const double s = std::clamp(-R[6], -1.0, 1.0);
    Euler e;
    e.pitch = std::asin(s);
    if (std::abs(std::abs(e.pitch) - std::numbers::pi / 2) <= kGimbalTolerance) {
        e.roll = 0.0;
        // With roll = 0: R01 = -sin(yaw), R11 = cos(yaw) independent of pitch sign.
        e.yaw = std::atan2(-R[1], R[4]);
    } else {
        e.roll = std::atan2(R[7], R[8]);
        e.yaw = std::atan2(R[3], R[0]);
    }
    return e;
}

/// Per-channel normalisation statistics.
struct ZStats {
    std::vector<double> mean;
    std::vector<double> std;
};

/// A [T, D] kinematics matrix after z-scoring, with the statistics used.
struct NormalizedKinSeq {
    num::Tensor values;
    ZStats stats;
};

inline ZStats compute_stats(const std::vector<const num::Tensor*>& seqs) {
    if (seqs.empty()) throw ContractError("compute_stats: no sequences");
    const auto D = seqs.front()->dim(1);
    ZStats st{std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};
    std::size_t n = 0;
    for (const auto* s : seqs) {
        if (s->dim(1) != D) throw DimensionError("compute_stats: mixed channel counts");
        for (std::size_t t = 0; t < s->dim(0); ++t)
            for (std::size_t d = 0; d < D; ++d) st.mean[d] += s->at(t, d);
        n += s->dim(0);
    }
    for (auto& m : st.mean) m /= static_cast<double>(n);
    for (const auto* s : seqs)
        for (std::size_t t = 0; t < s->dim(0); ++t)
            for (std::size_t d = 0; d < D; ++d) {
                const double c = s->at(t, d) - st.mean[d];
                st.std[d] += c * c;
            }
    for (auto& v : st.std) v = std::max(std::sqrt(v / static_cast<double>(n)), kStdFloor);
    return st;
}

inline num::Tensor apply_stats(const num::Tensor& seq, const ZStats& st) {
    const auto T = seq.dim(0), D = seq.dim(1);
    if (st.mean.size() != D || st.std.size() != D) {
        throw DimensionError("zscore: statistics for " + std::to_string(st.mean.size()) + " channels, sequence has " +
                             std::to_string(D));
    }
    std::vector<double> out(T * D);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) out[t * D + d] = (seq.at(t, d) - st.mean[d]) / st.std[d];
    return num::Tensor({T, D}, std::move(out));
}

/// Population z-score per channel.  Without `stats` the sequence's own
/// statistics are used (training data only); with them, they are applied as is.
inline NormalizedKinSeq zscore(const num::Tensor& seq, const std::optional<ZStats>& stats = std::nullopt) {
    if (seq.rank() != 2) throw DimensionError("zscore: expected [T, D], got " + num::shape_str(seq.shape()));
    ZStats st = stats ? *stats : compute_stats({&seq});
    auto values = apply_stats(seq, st);
    return {std::move(values), std::move(st)};
}

/// Flattens one arm into [T, 13]: position, Euler angles, linear velocity,
/// angular velocity, gripper angle.
inline num::Tensor arm_features(const ArmKinematics& arm, std::size_t stride = 1) {
    arm.validate();
    if (stride == 0) throw ContractError("arm_features: zero stride");
    const auto T = arm.frames();
    const auto out_T = (T + stride - 1) / stride;
    if (out_T == 0) throw IngestionError("arm kinematics are empty");
    std::vector<double> v;
    v.reserve(out_T * kFeatureDim);
    for (std::size_t t = 0; t < T; t += stride) {
        const auto e = rotmat_to_euler(arm.rotation[t], t);
        for (double p : arm.position[t]) v.push_back(p);
        v.push_back(e.roll);
        v.push_back(e.pitch);
        v.push_back(e.yaw);
        for (double p : arm.linear_velocity[t]) v.push_back(p);
        for (double p : arm.angular_velocity[t]) v.push_back(p);
        v.push_back(arm.gripper_angle[t]);
    }
    return num::Tensor({out_T, kFeatureDim}, std::move(v));
}

inline std::size_t resample_stride(double source_rate, double target_rate) {
    if (!(source_rate > 0.0) || !(target_rate > 0.0)) throw ContractError("sampling rates must be positive");
    const double ratio = source_rate / target_rate;
    const auto stride = static_cast<std::size_t>(std::llround(ratio));
    if (stride == 0 || std::abs(ratio - static_cast<double>(stride)) > 1e-9) {
        throw ContractError("target rate " + std::to_string(target_rate) + " does not divide source rate " +
                            std::to_string(source_rate));
    }
    return stride;
}

/// Raw (not yet normalised) per-arm feature matrices at the target rate.
struct ArmFeatures {
    num::Tensor left;
    num::Tensor right;
};

inline ArmFeatures arm_feature_pair(const ArmKinematics& left, const ArmKinematics& right, double source_rate,
                                    double target_rate) {
    if (left.frames() != right.frames()) {
        throw IngestionError("left arm has " + std::to_string(left.frames()) + " frames, right arm has " +
                             std::to_string(right.frames()));
    }
    const auto stride = resample_stride(source_rate, target_rate);
    return {arm_features(left, stride), arm_features(right, stride)};
}

/// Euler conversion, integer-stride downsampling and per-arm z-scoring.
/// Statistics default to each arm's own data; pass training-split stats for
/// held-out trials.
inline std::pair<NormalizedKinSeq, NormalizedKinSeq> build_arm_sequences(
    const ArmKinematics& left, const ArmKinematics& right, double source_rate, double target_rate,
    const std::optional<ZStats>& left_stats = std::nullopt, const std::optional<ZStats>& right_stats = std::nullopt) {
    auto f = arm_feature_pair(left, right, source_rate, target_rate);
    return {zscore(f.left, left_stats), zscore(f.right, right_stats)};
}

}  // namespace kin
}  // namespace mrgseq
