#pragma once

#include <string>
#include <vector>

#include "mrgseq/kinpre.hpp"

namespace mrgseq {

/// One synchronised recording after preprocessing.  A modality that was not
/// loaded holds an undefined tensor.
struct Trial {
    std::string id;
    std::string user;
    num::Tensor visual;             // [T, D_vis]
    kin::NormalizedKinSeq kin_left;  // values [T, D_kin]
    kin::NormalizedKinSeq kin_right;
    std::vector<int> labels;
    double rate = 10.0;

    std::size_t frames() const { return labels.size(); }
    bool has_visual() const { return visual.defined(); }
    bool has_kinematics() const { return kin_left.values.defined() && kin_right.values.defined(); }

    /// Every loaded modality spans exactly the labelled frames.
    void validate(std::size_t num_classes) const {
        const auto T = labels.size();
        if (T == 0) throw IngestionError("trial " + id + " has no frames");
        auto check = [&](const num::Tensor& t, const char* what) {
            if (t.defined() && t.dim(0) != T) {
                throw IngestionError("trial " + id + ": " + what + " has " + std::to_string(t.dim(0)) +
                                     " frames, labels have " + std::to_string(T));
            }
        };
        check(visual, "visual stream");
        check(kin_left.values, "left kinematics");
        check(kin_right.values, "right kinematics");
        for (std::size_t t = 0; t < T; ++t) {
            if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= num_classes) {
                throw IngestionError("trial " + id + ": label " + std::to_string(labels[t]) + " at frame " +
                                     std::to_string(t) + " outside [0," + std::to_string(num_classes) + ")");
            }
        }
    }
};

}  // namespace mrgseq
