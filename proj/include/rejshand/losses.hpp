#pragma once

#include <cstddef>
#include <string>

#include "rejshand/errors.hpp"
#include "rejshand/ops.hpp"

namespace rejshand {

enum class PointNorm { l1, l2 };

struct LossWeights {
    double k_2d = 1.0;
    double k_3d = 10.0;
    double k_v = 10.0;

    void validate() const {
        if (k_2d < 0 || k_3d < 0 || k_v < 0) throw ConfigError("loss weights must be non-negative");
    }
};

/// Mean over the N points of the per-point distance between pred and gt.
/// PointNorm::l1 sums absolute coordinate differences; l2 is Euclidean.
inline Tensor point_set_loss(Tape& tape, const Tensor& pred, const Tensor& gt, PointNorm norm = PointNorm::l1) {
    if (pred.shape() != gt.shape() || pred.rank() != 2) {
        throw DimensionError("point set loss: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
    }
    const double inv_n = 1.0 / static_cast<double>(pred.dim(0));
    Tensor diff = sub(tape, pred, gt);
    Tensor per_point = norm == PointNorm::l1 ? abs(tape, diff) : row_norms(tape, diff);
    return scale(tape, sum(tape, per_point), inv_n);
}

inline Tensor l1_set_loss(Tape& tape, const Tensor& pred, const Tensor& gt) {
    return point_set_loss(tape, pred, gt, PointNorm::l1);
}

/// k_2d * L_2D + k_3d * L_3D + k_v * L_V.
inline Tensor total_loss(Tape& tape, const Tensor& l2d, const Tensor& l3d, const Tensor& lv, const LossWeights& w) {
    return add(tape, add(tape, scale(tape, l2d, w.k_2d), scale(tape, l3d, w.k_3d)), scale(tape, lv, w.k_v));
}

}  // namespace rejshand
