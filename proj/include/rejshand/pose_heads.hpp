#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/ops.hpp"
#include "rejshand/params.hpp"

namespace rejshand {

/// Kinematic parent of each joint in the standard 21-joint order: wrist (0),
/// then thumb, index, middle, ring, little, four joints each from the palm
/// outwards. The wrist is its own parent.
inline const std::vector<std::size_t>& default_parents() {
    static const std::vector<std::size_t> parents{0, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19};
    return parents;
}

/// Joint and skeleton token features at one refinement stage.
struct TokenFeatures {
    Tensor joints;
    Tensor skeleton;
    std::size_t stage = 1;  // 1-based
};

struct ExpansionConfig {
    std::size_t joints = 21;
    std::size_t channels = 256;   // transposed-conv output channels
    std::size_t token_width = 256;  // C of the first interaction stage
    std::vector<std::size_t> parents = default_parents();

    void validate() const {
        if (joints == 0) throw ConfigError("model.joints must be positive");
        if (parents.size() != joints) {
            throw ConfigError("model.parents has " + std::to_string(parents.size()) + " entries for " +
                              std::to_string(joints) + " joints");
        }
        for (auto p : parents) {
            if (p >= joints) throw ConfigError("model.parents entry " + std::to_string(p) + " out of range");
        }
        if (channels == 0 || token_width == 0) throw ConfigError("expansion widths must be positive");
    }
};

inline void register_pose_head_params(ParamStore& params, const ExpansionConfig& cfg, std::size_t backbone_channels,
                                      std::size_t backbone_size, Rng& rng) {
    const std::size_t flat = backbone_channels * backbone_size * backbone_size;
    params.add("keypoints.weight", init_uniform({flat, 2 * cfg.joints}, flat, rng));
    params.add("keypoints.bias", Tensor::full({2 * cfg.joints}, 0.5));
    params.add("expansion.upsample.weight", init_uniform({backbone_channels, cfg.channels, 2, 2}, backbone_channels, rng));
    params.add("expansion.upsample.bias", Tensor::zeros({cfg.channels}));
    params.add("expansion.joint.weight", init_uniform({cfg.channels, cfg.token_width}, cfg.channels, rng));
    params.add("expansion.joint.bias", Tensor::zeros({cfg.token_width}));
    params.add("expansion.skeleton.weight", init_uniform({2 * cfg.channels, cfg.token_width}, 2 * cfg.channels, rng));
    params.add("expansion.skeleton.bias", Tensor::zeros({cfg.token_width}));
}

/// Flattened backbone features through one linear layer to J x 2 keypoints
/// in normalized [0, 1] crop coordinates. No activation.
inline Tensor keypoints2d_forward(Tape& tape, const Tensor& f_b, const ParamStore& params, std::size_t joints) {
    detail::require_rank(f_b, 3, "keypoints2d_forward", "backbone features");
    const Tensor& weight = params.get("keypoints.weight");
    if (weight.dim(0) != f_b.numel()) {
        throw DimensionError("keypoint head expects " + std::to_string(weight.dim(0)) + " features, got " +
                             shape_str(f_b.shape()));
    }
    Tensor flat = reshape(tape, f_b, {1, f_b.numel()});
    Tensor out = linear(tape, flat, weight, params.get("keypoints.bias"));
    return reshape(tape, out, {joints, 2});
}

/// [0, 1] crop coordinates to the sampler's [-1, 1] domain: 2x - 1.
inline Tensor normalize_coords(Tape& tape, const Tensor& kp2d) { return add_scalar(tape, scale(tape, kp2d, 2.0), -1.0); }

/// Inverse of normalize_coords: (x + 1) / 2.
inline Tensor denormalize_coords(Tape& tape, const Tensor& coords) {
    return scale(tape, add_scalar(tape, coords, 1.0), 0.5);
}

/// Samples the upsampled feature map at the keypoints; returns the raw J x C
/// sample matrix alongside the stage-1 token features.
struct ExpansionResult {
    TokenFeatures tokens;
    Tensor upsampled;
    Tensor samples;
};

inline ExpansionResult expansion_forward(Tape& tape, const Tensor& f_b, const Tensor& kp2d, const ParamStore& params,
                                         const ExpansionConfig& cfg) {
    if (kp2d.shape() != Shape{cfg.joints, 2}) {
        throw DimensionError("expansion expects keypoints [" + std::to_string(cfg.joints) + "x2], got " +
                             shape_str(kp2d.shape()));
    }
    Tensor up = conv_transpose2d(tape, f_b, params.get("expansion.upsample.weight"),
                                 params.get("expansion.upsample.bias"), 2);
    Tensor grid = normalize_coords(tape, kp2d);
    Tensor samples = grid_sample_bilinear(tape, up, grid);
    Tensor joints = linear(tape, samples, params.get("expansion.joint.weight"), params.get("expansion.joint.bias"));
    Tensor paired = concat_cols(tape, {samples, gather_rows(tape, samples, cfg.parents)});
    Tensor skeleton =
        linear(tape, paired, params.get("expansion.skeleton.weight"), params.get("expansion.skeleton.bias"));
    return {TokenFeatures{joints, skeleton, 1}, up, samples};
}

}  // namespace rejshand
