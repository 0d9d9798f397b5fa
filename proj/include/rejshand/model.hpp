#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rejshand/backbone.hpp"
#include "rejshand/interaction.hpp"
#include "rejshand/losses.hpp"
#include "rejshand/mesh_head.hpp"
#include "rejshand/params.hpp"
#include "rejshand/pose_heads.hpp"

namespace rejshand {

struct ModelConfig {
    BackboneConfig backbone;
    std::size_t joints = 21;
    std::vector<std::size_t> parents = default_parents();
    std::size_t expansion_channels = 256;
    InteractionConfig interaction;
    MeshConfig mesh;

    ExpansionConfig expansion() const {
        return ExpansionConfig{joints, expansion_channels, interaction.width(0), parents};
    }

    std::size_t final_tokens() const {
        std::size_t t = joints;
        for (std::size_t b = 1; b < interaction.blocks(); ++b) t *= interaction.upsample_factor;
        return t;
    }

    void validate() const {
        backbone.validate();
        interaction.validate();
        mesh.validate();
        expansion().validate();
        if (expansion_channels == 0) throw ConfigError("model.expansion_channels must be positive");
    }
};

struct ForwardResult {
    Tensor features;                  // backbone output
    Tensor kp2d;                      // J x 2, [0, 1] crop coordinates
    std::vector<TokenFeatures> stages;  // token features entering each block, then the final output
    MeshVertices mesh;
    Tensor joints3d;  // J x 3
};

/// The full image -> (2D keypoints, mesh, 3D joints) network. Parameters are
/// read-only during forward, so one Model can serve concurrent forward calls
/// as long as each thread uses its own tape.
class Model {
   public:
    Model(ModelConfig cfg, JointRegressor regressor, std::uint64_t seed)
        : cfg_(std::move(cfg)), regressor_(std::move(regressor)) {
        cfg_.validate();
        regressor_.validate();
        if (regressor_.joints() != cfg_.joints) {
            throw ConfigError("regressor yields " + std::to_string(regressor_.joints()) + " joints, model has " +
                              std::to_string(cfg_.joints));
        }
        if (regressor_.vertices() != cfg_.mesh.vertices) {
            throw ConfigError("regressor covers " + std::to_string(regressor_.vertices()) + " vertices, mesh has " +
                              std::to_string(cfg_.mesh.vertices));
        }
        Rng rng(seed);
        register_backbone_params(params_, cfg_.backbone, rng);
        register_pose_head_params(params_, cfg_.expansion(), cfg_.backbone.out_channels(), cfg_.backbone.out_size(), rng);
        register_interaction_params(params_, cfg_.interaction, rng);
        register_mesh_params(params_, cfg_.mesh, cfg_.final_tokens(), cfg_.interaction.width(cfg_.interaction.blocks() - 1),
                             rng);
    }

    const ModelConfig& config() const { return cfg_; }
    const JointRegressor& regressor() const { return regressor_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    std::size_t total_parameters() const { return params_.count_values(); }

    /// Everything except the backbone stand-in.
    std::size_t head_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) {
            if (name.rfind("backbone.", 0) != 0) n += t.numel();
        }
        return n;
    }

    ForwardResult forward(Tape& tape, const Tensor& image) const {
        ForwardResult r;
        r.features = backbone_forward(tape, image, params_, cfg_.backbone);
        r.kp2d = keypoints2d_forward(tape, r.features, params_, cfg_.joints);
        TokenFeatures tokens = expansion_forward(tape, r.features, r.kp2d, params_, cfg_.expansion()).tokens;
        const auto& ic = cfg_.interaction;
        for (std::size_t b = 0; b < ic.blocks(); ++b) {
            r.stages.push_back(tokens);
            tokens = interaction_block_forward(tape, tokens, params_, b, ic);
            if (b + 1 < ic.blocks()) tokens = token_upsample(tape, tokens, params_, b, ic);
        }
        r.stages.push_back(tokens);
        r.mesh = mesh_token_forward(tape, tokens, params_);
        r.joints3d = joints3d_forward(tape, r.mesh.coords, regressor_);
        return r;
    }

   private:
    ModelConfig cfg_;
    JointRegressor regressor_;
    ParamStore params_;
};

struct LossBreakdown {
    Tensor l2d, l3d, lv, total;
};

struct Targets {
    Tensor kp2d, joints3d, vertices;
};

inline LossBreakdown compute_losses(Tape& tape, const ForwardResult& out, const Targets& gt, const LossWeights& w,
                                    PointNorm norm = PointNorm::l1) {
    LossBreakdown l;
    l.l2d = point_set_loss(tape, out.kp2d, gt.kp2d, norm);
    l.l3d = point_set_loss(tape, out.joints3d, gt.joints3d, norm);
    l.lv = point_set_loss(tape, out.mesh.coords, gt.vertices, norm);
    l.total = total_loss(tape, l.l2d, l.l3d, l.lv, w);
    return l;
}

}  // namespace rejshand
