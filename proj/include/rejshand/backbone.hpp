#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/ops.hpp"
#include "rejshand/params.hpp"

namespace rejshand {

/// Small strided conv stack standing in for a pretrained image backbone.
/// Each stage is conv3x3 (stride 2, padding 1) + relu, so five stages take a
/// 224 input to 7x7.
struct BackboneConfig {
    std::vector<std::size_t> stage_channels{16, 32, 64, 128, 640};
    std::size_t input_size = 224;
    std::size_t in_channels = 3;
    std::size_t kernel = 3;

    std::size_t out_channels() const { return stage_channels.back(); }

    std::size_t out_size() const {
        std::size_t s = input_size;
        for (std::size_t i = 0; i < stage_channels.size(); ++i) s = (s + 2 * (kernel / 2) - kernel) / 2 + 1;
        return s;
    }

    void validate() const {
        if (stage_channels.empty()) throw ConfigError("backbone.stage_channels must not be empty");
        for (auto c : stage_channels) {
            if (c == 0) throw ConfigError("backbone.stage_channels entries must be positive");
        }
        if (input_size == 0) throw ConfigError("backbone.input_size must be positive");
        if (kernel % 2 == 0) throw ConfigError("backbone kernel must be odd");
    }
};

inline void register_backbone_params(ParamStore& params, const BackboneConfig& cfg, Rng& rng) {
    std::size_t cin = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
        const std::size_t cout = cfg.stage_channels[i];
        const std::string prefix = "backbone.stage" + std::to_string(i);
        params.add(prefix + ".weight", init_uniform({cout, cin, cfg.kernel, cfg.kernel}, cin * cfg.kernel * cfg.kernel, rng));
        params.add(prefix + ".bias", Tensor::zeros({cout}));
        cin = cout;
    }
}

/// image: in_channels x input_size x input_size, values in [0, 1].
inline Tensor backbone_forward(Tape& tape, const Tensor& image, const ParamStore& params, const BackboneConfig& cfg) {
    const Shape expected{cfg.in_channels, cfg.input_size, cfg.input_size};
    if (image.shape() != expected) {
        throw DimensionError("backbone expects image " + shape_str(expected) + ", got " + shape_str(image.shape()));
    }
    Tensor x = image;
    for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
        const std::string prefix = "backbone.stage" + std::to_string(i);
        x = relu(tape, conv2d(tape, x, params.get(prefix + ".weight"), params.get(prefix + ".bias"), 2, cfg.kernel / 2));
    }
    return x;
}

}  // namespace rejshand
