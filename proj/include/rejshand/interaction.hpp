#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/ops.hpp"
#include "rejshand/params.hpp"
#include "rejshand/pose_heads.hpp"

namespace rejshand {

struct InteractionConfig {
    std::size_t heads = 8;
    std::vector<std::size_t> d_k{32, 16, 8};  // one entry per block
    std::size_t upsample_factor = 4;
    std::size_t coord_kernel = 3;
    bool fusion = true;
    bool mirror_skeleton = true;

    std::size_t blocks() const { return d_k.size(); }
    std::size_t width(std::size_t block) const { return heads * d_k.at(block); }

    void validate() const {
        if (heads == 0) throw ConfigError("model.heads must be positive");
        if (d_k.empty()) throw ConfigError("model.d_k needs at least one block");
        for (auto d : d_k) {
            if (d == 0) throw ConfigError("model.d_k entries must be positive");
        }
        if (upsample_factor == 0) throw ConfigError("model.upsample_factor must be positive");
        if (coord_kernel % 2 == 0) throw ConfigError("coordinate-attention kernel must be odd");
    }
};

namespace detail {

inline void add_linear(ParamStore& params, const std::string& prefix, std::size_t cin, std::size_t cout, Rng& rng,
                       bool bias = true) {
    params.add(prefix + ".weight", init_uniform({cin, cout}, cin, rng));
    if (bias) params.add(prefix + ".bias", Tensor::zeros({cout}));
}

inline Tensor apply_linear(Tape& tape, const Tensor& x, const ParamStore& params, const std::string& prefix) {
    const std::string bias = prefix + ".bias";
    return linear(tape, x, params.get(prefix + ".weight"), params.contains(bias) ? params.get(bias) : Tensor{});
}

inline void register_branch(ParamStore& params, const std::string& prefix, std::size_t c, std::size_t kernel,
                            bool attention, Rng& rng) {
    if (attention) {
        params.add(prefix + ".coord.weight", init_uniform({c, kernel}, kernel, rng));
        params.add(prefix + ".coord.bias", Tensor::zeros({c}));
        params.add(prefix + ".norm.gain", Tensor::full({c}, 1.0));
        params.add(prefix + ".norm.shift", Tensor::zeros({c}));
        add_linear(params, prefix + ".attn.q", c, c, rng, false);
        add_linear(params, prefix + ".attn.k", c, c, rng, false);
        add_linear(params, prefix + ".attn.v", c, c, rng, false);
        add_linear(params, prefix + ".attn.o", c, c, rng);
    }
    add_linear(params, prefix + ".linear", c, c, rng);
    add_linear(params, prefix + ".proj", c, c, rng);
}

}  // namespace detail

inline std::string block_prefix(std::size_t block) { return "block" + std::to_string(block); }

/// Parameters for every block and inter-block upsample.
inline void register_interaction_params(ParamStore& params, const InteractionConfig& cfg, Rng& rng) {
    for (std::size_t b = 0; b < cfg.blocks(); ++b) {
        const std::size_t c = cfg.width(b);
        const std::string p = block_prefix(b);
        detail::register_branch(params, p + ".joint", c, cfg.coord_kernel, true, rng);
        detail::register_branch(params, p + ".skeleton", c, cfg.coord_kernel, cfg.mirror_skeleton, rng);
        if (cfg.fusion) detail::add_linear(params, p + ".fuse", c, c, rng);
        if (b + 1 < cfg.blocks()) {
            const std::size_t out = cfg.upsample_factor * cfg.width(b + 1);
            detail::add_linear(params, "upsample" + std::to_string(b) + ".joint", c, out, rng);
            detail::add_linear(params, "upsample" + std::to_string(b) + ".skeleton", c, out, rng);
        }
    }
}

/// x * sigmoid(conv1d(x)) + x over the token axis; shape preserved.
inline Tensor coord_attention_forward(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    Tensor gate = sigmoid(tape, conv1d(tape, x, weight, bias, weight.dim(1) / 2));
    return add(tape, mul(tape, x, gate), x);
}

/// Pre-norm multi-head self-attention with a residual around the unit:
/// x + W_o concat_h(softmax(Q_h K_h^T / sqrt(d_k)) V_h), with Q, K, V taken
/// from layer_norm(x). Head h owns columns [h*d_k, (h+1)*d_k) of W_q/W_k/W_v.
/// When `attention` is non-null the per-head T x T weights are appended to it.
inline Tensor mhsa_forward(Tape& tape, const Tensor& x, const ParamStore& params, const std::string& prefix,
                           std::size_t heads, std::vector<Tensor>* attention = nullptr) {
    detail::require_rank(x, 2, "mhsa_forward", "input");
    const std::size_t c = x.dim(1);
    if (heads == 0 || c % heads != 0) {
        throw ConfigError("mhsa: width " + std::to_string(c) + " not divisible by " + std::to_string(heads) + " heads");
    }
    const std::size_t d_k = c / heads;
    Tensor normed = layer_norm(tape, x, params.get(prefix + ".norm.gain"), params.get(prefix + ".norm.shift"));
    Tensor q = detail::apply_linear(tape, normed, params, prefix + ".attn.q");
    Tensor k = detail::apply_linear(tape, normed, params, prefix + ".attn.k");
    Tensor v = detail::apply_linear(tape, normed, params, prefix + ".attn.v");
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_k));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        // scaling the T x d_k query is cheaper than scaling the T x T scores
        Tensor qh = scale(tape, slice_cols(tape, q, h * d_k, d_k), inv_sqrt);
        Tensor kh = slice_cols(tape, k, h * d_k, d_k);
        Tensor vh = slice_cols(tape, v, h * d_k, d_k);
        Tensor scores = matmul(tape, qh, transpose(tape, kh));
        Tensor weights = softmax(tape, scores, 1);
        if (attention) attention->push_back(weights);
        outs.push_back(matmul(tape, weights, vh));
    }
    Tensor merged = detail::apply_linear(tape, concat_cols(tape, outs), params, prefix + ".attn.o");
    return add(tape, merged, x);
}

inline Tensor branch_forward(Tape& tape, Tensor x, const ParamStore& params, const std::string& prefix,
                             std::size_t heads, bool attention) {
    if (attention) {
        x = coord_attention_forward(tape, x, params.get(prefix + ".coord.weight"), params.get(prefix + ".coord.bias"));
        x = mhsa_forward(tape, x, params, prefix, heads);
    }
    return detail::apply_linear(tape, x, params, prefix + ".linear");
}

/// One refinement block (0-based `block`). Each branch runs coordinate
/// attention, MHSA and a linear; the skeleton branch then feeds the joint
/// branch through the fusion linear, and both end in a projection.
inline TokenFeatures interaction_block_forward(Tape& tape, const TokenFeatures& tokens, const ParamStore& params,
                                              std::size_t block, const InteractionConfig& cfg) {
    if (block >= cfg.blocks()) throw ContractError("interaction block " + std::to_string(block) + " does not exist");
    const std::size_t c = cfg.width(block);
    if (tokens.joints.rank() != 2 || tokens.joints.dim(1) != c || tokens.skeleton.shape() != tokens.joints.shape()) {
        throw DimensionError("block " + std::to_string(block) + " expects T x " + std::to_string(c) +
                             " joint/skeleton tokens, got " + shape_str(tokens.joints.shape()) + " / " +
                             shape_str(tokens.skeleton.shape()));
    }
    const std::string p = block_prefix(block);
    Tensor j = branch_forward(tape, tokens.joints, params, p + ".joint", cfg.heads, true);
    Tensor s = branch_forward(tape, tokens.skeleton, params, p + ".skeleton", cfg.heads, cfg.mirror_skeleton);
    if (cfg.fusion) j = add(tape, j, detail::apply_linear(tape, s, params, p + ".fuse"));
    j = detail::apply_linear(tape, j, params, p + ".joint.proj");
    s = detail::apply_linear(tape, s, params, p + ".skeleton.proj");
    return {j, s, tokens.stage};
}

/// Token upsample after block `block`: per token a linear C -> f*C', then the
/// row is split into f consecutive tokens of width C' (row-major reshape).
inline TokenFeatures token_upsample(Tape& tape, const TokenFeatures& tokens, const ParamStore& params,
                                   std::size_t block, const InteractionConfig& cfg) {
    if (block + 1 >= cfg.blocks()) {
        throw ContractError("token_upsample called after the final block (" + std::to_string(block) + ")");
    }
    const std::size_t t = tokens.joints.dim(0);
    const std::size_t next = cfg.width(block + 1);
    const std::string p = "upsample" + std::to_string(block);
    auto lift = [&](const Tensor& x, const std::string& branch) {
        Tensor y = detail::apply_linear(tape, x, params, p + "." + branch);
        return reshape(tape, y, {t * cfg.upsample_factor, next});
    };
    return {lift(tokens.joints, "joint"), lift(tokens.skeleton, "skeleton"), tokens.stage + 1};
}

}  // namespace rejshand
