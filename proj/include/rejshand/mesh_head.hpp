#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/ops.hpp"
#include "rejshand/params.hpp"
#include "rejshand/pose_heads.hpp"

namespace rejshand {

struct MeshConfig {
    std::size_t vertices = 778;
    std::size_t token_dim = 64;

    void validate() const {
        if (vertices == 0 || token_dim == 0) throw ConfigError("mesh sizes must be positive");
    }
};

struct MeshVertices {
    Tensor tokens;  // V x token_dim
    Tensor coords;  // V x 3, meters, root-relative
};

/// Linear map from mesh vertices to skeletal joints: `matrix` (R x V,
/// row-stochastic) regresses R joints, `tip_indices` slices K more straight
/// from the vertices, and `joint_order` permutes the R + K results into the
/// output joint order (output row i takes combined row joint_order[i]).
struct JointRegressor {
    Tensor matrix;
    std::vector<std::size_t> tip_indices;
    std::vector<std::size_t> joint_order;

    std::size_t joints() const { return matrix.dim(0) + tip_indices.size(); }
    std::size_t vertices() const { return matrix.dim(1); }

    void validate() const {
        if (!matrix.defined() || matrix.rank() != 2) throw AssetError("regressor matrix must be a 2-D matrix");
        const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double v = matrix.at(r, c);
                if (!std::isfinite(v) || v < 0.0) {
                    throw AssetError("regressor entry (" + std::to_string(r) + ", " + std::to_string(c) +
                                     ") is negative or non-finite");
                }
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-4) {
                throw AssetError("regressor row " + std::to_string(r) + " sums to " + std::to_string(s) + ", not 1");
            }
        }
        std::set<std::size_t> seen;
        for (auto t : tip_indices) {
            if (t >= cols) throw AssetError("tip index " + std::to_string(t) + " out of range for " + std::to_string(cols) + " vertices");
            if (!seen.insert(t).second) throw AssetError("duplicate tip index " + std::to_string(t));
        }
        const std::size_t n = joints();
        if (joint_order.size() != n) {
            throw AssetError("joint_order has " + std::to_string(joint_order.size()) + " entries for " +
                             std::to_string(n) + " joints");
        }
        std::vector<bool> hit(n, false);
        for (auto j : joint_order) {
            if (j >= n || hit[j]) throw AssetError("joint_order is not a permutation of 0.." + std::to_string(n - 1));
            hit[j] = true;
        }
    }

    /// Seeded row-stochastic stand-in: each row spreads random positive weight
    /// over `support` distinct vertices.
    static JointRegressor synthetic(std::size_t rows, std::size_t vertices, std::vector<std::size_t> tips,
                                    std::uint64_t seed, std::size_t support = 12) {
        Rng rng(mix_seed(seed, 0x5e9));
        std::vector<double> m(rows * vertices, 0.0);
        support = std::min(support, vertices);
        for (std::size_t r = 0; r < rows; ++r) {
            std::set<std::size_t> picked;
            while (picked.size() < support) picked.insert(rng.below(vertices));
            double total = 0.0;
            std::vector<double> w;
            for (std::size_t i = 0; i < support; ++i) {
                w.push_back(0.1 + rng.uniform());
                total += w.back();
            }
            std::size_t i = 0;
            for (auto v : picked) m[r * vertices + v] = w[i++] / total;
        }
        JointRegressor reg;
        reg.matrix = Tensor::from({rows, vertices}, std::move(m));
        reg.tip_indices = std::move(tips);
        reg.joint_order.resize(reg.joints());
        std::iota(reg.joint_order.begin(), reg.joint_order.end(), std::size_t{0});
        return reg;
    }
};

/// Plain matrix asset: "rows cols" then rows*cols whitespace-separated values.
inline Tensor read_matrix_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open matrix file " + path.string());
    std::size_t rows = 0, cols = 0;
    if (!(is >> rows >> cols) || rows == 0 || cols == 0) throw LoadError("bad matrix header in " + path.string());
    std::vector<double> data(rows * cols);
    for (auto& v : data) {
        if (!(is >> v)) throw LoadError("matrix file " + path.string() + " has fewer than rows*cols values");
    }
    return Tensor::from({rows, cols}, std::move(data));
}

inline void write_matrix_file(const Tensor& m, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw LoadError("cannot write matrix file " + path.string());
    os << m.dim(0) << ' ' << m.dim(1) << '\n' << std::setprecision(17);
    for (std::size_t r = 0; r < m.dim(0); ++r) {
        for (std::size_t c = 0; c < m.dim(1); ++c) os << (c ? " " : "") << m.at(r, c);
        os << '\n';
    }
}

inline void register_mesh_params(ParamStore& params, const MeshConfig& cfg, std::size_t tokens, std::size_t width,
                                 Rng& rng) {
    params.add("mesh.lift", init_uniform({cfg.vertices, tokens}, tokens, rng));
    params.add("mesh.channel.weight", init_uniform({2 * width, cfg.token_dim}, 2 * width, rng));
    params.add("mesh.channel.bias", Tensor::zeros({cfg.token_dim}));
    params.add("mesh.vertex.weight", init_uniform({cfg.token_dim, 3}, cfg.token_dim, rng));
    params.add("mesh.vertex.bias", Tensor::zeros({3}));
}

/// Final-stage tokens -> mesh tokens -> vertex coordinates: concat the two
/// branches along channels, lift T tokens to V over the token axis, project
/// channels to the mesh-token width, then decode xyz.
inline MeshVertices mesh_token_forward(Tape& tape, const TokenFeatures& tokens, const ParamStore& params) {
    const Tensor& lift = params.get("mesh.lift");
    if (tokens.joints.dim(0) != lift.dim(1)) {
        throw ContractError("mesh head expects " + std::to_string(lift.dim(1)) + " final-stage tokens, got " +
                            shape_str(tokens.joints.shape()) + " (stage " + std::to_string(tokens.stage) + ")");
    }
    Tensor merged = concat_cols(tape, {tokens.joints, tokens.skeleton});
    Tensor lifted = matmul(tape, lift, merged);
    Tensor mesh_tokens = linear(tape, lifted, params.get("mesh.channel.weight"), params.get("mesh.channel.bias"));
    Tensor coords = linear(tape, mesh_tokens, params.get("mesh.vertex.weight"), params.get("mesh.vertex.bias"));
    return {mesh_tokens, coords};
}

/// Regressed joints plus sliced fingertips, permuted into output order.
inline Tensor joints3d_forward(Tape& tape, const Tensor& coords, const JointRegressor& reg) {
    if (coords.rank() != 2 || coords.dim(1) != 3 || coords.dim(0) != reg.vertices()) {
        throw DimensionError("joints3d_forward expects [" + std::to_string(reg.vertices()) + "x3] vertices, got " +
                             shape_str(coords.shape()));
    }
    Tensor regressed = matmul(tape, reg.matrix, coords);
    Tensor all = reg.tip_indices.empty()
                     ? regressed
                     : concat_rows(tape, {regressed, gather_rows(tape, coords, reg.tip_indices)});
    return gather_rows(tape, all, reg.joint_order);
}

}  // namespace rejshand
