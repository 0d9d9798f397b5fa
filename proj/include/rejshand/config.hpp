#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/losses.hpp"
#include "rejshand/mesh_head.hpp"
#include "rejshand/metrics.hpp"
#include "rejshand/model.hpp"
#include "rejshand/optim.hpp"

namespace rejshand {

namespace fs = std::filesystem;

/// Flat "key = value" settings. '#' starts a comment; "include = <path>"
/// pulls in another file (relative to the including file) whose keys the
/// including file may then override.
class KeyValueConfig {
   public:
    static KeyValueConfig load(const fs::path& path) {
        KeyValueConfig cfg;
        std::set<fs::path> stack;
        cfg.load_into(path, stack);
        return cfg;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    /// "key=value" override as given on the command line.
    void set_assignment(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

   private:
    void load_into(const fs::path& path, std::set<fs::path>& stack) {
        const fs::path canon = fs::weakly_canonical(path);
        if (!stack.insert(canon).second) throw ConfigError("include cycle at " + path.string());
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file " + path.string());
        std::string line;
        std::size_t no = 0;
        while (std::getline(is, line)) {
            ++no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(path.string() + ":" + std::to_string(no) + ": expected key = value");
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key == "include") {
                fs::path inc = value;
                if (inc.is_relative()) inc = path.parent_path() / inc;
                load_into(inc, stack);
            } else {
                values_[key] = value;
            }
        }
        stack.erase(canon);
    }

    std::map<std::string, std::string> values_;
};

/// Full-size input and the reference schedule: batch 32, 200 epochs, 5e-4
/// dropping to 5e-5 after epoch 100. Applied on top of the config file and
/// below command-line overrides.
inline void apply_full_scale(KeyValueConfig& kv) {
    kv.set("backbone.input_size", "224");
    kv.set("optim.batch_size", "32");
    kv.set("optim.epochs", "200");
    kv.set("optim.lr", "5e-4");
    kv.set("optim.lr_late", "5e-5");
    kv.set("optim.lr_boundary_epoch", "100");
}

struct OptimConfig {
    double lr = 5e-4;
    double lr_late = 5e-5;
    std::size_t lr_boundary_epoch = 100;
    std::size_t epochs = 200;
    std::size_t batch_size = 8;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    double lr_at(std::size_t epoch) const { return epoch < lr_boundary_epoch ? lr : lr_late; }
};

struct AssetConfig {
    std::string regressor;  // empty: seeded synthetic regressor
    std::string faces;      // empty: point-cloud OBJ export
    std::uint64_t regressor_seed = 0;
    // Placeholders, not MANO fingertip vertices; set them from your asset.
    std::vector<std::size_t> tip_indices{155, 311, 466, 622, 777};
    std::vector<std::size_t> joint_order;  // empty: identity
};

struct RunConfig {
    ModelConfig model;
    LossWeights loss;
    PointNorm per_point_norm = PointNorm::l1;
    OptimConfig optim;
    AssetConfig assets;
    std::uint64_t seed = 0;
    std::string train_manifest;
    std::string eval_manifest;
    EvalOptions metrics;
    std::size_t eval_workers = 1;
    std::size_t bench_iters = 100;
    std::size_t bench_warmup = 10;

    /// Builds from key/value pairs; unknown keys are errors.
    static RunConfig from(const KeyValueConfig& kv) {
        RunConfig c;
        bool boundary_set = false;
        for (const auto& [key, value] : kv.values()) {
            c.apply(key, value, boundary_set);
        }
        if (!boundary_set) c.optim.lr_boundary_epoch = c.optim.epochs / 2;
        c.apply_env_roots();
        return c;
    }

    /// Validates everything a command could touch, before any heavy work.
    void validate() const {
        model.validate();
        loss.validate();
        if (optim.lr <= 0 || optim.lr_late <= 0) throw ConfigError("learning rates must be positive");
        if (optim.epochs == 0) throw ConfigError("optim.epochs must be positive");
        if (optim.lr_boundary_epoch > optim.epochs) {
            throw ConfigError("optim.lr_boundary_epoch " + std::to_string(optim.lr_boundary_epoch) + " outside [0, " +
                              std::to_string(optim.epochs) + "]");
        }
        if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be positive");
        if (assets.tip_indices.size() >= model.joints) throw ConfigError("assets.tip_indices must leave regressed joints");
        for (auto t : assets.tip_indices) {
            if (t >= model.mesh.vertices) throw ConfigError("assets.tip_indices entry " + std::to_string(t) + " >= vertices");
        }
        if (!assets.joint_order.empty() && assets.joint_order.size() != model.joints) {
            throw ConfigError("assets.joint_order must list " + std::to_string(model.joints) + " joints");
        }
        for (const auto& p : {assets.regressor, assets.faces}) {
            if (!p.empty() && !fs::exists(p)) throw ConfigError("asset path does not exist: " + p);
        }
        if (metrics.thresholds_mm.empty()) throw ConfigError("metrics.f_thresholds_mm must not be empty");
        for (double t : metrics.thresholds_mm) {
            if (!(t > 0)) throw ConfigError("F-score thresholds must be positive");
        }
        if (eval_workers == 0) throw ConfigError("eval.workers must be positive");
        if (bench_iters == 0) throw ConfigError("bench.iters must be positive");
    }

    /// Loads (or synthesizes) the joint regressor described by `assets`.
    JointRegressor make_regressor() const {
        JointRegressor reg;
        const std::size_t rows = model.joints - assets.tip_indices.size();
        if (assets.regressor.empty()) {
            reg = JointRegressor::synthetic(rows, model.mesh.vertices, assets.tip_indices, assets.regressor_seed);
        } else {
            reg.matrix = read_matrix_file(assets.regressor);
            reg.tip_indices = assets.tip_indices;
            if (reg.matrix.dim(0) != rows) {
                throw AssetError("regressor has " + std::to_string(reg.matrix.dim(0)) + " rows, expected " + std::to_string(rows));
            }
        }
        reg.joint_order = assets.joint_order;
        if (reg.joint_order.empty()) {
            reg.joint_order.resize(model.joints);
            std::iota(reg.joint_order.begin(), reg.joint_order.end(), std::size_t{0});
        }
        reg.validate();
        return reg;
    }

    AdamOptions adam() const { return {optim.lr, optim.beta1, optim.beta2, optim.eps}; }

    /// Every key with its effective value, in the config file syntax.
    std::string dump() const {
        std::ostringstream os;
        os.precision(17);
        auto list = [](const auto& v) {
            std::ostringstream s;
            s.precision(17);
            for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
            return s.str();
        };
        os << "seed = " << seed << '\n'
           << "backbone.stage_channels = " << list(model.backbone.stage_channels) << '\n'
           << "backbone.input_size = " << model.backbone.input_size << '\n'
           << "model.joints = " << model.joints << '\n'
           << "model.parents = " << list(model.parents) << '\n'
           << "model.expansion_channels = " << model.expansion_channels << '\n'
           << "model.heads = " << model.interaction.heads << '\n'
           << "model.d_k = " << list(model.interaction.d_k) << '\n'
           << "model.upsample_factor = " << model.interaction.upsample_factor << '\n'
           << "model.fusion = " << (model.interaction.fusion ? "true" : "false") << '\n'
           << "model.mirror_skeleton = " << (model.interaction.mirror_skeleton ? "true" : "false") << '\n'
           << "model.vertices = " << model.mesh.vertices << '\n'
           << "model.mesh_token_dim = " << model.mesh.token_dim << '\n'
           << "loss.k_2d = " << loss.k_2d << '\n'
           << "loss.k_3d = " << loss.k_3d << '\n'
           << "loss.k_v = " << loss.k_v << '\n'
           << "loss.per_point_norm = " << (per_point_norm == PointNorm::l1 ? "l1" : "l2") << '\n'
           << "optim.lr = " << optim.lr << '\n'
           << "optim.lr_late = " << optim.lr_late << '\n'
           << "optim.lr_boundary_epoch = " << optim.lr_boundary_epoch << '\n'
           << "optim.epochs = " << optim.epochs << '\n'
           << "optim.batch_size = " << optim.batch_size << '\n'
           << "optim.beta1 = " << optim.beta1 << '\n'
           << "optim.beta2 = " << optim.beta2 << '\n'
           << "optim.eps = " << optim.eps << '\n'
           << "assets.regressor = " << assets.regressor << '\n'
           << "assets.faces = " << assets.faces << '\n'
           << "assets.regressor_seed = " << assets.regressor_seed << '\n'
           << "assets.tip_indices = " << list(assets.tip_indices) << '\n'
           << "assets.joint_order = " << list(assets.joint_order) << '\n'
           << "data.train_manifest = " << train_manifest << '\n'
           << "data.eval_manifest = " << eval_manifest << '\n'
           << "metrics.mode = " << (metrics.mode == ErrorMode::mean_euclidean ? "mean_euclidean" : "rmse") << '\n'
           << "metrics.align_fscore = " << (metrics.align_fscore ? "true" : "false") << '\n'
           << "metrics.f_thresholds_mm = " << list(metrics.thresholds_mm) << '\n'
           << "eval.workers = " << eval_workers << '\n'
           << "bench.iters = " << bench_iters << '\n'
           << "bench.warmup = " << bench_warmup << '\n';
        return os.str();
    }

   private:
    static std::size_t to_size(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
            const auto r = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return static_cast<std::size_t>(r);
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
        }
    }
    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return r;
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a number, got '" + v + "'");
        }
    }
    static bool to_bool(const std::string& key, const std::string& v) {
        if (v == "true" || v == "1" || v == "on") return true;
        if (v == "false" || v == "0" || v == "off") return false;
        throw ConfigError(key + ": expected true/false, got '" + v + "'");
    }
    static std::vector<std::string> split(const std::string& v) {
        std::vector<std::string> out;
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = KeyValueConfig::trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }
    static std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
        std::vector<std::size_t> out;
        for (const auto& s : split(v)) out.push_back(to_size(key, s));
        return out;
    }
    static std::vector<double> to_doubles(const std::string& key, const std::string& v) {
        std::vector<double> out;
        for (const auto& s : split(v)) out.push_back(to_double(key, s));
        return out;
    }

    void apply(const std::string& key, const std::string& v, bool& boundary_set) {
        if (key == "seed") seed = to_size(key, v);
        else if (key == "backbone.stage_channels") model.backbone.stage_channels = to_sizes(key, v);
        else if (key == "backbone.input_size") model.backbone.input_size = to_size(key, v);
        else if (key == "model.joints") model.joints = to_size(key, v);
        else if (key == "model.parents") model.parents = to_sizes(key, v);
        else if (key == "model.expansion_channels") model.expansion_channels = to_size(key, v);
        else if (key == "model.heads") model.interaction.heads = to_size(key, v);
        else if (key == "model.d_k") model.interaction.d_k = to_sizes(key, v);
        else if (key == "model.upsample_factor") model.interaction.upsample_factor = to_size(key, v);
        else if (key == "model.fusion") model.interaction.fusion = to_bool(key, v);
        else if (key == "model.mirror_skeleton") model.interaction.mirror_skeleton = to_bool(key, v);
        else if (key == "model.vertices") model.mesh.vertices = to_size(key, v);
        else if (key == "model.mesh_token_dim") model.mesh.token_dim = to_size(key, v);
        else if (key == "loss.k_2d") loss.k_2d = to_double(key, v);
        else if (key == "loss.k_3d") loss.k_3d = to_double(key, v);
        else if (key == "loss.k_v") loss.k_v = to_double(key, v);
        else if (key == "loss.per_point_norm") {
            if (v == "l1") per_point_norm = PointNorm::l1;
            else if (v == "l2") per_point_norm = PointNorm::l2;
            else throw ConfigError(key + ": expected l1 or l2, got '" + v + "'");
        } else if (key == "optim.lr") optim.lr = to_double(key, v);
        else if (key == "optim.lr_late") optim.lr_late = to_double(key, v);
        else if (key == "optim.lr_boundary_epoch") {
            optim.lr_boundary_epoch = to_size(key, v);
            boundary_set = true;
        } else if (key == "optim.epochs") optim.epochs = to_size(key, v);
        else if (key == "optim.batch_size") optim.batch_size = to_size(key, v);
        else if (key == "optim.beta1") optim.beta1 = to_double(key, v);
        else if (key == "optim.beta2") optim.beta2 = to_double(key, v);
        else if (key == "optim.eps") optim.eps = to_double(key, v);
        else if (key == "assets.regressor") assets.regressor = v;
        else if (key == "assets.faces") assets.faces = v;
        else if (key == "assets.regressor_seed") assets.regressor_seed = to_size(key, v);
        else if (key == "assets.tip_indices") assets.tip_indices = to_sizes(key, v);
        else if (key == "assets.joint_order") assets.joint_order = to_sizes(key, v);
        else if (key == "data.train_manifest") train_manifest = v;
        else if (key == "data.eval_manifest") eval_manifest = v;
        else if (key == "metrics.mode") {
            if (v == "mean_euclidean") metrics.mode = ErrorMode::mean_euclidean;
            else if (v == "rmse") metrics.mode = ErrorMode::rmse;
            else throw ConfigError(key + ": expected mean_euclidean or rmse, got '" + v + "'");
        } else if (key == "metrics.align_fscore") metrics.align_fscore = to_bool(key, v);
        else if (key == "metrics.f_thresholds_mm") metrics.thresholds_mm = to_doubles(key, v);
        else if (key == "eval.workers") eval_workers = to_size(key, v);
        else if (key == "bench.iters") bench_iters = to_size(key, v);
        else if (key == "bench.warmup") bench_warmup = to_size(key, v);
        else throw ConfigError("unknown key '" + key + "'");
    }

    // REJSHAND_DATA_ROOT / REJSHAND_ASSET_ROOT prefix relative data and asset paths.
    void apply_env_roots() {
        auto prefix = [](std::string& path, const char* env) {
            const char* root = std::getenv(env);
            if (root && *root && !path.empty() && fs::path(path).is_relative()) path = (fs::path(root) / path).string();
        };
        prefix(train_manifest, "REJSHAND_DATA_ROOT");
        prefix(eval_manifest, "REJSHAND_DATA_ROOT");
        prefix(assets.regressor, "REJSHAND_ASSET_ROOT");
        prefix(assets.faces, "REJSHAND_ASSET_ROOT");
    }
};

}  // namespace rejshand
