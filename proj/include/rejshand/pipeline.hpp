#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "rejshand/config.hpp"
#include "rejshand/data_io.hpp"
#include "rejshand/metrics.hpp"
#include "rejshand/model.hpp"
#include "rejshand/optim.hpp"

// Train / evaluate / infer / bench, shared by the CLI and the test suites.
namespace rejshand {

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double lr = 0;
    double l2d = 0, l3d = 0, lv = 0, total = 0;

    std::string line() const {
        std::ostringstream os;
        os << std::setprecision(17) << "epoch=" << epoch << " lr=" << lr << " l2d=" << l2d << " l3d=" << l3d
           << " lv=" << lv << " total=" << total;
        return os.str();
    }
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    double best_total = std::numeric_limits<double>::infinity();
};

inline Targets targets_of(const HandSample& s) { return {s.kp2d, s.joints3d, s.vertices}; }

inline void check_sample_fits(const Model& model, const HandSample& s) {
    const auto& cfg = model.config();
    const Shape image{cfg.backbone.in_channels, cfg.backbone.input_size, cfg.backbone.input_size};
    if (s.image.shape() != image || s.kp2d.dim(0) != cfg.joints || s.vertices.dim(0) != cfg.mesh.vertices) {
        throw ValidationError("sample '" + s.id + "' (image " + shape_str(s.image.shape()) + ", " +
                              std::to_string(s.kp2d.dim(0)) + " joints, " + std::to_string(s.vertices.dim(0)) +
                              " vertices) does not fit the model configuration");
    }
}

namespace detail {

inline bool all_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

[[noreturn]] inline void report_non_finite(const Tape& tape, const ParamStore& params, std::size_t epoch) {
    std::string where;
    for (const auto& [name, t] : params) {
        if (!all_finite(t.data()) || (t.has_grad() && !all_finite(t.grad()))) {
            where = "parameter " + name;
            break;
        }
    }
    if (where.empty()) {
        for (std::size_t i = 0; i < tape.nodes().size(); ++i) {
            if (!all_finite(tape.nodes()[i].output.data())) {
                where = "tape node " + std::to_string(i) + " (" + tape.nodes()[i].op + ")";
                break;
            }
        }
    }
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + "; first non-finite tensor: " +
                       (where.empty() ? std::string("loss") : where));
}

}  // namespace detail

/// Full-batch-per-step Adam training with the step learning-rate schedule.
/// Sample order is reshuffled each epoch from the run seed, so the whole run
/// is a deterministic function of (seed, config, data). `on_epoch` sees each
/// epoch's mean losses (computed before that epoch's updates), `on_best` fires
/// whenever the epoch total improves.
inline TrainResult train_model(Model& model, const std::vector<HandSample>& data, const RunConfig& cfg,
                               const std::function<void(const EpochLog&)>& on_epoch = {},
                               const std::function<void(const EpochLog&)>& on_best = {}) {
    if (data.empty()) throw ValidationError("training set is empty");
    for (const auto& s : data) check_sample_fits(model, s);
    Adam adam(cfg.adam());
    ParamStore& params = model.params();
    params.zero_grad();
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    TrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        Rng shuffle(mix_seed(cfg.seed, 0xe90c + epoch));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        EpochLog log;
        log.epoch = epoch + 1;
        log.lr = cfg.optim.lr_at(epoch);
        adam.set_lr(log.lr);
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.optim.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.optim.batch_size);
            Tape tape;
            std::vector<Tensor> totals;
            for (std::size_t b = begin; b < end; ++b) {
                const HandSample& s = data[order[b]];
                ForwardResult out = model.forward(tape, s.image);
                LossBreakdown l = compute_losses(tape, out, targets_of(s), cfg.loss, cfg.per_point_norm);
                log.l2d += l.l2d.item();
                log.l3d += l.l3d.item();
                log.lv += l.lv.item();
                log.total += l.total.item();
                totals.push_back(l.total);
            }
            Tensor batch = totals.front();
            for (std::size_t i = 1; i < totals.size(); ++i) batch = add(tape, batch, totals[i]);
            batch = scale(tape, batch, 1.0 / static_cast<double>(totals.size()));
            if (!std::isfinite(batch.item())) detail::report_non_finite(tape, params, log.epoch);
            tape.backward(batch);
            for (const auto& [name, t] : params) {
                if (t.has_grad() && !detail::all_finite(t.grad())) detail::report_non_finite(tape, params, log.epoch);
            }
            adam.step(params);
            params.zero_grad();
        }
        const double n = static_cast<double>(data.size());
        log.l2d /= n;
        log.l3d /= n;
        log.lv /= n;
        log.total /= n;
        result.epochs.push_back(log);
        if (on_epoch) on_epoch(log);
        if (log.total < result.best_total) {
            result.best_total = log.total;
            if (on_best) on_best(log);
        }
    }
    return result;
}

/// Inference without a gradient tape.
inline ForwardResult predict(const Model& model, const Tensor& image) {
    Tape tape(false);
    return model.forward(tape, image);
}

/// Metrics for parallel prediction/ground-truth lists. Samples are split
/// round-robin over `workers` threads; the reduction runs in sample order, so
/// the report does not depend on the worker count.
inline MetricsReport evaluate_pairs(std::size_t count, const std::function<SampleMetrics(std::size_t)>& per_sample,
                                    const EvalOptions& opt, std::size_t workers = 1) {
    std::vector<SampleMetrics> results(count);
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) results[i] = per_sample(i);
    } else {
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                try {
                    for (std::size_t i = w; i < count; i += workers) results[i] = per_sample(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    return reduce_metrics(results, opt);
}

inline MetricsReport evaluate_samples(const std::vector<HandSample>& pred, const std::vector<HandSample>& gt,
                                     const EvalOptions& opt, std::size_t workers = 1) {
    if (pred.size() != gt.size()) {
        throw ValidationError("prediction count " + std::to_string(pred.size()) + " differs from ground truth " +
                              std::to_string(gt.size()));
    }
    return evaluate_pairs(
        gt.size(),
        [&](std::size_t i) {
            return evaluate_sample(to_points(pred[i].joints3d), to_points(gt[i].joints3d), to_points(pred[i].vertices),
                                   to_points(gt[i].vertices), opt);
        },
        opt, workers);
}

inline MetricsReport evaluate_model(const Model& model, const std::vector<HandSample>& data, const EvalOptions& opt,
                                    std::size_t workers = 1) {
    for (const auto& s : data) check_sample_fits(model, s);
    return evaluate_pairs(
        data.size(),
        [&](std::size_t i) {
            ForwardResult out = predict(model, data[i].image);
            return evaluate_sample(to_points(out.joints3d), to_points(data[i].joints3d), to_points(out.mesh.coords),
                                   to_points(data[i].vertices), opt);
        },
        opt, workers);
}

/// Single-image forward latency on a seeded random input.
inline LatencyStats bench_model(const Model& model, std::size_t iters, std::size_t warmup, std::uint64_t seed = 0) {
    const auto& b = model.config().backbone;
    Rng rng(seed);
    std::vector<double> pixels(b.in_channels * b.input_size * b.input_size);
    for (auto& v : pixels) v = rng.uniform();
    const Tensor image = Tensor::from({b.in_channels, b.input_size, b.input_size}, std::move(pixels));
    return bench_fps([&]() { (void)predict(model, image); }, iters, warmup);
}

// ---------------------------------------------------------------------------
// Report serialization

inline constexpr double kReferenceParamsMillions = 1.91;

inline void write_report_text(const MetricsReport& r, std::ostream& os) {
    os << std::setprecision(10);
    os << "samples=" << r.samples << '\n';
    if (r.samples > 0) {
        os << "pa_mpjpe_mm=" << r.pa_mpjpe << '\n' << "pa_mpvpe_mm=" << r.pa_mpvpe << '\n';
        for (const auto& [tau, f] : r.f_at) os << fscore_key(tau) << '=' << f << '\n';
    }
    if (r.latency) {
        os << "latency_mean_ms=" << r.latency->mean_ms << '\n'
           << "latency_median_ms=" << r.latency->median_ms << '\n'
           << "latency_p95_ms=" << r.latency->p95_ms << '\n'
           << "fps=" << r.latency->fps << '\n'
           << "latency_iters=" << r.latency->iters << '\n';
    }
    if (r.head_parameters) os << "params_head=" << *r.head_parameters << '\n';
    if (r.total_parameters) os << "params_total=" << *r.total_parameters << '\n';
    if (r.head_parameters) os << "params_reference_m=" << kReferenceParamsMillions << '\n';
}

inline nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json j;
    j["samples"] = r.samples;
    if (r.samples > 0) {
        j["pa_mpjpe_mm"] = r.pa_mpjpe;
        j["pa_mpvpe_mm"] = r.pa_mpvpe;
        nlohmann::json f = nlohmann::json::object();
        for (const auto& [tau, score] : r.f_at) f[fscore_key(tau)] = score;
        j["f_scores"] = f;
    }
    if (r.latency) {
        j["latency"] = {{"mean_ms", r.latency->mean_ms},
                        {"median_ms", r.latency->median_ms},
                        {"p95_ms", r.latency->p95_ms},
                        {"fps", r.latency->fps},
                        {"iters", r.latency->iters}};
    }
    if (r.head_parameters || r.total_parameters) {
        nlohmann::json p;
        if (r.head_parameters) p["head"] = *r.head_parameters;
        if (r.total_parameters) p["total"] = *r.total_parameters;
        p["reference_millions"] = kReferenceParamsMillions;
        j["parameters"] = p;
    }
    return j;
}

}  // namespace rejshand
