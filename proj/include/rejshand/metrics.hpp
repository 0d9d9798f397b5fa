#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/tensor.hpp"

namespace rejshand {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline Points to_points(const Tensor& t) {
    if (t.rank() != 2 || t.dim(1) != 3) throw DimensionError("expected N x 3 points, got " + shape_str(t.shape()));
    return Eigen::Map<const Points>(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), 3);
}

/// Similarity transform x -> scale * rotation * x + translation.
struct Alignment {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    double scale = 1.0;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    // Set when the cross-covariance has rank < 2 and the rotation is not
    // uniquely determined; the returned transform is still a minimizer.
    bool degenerate = false;

    Points apply(const Points& p) const {
        Points out = (scale * (p * rotation.transpose())).rowwise() + translation.transpose();
        return out;
    }
};

/// Least-squares similarity alignment of `pred` onto `gt` (Umeyama): SVD of
/// the centered cross-covariance, with the smallest singular direction
/// flipped when needed so that det(R) = +1.
inline Alignment umeyama_align(const Points& pred, const Points& gt) {
    if (pred.rows() != gt.rows()) {
        throw DimensionError("umeyama_align: " + std::to_string(pred.rows()) + " vs " + std::to_string(gt.rows()) +
                             " points");
    }
    if (pred.rows() < 3) throw ContractError("umeyama_align needs at least 3 points");
    const double n = static_cast<double>(pred.rows());
    const Eigen::RowVector3d mu_p = pred.colwise().mean();
    const Eigen::RowVector3d mu_g = gt.colwise().mean();
    const Points pc = pred.rowwise() - mu_p;
    const Points gc = gt.rowwise() - mu_g;
    const double var_p = pc.squaredNorm() / n;
    const double var_g = gc.squaredNorm() / n;
    if (var_p == 0.0 || var_g == 0.0) throw ContractError("umeyama_align: all points coincide");

    const Eigen::Matrix3d cov = gc.transpose() * pc / n;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s(2, 2) = -1.0;

    Alignment a;
    a.rotation = svd.matrixU() * s * svd.matrixV().transpose();
    a.scale = (sv.asDiagonal() * s).trace() / var_p;
    a.translation = mu_g.transpose() - a.scale * a.rotation * mu_p.transpose();
    a.degenerate = sv(1) <= 1e-12 * std::max(1.0, sv(0));
    return a;
}

enum class ErrorMode { mean_euclidean, rmse };

/// Error after similarity alignment, in millimeters (inputs in meters).
/// mean_euclidean averages per-point distances (the usual MPJPE reading);
/// rmse is the root of the mean squared distance.
inline double pa_error(const Points& pred, const Points& gt, ErrorMode mode = ErrorMode::mean_euclidean) {
    const Alignment a = umeyama_align(pred, gt);
    const Points aligned = a.apply(pred);
    const Eigen::VectorXd d = (aligned - gt).rowwise().norm();
    const double value = mode == ErrorMode::mean_euclidean ? d.mean() : std::sqrt(d.squaredNorm() / static_cast<double>(d.size()));
    return 1000.0 * value;
}

/// Symmetric F-score at `tau_mm` between point sets in meters. A point counts
/// as matched when its nearest neighbour in the other set is strictly closer
/// than tau. Exact brute-force nearest neighbours.
inline double fscore(const Points& pred, const Points& gt, double tau_mm) {
    if (pred.rows() == 0 || gt.rows() == 0) throw ContractError("fscore: empty point set");
    if (!(tau_mm > 0)) throw ContractError("fscore: tau must be positive");
    const double tau = tau_mm / 1000.0;
    auto matched_fraction = [tau](const Points& from, const Points& to) {
        std::size_t hits = 0;
        for (Eigen::Index i = 0; i < from.rows(); ++i) {
            const double nearest = (to.rowwise() - from.row(i)).rowwise().squaredNorm().minCoeff();
            if (std::sqrt(nearest) < tau) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(from.rows());
    };
    const double precision = matched_fraction(pred, gt);
    const double recall = matched_fraction(gt, pred);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

struct LatencyStats {
    double mean_ms = 0;
    double median_ms = 0;
    double p95_ms = 0;
    double fps = 0;  // 1000 / median_ms
    std::size_t iters = 0;
};

inline LatencyStats summarize_latency(std::vector<double> samples_ms) {
    if (samples_ms.empty()) throw ContractError("latency summary of zero samples");
    std::sort(samples_ms.begin(), samples_ms.end());
    const std::size_t n = samples_ms.size();
    LatencyStats s;
    s.iters = n;
    double total = 0;
    for (double v : samples_ms) total += v;
    s.mean_ms = total / static_cast<double>(n);
    s.median_ms = n % 2 ? samples_ms[n / 2] : 0.5 * (samples_ms[n / 2 - 1] + samples_ms[n / 2]);
    // nearest-rank percentile
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
    s.p95_ms = samples_ms[std::max<std::size_t>(rank, 1) - 1];
    s.fps = 1000.0 / s.median_ms;
    return s;
}

/// Wall-clock latency of `run()` over `iters` timed calls after `warmup`
/// untimed ones, measured on the calling thread.
template <class Fn>
LatencyStats bench_fps(Fn&& run, std::size_t iters, std::size_t warmup) {
    if (iters == 0) throw ContractError("bench_fps: iters must be >= 1");
    for (std::size_t i = 0; i < warmup; ++i) run();
    std::vector<double> ms;
    ms.reserve(iters);
    for (std::size_t i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return summarize_latency(std::move(ms));
}

/// Report key for an F-score threshold: 5 -> "f@05", 15 -> "f@15".
inline std::string fscore_key(double tau_mm) {
    const auto whole = static_cast<long>(std::lround(tau_mm));
    std::string digits = std::abs(tau_mm - static_cast<double>(whole)) < 1e-9 ? std::to_string(whole) : std::to_string(tau_mm);
    if (digits.size() < 2) digits = "0" + digits;
    return "f@" + digits;
}

struct MetricsReport {
    std::size_t samples = 0;
    double pa_mpjpe = 0;  // mm
    double pa_mpvpe = 0;  // mm
    std::map<double, double> f_at;  // tau (mm) -> score
    std::optional<LatencyStats> latency;
    std::optional<std::size_t> head_parameters;
    std::optional<std::size_t> total_parameters;
};

struct SampleMetrics {
    double pa_mpjpe = 0;
    double pa_mpvpe = 0;
    std::vector<double> f_scores;
};

struct EvalOptions {
    ErrorMode mode = ErrorMode::mean_euclidean;
    bool align_fscore = true;
    std::vector<double> thresholds_mm{5.0, 15.0};
};

/// Per-sample metrics for one prediction (joints J x 3, vertices V x 3, meters).
inline SampleMetrics evaluate_sample(const Points& pred_joints, const Points& gt_joints, const Points& pred_verts,
                                     const Points& gt_verts, const EvalOptions& opt) {
    SampleMetrics m;
    m.pa_mpjpe = pa_error(pred_joints, gt_joints, opt.mode);
    m.pa_mpvpe = pa_error(pred_verts, gt_verts, opt.mode);
    const Points verts = opt.align_fscore ? umeyama_align(pred_verts, gt_verts).apply(pred_verts) : pred_verts;
    for (double tau : opt.thresholds_mm) m.f_scores.push_back(fscore(verts, gt_verts, tau));
    return m;
}

/// Mean over samples in index order, so the result does not depend on how
/// samples were distributed across workers.
inline MetricsReport reduce_metrics(const std::vector<SampleMetrics>& per_sample, const EvalOptions& opt) {
    MetricsReport r;
    r.samples = per_sample.size();
    if (per_sample.empty()) return r;
    std::vector<double> f(opt.thresholds_mm.size(), 0.0);
    for (const auto& s : per_sample) {
        r.pa_mpjpe += s.pa_mpjpe;
        r.pa_mpvpe += s.pa_mpvpe;
        for (std::size_t i = 0; i < f.size(); ++i) f[i] += s.f_scores[i];
    }
    const double n = static_cast<double>(per_sample.size());
    r.pa_mpjpe /= n;
    r.pa_mpvpe /= n;
    for (std::size_t i = 0; i < f.size(); ++i) r.f_at[opt.thresholds_mm[i]] = f[i] / n;
    return r;
}

}  // namespace rejshand
