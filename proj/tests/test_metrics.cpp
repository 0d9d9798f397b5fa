#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <atomic>
#include <cmath>

#include "rejshand/metrics.hpp"
#include "rejshand/params.hpp"
#include "rejshand/pipeline.hpp"

using namespace rejshand;

namespace {

Eigen::Matrix3d random_rotation(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return q.normalized().toRotationMatrix();
}

Points random_points(std::size_t n, Rng& rng, double extent = 0.1) {
    Points p(static_cast<Eigen::Index>(n), 3);
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        for (int a = 0; a < 3; ++a) p(i, a) = rng.uniform(-extent, extent);
    return p;
}

Points similarity(const Points& p, double s, const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
    Points out = (s * (p * r.transpose())).rowwise() + t.transpose();
    return out;
}

Eigen::Matrix3d euler(double a, double b, double c) {
    return (Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()) *
            Eigen::AngleAxisd(c, Eigen::Vector3d::UnitZ()))
        .toRotationMatrix();
}

// Root-mean-square distance (mm) after the best scale/translation for a fixed
// rotation; closed form given R, so only R needs searching.
double rmse_for_rotation(const Points& pred, const Points& gt, const Eigen::Matrix3d& r) {
    const Eigen::RowVector3d mp = pred.colwise().mean(), mg = gt.colwise().mean();
    const Points pc = (pred.rowwise() - mp) * r.transpose();
    const Points gc = gt.rowwise() - mg;
    const double s = std::max(0.0, (pc.array() * gc.array()).sum() / pc.squaredNorm());
    const Points d = s * pc - gc;
    return 1000.0 * std::sqrt(d.squaredNorm() / static_cast<double>(pred.rows()));
}

}  // namespace

// --- umeyama -------------------------------------------------------------------------------

TEST(Umeyama, IdenticalSetsGiveIdentity) {
    Rng rng(1);
    Points p = random_points(21, rng);
    Alignment a = umeyama_align(p, p);
    EXPECT_LE((a.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-12);
    EXPECT_NEAR(a.scale, 1.0, 1e-12);
    EXPECT_LE(a.translation.norm(), 1e-14);
}

TEST(Umeyama, RecoversKnownSimilarity) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Points p = random_points(21, rng);
        const Eigen::Matrix3d r0 = random_rotation(rng);
        const Eigen::Vector3d t0(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        Alignment a = umeyama_align(p, similarity(p, 2.0, r0, t0));
        EXPECT_LE((a.rotation - r0).norm(), 1e-9);
        EXPECT_NEAR(a.scale, 2.0, 1e-9);
        EXPECT_LE((a.translation - t0).norm(), 1e-9);
    }
}

TEST(Umeyama, NoTransformBeatsItOnRandomSearch) {
    Rng rng(3);
    Points pred = random_points(21, rng), gt = random_points(21, rng);
    Alignment a = umeyama_align(pred, gt);
    const double best = (a.apply(pred) - gt).squaredNorm();
    for (int i = 0; i < 1000; ++i) {
        const Eigen::Matrix3d r = random_rotation(rng);
        const Eigen::Vector3d t(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
        const double s = rng.uniform(0.2, 3.0);
        EXPECT_GE((similarity(pred, s, r, t) - gt).squaredNorm(), best - 1e-15);
    }
}

TEST(Umeyama, ProperRotationEvenForMirroredTargets) {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        Points p = random_points(10 + static_cast<std::size_t>(trial), rng);
        Points mirrored = p;
        mirrored.col(trial % 3) *= -1.0;  // a reflection is the tempting fit
        Alignment a = umeyama_align(p, similarity(mirrored, rng.uniform(0.5, 2), random_rotation(rng), Eigen::Vector3d::Zero()));
        EXPECT_LE((a.rotation.transpose() * a.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-9);
        EXPECT_NEAR(a.rotation.determinant(), 1.0, 1e-9);
        EXPECT_GT(a.scale, 0.0);
    }
}

TEST(Umeyama, PlanarInputStaysProper) {
    Points p(4, 3);
    p << 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0;
    Points q = p;
    q.col(0) *= -1;
    Alignment a = umeyama_align(p, q);
    EXPECT_NEAR(a.rotation.determinant(), 1.0, 1e-12);
}

TEST(Umeyama, ContractViolations) {
    Points two(2, 3);
    two.setRandom();
    EXPECT_THROW(umeyama_align(two, two), ContractError);
    Points same = Points::Zero(5, 3);
    Rng rng(5);
    EXPECT_THROW(umeyama_align(same, random_points(5, rng)), ContractError);
    EXPECT_THROW(umeyama_align(random_points(5, rng), random_points(6, rng)), DimensionError);
}

// --- pa_error --------------------------------------------------------------------------------

TEST(PaError, ZeroForIdenticalAndSimilarSets) {
    Rng rng(6);
    Points gt = random_points(21, rng);
    EXPECT_LE(pa_error(gt, gt), 1e-9);
    Points pred = similarity(gt, 0.7, random_rotation(rng), Eigen::Vector3d(0.3, -0.2, 0.9));
    EXPECT_LE(pa_error(pred, gt), 1e-9);
    EXPECT_LE(pa_error(pred, gt, ErrorMode::rmse), 1e-9);
}

TEST(PaError, FourPointCaseMatchesGridSearch) {
    Points pred(4, 3), gt(4, 3);
    pred << 0.00, 0.00, 0.00, 0.05, 0.01, 0.00, 0.01, 0.07, 0.02, -0.02, 0.03, 0.06;
    gt << 0.10, 0.02, 0.00, 0.12, 0.09, 0.01, 0.04, 0.05, 0.05, 0.09, 0.00, 0.08;
    const double svd = pa_error(pred, gt, ErrorMode::rmse);

    // coarse-to-fine grid over ZYZ Euler angles
    double best = std::numeric_limits<double>::infinity();
    double ca = 0, cb = 0, cc = 0;
    double span_a = M_PI, span_b = M_PI / 2, span_c = M_PI;
    double center_b = M_PI / 2;
    const int n = 24;
    for (int level = 0; level < 12; ++level) {
        const double a0 = ca, b0 = level == 0 ? center_b : cb, c0 = cc;
        for (int i = 0; i <= n; ++i)
            for (int j = 0; j <= n; ++j)
                for (int k = 0; k <= n; ++k) {
                    const double a = a0 + span_a * (2.0 * i / n - 1), b = b0 + span_b * (2.0 * j / n - 1),
                                 c = c0 + span_c * (2.0 * k / n - 1);
                    const double e = rmse_for_rotation(pred, gt, euler(a, b, c));
                    if (e < best) {
                        best = e;
                        ca = a, cb = b, cc = c;
                    }
                }
        span_a *= 0.25, span_b *= 0.25, span_c *= 0.25;
    }
    EXPECT_NEAR(best, svd, 1e-3);
    EXPECT_GE(best, svd - 1e-9);
}

TEST(PaError, MeanEuclideanNeverExceedsRmse) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Points a = random_points(21, rng), b = random_points(21, rng);
        EXPECT_LE(pa_error(a, b), pa_error(a, b, ErrorMode::rmse) + 1e-12);
    }
}

TEST(PaError, InvariantToSimilarityOfPrediction) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        Points pred = random_points(21, rng), gt = random_points(21, rng);
        const double base = pa_error(pred, gt);
        const Eigen::Vector3d t(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        const double moved = pa_error(similarity(pred, rng.uniform(0.5, 2.0), random_rotation(rng), t), gt);
        EXPECT_LE(std::abs(moved - base), 1e-8 * base);
    }
}

// --- fscore ------------------------------------------------------------------------------------

TEST(FScore, IdenticalSetsScoreOne) {
    Rng rng(9);
    Points p = random_points(50, rng);
    for (double tau : {0.001, 1.0, 5.0, 15.0, 1000.0}) EXPECT_EQ(fscore(p, p, tau), 1.0);
}

TEST(FScore, DistantSetsScoreZero) {
    Rng rng(10);
    Points p = random_points(30, rng, 0.01);
    Points q = p.rowwise() + Eigen::RowVector3d(1.0, 0, 0);
    EXPECT_EQ(fscore(p, q, 15.0), 0.0);
}

TEST(FScore, HandBuiltMixedCase) {
    Points pred(2, 3), gt(3, 3);
    pred << 0, 0, 0, 0.010, 0, 0;
    gt << 0, 0, 0.001, 0.050, 0, 0, 0.012, 0, 0;
    // pred: both matched at 5 mm (1 mm, 2 mm); gt: 1 and 3 matched, 2 is 38 mm away
    const double p = 1.0, r = 2.0 / 3.0;
    EXPECT_NEAR(fscore(pred, gt, 5.0), 2 * p * r / (p + r), 1e-15);
}

TEST(FScore, DistanceEqualToTauIsNotMatched) {
    Points a(1, 3), b(1, 3);
    a << 0, 0, 0;
    b << 0.004, 0.003, 0;  // 5 mm exactly up to rounding of 0.004^2+0.003^2
    const double d_mm = 1000.0 * std::sqrt(0.004 * 0.004 + 0.003 * 0.003);
    EXPECT_EQ(fscore(a, b, d_mm), 0.0);
    EXPECT_EQ(fscore(a, b, std::nextafter(d_mm, 10.0) + 1e-9), 1.0);
}

TEST(FScore, MatchesAllPairsOracle) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Points a = random_points(13, rng, 0.02), b = random_points(9, rng, 0.02);
        const double tau = rng.uniform(1.0, 20.0);
        auto frac = [&](const Points& x, const Points& y) {
            int hits = 0;
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                bool hit = false;
                for (Eigen::Index j = 0; j < y.rows(); ++j) hit |= 1000.0 * (x.row(i) - y.row(j)).norm() < tau;
                hits += hit;
            }
            return static_cast<double>(hits) / static_cast<double>(x.rows());
        };
        const double p = frac(a, b), r = frac(b, a);
        const double expected = p + r == 0 ? 0.0 : 2 * p * r / (p + r);
        EXPECT_DOUBLE_EQ(fscore(a, b, tau), expected);
    }
}

TEST(FScore, SymmetricAndMonotoneInTau) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Points a = random_points(25, rng, 0.03), b = random_points(25, rng, 0.03);
        double prev = 0.0;
        for (double tau = 0.5; tau < 40; tau *= 1.3) {
            const double f = fscore(a, b, tau);
            EXPECT_EQ(f, fscore(b, a, tau));
            EXPECT_GE(f, prev);
            prev = f;
        }
    }
}

TEST(FScore, ReportKeys) {
    EXPECT_EQ(fscore_key(5), "f@05");
    EXPECT_EQ(fscore_key(15), "f@15");
    EXPECT_EQ(fscore_key(2.5), "f@2.500000");
}

// --- latency ------------------------------------------------------------------------------------

TEST(Latency, SummaryFields) {
    LatencyStats s = summarize_latency({4, 1, 3, 2, 10, 6, 5, 8, 7, 9});
    EXPECT_EQ(s.iters, 10u);
    EXPECT_DOUBLE_EQ(s.mean_ms, 5.5);
    EXPECT_DOUBLE_EQ(s.median_ms, 5.5);
    EXPECT_DOUBLE_EQ(s.p95_ms, 10.0);
    EXPECT_DOUBLE_EQ(s.fps, 1000.0 / 5.5);
    EXPECT_THROW(summarize_latency({}), ContractError);
}

TEST(Latency, BenchRunsWarmupPlusIters) {
    int calls = 0;
    LatencyStats s = bench_fps([&] { ++calls; }, 100, 10);
    EXPECT_EQ(calls, 110);
    EXPECT_EQ(s.iters, 100u);
    EXPECT_DOUBLE_EQ(s.fps, 1000.0 / s.median_ms);
}

TEST(Latency, WiderBackboneIsSlower) {
    ModelConfig small;
    small.backbone.input_size = 64;
    small.backbone.stage_channels = {8, 16, 32, 64, 128};
    small.expansion_channels = 32;
    small.interaction.heads = 2;
    small.interaction.d_k = {8, 4, 2};
    small.mesh.token_dim = 16;
    ModelConfig wide = small;
    for (auto& c : wide.backbone.stage_channels) c *= 2;
    JointRegressor reg = JointRegressor::synthetic(16, 778, {155, 311, 466, 622, 777}, 1);
    Model a(small, reg, 1), b(wide, reg, 1);
    const double ta = bench_model(a, 15, 3).median_ms;
    const double tb = bench_model(b, 15, 3).median_ms;
    EXPECT_GT(tb, ta);
}

// --- evaluation reduction --------------------------------------------------------------------------

TEST(Evaluation, WorkerCountDoesNotChangeReport) {
    Rng rng(13);
    std::vector<Points> pj, gj, pv, gv;
    for (int i = 0; i < 9; ++i) {
        pj.push_back(random_points(21, rng));
        gj.push_back(random_points(21, rng));
        pv.push_back(random_points(60, rng));
        gv.push_back(random_points(60, rng));
    }
    EvalOptions opt;
    auto run = [&](std::size_t workers) {
        return evaluate_pairs(
            9, [&](std::size_t i) { return evaluate_sample(pj[i], gj[i], pv[i], gv[i], opt); }, opt, workers);
    };
    MetricsReport one = run(1), four = run(4);
    EXPECT_EQ(one.pa_mpjpe, four.pa_mpjpe);
    EXPECT_EQ(one.pa_mpvpe, four.pa_mpvpe);
    EXPECT_EQ(one.f_at, four.f_at);
    EXPECT_EQ(one.samples, 9u);
    EXPECT_EQ(one.f_at.count(5.0), 1u);
    EXPECT_EQ(one.f_at.count(15.0), 1u);
}

TEST(Evaluation, GroundTruthAgainstItself) {
    Rng rng(14);
    std::vector<SampleMetrics> all;
    EvalOptions opt;
    for (int i = 0; i < 3; ++i) {
        Points j = random_points(21, rng), v = random_points(100, rng);
        all.push_back(evaluate_sample(j, j, v, v, opt));
    }
    MetricsReport r = reduce_metrics(all, opt);
    EXPECT_LE(r.pa_mpjpe, 1e-9);
    EXPECT_LE(r.pa_mpvpe, 1e-9);
    for (const auto& [tau, f] : r.f_at) EXPECT_EQ(f, 1.0);
}

TEST(Evaluation, WorkerErrorsPropagate) {
    EvalOptions opt;
    EXPECT_THROW(evaluate_pairs(
                     4,
                     [](std::size_t i) -> SampleMetrics {
                         if (i == 2) throw ContractError("boom");
                         return {};
                     },
                     opt, 3),
                 ContractError);
}
