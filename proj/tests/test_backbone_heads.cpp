#include <gtest/gtest.h>

#include <cstring>
#include <numeric>

#include "rejshand/model.hpp"
#include "support/gradcheck.hpp"

using namespace rejshand;
using rejshand::testing::gradcheck;
using rejshand::testing::random_tensor;

namespace {

ParamStore backbone_params(const BackboneConfig& cfg, std::uint64_t seed) {
    ParamStore p;
    Rng rng(seed);
    register_backbone_params(p, cfg, rng);
    return p;
}

// FNV-1a over the raw bytes of a tensor.
std::uint64_t digest(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ULL;
    for (double v : t.data()) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof v);
        for (unsigned char b : bytes) h = (h ^ b) * 1099511628211ULL;
    }
    return h;
}

}  // namespace

// --- backbone ---------------------------------------------------------------------

TEST(Backbone, DefaultGeometryReachesSevenBySeven) {
    BackboneConfig cfg;
    EXPECT_EQ(cfg.out_channels(), 640u);
    EXPECT_EQ(cfg.out_size(), 7u);
}

TEST(Backbone, RandomImagesGiveFixedShape) {
    BackboneConfig cfg;
    ParamStore p = backbone_params(cfg, 1);
    Rng rng(2);
    for (int i = 0; i < 2; ++i) {
        Tape tape(false);
        Tensor f = backbone_forward(tape, random_tensor({3, 224, 224}, rng, 0, 1), p, cfg);
        EXPECT_EQ(f.shape(), Shape({640, 7, 7}));
    }
}

TEST(Backbone, ZeroImageZeroBiasGivesZeroFeatures) {
    BackboneConfig cfg;
    cfg.input_size = 32;
    ParamStore p = backbone_params(cfg, 3);
    Tape tape(false);
    Tensor f = backbone_forward(tape, Tensor::zeros({3, 32, 32}), p, cfg);
    for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, DeterministicForSeedAndImage) {
    BackboneConfig cfg;
    cfg.input_size = 64;
    Rng rng(4);
    Tensor image = random_tensor({3, 64, 64}, rng, 0, 1);
    Tape t1(false), t2(false);
    const auto a = digest(backbone_forward(t1, image, backbone_params(cfg, 5), cfg));
    const auto b = digest(backbone_forward(t2, image, backbone_params(cfg, 5), cfg));
    EXPECT_EQ(a, b);
    Tape t3(false);
    EXPECT_NE(a, digest(backbone_forward(t3, image, backbone_params(cfg, 6), cfg)));
}

TEST(Backbone, WrongImageShapeThrows) {
    BackboneConfig cfg;
    ParamStore p = backbone_params(cfg, 1);
    Tape tape(false);
    EXPECT_THROW(backbone_forward(tape, Tensor::zeros({3, 223, 224}), p, cfg), DimensionError);
    EXPECT_THROW(backbone_forward(tape, Tensor::zeros({1, 224, 224}), p, cfg), DimensionError);
}

TEST(Backbone, InitializationBoundedByFanIn) {
    BackboneConfig cfg;
    ParamStore p = backbone_params(cfg, 9);
    const Tensor& w = p.get("backbone.stage1.weight");
    const double bound = 1.0 / std::sqrt(16.0 * 9.0);
    for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
    for (double v : p.get("backbone.stage1.bias").data()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, InvalidConfigRejected) {
    BackboneConfig cfg;
    cfg.stage_channels.clear();
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.kernel = 2;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

// --- pose heads -----------------------------------------------------------------

namespace {

struct HeadFixture {
    ExpansionConfig cfg;
    ParamStore params;
    std::size_t cb, hb;

    HeadFixture(std::size_t joints, std::size_t channels, std::size_t width, std::size_t cb_, std::size_t hb_,
                std::uint64_t seed)
        : cb(cb_), hb(hb_) {
        cfg.joints = joints;
        cfg.channels = channels;
        cfg.token_width = width;
        cfg.parents.resize(joints);
        for (std::size_t j = 0; j < joints; ++j) cfg.parents[j] = j == 0 ? 0 : (j - 1) / 2;
        Rng rng(seed);
        register_pose_head_params(params, cfg, cb, hb, rng);
    }
};

}  // namespace

TEST(Keypoints2d, ShapeIsJointsByTwo) {
    HeadFixture h(21, 16, 16, 640, 7, 1);
    h.cfg.parents = default_parents();
    Rng rng(1);
    Tape tape(false);
    EXPECT_EQ(keypoints2d_forward(tape, random_tensor({640, 7, 7}, rng), h.params, 21).shape(), Shape({21, 2}));
}

TEST(Keypoints2d, ZeroWeightsPutEveryKeypointAtCentre) {
    HeadFixture h(21, 8, 8, 640, 7, 2);
    for (auto& v : h.params.get("keypoints.weight").mutable_data()) v = 0.0;
    Rng rng(2);
    Tape tape(false);
    Tensor kp = keypoints2d_forward(tape, random_tensor({640, 7, 7}, rng), h.params, 21);
    for (double v : kp.data()) EXPECT_EQ(v, 0.5);
}

TEST(Keypoints2d, MatchesFlattenMatmulOracle) {
    HeadFixture h(3, 4, 4, 2, 3, 3);
    Rng rng(3);
    Tensor f = random_tensor({2, 3, 3}, rng);
    Tape tape(false);
    Tensor kp = keypoints2d_forward(tape, f, h.params, 3);
    const Tensor& w = h.params.get("keypoints.weight");
    const Tensor& b = h.params.get("keypoints.bias");
    for (std::size_t o = 0; o < 6; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < 18; ++i) s += f[i] * w.at(i, o);
        EXPECT_NEAR(kp[o], s, 1e-15);
    }
}

TEST(NormalizeCoords, CentreAndCorners) {
    Tape tape(false);
    Tensor n = normalize_coords(tape, Tensor::from({2, 2}, {0.5, 0.5, 0.0, 1.0}));
    EXPECT_EQ(std::vector<double>(n.data().begin(), n.data().end()), std::vector<double>({0, 0, -1, 1}));
}

TEST(NormalizeCoords, AffineAndInvertible) {
    Rng rng(4);
    Tensor kp = random_tensor({21, 2}, rng, 0, 1);
    Tape tape(false);
    Tensor n = normalize_coords(tape, kp);
    Tensor back = denormalize_coords(tape, n);
    for (std::size_t i = 0; i < kp.numel(); ++i) {
        EXPECT_GE(n[i], -1.0);
        EXPECT_LE(n[i], 1.0);
        EXPECT_NEAR(back[i], kp[i], 1e-15);
    }
}

TEST(Expansion, StageOneShapesAtFullWidth) {
    HeadFixture h(21, 256, 256, 640, 7, 5);
    h.cfg.parents = default_parents();
    Rng rng(5);
    Tape tape(false);
    Tensor f = random_tensor({640, 7, 7}, rng);
    Tensor kp = random_tensor({21, 2}, rng, 0, 1);
    ExpansionResult r = expansion_forward(tape, f, kp, h.params, h.cfg);
    EXPECT_EQ(r.upsampled.shape(), Shape({256, 14, 14}));
    EXPECT_EQ(r.tokens.joints.shape(), Shape({21, 256}));
    EXPECT_EQ(r.tokens.skeleton.shape(), Shape({21, 256}));
    EXPECT_EQ(r.tokens.stage, 1u);
}

TEST(Expansion, KeypointOnPixelCentreSamplesThatPixel) {
    HeadFixture h(2, 3, 4, 2, 2, 6);
    Rng rng(6);
    Tensor f = random_tensor({2, 2, 2}, rng);
    // upsampled map is 4x4; pixel (x=1, y=2) centre in [0,1] crop coords is (1/3, 2/3)
    Tensor kp = Tensor::from({2, 2}, {1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0});
    Tape tape(false);
    ExpansionResult r = expansion_forward(tape, f, kp, h.params, h.cfg);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(r.samples.at(0, c), r.upsampled[(c * 4 + 2) * 4 + 1], 1e-12);
        EXPECT_EQ(r.samples.at(1, c), r.upsampled[(c * 4 + 0) * 4 + 0]);
    }
}

TEST(Expansion, WristSkeletonRowUsesDuplicatedSample) {
    HeadFixture h(3, 4, 5, 2, 2, 7);
    Rng rng(7);
    Tensor f = random_tensor({2, 2, 2}, rng);
    Tensor kp = random_tensor({3, 2}, rng, 0, 1);
    Tape tape(false);
    ExpansionResult r = expansion_forward(tape, f, kp, h.params, h.cfg);
    const Tensor& w = h.params.get("expansion.skeleton.weight");
    const Tensor& b = h.params.get("expansion.skeleton.bias");
    // Row 0 is the wrist (own parent): input row = [s0, s0]
    for (std::size_t o = 0; o < 5; ++o) {
        double s = b[o];
        for (std::size_t c = 0; c < 4; ++c) s += r.samples.at(0, c) * (w.at(c, o) + w.at(4 + c, o));
        EXPECT_NEAR(r.tokens.skeleton.at(0, o), s, 1e-14);
    }
}

TEST(Expansion, ParentTableAffectsSkeletonOnly) {
    HeadFixture h(5, 4, 4, 2, 2, 8);
    Rng rng(8);
    Tensor f = random_tensor({2, 2, 2}, rng);
    Tensor kp = random_tensor({5, 2}, rng, 0, 1);
    Tape tape(false);
    ExpansionResult a = expansion_forward(tape, f, kp, h.params, h.cfg);
    ExpansionConfig other = h.cfg;
    other.parents = {0, 0, 0, 0, 0};
    ExpansionResult b = expansion_forward(tape, f, kp, h.params, other);
    bool skeleton_differs = false;
    for (std::size_t i = 0; i < a.tokens.joints.numel(); ++i) {
        EXPECT_EQ(a.tokens.joints[i], b.tokens.joints[i]);
        skeleton_differs |= a.tokens.skeleton[i] != b.tokens.skeleton[i];
    }
    EXPECT_TRUE(skeleton_differs);
}

TEST(Expansion, GradientMatchesFiniteDifferences) {
    HeadFixture h(4, 3, 4, 2, 2, 9);
    Rng rng(9);
    Tensor f = random_tensor({2, 2, 2}, rng);
    Tensor target_j = random_tensor({4, 4}, rng), target_s = random_tensor({4, 4}, rng);
    std::vector<std::pair<std::string, Tensor>> inputs{{"f_b", f}};
    for (const auto& [name, t] : h.params) inputs.emplace_back(name, t);
    auto res = gradcheck(
        [&](Tape& tape) {
            Tensor kp = keypoints2d_forward(tape, f, h.params, 4);
            ExpansionResult r = expansion_forward(tape, f, kp, h.params, h.cfg);
            return add(tape, sum(tape, mul(tape, r.tokens.joints, target_j)),
                       sum(tape, mul(tape, r.tokens.skeleton, target_s)));
        },
        inputs);
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Expansion, BadParentTableRejected) {
    ExpansionConfig cfg;
    cfg.parents.pop_back();
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.parents[3] = 21;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

// --- full model shape contract --------------------------------------------------------

TEST(ModelShapes, FullDimensionsEndToEnd) {
    ModelConfig cfg;
    Model model(cfg, JointRegressor::synthetic(16, 778, {155, 311, 466, 622, 777}, 1), 11);
    Rng rng(12);
    Tape tape(false);
    ForwardResult out = model.forward(tape, random_tensor({3, 224, 224}, rng, 0, 1));
    EXPECT_EQ(out.features.shape(), Shape({640, 7, 7}));
    EXPECT_EQ(out.kp2d.shape(), Shape({21, 2}));
    EXPECT_EQ(out.joints3d.shape(), Shape({21, 3}));
    EXPECT_EQ(out.mesh.coords.shape(), Shape({778, 3}));
    EXPECT_EQ(out.mesh.tokens.shape(), Shape({778, 64}));
    ASSERT_EQ(out.stages.size(), 4u);
    const std::vector<Shape> expected{{21, 256}, {84, 128}, {336, 64}, {336, 64}};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(out.stages[i].joints.shape(), expected[i]);
        EXPECT_EQ(out.stages[i].skeleton.shape(), expected[i]);
    }
    for (double v : out.mesh.coords.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ModelShapes, RegressorMismatchRejected) {
    ModelConfig cfg;
    EXPECT_THROW(Model(cfg, JointRegressor::synthetic(15, 778, {1, 2, 3, 4, 5}, 1), 1), ConfigError);
    EXPECT_THROW(Model(cfg, JointRegressor::synthetic(16, 700, {1, 2, 3, 4, 5}, 1), 1), ConfigError);
}

TEST(ModelShapes, HeadParametersExcludeBackbone) {
    ModelConfig cfg;
    cfg.backbone.input_size = 32;
    cfg.backbone.stage_channels = {4, 4, 4, 4, 8};
    cfg.expansion_channels = 16;
    cfg.interaction.d_k = {2, 1};
    cfg.mesh.vertices = 40;
    cfg.mesh.token_dim = 4;
    Model model(cfg, JointRegressor::synthetic(16, 40, {1, 2, 3, 4, 5}, 2), 3);
    std::size_t backbone = 0;
    for (const auto& [name, t] : model.params())
        if (name.rfind("backbone.", 0) == 0) backbone += t.numel();
    EXPECT_GT(backbone, 0u);
    EXPECT_EQ(model.head_parameters() + backbone, model.total_parameters());
}
