#include "bags/model_io.hpp"

#include "bags/error.hpp"
#include "bags/io_util.hpp"
#include "bags/synthetic.hpp"
#include "test_support.hpp"

#include <filesystem>
#include <numbers>

namespace bags {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

BoneRig make_rig(std::size_t bones, std::uint64_t seed) {
    BoneRigConfig rc;
    rc.bones = bones;
    rc.frequencies = 2;
    rc.hidden_width = 8;
    rc.layers = 2;
    rc.final_scale = 0.1;
    rc.seed = seed;
    std::vector<Vec3> centers;
    for (std::size_t b = 0; b < bones; ++b) {
        centers.emplace_back(-0.4 + 0.8 * b / std::max<std::size_t>(1, bones - 1), 0.1 * b, 0.0);
    }
    return BoneRig(rc, centers, std::vector<Vec3>(bones, Vec3::Constant(2.0)), 0.5);
}

Checkpoint sample_checkpoint(std::size_t bones = 3) {
    std::mt19937_64 rng(11);
    Checkpoint c;
    c.config.warmup_iterations = 7;
    c.config.rig.bones = bones;
    c.scene.intrinsics = {30.0, 31.0, 16.0, 12.0, 32, 24};
    c.scene.center = Vec3(0.1, 0.2, 0.3);
    c.scene.extent = 1.5;
    c.model.cloud = testing::random_cloud(rng, 40);
    std::vector<double> stats(40, 0.25);
    c.model.cloud.restore_densify_stats(stats, std::vector<std::uint32_t>(40, 3), std::vector<Vec3>(40, Vec3(1, 2, 3)));
    c.model.rig = make_rig(bones, 5);
    c.model.reset_roots({0.0, 0.25, 1.0});
    c.model.root_translations.at(1, 2) = 0.75;
    c.model.background = Vec3(0.1, 0.0, 1.0);
    c.state.stage = Stage::Joint;
    c.state.iteration = 42;
    c.state.reference_frame = 1;
    c.state.active_frames = {0, 1, 2};
    c.state.cloud_optim.assign(5, AdamState(AdamConfig{0.01}));
    c.state.cloud_optim[2].first_moment = {1.0, -2.0, 3.5};
    c.state.cloud_optim[2].second_moment = {0.5, 0.25, 0.125};
    c.state.cloud_optim[2].step = 9;
    c.state.rig_optim.assign(c.model.rig.parameters().size(), AdamState(AdamConfig{5e-4}));
    c.state.root_optim.assign(2, AdamState(AdamConfig{1e-4}));
    c.state.rng.seed(99);
    c.state.rng.discard(17);
    c.state.history.push_back(json{{"psnr", 12.5}, {"stage", "warmup"}});
    return c;
}

class TempDir : public ::testing::Test {
  protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("bags_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path dir_;
};

using CheckpointIo = TempDir;

TEST_F(CheckpointIo, SaveLoadSaveIsByteIdentical) {
    const Checkpoint c = sample_checkpoint();
    save_checkpoint(c, dir_ / "a.bags");
    const Checkpoint back = load_checkpoint(dir_ / "a.bags");
    save_checkpoint(back, dir_ / "b.bags");
    EXPECT_EQ(read_file(dir_ / "a.bags"), read_file(dir_ / "b.bags"));
}

TEST_F(CheckpointIo, RoundTripRestoresEveryField) {
    const Checkpoint c = sample_checkpoint();
    const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
    EXPECT_EQ(back.config.to_json(), c.config.to_json());
    EXPECT_EQ(back.scene.intrinsics.fy, 31.0);
    EXPECT_EQ(back.scene.center, c.scene.center);
    const auto pa = c.model.cloud.parameters();
    const auto pb = back.model.cloud.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) {
        EXPECT_TRUE(std::ranges::equal(pa[k]->values(), pb[k]->values()));
    }
    EXPECT_EQ(back.model.cloud.view_grad_count(), c.model.cloud.view_grad_count());
    const auto ra = c.model.rig.parameters();
    const auto rb = back.model.rig.parameters();
    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t k = 0; k < ra.size(); ++k) {
        EXPECT_TRUE(std::ranges::equal(ra[k]->values(), rb[k]->values()));
    }
    EXPECT_EQ(back.model.rig.center_offsets(), c.model.rig.center_offsets());
    EXPECT_EQ(back.model.frame_times, c.model.frame_times);
    EXPECT_EQ(back.model.root_translations.at(1, 2), 0.75);
    EXPECT_EQ(back.model.background, c.model.background);
    EXPECT_EQ(back.state.stage, Stage::Joint);
    EXPECT_EQ(back.state.iteration, 42u);
    EXPECT_EQ(back.state.active_frames, c.state.active_frames);
    EXPECT_EQ(back.state.cloud_optim[2].first_moment, c.state.cloud_optim[2].first_moment);
    EXPECT_EQ(back.state.cloud_optim[2].step, 9u);
    std::mt19937_64 a = c.state.rng;
    std::mt19937_64 b = back.state.rng;
    EXPECT_EQ(a(), b());
    EXPECT_EQ(back.state.history, c.state.history);
}

TEST_F(CheckpointIo, TruncatedFileIsAChecksumError) {
    const std::string bytes = encode_checkpoint(sample_checkpoint());
    for (std::size_t keep : {bytes.size() - 1, bytes.size() / 2, std::size_t{30}}) {
        try {
            decode_checkpoint(std::string_view(bytes).substr(0, keep));
            FAIL() << "truncated to " << keep << " bytes was accepted";
        } catch (const FormatError& e) {
            EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
        }
    }
}

TEST_F(CheckpointIo, FlippedByteIsAChecksumError) {
    std::string bytes = encode_checkpoint(sample_checkpoint());
    bytes[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST_F(CheckpointIo, FutureVersionIsRefused) {
    std::string bytes = encode_checkpoint(sample_checkpoint());
    bytes[4] = static_cast<char>(kCheckpointVersion + 1);
    try {
        decode_checkpoint(bytes);
        FAIL() << "future version accepted";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

TEST_F(CheckpointIo, BadMagicIsRefused) {
    std::string bytes = encode_checkpoint(sample_checkpoint());
    bytes[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST_F(CheckpointIo, MissingFileIsIoError) { EXPECT_THROW(load_checkpoint(dir_ / "none.bags"), IoError); }

TEST_F(CheckpointIo, LoadDoesNotModifyTheFile) {
    save_checkpoint(sample_checkpoint(), dir_ / "a.bags");
    const std::string before = read_file(dir_ / "a.bags");
    load_checkpoint(dir_ / "a.bags");
    EXPECT_EQ(read_file(dir_ / "a.bags"), before);
    for (const auto& entry : fs::directory_iterator(dir_)) {
        EXPECT_EQ(entry.path().filename(), "a.bags");
    }
}

using BundleIo = TempDir;

TEST_F(BundleIo, RoundTripEqualsSourceWithinFloatRounding) {
    const Checkpoint c = sample_checkpoint();
    export_viewer_bundle(c.model, c.scene, dir_ / "m.bags");
    const ViewerBundle b = decode_viewer_bundle(read_file(dir_ / "m.bags"));
    ASSERT_EQ(b.splats, 40u);
    ASSERT_EQ(b.bones, 3u);
    for (std::size_t i = 0; i < 40; ++i) {
        const Gaussian g = c.model.cloud.get(i);
        const Vec4 q = quat_normalized(g.rotation);
        for (int k = 0; k < 3; ++k) {
            EXPECT_EQ(b.positions[3 * i + k], static_cast<float>(g.position[k]));
            EXPECT_EQ(b.colors[3 * i + k], static_cast<float>(g.color[k]));
            EXPECT_EQ(b.scales[3 * i + k], static_cast<float>(std::exp(g.log_scale[k])));
        }
        for (int k = 0; k < 4; ++k) {
            EXPECT_EQ(b.quaternions[4 * i + k], static_cast<float>(q[k]));
        }
        EXPECT_EQ(b.opacities[i], static_cast<float>(sigmoid(g.opacity_logit)));
    }
}

TEST_F(BundleIo, HeaderAndSidecarDescribeTheLayout) {
    const Checkpoint c = sample_checkpoint();
    export_viewer_bundle(c.model, c.scene, dir_ / "m.bags");
    const std::string bytes = read_file(dir_ / "m.bags");
    EXPECT_EQ(bytes.substr(0, 4), "BAGS");
    EXPECT_EQ(bytes.substr(8, 4), "VIEW");
    const json meta = json::parse(read_file(dir_ / "m.json"));
    EXPECT_EQ(meta["splats"], 40);
    EXPECT_EQ(meta["bones"], 3);
    EXPECT_EQ(meta["byte_length"].get<std::size_t>(), bytes.size());
    EXPECT_EQ(meta["arrays"][0]["name"], "positions");
    EXPECT_EQ(meta["arrays"][0]["offset"], 20);
}

TEST(Bundle, WeightsMatchDirectEvaluation) {
    const Checkpoint c = sample_checkpoint(4);
    const ViewerBundle b = make_viewer_bundle(c.model);
    const BonePose canonical = canonical_bone_pose(c.model.rig);
    double worst = 0.0;
    for (std::size_t i = 0; i < b.splats; ++i) {
        const auto w = skinning_weights(c.model.cloud.get(i).position, canonical);
        double sum = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            worst = std::max(worst, std::abs(w[k] - static_cast<double>(b.weights[4 * i + k])));
            sum += b.weights[4 * i + k];
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Bundle, SingleBoneWeightsAreOne) {
    const Checkpoint c = sample_checkpoint(1);
    const ViewerBundle b = make_viewer_bundle(c.model);
    for (float w : b.weights) {
        EXPECT_EQ(w, 1.0f);
    }
}

TEST(Bundle, CorruptInputsAreRejected) {
    const std::string bytes = encode_viewer_bundle(make_viewer_bundle(sample_checkpoint().model));
    EXPECT_THROW(decode_viewer_bundle(bytes.substr(0, bytes.size() - 4)), FormatError);
    std::string bad = bytes;
    bad[1] = 'X';
    EXPECT_THROW(decode_viewer_bundle(bad), FormatError);
    bad = bytes;
    bad[4] = 9;
    EXPECT_THROW(decode_viewer_bundle(bad), FormatError);
    EXPECT_THROW(decode_viewer_bundle(encode_checkpoint(sample_checkpoint())), FormatError);
}

json two_keyframes(double angle_deg) {
    const Vec4 q = quat_from_axis_angle(Vec3::UnitZ(), angle_deg * std::numbers::pi / 180.0);
    return {{"format", "bags-pose"},
            {"version", 1},
            {"bones", 2},
            {"keyframes",
             {{{"time", 0.0}, {"overrides", json::array()}},
              {{"time", 1.0},
               {"overrides",
                {{{"bone", 1}, {"rotation", {q[0], q[1], q[2], q[3]}}, {"translation", {0.0, 0.2, 0.0}}}}}}}}};
}

TEST(PoseFile, SlerpMidpointOfZeroAndNinetyIsFortyFive) {
    const PoseFile p = parse_pose_file(two_keyframes(90.0));
    const auto mid = interpolate_pose(p, 0.5);
    const Vec4 expect = quat_from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 4.0);
    EXPECT_LT((mid[1].rotation - expect).norm(), 1e-12);
    EXPECT_NEAR(mid[1].translation.y(), 0.1, 1e-15);
    EXPECT_EQ(mid[0].rotation, Vec4(1.0, 0.0, 0.0, 0.0));
}

TEST(PoseFile, InterpolationClampsOutsideTheKeyframes) {
    const PoseFile p = parse_pose_file(two_keyframes(90.0));
    EXPECT_EQ(interpolate_pose(p, -3.0)[1].rotation, p.keyframes[0].bones[1].rotation);
    EXPECT_EQ(interpolate_pose(p, 7.0)[1].rotation, p.keyframes[1].bones[1].rotation);
}

TEST(PoseFile, JsonRoundTrip) {
    const PoseFile p = parse_pose_file(two_keyframes(30.0));
    const PoseFile q = parse_pose_file(pose_file_to_json(p));
    ASSERT_EQ(q.keyframes.size(), 2u);
    EXPECT_EQ(q.keyframes[1].bones[1].rotation, p.keyframes[1].bones[1].rotation);
    EXPECT_EQ(q.keyframes[1].bones[1].translation, p.keyframes[1].bones[1].translation);
}

TEST(PoseFile, SchemaErrors) {
    json j = two_keyframes(10.0);
    j["keyframes"][1]["overrides"][0]["bone"] = 2;
    EXPECT_THROW(parse_pose_file(j), ConfigError);
    j = two_keyframes(10.0);
    j["keyframes"][1]["time"] = 0.0;
    EXPECT_THROW(parse_pose_file(j), ConfigError);
    j = two_keyframes(10.0);
    j["keyframes"][1]["overrides"][0]["rotation"] = {1.0, 0.0};
    EXPECT_THROW(parse_pose_file(j), FormatError);
    j = two_keyframes(10.0);
    j["keyframes"] = json::array();
    EXPECT_THROW(parse_pose_file(j), ConfigError);
    EXPECT_THROW(parse_pose_file(json::array()), FormatError);
}

TEST(OverrideDeltas, IdentityOverridesAreExactIdentity) {
    const Checkpoint c = sample_checkpoint();
    const BonePose canonical = canonical_bone_pose(c.model.rig);
    const std::vector<BoneOverride> ident(canonical.size());
    for (const RigidTransform& d : override_deltas(canonical, ident)) {
        EXPECT_EQ(d.rotation, Mat3::Identity());
        EXPECT_EQ(d.translation, Vec3::Zero());
    }
    const std::vector<BoneOverride> wrong(canonical.size() + 1);
    EXPECT_THROW(override_deltas(canonical, wrong), DimensionError);
}

TEST(OverrideDeltas, RotationIsAboutTheBoneCenter) {
    const Checkpoint c = sample_checkpoint(1);
    const BonePose canonical = canonical_bone_pose(c.model.rig);
    BoneOverride o;
    o.rotation = quat_from_axis_angle(Vec3::UnitY(), 0.7);
    const auto d = override_deltas(canonical, std::vector<BoneOverride>{o});
    const Vec3 center = canonical.centers[0];
    EXPECT_LT((d[0].rotation * center + d[0].translation - center).norm(), 1e-12);
}

} // namespace
} // namespace bags
