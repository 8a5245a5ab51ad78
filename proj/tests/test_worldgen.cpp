#include <gtest/gtest.h>

#include <filesystem>

#include "roboscape/dataset.hpp"
#include "roboscape/worldgen.hpp"

using namespace rs::worldgen;

namespace {

WorldSpec ws;  // defaults: 64x64, v_max 4

// A state rendered as bare table: every movable object parked far outside
// the visible frame (the raster clips them away).
SceneState offscreen_state() {
  SceneState s;
  s.table_height = ws.table_height;
  s.block = {-500, -500, 5, 5, 0};
  s.gripper = {-500, -500, 0, 0};
  s.goal = {-500, -500, 6};
  s.cloth.rest = 6;
  s.cloth.pos.assign(16, {-500, -500});
  s.cloth.vel.assign(16, {0, 0});
  return s;
}

SceneState simple_state(float bx, float by, float half) {
  SceneState s = offscreen_state();
  s.block = {bx, by, half, ws.block_height, 0};
  return s;
}

int count_color(const rs::Tensor<uint8_t>& img, std::array<uint8_t, 3> c) {
  int n = 0;
  for (int i = 0; i < img.dim(0) * img.dim(1); ++i)
    if (img.data[i * 3] == c[0] && img.data[i * 3 + 1] == c[1] && img.data[i * 3 + 2] == c[2]) ++n;
  return n;
}

}  // namespace

TEST(Step, FreeSpaceTranslation) {
  SceneState s = offscreen_state();
  s.gripper = {10, 10, 0, 0};
  s.block = {40, 40, 5, 5, 0};
  const SceneState out = step(ws, s, {2, 0, 0});
  EXPECT_FLOAT_EQ(out.gripper.x, 12);
  EXPECT_FLOAT_EQ(out.gripper.y, 10);
  EXPECT_FLOAT_EQ(out.block.cx, 40);
  EXPECT_FLOAT_EQ(out.block.cy, 40);
}

TEST(Step, BoundaryClamp) {
  SceneState s = offscreen_state();
  s.gripper = {ws.grip_half, 30, 0, 0};  // flush against the left wall
  const SceneState out = step(ws, s, {-4, 0, 0});
  EXPECT_FLOAT_EQ(out.gripper.x, ws.grip_half);
  EXPECT_FLOAT_EQ(out.gripper.y, 30);
}

TEST(Step, ActionMagnitudeClamped) {
  SceneState s = offscreen_state();
  s.gripper = {30, 30, 0, 0};
  const SceneState out = step(ws, s, {100, -100, 2.0f});
  EXPECT_FLOAT_EQ(out.gripper.x, 30 + ws.v_max);
  EXPECT_FLOAT_EQ(out.gripper.y, 30 - ws.v_max);
  EXPECT_FLOAT_EQ(out.gripper.grip, 1.0f);
}

TEST(Step, GraspMovesBlockRigidly) {
  SceneState s = offscreen_state();
  s.gripper = {20, 20, 0, 0};
  s.block = {21, 20, 5, 5, 0};  // overlapping
  const SceneState out = step(ws, s, {2, 0, 1});
  EXPECT_FLOAT_EQ(out.block.cx, 23);
  EXPECT_FLOAT_EQ(out.block.cy, 20);
}

TEST(Step, PushResolvesAlongContactNormal) {
  SceneState s = offscreen_state();
  s.gripper = {20, 30, 0, 0};
  s.block = {27, 30, 4, 5, 0};  // gap 7 < 8 = grip_half + half
  const SceneState out = step(ws, s, {2, 0, 0});
  // gripper moves to 22; penetration = 8 - 5 = 3 -> block pushed to 30
  EXPECT_FLOAT_EQ(out.gripper.x, 22);
  EXPECT_FLOAT_EQ(out.block.cx, 30);
  EXPECT_FLOAT_EQ(out.block.cy, 30);
}

TEST(Step, ClothSingleSpringEulerStepMatchesHandComputation) {
  // 2x2 lattice, rest 6: horizontal springs stretched to 2r, vertical at
  // rest. One explicit-Euler step from rest velocities:
  //   x' = x + dt*v (= x, since v=0),  v' = damp*(v + dt*F)
  // F on p0 is kappa*(12-6) = 4.8 in +x, so v0' = 0.9*0.5*4.8 = 2.16.
  WorldSpec w2 = ws;
  w2.cloth_p = 2;
  SceneState s = offscreen_state();
  s.cloth.rest = 6;
  s.cloth.pos = {{20, 20}, {32, 20}, {20, 26}, {32, 26}};
  s.cloth.vel.assign(4, {0, 0});
  const SceneState out = step(w2, s, {0, 0, 0});
  EXPECT_FLOAT_EQ(out.cloth.pos[0].x, 20);  // position uses the old velocity
  EXPECT_FLOAT_EQ(out.cloth.pos[0].y, 20);
  EXPECT_NEAR(out.cloth.vel[0].x, 0.9f * 0.5f * (0.8f * 6.0f), 1e-6);
  EXPECT_NEAR(out.cloth.vel[1].x, -0.9f * 0.5f * (0.8f * 6.0f), 1e-6);
  EXPECT_NEAR(out.cloth.vel[0].y, 0.0f, 1e-6);
  // second step moves positions by dt * v'
  const SceneState out2 = step(w2, out, {0, 0, 0});
  EXPECT_NEAR(out2.cloth.pos[0].x, 20 + 0.5f * 2.16f, 1e-5);
}

TEST(Step, GrippedClothParticlePinnedToGripper) {
  WorldSpec w2 = ws;
  w2.cloth_p = 2;
  SceneState s = offscreen_state();
  s.gripper = {20, 20, 1, 1};
  s.cloth.rest = 6;
  s.cloth.pos = {{21, 20}, {40, 20}, {21, 40}, {40, 40}};
  s.cloth.vel.assign(4, {0, 0});
  const SceneState out = step(w2, s, {3, 0, 1});
  EXPECT_FLOAT_EQ(out.cloth.pos[0].x, 24);  // follows the gripper delta
  EXPECT_FLOAT_EQ(out.cloth.vel[0].x, 0);
  EXPECT_FLOAT_EQ(out.cloth.pos[1].x, 40);  // free corner: v was 0
}

TEST(RenderRgb, EmptyTableIsAllTableColor) {
  const auto img = render_rgb(ws, offscreen_state());
  EXPECT_EQ(count_color(img, kTableColor), 64 * 64);
}

TEST(RenderRgb, BlockPixelCountMatchesGeometry) {
  for (float half : {4.0f, 5.0f, 6.0f}) {
    const auto img = render_rgb(ws, simple_state(31.0f, 27.0f, half));
    const int side = static_cast<int>(std::lround(2 * half));
    EXPECT_EQ(count_color(img, kBlockColor), side * side);
  }
}

TEST(RenderRgb, DeterministicPerState) {
  const auto s = init_scene(ws, 99, Script::push);
  const auto a = render_rgb(ws, s), b = render_rgb(ws, s);
  EXPECT_EQ(a.data, b.data);
}

TEST(RenderDepth, EmptyTableIsConstantTableHeight) {
  const auto d = render_depth(ws, offscreen_state());
  for (const float v : d.data) EXPECT_FLOAT_EQ(v, ws.table_height);
}

TEST(RenderDepth, BlockHeightComposition) {
  const auto s = simple_state(32, 32, 5);
  const auto d = render_depth(ws, s);
  const auto img = render_rgb(ws, s);
  int inside = 0, outside = 0;
  for (int i = 0; i < 64 * 64; ++i) {
    const bool block_px = img.data[i * 3] == kBlockColor[0] && img.data[i * 3 + 1] == kBlockColor[1];
    if (block_px) {
      EXPECT_FLOAT_EQ(d.data[i], 15.0f);
      ++inside;
    } else {
      EXPECT_FLOAT_EQ(d.data[i], 10.0f);
      ++outside;
    }
  }
  EXPECT_EQ(inside, 100);
  EXPECT_EQ(outside, 64 * 64 - 100);
}

TEST(RenderDepth, BlockWinsOverClothInOverlap) {
  SceneState s = offscreen_state();
  s.cloth.pos = {{24, 24}, {40, 24}, {24, 40}, {40, 40},  // oversized 4x4 lattice folded
                 {24, 24}, {40, 24}, {24, 40}, {40, 40},
                 {24, 24}, {40, 24}, {24, 40}, {40, 40},
                 {24, 24}, {40, 24}, {24, 40}, {40, 40}};
  s.block = {32, 32, 4, 5, 0};
  const auto d = render_depth(ws, s);
  const auto img = render_rgb(ws, s);
  for (int i = 0; i < 64 * 64; ++i) {
    if (img.data[i * 3] == kBlockColor[0] && img.data[i * 3 + 1] == kBlockColor[1])
      EXPECT_FLOAT_EQ(d.data[i], ws.table_height + ws.block_height);
  }
}

TEST(Keypoints, BlockCornersExact) {
  const auto s = simple_state(20, 20, 4);
  const auto kp = keypoints(ws, s);
  EXPECT_FLOAT_EQ(kp[0].x, 16);
  EXPECT_FLOAT_EQ(kp[0].y, 16);
  EXPECT_FLOAT_EQ(kp[1].x, 24);
  EXPECT_FLOAT_EQ(kp[1].y, 16);
  EXPECT_FLOAT_EQ(kp[2].x, 16);
  EXPECT_FLOAT_EQ(kp[2].y, 24);
  EXPECT_FLOAT_EQ(kp[3].x, 24);
  EXPECT_FLOAT_EQ(kp[3].y, 24);
  EXPECT_EQ(static_cast<int>(kp.size()), ws.n_keypoints());
}

TEST(Keypoints, StaticTableGridNeverMoves) {
  const auto c = gen_clip(ws, 5, Script::push, 16);
  const int grid_start = 4 + 1 + 16;
  for (int i = grid_start; i < c.n0; ++i)
    for (int t = 1; t < c.T; ++t) {
      EXPECT_FLOAT_EQ(c.kp_x(i, t), c.kp_x(i, 0));
      EXPECT_FLOAT_EQ(c.kp_y(i, t), c.kp_y(i, 0));
    }
}

TEST(Keypoints, GraspedBlockCornersShiftExactly) {
  SceneState s = offscreen_state();
  s.gripper = {30, 30, 1, 1};
  s.block = {31, 30, 5, 5, 0};
  const auto before = keypoints(ws, s);
  const SceneState out = step(ws, s, {2, 0, 1});
  const auto after = keypoints(ws, out);
  for (int i = 0; i < 4; ++i) {
    EXPECT_FLOAT_EQ(after[i].x - before[i].x, 2.0f);
    EXPECT_FLOAT_EQ(after[i].y - before[i].y, 0.0f);
  }
}

TEST(GenClip, DeterministicPerSeedScriptT) {
  const auto a = gen_clip(ws, 1234, Script::grasp_place, 16);
  const auto b = gen_clip(ws, 1234, Script::grasp_place, 16);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.depth, b.depth);
  EXPECT_EQ(a.actions, b.actions);
  EXPECT_EQ(a.keypoints, b.keypoints);
  const auto c = gen_clip(ws, 1235, Script::grasp_place, 16);
  EXPECT_NE(a.rgb, c.rgb);
}

TEST(GenClip, SixteenFramesSixteenActions) {
  const auto c = gen_clip(ws, 7, Script::push, 16);
  EXPECT_EQ(c.T, 16);
  EXPECT_EQ(c.rgb.size(), 16u * 64 * 64 * 3);
  EXPECT_EQ(c.actions.size(), 16u * 3);
}

TEST(GenClip, PushScriptDisplacesBlock) {
  int displaced = 0;
  const int n = 40;
  for (int i = 0; i < n; ++i) {
    const auto c = gen_clip(ws, 1000 + static_cast<uint64_t>(i), Script::push, 16);
    // corner keypoint 0 tracks the block
    const float dx = c.kp_x(0, 15) - c.kp_x(0, 0);
    const float dy = c.kp_y(0, 15) - c.kp_y(0, 0);
    if (std::hypot(dx, dy) > 2.0f) ++displaced;
  }
  EXPECT_GE(displaced, static_cast<int>(0.9 * n));
}

TEST(GenClip, ReplayingActionsReproducesFramesBitIdentically) {
  for (uint64_t seed : {11ull, 22ull, 33ull}) {
    for (Script sc : {Script::push, Script::grasp_place, Script::cloth_drag}) {
      const auto c = gen_clip(ws, seed, sc, 12);
      SceneState s = init_scene(ws, seed, sc);
      for (int t = 0; t < c.T; ++t) {
        const auto img = render_rgb(ws, s);
        const auto dep = render_depth(ws, s);
        ASSERT_TRUE(std::equal(img.data.begin(), img.data.end(),
                               c.rgb.begin() + static_cast<size_t>(t) * 64 * 64 * 3));
        ASSERT_TRUE(std::equal(dep.data.begin(), dep.data.end(),
                               c.depth.begin() + static_cast<size_t>(t) * 64 * 64));
        if (t < c.T - 1)
          s = step(ws, s, {c.actions[static_cast<size_t>(t) * 3],
                           c.actions[static_cast<size_t>(t) * 3 + 1],
                           c.actions[static_cast<size_t>(t) * 3 + 2]});
      }
    }
  }
}

TEST(GenClip, DepthRgbCoherenceAndPositivity) {
  for (uint64_t seed : {3ull, 4ull, 5ull}) {
    const auto c = gen_clip(ws, seed, Script::grasp_place, 16);
    for (size_t i = 0; i < c.depth.size(); ++i) EXPECT_GT(c.depth[i], 0.0f);
    for (int t = 0; t < c.T; ++t)
      for (int i = 0; i < 64 * 64; ++i) {
        const size_t px = static_cast<size_t>(t) * 64 * 64 + i;
        if (c.rgb[px * 3] == kBlockColor[0] && c.rgb[px * 3 + 1] == kBlockColor[1])
          ASSERT_FLOAT_EQ(c.depth[px], ws.table_height + ws.block_height);
      }
  }
}

TEST(GenClip, RigidCornerDisplacementMatchesBlock) {
  const auto c = gen_clip(ws, 77, Script::push, 16);
  for (int t = 0; t + 1 < c.T; ++t) {
    const float dx0 = c.kp_x(0, t + 1) - c.kp_x(0, t);
    const float dy0 = c.kp_y(0, t + 1) - c.kp_y(0, t);
    for (int i = 1; i < 4; ++i) {
      EXPECT_NEAR(c.kp_x(i, t + 1) - c.kp_x(i, t), dx0, 1e-4);
      EXPECT_NEAR(c.kp_y(i, t + 1) - c.kp_y(i, t), dy0, 1e-4);
    }
  }
}

TEST(MotionFilter, StaticAndExtremeClipsRejected) {
  Clip c;
  c.T = 4;
  c.H = c.W = 8;
  c.rgb.assign(4 * 8 * 8 * 3, 100);
  EXPECT_EQ(clip_motion(c), 0.0);
  EXPECT_FALSE(motion_filter(c, 1e-3, 0.2));
  // alternating full black/white
  for (int t = 0; t < 4; ++t)
    std::fill(c.rgb.begin() + t * 8 * 8 * 3, c.rgb.begin() + (t + 1) * 8 * 8 * 3,
              static_cast<uint8_t>(t % 2 ? 255 : 0));
  EXPECT_DOUBLE_EQ(clip_motion(c), 1.0);
  EXPECT_FALSE(motion_filter(c, 1e-3, 0.2));
  EXPECT_THROW(motion_filter(c, 0.5, 0.2), rs::UsageError);
}

TEST(MotionFilter, GeneratedPushClipKeptAtDefaults) {
  const auto c = gen_clip(ws, 42, Script::push, 16);
  EXPECT_TRUE(motion_filter(c));
}

TEST(Difficulty, DerivedFromScript) {
  EXPECT_EQ(gen_clip(ws, 1, Script::push, 4).difficulty, Difficulty::easy);
  EXPECT_EQ(gen_clip(ws, 1, Script::random, 4).difficulty, Difficulty::easy);
  EXPECT_EQ(gen_clip(ws, 1, Script::grasp_place, 4).difficulty, Difficulty::medium);
  EXPECT_EQ(gen_clip(ws, 1, Script::cloth_drag, 4).difficulty, Difficulty::hard);
}

TEST(Success, ClosedBallConvention) {
  SceneState s = offscreen_state();
  s.goal = {30, 30, 5};
  s.block.cx = 30;
  s.block.cy = 30;
  EXPECT_TRUE(success(s));
  s.block.cx = 35;  // distance == radius exactly
  EXPECT_TRUE(success(s));
  s.block.cx = 36;  // radius + 1
  EXPECT_FALSE(success(s));
}

TEST(Dataset, RoundTripAndManifest) {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "rs_ds_test").string();
  fs::remove_all(dir);
  generate_dataset(dir, ws, 2024, "mixed", 8, 8);
  Dataset ds(dir);
  EXPECT_EQ(ds.size(), 8u);
  EXPECT_EQ(ds.meta().T, 8);
  EXPECT_EQ(ds.meta().n0, ws.n_keypoints());
  EXPECT_GT(ds.meta().depth_max, ds.meta().depth_min);
  // reload equals regeneration
  const auto c0 = ds.load(0);
  const auto again = gen_clip(ws, ds.info(0).seed, ds.info(0).script, 8);
  EXPECT_EQ(c0.rgb, again.rgb);
  EXPECT_EQ(c0.depth, again.depth);
  EXPECT_EQ(c0.actions, again.actions);
  EXPECT_EQ(c0.keypoints, again.keypoints);
  EXPECT_EQ(c0.kp_valid, again.kp_valid);
  // byte-identical regeneration of the whole directory
  const std::string dir2 = (fs::temp_directory_path() / "rs_ds_test2").string();
  fs::remove_all(dir2);
  generate_dataset(dir2, ws, 2024, "mixed", 8, 8);
  for (const char* f : {"manifest.json", "rgb.bin", "depth.bin", "actions.bin", "keypoints.bin"}) {
    std::ifstream a(fs::path(dir) / f, std::ios::binary), b(fs::path(dir2) / f, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    EXPECT_EQ(sa, sb) << f;
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Dataset, DepthNormalizationRoundTrip) {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "rs_ds_norm").string();
  fs::remove_all(dir);
  generate_dataset(dir, ws, 3, "push", 3, 6);
  Dataset ds(dir);
  const float d = 13.37f;
  EXPECT_NEAR(ds.denormalize_depth(ds.normalize_depth(d)), d, 1e-4);
  EXPECT_GE(ds.normalize_depth(ds.meta().depth_min), 0.0f);
  EXPECT_LE(ds.normalize_depth(ds.meta().depth_max), 1.0f);
  fs::remove_all(dir);
}
