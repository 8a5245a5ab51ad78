#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "roboscape/common.hpp"
#include "roboscape/rng.hpp"
#include "roboscape/tensor.hpp"

// Procedural top-down manipulation micro-simulator: a 2.5-D table scene with
// a kinematic gripper, one rigid block, a spring-lattice cloth patch, and a
// goal region. Height above the table doubles as the depth channel, so RGB,
// depth, and keypoint annotations are exact by construction.
namespace rs::worldgen {

struct Vec2 {
  float x = 0, y = 0;
};

inline float dist(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct WorldSpec {
  int W = 64, H = 64;
  float table_height = 10.0f;
  float v_max = 4.0f;  // px per step, per axis
  float block_height = 5.0f;
  float grip_half = 4.0f;
  int cloth_p = 4;  // P x P particle lattice
  float cloth_height = 2.0f;
  float cloth_stiffness = 0.8f;
  float cloth_damping = 0.9f;
  float cloth_dt = 0.5f;
  int table_grid = 4;  // static keypoint grid (table_grid^2 points)

  int n_keypoints() const { return 4 + 1 + cloth_p * cloth_p + table_grid * table_grid; }
};

// Reserved palette; the block is the only saturated-red object so frame-based
// detection can segment it.
inline constexpr std::array<uint8_t, 3> kTableColor = {110, 110, 110};
inline constexpr std::array<uint8_t, 3> kGoalColor = {165, 165, 85};
inline constexpr std::array<uint8_t, 3> kClothColorA = {70, 110, 190};
inline constexpr std::array<uint8_t, 3> kClothColorB = {95, 135, 210};
inline constexpr std::array<uint8_t, 3> kBlockColor = {200, 35, 35};
inline constexpr std::array<uint8_t, 3> kGripperColor = {25, 25, 32};

struct Gripper {
  float x = 0, y = 0;
  float z_press = 0;  // in [0,1]
  float grip = 0;     // in [0,1]
};

struct Block {
  float cx = 0, cy = 0;
  float half_size = 5;
  float height = 5;
  float hue = 0;  // palette slot; 0 is the reserved saturated red
};

struct Cloth {
  std::vector<Vec2> pos;  // P*P particles, row-major
  std::vector<Vec2> vel;
  float rest = 6.0f;
};

struct Goal {
  float x = 0, y = 0, radius = 6;
};

struct SceneState {
  Gripper gripper;
  Block block;
  Cloth cloth;
  Goal goal;
  float table_height = 10.0f;
};

struct Action {
  float dx = 0, dy = 0, grip = 0;
};

enum class Script : int { random = 0, push = 1, grasp_place = 2, cloth_drag = 3 };

inline const char* script_name(Script s) {
  switch (s) {
    case Script::random: return "random";
    case Script::push: return "push";
    case Script::grasp_place: return "grasp_place";
    case Script::cloth_drag: return "cloth_drag";
  }
  return "?";
}

inline Script script_from_name(const std::string& s) {
  for (int i = 0; i < 4; ++i)
    if (s == script_name(static_cast<Script>(i))) return static_cast<Script>(i);
  throw UsageError("unknown script '" + s + "'");
}

enum class Difficulty : int { easy = 0, medium = 1, hard = 2 };

inline const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::medium: return "medium";
    case Difficulty::hard: return "hard";
  }
  return "?";
}

// One training sample. actions[T-1] exists but its effect is unobserved.
struct Clip {
  int T = 0, H = 0, W = 0, k = 3, n0 = 0;
  std::vector<uint8_t> rgb;       // T*H*W*3
  std::vector<float> depth;       // T*H*W, strictly positive
  std::vector<float> actions;     // T*k raw px units (dx, dy, grip)
  std::vector<float> keypoints;   // n0*T*2 pixel coords (x, y)
  std::vector<uint8_t> kp_valid;  // n0*T
  Difficulty difficulty = Difficulty::easy;
  Script script = Script::random;
  uint64_t seed = 0;

  float kp_x(int i, int t) const { return keypoints[(static_cast<size_t>(i) * T + t) * 2]; }
  float kp_y(int i, int t) const { return keypoints[(static_cast<size_t>(i) * T + t) * 2 + 1]; }
  bool kp_ok(int i, int t) const { return kp_valid[static_cast<size_t>(i) * T + t] != 0; }
};

inline float clampf(float v, float lo, float hi) { return v < lo ? lo : (v > hi ? hi : v); }

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

inline bool boxes_overlap(float ax, float ay, float ah, float bx, float by, float bh) {
  return std::abs(ax - bx) < ah + bh && std::abs(ay - by) < ah + bh;
}

inline SceneState step(const WorldSpec& ws, const SceneState& in, Action a) {
  SceneState s = in;
  a.dx = clampf(a.dx, -ws.v_max, ws.v_max);
  a.dy = clampf(a.dy, -ws.v_max, ws.v_max);
  a.grip = clampf(a.grip, 0.0f, 1.0f);

  const float gx0 = s.gripper.x, gy0 = s.gripper.y;
  s.gripper.x = clampf(gx0 + a.dx, ws.grip_half, static_cast<float>(ws.W) - ws.grip_half);
  s.gripper.y = clampf(gy0 + a.dy, ws.grip_half, static_cast<float>(ws.H) - ws.grip_half);
  const float gdx = s.gripper.x - gx0, gdy = s.gripper.y - gy0;
  s.gripper.grip = a.grip;
  s.gripper.z_press = a.grip;

  const bool gripping = a.grip > 0.5f;
  Block& b = s.block;
  if (boxes_overlap(s.gripper.x, s.gripper.y, ws.grip_half, b.cx, b.cy, b.half_size)) {
    if (gripping) {
      b.cx += gdx;
      b.cy += gdy;
    } else {
      // kinematic push: resolve along the axis of least penetration
      const float ox = ws.grip_half + b.half_size - std::abs(s.gripper.x - b.cx);
      const float oy = ws.grip_half + b.half_size - std::abs(s.gripper.y - b.cy);
      if (ox <= oy) {
        b.cx += (b.cx >= s.gripper.x ? ox : -ox);
      } else {
        b.cy += (b.cy >= s.gripper.y ? oy : -oy);
      }
    }
    b.cx = clampf(b.cx, b.half_size, static_cast<float>(ws.W) - b.half_size);
    b.cy = clampf(b.cy, b.half_size, static_cast<float>(ws.H) - b.half_size);
  }

  // Cloth: one explicit-Euler step, x <- x + dt*v (old v), then
  // v <- damp*(v + dt*F) with spring forces at the old positions.
  // Particles under a gripping gripper are pinned to it.
  Cloth& c = s.cloth;
  const int P = ws.cloth_p;
  std::vector<Vec2> force(c.pos.size());
  auto spring = [&](int i, int j) {
    const Vec2 d{c.pos[j].x - c.pos[i].x, c.pos[j].y - c.pos[i].y};
    const float len = std::hypot(d.x, d.y);
    if (len < 1e-6f) return;
    const float f = ws.cloth_stiffness * (len - c.rest) / len;
    force[i].x += f * d.x;
    force[i].y += f * d.y;
    force[j].x -= f * d.x;
    force[j].y -= f * d.y;
  };
  for (int y = 0; y < P; ++y)
    for (int x = 0; x < P; ++x) {
      const int i = y * P + x;
      if (x + 1 < P) spring(i, i + 1);
      if (y + 1 < P) spring(i, i + P);
    }
  for (size_t i = 0; i < c.pos.size(); ++i) {
    const bool pinned =
        gripping && std::abs(c.pos[i].x - s.gripper.x) < ws.grip_half &&
        std::abs(c.pos[i].y - s.gripper.y) < ws.grip_half;
    if (pinned) {
      c.pos[i].x += gdx;
      c.pos[i].y += gdy;
      c.vel[i] = {0, 0};
    } else {
      c.pos[i].x += ws.cloth_dt * c.vel[i].x;
      c.pos[i].y += ws.cloth_dt * c.vel[i].y;
      c.vel[i].x = ws.cloth_damping * (c.vel[i].x + ws.cloth_dt * force[i].x);
      c.vel[i].y = ws.cloth_damping * (c.vel[i].y + ws.cloth_dt * force[i].y);
    }
    c.pos[i].x = clampf(c.pos[i].x, 0.0f, static_cast<float>(ws.W - 1));
    c.pos[i].y = clampf(c.pos[i].y, 0.0f, static_cast<float>(ws.H - 1));
  }
  return s;
}

inline bool success(const SceneState& s) {
  return dist({s.block.cx, s.block.cy}, {s.goal.x, s.goal.y}) <= s.goal.radius;
}

// ---------------------------------------------------------------------------
// Rendering (flat-shaded raster, no antialiasing). Painter's order:
// table < goal ring < cloth < block < gripper, identical in RGB and depth.
// ---------------------------------------------------------------------------

namespace detail {

inline void fill_box(uint8_t* rgb, float* depth, int W, int H, float cx, float cy, float half,
                     std::array<uint8_t, 3> color, float surface) {
  const int side = static_cast<int>(std::lround(2.0f * half));
  const int x0 = static_cast<int>(std::lround(cx - half));
  const int y0 = static_cast<int>(std::lround(cy - half));
  for (int y = std::max(0, y0); y < std::min(H, y0 + side); ++y)
    for (int x = std::max(0, x0); x < std::min(W, x0 + side); ++x) {
      if (rgb) {
        uint8_t* p = rgb + (static_cast<size_t>(y) * W + x) * 3;
        p[0] = color[0];
        p[1] = color[1];
        p[2] = color[2];
      }
      if (depth) depth[static_cast<size_t>(y) * W + x] = surface;
    }
}

inline void fill_triangle(uint8_t* rgb, float* depth, int W, int H, Vec2 a, Vec2 b, Vec2 c,
                          std::array<uint8_t, 3> color, float surface) {
  const float minx = std::min({a.x, b.x, c.x}), maxx = std::max({a.x, b.x, c.x});
  const float miny = std::min({a.y, b.y, c.y}), maxy = std::max({a.y, b.y, c.y});
  const int x0 = std::max(0, static_cast<int>(std::floor(minx)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(maxx)));
  const int y0 = std::max(0, static_cast<int>(std::floor(miny)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(maxy)));
  auto edge = [](Vec2 p, Vec2 q, float px, float py) {
    return (q.x - p.x) * (py - p.y) - (q.y - p.y) * (px - p.x);
  };
  const float area = edge(a, b, c.x, c.y);
  if (std::abs(area) < 1e-9f) return;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const float px = static_cast<float>(x) + 0.5f, py = static_cast<float>(y) + 0.5f;
      const float w0 = edge(a, b, px, py), w1 = edge(b, c, px, py), w2 = edge(c, a, px, py);
      const bool in = (area > 0) ? (w0 >= 0 && w1 >= 0 && w2 >= 0) : (w0 <= 0 && w1 <= 0 && w2 <= 0);
      if (!in) continue;
      if (rgb) {
        uint8_t* p = rgb + (static_cast<size_t>(y) * W + x) * 3;
        p[0] = color[0];
        p[1] = color[1];
        p[2] = color[2];
      }
      if (depth) depth[static_cast<size_t>(y) * W + x] = surface;
    }
}

inline void render_scene(const WorldSpec& ws, const SceneState& s, uint8_t* rgb, float* depth) {
  const int W = ws.W, H = ws.H;
  if (rgb)
    for (int i = 0; i < W * H; ++i) {
      rgb[i * 3] = kTableColor[0];
      rgb[i * 3 + 1] = kTableColor[1];
      rgb[i * 3 + 2] = kTableColor[2];
    }
  if (depth)
    for (int i = 0; i < W * H; ++i) depth[i] = s.table_height;

  // goal marker: flat filled square, no height contribution
  if (rgb) fill_box(rgb, nullptr, W, H, s.goal.x, s.goal.y, s.goal.radius, kGoalColor, 0.0f);

  // cloth quads, checkered
  const int P = ws.cloth_p;
  const float cloth_surface = s.table_height + ws.cloth_height;
  for (int y = 0; y + 1 < P; ++y)
    for (int x = 0; x + 1 < P; ++x) {
      const Vec2 p00 = s.cloth.pos[y * P + x], p10 = s.cloth.pos[y * P + x + 1];
      const Vec2 p01 = s.cloth.pos[(y + 1) * P + x], p11 = s.cloth.pos[(y + 1) * P + x + 1];
      const auto col = ((x + y) % 2 == 0) ? kClothColorA : kClothColorB;
      fill_triangle(rgb, depth, W, H, p00, p10, p11, col, cloth_surface);
      fill_triangle(rgb, depth, W, H, p00, p11, p01, col, cloth_surface);
    }

  fill_box(rgb, depth, W, H, s.block.cx, s.block.cy, s.block.half_size, kBlockColor,
           s.table_height + s.block.height);
  fill_box(rgb, depth, W, H, s.gripper.x, s.gripper.y, ws.grip_half, kGripperColor,
           s.table_height + 6.0f + 2.0f * s.gripper.z_press);
}

}  // namespace detail

inline Tensor<uint8_t> render_rgb(const WorldSpec& ws, const SceneState& s) {
  Tensor<uint8_t> img({ws.H, ws.W, 3});
  detail::render_scene(ws, s, img.ptr(), nullptr);
  return img;
}

inline Tensor<float> render_depth(const WorldSpec& ws, const SceneState& s) {
  Tensor<float> d({ws.H, ws.W});
  detail::render_scene(ws, s, nullptr, d.ptr());
  return d;
}

// Fixed-identity keypoints: 4 block corners, gripper center, P*P cloth
// particles, table_grid^2 static table points.
inline std::vector<Vec2> keypoints(const WorldSpec& ws, const SceneState& s) {
  std::vector<Vec2> out;
  out.reserve(static_cast<size_t>(ws.n_keypoints()));
  const Block& b = s.block;
  out.push_back({b.cx - b.half_size, b.cy - b.half_size});
  out.push_back({b.cx + b.half_size, b.cy - b.half_size});
  out.push_back({b.cx - b.half_size, b.cy + b.half_size});
  out.push_back({b.cx + b.half_size, b.cy + b.half_size});
  out.push_back({s.gripper.x, s.gripper.y});
  for (const Vec2& p : s.cloth.pos) out.push_back(p);
  const float sx = static_cast<float>(ws.W) / (2.0f * ws.table_grid);
  for (int gy = 0; gy < ws.table_grid; ++gy)
    for (int gx = 0; gx < ws.table_grid; ++gx)
      out.push_back({sx * (2 * gx + 1), sx * (2 * gy + 1)});
  return out;
}

// ---------------------------------------------------------------------------
// Scene generation + scripted controllers
// ---------------------------------------------------------------------------

inline SceneState init_scene(const WorldSpec& ws, uint64_t seed, Script script) {
  Rng rng = Rng(seed).fork("scene");
  SceneState s;
  s.table_height = ws.table_height;

  s.block.half_size = static_cast<float>(std::round(rng.uniform(4.0, 6.0)));
  s.block.height = ws.block_height;
  s.block.cx = static_cast<float>(std::round(rng.uniform(16.0, ws.W - 16.0)));
  s.block.cy = static_cast<float>(std::round(rng.uniform(16.0, ws.H - 16.0)));

  for (int tries = 0; tries < 64; ++tries) {
    s.goal.x = static_cast<float>(std::round(rng.uniform(12.0, ws.W - 12.0)));
    s.goal.y = static_cast<float>(std::round(rng.uniform(12.0, ws.H - 12.0)));
    const float d = dist({s.goal.x, s.goal.y}, {s.block.cx, s.block.cy});
    if (d >= 15.0f && d <= 36.0f) break;
  }
  s.goal.radius = static_cast<float>(std::round(rng.uniform(5.0, 7.0)));

  for (int tries = 0; tries < 64; ++tries) {
    s.gripper.x = static_cast<float>(std::round(rng.uniform(8.0, ws.W - 8.0)));
    s.gripper.y = static_cast<float>(std::round(rng.uniform(8.0, ws.H - 8.0)));
    if (!boxes_overlap(s.gripper.x, s.gripper.y, ws.grip_half + 2, s.block.cx, s.block.cy,
                       s.block.half_size))
      break;
  }

  // cloth: near the action for cloth_drag, otherwise in the corner farthest
  // from the block-goal midpoint
  const int P = ws.cloth_p;
  s.cloth.rest = 6.0f;
  Vec2 origin;
  if (script == Script::cloth_drag) {
    origin.x = static_cast<float>(std::round(rng.uniform(14.0, ws.W - 14.0 - (P - 1) * s.cloth.rest)));
    origin.y = static_cast<float>(std::round(rng.uniform(14.0, ws.H - 14.0 - (P - 1) * s.cloth.rest)));
  } else {
    const float span = (P - 1) * s.cloth.rest;
    const Vec2 mid{(s.block.cx + s.goal.x) / 2, (s.block.cy + s.goal.y) / 2};
    const std::array<Vec2, 4> corners = {Vec2{6, 6}, Vec2{ws.W - 6 - span, 6},
                                         Vec2{6, ws.H - 6 - span},
                                         Vec2{ws.W - 6 - span, ws.H - 6 - span}};
    origin = corners[0];
    float best = -1;
    for (const Vec2& c : corners) {
      const float d = dist({c.x + span / 2, c.y + span / 2}, mid);
      if (d > best) {
        best = d;
        origin = c;
      }
    }
  }
  s.cloth.pos.resize(static_cast<size_t>(P) * P);
  s.cloth.vel.assign(static_cast<size_t>(P) * P, {0, 0});
  for (int y = 0; y < P; ++y)
    for (int x = 0; x < P; ++x)
      s.cloth.pos[static_cast<size_t>(y) * P + x] = {origin.x + x * s.cloth.rest,
                                                     origin.y + y * s.cloth.rest};
  return s;
}

namespace detail {

inline Action toward(const WorldSpec& ws, Vec2 from, Vec2 to, float grip) {
  Action a;
  a.dx = clampf(to.x - from.x, -ws.v_max, ws.v_max);
  a.dy = clampf(to.y - from.y, -ws.v_max, ws.v_max);
  a.grip = grip;
  return a;
}

// Stateful per-clip controller emitting one action per frame.
struct Controller {
  Script script;
  int phase = 0;
  Vec2 drag_target;   // cloth_drag
  int cloth_corner = 0;
  Vec2 walk_vel;      // random

  void setup(const WorldSpec& ws, const SceneState& s, Rng& rng) {
    if (script == Script::cloth_drag) {
      cloth_corner = rng.index(4);
      const float ang = static_cast<float>(rng.uniform(0.0, 2.0 * 3.14159265));
      const float len = static_cast<float>(rng.uniform(14.0, 26.0));
      const Vec2 p = corner_pos(ws, s);
      drag_target = {clampf(p.x + len * std::cos(ang), 8.0f, ws.W - 8.0f),
                     clampf(p.y + len * std::sin(ang), 8.0f, ws.H - 8.0f)};
    }
  }

  Vec2 corner_pos(const WorldSpec& ws, const SceneState& s) const {
    const int P = ws.cloth_p;
    const int idx[4] = {0, P - 1, (P - 1) * P, P * P - 1};
    return s.cloth.pos[static_cast<size_t>(idx[cloth_corner])];
  }

  Action next(const WorldSpec& ws, const SceneState& s, Rng& rng) {
    const Vec2 g{s.gripper.x, s.gripper.y};
    const Vec2 b{s.block.cx, s.block.cy};
    const Vec2 goal{s.goal.x, s.goal.y};
    Action a;
    switch (script) {
      case Script::random: {
        walk_vel.x = 0.8f * walk_vel.x + static_cast<float>(rng.uniform(-0.6, 0.6)) * ws.v_max;
        walk_vel.y = 0.8f * walk_vel.y + static_cast<float>(rng.uniform(-0.6, 0.6)) * ws.v_max;
        a.dx = clampf(walk_vel.x, -ws.v_max, ws.v_max);
        a.dy = clampf(walk_vel.y, -ws.v_max, ws.v_max);
        a.grip = (phase == 1) ? 1.0f : 0.0f;
        if (rng.uniform() < 0.1) phase = 1 - phase;
        return a;
      }
      case Script::push: {
        if (success(s)) {
          a = toward(ws, g, {b.x - 6, b.y - 6}, 0.0f);
          break;
        }
        const float dgb = dist(b, goal);
        const Vec2 dir{(goal.x - b.x) / dgb, (goal.y - b.y) / dgb};
        const float off = s.block.half_size + ws.grip_half;
        const Vec2 behind{b.x - dir.x * (off + 1.0f), b.y - dir.y * (off + 1.0f)};
        if (phase == 0 && dist(g, behind) > 2.5f) {
          a = toward(ws, g, behind, 0.0f);
        } else {
          phase = 1;
          // drive through the block toward the goal
          a.dx = dir.x * ws.v_max;
          a.dy = dir.y * ws.v_max;
          a.grip = 0.0f;
        }
        break;
      }
      case Script::grasp_place: {
        if (phase == 0) {
          if (dist(g, b) <= 1.5f) {
            phase = 1;
          } else {
            a = toward(ws, g, b, 0.0f);
            break;
          }
        }
        if (phase == 1) {
          if (success(s)) {
            phase = 2;
          } else {
            a = toward(ws, g, goal, 1.0f);
            break;
          }
        }
        a = toward(ws, g, {8, 8}, 0.0f);  // release and retreat
        break;
      }
      case Script::cloth_drag: {
        const Vec2 target = corner_pos(ws, s);
        if (phase == 0) {
          if (dist(g, target) <= 1.5f) {
            phase = 1;
          } else {
            a = toward(ws, g, target, 0.0f);
            break;
          }
        }
        if (phase == 1) {
          if (dist(g, drag_target) <= 1.5f) {
            phase = 2;
          } else {
            a = toward(ws, g, drag_target, 1.0f);
            break;
          }
        }
        a = toward(ws, g, {static_cast<float>(ws.W - 8), 8}, 0.0f);
        break;
      }
    }
    a.dx = clampf(a.dx + static_cast<float>(rng.normal(0.0, 0.3)), -ws.v_max, ws.v_max);
    a.dy = clampf(a.dy + static_cast<float>(rng.normal(0.0, 0.3)), -ws.v_max, ws.v_max);
    return a;
  }
};

}  // namespace detail

// Deterministic in (seed, script, T): byte-identical clips across calls.
inline Clip gen_clip(const WorldSpec& ws, uint64_t seed, Script script, int T) {
  RS_CHECK(T >= 2, "gen_clip: T must be >= 2, got %d", T);
  Clip clip;
  clip.T = T;
  clip.H = ws.H;
  clip.W = ws.W;
  clip.n0 = ws.n_keypoints();
  clip.seed = seed;
  clip.script = script;
  clip.difficulty = (script == Script::grasp_place) ? Difficulty::medium
                    : (script == Script::cloth_drag) ? Difficulty::hard
                                                     : Difficulty::easy;
  clip.rgb.resize(static_cast<size_t>(T) * ws.H * ws.W * 3);
  clip.depth.resize(static_cast<size_t>(T) * ws.H * ws.W);
  clip.actions.resize(static_cast<size_t>(T) * 3);
  clip.keypoints.resize(static_cast<size_t>(clip.n0) * T * 2);
  clip.kp_valid.assign(static_cast<size_t>(clip.n0) * T, 1);

  SceneState s = init_scene(ws, seed, script);
  Rng rng = Rng(seed).fork("controller");
  detail::Controller ctl;
  ctl.script = script;
  ctl.setup(ws, s, rng);

  for (int t = 0; t < T; ++t) {
    detail::render_scene(ws, s, clip.rgb.data() + static_cast<size_t>(t) * ws.H * ws.W * 3,
                         clip.depth.data() + static_cast<size_t>(t) * ws.H * ws.W);
    const auto kps = keypoints(ws, s);
    for (int i = 0; i < clip.n0; ++i) {
      clip.keypoints[(static_cast<size_t>(i) * T + t) * 2] = kps[static_cast<size_t>(i)].x;
      clip.keypoints[(static_cast<size_t>(i) * T + t) * 2 + 1] = kps[static_cast<size_t>(i)].y;
    }
    const Action a = ctl.next(ws, s, rng);
    clip.actions[static_cast<size_t>(t) * 3] = a.dx;
    clip.actions[static_cast<size_t>(t) * 3 + 1] = a.dy;
    clip.actions[static_cast<size_t>(t) * 3 + 2] = a.grip;
    if (t < T - 1) s = step(ws, s, a);
  }
  return clip;
}

// Mean absolute inter-frame pixel difference (frames scaled to [0,1]);
// keep iff theta_lo <= mu <= theta_hi.
inline constexpr double kMotionFilterLo = 1e-3;
inline constexpr double kMotionFilterHi = 0.2;

inline double clip_motion(const Clip& clip) {
  const size_t frame = static_cast<size_t>(clip.H) * clip.W * 3;
  double acc = 0;
  for (int t = 0; t + 1 < clip.T; ++t) {
    const uint8_t* a = clip.rgb.data() + static_cast<size_t>(t) * frame;
    const uint8_t* b = a + frame;
    int64_t sum = 0;
    for (size_t i = 0; i < frame; ++i) sum += std::abs(static_cast<int>(a[i]) - static_cast<int>(b[i]));
    acc += static_cast<double>(sum) / (255.0 * static_cast<double>(frame));
  }
  return acc / static_cast<double>(clip.T - 1);
}

inline bool motion_filter(const Clip& clip, double theta_lo = kMotionFilterLo,
                          double theta_hi = kMotionFilterHi) {
  RS_CHECK(theta_lo < theta_hi, "motion_filter: theta_lo must be < theta_hi");
  const double mu = clip_motion(clip);
  return mu >= theta_lo && mu <= theta_hi;
}

inline Difficulty difficulty(const Clip& clip) { return clip.difficulty; }

}  // namespace rs::worldgen
