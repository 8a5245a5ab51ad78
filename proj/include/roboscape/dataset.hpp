#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "roboscape/worldgen.hpp"

// Dataset container: one directory holding manifest.json plus flat
// little-endian blobs (rgb.bin uint8, depth.bin float32, actions.bin float32,
// keypoints.bin float32 coords then uint8 validity per clip). Blobs are
// append-only; the manifest is written last.
namespace rs::worldgen {

namespace fs = std::filesystem;

struct ClipInfo {
  int id = 0;
  int T = 0, H = 0, W = 0, k = 3, n0 = 0;
  Difficulty difficulty = Difficulty::easy;
  Script script = Script::random;
  uint64_t seed = 0;
  uint64_t rgb_off = 0, depth_off = 0, actions_off = 0, keypoints_off = 0;
};

struct DatasetMeta {
  int H = 0, W = 0, T = 0, k = 3, n0 = 0;
  float v_max = 4.0f;
  float depth_min = 0.0f, depth_max = 1.0f;
  double motion_lo = kMotionFilterLo, motion_hi = kMotionFilterHi;
};

class DatasetWriter {
 public:
  DatasetWriter(const std::string& dir, const WorldSpec& ws) : dir_(dir) {
    fs::create_directories(dir_);
    rgb_.open(dir_ / "rgb.bin", std::ios::binary | std::ios::trunc);
    depth_.open(dir_ / "depth.bin", std::ios::binary | std::ios::trunc);
    actions_.open(dir_ / "actions.bin", std::ios::binary | std::ios::trunc);
    keypoints_.open(dir_ / "keypoints.bin", std::ios::binary | std::ios::trunc);
    RS_FAIL_IF(!rgb_ || !depth_ || !actions_ || !keypoints_, "cannot open dataset blobs in %s",
               dir.c_str());
    meta_.H = ws.H;
    meta_.W = ws.W;
    meta_.v_max = ws.v_max;
    meta_.n0 = ws.n_keypoints();
    meta_.depth_min = std::numeric_limits<float>::max();
    meta_.depth_max = std::numeric_limits<float>::lowest();
  }

  void add(const Clip& c) {
    RS_CHECK(c.H == meta_.H && c.W == meta_.W && c.n0 == meta_.n0, "clip geometry mismatch");
    RS_CHECK(meta_.T == 0 || c.T == meta_.T, "clip length mismatch: %d vs %d", c.T, meta_.T);
    meta_.T = c.T;
    ClipInfo info;
    info.id = static_cast<int>(clips_.size());
    info.T = c.T;
    info.H = c.H;
    info.W = c.W;
    info.k = c.k;
    info.n0 = c.n0;
    info.difficulty = c.difficulty;
    info.script = c.script;
    info.seed = c.seed;
    info.rgb_off = static_cast<uint64_t>(rgb_.tellp());
    info.depth_off = static_cast<uint64_t>(depth_.tellp());
    info.actions_off = static_cast<uint64_t>(actions_.tellp());
    info.keypoints_off = static_cast<uint64_t>(keypoints_.tellp());
    rgb_.write(reinterpret_cast<const char*>(c.rgb.data()), static_cast<std::streamsize>(c.rgb.size()));
    depth_.write(reinterpret_cast<const char*>(c.depth.data()),
                 static_cast<std::streamsize>(c.depth.size() * sizeof(float)));
    actions_.write(reinterpret_cast<const char*>(c.actions.data()),
                   static_cast<std::streamsize>(c.actions.size() * sizeof(float)));
    keypoints_.write(reinterpret_cast<const char*>(c.keypoints.data()),
                     static_cast<std::streamsize>(c.keypoints.size() * sizeof(float)));
    keypoints_.write(reinterpret_cast<const char*>(c.kp_valid.data()),
                     static_cast<std::streamsize>(c.kp_valid.size()));
    for (const float d : c.depth) {
      meta_.depth_min = std::min(meta_.depth_min, d);
      meta_.depth_max = std::max(meta_.depth_max, d);
    }
    clips_.push_back(info);
  }

  void finalize() {
    rgb_.close();
    depth_.close();
    actions_.close();
    keypoints_.close();
    nlohmann::json j;
    j["version"] = 1;
    j["H"] = meta_.H;
    j["W"] = meta_.W;
    j["T"] = meta_.T;
    j["k"] = meta_.k;
    j["n0"] = meta_.n0;
    j["v_max"] = meta_.v_max;
    j["depth_min"] = meta_.depth_min;
    j["depth_max"] = meta_.depth_max;
    j["motion_lo"] = meta_.motion_lo;
    j["motion_hi"] = meta_.motion_hi;
    nlohmann::json arr = nlohmann::json::array();
    for (const ClipInfo& c : clips_) {
      nlohmann::json e;
      e["id"] = c.id;
      e["T"] = c.T;
      e["H"] = c.H;
      e["W"] = c.W;
      e["k"] = c.k;
      e["n0"] = c.n0;
      e["difficulty"] = difficulty_name(c.difficulty);
      e["script"] = script_name(c.script);
      e["seed"] = c.seed;
      e["rgb_off"] = c.rgb_off;
      e["depth_off"] = c.depth_off;
      e["actions_off"] = c.actions_off;
      e["keypoints_off"] = c.keypoints_off;
      arr.push_back(e);
    }
    j["clips"] = arr;
    std::ofstream out(dir_ / "manifest.json", std::ios::trunc);
    out << j.dump(2) << "\n";
  }

 private:
  fs::path dir_;
  std::ofstream rgb_, depth_, actions_, keypoints_;
  DatasetMeta meta_;
  std::vector<ClipInfo> clips_;
};

class Dataset {
 public:
  explicit Dataset(const std::string& dir) : dir_(dir) {
    std::ifstream in(dir_ / "manifest.json");
    RS_FAIL_IF(!in, "dataset manifest not found in %s", dir.c_str());
    nlohmann::json j;
    in >> j;
    meta_.H = j.at("H");
    meta_.W = j.at("W");
    meta_.T = j.at("T");
    meta_.k = j.at("k");
    meta_.n0 = j.at("n0");
    meta_.v_max = j.at("v_max");
    meta_.depth_min = j.at("depth_min");
    meta_.depth_max = j.at("depth_max");
    meta_.motion_lo = j.value("motion_lo", kMotionFilterLo);
    meta_.motion_hi = j.value("motion_hi", kMotionFilterHi);
    for (const auto& e : j.at("clips")) {
      ClipInfo c;
      c.id = e.at("id");
      c.T = e.at("T");
      c.H = e.at("H");
      c.W = e.at("W");
      c.k = e.at("k");
      c.n0 = e.at("n0");
      const std::string dn = e.at("difficulty");
      c.difficulty = dn == "hard"     ? Difficulty::hard
                     : dn == "medium" ? Difficulty::medium
                                      : Difficulty::easy;
      c.script = script_from_name(e.at("script"));
      c.seed = e.at("seed");
      c.rgb_off = e.at("rgb_off");
      c.depth_off = e.at("depth_off");
      c.actions_off = e.at("actions_off");
      c.keypoints_off = e.at("keypoints_off");
      clips_.push_back(c);
    }
  }

  const DatasetMeta& meta() const { return meta_; }
  size_t size() const { return clips_.size(); }
  const ClipInfo& info(int i) const { return clips_[static_cast<size_t>(i)]; }

  Clip load(int i) const {
    RS_CHECK(i >= 0 && i < static_cast<int>(clips_.size()), "clip index %d out of range", i);
    const ClipInfo& c = clips_[static_cast<size_t>(i)];
    Clip clip;
    clip.T = c.T;
    clip.H = c.H;
    clip.W = c.W;
    clip.k = c.k;
    clip.n0 = c.n0;
    clip.difficulty = c.difficulty;
    clip.script = c.script;
    clip.seed = c.seed;
    clip.rgb.resize(static_cast<size_t>(c.T) * c.H * c.W * 3);
    clip.depth.resize(static_cast<size_t>(c.T) * c.H * c.W);
    clip.actions.resize(static_cast<size_t>(c.T) * c.k);
    clip.keypoints.resize(static_cast<size_t>(c.n0) * c.T * 2);
    clip.kp_valid.resize(static_cast<size_t>(c.n0) * c.T);
    read_at("rgb.bin", c.rgb_off, clip.rgb.data(), clip.rgb.size());
    read_at("depth.bin", c.depth_off, clip.depth.data(), clip.depth.size() * sizeof(float));
    read_at("actions.bin", c.actions_off, clip.actions.data(), clip.actions.size() * sizeof(float));
    read_at("keypoints.bin", c.keypoints_off, clip.keypoints.data(),
            clip.keypoints.size() * sizeof(float));
    read_at("keypoints.bin", c.keypoints_off + clip.keypoints.size() * sizeof(float),
            clip.kp_valid.data(), clip.kp_valid.size());
    return clip;
  }

  // Depth map normalization to [0,1] using the dataset-level bounds.
  float normalize_depth(float d) const {
    const float range = meta_.depth_max - meta_.depth_min;
    return range > 0 ? (d - meta_.depth_min) / range : 0.0f;
  }
  float denormalize_depth(float v) const {
    return meta_.depth_min + v * (meta_.depth_max - meta_.depth_min);
  }

 private:
  void read_at(const char* file, uint64_t off, void* dst, size_t n) const {
    std::ifstream in(dir_ / file, std::ios::binary);
    RS_FAIL_IF(!in, "cannot open %s", file);
    in.seekg(static_cast<std::streamoff>(off));
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    RS_FAIL_IF(in.gcount() != static_cast<std::streamsize>(n), "truncated read from %s", file);
  }

  fs::path dir_;
  DatasetMeta meta_;
  std::vector<ClipInfo> clips_;
};

// Generates `count` clips into `dir`. Script "mixed" cycles the four scripts.
// Clips failing the motion filter are resampled from follow-on seeds, which
// keeps generation a pure function of (seed, script, count).
inline void generate_dataset(const std::string& dir, const WorldSpec& ws, uint64_t seed,
                             const std::string& script, int count, int T, bool filter = true) {
  RS_CHECK(count >= 1, "gen-data: need at least one clip");
  DatasetWriter w(dir, ws);
  uint64_t sub = 0;
  for (int i = 0; i < count; ++i) {
    Script sc;
    if (script == "mixed") {
      sc = static_cast<Script>(i % 4);
    } else {
      sc = script_from_name(script);
    }
    for (int tries = 0;; ++tries) {
      const uint64_t clip_seed = Rng(seed).fork("clip", sub++).next();
      Clip c = gen_clip(ws, clip_seed, sc, T);
      if (!filter || motion_filter(c) || tries >= 16) {
        w.add(c);
        break;
      }
    }
  }
  w.finalize();
}

}  // namespace rs::worldgen
