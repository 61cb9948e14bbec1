#pragma once

// Run configuration (JSON), dataset synthesis from it, and the run manifest.
// A manifest is a fully resolved RunConfig plus format versions, so it can be
// fed back as --config.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "evflow/encoding.hpp"
#include "evflow/eval.hpp"
#include "evflow/events.hpp"
#include "evflow/model.hpp"
#include "evflow/training.hpp"

namespace evflow {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Random scenes: blob or grating patterns under random translation or
// rotation. Used when RunConfig::scenes is empty.
struct SceneSetConfig {
  int count = 4;
  int width = 32;
  int height = 32;
  int duration = 401;
  int steps_per_count_interval = 1;
  int counts_per_gt = 10;
  std::uint32_t step_us = 1000;
  double max_speed = 0.4;       // px per step
  double max_omega = 0.02;      // rad per step
  double rotation_fraction = 0.25;
  std::string pattern = "blobs";
  int blobs = 14;
  double blob_radius = 2.0;
};

struct RunConfig {
  std::vector<Scene> scenes;
  SceneSetConfig scene_set;
  CameraModel camera;
  NetworkConfig network;
  TrainConfig train;
  EvalOptions eval;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  // Propagates seed, threads, m and cap to the nested configs.
  RunConfig resolved() const;
};

inline constexpr int manifest_version = 1;

nlohmann::json to_json(const Pattern& p);
Pattern pattern_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
// Unknown keys and wrong types raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json manifest(const RunConfig& resolved, const std::string& command);

// Stable per-stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

std::vector<Scene> random_scenes(const SceneSetConfig& cfg, std::uint64_t seed);
// Explicit scenes, or the random set when none are given.
std::vector<Scene> scenes_of(const RunConfig& cfg);

struct StreamData {
  EventStream events;
  std::vector<CountFrame> counts;
  std::vector<FlowField> gts;
};

// Renders, emits and counts; the count stream covers the whole scene.
StreamData simulate(const Scene& scene, const CameraModel& cam, std::uint64_t seed);
StreamData from_files(EventStream events, std::vector<FlowField> gts, std::size_t m);

// Temporal split at a ground-truth boundary: the first `fraction` of the
// ground truths (and their counts) train, the rest test.
struct StreamSplit {
  std::vector<CountFrame> train_counts, test_counts;
  std::vector<FlowField> train_gts, test_gts;
};
StreamSplit split_stream(const StreamData& data, std::size_t m, double fraction);

}  // namespace evflow
