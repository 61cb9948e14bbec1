#include "evflow/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

namespace evflow {

using nlohmann::json;

namespace {

// Reads optional fields of one JSON object and rejects keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const Pattern& p) {
  switch (p.kind()) {
    case Pattern::Kind::grating:
      return {{"kind", "grating"}, {"period", p.period}, {"angle", p.angle}, {"contrast", p.contrast}};
    case Pattern::Kind::checkerboard:
      return {{"kind", "checkerboard"}, {"cell", p.cell}, {"contrast", p.contrast}, {"sharpness", p.sharpness}};
    case Pattern::Kind::blobs:
      return {{"kind", "blobs"}, {"count", p.count}, {"radius", p.radius}, {"tile", p.tile}, {"seed", p.seed}};
    case Pattern::Kind::custom:
      break;
  }
  throw ConfigError("custom patterns cannot be serialized");
}

Pattern pattern_from_json(const json& j) {
  Reader r(j, "pattern");
  std::string kind = "grating";
  r.get("kind", kind);
  if (kind == "grating") {
    double period = 8, angle = 0, contrast = 0.8;
    r.get("period", period);
    r.get("angle", angle);
    r.get("contrast", contrast);
    return Pattern::grating(period, angle, contrast);
  }
  if (kind == "checkerboard") {
    double cell = 4, contrast = 0.8, sharpness = 4;
    r.get("cell", cell);
    r.get("contrast", contrast);
    r.get("sharpness", sharpness);
    return Pattern::checkerboard(cell, contrast, sharpness);
  }
  if (kind == "blobs") {
    int count = 12;
    double radius = 2, tile = 32;
    std::uint64_t seed = 0;
    r.get("count", count);
    r.get("radius", radius);
    r.get("tile", tile);
    r.get("seed", seed);
    return Pattern::blobs(count, radius, tile, seed);
  }
  throw ConfigError("pattern: unknown kind '" + kind + "'");
}

json to_json(const Scene& s) {
  json motion;
  if (s.motion.kind == Motion::Kind::translation) {
    motion = {{"kind", "translation"}, {"u", s.motion.u}, {"v", s.motion.v}};
  } else {
    motion = {{"kind", "rotation"}, {"omega", s.motion.omega}};
    if (s.motion.cx) motion["cx"] = *s.motion.cx;
    if (s.motion.cy) motion["cy"] = *s.motion.cy;
  }
  return {{"width", s.width},
          {"height", s.height},
          {"pattern", to_json(s.pattern)},
          {"motion", motion},
          {"duration", s.duration},
          {"steps_per_count_interval", s.steps_per_count_interval},
          {"counts_per_gt", s.counts_per_gt},
          {"step_us", s.step_us}};
}

Scene scene_from_json(const json& j) {
  Scene s;
  Reader r(j, "scene");
  r.get("width", s.width);
  r.get("height", s.height);
  r.get("duration", s.duration);
  r.get("steps_per_count_interval", s.steps_per_count_interval);
  r.get("counts_per_gt", s.counts_per_gt);
  r.get("step_us", s.step_us);
  if (const json* p = r.sub("pattern")) s.pattern = pattern_from_json(*p);
  if (const json* m = r.sub("motion")) {
    Reader mr(*m, "scene.motion");
    std::string kind = "translation";
    mr.get("kind", kind);
    if (kind == "translation") {
      s.motion.kind = Motion::Kind::translation;
      mr.get("u", s.motion.u);
      mr.get("v", s.motion.v);
    } else if (kind == "rotation") {
      s.motion.kind = Motion::Kind::rotation;
      mr.get("omega", s.motion.omega);
      double c = 0;
      if (m->contains("cx")) {
        mr.get("cx", c);
        s.motion.cx = c;
      }
      if (m->contains("cy")) {
        mr.get("cy", c);
        s.motion.cy = c;
      }
    } else {
      throw ConfigError("scene.motion: unknown kind '" + kind + "'");
    }
  }
  return s;
}

json to_json(const NetworkConfig& c) {
  return {{"cell", to_string(c.cell)}, {"bits", c.bits},         {"encoder", c.encoder},
          {"decoder", c.decoder},      {"kernel", c.kernel},     {"in_channels", c.in_channels},
          {"out_channels", c.out_channels}, {"skips", c.skips}, {"recurrent", c.recurrent}};
}

NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig c;
  Reader r(j, "network");
  std::string cell = to_string(c.cell);
  r.get("cell", cell);
  try {
    c.cell = cell_kind_from_string(cell);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("network.cell: ") + e.what());
  }
  r.get("bits", c.bits);
  r.get("encoder", c.encoder);
  r.get("decoder", c.decoder);
  r.get("kernel", c.kernel);
  r.get("in_channels", c.in_channels);
  r.get("out_channels", c.out_channels);
  r.get("skips", c.skips);
  r.get("recurrent", c.recurrent);
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"m", c.m},
          {"n", c.n},
          {"l", c.l},
          {"stride", c.stride},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"mode", to_string(c.mode)},
          {"seed", c.seed},
          {"clip_norm", c.clip_norm},
          {"cap", c.cap},
          {"augment", c.augment},
          {"crop_h", c.crop_h},
          {"crop_w", c.crop_w},
          {"mask_inactive", c.mask_inactive},
          {"mask_window", c.mask_window},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  Reader r(j, "train");
  r.get("m", c.m);
  r.get("n", c.n);
  r.get("l", c.l);
  r.get("stride", c.stride);
  r.get("lr", c.lr);
  r.get("epochs", c.epochs);
  r.get("batch", c.batch);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  std::string mode = to_string(c.mode);
  r.get("mode", mode);
  try {
    c.mode = train_mode_from_string(mode);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train.mode: ") + e.what());
  }
  r.get("seed", c.seed);
  r.get("clip_norm", c.clip_norm);
  r.get("cap", c.cap);
  r.get("augment", c.augment);
  r.get("crop_h", c.crop_h);
  r.get("crop_w", c.crop_w);
  r.get("mask_inactive", c.mask_inactive);
  r.get("mask_window", c.mask_window);
  r.get("threads", c.threads);
  return c;
}

namespace {

json to_json(const SceneSetConfig& c) {
  return {{"count", c.count},
          {"width", c.width},
          {"height", c.height},
          {"duration", c.duration},
          {"steps_per_count_interval", c.steps_per_count_interval},
          {"counts_per_gt", c.counts_per_gt},
          {"step_us", c.step_us},
          {"max_speed", c.max_speed},
          {"max_omega", c.max_omega},
          {"rotation_fraction", c.rotation_fraction},
          {"pattern", c.pattern},
          {"blobs", c.blobs},
          {"blob_radius", c.blob_radius}};
}

SceneSetConfig scene_set_from_json(const json& j) {
  SceneSetConfig c;
  Reader r(j, "scene_set");
  r.get("count", c.count);
  r.get("width", c.width);
  r.get("height", c.height);
  r.get("duration", c.duration);
  r.get("steps_per_count_interval", c.steps_per_count_interval);
  r.get("counts_per_gt", c.counts_per_gt);
  r.get("step_us", c.step_us);
  r.get("max_speed", c.max_speed);
  r.get("max_omega", c.max_omega);
  r.get("rotation_fraction", c.rotation_fraction);
  r.get("pattern", c.pattern);
  r.get("blobs", c.blobs);
  r.get("blob_radius", c.blob_radius);
  return c;
}

}  // namespace

json to_json(const RunConfig& c) {
  json scenes = json::array();
  for (const auto& s : c.scenes) scenes.push_back(to_json(s));
  return {{"scenes", scenes},
          {"scene_set", to_json(c.scene_set)},
          {"camera",
           {{"theta_pos", c.camera.theta_pos},
            {"theta_neg", c.camera.theta_neg},
            {"refractory", c.camera.refractory},
            {"noise_rate", c.camera.noise_rate}}},
          {"network", to_json(c.network)},
          {"train", to_json(c.train)},
          {"eval", {{"m", c.eval.m}, {"cap", c.eval.cap}, {"mask_window", c.eval.mask_window}}},
          {"train_fraction", c.train_fraction},
          {"seed", c.seed},
          {"threads", c.threads}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "config");
  if (const json* s = r.sub("scenes")) {
    if (!s->is_array()) throw ConfigError("scenes: expected an array");
    for (const auto& item : *s) c.scenes.push_back(scene_from_json(item));
  }
  if (const json* s = r.sub("scene_set")) c.scene_set = scene_set_from_json(*s);
  if (const json* cam = r.sub("camera")) {
    Reader cr(*cam, "camera");
    cr.get("theta_pos", c.camera.theta_pos);
    cr.get("theta_neg", c.camera.theta_neg);
    cr.get("refractory", c.camera.refractory);
    cr.get("noise_rate", c.camera.noise_rate);
  }
  if (const json* n = r.sub("network")) c.network = network_config_from_json(*n);
  if (const json* t = r.sub("train")) c.train = train_config_from_json(*t);
  if (const json* e = r.sub("eval")) {
    Reader er(*e, "eval");
    er.get("m", c.eval.m);
    er.get("cap", c.eval.cap);
    er.get("mask_window", c.eval.mask_window);
  }
  r.sub("format_versions");  // present in manifests
  r.sub("command");
  r.sub("inputs");
  r.sub("sweep");
  r.get("train_fraction", c.train_fraction);
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  return c;
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  r.train.seed = seed;
  r.train.threads = threads;
  r.eval.m = r.train.m;
  r.eval.cap = r.train.cap;
  r.eval.mask_window = r.train.mask_window;
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train_fraction must be in (0, 1)");
  r.network.validate();
  r.train.validate();
  for (const auto& s : scenes_of(r))
    if (static_cast<std::size_t>(s.counts_per_gt) != r.train.m)
      throw ConfigError("scene ground-truth period (" + std::to_string(s.counts_per_gt) +
                        " counts) differs from train.m (" + std::to_string(r.train.m) + ")");
  return r;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

json manifest(const RunConfig& resolved, const std::string& command) {
  json j = to_json(resolved);
  j["command"] = command;
  j["format_versions"] = {{"EVT1", 1}, {"FLO1", 1}, {"CKPT1", checkpoint_version}, {"manifest", manifest_version}};
  return j;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Scene> random_scenes(const SceneSetConfig& cfg, std::uint64_t seed) {
  if (cfg.count < 1) throw ConfigError("scene_set.count must be at least 1");
  std::vector<Scene> out;
  for (int i = 0; i < cfg.count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Scene s;
    s.width = cfg.width;
    s.height = cfg.height;
    s.duration = cfg.duration;
    s.steps_per_count_interval = cfg.steps_per_count_interval;
    s.counts_per_gt = cfg.counts_per_gt;
    s.step_us = cfg.step_us;
    if (cfg.pattern == "blobs")
      s.pattern = Pattern::blobs(cfg.blobs, cfg.blob_radius, std::max(cfg.width, cfg.height), rng());
    else if (cfg.pattern == "grating")
      s.pattern = Pattern::grating(6 + 6 * unit(rng), std::numbers::pi * unit(rng));
    else if (cfg.pattern == "checkerboard")
      s.pattern = Pattern::checkerboard(3 + 3 * unit(rng));
    else
      throw ConfigError("scene_set.pattern: unknown pattern '" + cfg.pattern + "'");
    if (unit(rng) < cfg.rotation_fraction) {
      const double omega = cfg.max_omega * (0.3 + 0.7 * unit(rng));
      s.motion = Motion::rotation(unit(rng) < 0.5 ? omega : -omega);
    } else {
      const double angle = 2 * std::numbers::pi * unit(rng);
      const double speed = cfg.max_speed * (0.3 + 0.7 * unit(rng));
      s.motion = Motion::translation(speed * std::cos(angle), speed * std::sin(angle));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Scene> scenes_of(const RunConfig& cfg) {
  return cfg.scenes.empty() ? random_scenes(cfg.scene_set, cfg.seed) : cfg.scenes;
}

StreamData simulate(const Scene& scene, const CameraModel& cam, std::uint64_t seed) {
  const auto rendered = render_scene(scene);
  StreamData d;
  d.events = emit_events(rendered.frames, cam, seed);
  d.events.count_interval_us = scene.count_interval_us();
  d.gts = rendered.flows;
  const std::uint64_t t_end = static_cast<std::uint64_t>(scene.duration - 1) * scene.step_us;
  d.counts = count_events(d.events, d.events.count_interval_us, scene.width, scene.height, t_end);
  return d;
}

StreamData from_files(EventStream events, std::vector<FlowField> gts, std::size_t m) {
  if (events.count_interval_us == 0) throw ConfigError("event stream has no count interval");
  StreamData d;
  d.events = std::move(events);
  d.gts = std::move(gts);
  const std::uint64_t t_end =
      d.gts.empty() ? 0 : static_cast<std::uint64_t>(d.gts.size()) * m * d.events.count_interval_us;
  d.counts = count_events(d.events, d.events.count_interval_us, d.events.width, d.events.height, t_end);
  return d;
}

StreamSplit split_stream(const StreamData& data, std::size_t m, double fraction) {
  const std::size_t usable = std::min(data.gts.size(), data.counts.size() / m);
  const auto n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(usable)));
  StreamSplit s;
  s.train_gts.assign(data.gts.begin(), data.gts.begin() + static_cast<long>(n_train));
  s.test_gts.assign(data.gts.begin() + static_cast<long>(n_train), data.gts.begin() + static_cast<long>(usable));
  s.train_counts.assign(data.counts.begin(), data.counts.begin() + static_cast<long>(n_train * m));
  s.test_counts.assign(data.counts.begin() + static_cast<long>(n_train * m),
                       data.counts.begin() + static_cast<long>(usable * m));
  return s;
}

}  // namespace evflow
