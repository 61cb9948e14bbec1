#pragma once

// Synthetic scenes with exact ground-truth flow, and an event-camera model
// that turns rendered intensity frames into polarity events.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evflow/detail/binary_io.hpp"
#include "evflow/flow_field.hpp"

namespace evflow {

using detail::FormatError;

struct InvalidScene : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InsufficientInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct EventRecord {
  std::uint32_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int16_t p = 1;   // +1 or -1

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

// Stream order: t, then (y, x, p).
bool event_before(const EventRecord& a, const EventRecord& b);

struct EventStream {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint32_t count_interval_us = 0;
  std::vector<EventRecord> events;

  friend bool operator==(const EventStream&, const EventStream&) = default;
};

struct IntensityFrame {
  int width = 0;
  int height = 0;
  std::uint64_t t_us = 0;
  std::vector<double> data;  // row-major, strictly positive

  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

// Intensity as a function of continuous image coordinates.
class Pattern {
 public:
  enum class Kind { grating, checkerboard, blobs, custom };

  static Pattern grating(double period, double angle, double contrast = 0.8);
  static Pattern checkerboard(double cell, double contrast = 0.8, double sharpness = 4.0);
  // Bright Gaussian blobs on a dark background, periodic with the given tile.
  static Pattern blobs(int count, double radius, double tile, std::uint64_t seed);
  static Pattern custom(std::function<double(double, double)> fn);

  double operator()(double x, double y) const { return fn_(x, y); }
  Kind kind() const { return kind_; }

  // Parameters as constructed; meaning depends on kind().
  double period = 0, angle = 0, contrast = 0, cell = 0, sharpness = 0, radius = 0, tile = 0;
  int count = 0;
  std::uint64_t seed = 0;

 private:
  Kind kind_ = Kind::custom;
  std::function<double(double, double)> fn_;
};

struct Motion {
  enum class Kind { translation, rotation };
  Kind kind = Kind::translation;
  double u = 0, v = 0;  // px per step (translation)
  double omega = 0;     // rad per step (rotation), counter-clockwise in image coords
  std::optional<double> cx, cy;  // rotation centre, defaults to the image centre

  static Motion translation(double u, double v) { return Motion{Kind::translation, u, v, 0, {}, {}}; }
  static Motion rotation(double omega) { return Motion{Kind::rotation, 0, 0, omega, {}, {}}; }
};

struct Scene {
  int width = 32;
  int height = 32;
  Pattern pattern = Pattern::grating(8.0, 0.0);
  Motion motion;
  int duration = 100;                 // rendered steps (frames)
  int steps_per_count_interval = 1;
  int counts_per_gt = 10;             // ground-truth period in count intervals
  std::uint32_t step_us = 1000;

  std::uint32_t count_interval_us() const {
    return step_us * static_cast<std::uint32_t>(steps_per_count_interval);
  }
  int steps_per_gt() const { return steps_per_count_interval * counts_per_gt; }
};

struct CameraModel {
  double theta_pos = 0.2;
  double theta_neg = 0.2;
  int refractory = 0;      // steps
  double noise_rate = 0.0;  // spurious-event probability per pixel per step
};

struct RenderedScene {
  std::vector<IntensityFrame> frames;
  // Flow over each ground-truth period, stamped at the period's end.
  std::vector<FlowField> flows;
};

RenderedScene render_scene(const Scene& scene);

// Closed-form displacement of the pixel at (x, y) over `steps` steps.
std::pair<double, double> displacement(const Scene& scene, double x, double y, int steps);

EventStream emit_events(std::span<const IntensityFrame> frames, const CameraModel& cam,
                        std::uint64_t seed);

// EVT1: 16-byte header then 12-byte records, little-endian.
void write_events(std::ostream& os, const EventStream& stream);
EventStream read_events(std::istream& is);
void write_events(const std::filesystem::path& path, const EventStream& stream);
EventStream read_events(const std::filesystem::path& path);

// FLO1: 12-byte header then per instant a u32 timestamp and H*W (u, v) f32
// pairs; NaN marks invalid pixels.
void write_flows(std::ostream& os, std::span<const FlowField> flows);
std::vector<FlowField> read_flows(std::istream& is);
void write_flows(const std::filesystem::path& path, std::span<const FlowField> flows);
std::vector<FlowField> read_flows(const std::filesystem::path& path);

}  // namespace evflow
