#include "evflow/events.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <tuple>

namespace evflow {

namespace {

// Crossing comparisons tolerate round-off in log() so that a change of
// exactly k thresholds yields k events.
constexpr double crossing_slack = 1e-12;

double periodic_delta(double d, double tile) {
  d = std::fmod(d, tile);
  if (d < -tile / 2) d += tile;
  if (d > tile / 2) d -= tile;
  return d;
}

void validate(const Scene& s) {
  if (s.width <= 0 || s.height <= 0) throw InvalidScene("scene size must be positive");
  if (s.width > 65535 || s.height > 65535) throw InvalidScene("scene size exceeds 16 bits");
  if (s.duration < 1) throw InvalidScene("scene duration must be at least one step");
  if (s.steps_per_count_interval < 1 || s.counts_per_gt < 1 || s.step_us == 0)
    throw InvalidScene("scene timing parameters must be positive");
}

}  // namespace

bool event_before(const EventRecord& a, const EventRecord& b) {
  return std::tie(a.t, a.y, a.x, a.p) < std::tie(b.t, b.y, b.x, b.p);
}

// --- patterns ---------------------------------------------------------------

Pattern Pattern::grating(double period, double angle, double contrast) {
  Pattern p;
  p.kind_ = Kind::grating;
  p.period = period;
  p.angle = angle;
  p.contrast = contrast;
  const double c = std::cos(angle), s = std::sin(angle), k = 2 * std::numbers::pi / period;
  p.fn_ = [=](double x, double y) { return 1.0 + contrast * std::sin(k * (x * c + y * s)); };
  return p;
}

Pattern Pattern::checkerboard(double cell, double contrast, double sharpness) {
  Pattern p;
  p.kind_ = Kind::checkerboard;
  p.cell = cell;
  p.contrast = contrast;
  p.sharpness = sharpness;
  const double k = std::numbers::pi / cell;
  p.fn_ = [=](double x, double y) {
    return 1.0 + contrast * std::tanh(sharpness * std::sin(k * x) * std::sin(k * y));
  };
  return p;
}

Pattern Pattern::blobs(int count, double radius, double tile, std::uint64_t seed) {
  Pattern p;
  p.kind_ = Kind::blobs;
  p.count = count;
  p.radius = radius;
  p.tile = tile;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, tile);
  std::vector<std::pair<double, double>> centres(static_cast<std::size_t>(count));
  for (auto& c : centres) c = {pos(rng), pos(rng)};
  const double inv = 1.0 / (2 * radius * radius);
  p.fn_ = [=](double x, double y) {
    double acc = 0.1;
    for (const auto& [cx, cy] : centres) {
      const double dx = periodic_delta(x - cx, tile), dy = periodic_delta(y - cy, tile);
      acc += std::exp(-(dx * dx + dy * dy) * inv);
    }
    return acc;
  };
  return p;
}

Pattern Pattern::custom(std::function<double(double, double)> fn) {
  Pattern p;
  p.kind_ = Kind::custom;
  p.fn_ = std::move(fn);
  return p;
}

// --- rendering ----------------------------------------------------------------

std::pair<double, double> displacement(const Scene& scene, double x, double y, int steps) {
  const Motion& m = scene.motion;
  if (m.kind == Motion::Kind::translation) return {m.u * steps, m.v * steps};
  const double cx = m.cx.value_or((scene.width - 1) / 2.0);
  const double cy = m.cy.value_or((scene.height - 1) / 2.0);
  const double a = m.omega * steps, c = std::cos(a), s = std::sin(a);
  const double dx = x - cx, dy = y - cy;
  return {cx + c * dx - s * dy - x, cy + s * dx + c * dy - y};
}

RenderedScene render_scene(const Scene& scene) {
  validate(scene);
  RenderedScene out;
  const Motion& m = scene.motion;
  const double cx = m.cx.value_or((scene.width - 1) / 2.0);
  const double cy = m.cy.value_or((scene.height - 1) / 2.0);
  out.frames.reserve(static_cast<std::size_t>(scene.duration));
  for (int k = 0; k < scene.duration; ++k) {
    IntensityFrame f{scene.width, scene.height, static_cast<std::uint64_t>(k) * scene.step_us,
                     std::vector<double>(static_cast<std::size_t>(scene.width) * scene.height)};
    // Backward warp: the intensity at p now was at p - displacement at step 0.
    const double a = -m.omega * k, c = std::cos(a), s = std::sin(a);
    for (int y = 0; y < scene.height; ++y)
      for (int x = 0; x < scene.width; ++x) {
        double sx, sy;
        if (m.kind == Motion::Kind::translation) {
          sx = x - m.u * k;
          sy = y - m.v * k;
        } else {
          sx = cx + c * (x - cx) - s * (y - cy);
          sy = cy + s * (x - cx) + c * (y - cy);
        }
        const double value = scene.pattern(sx, sy);
        if (!(value > 0.0) || !std::isfinite(value))
          throw InvalidScene("non-positive intensity at (" + std::to_string(x) + ", " +
                             std::to_string(y) + ") step " + std::to_string(k));
        f.data[static_cast<std::size_t>(y) * scene.width + x] = value;
      }
    out.frames.push_back(std::move(f));
  }

  const int span = scene.steps_per_gt();
  for (int end = span; end < scene.duration; end += span) {
    FlowField flow = FlowField::constant(scene.width, scene.height, 0.0f, 0.0f);
    flow.t_us = static_cast<std::uint64_t>(end) * scene.step_us;
    for (int y = 0; y < scene.height; ++y)
      for (int x = 0; x < scene.width; ++x) {
        const auto [du, dv] = displacement(scene, x, y, span);
        flow.u[flow.index(y, x)] = static_cast<float>(du);
        flow.v[flow.index(y, x)] = static_cast<float>(dv);
      }
    out.flows.push_back(std::move(flow));
  }
  return out;
}

// --- event emission -------------------------------------------------------------

EventStream emit_events(std::span<const IntensityFrame> frames, const CameraModel& cam,
                        std::uint64_t seed) {
  if (frames.size() < 2) throw InsufficientInput("event emission needs at least two frames");
  if (!(cam.theta_pos > 0) || !(cam.theta_neg > 0))
    throw std::invalid_argument("camera thresholds must be positive");
  const int w = frames[0].width, h = frames[0].height;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  for (const auto& f : frames) {
    if (f.width != w || f.height != h || f.data.size() != n)
      throw std::invalid_argument("frames differ in size");
    for (double v : f.data)
      if (!(v > 0.0)) throw InvalidScene("non-positive intensity in frame");
  }

  EventStream stream;
  stream.width = static_cast<std::uint16_t>(w);
  stream.height = static_cast<std::uint16_t>(h);

  std::vector<double> reference(n);
  for (std::size_t i = 0; i < n; ++i) reference[i] = std::log(frames[0].data[i]);
  std::vector<long> last_event(n, std::numeric_limits<int>::min());

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution noise(std::clamp(cam.noise_rate, 0.0, 1.0));
  std::bernoulli_distribution coin(0.5);

  for (std::size_t k = 1; k < frames.size(); ++k) {
    const auto t = static_cast<std::uint32_t>(frames[k].t_us);
    const long step = static_cast<long>(k);
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = static_cast<std::uint16_t>(i % static_cast<std::size_t>(w));
      const auto y = static_cast<std::uint16_t>(i / static_cast<std::size_t>(w));
      const double level = std::log(frames[k].data[i]);
      auto ready = [&] { return step - last_event[i] >= cam.refractory; };
      while (level - reference[i] >= cam.theta_pos - crossing_slack && ready()) {
        stream.events.push_back({t, x, y, 1});
        reference[i] += cam.theta_pos;
        last_event[i] = step;
      }
      while (reference[i] - level >= cam.theta_neg - crossing_slack && ready()) {
        stream.events.push_back({t, x, y, -1});
        reference[i] -= cam.theta_neg;
        last_event[i] = step;
      }
      if (cam.noise_rate > 0 && noise(rng))
        stream.events.push_back({t, x, y, static_cast<std::int16_t>(coin(rng) ? 1 : -1)});
    }
  }
  std::stable_sort(stream.events.begin(), stream.events.end(), event_before);
  return stream;
}

// --- EVT1 / FLO1 ------------------------------------------------------------------

void write_events(std::ostream& os, const EventStream& stream) {
  os.write("EVT1", 4);
  detail::put_u16(os, stream.width);
  detail::put_u16(os, stream.height);
  detail::put_u32(os, stream.count_interval_us);
  detail::put_u32(os, 0);
  for (const auto& e : stream.events) {
    detail::put_u32(os, e.t);
    detail::put_u16(os, e.x);
    detail::put_u16(os, e.y);
    detail::put_i16(os, e.p);
    detail::put_u16(os, 0);
  }
}

EventStream read_events(std::istream& is) {
  detail::expect_magic(is, "EVT1", 4);
  EventStream s;
  s.width = detail::get_u16(is, "EVT1 header");
  s.height = detail::get_u16(is, "EVT1 header");
  s.count_interval_us = detail::get_u32(is, "EVT1 header");
  detail::get_u32(is, "EVT1 header");
  unsigned char rec[12];
  while (true) {
    is.read(reinterpret_cast<char*>(rec), 12);
    const auto got = is.gcount();
    if (got == 0) break;
    if (got != 12) throw FormatError("EVT1: truncated event record");
    EventRecord e;
    e.t = static_cast<std::uint32_t>(rec[0]) | (static_cast<std::uint32_t>(rec[1]) << 8) |
          (static_cast<std::uint32_t>(rec[2]) << 16) | (static_cast<std::uint32_t>(rec[3]) << 24);
    e.x = static_cast<std::uint16_t>(rec[4] | (rec[5] << 8));
    e.y = static_cast<std::uint16_t>(rec[6] | (rec[7] << 8));
    e.p = static_cast<std::int16_t>(static_cast<std::uint16_t>(rec[8] | (rec[9] << 8)));
    if (e.x >= s.width || e.y >= s.height) throw FormatError("EVT1: event outside sensor");
    if (e.p != 1 && e.p != -1) throw FormatError("EVT1: polarity must be +1 or -1");
    s.events.push_back(e);
  }
  return s;
}

void write_flows(std::ostream& os, std::span<const FlowField> flows) {
  const int w = flows.empty() ? 0 : flows.front().width;
  const int h = flows.empty() ? 0 : flows.front().height;
  os.write("FLO1", 4);
  detail::put_u16(os, static_cast<std::uint16_t>(w));
  detail::put_u16(os, static_cast<std::uint16_t>(h));
  detail::put_u32(os, static_cast<std::uint32_t>(flows.size()));
  const float nan = std::numeric_limits<float>::quiet_NaN();
  for (const auto& f : flows) {
    if (f.width != w || f.height != h) throw std::invalid_argument("FLO1: flow fields differ in size");
    detail::put_u32(os, static_cast<std::uint32_t>(f.t_us));
    for (std::size_t i = 0; i < f.size(); ++i) {
      detail::put_f32(os, f.valid[i] ? f.u[i] : nan);
      detail::put_f32(os, f.valid[i] ? f.v[i] : nan);
    }
  }
}

std::vector<FlowField> read_flows(std::istream& is) {
  detail::expect_magic(is, "FLO1", 4);
  const int w = detail::get_u16(is, "FLO1 header");
  const int h = detail::get_u16(is, "FLO1 header");
  const std::uint32_t count = detail::get_u32(is, "FLO1 header");
  std::vector<FlowField> flows;
  flows.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    FlowField f = FlowField::constant(w, h, 0.0f, 0.0f);
    f.t_us = detail::get_u32(is, "FLO1 timestamp");
    for (std::size_t i = 0; i < f.size(); ++i) {
      f.u[i] = detail::get_f32(is, "FLO1 data");
      f.v[i] = detail::get_f32(is, "FLO1 data");
      if (std::isnan(f.u[i]) || std::isnan(f.v[i])) {
        f.valid[i] = 0;
        f.u[i] = f.v[i] = 0.0f;
      }
    }
    flows.push_back(std::move(f));
  }
  return flows;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::ios_base::failure("cannot open " + path.string());
  return is;
}

}  // namespace

void write_events(const std::filesystem::path& path, const EventStream& stream) {
  auto os = open_out(path);
  write_events(os, stream);
  if (!os) throw std::ios_base::failure("write failed: " + path.string());
}

EventStream read_events(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_events(is);
}

void write_flows(const std::filesystem::path& path, std::span<const FlowField> flows) {
  auto os = open_out(path);
  write_flows(os, flows);
  if (!os) throw std::ios_base::failure("write failed: " + path.string());
}

std::vector<FlowField> read_flows(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_flows(is);
}

}  // namespace evflow
