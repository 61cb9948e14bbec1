#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "evflow/events.hpp"

using namespace evflow;

namespace {

std::vector<IntensityFrame> constant_frames(int w, int h, int count, double value) {
  std::vector<IntensityFrame> frames;
  for (int k = 0; k < count; ++k)
    frames.push_back({w, h, static_cast<std::uint64_t>(k) * 1000,
                      std::vector<double>(static_cast<std::size_t>(w) * h, value)});
  return frames;
}

// Sum of +theta_pos / -theta_neg over the events of each pixel up to frame k.
std::vector<double> integrate(const EventStream& s, const CameraModel& cam, std::uint64_t t_max) {
  std::vector<double> acc(static_cast<std::size_t>(s.width) * s.height, 0.0);
  for (const auto& e : s.events) {
    if (e.t > t_max) break;
    acc[static_cast<std::size_t>(e.y) * s.width + e.x] += e.p > 0 ? cam.theta_pos : -cam.theta_neg;
  }
  return acc;
}

double worst_reconstruction_gap(const Scene& scene, const CameraModel& cam) {
  const auto r = render_scene(scene);
  const auto stream = emit_events(r.frames, cam, 1);
  double worst = 0;
  for (const auto& f : r.frames) {
    const auto acc = integrate(stream, cam, f.t_us);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      const double truth = std::log(f.data[i]) - std::log(r.frames[0].data[i]);
      worst = std::max(worst, std::abs(acc[i] - truth));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("zero motion renders identical frames and zero flow") {
  Scene s;
  s.motion = Motion::translation(0, 0);
  s.duration = 25;
  const auto r = render_scene(s);
  REQUIRE(r.frames.size() == 25);
  for (const auto& f : r.frames) CHECK(f.data == r.frames[0].data);
  CHECK(r.flows.size() == 2);
  for (const auto& fl : r.flows)
    for (std::size_t i = 0; i < fl.size(); ++i) {
      CHECK(fl.u[i] == 0.0f);
      CHECK(fl.v[i] == 0.0f);
    }
}

TEST_CASE("integer translation shifts the grating and gives constant flow") {
  Scene s;
  s.width = 16;
  s.height = 8;
  s.pattern = Pattern::grating(6.0, 0.3);
  s.motion = Motion::translation(1, 0);
  s.duration = 6;
  s.counts_per_gt = 5;
  const auto r = render_scene(s);
  for (int k = 1; k < 6; ++k)
    for (int y = 0; y < s.height; ++y)
      for (int x = k; x < s.width; ++x) CHECK(r.frames[k].at(y, x) == doctest::Approx(r.frames[0].at(y, x - k)).epsilon(1e-12));
  REQUIRE(r.flows.size() == 1);
  CHECK(r.flows[0].t_us == 5000);

  s.duration = 11;
  const auto r2 = render_scene(s);
  REQUIRE(r2.flows.size() == 2);
  CHECK(r2.flows[0].t_us == 5000);
  for (std::size_t i = 0; i < r2.flows[0].size(); ++i) {
    CHECK(r2.flows[0].u[i] == 5.0f);
    CHECK(r2.flows[0].v[i] == 0.0f);
  }
}

TEST_CASE("rotation flow matches a step-by-step warp") {
  Scene s;
  s.pattern = Pattern::checkerboard(4.0);
  s.motion = Motion::rotation(0.01);
  s.duration = 21;
  const auto r = render_scene(s);
  REQUIRE(!r.flows.empty());
  const double cx = (s.width - 1) / 2.0, cy = (s.height - 1) / 2.0;
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> px(0, s.width - 1);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int x = px(rng), y = px(rng);
    double qx = x, qy = y;
    for (int k = 0; k < s.steps_per_gt(); ++k) {
      const double dx = qx - cx, dy = qy - cy;
      qx = cx + std::cos(0.01) * dx - std::sin(0.01) * dy;
      qy = cy + std::sin(0.01) * dx + std::cos(0.01) * dy;
    }
    const auto [du, dv] = displacement(s, x, y, s.steps_per_gt());
    worst = std::max({worst, std::abs(du - (qx - x)), std::abs(dv - (qy - y))});
    const auto i = r.flows[0].index(y, x);
    CHECK(r.flows[0].u[i] == doctest::Approx(qx - x).epsilon(1e-5));
    CHECK(r.flows[0].v[i] == doctest::Approx(qy - y).epsilon(1e-5));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("render rejects non-positive intensity") {
  Scene s;
  s.pattern = Pattern::custom([](double x, double) { return x - 3.0; });
  CHECK_THROWS_AS(render_scene(s), InvalidScene);
}

TEST_CASE("emit_events on constant frames is empty") {
  const auto frames = constant_frames(5, 4, 6, 0.5);
  CHECK(emit_events(frames, CameraModel{}, 3).events.empty());
  CHECK_THROWS_AS(emit_events(std::span(frames).first(1), CameraModel{}, 3), InsufficientInput);
}

TEST_CASE("a log-intensity rise of 2.0 with threshold 1.0 gives two events") {
  auto frames = constant_frames(4, 3, 2, 1.0);
  frames[1].data[1 * 4 + 2] = std::exp(2.0);
  CameraModel cam;
  cam.theta_pos = 1.0;
  const auto s = emit_events(frames, cam, 0);
  REQUIRE(s.events.size() == 2);
  for (const auto& e : s.events) {
    CHECK(e.x == 2);
    CHECK(e.y == 1);
    CHECK(e.p == 1);
    CHECK(e.t == 1000);
  }
}

TEST_CASE("refractory period limits events per pixel") {
  auto frames = constant_frames(1, 1, 4, 1.0);
  frames[1].data[0] = std::exp(1.0);
  frames[2].data[0] = std::exp(2.0);
  frames[3].data[0] = std::exp(3.0);
  CameraModel cam;
  cam.theta_pos = 0.25;
  CHECK(emit_events(frames, cam, 0).events.size() == 12);
  cam.refractory = 2;
  const auto s = emit_events(frames, cam, 0);
  REQUIRE(s.events.size() == 2);
  CHECK(s.events[0].t == 1000);
  CHECK(s.events[1].t == 3000);
}

TEST_CASE("noise is seeded, sorted and deterministic") {
  const auto frames = constant_frames(8, 8, 20, 0.5);
  CameraModel cam;
  cam.noise_rate = 0.05;
  const auto a = emit_events(frames, cam, 11);
  const auto b = emit_events(frames, cam, 11);
  const auto c = emit_events(frames, cam, 12);
  CHECK(!a.events.empty());
  CHECK(a == b);
  CHECK_FALSE(a == c);
  for (std::size_t i = 1; i < a.events.size(); ++i) CHECK_FALSE(event_before(a.events[i], a.events[i - 1]));
}

TEST_CASE("reconstruction tracks log intensity within one threshold") {
  Scene s;
  s.width = 24;
  s.height = 16;
  s.pattern = Pattern::grating(8.0, 0.0);
  s.motion = Motion::translation(1, 0);
  s.duration = 11;
  CHECK(worst_reconstruction_gap(s, CameraModel{}) < 0.2);

  s.pattern = Pattern::blobs(6, 2.0, 24.0, 5);
  s.motion = Motion::rotation(0.03);
  CameraModel asym;
  asym.theta_pos = 0.15;
  asym.theta_neg = 0.3;
  CHECK(worst_reconstruction_gap(s, asym) < 0.3);
}

TEST_CASE("monotonically brightening pixels emit no negative events") {
  std::vector<IntensityFrame> frames;
  for (int k = 0; k < 12; ++k) {
    IntensityFrame f{6, 5, static_cast<std::uint64_t>(k) * 1000, {}};
    for (int i = 0; i < 30; ++i) f.data.push_back(0.1 + 0.05 * k * (1 + i % 4));
    frames.push_back(f);
  }
  const auto s = emit_events(frames, CameraModel{}, 0);
  CHECK(!s.events.empty());
  for (const auto& e : s.events) CHECK(e.p == 1);
}

TEST_CASE("EVT1 and FLO1 round-trip") {
  Scene sc;
  sc.pattern = Pattern::blobs(5, 2.0, 32.0, 9);
  sc.motion = Motion::translation(0.3, -0.2);
  sc.duration = 31;
  const auto r = render_scene(sc);
  auto stream = emit_events(r.frames, CameraModel{}, 0);
  stream.count_interval_us = 1000;

  std::stringstream ev;
  write_events(ev, stream);
  const std::string bytes = ev.str();
  CHECK(bytes.size() == 16 + 12 * stream.events.size());
  CHECK(bytes.substr(0, 4) == "EVT1");
  const auto back = read_events(ev);
  CHECK(back == stream);
  std::stringstream ev2;
  write_events(ev2, back);
  CHECK(ev2.str() == bytes);

  auto flows = r.flows;
  flows[0].valid[3] = 0;
  std::stringstream fl;
  write_flows(fl, flows);
  CHECK(fl.str().size() == 12 + flows.size() * (4 + 8 * flows[0].size()));
  const auto fb = read_flows(fl);
  REQUIRE(fb.size() == flows.size());
  CHECK(fb[0].valid[3] == 0);
  CHECK(fb[1].u == flows[1].u);
  CHECK(fb[1].t_us == flows[1].t_us);
  std::stringstream fl2;
  write_flows(fl2, fb);
  CHECK(fl2.str() == fl.str());

  std::stringstream bad("EVT2xxxxxxxxxxxx");
  CHECK_THROWS_AS(read_events(bad), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_events(truncated), FormatError);
}
