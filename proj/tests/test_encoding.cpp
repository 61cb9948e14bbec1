#include "doctest.h"

#include <random>

#include "evflow/encoding.hpp"
#include "oracles.hpp"

using namespace evflow;

namespace {

// Counts tagged with their stream index through t_end and one count at (0, 0).
std::vector<CountFrame> tagged_counts(std::size_t n, int w = 4, int h = 3) {
  std::vector<CountFrame> out;
  for (std::size_t k = 0; k < n; ++k) {
    auto f = CountFrame::zeros(w, h, k + 1);
    f.at(0, 0, 0) = static_cast<std::uint32_t>(k + 1);
    out.push_back(f);
  }
  return out;
}

std::vector<FlowField> tagged_gts(std::size_t n, int w = 4, int h = 3) {
  std::vector<FlowField> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto g = FlowField::constant(w, h, static_cast<float>(i), 0.0f);
    g.t_us = i;
    out.push_back(g);
  }
  return out;
}

// Stream index of a tagged frame, -1 for zero padding.
long tag(const CountFrame& f) { return static_cast<long>(f.at(0, 0, 0)) - 1; }

TrainingSequence random_sequence(std::mt19937_64& rng, int w, int h) {
  std::uniform_int_distribution<std::uint32_t> c(0, 5);
  std::uniform_real_distribution<float> u(-2, 2);
  TrainingSequence s;
  s.m = 2;
  for (int k = 0; k < 3; ++k) {
    auto f = CountFrame::zeros(w, h);
    for (auto& v : f.data) v = c(rng);
    (k == 0 ? s.prefix : s.window).push_back(f);
  }
  auto g = FlowField::constant(w, h, 0, 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.u[i] = u(rng);
    g.v[i] = u(rng);
    g.valid[i] = i % 3 != 0;
  }
  s.targets.push_back(g);
  s.augmentation.crop = Crop{0, 0, h, w};
  return s;
}

void check_same(const TrainingSequence& a, const TrainingSequence& b) {
  CHECK(a.prefix == b.prefix);
  CHECK(a.window == b.window);
  REQUIRE(a.targets.size() == b.targets.size());
  for (std::size_t j = 0; j < a.targets.size(); ++j) {
    CHECK(a.targets[j].u == b.targets[j].u);
    CHECK(a.targets[j].v == b.targets[j].v);
    CHECK(a.targets[j].valid == b.targets[j].valid);
  }
}

}  // namespace

TEST_CASE("empty stream counts to zero frames") {
  EventStream s{8, 6, 1000, {}};
  const auto frames = count_events(s, 1000, 8, 6, 5000);
  REQUIRE(frames.size() == 5);
  for (const auto& f : frames) CHECK(f.total() == 0);
  CHECK(count_events(s, 1000, 8, 6).empty());
}

TEST_CASE("three events aggregate into one frame") {
  EventStream s{6, 7, 10, {{1, 2, 5, 1}, {2, 2, 5, 1}, {3, 2, 5, -1}}};
  const auto frames = count_events(s, 10, 6, 7);
  REQUIRE(frames.size() == 1);
  CHECK(frames[0].at(5, 2, 0) == 2);
  CHECK(frames[0].at(5, 2, 1) == 1);
  CHECK(frames[0].total() == 3);
  CHECK(frames[0].t_end == 10);
}

TEST_CASE("counts match a brute-force histogram") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::uint32_t> t(0, 50000);
  std::uniform_int_distribution<int> x(0, 15), y(0, 11), p(0, 1);
  EventStream s{16, 12, 1000, {}};
  for (int i = 0; i < 10000; ++i)
    s.events.push_back({t(rng), static_cast<std::uint16_t>(x(rng)), static_cast<std::uint16_t>(y(rng)),
                        static_cast<std::int16_t>(p(rng) ? 1 : -1)});
  s.events.push_back({0, 1, 1, 1});
  s.events.push_back({1000, 1, 1, -1});
  s.events.push_back({1001, 1, 1, -1});
  std::sort(s.events.begin(), s.events.end(), event_before);

  const auto frames = count_events(s, 1000, 16, 12);
  const auto hist = oracle::histogram(s.events, 1000);
  std::uint64_t total = 0;
  std::size_t nonzero = 0;
  for (std::size_t k = 0; k < frames.size(); ++k)
    for (int yy = 0; yy < 12; ++yy)
      for (int xx = 0; xx < 16; ++xx)
        for (int c = 0; c < 2; ++c) {
          const auto it = hist.find({k, yy, xx, c});
          const std::uint32_t expected = it == hist.end() ? 0 : it->second;
          if (frames[k].at(yy, xx, c) != expected) FAIL("mismatch at frame " << k);
          total += frames[k].at(yy, xx, c);
          nonzero += expected != 0;
        }
  CHECK(nonzero == hist.size());
  CHECK(total == s.events.size());

  std::swap(s.events[0], s.events[5000]);
  CHECK_THROWS_AS(count_events(s, 1000, 16, 12), UnsortedStream);
}

TEST_CASE("count conservation holds for any interval") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::uint32_t> t(1, 9999);
  EventStream s{4, 4, 0, {}};
  for (int i = 0; i < 500; ++i) s.events.push_back({t(rng), 1, 2, 1});
  std::sort(s.events.begin(), s.events.end(), event_before);
  for (std::uint32_t interval : {1u, 7u, 100u, 333u, 10000u, 50000u}) {
    std::uint64_t total = 0;
    for (const auto& f : count_events(s, interval, 4, 4)) total += f.total();
    CHECK(total == 500);
  }
}

TEST_CASE("sequences for m = 10, n = 2, l = 10 on 40 counts") {
  const auto counts = tagged_counts(40);
  const auto gts = tagged_gts(4);
  const auto seqs = build_sequences(counts, gts, 10, 2, 10, 2);
  REQUIRE(seqs.size() == 2);
  const auto& s0 = seqs[0];
  REQUIRE(s0.prefix.size() == 10);
  for (const auto& f : s0.prefix) CHECK(f.total() == 0);
  REQUIRE(s0.window.size() == 20);
  CHECK(tag(s0.window.front()) == 0);
  CHECK(tag(s0.window.back()) == 19);
  REQUIRE(s0.targets.size() == 2);
  CHECK(s0.targets[0].t_us == 0);
  CHECK(s0.targets[1].t_us == 1);
  CHECK(tag(seqs[1].prefix.front()) == 10);
  CHECK(tag(seqs[1].window.front()) == 20);
  CHECK(seqs[1].targets[1].t_us == 3);

  CHECK(build_sequences(counts, gts, 10, 4, 10, 1).empty());
}

TEST_CASE("l = 0 and n = 1 gives independent chunks") {
  const auto seqs = build_sequences(tagged_counts(30), tagged_gts(3), 10, 1, 0, 1);
  REQUIRE(seqs.size() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(seqs[s].prefix.empty());
    CHECK(tag(seqs[s].window.front()) == static_cast<long>(10 * s));
    CHECK(seqs[s].targets.size() == 1);
    CHECK(seqs[s].targets[0].t_us == s);
  }
}

TEST_CASE("sequence boundaries match an index enumeration") {
  const std::size_t m = 2, n = 3, l = 4, len = 20, stride = 1;
  const auto seqs = build_sequences(tagged_counts(len), tagged_gts(len / m), m, n, l, stride);
  std::vector<std::vector<long>> expected_prefix, expected_window;
  for (long start = 0; start + static_cast<long>(m * n) <= static_cast<long>(len); start += stride * m) {
    std::vector<long> p, w;
    for (long i = start - static_cast<long>(l); i < start; ++i) p.push_back(i < 0 ? -1 : i);
    for (long i = start; i < start + static_cast<long>(m * n); ++i) w.push_back(i);
    expected_prefix.push_back(p);
    expected_window.push_back(w);
  }
  REQUIRE(seqs.size() == expected_prefix.size());
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    std::vector<long> p, w;
    for (const auto& f : seqs[s].prefix) p.push_back(tag(f));
    for (const auto& f : seqs[s].window) w.push_back(tag(f));
    CHECK(p == expected_prefix[s]);
    CHECK(w == expected_window[s]);
    for (std::size_t j = 0; j < n; ++j) {
      const long at = static_cast<long>(seqs[s].window_start + (j + 1) * m - 1);
      // gts[i] ends at count (i + 1) * m - 1
      CHECK(static_cast<long>(seqs[s].targets[j].t_us) == (at + 1) / static_cast<long>(m) - 1);
    }
  }
}

TEST_CASE("augment: involution, sign rule, identity crop") {
  std::mt19937_64 rng(8);
  const auto seq = random_sequence(rng, 5, 4);
  check_same(augment(augment(seq, true, false, {}), true, false, {}), seq);
  check_same(augment(augment(seq, true, true, {}), true, true, {}), seq);
  check_same(augment(seq, false, false, Crop{0, 0, 4, 5}), seq);

  TrainingSequence c = seq;
  c.targets[0] = FlowField::constant(5, 4, 1.0f, 0.0f);
  const auto f = augment(c, true, false, {});
  for (std::size_t i = 0; i < f.targets[0].size(); ++i) {
    CHECK(f.targets[0].u[i] == -1.0f);
    CHECK(f.targets[0].v[i] == 0.0f);
  }
  CHECK(f.augmentation.flip_h);

  const auto cropped = augment(seq, false, true, Crop{1, 2, 2, 3});
  CHECK(cropped.augmentation.crop.y0 == 1);
  for (const auto& fr : cropped.window) {
    CHECK(fr.width == 3);
    CHECK(fr.height == 2);
  }
  CHECK(cropped.prefix[0].at(0, 0, 1) == seq.prefix[0].at(4 - 1 - 1, 2, 1));
  CHECK(cropped.targets[0].v[0] == -seq.targets[0].v[seq.targets[0].index(2, 2)]);
  CHECK_THROWS_AS(augment(seq, false, false, Crop{3, 0, 2, 5}), InvalidCrop);
}

TEST_CASE("normalize_counts clips and scales") {
  auto f = CountFrame::zeros(3, 2);
  const auto z = normalize_counts<float>(f, 4);
  CHECK(z.shape() == evflow::ad::Shape{1, 2, 2, 3});
  for (float v : z.values()) CHECK(v == 0.0f);
  f.at(1, 2, 0) = 7;
  f.at(0, 1, 1) = 2;
  const auto t = normalize_counts<double>(f, 4);
  CHECK(t[1 * 3 + 2] == 1.0);
  CHECK(t[6 + 0 * 3 + 1] == 0.5);
}
