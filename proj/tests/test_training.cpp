#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "evflow/eval.hpp"
#include "evflow/training.hpp"
#include "oracles.hpp"

using namespace evflow;
using T64 = Tensor<double>;

namespace {

NetworkConfig tiny(CellKind kind = CellKind::lstm, std::vector<std::size_t> enc = {3, 4}) {
  NetworkConfig c;
  c.cell = kind;
  c.encoder = std::move(enc);
  return c;
}

std::vector<T64> random_frames(std::mt19937_64& rng, std::size_t count, std::size_t h, std::size_t w,
                               bool requires_grad = false) {
  std::vector<T64> out;
  for (std::size_t k = 0; k < count; ++k)
    out.push_back(T64::from({1, 2, h, w}, oracle::random_vector(2 * h * w, rng, 0, 1), requires_grad));
  return out;
}

FlowField random_field(std::mt19937_64& rng, int w, int h, double invalid_fraction = 0.2) {
  std::uniform_real_distribution<float> u(-3, 3);
  std::bernoulli_distribution drop(invalid_fraction);
  auto f = FlowField::constant(w, h, 0, 0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = u(rng);
    f.v[i] = u(rng);
    f.valid[i] = !drop(rng);
  }
  return f;
}

TrainingSequence random_sequence(std::mt19937_64& rng, std::size_t m, std::size_t n, std::size_t l, int w,
                                 int h) {
  std::uniform_int_distribution<std::uint32_t> c(0, 3);
  TrainingSequence s;
  s.m = m;
  for (std::size_t k = 0; k < l + m * n; ++k) {
    auto f = CountFrame::zeros(w, h);
    for (auto& v : f.data) v = c(rng);
    (k < l ? s.prefix : s.window).push_back(f);
  }
  for (std::size_t j = 0; j < n; ++j) s.targets.push_back(random_field(rng, w, h));
  return s;
}

TrainConfig config(std::size_t m, std::size_t n, std::size_t l) {
  TrainConfig c;
  c.m = m;
  c.n = n;
  c.l = l;
  c.cap = 3;
  return c;
}

bool all_equal(const std::vector<NamedArray>& a, const std::vector<NamedArray>& b) { return a == b; }

}  // namespace

TEST_CASE("masked L2 loss examples and loop oracle") {
  Tape<double> tape;
  auto gt = FlowField::constant(3, 2, 1.0f, -2.0f);
  std::vector<double> same(12);
  for (std::size_t i = 0; i < 6; ++i) {
    same[i] = 1.0;
    same[6 + i] = -2.0;
  }
  CHECK(masked_l2_loss(tape, T64::from({1, 2, 2, 3}, same), gt).item() == 0.0);

  auto one = FlowField::constant(2, 2, 0, 0, false);
  one.valid[3] = 1;
  std::vector<double> p(8, 100.0);
  p[3] = 3;
  p[7] = 4;
  CHECK(masked_l2_loss(tape, T64::from({1, 2, 2, 2}, p), one).item() == doctest::Approx(5.0).epsilon(1e-15));

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto g = random_field(rng, 8, 8);
    const auto pred = T64::from({1, 2, 8, 8}, oracle::random_vector(128, rng, -3, 3), true);
    double expected = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const auto i = g.index(y, x);
        if (!g.valid[i]) continue;
        expected += std::hypot(pred[i] - double(g.u[i]), pred[64 + i] - double(g.v[i]));
      }
    Tape<double> t;
    const auto loss = masked_l2_loss(t, pred, g);
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
    const auto grads = t.backward(loss);
    std::vector<double*> slots;
    for (std::size_t i = 0; i < 128; ++i) slots.push_back(&pred.node()->value[i]);
    const auto numeric = oracle::numeric_gradient(
        [&] {
          Tape<double> tt(false);
          return masked_l2_loss(tt, pred, g).item();
        },
        slots, 1e-5);
    for (std::size_t i = 0; i < 128; ++i) CHECK(oracle::relative_error(grads.of(pred)[i], numeric[i]) < 1e-4);
  }
  CHECK_THROWS_AS(masked_l2_loss(tape, T64::zeros({1, 2, 8, 7}), FlowField::constant(8, 8, 0, 0)), ShapeError);
}

TEST_CASE("prefix inputs receive no gradient") {
  std::mt19937_64 rng(2);
  int active = 0;
  for (int trial = 0; trial < 4; ++trial) {
    const auto net = Network<double>::build(tiny(trial % 2 ? CellKind::spiking : CellKind::lstm), trial);
    const auto prefix = random_frames(rng, 3, 8, 8, true);
    const auto window = random_frames(rng, 4, 8, 8, true);
    const std::vector<FlowField> targets{random_field(rng, 8, 8), random_field(rng, 8, 8)};
    Tape<double> tape;
    const auto fwd = sequence_forward<double>(tape, net, prefix, window, targets, 2);
    CHECK(fwd.report.per_target.size() == 2);
    CHECK(fwd.loss.item() == doctest::Approx(fwd.report.total()).epsilon(1e-12));
    const auto grads = tape.backward(fwd.loss);
    for (const auto& x : prefix) CHECK_FALSE(grads.contains(x));
    // A spiking net whose last layer stays silent has a genuinely zero input gradient.
    const auto& gh = grads.of(net.head_w());
    if (std::all_of(gh.begin(), gh.end(), [](double v) { return v == 0.0; })) continue;
    ++active;
    bool any = false;
    for (const auto& x : window)
      if (const auto* g = grads.find(x))
        for (double v : *g) any = any || v != 0.0;
    CHECK(any);
  }
  CHECK(active >= 3);
}

TEST_CASE("no targets gives zero parameter gradients") {
  std::mt19937_64 rng(3);
  const auto net = Network<double>::build(tiny(), 1);
  auto seq = random_sequence(rng, 2, 2, 2, 8, 8);
  auto cfg = config(2, 2, 2);
  for (auto& t : seq.targets) std::fill(t.valid.begin(), t.valid.end(), 0);
  const auto r = train_sequence(net, seq, cfg);
  for (const auto& g : r.grads)
    for (double v : g) CHECK(v == 0.0);
  CHECK(r.report.total() == 0.0);
  CHECK_THROWS_AS(train_sequence(net, seq, config(2, 2, 3)), ConfigError);
}

TEST_CASE("l = 0 equals plain BPTT over the window") {
  std::mt19937_64 rng(4);
  for (auto kind : {CellKind::lstm, CellKind::spiking}) {
    const auto net = Network<double>::build(tiny(kind), 7);
    const auto seq = random_sequence(rng, 3, 2, 0, 8, 8);
    const auto cfg = config(3, 2, 0);
    const auto r = train_sequence(net, seq, cfg);

    Tape<double> tape;
    auto states = net.zero_states(1, 8, 8);
    T64 loss;
    for (std::size_t k = 0; k < 6; ++k) {
      auto step = net.step(tape, normalize_counts<double>(seq.window[k], cfg.cap), states);
      states = step.states;
      if (k % 3 == 2) {
        const auto term = masked_l2_loss(tape, step.flow, seq.targets[k / 3]);
        loss = loss.defined() ? tape.add(loss, term) : term;
      }
    }
    const auto grads = tape.backward(loss);
    const auto params = net.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto g = grads.of(params[p]);
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(r.grads[p][i] == doctest::Approx(g[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("window gradients of a 1x1 net match finite differences") {
  std::mt19937_64 rng(5);
  auto c = tiny(CellKind::lstm, {2});
  c.kernel = 1;
  const auto net = Network<double>::build(c, 3);
  const auto prefix = random_frames(rng, 2, 4, 4);
  const auto window = random_frames(rng, 4, 4, 4);
  const std::vector<FlowField> targets{random_field(rng, 4, 4, 0), random_field(rng, 4, 4, 0)};
  Tape<double> tape;
  const auto fwd = sequence_forward<double>(tape, net, prefix, window, targets, 2);
  const auto grads = tape.backward(fwd.loss);

  // The truncated gradient treats the prefix state as a constant, so the
  // numeric side replays only the window from a frozen state.
  Tape<double> frozen(false);
  auto start = net.zero_states(1, 4, 4);
  for (const auto& x : prefix) start = net.step(frozen, x, start).states;
  auto window_loss = [&] {
    Tape<double> t(false);
    auto states = start;
    double total = 0;
    for (std::size_t k = 0; k < window.size(); ++k) {
      auto r = net.step(t, window[k], states);
      states = r.states;
      if ((k + 1) % 2 == 0) total += masked_l2_loss(t, r.flow, targets[k / 2]).item();
    }
    return total;
  };
  CHECK(window_loss() == doctest::Approx(fwd.loss.item()).epsilon(1e-12));
  double worst = 0;
  for (auto p : net.parameters())
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const auto d = oracle::numeric_gradient(window_loss, {&p.mutable_values()[i]}, 1e-5);
      worst = std::max(worst, oracle::relative_error(grads.of(p)[i], d[0]));
    }
  CHECK(worst < 1e-4);
}

TEST_CASE("adam matches a scalar oracle") {
  TrainConfig cfg;
  cfg.lr = 0.01;
  auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
  auto q = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor<double>> params{p, q};
  AdamState<double> state;
  double m[3] = {}, v[3] = {}, x[3] = {1.0, -2.0, 0.5};
  std::mt19937_64 rng(6);
  for (std::size_t t = 1; t <= 5; ++t) {
    const auto g = oracle::random_vector(3, rng);
    adam_step<double>(params, {g, g}, state, cfg, t);
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p[i] == doctest::Approx(x[i]).epsilon(1e-14));
      CHECK(q[i] == p[i]);
    }
  }
  // first step moves each entry by almost exactly lr against the gradient sign
  auto r = Tensor<double>::from({2}, {0.0, 0.0}, true);
  std::vector<Tensor<double>> one{r};
  AdamState<double> fresh;
  adam_step<double>(one, {{0.3, -7.0}}, fresh, cfg, 1);
  CHECK(r[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(r[1] == doctest::Approx(0.01).epsilon(1e-6));

  auto z = Tensor<double>::from({2}, {0.4, -0.1}, true);
  std::vector<Tensor<double>> zs{z};
  AdamState<double> zstate;
  for (std::size_t t = 1; t <= 3; ++t) adam_step<double>(zs, {{0.0, 0.0}}, zstate, cfg, t);
  CHECK(z[0] == 0.4);
  CHECK(z[1] == -0.1);
}

TEST_CASE("adam converges on a quadratic") {
  TrainConfig cfg;
  cfg.lr = 1e-2;
  auto x = Tensor<double>::from({1}, {3.0}, true);
  std::vector<Tensor<double>> params{x};
  AdamState<double> state;
  std::size_t steps = 0;
  while (std::abs(x[0] - 1.25) > 1e-3 && steps < 2000) {
    ++steps;
    adam_step<double>(params, {{2.0 * (x[0] - 1.25)}}, state, cfg, steps);
  }
  CHECK(std::abs(x[0] - 1.25) <= 1e-3);
  CHECK(steps <= 2000);
}

TEST_CASE("clip_global_norm rescales to the limit") {
  std::vector<std::vector<double>> g{{3.0}, {0.0, 4.0}};
  CHECK(clip_global_norm(g, 10.0) == 5.0);
  CHECK(g[1][1] == 4.0);
  CHECK(clip_global_norm(g, 1.0) == 5.0);
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][1] == doctest::Approx(0.8));
}

TEST_CASE("training set targets are masked to active pixels") {
  std::vector<CountFrame> counts;
  for (int k = 0; k < 12; ++k) counts.push_back(CountFrame::zeros(4, 4));
  counts[2].at(1, 2, 1) = 1;  // within the 4 counts before target 0
  counts[6].at(3, 3, 0) = 2;  // only before target 1
  std::vector<FlowField> gts(3, FlowField::constant(4, 4, 1, 1));
  auto cfg = config(4, 2, 0);
  cfg.mask_window = 4;
  const auto seqs = build_training_set(counts, gts, cfg);
  REQUIRE(seqs.size() == 1);
  const auto& t = seqs[0].targets;
  CHECK(std::count(t[0].valid.begin(), t[0].valid.end(), 1) == 1);
  CHECK(t[0].valid[t[0].index(1, 2)] == 1);
  CHECK(std::count(t[1].valid.begin(), t[1].valid.end(), 1) == 1);
  CHECK(t[1].valid[t[1].index(3, 3)] == 1);

  cfg.mode = TrainMode::traditional;
  const auto trad = build_training_set(counts, gts, cfg);
  CHECK(trad.size() == 3);
  for (const auto& s : trad) {
    CHECK(s.prefix.empty());
    CHECK(s.window.size() == 4);
  }
}

TEST_CASE("lr 0 leaves parameters unchanged") {
  std::mt19937_64 rng(7);
  std::vector<TrainingSequence> data;
  for (int i = 0; i < 3; ++i) data.push_back(random_sequence(rng, 2, 2, 2, 8, 8));
  auto net = Network<float>::build(tiny(), 1);
  const auto before = net.to_checkpoint();
  auto cfg = config(2, 2, 2);
  cfg.lr = 0;
  cfg.epochs = 1;
  cfg.batch = 2;
  const auto reports = train(net, data, cfg);
  CHECK(reports.size() == 1);
  CHECK(reports[0].steps == 2);
  CHECK(reports[0].sequences == 3);
  CHECK(all_equal(net.to_checkpoint(), before));

  std::vector<TrainingSequence> trad;
  for (int i = 0; i < 3; ++i) trad.push_back(random_sequence(rng, 2, 1, 0, 8, 8));
  train_traditional(net, trad, cfg);
  CHECK(all_equal(net.to_checkpoint(), before));
  CHECK_THROWS_AS(train_traditional(net, data, cfg), ConfigError);
  CHECK_THROWS_AS(train(net, {}, cfg), EmptyDataset);
}

TEST_CASE("training is deterministic across runs and thread counts") {
  std::mt19937_64 rng(8);
  std::vector<TrainingSequence> data;
  for (int i = 0; i < 5; ++i) data.push_back(random_sequence(rng, 2, 2, 1, 8, 8));
  auto cfg = config(2, 2, 1);
  cfg.lr = 1e-3;
  cfg.epochs = 2;
  cfg.batch = 3;
  cfg.crop_h = 4;
  cfg.crop_w = 4;
  cfg.seed = 11;
  auto run = [&](std::size_t threads) {
    auto net = Network<float>::build(tiny(CellKind::spiking), 2);
    auto c = cfg;
    c.threads = threads;
    train(net, data, c);
    return net.to_checkpoint();
  };
  const auto a = run(1), b = run(1), c = run(3);
  CHECK(all_equal(a, b));
  CHECK(all_equal(a, c));
  CHECK_FALSE(all_equal(a, Network<float>::build(tiny(CellKind::spiking), 2).to_checkpoint()));
}

TEST_CASE("loss decreases on constant flow from constant events") {
  std::vector<TrainingSequence> data;
  for (int i = 0; i < 4; ++i) {
    TrainingSequence s;
    s.m = 2;
    auto f = CountFrame::zeros(8, 8);
    for (auto& v : f.data) v = 1;
    for (int k = 0; k < 4; ++k) s.window.push_back(f);
    s.targets.assign(2, FlowField::constant(8, 8, 1.0f, -0.5f));
    data.push_back(s);
  }
  for (auto kind : {CellKind::lstm, CellKind::spiking}) {
    auto net = Network<float>::build(tiny(kind), 3);
    auto cfg = config(2, 2, 0);
    cfg.lr = 1e-2;
    cfg.epochs = 5;
    cfg.batch = 2;
    cfg.augment = false;
    const auto reports = train(net, data, cfg);
    for (std::size_t e = 1; e < reports.size(); ++e) CHECK(reports[e].loss < reports[e - 1].loss);
  }
}

TEST_CASE("train config resolution") {
  TrainConfig c;
  c.mode = TrainMode::traditional;
  const auto r = c.resolved();
  CHECK(r.n == 1);
  CHECK(r.l == 0);
  CHECK(r.stride == 1);
  TrainConfig w;
  w.n = 3;
  CHECK(w.resolved().stride == 3);
  w.m = 0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  CHECK(train_mode_from_string(to_string(TrainMode::windowed)) == TrainMode::windowed);
  CHECK_THROWS(train_mode_from_string("bogus"));
}
