#include "evflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "evflow/eval.hpp"

namespace evflow {

const char* to_string(TrainMode mode) {
  return mode == TrainMode::windowed ? "windowed" : "traditional";
}

TrainMode train_mode_from_string(const std::string& name) {
  if (name == "windowed") return TrainMode::windowed;
  if (name == "traditional") return TrainMode::traditional;
  throw std::invalid_argument("unknown training mode '" + name + "'");
}

void TrainConfig::validate() const {
  if (m < 1 || n < 1) throw ConfigError("m and n must be at least 1");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch < 1) throw ConfigError("batch must be at least 1");
  if (!(lr >= 0)) throw ConfigError("learning rate must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
  if (cap < 1) throw ConfigError("count cap must be at least 1");
  if (crop_h < 0 || crop_w < 0) throw ConfigError("crop size must be non-negative");
  if (mask_window < 1) throw ConfigError("mask window must be at least 1");
}

TrainConfig TrainConfig::resolved() const {
  TrainConfig out = *this;
  if (mode == TrainMode::traditional) {
    out.n = 1;
    out.l = 0;
    out.stride = 1;
  } else if (out.stride == 0) {
    out.stride = out.n;
  }
  if (out.threads == 0) out.threads = 1;
  return out;
}

double LossReport::total() const { return std::accumulate(per_target.begin(), per_target.end(), 0.0); }

std::size_t LossReport::pixels() const {
  return std::accumulate(active_pixels.begin(), active_pixels.end(), std::size_t{0});
}

void LossReport::merge(const LossReport& other) {
  per_target.insert(per_target.end(), other.per_target.begin(), other.per_target.end());
  active_pixels.insert(active_pixels.end(), other.active_pixels.begin(), other.active_pixels.end());
}

template <class T>
Tensor<T> masked_l2_loss(Tape<T>& tape, const Tensor<T>& pred, const FlowField& gt) {
  if (pred.rank() != 4 || pred.dim(0) != 1 || pred.dim(1) != 2 ||
      pred.dim(2) != static_cast<std::size_t>(gt.height) || pred.dim(3) != static_cast<std::size_t>(gt.width))
    throw ShapeError("masked_l2_loss: prediction " + ad::to_string(pred.shape()) + " vs ground truth " +
                     ad::to_string({1, 2, static_cast<std::size_t>(gt.height), static_cast<std::size_t>(gt.width)}));
  const std::size_t plane = gt.size();
  // Error vectors are kept for the backward pass; zero error has subgradient 0.
  auto err = std::make_shared<std::vector<T>>(2 * plane, T(0));
  auto norm = std::make_shared<std::vector<T>>(plane, T(0));
  T total = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!gt.valid[i]) continue;
    const T du = pred[i] - static_cast<T>(gt.u[i]);
    const T dv = pred[plane + i] - static_cast<T>(gt.v[i]);
    (*err)[i] = du;
    (*err)[plane + i] = dv;
    (*norm)[i] = std::sqrt(du * du + dv * dv);
    total += (*norm)[i];
  }
  return tape.record("masked_l2", {pred}, {}, {total},
                     [err, norm, plane](const typename Tape<T>::BackwardContext& ctx) {
                       auto* g = ctx.grad(0);
                       if (!g) return;
                       const T go = ctx.grad_out[0];
                       for (std::size_t i = 0; i < plane; ++i) {
                         const T r = (*norm)[i];
                         if (r == T(0)) continue;
                         (*g)[i] += go * (*err)[i] / r;
                         (*g)[plane + i] += go * (*err)[plane + i] / r;
                       }
                     });
}

template <class T>
SequenceForward<T> sequence_forward(Tape<T>& tape, const Network<T>& net,
                                    std::span<const Tensor<T>> prefix,
                                    std::span<const Tensor<T>> window,
                                    std::span<const FlowField> targets, std::size_t m) {
  if (m == 0) throw ConfigError("sequence_forward: m must be positive");
  if (window.empty()) throw ConfigError("sequence_forward: empty window");
  if (targets.size() > window.size() / m)
    throw ConfigError("sequence_forward: " + std::to_string(targets.size()) +
                      " targets do not fit a window of " + std::to_string(window.size()));
  const auto& first = window.front();
  auto states = net.zero_states(first.dim(0), first.dim(2), first.dim(3));
  for (const auto& x : prefix) states = net.step(tape, x, states).states;
  // Truncation boundary: nothing in the window back-propagates into the prefix.
  for (auto& s : states) s = s.detached();

  SequenceForward<T> out;
  for (std::size_t k = 0; k < window.size(); ++k) {
    auto r = net.step(tape, window[k], states);
    states = std::move(r.states);
    if ((k + 1) % m == 0 && (k + 1) / m <= targets.size()) {
      const FlowField& gt = targets[(k + 1) / m - 1];
      auto term = masked_l2_loss(tape, r.flow, gt);
      out.report.per_target.push_back(static_cast<double>(term.item()));
      out.report.active_pixels.push_back(static_cast<std::size_t>(
          std::count(gt.valid.begin(), gt.valid.end(), std::uint8_t{1})));
      out.loss = out.loss.defined() ? tape.add(out.loss, term) : term;
    }
    out.predictions.push_back(std::move(r.flow));
  }
  if (!out.loss.defined()) out.loss = Tensor<T>::zeros({});
  out.states = std::move(states);
  return out;
}

template <class T>
SequenceGradients<T> train_sequence(const Network<T>& net, const TrainingSequence& seq,
                                    const TrainConfig& cfg) {
  const TrainConfig rc = cfg.resolved();
  if (seq.m != rc.m || seq.window.size() != rc.m * rc.n || seq.prefix.size() != rc.l ||
      seq.targets.size() != rc.n)
    throw ConfigError("training sequence (m " + std::to_string(seq.m) + ", window " +
                      std::to_string(seq.window.size()) + ", prefix " + std::to_string(seq.prefix.size()) +
                      ") does not match the configuration");
  std::vector<Tensor<T>> prefix, window;
  for (const auto& f : seq.prefix) prefix.push_back(normalize_counts<T>(f, rc.cap));
  for (const auto& f : seq.window) window.push_back(normalize_counts<T>(f, rc.cap));

  Tape<T> tape;
  auto fwd = sequence_forward<T>(tape, net, prefix, window, seq.targets, seq.m);
  const auto grads = tape.backward(fwd.loss);

  SequenceGradients<T> out;
  out.report = std::move(fwd.report);
  for (const auto& p : net.parameters()) {
    const auto* g = grads.find(p);
    out.grads.push_back(g ? *g : std::vector<T>(p.numel(), T(0)));
  }
  return out;
}

template <class T>
void adam_step(std::span<Tensor<T>> params, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state, const TrainConfig& cfg, std::size_t t) {
  if (t == 0) throw std::invalid_argument("adam_step: t starts at 1");
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient count mismatch");
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      values[i] = static_cast<T>(values[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <class T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (const T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (auto& v : g) v *= s;
  }
  return norm;
}

std::vector<TrainingSequence> build_training_set(std::span<const CountFrame> counts,
                                                 std::span<const FlowField> gts,
                                                 const TrainConfig& cfg) {
  const TrainConfig rc = cfg.resolved();
  auto seqs = build_sequences(counts, gts, rc.m, rc.n, rc.l, rc.stride);
  if (!rc.mask_inactive) return seqs;
  for (auto& s : seqs)
    for (std::size_t j = 0; j < s.targets.size(); ++j) {
      const std::size_t end = s.window_start + (j + 1) * rc.m;  // one past the target count
      const std::size_t begin = end > rc.mask_window ? end - rc.mask_window : 0;
      s.targets[j].valid = active_mask(counts.subspan(begin, end - begin), s.targets[j]);
    }
  return seqs;
}

namespace {

template <class T>
std::vector<EpochReport> train_impl(Network<T>& net, const std::vector<TrainingSequence>& dataset,
                                    const TrainConfig& cfg, const EpochCallback<T>& on_epoch) {
  cfg.validate();
  const TrainConfig rc = cfg.resolved();
  if (dataset.empty()) throw EmptyDataset("training dataset is empty");

  auto params = net.parameters();
  AdamState<T> adam;
  std::mt19937_64 rng(rc.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t t = 0;
  std::vector<EpochReport> reports;

  for (int epoch = 1; epoch <= rc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochReport report;
    report.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += rc.batch) {
      const std::size_t count = std::min(rc.batch, order.size() - start);
      std::vector<TrainingSequence> batch;
      batch.reserve(count);
      for (std::size_t b = 0; b < count; ++b) {
        const TrainingSequence& src = dataset[order[start + b]];
        const CountFrame& ref = src.window.front();
        const bool flip_h = std::bernoulli_distribution(0.5)(rng);
        const bool flip_v = std::bernoulli_distribution(0.5)(rng);
        Crop crop{0, 0, ref.height, ref.width};
        if (rc.crop_h > 0 && rc.crop_w > 0) {
          crop.h = rc.crop_h;
          crop.w = rc.crop_w;
          crop.y0 = std::uniform_int_distribution<int>(0, ref.height - rc.crop_h)(rng);
          crop.x0 = std::uniform_int_distribution<int>(0, ref.width - rc.crop_w)(rng);
        }
        if (rc.augment || crop.h != ref.height || crop.w != ref.width)
          batch.push_back(augment(src, rc.augment && flip_h, rc.augment && flip_v, crop));
        else
          batch.push_back(src);
      }

      std::vector<SequenceGradients<T>> results(count);
      auto work = [&](std::size_t first, std::size_t step) {
        for (std::size_t b = first; b < count; b += step) results[b] = train_sequence(net, batch[b], rc);
      };
      const std::size_t workers = std::min(rc.threads, count);
      if (workers <= 1) {
        work(0, 1);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
        for (auto& th : pool) th.join();
      }

      // Fixed-order reduction keeps runs reproducible regardless of threads.
      std::vector<std::vector<T>> grads = results[0].grads;
      for (std::size_t b = 1; b < count; ++b)
        for (std::size_t k = 0; k < grads.size(); ++k)
          for (std::size_t i = 0; i < grads[k].size(); ++i) grads[k][i] += results[b].grads[k][i];
      const T inv = T(1) / static_cast<T>(count);
      for (auto& g : grads)
        for (auto& v : g) v *= inv;
      for (const auto& r : results) {
        report.loss += r.report.total();
        report.pixels += r.report.pixels();
      }
      if (!std::isfinite(report.loss))
        throw NumericalFailure("non-finite loss in epoch " + std::to_string(epoch));
      clip_global_norm(grads, rc.clip_norm);
      adam_step<T>(params, grads, adam, rc, ++t);
      report.sequences += count;
      ++report.steps;
    }
    report.normalized_loss = report.pixels ? report.loss / static_cast<double>(report.pixels) : 0.0;
    reports.push_back(report);
    if (on_epoch) on_epoch(report, net);
  }
  return reports;
}

}  // namespace

template <class T>
std::vector<EpochReport> train(Network<T>& net, const std::vector<TrainingSequence>& dataset,
                               const TrainConfig& cfg, const EpochCallback<T>& on_epoch) {
  return train_impl(net, dataset, cfg, on_epoch);
}

template <class T>
std::vector<EpochReport> train_traditional(Network<T>& net,
                                           const std::vector<TrainingSequence>& dataset,
                                           const TrainConfig& cfg, const EpochCallback<T>& on_epoch) {
  TrainConfig tc = cfg;
  tc.mode = TrainMode::traditional;
  for (const auto& s : dataset)
    if (!s.prefix.empty() || s.window.size() != tc.m)
      throw ConfigError("traditional training takes m-count sequences without a prefix");
  return train_impl(net, dataset, tc, on_epoch);
}

#define EVFLOW_INSTANTIATE(T)                                                                         \
  template Tensor<T> masked_l2_loss(Tape<T>&, const Tensor<T>&, const FlowField&);                    \
  template SequenceForward<T> sequence_forward(Tape<T>&, const Network<T>&, std::span<const Tensor<T>>, \
                                               std::span<const Tensor<T>>, std::span<const FlowField>,  \
                                               std::size_t);                                            \
  template SequenceGradients<T> train_sequence(const Network<T>&, const TrainingSequence&,             \
                                               const TrainConfig&);                                     \
  template void adam_step(std::span<Tensor<T>>, const std::vector<std::vector<T>>&, AdamState<T>&,      \
                          const TrainConfig&, std::size_t);                                             \
  template double clip_global_norm(std::vector<std::vector<T>>&, double);                               \
  template std::vector<EpochReport> train(Network<T>&, const std::vector<TrainingSequence>&,            \
                                          const TrainConfig&, const EpochCallback<T>&);                 \
  template std::vector<EpochReport> train_traditional(Network<T>&, const std::vector<TrainingSequence>&, \
                                                      const TrainConfig&, const EpochCallback<T>&);

EVFLOW_INSTANTIATE(float)
EVFLOW_INSTANTIATE(double)
#undef EVFLOW_INSTANTIATE

}  // namespace evflow
