#pragma once

// Windowed BPTT: each training sequence runs an l-count prefix, detaches the
// recurrent state, then runs the m*n-count window and accumulates a masked L2
// endpoint loss at every m-th count. The traditional baseline uses m-count
// sequences with no prefix.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "evflow/encoding.hpp"
#include "evflow/model.hpp"

namespace evflow {

struct EmptyDataset : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TrainMode { windowed, traditional };

const char* to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& name);

struct TrainConfig {
  std::size_t m = 10;
  std::size_t n = 2;
  std::size_t l = 10;
  std::size_t stride = 0;  // in units of m counts; 0 means n (non-overlapping)
  double lr = 1e-4;
  int epochs = 20;
  std::size_t batch = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  TrainMode mode = TrainMode::windowed;
  std::uint64_t seed = 0;
  double clip_norm = 10.0;  // global gradient norm; <= 0 disables
  int cap = 8;              // count normalization cap
  bool augment = true;      // random flips per sequence
  int crop_h = 0;           // random crop size; 0 keeps the full frame
  int crop_w = 0;
  bool mask_inactive = true;  // restrict targets to pixels with recent events
  std::size_t mask_window = 10;
  std::size_t threads = 1;

  void validate() const;
  // Applies the mode: traditional training uses n = 1, l = 0, stride 1.
  TrainConfig resolved() const;
};

struct LossReport {
  std::vector<double> per_target;
  std::vector<std::size_t> active_pixels;

  double total() const;
  std::size_t pixels() const;
  void merge(const LossReport& other);
};

struct EpochReport {
  int epoch = 0;
  double loss = 0;             // summed endpoint loss
  double normalized_loss = 0;  // loss per active pixel
  std::size_t pixels = 0;
  std::size_t sequences = 0;
  std::size_t steps = 0;       // optimizer steps
};

// Sum over valid pixels of the Euclidean flow error; pred is [1, 2, H, W].
template <class T>
Tensor<T> masked_l2_loss(Tape<T>& tape, const Tensor<T>& pred, const FlowField& gt);

template <class T>
struct SequenceForward {
  Tensor<T> loss;
  LossReport report;
  std::vector<Tensor<T>> predictions;  // one per window count
  std::vector<CellState<T>> states;
};

// Prefix then window from zero state, detaching the state in between.
// targets[j] is scored against the prediction at window[(j + 1) * m - 1].
template <class T>
SequenceForward<T> sequence_forward(Tape<T>& tape, const Network<T>& net,
                                    std::span<const Tensor<T>> prefix,
                                    std::span<const Tensor<T>> window,
                                    std::span<const FlowField> targets, std::size_t m);

template <class T>
struct SequenceGradients {
  std::vector<std::vector<T>> grads;  // aligned with net.parameters()
  LossReport report;
};

template <class T>
SequenceGradients<T> train_sequence(const Network<T>& net, const TrainingSequence& seq,
                                    const TrainConfig& cfg);

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// One bias-corrected Adam update at step t >= 1.
template <class T>
void adam_step(std::span<Tensor<T>> params, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state, const TrainConfig& cfg, std::size_t t);

// Rescales grads in place to the given global L2 norm; returns the norm
// before clipping.
template <class T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm);

// Sequences for the configured mode, with targets masked to active pixels
// when cfg.mask_inactive is set.
std::vector<TrainingSequence> build_training_set(std::span<const CountFrame> counts,
                                                 std::span<const FlowField> gts,
                                                 const TrainConfig& cfg);

template <class T>
using EpochCallback = std::function<void(const EpochReport&, const Network<T>&)>;

template <class T>
std::vector<EpochReport> train(Network<T>& net, const std::vector<TrainingSequence>& dataset,
                               const TrainConfig& cfg, const EpochCallback<T>& on_epoch = {});

// Baseline: forces traditional mode and rejects sequences with a prefix or
// more than m counts.
template <class T>
std::vector<EpochReport> train_traditional(Network<T>& net,
                                           const std::vector<TrainingSequence>& dataset,
                                           const TrainConfig& cfg,
                                           const EpochCallback<T>& on_epoch = {});

}  // namespace evflow
