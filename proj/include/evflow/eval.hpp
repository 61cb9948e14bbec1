#pragma once

// Continuous-stream flow evaluation (AEE, kPE over active pixels) and
// sparsity-aware multiply counting.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "evflow/encoding.hpp"
#include "evflow/model.hpp"

namespace evflow {

struct NoEvaluatedPixels : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AlignmentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr int max_k = 5;

// Pixels with at least one event (either polarity) in `recent` and valid
// ground truth.
std::vector<std::uint8_t> active_mask(std::span<const CountFrame> recent, const FlowField& gt);

double endpoint_error(const FlowField& pred, const FlowField& gt, std::size_t i);
double aee(const FlowField& pred, const FlowField& gt, std::span<const std::uint8_t> mask);
// Percentage of masked pixels whose endpoint error is strictly above k.
double kpe(const FlowField& pred, const FlowField& gt, std::span<const std::uint8_t> mask, double k);

struct GroundTruthScore {
  std::size_t index = 0;
  std::uint64_t t_us = 0;
  std::size_t pixels = 0;
  double aee = 0;
  std::array<double, max_k> kpe{};
  friend bool operator==(const GroundTruthScore&, const GroundTruthScore&) = default;
};

struct EvalReport {
  double aee = 0;
  std::array<double, max_k> kpe{};  // k = 1..5
  std::size_t evaluated_pixels = 0;
  std::size_t skipped = 0;          // ground truths with no active pixel
  std::vector<GroundTruthScore> per_gt;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalOptions {
  std::size_t m = 10;            // counts per ground truth
  int cap = 8;
  std::size_t mask_window = 10;  // counts considered by the active mask
};

// A stateful predictor fed one count frame at a time, never reset.
class FlowPredictor {
 public:
  virtual ~FlowPredictor() = default;
  virtual FlowField predict(const CountFrame& counts) = 0;
};

template <class T>
class NetworkPredictor final : public FlowPredictor {
 public:
  NetworkPredictor(const Network<T>& net, int cap) : net_(net), cap_(cap) {}
  FlowField predict(const CountFrame& counts) override;
  const std::vector<CellState<T>>& states() const { return states_; }

 private:
  const Network<T>& net_;
  int cap_;
  std::vector<CellState<T>> states_;
};

template <class T>
FlowField to_flow_field(const Tensor<T>& flow, std::uint64_t t_us = 0);

// Incremental evaluation: push every count with its prediction, call
// score() at each ground-truth instant.
class StreamEvaluator {
 public:
  explicit StreamEvaluator(EvalOptions opts) : opts_(opts) {}
  void push(const CountFrame& counts, FlowField prediction);
  void score(const FlowField& gt);
  const FlowField& last_prediction() const { return last_; }
  EvalReport report() const;

 private:
  EvalOptions opts_;
  std::vector<CountFrame> recent_;
  FlowField last_;
  std::size_t scored_ = 0;
  double epe_sum_ = 0;
  std::array<std::size_t, max_k> over_k_{};
  std::size_t pixels_ = 0;
  EvalReport partial_;
};

// Feeds every count to the predictor and scores gts[i] against the
// prediction at count (i + 1) * m - 1. Predictions at those instants are
// appended to `predictions` when given.
EvalReport evaluate_stream(FlowPredictor& predictor, std::span<const CountFrame> counts,
                           std::span<const FlowField> gts, const EvalOptions& opts,
                           std::vector<FlowField>* predictions = nullptr);

// Pools reports of independent streams: pixel-weighted AEE and kPE, per-gt
// rows concatenated and renumbered.
EvalReport merge_reports(std::span<const EvalReport> reports);

// --- multiply counting --------------------------------------------------------

struct LayerOps {
  std::string name;
  std::uint64_t dense_input = 0;      // input-path conv multiplies
  std::uint64_t effective_input = 0;  // ... with a non-zero input operand
  std::uint64_t recurrent = 0;        // hidden-state conv multiplies, always dense
  std::uint64_t elementwise = 0;      // gate products
  double nonzero_fraction() const {
    return dense_input == 0 ? 0.0 : static_cast<double>(effective_input) / static_cast<double>(dense_input);
  }
};

// Totals are summed over all steps of the stream.
struct OpCountReport {
  std::string network;
  std::size_t steps = 0;
  std::size_t parameters = 0;
  std::vector<LayerOps> layers;
  std::uint64_t dense_total = 0;
  std::uint64_t effective_total = 0;
  std::string reference;
  double reference_ratio = 1.0;   // effective_total / reference effective_total
  double parameter_ratio = 1.0;

  std::uint64_t dense_input() const;
  std::uint64_t effective_input() const;
  double input_ratio() const;     // effective / dense over input paths
  double per_step(std::uint64_t total) const { return steps ? static_cast<double>(total) / steps : 0.0; }
  void normalize_by(const OpCountReport& ref);

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

template <class T>
OpCountReport count_mult_ops(const Network<T>& net, std::span<const CountFrame> counts, int cap);

// --- visualization --------------------------------------------------------------

// Standard HSV color wheel: hue from direction, saturation from magnitude
// relative to max_magnitude; invalid pixels are black. RGB, row-major.
std::vector<std::uint8_t> flow_to_rgb(const FlowField& flow, double max_magnitude);
void write_png(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> rgb);

}  // namespace evflow
