#pragma once

// Per-interval event counts and the prefix + window training sequences built
// from them.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "evflow/autodiff.hpp"
#include "evflow/events.hpp"
#include "evflow/flow_field.hpp"

namespace evflow {

struct UnsortedStream : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InvalidCrop : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct CountFrame {
  int width = 0;
  int height = 0;
  std::uint64_t t_end = 0;
  // index ((y * width) + x) * 2 + channel; channel 0 positive, 1 negative
  std::vector<std::uint32_t> data;

  static CountFrame zeros(int width, int height, std::uint64_t t_end = 0) {
    return CountFrame{width, height, t_end,
                      std::vector<std::uint32_t>(static_cast<std::size_t>(width) * height * 2, 0)};
  }

  std::uint32_t at(int y, int x, int channel) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 2 + channel];
  }
  std::uint32_t& at(int y, int x, int channel) {
    return data[(static_cast<std::size_t>(y) * width + x) * 2 + channel];
  }
  std::uint64_t total() const;

  friend bool operator==(const CountFrame&, const CountFrame&) = default;
};

// Frame k aggregates events with t in (k * interval, (k + 1) * interval];
// events at t = 0 fall in frame 0. With t_end the stream is padded with
// empty frames up to t_end, otherwise it ends at the last event.
std::vector<CountFrame> count_events(const EventStream& stream, std::uint32_t interval_us,
                                     int width, int height,
                                     std::optional<std::uint64_t> t_end = std::nullopt);

struct Crop {
  int y0 = 0, x0 = 0, h = 0, w = 0;
};

struct Augmentation {
  bool flip_h = false;
  bool flip_v = false;
  Crop crop;
};

struct TrainingSequence {
  std::size_t m = 0;
  std::size_t window_start = 0;  // index of the first window count in the stream
  std::vector<CountFrame> prefix;
  std::vector<CountFrame> window;
  std::vector<FlowField> targets;  // targets[j] belongs to window[(j + 1) * m - 1]
  Augmentation augmentation;
};

// Ground truth gts[i] is the flow ending at count index (i + 1) * m - 1.
// Sequences start every stride * m counts; the prefix is zero-padded at the
// stream start. Returns no sequences when m * n + l exceeds the stream.
std::vector<TrainingSequence> build_sequences(std::span<const CountFrame> counts,
                                              std::span<const FlowField> gts, std::size_t m,
                                              std::size_t n, std::size_t l, std::size_t stride);

// Flips the full frames, then crops. Horizontal flip negates u, vertical
// flip negates v. A crop with zero height or width keeps the full frame.
TrainingSequence augment(const TrainingSequence& seq, bool flip_h, bool flip_v, Crop crop);

// Counts clipped to cap and scaled to [0, 1]; shape [1, 2, H, W].
template <class T>
ad::Tensor<T> normalize_counts(const CountFrame& frame, int cap);

}  // namespace evflow
