#pragma once

// Encoder-decoder flow network built from recurrent convolutional cells.
//
// Encoder layers halve the resolution, decoder layers double it with a
// transposed input convolution, and a 1x1 linear head maps the last decoder
// output to (u, v). Decoder layer j > 0 also sees the encoder output at its
// input resolution when skips are enabled. Every layer is recurrent unless
// toggled off.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evflow/layers.hpp"

namespace evflow {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct StateError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct EmptyOutput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NetworkConfig {
  CellKind cell = CellKind::lstm;
  int bits = 4;
  std::vector<std::size_t> encoder{16, 32, 64, 128};
  std::vector<std::size_t> decoder;  // empty: reversed encoder
  std::size_t kernel = 3;
  std::size_t in_channels = 2;
  std::size_t out_channels = 2;
  bool skips = true;
  std::vector<bool> recurrent;  // per layer, encoder first; empty: all recurrent

  void validate() const;
  std::vector<std::size_t> decoder_channels() const;
  std::size_t num_layers() const { return 2 * encoder.size(); }
  // Input height and width must be divisible by this.
  std::size_t resolution_divisor() const { return std::size_t{1} << encoder.size(); }
};

template <class T>
struct Layer {
  std::string name;
  CellSpec spec;
  Tensor<T> w_x;  // input kernel (all gates stacked)
  Tensor<T> w_h;  // lstm hidden kernel, undefined for spiking cells
  Tensor<T> b;

  ConvLSTMParams<T> lstm() const { return {spec, w_x, w_h, b}; }
  SpikingParams<T> spiking() const { return {spec, w_x, b}; }
};

// Receives each layer's input tensor during a step; `layer` equals
// num_layers() for the head.
template <class T>
using LayerInputObserver = std::function<void(std::size_t layer, const Tensor<T>& input)>;

template <class T>
class Network {
 public:
  static Network build(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  const Tensor<T>& head_w() const { return head_w_; }
  const Tensor<T>& head_b() const { return head_b_; }

  // Parameter handles share storage with the network.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  std::vector<CellState<T>> zero_states(std::size_t batch, std::size_t height, std::size_t width) const;

  struct StepResult {
    Tensor<T> flow;  // [N, 2, H, W]
    std::vector<CellState<T>> states;
  };
  StepResult step(Tape<T>& tape, const Tensor<T>& x, const std::vector<CellState<T>>& states,
                  const LayerInputObserver<T>& observer = {}) const;

  struct StreamResult {
    std::vector<Tensor<T>> flows;
    std::vector<CellState<T>> states;
  };
  StreamResult run_stream(Tape<T>& tape, std::span<const Tensor<T>> frames,
                          std::vector<CellState<T>> states) const;

  std::vector<NamedArray> to_checkpoint() const;
  void load_checkpoint(const std::vector<NamedArray>& tensors);

  // Per-layer shapes and parameter counts for an input of the given size.
  std::string summary(std::size_t height, std::size_t width) const;

 private:
  NetworkConfig config_;
  std::vector<Layer<T>> layers_;
  Tensor<T> head_w_, head_b_;
};

}  // namespace evflow
