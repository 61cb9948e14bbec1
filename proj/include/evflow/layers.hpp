#pragma once

// Recurrent convolutional cells: an LSTM whose gate transforms are
// convolutions, and a gated spiking neuron with a multi-bit quantized output.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "evflow/autodiff.hpp"

namespace evflow {

using ad::Shape;
using ad::ShapeError;
using ad::Tape;
using ad::Tensor;

enum class CellKind { lstm, spiking };

const char* to_string(CellKind kind);
CellKind cell_kind_from_string(const std::string& name);

// Geometry shared by every gate of one cell.
struct CellSpec {
  CellKind kind = CellKind::lstm;
  std::size_t in_channels = 2;
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool transposed = false;  // input path upsamples by `stride`
  int bits = 4;             // spiking output resolution
  bool recurrent = true;    // false: state is not carried between steps

  std::size_t pad() const { return kernel / 2; }
  std::size_t output_pad() const { return transposed ? stride - 1 : 0; }
  std::size_t gates() const { return kind == CellKind::lstm ? 4 : 3; }
  std::pair<std::size_t, std::size_t> output_size(std::size_t h, std::size_t w) const;
};

// Gate order in the stacked kernels is (f, i, c, o). w_x is
// [4C, Cin, k, k], or [Cin, 4C, k, k] when the input path is transposed.
template <class T>
struct ConvLSTMParams {
  CellSpec spec;
  Tensor<T> w_x;
  Tensor<T> w_h;  // [4C, C, k, k]
  Tensor<T> b;    // [4C]
};

// Gate order (f, i, c); the kernels see only the input.
template <class T>
struct SpikingParams {
  CellSpec spec;
  Tensor<T> w;  // [3C, Cin, k, k] or [Cin, 3C, k, k] when transposed
  Tensor<T> b;  // [3C]
};

template <class T>
struct CellState {
  CellKind kind = CellKind::lstm;
  Tensor<T> h;  // lstm hidden
  Tensor<T> c;  // lstm cell / spiking synaptic current
  Tensor<T> v;  // spiking membrane potential
  Tensor<T> y;  // spiking previous output

  std::vector<Tensor<T>> tensors() const;
  CellState detached() const;
};

template <class T>
CellState<T> zero_state(const CellSpec& spec, std::size_t batch, std::size_t height, std::size_t width);

template <class T>
std::pair<Tensor<T>, CellState<T>> conv_lstm_step(Tape<T>& tape, const Tensor<T>& x,
                                                  const CellState<T>& state,
                                                  const ConvLSTMParams<T>& params);

template <class T>
std::pair<Tensor<T>, CellState<T>> spiking_step(Tape<T>& tape, const Tensor<T>& x,
                                                const CellState<T>& state,
                                                const SpikingParams<T>& params);

// --- CKPT1 checkpoints -------------------------------------------------------

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

inline constexpr std::uint32_t checkpoint_version = 1;

// "CKPT" magic, u32 version, u32 count, then per tensor: u32 name length,
// name, u8 dtype (0 = f32), u8 rank, u32 dims, raw f32 values. Little-endian.
void write_checkpoint(std::ostream& os, const std::vector<NamedArray>& tensors);
std::vector<NamedArray> read_checkpoint(std::istream& is);
void write_checkpoint(const std::string& path, const std::vector<NamedArray>& tensors);
std::vector<NamedArray> read_checkpoint(const std::string& path);

}  // namespace evflow
