#include "evflow/layers.hpp"

#include <fstream>
#include <stdexcept>

#include "evflow/detail/binary_io.hpp"

namespace evflow {

const char* to_string(CellKind kind) { return kind == CellKind::lstm ? "lstm" : "spiking"; }

CellKind cell_kind_from_string(const std::string& name) {
  if (name == "lstm") return CellKind::lstm;
  if (name == "spiking" || name == "snn") return CellKind::spiking;
  throw std::invalid_argument("unknown cell type '" + name + "'");
}

std::pair<std::size_t, std::size_t> CellSpec::output_size(std::size_t h, std::size_t w) const {
  if (transposed)
    return {(h - 1) * stride + kernel + output_pad() - 2 * pad(),
            (w - 1) * stride + kernel + output_pad() - 2 * pad()};
  return {(h + 2 * pad() - kernel) / stride + 1, (w + 2 * pad() - kernel) / stride + 1};
}

template <class T>
std::vector<Tensor<T>> CellState<T>::tensors() const {
  if (kind == CellKind::lstm) return {h, c};
  return {c, v, y};
}

template <class T>
CellState<T> CellState<T>::detached() const {
  CellState out{kind, {}, {}, {}, {}};
  if (h.defined()) out.h = ad::detach(h);
  if (c.defined()) out.c = ad::detach(c);
  if (v.defined()) out.v = ad::detach(v);
  if (y.defined()) out.y = ad::detach(y);
  return out;
}

template <class T>
CellState<T> zero_state(const CellSpec& spec, std::size_t batch, std::size_t height, std::size_t width) {
  const Shape shape{batch, spec.out_channels, height, width};
  CellState<T> s;
  s.kind = spec.kind;
  s.c = Tensor<T>::zeros(shape);
  if (spec.kind == CellKind::lstm) {
    s.h = Tensor<T>::zeros(shape);
  } else {
    s.v = Tensor<T>::zeros(shape);
    s.y = Tensor<T>::zeros(shape);
  }
  return s;
}

namespace {

template <class T>
Tensor<T> input_path(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                     const CellSpec& spec) {
  if (x.rank() != 4 || x.dim(1) != spec.in_channels)
    throw ShapeError("cell input " + ad::to_string(x.shape()) + " does not have " +
                     std::to_string(spec.in_channels) + " channels");
  if (spec.transposed)
    return tape.conv2d_transpose(x, w, b, spec.stride, spec.pad(), spec.output_pad());
  return tape.conv2d(x, w, b, spec.stride, spec.pad());
}

template <class T>
void check_state(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (!t.defined() || t.shape() != expected)
    throw ShapeError(std::string("cell state ") + what + " has shape " +
                     (t.defined() ? ad::to_string(t.shape()) : std::string("<undefined>")) +
                     ", expected " + ad::to_string(expected));
}

}  // namespace

template <class T>
std::pair<Tensor<T>, CellState<T>> conv_lstm_step(Tape<T>& tape, const Tensor<T>& x,
                                                  const CellState<T>& state,
                                                  const ConvLSTMParams<T>& params) {
  const CellSpec& spec = params.spec;
  const std::size_t ch = spec.out_channels;
  Tensor<T> gates = input_path(tape, x, params.w_x, params.b, spec);
  const Shape out_shape{gates.dim(0), ch, gates.dim(2), gates.dim(3)};
  check_state(state.h, out_shape, "h");
  check_state(state.c, out_shape, "c");

  if (spec.recurrent)
    gates = tape.add(gates, tape.conv2d(state.h, params.w_h, Tensor<T>{}, 1, spec.pad()));

  const auto f = tape.sigmoid(tape.slice(gates, 1, 0, ch));
  const auto i = tape.sigmoid(tape.slice(gates, 1, ch, 2 * ch));
  const auto candidate = tape.tanh(tape.slice(gates, 1, 2 * ch, 3 * ch));
  const auto o = tape.sigmoid(tape.slice(gates, 1, 3 * ch, 4 * ch));

  Tensor<T> c = tape.mul(i, candidate);
  if (spec.recurrent) c = tape.add(tape.mul(f, state.c), c);
  const auto h = tape.mul(o, tape.tanh(c));
  CellState<T> next{CellKind::lstm, h, c, {}, {}};
  return {h, std::move(next)};
}

template <class T>
std::pair<Tensor<T>, CellState<T>> spiking_step(Tape<T>& tape, const Tensor<T>& x,
                                                const CellState<T>& state,
                                                const SpikingParams<T>& params) {
  const CellSpec& spec = params.spec;
  const std::size_t ch = spec.out_channels;
  const Tensor<T> gates = input_path(tape, x, params.w, params.b, spec);
  const Shape out_shape{gates.dim(0), ch, gates.dim(2), gates.dim(3)};
  check_state(state.c, out_shape, "c");
  check_state(state.v, out_shape, "v");
  check_state(state.y, out_shape, "y");

  const auto f = tape.sigmoid(tape.slice(gates, 1, 0, ch));
  const auto i = tape.sigmoid(tape.slice(gates, 1, ch, 2 * ch));
  const auto current = tape.slice(gates, 1, 2 * ch, 3 * ch);

  Tensor<T> c = tape.mul(i, current);
  Tensor<T> v = tape.tanh(c);
  if (spec.recurrent) {
    c = tape.add(tape.mul(f, state.c), c);
    v = tape.add(tape.sub(state.v, state.y), tape.tanh(c));
  }
  const auto y = tape.ste_quantize(v, spec.bits);
  CellState<T> next{CellKind::spiking, {}, c, v, y};
  return {y, std::move(next)};
}

// --- CKPT1 ---------------------------------------------------------------------

void write_checkpoint(std::ostream& os, const std::vector<NamedArray>& tensors) {
  os.write("CKPT", 4);
  detail::put_u32(os, checkpoint_version);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (ad::numel(t.shape) != t.values.size())
      throw ShapeError("checkpoint tensor '" + t.name + "' shape does not match its values");
    detail::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_u8(os, 0);
    detail::put_u8(os, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.values) detail::put_f32(os, v);
  }
}

std::vector<NamedArray> read_checkpoint(std::istream& is) {
  detail::expect_magic(is, "CKPT", 4);
  const auto version = detail::get_u32(is, "CKPT1 header");
  if (version != checkpoint_version)
    throw detail::FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_u32(is, "CKPT1 header");
  std::vector<NamedArray> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray t;
    const auto len = detail::get_u32(is, "CKPT1 name");
    if (len > 4096) throw detail::FormatError("checkpoint name too long");
    t.name.resize(len);
    detail::read_exact(is, reinterpret_cast<unsigned char*>(t.name.data()), len, "CKPT1 name");
    if (detail::get_u8(is, "CKPT1 dtype") != 0) throw detail::FormatError("unsupported dtype");
    const auto rank = detail::get_u8(is, "CKPT1 rank");
    for (std::uint8_t r = 0; r < rank; ++r) t.shape.push_back(detail::get_u32(is, "CKPT1 dims"));
    t.values.resize(ad::numel(t.shape));
    for (auto& v : t.values) v = detail::get_f32(is, "CKPT1 values");
    out.push_back(std::move(t));
  }
  return out;
}

void write_checkpoint(const std::string& path, const std::vector<NamedArray>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::ios_base::failure("cannot open " + path + " for writing");
  write_checkpoint(os, tensors);
  if (!os) throw std::ios_base::failure("write failed: " + path);
}

std::vector<NamedArray> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::ios_base::failure("cannot open " + path);
  return read_checkpoint(is);
}

template struct CellState<float>;
template struct CellState<double>;
template CellState<float> zero_state(const CellSpec&, std::size_t, std::size_t, std::size_t);
template CellState<double> zero_state(const CellSpec&, std::size_t, std::size_t, std::size_t);
template std::pair<Tensor<float>, CellState<float>> conv_lstm_step(Tape<float>&, const Tensor<float>&,
                                                                   const CellState<float>&,
                                                                   const ConvLSTMParams<float>&);
template std::pair<Tensor<double>, CellState<double>> conv_lstm_step(Tape<double>&, const Tensor<double>&,
                                                                     const CellState<double>&,
                                                                     const ConvLSTMParams<double>&);
template std::pair<Tensor<float>, CellState<float>> spiking_step(Tape<float>&, const Tensor<float>&,
                                                                 const CellState<float>&,
                                                                 const SpikingParams<float>&);
template std::pair<Tensor<double>, CellState<double>> spiking_step(Tape<double>&, const Tensor<double>&,
                                                                   const CellState<double>&,
                                                                   const SpikingParams<double>&);

}  // namespace evflow
