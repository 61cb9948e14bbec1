#include "evflow/model.hpp"

#include <cmath>
#include <map>
#include <random>
#include <sstream>

namespace evflow {

void NetworkConfig::validate() const {
  if (encoder.empty()) throw ConfigError("encoder ladder is empty");
  for (auto c : encoder)
    if (c == 0) throw ConfigError("encoder ladder has a zero-width layer");
  if (!decoder.empty() && decoder.size() != encoder.size())
    throw ConfigError("decoder ladder has " + std::to_string(decoder.size()) +
                      " layers, encoder has " + std::to_string(encoder.size()));
  for (auto c : decoder)
    if (c == 0) throw ConfigError("decoder ladder has a zero-width layer");
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("kernel size must be odd");
  if (in_channels == 0 || out_channels == 0) throw ConfigError("channel counts must be positive");
  if (cell == CellKind::spiking && (bits < 1 || bits > 8))
    throw ConfigError("spiking output bits must be in [1, 8]");
  if (!recurrent.empty() && recurrent.size() != num_layers())
    throw ConfigError("recurrent toggles must cover all " + std::to_string(num_layers()) + " layers");
}

std::vector<std::size_t> NetworkConfig::decoder_channels() const {
  if (!decoder.empty()) return decoder;
  return {encoder.rbegin(), encoder.rend()};
}

namespace {

template <class T>
Tensor<T> uniform(const Shape& shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(shape, std::move(v), true);
}

}  // namespace

template <class T>
Network<T> Network<T>::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  Network net;
  net.config_ = config;
  std::mt19937_64 rng(seed);

  const auto& enc = config.encoder;
  const auto dec = config.decoder_channels();
  const std::size_t depth = enc.size();
  auto make_layer = [&](std::string name, std::size_t in, std::size_t out, bool transposed,
                        std::size_t index) {
    Layer<T> layer;
    layer.name = std::move(name);
    layer.spec = CellSpec{config.cell, in, out, config.kernel, 2, transposed, config.bits,
                          config.recurrent.empty() ? true : config.recurrent[index]};
    const std::size_t k = config.kernel, g = layer.spec.gates() * out;
    const Shape wx = transposed ? Shape{in, g, k, k} : Shape{g, in, k, k};
    // He-uniform on the input path; a stride-2 transposed kernel reaches each
    // output through about a quarter of its taps.
    const double fan_in = static_cast<double>(in * k * k) / (transposed ? 4.0 : 1.0);
    layer.w_x = uniform<T>(wx, std::sqrt(6.0 / fan_in), rng);
    if (config.cell == CellKind::lstm)
      layer.w_h = uniform<T>({g, out, k, k}, 1.0 / std::sqrt(static_cast<double>(out * k * k)), rng);
    std::vector<T> bias(g, T(0));
    if (config.cell == CellKind::lstm)
      for (std::size_t c = 0; c < out; ++c) bias[c] = T(1);  // forget gate
    layer.b = Tensor<T>::from({g}, std::move(bias), true);
    net.layers_.push_back(std::move(layer));
  };

  for (std::size_t i = 0; i < depth; ++i)
    make_layer("enc" + std::to_string(i), i == 0 ? config.in_channels : enc[i - 1], enc[i], false, i);
  for (std::size_t j = 0; j < depth; ++j) {
    std::size_t in = j == 0 ? enc[depth - 1] : dec[j - 1];
    if (j > 0 && config.skips) in += enc[depth - 1 - j];
    make_layer("dec" + std::to_string(j), in, dec[j], true, depth + j);
  }
  net.head_w_ = uniform<T>({config.out_channels, dec.back(), 1, 1},
                           std::sqrt(3.0 / static_cast<double>(dec.back())), rng);
  net.head_b_ = Tensor<T>::zeros({config.out_channels}, true);
  return net;
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> Network<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& l : layers_) {
    out.emplace_back(l.name + ".w_x", l.w_x);
    if (l.w_h.defined()) out.emplace_back(l.name + ".w_h", l.w_h);
    out.emplace_back(l.name + ".b", l.b);
  }
  out.emplace_back("head.w", head_w_);
  out.emplace_back("head.b", head_b_);
  return out;
}

template <class T>
std::vector<Tensor<T>> Network<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <class T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

template <class T>
std::vector<CellState<T>> Network<T>::zero_states(std::size_t batch, std::size_t height,
                                                  std::size_t width) const {
  const std::size_t div = config_.resolution_divisor();
  if (height % div != 0 || width % div != 0)
    throw StateError("input " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by " + std::to_string(div));
  std::vector<CellState<T>> out;
  std::size_t h = height, w = width;
  for (const auto& l : layers_) {
    std::tie(h, w) = l.spec.output_size(h, w);
    out.push_back(zero_state<T>(l.spec, batch, h, w));
  }
  return out;
}

template <class T>
typename Network<T>::StepResult Network<T>::step(Tape<T>& tape, const Tensor<T>& x,
                                                 const std::vector<CellState<T>>& states,
                                                 const LayerInputObserver<T>& observer) const {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels)
    throw StateError("network input " + ad::to_string(x.shape()) + " does not have " +
                     std::to_string(config_.in_channels) + " channels");
  if (states.size() != layers_.size())
    throw StateError("expected " + std::to_string(layers_.size()) + " layer states, got " +
                     std::to_string(states.size()));
  {
    const auto expected = zero_states(x.dim(0), x.dim(2), x.dim(3));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto want = expected[i].tensors(), have = states[i].tensors();
      bool ok = states[i].kind == expected[i].kind && want.size() == have.size();
      for (std::size_t k = 0; ok && k < want.size(); ++k)
        ok = have[k].defined() && have[k].shape() == want[k].shape();
      if (!ok) throw StateError("state of layer " + layers_[i].name + " does not match the network");
    }
  }

  StepResult out;
  out.states.reserve(layers_.size());
  const std::size_t depth = config_.encoder.size();
  std::vector<Tensor<T>> encoded;
  Tensor<T> current = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer<T>& layer = layers_[i];
    Tensor<T> input = current;
    if (i > depth && config_.skips) input = tape.concat({current, encoded[2 * depth - 1 - i]}, 1);
    if (observer) observer(i, input);
    auto [y, next] = layer.spec.kind == CellKind::lstm
                         ? conv_lstm_step(tape, input, states[i], layer.lstm())
                         : spiking_step(tape, input, states[i], layer.spiking());
    if (i < depth) encoded.push_back(y);
    current = y;
    out.states.push_back(std::move(next));
  }
  if (observer) observer(layers_.size(), current);
  out.flow = tape.conv2d(current, head_w_, head_b_, 1, 0);
  return out;
}

template <class T>
typename Network<T>::StreamResult Network<T>::run_stream(Tape<T>& tape,
                                                         std::span<const Tensor<T>> frames,
                                                         std::vector<CellState<T>> states) const {
  if (frames.empty()) throw EmptyOutput("run_stream: empty input sequence");
  StreamResult out;
  out.flows.reserve(frames.size());
  for (const auto& f : frames) {
    auto r = step(tape, f, states);
    out.flows.push_back(std::move(r.flow));
    states = std::move(r.states);
  }
  out.states = std::move(states);
  return out;
}

template <class T>
std::vector<NamedArray> Network<T>::to_checkpoint() const {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : named_parameters()) {
    NamedArray a{name, t.shape(), {}};
    a.values.reserve(t.numel());
    for (const T v : t.values()) a.values.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

template <class T>
void Network<T>::load_checkpoint(const std::vector<NamedArray>& tensors) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (auto& [name, param] : named_parameters()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape != param.shape())
      throw ConfigError("checkpoint tensor '" + name + "' has shape " +
                        ad::to_string(it->second->shape) + ", network expects " +
                        ad::to_string(param.shape()));
    Tensor<T> handle = param;
    auto dst = handle.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
  if (by_name.size() != named_parameters().size())
    throw ConfigError("checkpoint holds tensors the network does not have");
}

template <class T>
std::string Network<T>::summary(std::size_t height, std::size_t width) const {
  std::ostringstream os;
  os << to_string(config_.cell) << " network, input 2x" << height << 'x' << width << '\n';
  std::size_t h = height, w = width;
  for (const auto& l : layers_) {
    std::tie(h, w) = l.spec.output_size(h, w);
    std::size_t params = l.w_x.numel() + l.b.numel() + (l.w_h.defined() ? l.w_h.numel() : 0);
    os << "  " << l.name << ": in " << l.spec.in_channels << " -> out " << l.spec.out_channels << 'x'
       << h << 'x' << w << (l.spec.transposed ? " (up)" : " (down)")
       << (l.spec.recurrent ? "" : " non-recurrent") << ", params " << params << '\n';
  }
  os << "  head: " << head_w_.dim(1) << " -> " << head_w_.dim(0) << 'x' << h << 'x' << w
     << ", params " << head_w_.numel() + head_b_.numel() << '\n';
  os << "  total params " << parameter_count() << '\n';
  return os.str();
}

template class Network<float>;
template class Network<double>;

}  // namespace evflow
