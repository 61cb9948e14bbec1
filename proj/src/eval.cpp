#include "evflow/eval.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace evflow {

std::vector<std::uint8_t> active_mask(std::span<const CountFrame> recent, const FlowField& gt) {
  std::vector<std::uint8_t> mask(gt.size(), 0);
  for (const auto& f : recent) {
    if (f.width != gt.width || f.height != gt.height)
      throw AlignmentError("count frame " + std::to_string(f.width) + "x" + std::to_string(f.height) +
                           " vs ground truth " + std::to_string(gt.width) + "x" + std::to_string(gt.height));
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (f.data[2 * i] + f.data[2 * i + 1] > 0) mask[i] = 1;
  }
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && gt.valid[i];
  return mask;
}

double endpoint_error(const FlowField& pred, const FlowField& gt, std::size_t i) {
  const double du = static_cast<double>(pred.u[i]) - gt.u[i];
  const double dv = static_cast<double>(pred.v[i]) - gt.v[i];
  return std::sqrt(du * du + dv * dv);
}

namespace {

void check_same_size(const FlowField& pred, const FlowField& gt, std::size_t mask_size) {
  if (pred.width != gt.width || pred.height != gt.height || mask_size != gt.size())
    throw AlignmentError("prediction, ground truth and mask sizes differ");
}

}  // namespace

double aee(const FlowField& pred, const FlowField& gt, std::span<const std::uint8_t> mask) {
  check_same_size(pred, gt, mask.size());
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      sum += endpoint_error(pred, gt, i);
      ++n;
    }
  if (n == 0) throw NoEvaluatedPixels("aee: empty mask");
  return sum / static_cast<double>(n);
}

double kpe(const FlowField& pred, const FlowField& gt, std::span<const std::uint8_t> mask, double k) {
  check_same_size(pred, gt, mask.size());
  std::size_t over = 0, n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      over += endpoint_error(pred, gt, i) > k;
      ++n;
    }
  if (n == 0) throw NoEvaluatedPixels("kpe: empty mask");
  return 100.0 * static_cast<double>(over) / static_cast<double>(n);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["aee"] = aee;
  for (int k = 0; k < max_k; ++k) j[std::to_string(k + 1) + "pe"] = kpe[k];
  j["evaluated_pixels"] = evaluated_pixels;
  j["skipped"] = skipped;
  auto& rows = j["per_gt"] = nlohmann::json::array();
  for (const auto& s : per_gt) {
    nlohmann::json r{{"index", s.index}, {"t_us", s.t_us}, {"pixels", s.pixels}, {"aee", s.aee}};
    for (int k = 0; k < max_k; ++k) r[std::to_string(k + 1) + "pe"] = s.kpe[k];
    rows.push_back(std::move(r));
  }
  return j;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "index,t_us,pixels,aee,1pe,2pe,3pe,4pe,5pe\n";
  for (const auto& s : per_gt) {
    os << s.index << ',' << s.t_us << ',' << s.pixels << ',' << fmt(s.aee);
    for (double v : s.kpe) os << ',' << fmt(v);
    os << '\n';
  }
  os << "all,," << evaluated_pixels << ',' << fmt(aee);
  for (double v : kpe) os << ',' << fmt(v);
  os << '\n';
  return os.str();
}

void StreamEvaluator::push(const CountFrame& counts, FlowField prediction) {
  recent_.push_back(counts);
  if (recent_.size() > opts_.mask_window) recent_.erase(recent_.begin());
  last_ = std::move(prediction);
}

void StreamEvaluator::score(const FlowField& gt) {
  if (recent_.empty()) throw AlignmentError("score() before any prediction");
  const auto mask = active_mask(recent_, gt);
  GroundTruthScore s;
  s.index = scored_++;
  s.t_us = gt.t_us;
  check_same_size(last_, gt, mask.size());
  double sum = 0;
  std::array<std::size_t, max_k> over{};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double e = endpoint_error(last_, gt, i);
    sum += e;
    for (int k = 0; k < max_k; ++k) over[k] += e > k + 1;
    ++s.pixels;
  }
  if (s.pixels == 0) {
    ++partial_.skipped;
  } else {
    s.aee = sum / static_cast<double>(s.pixels);
    for (int k = 0; k < max_k; ++k) s.kpe[k] = 100.0 * static_cast<double>(over[k]) / s.pixels;
    epe_sum_ += sum;
    for (int k = 0; k < max_k; ++k) over_k_[k] += over[k];
    pixels_ += s.pixels;
  }
  partial_.per_gt.push_back(s);
}

EvalReport StreamEvaluator::report() const {
  if (pixels_ == 0) throw NoEvaluatedPixels("no ground truth had an active pixel");
  EvalReport r = partial_;
  r.evaluated_pixels = pixels_;
  // Pixel-weighted mean of per-ground-truth scores.
  r.aee = epe_sum_ / static_cast<double>(pixels_);
  for (int k = 0; k < max_k; ++k) r.kpe[k] = 100.0 * static_cast<double>(over_k_[k]) / pixels_;
  return r;
}

EvalReport evaluate_stream(FlowPredictor& predictor, std::span<const CountFrame> counts,
                           std::span<const FlowField> gts, const EvalOptions& opts,
                           std::vector<FlowField>* predictions) {
  if (opts.m == 0) throw AlignmentError("m must be positive");
  if (gts.size() * opts.m > counts.size())
    throw AlignmentError(std::to_string(gts.size()) + " ground truths need " +
                         std::to_string(gts.size() * opts.m) + " counts, stream has " +
                         std::to_string(counts.size()));
  StreamEvaluator ev(opts);
  for (std::size_t k = 0; k < counts.size(); ++k) {
    ev.push(counts[k], predictor.predict(counts[k]));
    if ((k + 1) % opts.m == 0 && (k + 1) / opts.m <= gts.size()) {
      ev.score(gts[(k + 1) / opts.m - 1]);
      if (predictions) predictions->push_back(ev.last_prediction());
    }
  }
  return ev.report();
}

EvalReport merge_reports(std::span<const EvalReport> reports) {
  EvalReport out;
  double epe = 0;
  std::array<double, max_k> over{};
  for (const auto& r : reports) {
    epe += r.aee * static_cast<double>(r.evaluated_pixels);
    for (int k = 0; k < max_k; ++k) over[k] += r.kpe[k] * static_cast<double>(r.evaluated_pixels);
    out.evaluated_pixels += r.evaluated_pixels;
    out.skipped += r.skipped;
    for (auto s : r.per_gt) {
      s.index = out.per_gt.size();
      out.per_gt.push_back(s);
    }
  }
  if (out.evaluated_pixels == 0) throw NoEvaluatedPixels("no stream had an evaluated pixel");
  const auto n = static_cast<double>(out.evaluated_pixels);
  out.aee = epe / n;
  for (int k = 0; k < max_k; ++k) out.kpe[k] = over[k] / n;
  return out;
}

template <class T>
FlowField to_flow_field(const Tensor<T>& flow, std::uint64_t t_us) {
  if (flow.rank() != 4 || flow.dim(0) != 1 || flow.dim(1) != 2)
    throw ShapeError("to_flow_field: expected [1, 2, H, W], got " + ad::to_string(flow.shape()));
  const int h = static_cast<int>(flow.dim(2)), w = static_cast<int>(flow.dim(3));
  FlowField f = FlowField::constant(w, h, 0.f, 0.f);
  f.t_us = t_us;
  const std::size_t plane = f.size();
  for (std::size_t i = 0; i < plane; ++i) {
    f.u[i] = static_cast<float>(flow[i]);
    f.v[i] = static_cast<float>(flow[plane + i]);
  }
  return f;
}

template <class T>
FlowField NetworkPredictor<T>::predict(const CountFrame& counts) {
  if (states_.empty())
    states_ = net_.zero_states(1, static_cast<std::size_t>(counts.height), static_cast<std::size_t>(counts.width));
  auto tape = Tape<T>::inference();
  auto r = net_.step(tape, normalize_counts<T>(counts, cap_), states_);
  states_ = std::move(r.states);
  return to_flow_field(r.flow, counts.t_end);
}

// --- multiply counting --------------------------------------------------------

std::uint64_t OpCountReport::dense_input() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.dense_input;
  return n;
}

std::uint64_t OpCountReport::effective_input() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.effective_input;
  return n;
}

double OpCountReport::input_ratio() const {
  const auto d = dense_input();
  return d ? static_cast<double>(effective_input()) / static_cast<double>(d) : 0.0;
}

void OpCountReport::normalize_by(const OpCountReport& ref) {
  reference = ref.network;
  reference_ratio = ref.effective_total ? static_cast<double>(effective_total) / ref.effective_total : 0.0;
  parameter_ratio = ref.parameters ? static_cast<double>(parameters) / ref.parameters : 0.0;
}

nlohmann::json OpCountReport::to_json() const {
  nlohmann::json j{{"network", network},
                   {"steps", steps},
                   {"parameters", parameters},
                   {"dense_total", dense_total},
                   {"effective_total", effective_total},
                   {"dense_input", dense_input()},
                   {"effective_input", effective_input()},
                   {"input_ratio", input_ratio()},
                   {"reference", reference},
                   {"reference_ratio", reference_ratio},
                   {"parameter_ratio", parameter_ratio},
                   {"recurrent_counted", "dense"}};
  auto& rows = j["layers"] = nlohmann::json::array();
  for (const auto& l : layers)
    rows.push_back({{"name", l.name},
                    {"dense_input", l.dense_input},
                    {"effective_input", l.effective_input},
                    {"nonzero_fraction", l.nonzero_fraction()},
                    {"recurrent", l.recurrent},
                    {"elementwise", l.elementwise}});
  return j;
}

std::string OpCountReport::to_csv() const {
  std::ostringstream os;
  os << "layer,dense_input,effective_input,nonzero_fraction,recurrent,elementwise\n";
  for (const auto& l : layers)
    os << l.name << ',' << l.dense_input << ',' << l.effective_input << ',' << fmt(l.nonzero_fraction())
       << ',' << l.recurrent << ',' << l.elementwise << '\n';
  os << "total," << dense_input() << ',' << effective_input() << ',' << fmt(input_ratio()) << ",,\n";
  return os.str();
}

namespace {

// Kernel taps that read input row i: forward conv slides the output grid
// over the input, the transposed conv scatters row i to i * stride - pad + k.
std::vector<std::uint64_t> tap_uses(std::size_t in, std::size_t out, const CellSpec& spec) {
  std::vector<std::uint64_t> uses(in, 0);
  const long s = static_cast<long>(spec.stride), p = static_cast<long>(spec.pad());
  const long k = static_cast<long>(spec.kernel);
  if (spec.transposed) {
    for (long i = 0; i < static_cast<long>(in); ++i)
      for (long t = 0; t < k; ++t) {
        const long o = i * s - p + t;
        if (o >= 0 && o < static_cast<long>(out)) ++uses[static_cast<std::size_t>(i)];
      }
  } else {
    for (long o = 0; o < static_cast<long>(out); ++o)
      for (long t = 0; t < k; ++t) {
        const long i = o * s - p + t;
        if (i >= 0 && i < static_cast<long>(in)) ++uses[static_cast<std::size_t>(i)];
      }
  }
  return uses;
}

// Dense taps along one axis summed over the output: every tap for a forward
// conv (padding included), only the taps landing on the input grid for the
// transposed conv (gather form, border included).
std::uint64_t dense_taps(std::size_t out, const CellSpec& spec) {
  if (!spec.transposed) return static_cast<std::uint64_t>(out) * spec.kernel;
  std::uint64_t n = 0;
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t t = 0; t < spec.kernel; ++t) n += (o + spec.pad() + spec.stride - t % spec.stride) % spec.stride == 0;
  return n;
}

}  // namespace

template <class T>
OpCountReport count_mult_ops(const Network<T>& net, std::span<const CountFrame> counts, int cap) {
  const auto& layers = net.layers();
  OpCountReport report;
  report.network = std::string(to_string(net.config().cell)) +
                   (net.config().cell == CellKind::spiking ? "-" + std::to_string(net.config().bits) + "bit" : "");
  report.parameters = net.parameter_count();
  report.layers.resize(layers.size() + 1);
  for (std::size_t i = 0; i < layers.size(); ++i) report.layers[i].name = layers[i].name;
  report.layers.back().name = "head";

  std::vector<CellState<T>> states;
  const std::size_t out_channels = net.config().out_channels;
  auto observe = [&](std::size_t index, const Tensor<T>& x) {
    const std::size_t cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto values = x.values();
    LayerOps& ops = report.layers[index];
    if (index == layers.size()) {
      const auto nnz = static_cast<std::uint64_t>(
          std::count_if(values.begin(), values.end(), [](T v) { return v != T(0); }));
      ops.dense_input += out_channels * cin * h * w;
      ops.effective_input += out_channels * nnz;
      return;
    }
    const CellSpec& spec = layers[index].spec;
    const auto [ho, wo] = spec.output_size(h, w);
    const std::uint64_t cout = spec.gates() * spec.out_channels, k2 = spec.kernel * spec.kernel;
    const std::uint64_t cells = spec.out_channels * ho * wo;
    const auto rows = tap_uses(h, ho, spec), cols = tap_uses(w, wo, spec);
    std::uint64_t reads = 0;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          if (values[(c * h + y) * w + xx] != T(0)) reads += rows[y] * cols[xx];
    ops.dense_input += cout * cin * dense_taps(ho, spec) * dense_taps(wo, spec);
    ops.effective_input += cout * reads;
    if (spec.kind == CellKind::lstm) {
      if (spec.recurrent) ops.recurrent += cout * spec.out_channels * k2 * ho * wo;
      ops.elementwise += (spec.recurrent ? 3 : 2) * cells;
    } else {
      ops.elementwise += (spec.recurrent ? 2 : 1) * cells;
    }
  };

  for (const auto& frame : counts) {
    if (states.empty())
      states = net.zero_states(1, static_cast<std::size_t>(frame.height), static_cast<std::size_t>(frame.width));
    auto tape = Tape<T>::inference();
    states = net.step(tape, normalize_counts<T>(frame, cap), states, observe).states;
    ++report.steps;
  }
  for (const auto& l : report.layers) {
    report.dense_total += l.dense_input + l.recurrent + l.elementwise;
    report.effective_total += l.effective_input + l.recurrent + l.elementwise;
  }
  return report;
}

// --- visualization --------------------------------------------------------------

std::vector<std::uint8_t> flow_to_rgb(const FlowField& flow, double max_magnitude) {
  std::vector<std::uint8_t> rgb(flow.size() * 3, 0);
  const double scale = max_magnitude > 0 ? max_magnitude : 1.0;
  for (std::size_t i = 0; i < flow.size(); ++i) {
    if (!flow.valid.empty() && !flow.valid[i]) continue;
    const double u = flow.u[i], v = flow.v[i];
    if (!std::isfinite(u) || !std::isfinite(v)) continue;
    double hue = std::atan2(v, u) / (2 * std::numbers::pi);
    if (hue < 0) hue += 1;
    const double sat = std::min(1.0, std::hypot(u, v) / scale);
    const double h6 = hue * 6;
    const int sector = static_cast<int>(h6) % 6;
    const double f = h6 - std::floor(h6);
    const double p = 1 - sat, q = 1 - sat * f, t = 1 - sat * (1 - f);
    double r = 1, g = 1, b = 1;
    switch (sector) {
      case 0: r = 1, g = t, b = p; break;
      case 1: r = q, g = 1, b = p; break;
      case 2: r = p, g = 1, b = t; break;
      case 3: r = p, g = q, b = 1; break;
      case 4: r = t, g = p, b = 1; break;
      default: r = 1, g = p, b = q; break;
    }
    rgb[3 * i] = static_cast<std::uint8_t>(std::lround(255 * r));
    rgb[3 * i + 1] = static_cast<std::uint8_t>(std::lround(255 * g));
    rgb[3 * i + 2] = static_cast<std::uint8_t>(std::lround(255 * b));
  }
  return rgb;
}

void write_png(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> rgb) {
  if (width <= 0 || height <= 0 || rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw std::invalid_argument("write_png: buffer does not match " + std::to_string(width) + "x" +
                                std::to_string(height));
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw std::runtime_error("error closing " + path.string());
}

template FlowField to_flow_field(const Tensor<float>&, std::uint64_t);
template FlowField to_flow_field(const Tensor<double>&, std::uint64_t);
template class NetworkPredictor<float>;
template class NetworkPredictor<double>;
template OpCountReport count_mult_ops(const Network<float>&, std::span<const CountFrame>, int);
template OpCountReport count_mult_ops(const Network<double>&, std::span<const CountFrame>, int);

}  // namespace evflow
