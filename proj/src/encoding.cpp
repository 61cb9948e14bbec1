#include "evflow/encoding.hpp"

#include <algorithm>
#include <numeric>

namespace evflow {

std::uint64_t CountFrame::total() const {
  return std::accumulate(data.begin(), data.end(), std::uint64_t{0});
}

std::vector<CountFrame> count_events(const EventStream& stream, std::uint32_t interval_us,
                                     int width, int height, std::optional<std::uint64_t> t_end) {
  if (interval_us == 0) throw std::invalid_argument("count interval must be positive");
  const auto& ev = stream.events;
  for (std::size_t i = 1; i < ev.size(); ++i)
    if (event_before(ev[i], ev[i - 1]))
      throw UnsortedStream("event " + std::to_string(i) + " precedes its predecessor");

  auto frame_of = [interval_us](std::uint64_t t) -> std::size_t {
    return t == 0 ? 0 : static_cast<std::size_t>((t - 1) / interval_us);
  };
  std::size_t frames = 0;
  if (!ev.empty()) frames = frame_of(ev.back().t) + 1;
  if (t_end) frames = std::max<std::size_t>(frames, (*t_end + interval_us - 1) / interval_us);

  std::vector<CountFrame> out;
  out.reserve(frames);
  for (std::size_t k = 0; k < frames; ++k)
    out.push_back(CountFrame::zeros(width, height, (k + 1) * static_cast<std::uint64_t>(interval_us)));
  for (const auto& e : ev) {
    if (e.x >= width || e.y >= height) throw std::out_of_range("event outside sensor");
    out[frame_of(e.t)].at(e.y, e.x, e.p > 0 ? 0 : 1) += 1;
  }
  return out;
}

std::vector<TrainingSequence> build_sequences(std::span<const CountFrame> counts,
                                              std::span<const FlowField> gts, std::size_t m,
                                              std::size_t n, std::size_t l, std::size_t stride) {
  if (m == 0 || n == 0 || stride == 0)
    throw std::invalid_argument("build_sequences: m, n and stride must be positive");
  std::vector<TrainingSequence> out;
  const std::size_t window = m * n;
  if (window + l > counts.size()) return out;
  const int width = counts.front().width, height = counts.front().height;

  for (std::size_t start = 0; start + window <= counts.size(); start += stride * m) {
    const std::size_t last_gt = start / m + n - 1;
    if (last_gt >= gts.size())
      throw std::invalid_argument("build_sequences: ground truth missing for count " +
                                  std::to_string(start + window));
    TrainingSequence seq;
    seq.m = m;
    seq.window_start = start;
    seq.prefix.reserve(l);
    for (std::size_t k = 0; k < l; ++k) {
      if (start + k < l) {
        seq.prefix.push_back(CountFrame::zeros(width, height));
      } else {
        seq.prefix.push_back(counts[start + k - l]);
      }
    }
    seq.window.assign(counts.begin() + static_cast<std::ptrdiff_t>(start),
                      counts.begin() + static_cast<std::ptrdiff_t>(start + window));
    for (std::size_t j = 0; j < n; ++j) seq.targets.push_back(gts[start / m + j]);
    seq.augmentation.crop = Crop{0, 0, height, width};
    out.push_back(std::move(seq));
  }
  return out;
}

namespace {

// Source pixel of the output pixel (y, x) after flip-then-crop.
struct PixelMap {
  int src_w, src_h;
  bool flip_h, flip_v;
  Crop crop;

  int src_y(int y) const {
    const int fy = y + crop.y0;
    return flip_v ? src_h - 1 - fy : fy;
  }
  int src_x(int x) const {
    const int fx = x + crop.x0;
    return flip_h ? src_w - 1 - fx : fx;
  }
};

CountFrame remap(const CountFrame& f, const PixelMap& map) {
  CountFrame out = CountFrame::zeros(map.crop.w, map.crop.h, f.t_end);
  for (int y = 0; y < map.crop.h; ++y)
    for (int x = 0; x < map.crop.w; ++x)
      for (int c = 0; c < 2; ++c) out.at(y, x, c) = f.at(map.src_y(y), map.src_x(x), c);
  return out;
}

FlowField remap(const FlowField& f, const PixelMap& map) {
  FlowField out = FlowField::constant(map.crop.w, map.crop.h, 0.0f, 0.0f);
  out.t_us = f.t_us;
  const float su = map.flip_h ? -1.0f : 1.0f, sv = map.flip_v ? -1.0f : 1.0f;
  for (int y = 0; y < map.crop.h; ++y)
    for (int x = 0; x < map.crop.w; ++x) {
      const auto src = f.index(map.src_y(y), map.src_x(x));
      const auto dst = out.index(y, x);
      out.u[dst] = su * f.u[src];
      out.v[dst] = sv * f.v[src];
      out.valid[dst] = f.valid[src];
    }
  return out;
}

}  // namespace

TrainingSequence augment(const TrainingSequence& seq, bool flip_h, bool flip_v, Crop crop) {
  const CountFrame& ref = !seq.window.empty() ? seq.window.front() : seq.prefix.front();
  const int w = ref.width, h = ref.height;
  if (crop.h == 0 || crop.w == 0) crop = Crop{0, 0, h, w};
  if (crop.y0 < 0 || crop.x0 < 0 || crop.h < 0 || crop.w < 0 || crop.y0 + crop.h > h ||
      crop.x0 + crop.w > w)
    throw InvalidCrop("crop (" + std::to_string(crop.y0) + ", " + std::to_string(crop.x0) + ", " +
                      std::to_string(crop.h) + ", " + std::to_string(crop.w) +
                      ") does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " frame");

  const PixelMap map{w, h, flip_h, flip_v, crop};
  TrainingSequence out;
  out.m = seq.m;
  out.window_start = seq.window_start;
  for (const auto& f : seq.prefix) out.prefix.push_back(remap(f, map));
  for (const auto& f : seq.window) out.window.push_back(remap(f, map));
  for (const auto& t : seq.targets) out.targets.push_back(remap(t, map));
  // Compose with any earlier augmentation so the record stays meaningful.
  out.augmentation.flip_h = seq.augmentation.flip_h != flip_h;
  out.augmentation.flip_v = seq.augmentation.flip_v != flip_v;
  out.augmentation.crop = crop;
  return out;
}

template <class T>
ad::Tensor<T> normalize_counts(const CountFrame& frame, int cap) {
  if (cap < 1) throw std::invalid_argument("normalize_counts: cap must be >= 1");
  const std::size_t plane = static_cast<std::size_t>(frame.width) * frame.height;
  std::vector<T> values(2 * plane);
  const T scale = T(1) / static_cast<T>(cap);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      const auto clipped = std::min<std::uint32_t>(frame.data[i * 2 + c], static_cast<std::uint32_t>(cap));
      values[c * plane + i] = static_cast<T>(clipped) * scale;
    }
  return ad::Tensor<T>::from({1, 2, static_cast<std::size_t>(frame.height),
                              static_cast<std::size_t>(frame.width)},
                             std::move(values));
}

template ad::Tensor<float> normalize_counts(const CountFrame&, int);
template ad::Tensor<double> normalize_counts(const CountFrame&, int);

}  // namespace evflow
