#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace evflow {

// Dense per-pixel displacement in pixels; u along x, v along y. Pixels with
// valid == 0 are excluded from every loss and metric.
struct FlowField {
  int width = 0;
  int height = 0;
  std::uint64_t t_us = 0;
  std::vector<float> u;
  std::vector<float> v;
  std::vector<std::uint8_t> valid;

  static FlowField constant(int width, int height, float u, float v, bool valid = true) {
    const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    return FlowField{width, height, 0, std::vector<float>(n, u), std::vector<float>(n, v),
                     std::vector<std::uint8_t>(n, valid ? 1 : 0)};
  }

  std::size_t size() const { return u.size(); }
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
  }
};

}  // namespace evflow
