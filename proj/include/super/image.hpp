#pragma once

#include <cstdint>
#include <vector>

namespace super {

/// Dense row-major image container.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

  T& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
  const T& at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
  size_t size() const { return data.size(); }
};

using DepthImage = Image<float>;   // meters, NaN = invalid
using MaskImage = Image<uint8_t>;  // nonzero = masked

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
};
using ColorImage = Image<Rgb>;

}  // namespace super
