#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace remem {

/// Dense row-major float32 array with an explicit shape. Feature maps are
/// C x H x W, conv weights are O x I x KH x KW.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, float fill = 0.0f)
      : shape(std::move(s)), data(element_count(shape), fill) {}

  static std::size_t element_count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  // 3-d (C, H, W) access.
  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool operator==(const Tensor& o) const = default;

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace remem
