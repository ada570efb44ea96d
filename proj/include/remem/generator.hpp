#pragma once

#include <cstdint>
#include <vector>

#include "remem/kernels.hpp"
#include "remem/tensor.hpp"

namespace remem {

/// One generator layer: nearest upsample, same-padded conv, bias, nonlinearity.
struct LayerSpec {
  Tensor weight;  // out x in x kh x kw
  Tensor bias;    // out
  Nonlinearity act = Nonlinearity::identity;
  int upsample = 1;

  int out_channels() const { return weight.dim(0); }
  int in_channels() const { return weight.dim(1); }
  int kh() const { return weight.dim(2); }
  int kw() const { return weight.dim(3); }
  bool operator==(const LayerSpec&) const = default;
};

struct Generator {
  int latent_dim = 0;
  int base_size = 4;  // the latent is broadcast over a base_size x base_size grid
  std::vector<LayerSpec> layers;

  /// Throws ValidationError on inconsistent shapes.
  void validate() const;
  int layer_count() const { return static_cast<int>(layers.size()); }
  const LayerSpec& layer(int l) const;  // 1-based
  LayerSpec& layer(int l);
  /// Spatial size of layer l's output (and of its conv input). l = 0 is the base grid.
  int resolution(int l) const;
  int image_size() const { return resolution(layer_count()); }
  bool operator==(const Generator&) const = default;
};

using Latent = std::vector<float>;

struct Location {
  int y = 0;
  int x = 0;
  bool operator==(const Location&) const = default;
};

/// Half-open rectangle on some grid.
struct Box {
  int y0 = 0, x0 = 0, h = 0, w = 0;
  int y1() const { return y0 + h; }
  int x1() const { return x0 + w; }
  bool contains(int y, int x) const { return y >= y0 && y < y1() && x >= x0 && x < x1(); }
  bool operator==(const Box&) const = default;
};

struct FeatureMap {
  int layer = 0;
  Tensor data;  // C x H x W
  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

/// Keys entering layer L's convolution (after its upsample) and the values it produces.
struct LayerFeatures {
  FeatureMap keys;
  FeatureMap values;
};

/// Deterministic standard-normal latents: entry j of latent m is
/// counter_normal(seed, m * latent_dim + j).
std::vector<Latent> sample_latents(std::uint64_t seed, int n, int latent_dim);
Latent latent_for_seed(std::uint64_t seed, int latent_dim);

Tensor broadcast_latent(const Generator& gen, const Latent& z);

/// conv + bias + nonlinearity on an already-upsampled input.
Tensor run_conv(const LayerSpec& layer, const Tensor& conv_input);
Tensor run_layer(const LayerSpec& layer, const Tensor& input);

Tensor forward(const Generator& gen, const Latent& z);
LayerFeatures features(const Generator& gen, const Latent& z, int layer);
/// Runs layers layer+1 .. end starting from layer `layer`'s output.
Tensor continue_from(const Generator& gen, const Tensor& v_map, int layer);

/// Zeroes every entry of v_map except the kernel-sized patch centred on
/// `location`, then renders the remaining layers.
Tensor render_isolated_patch(const Generator& gen, const FeatureMap& v_map, Location location, int layer);

/// Pixel rectangle touched by `cells` of layer `layer`'s output once the
/// tail layers have upsampled and blurred it. Clamped to the image.
Box image_footprint(const Generator& gen, int layer, const Box& cells);
/// Pixel rectangle covered by `cells` by pure scaling (no blur margin).
Box image_cells(const Generator& gen, int layer, const Box& cells);

Tensor crop(const Tensor& image, const Box& box);

struct LayerShape {
  int out_channels;
  int kernel;
  int upsample;
  Nonlinearity act;
};

struct Architecture {
  int latent_dim = 32;
  int base_size = 4;
  std::vector<LayerShape> layers;

  /// latent 32, four 3x3 layers, channels 32-32-16-3, spatial 4-8-16-32.
  static Architecture desk();
};

/// Random generator with scaled-normal weights. Deterministic in seed.
Generator build_random_generator(std::uint64_t seed, const Architecture& arch = Architecture::desk());

}  // namespace remem
