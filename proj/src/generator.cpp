#include "remem/generator.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "remem/error.hpp"
#include "remem/rng.hpp"

namespace remem {

void Generator::validate() const {
  if (latent_dim < 1) throw ValidationError("generator: latent_dim must be >= 1");
  if (base_size < 1) throw ValidationError("generator: base_size must be >= 1");
  if (layers.empty()) throw ValidationError("generator: no layers");
  int channels = latent_dim;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "generator layer " + std::to_string(i + 1) + ": ";
    if (l.weight.rank() != 4) throw ValidationError(where + "weight must be 4-d");
    if (l.in_channels() != channels) {
      throw ValidationError(where + "expects " + std::to_string(l.in_channels()) +
                            " input channels, previous layer gives " + std::to_string(channels));
    }
    if (l.kh() % 2 == 0 || l.kw() % 2 == 0) throw ValidationError(where + "kernel sizes must be odd");
    if (l.bias.rank() != 1 || l.bias.dim(0) != l.out_channels()) throw ValidationError(where + "bias shape mismatch");
    if (l.upsample < 1) throw ValidationError(where + "upsample must be >= 1");
    channels = l.out_channels();
  }
  if (channels != 3) throw ValidationError("generator: last layer must output 3 channels");
}

const LayerSpec& Generator::layer(int l) const {
  if (l < 1 || l > layer_count()) throw ValidationError("layer index " + std::to_string(l) + " out of range");
  return layers[static_cast<std::size_t>(l - 1)];
}

LayerSpec& Generator::layer(int l) {
  if (l < 1 || l > layer_count()) throw ValidationError("layer index " + std::to_string(l) + " out of range");
  return layers[static_cast<std::size_t>(l - 1)];
}

int Generator::resolution(int l) const {
  if (l < 0 || l > layer_count()) throw ValidationError("layer index " + std::to_string(l) + " out of range");
  int r = base_size;
  for (int i = 0; i < l; ++i) r *= layers[static_cast<std::size_t>(i)].upsample;
  return r;
}

std::vector<Latent> sample_latents(std::uint64_t seed, int n, int latent_dim) {
  if (n < 0 || latent_dim < 1) throw ValidationError("sample_latents: bad sizes");
  std::vector<Latent> out(static_cast<std::size_t>(n), Latent(static_cast<std::size_t>(latent_dim)));
  for (int m = 0; m < n; ++m)
    for (int j = 0; j < latent_dim; ++j) {
      const auto idx = static_cast<std::uint64_t>(m) * latent_dim + j;
      out[m][j] = static_cast<float>(counter_normal(seed, idx));
    }
  return out;
}

Latent latent_for_seed(std::uint64_t seed, int latent_dim) { return sample_latents(seed, 1, latent_dim)[0]; }

Tensor broadcast_latent(const Generator& gen, const Latent& z) {
  if (static_cast<int>(z.size()) != gen.latent_dim) {
    throw ValidationError("latent has " + std::to_string(z.size()) + " entries, generator expects " +
                          std::to_string(gen.latent_dim));
  }
  const int s = gen.base_size;
  Tensor t({gen.latent_dim, s, s});
  for (int c = 0; c < gen.latent_dim; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) t.at(c, y, x) = z[c];
  return t;
}

Tensor run_conv(const LayerSpec& layer, const Tensor& conv_input) {
  Tensor out = kernels::conv2d(conv_input, layer.weight, layer.bias);
  kernels::activate_inplace(out, layer.act);
  return out;
}

Tensor run_layer(const LayerSpec& layer, const Tensor& input) {
  return run_conv(layer, kernels::upsample_nearest(input, layer.upsample));
}

Tensor forward(const Generator& gen, const Latent& z) {
  Tensor x = broadcast_latent(gen, z);
  for (const auto& l : gen.layers) x = run_layer(l, x);
  return x;
}

LayerFeatures features(const Generator& gen, const Latent& z, int layer) {
  if (layer < 1 || layer > gen.layer_count()) {
    throw ValidationError("features: layer " + std::to_string(layer) + " outside 1.." +
                          std::to_string(gen.layer_count()));
  }
  Tensor x = broadcast_latent(gen, z);
  for (int l = 1; l < layer; ++l) x = run_layer(gen.layer(l), x);
  const auto& target = gen.layer(layer);
  LayerFeatures f;
  f.keys = {layer, kernels::upsample_nearest(x, target.upsample)};
  f.values = {layer, run_conv(target, f.keys.data)};
  return f;
}

Tensor continue_from(const Generator& gen, const Tensor& v_map, int layer) {
  if (layer < 0 || layer > gen.layer_count()) throw ValidationError("continue_from: bad layer");
  Tensor x = v_map;
  for (int l = layer + 1; l <= gen.layer_count(); ++l) x = run_layer(gen.layer(l), x);
  return x;
}

Tensor render_isolated_patch(const Generator& gen, const FeatureMap& v_map, Location location, int layer) {
  const auto& spec = gen.layer(layer);
  const int h = v_map.height(), w = v_map.width();
  if (location.y < 0 || location.y >= h || location.x < 0 || location.x >= w) {
    throw ValidationError("render_isolated_patch: location (" + std::to_string(location.y) + "," +
                          std::to_string(location.x) + ") outside " + std::to_string(h) + "x" + std::to_string(w));
  }
  const int ry = spec.kh() / 2, rx = spec.kw() / 2;
  Tensor isolated(v_map.data.shape);
  for (int c = 0; c < v_map.channels(); ++c)
    for (int y = std::max(0, location.y - ry); y <= std::min(h - 1, location.y + ry); ++y)
      for (int x = std::max(0, location.x - rx); x <= std::min(w - 1, location.x + rx); ++x)
        isolated.at(c, y, x) = v_map.data.at(c, y, x);
  return continue_from(gen, isolated, layer);
}

Box image_footprint(const Generator& gen, int layer, const Box& cells) {
  int y0 = cells.y0, x0 = cells.x0, y1 = cells.y1(), x1 = cells.x1();
  for (int l = layer + 1; l <= gen.layer_count(); ++l) {
    const auto& spec = gen.layer(l);
    const int res = gen.resolution(l);
    y0 = std::max(0, y0 * spec.upsample - spec.kh() / 2);
    x0 = std::max(0, x0 * spec.upsample - spec.kw() / 2);
    y1 = std::min(res, y1 * spec.upsample + spec.kh() / 2);
    x1 = std::min(res, x1 * spec.upsample + spec.kw() / 2);
  }
  return {y0, x0, y1 - y0, x1 - x0};
}

Box image_cells(const Generator& gen, int layer, const Box& cells) {
  const int scale = gen.image_size() / gen.resolution(layer);
  return {cells.y0 * scale, cells.x0 * scale, cells.h * scale, cells.w * scale};
}

Tensor crop(const Tensor& image, const Box& box) {
  if (box.y0 < 0 || box.x0 < 0 || box.y1() > image.dim(1) || box.x1() > image.dim(2) || box.h < 1 || box.w < 1) {
    throw ValidationError("crop box outside image");
  }
  Tensor out({image.dim(0), box.h, box.w});
  for (int c = 0; c < image.dim(0); ++c)
    for (int y = 0; y < box.h; ++y)
      for (int x = 0; x < box.w; ++x) out.at(c, y, x) = image.at(c, box.y0 + y, box.x0 + x);
  return out;
}

Architecture Architecture::desk() {
  Architecture a;
  a.latent_dim = 32;
  a.base_size = 4;
  a.layers = {{32, 3, 1, Nonlinearity::leaky_relu},
              {32, 3, 2, Nonlinearity::leaky_relu},
              {16, 3, 2, Nonlinearity::leaky_relu},
              {3, 3, 2, Nonlinearity::tanh}};
  return a;
}

Generator build_random_generator(std::uint64_t seed, const Architecture& arch) {
  Generator g;
  g.latent_dim = arch.latent_dim;
  g.base_size = arch.base_size;
  CounterRng rng(derive_seed(seed, 0x7a11));
  int in = arch.latent_dim;
  for (const auto& shape : arch.layers) {
    LayerSpec l;
    l.act = shape.act;
    l.upsample = shape.upsample;
    l.weight = Tensor({shape.out_channels, in, shape.kernel, shape.kernel});
    l.bias = Tensor({shape.out_channels});
    const double gain = shape.act == Nonlinearity::tanh ? 1.0 : std::sqrt(2.0);
    const double stddev = gain / std::sqrt(static_cast<double>(in * shape.kernel * shape.kernel));
    for (float& w : l.weight.data) w = static_cast<float>(rng.normal(0.0, stddev));
    for (float& b : l.bias.data) b = static_cast<float>(rng.normal(0.0, 0.05));
    g.layers.push_back(std::move(l));
    in = shape.out_channels;
  }
  g.validate();
  return g;
}

}  // namespace remem
