#include <doctest.h>

#include <cmath>
#include <fstream>
#include <string>

#include "remem/error.hpp"
#include "remem/generator.hpp"
#include "remem/gtf.hpp"

using namespace remem;

namespace {

std::string tensor_hash(const Tensor& t) {
  return gtf::content_hash(std::string_view(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float)));
}

Generator zero_generator() {
  Generator g = build_random_generator(3);
  for (auto& l : g.layers) {
    std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0f);
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0f);
  }
  return g;
}

}  // namespace

TEST_SUITE("genmodel") {

TEST_CASE("desk architecture shapes") {
  const Generator g = build_random_generator(0);
  CHECK(g.latent_dim == 32);
  CHECK(g.layer_count() == 4);
  CHECK(g.resolution(0) == 4);
  CHECK(g.resolution(1) == 4);
  CHECK(g.resolution(2) == 8);
  CHECK(g.image_size() == 32);
  const Tensor img = forward(g, latent_for_seed(1, 32));
  CHECK(img.shape == std::vector<int>{3, 32, 32});
  for (float v : img.data) CHECK((v >= -1.0f && v <= 1.0f));
}

TEST_CASE("zero weights render a zero image") {
  const Tensor img = forward(zero_generator(), latent_for_seed(5, 32));
  for (float v : img.data) CHECK(v == 0.0f);
}

TEST_CASE("single 1x1 identity layer returns the broadcast latent") {
  Generator g;
  g.latent_dim = 3;
  g.base_size = 2;
  LayerSpec l;
  l.weight = Tensor({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) l.weight.data[static_cast<std::size_t>(c) * 4] = 1.0f;
  l.bias = Tensor({3});
  g.layers.push_back(l);
  g.validate();
  const Latent z{0.25f, -0.5f, 0.75f};
  CHECK(forward(g, z).data == broadcast_latent(g, z).data);
}

TEST_CASE("forward is deterministic and matches the committed golden hash") {
  const Generator g = build_random_generator(0);
  const Tensor a = forward(g, latent_for_seed(0, 32));
  CHECK(a.data == forward(g, latent_for_seed(0, 32)).data);
  std::ifstream in(std::string(REMEM_FIXTURE_DIR) + "/golden/forward-random0-seed0.txt");
  REQUIRE(in);
  std::string golden;
  in >> golden;
  CHECK(tensor_hash(a) == golden);
}

TEST_CASE("features splice back into forward bit-exactly over 100 latents") {
  const Generator g = build_random_generator(11);
  const auto zs = sample_latents(77, 100, g.latent_dim);
  for (std::size_t i = 0; i < zs.size(); ++i) {
    const Tensor full = forward(g, zs[i]);
    for (int l = 1; l <= g.layer_count(); ++l) {
      const LayerFeatures f = features(g, zs[i], l);
      CHECK(run_conv(g.layer(l), f.keys.data).data == f.values.data.data);
      CHECK(continue_from(g, f.values.data, l).data == full.data);
    }
  }
}

TEST_CASE("features at layer 1 see the broadcast latent") {
  const Generator g = build_random_generator(2);
  const Latent z = latent_for_seed(9, 32);
  CHECK(features(g, z, 1).keys.data.data == broadcast_latent(g, z).data);
  CHECK_THROWS_AS(features(g, z, 0), ValidationError);
  CHECK_THROWS_AS(features(g, z, 5), ValidationError);
  CHECK_THROWS_AS(forward(g, Latent(31)), ValidationError);
}

TEST_CASE("isolated patch rendering") {
  const Generator g = build_random_generator(4);
  SUBCASE("zero map renders the tail's zero-input image") {
    FeatureMap v{2, Tensor({32, 8, 8})};
    CHECK(render_isolated_patch(g, v, {3, 3}, 2).data == continue_from(g, Tensor({32, 8, 8}), 2).data);
  }
  SUBCASE("1x1 grid equals the full render") {
    Generator one;
    one.latent_dim = 4;
    one.base_size = 1;
    one.layers = build_random_generator(5, Architecture{4, 1, {{6, 3, 1, Nonlinearity::relu}, {3, 3, 4, Nonlinearity::tanh}}}).layers;
    one.validate();
    const Latent z = latent_for_seed(3, 4);
    const LayerFeatures f = features(one, z, 1);
    CHECK(render_isolated_patch(one, f.values, {0, 0}, 1).data == forward(one, z).data);
  }
  SUBCASE("out-of-bounds location") {
    const LayerFeatures f = features(g, latent_for_seed(0, 32), 2);
    CHECK_THROWS_AS(render_isolated_patch(g, f.values, {8, 0}, 2), ValidationError);
  }
}

TEST_CASE("sample_latents") {
  CHECK(sample_latents(1, 0, 32).empty());
  CHECK(sample_latents(42, 5, 32) == sample_latents(42, 5, 32));
  CHECK(sample_latents(42, 5, 32) != sample_latents(43, 5, 32));
  CHECK(latent_for_seed(42, 32) == sample_latents(42, 1, 32)[0]);
  SUBCASE("moments over 1e5 draws within 3 sigma") {
    const int n = 100000;
    const auto zs = sample_latents(2024, n, 1);
    double sum = 0.0, sq = 0.0;
    for (const auto& z : zs) {
      sum += z[0];
      sq += static_cast<double>(z[0]) * z[0];
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n));
  }
  CHECK_THROWS_AS(sample_latents(1, -1, 32), ValidationError);
}

TEST_CASE("validate rejects inconsistent shapes") {
  Generator g = build_random_generator(0);
  g.layers[1].weight = Tensor({32, 31, 3, 3});
  CHECK_THROWS_AS(g.validate(), ValidationError);
  Generator even = build_random_generator(0);
  even.layers[0].weight = Tensor({32, 32, 2, 2});
  CHECK_THROWS_AS(even.validate(), ValidationError);
}

TEST_CASE("footprints and crops") {
  const Generator g = build_random_generator(0);
  CHECK(image_cells(g, 2, {1, 2, 1, 1}) == Box{4, 8, 4, 4});
  const Box fp = image_footprint(g, 2, {1, 2, 1, 1});
  CHECK(fp.contains(4, 8));
  CHECK(fp.y0 >= 0);
  CHECK(fp.x1() <= 32);
  Tensor img({3, 4, 4});
  img.at(1, 2, 3) = 0.5f;
  CHECK(crop(img, {2, 3, 1, 1}).data == std::vector<float>{0.0f, 0.5f, 0.0f});
  CHECK_THROWS_AS(crop(img, {3, 3, 2, 2}), ValidationError);
}

}  // TEST_SUITE
