#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "remem/error.hpp"
#include "remem/gtf.hpp"
#include "remem/planted.hpp"

using namespace remem;
namespace fs = std::filesystem;

namespace {

const fs::path kModels = fs::path(REMEM_FIXTURE_DIR) / "models";

double mean_pixel_l2(const Tensor& a, const Tensor& b) {
  const int h = a.dim(1), w = a.dim(2);
  double sum = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) d += std::pow(a.at(c, y, x) - b.at(c, y, x), 2);
      sum += std::sqrt(d);
    }
  return sum / (h * w);
}

void check_recall(const PlantedGenerator& p) {
  const AssocView view = as_assoc_view(p.gen.layer(p.manifest.memory_layer));
  for (const auto& r : p.manifest.rules) {
    CAPTURE(r.id);
    CHECK((recall(view, r.key) - r.value).norm() < 1e-4 * std::max(1.0, r.value.norm()));
  }
}

}  // namespace

TEST_SUITE("planted") {

TEST_CASE("a single rule is recalled exactly") { check_recall(build_planted_generator(3, 1)); }

TEST_CASE("every rule of a full memory is recalled") {
  for (int n : {4, 8, 32}) {
    CAPTURE(n);
    const PlantedGenerator p = build_planted_generator(5, n);
    REQUIRE(static_cast<int>(p.manifest.rules.size()) == n);
    check_recall(p);
  }
}

TEST_CASE("planted keys appear at their locations for their seeds") {
  const PlantedGenerator p = build_planted_generator(1, 4);
  for (const auto& r : p.manifest.rules) {
    const LayerFeatures f = features(p.gen, latent_for_seed(r.seed, p.gen.latent_dim), p.manifest.memory_layer);
    CAPTURE(r.id);
    CHECK((key_at(f.keys, r.location) - r.key).lpNorm<Eigen::Infinity>() < 1e-5);
    const auto hits = find_key_occurrences(f.keys.data, r.key);
    CHECK(std::find(hits.begin(), hits.end(), r.location) != hits.end());
  }
}

TEST_CASE("isolated render of a planted value reproduces its motif") {
  const PlantedGenerator p = build_planted_generator(1, 4);
  const int layer = p.manifest.memory_layer;
  for (const auto& r : p.manifest.rules) {
    const LayerFeatures f = features(p.gen, latent_for_seed(r.seed, p.gen.latent_dim), layer);
    const Tensor img = render_isolated_patch(p.gen, f.values, r.location, layer);
    CAPTURE(r.id);
    CHECK(mean_pixel_l2(crop(img, r.footprint), r.motif) < 0.05);
    CHECK(crop(render_value_patch(p.gen, layer, r.value, r.location), r.footprint).data == r.motif.data);
  }
}

TEST_CASE("construction is deterministic and seed-dependent") {
  const PlantedGenerator a = build_planted_generator(9, 4), b = build_planted_generator(9, 4);
  const PlantedGenerator c = build_planted_generator(10, 4);
  CHECK(a.gen == b.gen);
  CHECK(a.manifest.to_json() == b.manifest.to_json());
  CHECK_FALSE(a.gen == c.gen);
  CHECK(a.manifest.to_json() != c.manifest.to_json());
  CHECK_THROWS_AS(build_planted_generator(1, 0), ValidationError);
  CHECK_THROWS_AS(build_planted_generator(1, 33), ValidationError);
}

TEST_CASE("committed fixtures match their constructors") {
  const PlantedGenerator planted = load_planted(kModels / "planted.gtf");
  CHECK(gtf::generator_hash(planted.gen) == gtf::generator_hash(build_planted_generator(1, 4).gen));
  CHECK(planted.manifest.to_json() == build_planted_generator(1, 4).manifest.to_json());
  const PlantedGenerator wm = load_planted(kModels / "watermark.gtf");
  CHECK(gtf::generator_hash(wm.gen) == gtf::generator_hash(build_planted_generator(7, 4).gen));
  CHECK_THROWS_AS(load_planted(fs::temp_directory_path() / "missing-remem.gtf"), ValidationError);
}

TEST_CASE("manifest JSON round-trip") {
  const PlantedManifest m = build_planted_generator(2, 3).manifest;
  const PlantedManifest back = PlantedManifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  REQUIRE(back.rules.size() == 3);
  CHECK((back.rules[1].key - m.rules[1].key).norm() < 1e-6);
}

TEST_CASE("discovery fixture and pair files") {
  const DiscoveryFixture f = build_discovery_fixture(1000, 2, 2);
  REQUIRE(f.pairs.size() == 2);
  CHECK(f.layer == 2);
  const Matrix delta = as_assoc_view(f.changed.layer(2)).matrix - as_assoc_view(f.gen.layer(2)).matrix;
  CHECK(linalg::numerical_rank(delta, 1e-5) == 1);
  for (int l : {1, 3, 4}) CHECK(f.changed.layer(l) == f.gen.layer(l));
  CHECK(f.pairs[0].target.data == forward(f.changed, f.pairs[0].z).data);
  const fs::path dir = fs::temp_directory_path() / "remem-test-pairs";
  fs::remove_all(dir);
  save_discovery_pairs(dir, f.pairs);
  const auto back = load_discovery_pairs(dir);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].z == f.pairs[i].z);
    CHECK(back[i].target.data == f.pairs[i].target.data);
    CHECK(back[i].mask == f.pairs[i].mask);
  }
  fs::remove_all(dir);
  CHECK(discovery_fixture_config().iterations == 301);
}

}  // TEST_SUITE
