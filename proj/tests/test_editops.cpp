#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "remem/editops.hpp"
#include "remem/error.hpp"
#include "remem/gtf.hpp"

using namespace remem;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = fs::path(REMEM_FIXTURE_DIR);

const PlantedGenerator& planted() {
  static const PlantedGenerator p = load_planted(kFixtures / "models" / "planted.gtf");
  return p;
}

RegionMask pixel_mask(int h, int w, std::vector<std::uint8_t> cells) { return {0, h, w, std::move(cells)}; }

// Squared difference inside the rule's footprint between `gen`'s render and
// the base generator's render with the rule key removed from the key map.
double motif_energy(const Generator& gen, const PlantedGenerator& base, const PlantedRule& rule) {
  const int layer = base.manifest.memory_layer;
  const Latent z = latent_for_seed(rule.seed, base.gen.latent_dim);
  LayerFeatures f = features(base.gen, z, layer);
  for (int c = 0; c < f.keys.channels(); ++c) f.keys.data.at(c, rule.location.y, rule.location.x) = 0.0f;
  const Tensor ref = continue_from(base.gen, run_conv(base.gen.layer(layer), f.keys.data), layer);
  const Tensor a = crop(forward(gen, z), rule.footprint), b = crop(ref, rule.footprint);
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) e += std::pow(a.data[i] - b.data[i], 2);
  return e;
}

}  // namespace

TEST_SUITE("editops") {

TEST_CASE("run-length encoding round-trips") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::vector<std::uint8_t> cells(37 + s);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = counter_uniform(s, i) < 0.3 ? 1 : 0;
    CHECK(rle_decode(rle_encode(cells), cells.size()) == cells);
  }
  CHECK(rle_encode({1, 1, 0}) == std::vector<int>{0, 2, 1});
  CHECK(rle_decode({3}, 3) == std::vector<std::uint8_t>{0, 0, 0});
  CHECK_THROWS_AS(rle_decode({}, 3), ValidationError);
  CHECK_THROWS_AS(rle_decode({2, 5}, 3), ValidationError);
}

TEST_CASE("downsample_mask") {
  SUBCASE("full mask") {
    const GridMask g = downsample_mask(pixel_mask(32, 32, std::vector<std::uint8_t>(1024, 1)), 8, 8);
    CHECK(g.count() == 64);
  }
  SUBCASE("single pixel sets its containing cell") {
    std::vector<std::uint8_t> cells(1024, 0);
    cells[static_cast<std::size_t>(13) * 32 + 22] = 1;
    const GridMask g = downsample_mask(pixel_mask(32, 32, cells), 8, 8);
    CHECK(g.count() == 1);
    CHECK(g.at(3, 5));
    CHECK(g.bounding_box() == Box{3, 5, 1, 1});
  }
  SUBCASE("checkerboard at 2x matches pixel counting") {
    std::vector<std::uint8_t> cells(16 * 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) cells[static_cast<std::size_t>(y) * 16 + x] = (y + x) % 2;
    CHECK(downsample_mask(pixel_mask(16, 16, cells), 8, 8).cells == oracle::coverage_downsample(cells, 16, 16, 8, 8));
  }
  SUBCASE("random masks match pixel counting") {
    for (std::uint64_t s = 0; s < 30; ++s) {
      std::vector<std::uint8_t> cells(32 * 32);
      const double p = 0.05 + 0.03 * static_cast<double>(s);
      for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = counter_uniform(100 + s, i) < p ? 1 : 0;
      if (std::none_of(cells.begin(), cells.end(), [](auto c) { return c != 0; })) cells[0] = 1;
      CHECK(downsample_mask(pixel_mask(32, 32, cells), 8, 8).cells == oracle::coverage_downsample(cells, 32, 32, 8, 8));
    }
  }
  SUBCASE("empty mask") {
    CHECK_THROWS_AS(downsample_mask(pixel_mask(4, 4, std::vector<std::uint8_t>(16, 0)), 2, 2), ValidationError);
  }
}

TEST_CASE("session JSON round-trip and committed sessions") {
  for (const auto& entry : fs::directory_iterator(kFixtures / "sessions")) {
    CAPTURE(entry.path().string());
    const EditSession s = EditSession::load(entry.path());
    CHECK(EditSession::from_json(s.to_json()) == s);
    CHECK_NOTHROW(s.validate());
  }
  EditSession bad = EditSession::load(kFixtures / "sessions" / "planted-transfer-1-0.json");
  bad.rank = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(EditSession::load(kFixtures / "sessions" / "missing.json"), ValidationError);
}

TEST_CASE("copy, paste and context on the planted fixture") {
  const PlantedGenerator& p = planted();
  const EditSession s = planted_transfer_session(p, "planted", 1, 0, 4);
  const PlantedRule& from = p.manifest.rules[1];
  const PlantedRule& to = p.manifest.rules[0];

  SUBCASE("copied values are the planted value patch") {
    const CopyValue c = extract_copy_value(p.gen, s);
    CHECK(c.box == Box{from.location.y - 1, from.location.x - 1, 3, 3});
    REQUIRE(c.v_star.size() == static_cast<std::size_t>(from.value.size()));
    for (Eigen::Index i = 0; i < from.value.size(); ++i) CHECK(c.v_star.data[i] == doctest::Approx(from.value(i)).epsilon(1e-5));
    CHECK(extract_copy_value(p.gen, s).v_star.data == c.v_star.data);
  }
  SUBCASE("paste keys hold the target rule's key") {
    const PasteTarget t = make_paste_target(p.gen, s, 3, 3);
    CHECK(t.box == Box{to.location.y - 1, to.location.x - 1, 3, 3});
    CHECK((key_at(t.k_star, {t.window_origin.y + 1, t.window_origin.x + 1}) - to.key).lpNorm<Eigen::Infinity>() < 1e-5);
    EditSession off = s;
    off.paste.offset = {7, 7};
    CHECK_THROWS_AS(make_paste_target(p.gen, off, 3, 3), ValidationError);
  }
  SUBCASE("full-grid paste recovers the whole key map") {
    EditSession full = s;
    full.copy = RegionMask::from_box(full.copy.seed, 32, 32, {0, 0, 32, 32});
    full.paste.offset = {0, 0};
    const PasteTarget t = make_paste_target(p.gen, full, 8, 8);
    const FeatureMap keys = features(p.gen, latent_for_seed(full.paste.seed, 32), 3).keys;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK(key_at(t.k_star, {y + t.window_origin.y, x + t.window_origin.x}) == key_at(keys, {y, x}));
  }
  SUBCASE("context columns are direct key lookups") {
    const ContextSelection ctx = collect_context_keys(p.gen, s);
    int col = 0;
    for (const auto& m : s.context) {
      const FeatureMap keys = features(p.gen, latent_for_seed(m.seed, 32), 3).keys;
      const GridMask g = downsample_mask(m, 8, 8);
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          if (g.at(y, x)) CHECK(ctx.keys.col(col++) == key_at(keys, {y, x}));
    }
    CHECK(col == ctx.count());
    EditSession dup = s;
    dup.context.push_back(dup.context[0]);
    CHECK(collect_context_keys(p.gen, dup).count() == ctx.count() + 1);
    EditSession none = s;
    none.context.clear();
    CHECK(collect_context_keys(p.gen, none).count() == 9);
  }
}

TEST_CASE("apply_edit") {
  const PlantedGenerator& p = planted();
  const EditSession s = planted_transfer_session(p, "planted", 1, 0, 4);
  const EditOutcome a = apply_edit(p.gen, s);

  SUBCASE("only the memory layer changes, by a rank-one delta") {
    for (int l : {1, 2, 4}) CHECK(a.generator.layer(l) == p.gen.layer(l));
    const Matrix delta = as_assoc_view(a.generator.layer(3)).matrix - as_assoc_view(p.gen.layer(3)).matrix;
    CHECK(linalg::numerical_rank(delta, 1e-6) == 1);
    CHECK(a.result.final_loss < a.result.initial_loss);
    CHECK(a.before.size() == session_seeds(s).size());
  }
  SUBCASE("deterministic") {
    CHECK(gtf::generator_hash(apply_edit(p.gen, s).generator) == gtf::generator_hash(a.generator));
  }
  SUBCASE("relevance over 1000 samples puts the context seeds in the top decile") {
    const auto rel = relevance(p.gen, 3, a.directions.d, 0, 1000);
    REQUIRE(rel.size() == 1000);
    for (std::size_t i = 1; i < rel.size(); ++i) CHECK(rel[i - 1].score >= rel[i].score);
    for (const auto& m : s.context) {
      const auto it = std::find_if(rel.begin(), rel.end(), [&](const RelevanceEntry& e) { return e.seed == m.seed; });
      REQUIRE(it != rel.end());
      CHECK(it->rank <= 100);
    }
  }
  SUBCASE("the 12 most relevant locations render the copied motif") {
    const PlantedRule& from = p.manifest.rules[1];
    const PlantedRule& to = p.manifest.rules[0];
    const auto rel = relevance(p.gen, 3, a.directions.d, 0, 200);
    for (std::size_t i = 0; i < 12; ++i) {
      const Location loc = rel[i].location;
      const Box fp = image_footprint(p.gen, 3, {loc.y - 1, loc.x - 1, 3, 3});
      const Latent z = latent_for_seed(rel[i].seed, 32);
      const Tensor got = crop(render_isolated_patch(a.generator, features(a.generator, z, 3).values, loc, 3), fp);
      const Tensor want = crop(render_value_patch(p.gen, 3, from.value, loc), fp);
      const Tensor old = crop(render_value_patch(p.gen, 3, to.value, loc), fp);
      double d_new = 0.0, d_old = 0.0;
      for (std::size_t j = 0; j < got.size(); ++j) {
        d_new += std::pow(got.data[j] - want.data[j], 2);
        d_old += std::pow(got.data[j] - old.data[j], 2);
      }
      CAPTURE(rel[i].seed);
      CHECK(d_new < d_old);
    }
  }
}

TEST_CASE("copying a patch onto itself leaves the generator unchanged") {
  const PlantedGenerator& p = planted();
  EditSession s = planted_transfer_session(p, "planted", 1, 0, 4);
  const PlantedRule& from = p.manifest.rules[1];
  s.paste = {from.seed, {from.location.y - 1, from.location.x - 1}};
  s.context.clear();
  const EditOutcome o = apply_edit(p.gen, s);
  CHECK(o.result.lambda.norm() < 1e-9);
  CHECK(o.generator == p.gen);
}

TEST_CASE("pipeline errors name their stage") {
  const PlantedGenerator& p = planted();
  EditSession s = planted_transfer_session(p, "planted", 1, 0, 1);
  s.rank = 5;
  CHECK_THROWS_WITH_AS(apply_edit(p.gen, s), doctest::Contains("rank reduction"), ValidationError);
  EditSession bad_layer = planted_transfer_session(p, "planted", 1, 0, 1);
  bad_layer.layer = 9;
  CHECK_THROWS_WITH_AS(apply_edit(p.gen, bad_layer), doctest::Contains("session"), ValidationError);
  EditSession empty = planted_transfer_session(p, "planted", 1, 0, 1);
  std::fill(empty.copy.cells.begin(), empty.copy.cells.end(), 0);
  CHECK_THROWS_AS(apply_edit(p.gen, empty), ValidationError);
}

TEST_CASE("zeroing the top-scored units suppresses the planted motif") {
  const PlantedGenerator& p = planted();
  const KeyStats stats = estimate_key_stats(p.gen, 3, 64, 0);
  for (const auto& rule : p.manifest.rules) {
    CAPTURE(rule.id);
    const std::vector<int> units = top_scored_units(p, rule.id, stats, 0.3, 4);
    CHECK(units.size() == 10);
    const Generator zeroed = zero_units(p.gen, 2, units);
    const double before = motif_energy(p.gen, p, rule), after = motif_energy(zeroed, p, rule);
    CHECK(before > 0.0);
    CHECK(after < 0.5 * before);
  }
}

TEST_CASE("resolve_model") {
  const fs::path models = kFixtures / "models";
  CHECK(resolve_model("planted", models) == models / "planted.gtf");
  CHECK(resolve_model((models / "watermark.gtf").string(), "/nonexistent") == models / "watermark.gtf");
  CHECK_THROWS_WITH_AS(resolve_model("nope", models), doctest::Contains("nope"), ValidationError);
}

}  // TEST_SUITE
