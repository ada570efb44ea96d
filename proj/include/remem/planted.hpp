#pragma once

// Fixture generators with known rules stored in one memory layer.
//
// Layout (latent 32, base 4x4):
//   layer 1  3x3 tanh,  up 1 ->  4x4: per-rule gate channels that saturate to +1
//            at one corner cell when the rule fires for a latent, a constant
//            channel, and random texture channels
//   layer 2  3x3 relu,  up 2 ->  8x8: concept channels that hold the rule key at
//            a single isolated cell of the firing corner, texture channels
//            silenced around every firing corner
//   layer 3  3x3 leaky, up 1 ->  8x8: the memory layer, fit to (key -> value)
//   layer 4  3x3 tanh,  up 4 -> 32x32
// so the key at a rule's location is exactly the planted key and the memory
// layer's output patch there is exactly the planted value.

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "remem/assocmem.hpp"
#include "remem/generator.hpp"
#include "remem/rewrite.hpp"

namespace remem {

struct PlantedRule {
  int id = 0;
  Location corner;    // layer-1 cell
  Location location;  // memory-layer cell holding the key
  std::uint64_t seed = 0;  // first latent seed for which only this rule fires at its corner
  Vector key;
  Vector value;  // AssocView row order
  Box footprint;  // image pixels reached by the value patch
  Tensor motif;   // isolated render of the value patch cropped to footprint
};

struct PlantedManifest {
  std::uint64_t seed = 0;
  int memory_layer = 3;
  std::vector<PlantedRule> rules;

  nlohmann::json to_json() const;
  static PlantedManifest from_json(const nlohmann::json& j);
};

struct PlantedGenerator {
  Generator gen;
  PlantedManifest manifest;
};

inline constexpr int kPlantedMemoryLayer = 3;

/// n_rules must be in 1..32. Rule r sits at corner r mod 4.
PlantedGenerator build_planted_generator(std::uint64_t seed, int n_rules);

void save_planted(const std::filesystem::path& path, const PlantedGenerator& p);
PlantedGenerator load_planted(const std::filesystem::path& path);

/// Cells of a key map whose key matches `key` within tol in max-norm.
std::vector<Location> find_key_occurrences(const Tensor& keys, const Vector& key, double tol = 1e-4);

/// Isolated render of a value patch written at `location` of an otherwise zero map.
Tensor render_value_patch(const Generator& gen, int layer, const Vector& value, Location location);

/// Random desk generator plus its copy with a rank-1 change at `layer`;
/// the pairs are renders of the changed copy, unmasked.
struct DiscoveryFixture {
  Generator gen;
  Generator changed;
  int layer = 0;
  std::vector<DiscoveryPair> pairs;
};

DiscoveryFixture build_discovery_fixture(std::uint64_t seed, int layer = 2, int n_pairs = 4);

/// Optimizer settings under which discovery separates the layers of the fixture.
OptimConfig discovery_fixture_config();

/// One GTF file per pair (pair-NNN.gtf, kind "discovery_pair").
void save_discovery_pairs(const std::filesystem::path& dir, const std::vector<DiscoveryPair>& pairs);
std::vector<DiscoveryPair> load_discovery_pairs(const std::filesystem::path& dir);

}  // namespace remem
