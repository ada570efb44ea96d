#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "remem/generator.hpp"
#include "remem/planted.hpp"

namespace remem {

/// Frechet distance between Gaussians fit to crops of isolated-patch renders
/// and to same-sized random crops of full renders, on raw pixels. One sample
/// per latent seed; the patch location and the full-render crop position are
/// derived from the seed. crop_size 0 uses the patch's own image footprint.
double patch_independence_score(const Generator& gen, int layer, const std::vector<std::uint64_t>& seeds,
                                int crop_size = 0);
double patch_independence_score(const Generator& gen, int layer, int n_samples, std::uint64_t seed,
                                int crop_size = 0);

/// Side length in pixels of the default crop for layer L.
int default_crop_size(const Generator& gen, int layer);

struct LayerScore {
  int layer = 0;
  double score = 0.0;
  bool recommended = false;
};

struct LayerReport {
  std::vector<LayerScore> layers;
  int n_samples = 0;
  std::uint64_t seed = 0;
  double median = 0.0;

  std::vector<int> recommended() const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Scores every layer; layers scoring at or below the median are recommended.
LayerReport layer_selection_report(const Generator& gen, int n_samples, std::uint64_t seed, int crop_size = 0);

struct MaskedChange {
  double mean = 0.0;
  double max = 0.0;
  std::vector<double> per_image;
  nlohmann::json to_json() const;
};

/// Mean over off-mask pixels of the per-pixel RGB L2 change, per image, then
/// averaged. Masks mark the region where change is expected (H * W flags).
MaskedChange masked_change(const std::vector<Tensor>& before, const std::vector<Tensor>& after,
                           const std::vector<std::vector<std::uint8_t>>& masks);

/// Pixel mask (H * W) of the image footprints of every occurrence of `key`
/// at `layer` for latent z.
std::vector<std::uint8_t> occurrence_mask(const Generator& gen, int layer, const Latent& z, const Vector& key);

struct Efficacy {
  double fraction = 0.0;
  int changed = 0;
  int locations = 0;
  nlohmann::json to_json() const;
};

/// Over latent seeds first_seed .. first_seed + n - 1, the fraction of the
/// rule's occurrences whose rendered footprint in gen_after is closer to the
/// render with the rule's value replaced by v_new than to the original render.
Efficacy efficacy_planted_rule(const Generator& gen_before, const Generator& gen_after,
                               const PlantedManifest& manifest, int rule, const Vector& v_new,
                               std::uint64_t first_seed, int n);

}  // namespace remem
