#pragma once

// Copy / Paste / Context edits: session files, mask handling, and the
// pipeline from a session to an edited generator.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "remem/assocmem.hpp"
#include "remem/planted.hpp"
#include "remem/rankreduce.hpp"
#include "remem/rewrite.hpp"

namespace remem {

/// Run-length encoding of a row-major boolean grid: alternating run lengths
/// starting with a (possibly empty) run of false.
std::vector<int> rle_encode(const std::vector<std::uint8_t>& cells);
std::vector<std::uint8_t> rle_decode(const std::vector<int>& runs, std::size_t size);

/// Boolean grid at image resolution attached to a latent seed.
struct RegionMask {
  std::uint64_t seed = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;  // row-major

  int count() const;
  bool any() const { return count() > 0; }
  bool at(int y, int x) const { return cells[static_cast<std::size_t>(y) * width + x] != 0; }

  static RegionMask from_box(std::uint64_t seed, int height, int width, const Box& box);
  nlohmann::json to_json() const;
  static RegionMask from_json(const nlohmann::json& j);
  bool operator==(const RegionMask&) const = default;
};

struct GridMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;
  bool at(int y, int x) const { return cells[static_cast<std::size_t>(y) * width + x] != 0; }
  int count() const;
  /// Tight bounding box of the true cells.
  Box bounding_box() const;
};

/// A cell is set when at least half of its pixels are; if that leaves the
/// grid empty, the cell with the largest coverage is set. Empty masks are rejected.
GridMask downsample_mask(const RegionMask& mask, int grid_h, int grid_w);

struct PastePlacement {
  std::uint64_t seed = 0;
  Location offset;  // top-left layer cell of the pasted box
  bool operator==(const PastePlacement&) const = default;
};

enum class EditMethod { lambda, projected };

struct StatsSpec {
  int samples = 256;
  std::uint64_t seed = 0;
  bool operator==(const StatsSpec&) const = default;
};

struct EditSession {
  static constexpr int kVersion = 1;
  std::string model;
  int layer = 0;
  int rank = 1;
  RegionMask copy;
  PastePlacement paste;
  std::vector<RegionMask> context;
  StatsSpec stats;
  OptimConfig config;
  EditMethod method = EditMethod::lambda;
  bool fill_outside_mask = false;  // true: off-mask cells of the box keep the paste target's own values

  /// Structural checks that need no generator.
  void validate() const;
  nlohmann::json to_json() const;
  static EditSession from_json(const nlohmann::json& j);
  static EditSession load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  bool operator==(const EditSession&) const = default;
};

struct CopyValue {
  Tensor v_star;                    // out_ch x box.h x box.w, post-activation features
  Box box;                          // layer cells of the copy source
  std::vector<std::uint8_t> mask;   // box cells covered by the copy mask
};

CopyValue extract_copy_value(const Generator& gen, const EditSession& session);

struct PasteTarget {
  Tensor k_star;   // N x (h + 2 ry) x (w + 2 rx) keys, zero outside the grid
  Box box;         // layer cells receiving the copied values
  Location window_origin;  // box origin inside the key grid
};

/// Keys of the paste latent under the placed box, widened by the kernel radius.
PasteTarget make_paste_target(const Generator& gen, const EditSession& session, int box_h, int box_w);

/// Masked patch objective for the session: copied values at the paste box.
PatchProblem make_patch_problem(const Generator& gen, const EditSession& session, const CopyValue& copy,
                                const PasteTarget& target);
PatchProblem make_patch_problem(const Generator& gen, const EditSession& session);

/// One key per set cell of each context mask; falls back to the paste box
/// cells when the session has no context masks.
ContextSelection collect_context_keys(const Generator& gen, const EditSession& session);

struct ApplyOptions {
  std::filesystem::path cache_dir;   // key statistics cache; empty disables
  std::vector<std::uint64_t> render_seeds;  // before/after renders; empty means the session's seeds
  int iterations_override = 0;       // > 0 replaces config.iterations (previews)
};

struct EditOutcome {
  Generator generator;
  EditResult result;
  DirectionSet directions;
  std::vector<std::uint64_t> render_seeds;
  std::vector<Tensor> before;
  std::vector<Tensor> after;
};

/// stats -> context keys -> D_S -> constrained optimization -> new generator.
/// Errors are rethrown with the failing stage named.
EditOutcome apply_edit(const Generator& gen, const EditSession& session, const ApplyOptions& options = {});

/// Seeds referenced by the session (copy, paste, context), deduplicated in order.
std::vector<std::uint64_t> session_seeds(const EditSession& session);

struct RelevanceEntry {
  std::uint64_t seed = 0;
  double score = 0.0;  // max over locations of ||D_S^T k||
  Location location;
  int rank = 0;        // 1-based competition rank; ties share the best rank
};

/// Scores seeds first_seed .. first_seed + n - 1 and sorts by descending score.
std::vector<RelevanceEntry> relevance(const Generator& gen, int layer, const Matrix& d_s, std::uint64_t first_seed,
                                      int n);

/// Paste latent rendered with the copied values written into the paste box
/// (masked cells only): the image the edit is asked to produce.
Tensor pasted_target_image(const Generator& gen, const EditSession& session);

/// Session that copies rule `from`'s value patch onto rule `to`'s location,
/// with `n_context` latents in which `to` fires as context.
EditSession planted_transfer_session(const PlantedGenerator& planted, const std::string& model, int from, int to,
                                     int n_context);

/// Keys of the first `n_keys` occurrences of a planted rule over latent seeds 0, 1, ...
ContextSelection planted_rule_context(const PlantedGenerator& planted, int rule, int n_keys);

/// Rank-S edit that maps the rule's key to the layer's response to a zero key,
/// erasing the rule's value patch wherever the key occurs.
EditResult erase_planted_rule(const PlantedGenerator& planted, int rule, const KeyStats& stats, int rank,
                              int n_context, const OptimConfig& cfg);

/// The top `fraction` of input units of the memory layer by axis-aligned
/// score over the rule's context keys (at least one unit).
std::vector<int> top_scored_units(const PlantedGenerator& planted, int rule, const KeyStats& stats, double fraction,
                                  int n_context);

/// Generator for a session's model id: `<models_dir>/<id>.gtf`, or the id itself when it names a .gtf file.
std::filesystem::path resolve_model(const std::string& model, const std::filesystem::path& models_dir);

}  // namespace remem
