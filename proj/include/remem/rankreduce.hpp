#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "remem/assocmem.hpp"

namespace remem {

struct KeySource {
  std::uint64_t seed = 0;
  Location location;
};

struct ContextSelection {
  Matrix keys;  // N x T
  std::vector<KeySource> sources;
  int count() const { return static_cast<int>(keys.cols()); }
};

/// Rank-S basis of the allowed row space of a weight change.
struct DirectionSet {
  Matrix d;  // N x S, unit-norm columns
  std::string context_hash;
  std::string stats_hash;
  int rank() const { return static_cast<int>(d.cols()); }
};

/// K' = Z K_ctx.
Matrix whiten_context(const Matrix& k_ctx, const KeyStats& stats);

/// (1/2t) tr(K'^T K') + (n/2t) log 2 pi.
double context_information(const Matrix& k_whitened, int n, int t);

/// D_S = Z Q_S with Q_S the top-S eigenvectors of K' K'^T, columns normalized.
DirectionSet reduce_context(const Matrix& k_ctx, const KeyStats& stats, int s);

struct AxisScores {
  Vector scores;           // score_i = sum over columns of k_i^2 / sigma_i^2
  std::vector<int> order;  // unit indices by descending score, ties by index
};

AxisScores axis_aligned_scores(const Matrix& k_ctx, const Vector& sigma);

/// Hash of a double matrix's shape and bytes.
std::string matrix_hash(const Matrix& m);

void save_direction_set(const std::filesystem::path& path, const DirectionSet& ds);
DirectionSet load_direction_set(const std::filesystem::path& path);

}  // namespace remem
