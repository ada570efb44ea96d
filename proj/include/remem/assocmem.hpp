#pragma once

// A conv layer viewed as a linear associative memory. The weight tensor
// (out x in x kh x kw) becomes an M x N matrix with M = out * kh * kw and
// N = in, so that W k is the kh x kw output patch written by one input
// location holding key k.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "remem/generator.hpp"
#include "remem/linalg.hpp"

namespace remem {

using linalg::Matrix;
using linalg::Vector;

struct AssocView {
  Matrix matrix;  // M x N
  int out_channels = 0;
  int kh = 1;
  int kw = 1;

  int rows() const { return static_cast<int>(matrix.rows()); }
  int cols() const { return static_cast<int>(matrix.cols()); }
  int patch_area() const { return kh * kw; }
  /// Row of output channel o at patch offset (py, px), where (kh/2, kw/2) is the key's own cell.
  int row(int o, int py, int px) const { return (o * kh + py) * kw + px; }
};

AssocView as_assoc_view(const LayerSpec& layer);
AssocView as_assoc_view(const Tensor& weight);
/// Inverse reshape back to an out x in x kh x kw weight tensor.
Tensor to_layer(const AssocView& view);

Vector recall(const AssocView& view, const Vector& k);

/// W = sum_i v_i k_i^T for unit-norm, mutually orthogonal keys (columns of `keys`).
AssocView build_orthogonal_memory(const Matrix& keys, const Matrix& values, int kh = 1, int kw = 1,
                                  double tol = 1e-6);

/// Least-squares memory: argmin_W sum_i ||v_i - W k_i||^2.
AssocView fit_memory(const Matrix& keys, const Matrix& values, int kh = 1, int kw = 1);

/// Second-moment statistics of the keys entering one layer.
struct KeyStats {
  int layer = 0;
  int n_samples = 0;
  std::uint64_t seed = 0;
  std::int64_t n_keys = 0;
  double epsilon = 0.0;
  Matrix second_moment;  // unregularized (1/T) sum k k^T
  Matrix c;              // second_moment + epsilon I
  linalg::EigenDecomposition eig;
  Matrix c_inv;
  Matrix z;  // C^{-1/2}

  int dim() const { return static_cast<int>(c.rows()); }
  /// Per-channel standard deviations sqrt(C_ii) of the unregularized moment.
  Vector sigma() const;
};

inline constexpr double kDefaultEpsilonScale = 1e-4;

/// Builds the derived quantities from a raw second moment. The regularizer
/// is epsilon_scale * mean(diag C).
KeyStats key_stats_from_moment(const Matrix& second_moment, double epsilon_scale = kDefaultEpsilonScale);

/// C = (1/T) sum over every location of every sampled key map of k k^T,
/// rounded to float32.
KeyStats estimate_key_stats(const Generator& gen, int layer, int n_samples, std::uint64_t seed,
                            double epsilon_scale = kDefaultEpsilonScale);

void save_key_stats(const std::filesystem::path& path, const KeyStats& stats);
KeyStats load_key_stats(const std::filesystem::path& path);

/// Cache file name for (generator, layer, samples, seed).
std::string key_stats_cache_name(const Generator& gen, int layer, int n_samples, std::uint64_t seed);

/// Loads from `cache_dir` when present, otherwise estimates and stores.
/// An empty cache_dir disables caching.
KeyStats cached_key_stats(const Generator& gen, int layer, int n_samples, std::uint64_t seed,
                          const std::filesystem::path& cache_dir);

/// d = C^{-1} k_star.
Vector update_direction(const KeyStats& stats, const Vector& k_star);

struct LinearInsert {
  AssocView w1;
  Vector lambda;  // M
  Vector d;       // N
};

/// Exact rank-one insertion: W1 = W0 + Lambda d^T with W1 k_star = v_star,
/// minimizing the error on the stored keys measured by C.
LinearInsert insert_linear_closed_form(const AssocView& view, const KeyStats& stats, const Vector& k_star,
                                       const Vector& v_star);

/// Key vector at one location of a key map.
Vector key_at(const FeatureMap& keys, Location loc);
Vector key_at(const Tensor& keys, Location loc);

/// Flattened kh x kw x channels value patch centred on `loc` (zero outside the map),
/// in AssocView row order.
Vector value_patch(const Tensor& values, Location loc, int kh, int kw);

}  // namespace remem
