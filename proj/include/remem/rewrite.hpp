#pragma once

// Weight optimization for edits and baselines: Lambda-parameterized rank-S
// updates through a layer's bias and nonlinearity, projected gradient
// descent, single-layer and whole-generator fine-tuning, unit zeroing, and
// rank-constrained rule discovery across layers.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "remem/assocmem.hpp"
#include "remem/generator.hpp"

namespace remem {

enum class OptimizerKind { adam, plain_gd };

const char* to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct OptimConfig {
  double learning_rate = 0.05;
  int iterations = 2001;
  int project_every = 10;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
  bool operator==(const OptimConfig&) const = default;
};

/// Defaults for the whole-generator fine-tuning baseline (learning rate 1e-4).
OptimConfig finetune_all_defaults();

/// Weights returned by the optimizers are the lowest-loss iterate that lies
/// in the constraint set, which is the last one unless the run oscillated.
struct EditResult {
  int layer = 0;
  Matrix w1;                        // M x N, for single-layer edits
  Matrix lambda;                    // M x S, for Lambda-parameterized edits
  std::optional<Generator> theta1;  // for whole-generator fine-tuning
  std::vector<double> loss_trace;   // loss before each iteration's update
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double constraint_residual = 0.0;  // RMS of the target error at the final weights
  double wall_seconds = 0.0;
  OptimConfig config;

  nlohmann::json to_json() const;
};

/// Masked squared error of one layer (conv + bias + nonlinearity) evaluated
/// on a grid of keys, against a target window of its outputs. Everything is
/// in double precision.
class PatchProblem {
 public:
  /// keys: N x KH x KW key grid. The output window has the target's spatial
  /// size and starts at `window_origin` in key-grid coordinates. mask holds
  /// one flag per window cell (row-major); empty means all cells count.
  PatchProblem(const LayerSpec& layer, const Tensor& keys, Location window_origin, const Tensor& target,
               std::vector<std::uint8_t> mask = {});

  /// A single key whose kh x kw output patch must match v_star (AssocView row order).
  static PatchProblem single_key(const LayerSpec& layer, const Vector& k_star, const Vector& v_star);

  /// Mean squared error over masked cells and all channels; fills grad (M x N) when given.
  double loss(const Matrix& w, Matrix* grad = nullptr) const;
  /// Layer outputs on the window (out_ch x H x W) for weights w.
  Tensor evaluate(const Matrix& w) const;

  int out_channels() const { return out_ch_; }
  int kh() const { return kh_; }
  int kw() const { return kw_; }
  int key_dim() const { return static_cast<int>(keys_.rows()); }
  int value_dim() const { return out_ch_ * kh_ * kw_; }
  const Matrix& keys() const { return keys_; }
  int masked_cells() const { return masked_cells_; }
  /// Mean squared target value over masked cells and channels.
  double target_energy() const;
  /// Losses at or below this count as already solved (float round-off of the target).
  double converged_loss() const { return 1e-12 * (1.0 + target_energy()); }

 private:
  void pre_activation(const Matrix& w, std::vector<double>& pre) const;

  Matrix keys_;  // N x (KH * KW), column q = key at (q / key_w_, q % key_w_)
  int key_h_ = 0, key_w_ = 0;
  Location origin_;
  int win_h_ = 0, win_w_ = 0;
  std::vector<double> target_;  // out_ch x win_h x win_w
  std::vector<std::uint8_t> mask_;
  int masked_cells_ = 0;
  std::vector<double> bias_;
  Nonlinearity act_ = Nonlinearity::identity;
  int out_ch_ = 0, kh_ = 1, kw_ = 1;
};

/// Lambda_1 = argmin loss(W0 + Lambda d^T).
EditResult optimize_lambda_single(const PatchProblem& f, const Matrix& w0, const Vector& d, const OptimConfig& cfg);

/// Lambda_S = argmin loss(W0 + Lambda D_S^T).
EditResult optimize_lambda_multi(const PatchProblem& f, const Matrix& w0, const Matrix& d_s, const OptimConfig& cfg);

/// Free optimization of W, projecting W - W0 onto the row space span(D_S)
/// every project_every steps and once after the loop.
EditResult projected_gd(const PatchProblem& f, const Matrix& w0, const Matrix& d_s, const OptimConfig& cfg);

/// Free optimization of every entry of the layer's weights.
EditResult finetune_layer_unconstrained(const PatchProblem& f, const Matrix& w0, const OptimConfig& cfg);

/// Output channels `units` have weights and bias zeroed.
LayerSpec zero_units(const LayerSpec& layer, const std::vector<int>& units);
Generator zero_units(const Generator& gen, int layer, const std::vector<int>& units);

// ---- whole-generator gradients -------------------------------------------

struct ForwardTrace {
  int from_layer = 0;
  std::vector<Tensor> conv_inputs;  // one per layer from_layer+1 .. end
  std::vector<Tensor> pre;          // pre-activations
  Tensor output;
};

/// Runs layers from_layer+1 .. end on `start` (the output of layer from_layer;
/// the broadcast latent when from_layer = 0), keeping what backprop needs.
ForwardTrace forward_trace(const Generator& gen, const Tensor& start, int from_layer);

struct GeneratorGrads {
  std::vector<Tensor> weight;  // indexed by layer - 1; empty for layers without grads
  std::vector<Tensor> bias;
};

/// Backpropagates grad_output through the traced layers, producing parameter
/// gradients for layers lowest .. end (lowest > trace.from_layer). Gradients
/// are added to `grads`, which is sized on first use.
void backward_trace(const Generator& gen, const ForwardTrace& trace, Tensor grad_output, int lowest,
                    GeneratorGrads& grads);

struct Exemplar {
  Latent z;
  Tensor target;  // 3 x H x W
};

/// Baseline: all weights trained on E_z ||G(z) - G0(z)||^2 + lambda * mean_i ||G(z_i) - x*_i||^2,
/// with `batch` fresh latents per step. Zero iterations return the input unchanged.
EditResult finetune_all(const Generator& gen, const std::vector<Exemplar>& exemplars, double lambda,
                        const OptimConfig& cfg, int batch = 4);

struct DiscoveryPair {
  Latent z;
  Tensor target;                    // 3 x H x W
  std::vector<std::uint8_t> mask;   // H * W pixel flags, row-major
};

struct LayerLoss {
  int layer = 0;
  double loss = 0.0;
  bool diverged = false;
  std::string error;
  std::vector<double> loss_trace;
};

struct DiscoveryResult {
  int best_layer = 0;
  Matrix delta;  // AssocView-shaped change for best_layer
  std::vector<LayerLoss> layers;
  nlohmann::json to_json() const;
};

/// Optimizes a weight change at each candidate layer (all layers when empty),
/// truncating it to `rank` by SVD every project_every iterations and after the
/// loop, and returns the layer with the lowest final masked loss.
DiscoveryResult rank_constrained_discovery(const Generator& gen, const std::vector<DiscoveryPair>& pairs, int rank,
                                           const OptimConfig& cfg, std::vector<int> candidate_layers = {});

/// Masked mean squared error between an image and a target (mask over pixels).
double masked_pixel_mse(const Tensor& image, const Tensor& target, const std::vector<std::uint8_t>& mask);

/// Generator with layer L's weights replaced by the AssocView matrix w.
Generator with_layer_weights(const Generator& gen, int layer, const Matrix& w);

}  // namespace remem
