#include "remem/rewrite.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "remem/error.hpp"
#include "remem/rng.hpp"

namespace remem {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "plain_gd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "plain_gd") return OptimizerKind::plain_gd;
  throw ValidationError("unknown optimizer '" + s + "' (expected adam or plain_gd)");
}

void OptimConfig::validate() const {
  if (iterations < 1) throw ValidationError("config: iterations must be >= 1");
  if (project_every < 1) throw ValidationError("config: project_every must be >= 1");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ValidationError("config: learning_rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ValidationError("config: betas must be in [0, 1)");
}

nlohmann::json OptimConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"iterations", iterations}, {"project_every", project_every},
          {"optimizer", to_string(optimizer)}, {"beta1", beta1},         {"beta2", beta2},
          {"adam_epsilon", adam_epsilon},       {"seed", seed}};
}

OptimConfig OptimConfig::from_json(const nlohmann::json& j) {
  OptimConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.iterations = j.value("iterations", c.iterations);
    c.project_every = j.value("project_every", c.project_every);
    c.optimizer = optimizer_from_string(j.value("optimizer", std::string(to_string(c.optimizer))));
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

OptimConfig finetune_all_defaults() {
  OptimConfig c;
  c.learning_rate = 1e-4;
  return c;
}

nlohmann::json EditResult::to_json() const {
  nlohmann::json j = {{"layer", layer},
                      {"initial_loss", initial_loss},
                      {"final_loss", final_loss},
                      {"constraint_residual", constraint_residual},
                      {"iterations", loss_trace.size()},
                      {"loss_trace", loss_trace},
                      {"wall_seconds", wall_seconds},
                      {"config", config.to_json()}};
  if (lambda.size() > 0) j["lambda_shape"] = {lambda.rows(), lambda.cols()};
  if (w1.size() > 0) j["w1_shape"] = {w1.rows(), w1.cols()};
  return j;
}

namespace {

double act_value(double x, Nonlinearity a) {
  switch (a) {
    case Nonlinearity::identity: return x;
    case Nonlinearity::relu: return x > 0 ? x : 0.0;
    case Nonlinearity::leaky_relu: return x > 0 ? x : kLeakySlope * x;
    case Nonlinearity::tanh: return std::tanh(x);
  }
  return x;
}

double act_slope(double x, Nonlinearity a) {
  switch (a) {
    case Nonlinearity::identity: return 1.0;
    case Nonlinearity::relu: return x > 0 ? 1.0 : 0.0;
    case Nonlinearity::leaky_relu: return x > 0 ? 1.0 : kLeakySlope;
    case Nonlinearity::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

// Adam or plain gradient descent over a flat double array.
class Stepper {
 public:
  Stepper(const OptimConfig& cfg, Eigen::Index n) : cfg_(cfg), m_(Eigen::ArrayXd::Zero(n)), v_(Eigen::ArrayXd::Zero(n)) {}

  void step(double* params, const double* grad) {
    Eigen::Map<Eigen::ArrayXd> p(params, m_.size());
    Eigen::Map<const Eigen::ArrayXd> g(grad, m_.size());
    if (cfg_.optimizer == OptimizerKind::plain_gd) {
      p -= cfg_.learning_rate * g;
      return;
    }
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * g;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * g.square();
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    p -= cfg_.learning_rate * (m_ / c1) / ((v_ / c2).sqrt() + cfg_.adam_epsilon);
  }

 private:
  OptimConfig cfg_;
  Eigen::ArrayXd m_, v_;
  int t_ = 0;
};

void check_divergence(double loss, double initial, int iteration) {
  if (!std::isfinite(loss)) throw DivergenceError("optimization diverged: loss is not finite", iteration);
  if (loss > 1e6 * std::max(initial, 1e-12)) {
    throw DivergenceError("optimization diverged: loss " + std::to_string(loss) + " exceeds 1e6 x initial " +
                              std::to_string(initial),
                          iteration);
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Matrix row_space_projector(const Matrix& d_s) {
  // P = D (D^T D)^+ D^T, the orthogonal projector onto span(columns of D).
  return d_s * linalg::pseudoinverse(d_s.transpose() * d_s) * d_s.transpose();
}

void check_direction_set(const PatchProblem& f, const Matrix& w0, const Matrix& d_s) {
  if (w0.rows() != f.value_dim() || w0.cols() != f.key_dim()) throw ValidationError("edit: W0 shape does not match layer");
  if (d_s.rows() != f.key_dim() || d_s.cols() < 1) throw ValidationError("edit: direction set shape mismatch");
  if (!linalg::all_finite(d_s) || d_s.norm() == 0.0) throw ValidationError("edit: direction set is zero or non-finite");
}

}  // namespace

PatchProblem::PatchProblem(const LayerSpec& layer, const Tensor& keys, Location window_origin, const Tensor& target,
                           std::vector<std::uint8_t> mask)
    : origin_(window_origin), mask_(std::move(mask)), act_(layer.act) {
  out_ch_ = layer.out_channels();
  kh_ = layer.kh();
  kw_ = layer.kw();
  if (keys.rank() != 3 || keys.dim(0) != layer.in_channels()) throw ValidationError("patch: key grid channel mismatch");
  if (target.rank() != 3 || target.dim(0) != out_ch_) throw ValidationError("patch: target channel mismatch");
  key_h_ = keys.dim(1);
  key_w_ = keys.dim(2);
  win_h_ = target.dim(1);
  win_w_ = target.dim(2);
  keys_.resize(keys.dim(0), key_h_ * key_w_);
  for (int c = 0; c < keys.dim(0); ++c)
    for (int y = 0; y < key_h_; ++y)
      for (int x = 0; x < key_w_; ++x) keys_(c, y * key_w_ + x) = keys.at(c, y, x);
  target_.assign(target.data.begin(), target.data.end());
  const auto cells = static_cast<std::size_t>(win_h_) * win_w_;
  if (mask_.empty()) mask_.assign(cells, 1);
  if (mask_.size() != cells) throw ValidationError("patch: mask size does not match target window");
  for (auto m : mask_) masked_cells_ += m ? 1 : 0;
  if (masked_cells_ == 0) throw ValidationError("patch: mask selects no cells; the loss would be vacuous");
  bias_.assign(layer.bias.data.begin(), layer.bias.data.end());
  if (!linalg::all_finite(keys_)) throw ValidationError("patch: non-finite keys");
}

PatchProblem PatchProblem::single_key(const LayerSpec& layer, const Vector& k_star, const Vector& v_star) {
  const int o = layer.out_channels(), kh = layer.kh(), kw = layer.kw();
  if (k_star.size() != layer.in_channels()) throw ValidationError("single_key: k_star has wrong length");
  if (v_star.size() != static_cast<Eigen::Index>(o) * kh * kw) throw ValidationError("single_key: v_star has wrong length");
  Tensor keys({layer.in_channels(), 1, 1});
  for (int c = 0; c < layer.in_channels(); ++c) keys.data[c] = static_cast<float>(k_star(c));
  Tensor target({o, kh, kw});
  for (Eigen::Index i = 0; i < v_star.size(); ++i) target.data[i] = static_cast<float>(v_star(i));
  PatchProblem p(layer, keys, {-(kh / 2), -(kw / 2)}, target);
  // Keep the double-precision key and target rather than their float copies.
  p.keys_.col(0) = k_star;
  p.target_.assign(v_star.data(), v_star.data() + v_star.size());
  return p;
}

double PatchProblem::target_energy() const {
  const int cells = win_h_ * win_w_;
  double sum = 0.0;
  for (int o = 0; o < out_ch_; ++o)
    for (int c = 0; c < cells; ++c)
      if (mask_[static_cast<std::size_t>(c)]) {
        const double t = target_[static_cast<std::size_t>(o) * cells + c];
        sum += t * t;
      }
  return sum / (static_cast<double>(masked_cells_) * out_ch_);
}

void PatchProblem::pre_activation(const Matrix& w, std::vector<double>& pre) const {
  const Matrix p = w * keys_;
  const int cells = win_h_ * win_w_;
  pre.assign(static_cast<std::size_t>(out_ch_) * cells, 0.0);
  for (int o = 0; o < out_ch_; ++o)
    for (int c = 0; c < cells; ++c) pre[static_cast<std::size_t>(o) * cells + c] = bias_[o];
  const int ry = kh_ / 2, rx = kw_ / 2;
  for (int q = 0; q < key_h_ * key_w_; ++q) {
    const int ky = q / key_w_, kx = q % key_w_;
    for (int py = 0; py < kh_; ++py) {
      const int y = ky + py - ry - origin_.y;
      if (y < 0 || y >= win_h_) continue;
      for (int px = 0; px < kw_; ++px) {
        const int x = kx + px - rx - origin_.x;
        if (x < 0 || x >= win_w_) continue;
        for (int o = 0; o < out_ch_; ++o)
          pre[static_cast<std::size_t>(o) * cells + y * win_w_ + x] += p((o * kh_ + py) * kw_ + px, q);
      }
    }
  }
}

double PatchProblem::loss(const Matrix& w, Matrix* grad) const {
  if (w.rows() != value_dim() || w.cols() != key_dim()) throw ValidationError("patch: weight shape mismatch");
  std::vector<double> pre;
  pre_activation(w, pre);
  const int cells = win_h_ * win_w_;
  const double count = static_cast<double>(masked_cells_) * out_ch_;
  double total = 0.0;
  std::vector<double> gpre(pre.size(), 0.0);
  for (int o = 0; o < out_ch_; ++o)
    for (int c = 0; c < cells; ++c) {
      if (!mask_[c]) continue;
      const std::size_t i = static_cast<std::size_t>(o) * cells + c;
      const double r = act_value(pre[i], act_) - target_[i];
      total += r * r;
      gpre[i] = 2.0 * r / count * act_slope(pre[i], act_);
    }
  if (grad) {
    Matrix gp = Matrix::Zero(value_dim(), key_h_ * key_w_);
    const int ry = kh_ / 2, rx = kw_ / 2;
    for (int q = 0; q < key_h_ * key_w_; ++q) {
      const int ky = q / key_w_, kx = q % key_w_;
      for (int py = 0; py < kh_; ++py) {
        const int y = ky + py - ry - origin_.y;
        if (y < 0 || y >= win_h_) continue;
        for (int px = 0; px < kw_; ++px) {
          const int x = kx + px - rx - origin_.x;
          if (x < 0 || x >= win_w_) continue;
          for (int o = 0; o < out_ch_; ++o)
            gp((o * kh_ + py) * kw_ + px, q) = gpre[static_cast<std::size_t>(o) * cells + y * win_w_ + x];
        }
      }
    }
    *grad = gp * keys_.transpose();
  }
  return total / count;
}

Tensor PatchProblem::evaluate(const Matrix& w) const {
  std::vector<double> pre;
  pre_activation(w, pre);
  Tensor out({out_ch_, win_h_, win_w_});
  for (std::size_t i = 0; i < pre.size(); ++i) out.data[i] = static_cast<float>(act_value(pre[i], act_));
  return out;
}

namespace {

// Lambda-parameterized loop shared by the single and multi-key variants.
EditResult optimize_lambda(const PatchProblem& f, const Matrix& w0, const Matrix& d_s, const OptimConfig& cfg) {
  cfg.validate();
  check_direction_set(f, w0, d_s);
  const auto t0 = std::chrono::steady_clock::now();
  EditResult r;
  r.config = cfg;
  Matrix lambda = Matrix::Zero(w0.rows(), d_s.cols());
  Stepper stepper(cfg, lambda.size());
  Matrix grad_w;
  r.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  Matrix best = lambda;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.iterations; ++it) {
    const double loss = f.loss(w0 + lambda * d_s.transpose(), &grad_w);
    if (it == 0) r.initial_loss = loss;
    check_divergence(loss, r.initial_loss, it);
    r.loss_trace.push_back(loss);
    if (it == 0 && loss <= f.converged_loss()) {
      r.loss_trace.assign(static_cast<std::size_t>(cfg.iterations), loss);
      break;
    }
    if (loss < best_loss) {
      best_loss = loss;
      best = lambda;
    }
    const Matrix grad_lambda = grad_w * d_s;
    stepper.step(lambda.data(), grad_lambda.data());
  }
  const double last = f.loss(w0 + lambda * d_s.transpose());
  check_divergence(last, r.initial_loss, cfg.iterations);
  if (last < best_loss) best = lambda;
  r.lambda = best;
  r.w1 = w0 + best * d_s.transpose();
  r.final_loss = f.loss(r.w1);
  r.constraint_residual = std::sqrt(r.final_loss);
  r.wall_seconds = seconds_since(t0);
  return r;
}

// Free-W loop; `project` is applied to W - W0 every project_every steps and at the end.
template <class Project>
EditResult optimize_free(const PatchProblem& f, const Matrix& w0, const OptimConfig& cfg, Project project) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EditResult r;
  r.config = cfg;
  Matrix w = w0;
  Stepper stepper(cfg, w.size());
  Matrix grad_w;
  r.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  Matrix best = w0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.iterations; ++it) {
    const double loss = f.loss(w, &grad_w);
    if (it == 0) r.initial_loss = loss;
    check_divergence(loss, r.initial_loss, it);
    r.loss_trace.push_back(loss);
    if (it == 0 && loss <= f.converged_loss()) {
      r.loss_trace.assign(static_cast<std::size_t>(cfg.iterations), loss);
      best = w;
      break;
    }
    // Only projected iterates are candidates for the result.
    if (it % cfg.project_every == 0 && loss < best_loss) {
      best_loss = loss;
      best = w;
    }
    stepper.step(w.data(), grad_w.data());
    if ((it + 1) % cfg.project_every == 0) w = w0 + project(w - w0);
  }
  w = w0 + project(w - w0);
  const double last = f.loss(w);
  check_divergence(last, r.initial_loss, cfg.iterations);
  if (last < best_loss) best = w;
  r.w1 = best;
  r.final_loss = f.loss(best);
  r.constraint_residual = std::sqrt(r.final_loss);
  r.wall_seconds = seconds_since(t0);
  return r;
}

}  // namespace

EditResult optimize_lambda_single(const PatchProblem& f, const Matrix& w0, const Vector& d, const OptimConfig& cfg) {
  if (d.size() == 0 || d.isZero(0.0)) throw ValidationError("optimize_lambda_single: direction d is zero");
  return optimize_lambda(f, w0, Matrix(d), cfg);
}

EditResult optimize_lambda_multi(const PatchProblem& f, const Matrix& w0, const Matrix& d_s, const OptimConfig& cfg) {
  return optimize_lambda(f, w0, d_s, cfg);
}

EditResult projected_gd(const PatchProblem& f, const Matrix& w0, const Matrix& d_s, const OptimConfig& cfg) {
  check_direction_set(f, w0, d_s);
  const Matrix p = row_space_projector(d_s);
  return optimize_free(f, w0, cfg, [&](const Matrix& dw) -> Matrix { return dw * p; });
}

EditResult finetune_layer_unconstrained(const PatchProblem& f, const Matrix& w0, const OptimConfig& cfg) {
  if (w0.rows() != f.value_dim() || w0.cols() != f.key_dim()) throw ValidationError("edit: W0 shape does not match layer");
  return optimize_free(f, w0, cfg, [](const Matrix& dw) -> Matrix { return dw; });
}

LayerSpec zero_units(const LayerSpec& layer, const std::vector<int>& units) {
  LayerSpec out = layer;
  const std::size_t per_unit = static_cast<std::size_t>(layer.in_channels()) * layer.kh() * layer.kw();
  for (int u : units) {
    if (u < 0 || u >= layer.out_channels()) throw ValidationError("zero_units: unit " + std::to_string(u) + " out of range");
    std::fill_n(out.weight.data.begin() + static_cast<std::ptrdiff_t>(u * per_unit), per_unit, 0.0f);
    out.bias.data[static_cast<std::size_t>(u)] = 0.0f;
  }
  return out;
}

Generator zero_units(const Generator& gen, int layer, const std::vector<int>& units) {
  Generator out = gen;
  out.layer(layer) = zero_units(gen.layer(layer), units);
  return out;
}

Generator with_layer_weights(const Generator& gen, int layer, const Matrix& w) {
  Generator out = gen;
  const auto& spec = gen.layer(layer);
  AssocView view;
  view.out_channels = spec.out_channels();
  view.kh = spec.kh();
  view.kw = spec.kw();
  view.matrix = w;
  if (w.rows() != view.out_channels * view.kh * view.kw || w.cols() != spec.in_channels()) {
    throw ValidationError("with_layer_weights: matrix shape does not match layer " + std::to_string(layer));
  }
  if (!linalg::all_finite(w)) throw NumericalError("with_layer_weights: non-finite weights");
  out.layer(layer).weight = to_layer(view);
  return out;
}

// ---- whole-generator gradients -------------------------------------------

ForwardTrace forward_trace(const Generator& gen, const Tensor& start, int from_layer) {
  ForwardTrace t;
  t.from_layer = from_layer;
  Tensor x = start;
  for (int l = from_layer + 1; l <= gen.layer_count(); ++l) {
    const auto& spec = gen.layer(l);
    t.conv_inputs.push_back(kernels::upsample_nearest(x, spec.upsample));
    Tensor pre = kernels::conv2d(t.conv_inputs.back(), spec.weight, spec.bias);
    x = pre;
    kernels::activate_inplace(x, spec.act);
    t.pre.push_back(std::move(pre));
  }
  t.output = std::move(x);
  return t;
}

void backward_trace(const Generator& gen, const ForwardTrace& trace, Tensor grad, int lowest, GeneratorGrads& grads) {
  if (lowest <= trace.from_layer) throw ValidationError("backward_trace: lowest layer was not traced");
  const auto n = static_cast<std::size_t>(gen.layer_count());
  if (grads.weight.size() != n) {
    grads.weight.resize(n);
    grads.bias.resize(n);
  }
  Tensor gw, gb;
  for (int l = gen.layer_count(); l >= lowest; --l) {
    const auto& spec = gen.layer(l);
    const auto idx = static_cast<std::size_t>(l - trace.from_layer - 1);
    kernels::activate_grad_inplace(grad, trace.pre[idx], spec.act);
    kernels::conv2d_grad_params(trace.conv_inputs[idx], grad, spec.weight.shape, gw, gb);
    auto& acc_w = grads.weight[static_cast<std::size_t>(l - 1)];
    auto& acc_b = grads.bias[static_cast<std::size_t>(l - 1)];
    if (acc_w.size() == 0) {
      acc_w = gw;
      acc_b = gb;
    } else {
      for (std::size_t i = 0; i < gw.size(); ++i) acc_w.data[i] += gw.data[i];
      for (std::size_t i = 0; i < gb.size(); ++i) acc_b.data[i] += gb.data[i];
    }
    if (l > lowest) grad = kernels::upsample_nearest_grad(kernels::conv2d_grad_input(grad, spec.weight), spec.upsample);
  }
}

double masked_pixel_mse(const Tensor& image, const Tensor& target, const std::vector<std::uint8_t>& mask) {
  if (!image.same_shape(target)) throw ValidationError("masked_pixel_mse: shape mismatch");
  const int c = image.dim(0), plane = image.dim(1) * image.dim(2);
  if (!mask.empty() && static_cast<int>(mask.size()) != plane) throw ValidationError("masked_pixel_mse: mask size mismatch");
  double total = 0.0;
  std::size_t count = 0;
  for (int p = 0; p < plane; ++p) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(p)]) continue;
    for (int k = 0; k < c; ++k) {
      const double r = image.data[static_cast<std::size_t>(k) * plane + p] - target.data[static_cast<std::size_t>(k) * plane + p];
      total += r * r;
    }
    count += static_cast<std::size_t>(c);
  }
  if (count == 0) throw ValidationError("masked_pixel_mse: mask selects no pixels");
  return total / static_cast<double>(count);
}

namespace {

// Adds d(scale * mean squared error)/d(image) into grad; returns the mean squared error.
double mse_grad(const Tensor& image, const Tensor& target, const std::vector<std::uint8_t>& mask, double scale,
                Tensor& grad) {
  const int c = image.dim(0), plane = image.dim(1) * image.dim(2);
  std::size_t count = 0;
  for (int p = 0; p < plane; ++p)
    if (mask.empty() || mask[static_cast<std::size_t>(p)]) count += static_cast<std::size_t>(c);
  if (count == 0) throw ValidationError("mask selects no pixels; the loss would be vacuous");
  if (grad.size() == 0) grad = Tensor(image.shape);
  double total = 0.0;
  for (int p = 0; p < plane; ++p) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(p)]) continue;
    for (int k = 0; k < c; ++k) {
      const std::size_t i = static_cast<std::size_t>(k) * plane + p;
      const double r = static_cast<double>(image.data[i]) - target.data[i];
      total += r * r;
      grad.data[i] += static_cast<float>(2.0 * r * scale / static_cast<double>(count));
    }
  }
  return total / static_cast<double>(count);
}

std::size_t param_count(const Generator& g) {
  std::size_t n = 0;
  for (const auto& l : g.layers) n += l.weight.size() + l.bias.size();
  return n;
}

}  // namespace

EditResult finetune_all(const Generator& gen, const std::vector<Exemplar>& exemplars, double lambda,
                        const OptimConfig& cfg, int batch) {
  if (cfg.iterations < 0) throw ValidationError("finetune_all: iterations must be >= 0");
  if (cfg.iterations > 0) cfg.validate();
  if (batch < 0) throw ValidationError("finetune_all: batch must be >= 0");
  if (lambda < 0) throw ValidationError("finetune_all: lambda must be >= 0");
  for (const auto& e : exemplars)
    if (e.target.shape != std::vector<int>{3, gen.image_size(), gen.image_size()}) {
      throw ValidationError("finetune_all: exemplar target has shape " + e.target.shape_string());
    }
  const auto t0 = std::chrono::steady_clock::now();
  EditResult r;
  r.config = cfg;
  Generator theta = gen;
  std::vector<double> params;
  params.reserve(param_count(gen));
  for (const auto& l : gen.layers) {
    params.insert(params.end(), l.weight.data.begin(), l.weight.data.end());
    params.insert(params.end(), l.bias.data.begin(), l.bias.data.end());
  }
  Stepper stepper(cfg, static_cast<Eigen::Index>(params.size()));
  std::vector<double> flat_grad(params.size());
  const std::uint64_t stream = derive_seed(cfg.seed, 0xf17e);

  auto evaluate = [&](int it, bool want_grad, GeneratorGrads* grads) {
    double smooth = 0.0, constraint = 0.0;
    if (batch > 0) {
      const auto zs = sample_latents(derive_seed(stream, static_cast<std::uint64_t>(it)), batch, gen.latent_dim);
      for (const auto& z : zs) {
        const Tensor ref = forward(gen, z);
        auto trace = forward_trace(theta, broadcast_latent(theta, z), 0);
        Tensor g;
        smooth += mse_grad(trace.output, ref, {}, 1.0 / batch, g) / batch;
        if (want_grad) backward_trace(theta, trace, std::move(g), 1, *grads);
      }
    }
    if (!exemplars.empty()) {
      const double n = static_cast<double>(exemplars.size());
      for (const auto& e : exemplars) {
        auto trace = forward_trace(theta, broadcast_latent(theta, e.z), 0);
        Tensor g;
        constraint += mse_grad(trace.output, e.target, {}, lambda / n, g) / n;
        if (want_grad && lambda > 0) backward_trace(theta, trace, std::move(g), 1, *grads);
      }
    }
    return smooth + lambda * constraint;
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    GeneratorGrads grads;
    const double loss = evaluate(it, true, &grads);
    if (it == 0) r.initial_loss = loss;
    check_divergence(loss, r.initial_loss, it);
    r.loss_trace.push_back(loss);
    std::size_t k = 0;
    for (std::size_t l = 0; l < theta.layers.size(); ++l) {
      const auto& spec = theta.layers[l];
      const bool has = l < grads.weight.size() && grads.weight[l].size() > 0;
      for (std::size_t i = 0; i < spec.weight.size(); ++i) flat_grad[k++] = has ? grads.weight[l].data[i] : 0.0;
      for (std::size_t i = 0; i < spec.bias.size(); ++i) flat_grad[k++] = has ? grads.bias[l].data[i] : 0.0;
    }
    stepper.step(params.data(), flat_grad.data());
    k = 0;
    for (auto& l : theta.layers) {
      for (auto& w : l.weight.data) w = static_cast<float>(params[k++]);
      for (auto& b : l.bias.data) b = static_cast<float>(params[k++]);
    }
  }
  r.final_loss = evaluate(cfg.iterations, false, nullptr);
  if (cfg.iterations > 0) check_divergence(r.final_loss, r.initial_loss, cfg.iterations);
  else r.initial_loss = r.final_loss;
  double constraint = 0.0;
  for (const auto& e : exemplars) constraint += masked_pixel_mse(forward(theta, e.z), e.target, {});
  r.constraint_residual = exemplars.empty() ? 0.0 : std::sqrt(constraint / static_cast<double>(exemplars.size()));
  r.theta1 = std::move(theta);
  r.wall_seconds = seconds_since(t0);
  return r;
}

nlohmann::json DiscoveryResult::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json j = {{"layer", l.layer}, {"loss", l.loss}, {"diverged", l.diverged}};
    if (!l.error.empty()) j["error"] = l.error;
    layers_json.push_back(j);
  }
  return {{"best_layer", best_layer}, {"layers", layers_json}, {"delta_rank", linalg::numerical_rank(delta, 1e-8)}};
}

namespace {

LayerLoss discover_at_layer(const Generator& gen, const std::vector<DiscoveryPair>& pairs, int layer, int rank,
                            const OptimConfig& cfg, Matrix& delta_out) {
  LayerLoss out;
  out.layer = layer;
  // Cached input of the candidate layer for every pair.
  std::vector<Tensor> starts;
  for (const auto& p : pairs) {
    Tensor x = broadcast_latent(gen, p.z);
    for (int l = 1; l < layer; ++l) x = run_layer(gen.layer(l), x);
    starts.push_back(std::move(x));
  }
  const auto& spec = gen.layer(layer);
  const Matrix w0 = as_assoc_view(spec).matrix;
  Matrix delta = Matrix::Zero(w0.rows(), w0.cols());
  Stepper stepper(cfg, delta.size());
  const double n = static_cast<double>(pairs.size());

  auto evaluate = [&](const Matrix& dw, Matrix* grad) {
    const Generator g = with_layer_weights(gen, layer, w0 + dw);
    double total = 0.0;
    GeneratorGrads grads;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      auto trace = forward_trace(g, starts[i], layer - 1);
      Tensor gi;
      total += mse_grad(trace.output, pairs[i].target, pairs[i].mask, 1.0 / n, gi) / n;
      if (grad) backward_trace(g, trace, std::move(gi), layer, grads);
    }
    if (grad) *grad = as_assoc_view(grads.weight[static_cast<std::size_t>(layer - 1)]).matrix;
    return total;
  };

  Matrix grad;
  double initial = 0.0;
  for (int it = 0; it < cfg.iterations; ++it) {
    const double loss = evaluate(delta, &grad);
    if (it == 0) initial = loss;
    check_divergence(loss, initial, it);
    out.loss_trace.push_back(loss);
    stepper.step(delta.data(), grad.data());
    if ((it + 1) % cfg.project_every == 0) delta = linalg::svd_truncate(delta, rank);
  }
  delta = linalg::svd_truncate(delta, rank);
  out.loss = evaluate(delta, nullptr);
  check_divergence(out.loss, initial, cfg.iterations);
  delta_out = delta;
  return out;
}

}  // namespace

DiscoveryResult rank_constrained_discovery(const Generator& gen, const std::vector<DiscoveryPair>& pairs, int rank,
                                           const OptimConfig& cfg, std::vector<int> candidate_layers) {
  cfg.validate();
  if (pairs.empty()) throw ValidationError("discovery: at least one training pair is required");
  if (rank < 1) throw ValidationError("discovery: rank must be >= 1");
  const int plane = gen.image_size() * gen.image_size();
  for (const auto& p : pairs) {
    if (p.target.shape != std::vector<int>{3, gen.image_size(), gen.image_size()}) {
      throw ValidationError("discovery: target has shape " + p.target.shape_string());
    }
    if (static_cast<int>(p.mask.size()) != plane) throw ValidationError("discovery: mask size does not match image");
    if (std::none_of(p.mask.begin(), p.mask.end(), [](std::uint8_t m) { return m != 0; })) {
      throw ValidationError("discovery: empty mask; the masked loss would be vacuous");
    }
  }
  if (candidate_layers.empty())
    for (int l = 1; l <= gen.layer_count(); ++l) candidate_layers.push_back(l);

  DiscoveryResult result;
  std::vector<Matrix> deltas(candidate_layers.size());
  result.layers.resize(candidate_layers.size());
  for (std::size_t i = 0; i < candidate_layers.size(); ++i) {
    try {
      result.layers[i] = discover_at_layer(gen, pairs, candidate_layers[i], rank, cfg, deltas[i]);
    } catch (const NumericalError& e) {
      result.layers[i].layer = candidate_layers[i];
      result.layers[i].diverged = true;
      result.layers[i].loss = std::numeric_limits<double>::infinity();
      result.layers[i].error = e.what();
    }
  }
  int best = -1;
  for (std::size_t i = 0; i < result.layers.size(); ++i) {
    if (result.layers[i].diverged) continue;
    if (best < 0 || result.layers[i].loss < result.layers[static_cast<std::size_t>(best)].loss) best = static_cast<int>(i);
  }
  if (best < 0) throw NumericalError("discovery: every candidate layer diverged");
  result.best_layer = result.layers[static_cast<std::size_t>(best)].layer;
  result.delta = deltas[static_cast<std::size_t>(best)];
  return result;
}

}  // namespace remem
