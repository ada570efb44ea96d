// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "remem/cli.hpp"
#include "remem/editops.hpp"
#include "remem/eval.hpp"
#include "remem/gtf.hpp"
#include "remem/rankreduce.hpp"
#include "remem/rewrite.hpp"
#include "remem/service.hpp"

using namespace remem;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kFixtures = fs::path(REMEM_FIXTURE_DIR);

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<float>(scale * counter_normal(seed, i));
  return t;
}

LayerSpec random_layer(int out, int in, int k, Nonlinearity act, std::uint64_t seed, double bias = 0.0) {
  LayerSpec l{random_tensor({out, in, k, k}, seed, 0.3), Tensor({out}, static_cast<float>(bias)), act, 1};
  return l;
}

struct Instance {
  AssocView w0;
  KeyStats stats;
  Vector k_star, v_star;
};

Instance random_instance(std::uint64_t i) {
  const int n = 2 + static_cast<int>(i % 15), m = 1 + static_cast<int>((i / 3) % 12);
  const int t = std::min(32, n + 1 + static_cast<int>((i * 7) % 24));
  const Matrix k = oracle::random_matrix(n, t, 70000 + 10 * i), v = oracle::random_matrix(m, t, 70001 + 10 * i);
  Instance in;
  in.w0 = fit_memory(k, v);
  in.stats = key_stats_from_moment(k * k.transpose() / static_cast<double>(t));
  in.k_star = oracle::random_matrix(n, 1, 70002 + 10 * i).col(0);
  in.v_star = oracle::random_matrix(m, 1, 70003 + 10 * i).col(0);
  return in;
}

Outcome closed_form() {
  Outcome o;
  double worst_fit = 0.0, worst_kkt = 0.0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const Instance in = random_instance(i);
    const LinearInsert r = insert_linear_closed_form(in.w0, in.stats, in.k_star, in.v_star);
    worst_fit = std::max(worst_fit, (r.w1.matrix * in.k_star - in.v_star).norm() / in.v_star.norm());
    const Matrix w_oracle = oracle::kkt_constrained(in.w0.matrix, in.stats.c, in.k_star, in.v_star);
    worst_kkt = std::max(worst_kkt, (r.w1.matrix - w_oracle).norm());
  }
  o.pass = worst_fit < 1e-6 && worst_kkt < 1e-6;
  o.detail = fmt("200 instances, max rel |W1k*-v*| %.2e, max |W1-KKT|_F %.2e", worst_fit, worst_kkt);
  return o;
}

Outcome rank_one() {
  Outcome o;
  double worst_ratio = 0.0, worst_angle = 0.0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const Instance in = random_instance(i);
    const LinearInsert r = insert_linear_closed_form(in.w0, in.stats, in.k_star, in.v_star);
    const Matrix delta = r.w1.matrix - in.w0.matrix;
    const Vector d = oracle::gauss_solve(in.stats.c, Matrix(in.k_star)).col(0);
    if (delta.rows() > 1) {
      const Eigen::JacobiSVD<Matrix> svd(delta);
      worst_ratio = std::max(worst_ratio, svd.singularValues()(1) / svd.singularValues()(0));
    }
    for (int row = 0; row < delta.rows(); ++row) {
      if (delta.row(row).norm() <= 1e-9 * delta.norm()) continue;
      const double c = std::abs(delta.row(row).dot(d)) / (delta.row(row).norm() * d.norm());
      worst_angle = std::max(worst_angle, std::acos(std::min(1.0, c)));
    }
  }
  o.pass = worst_ratio < 1e-8 && worst_angle < 1e-6;
  o.detail = fmt("200 updates, max s2/s1 %.2e, max row angle to C^-1 k* %.2e rad", worst_ratio, worst_angle);
  return o;
}

Outcome linear_agreement() {
  Outcome o;
  double worst_lambda = 0.0, worst_projected = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const LayerSpec layer = random_layer(4, 6, 3, Nonlinearity::identity, 400 + s);
    const AssocView w0 = as_assoc_view(layer);
    const KeyStats stats =
        key_stats_from_moment(oracle::random_psd(6, 410 + s) / 6.0 + 0.1 * Matrix::Identity(6, 6));
    const Vector k = oracle::random_matrix(6, 1, 420 + s).col(0);
    const Vector v = oracle::random_matrix(w0.rows(), 1, 430 + s, 0.5).col(0);
    const Matrix closed = insert_linear_closed_form(w0, stats, k, v).w1.matrix;
    const PatchProblem f = PatchProblem::single_key(layer, k, v);
    const Vector d = update_direction(stats, k);
    worst_lambda = std::max(worst_lambda, oracle::rel_err(optimize_lambda_single(f, w0.matrix, d, OptimConfig{}).w1, closed));
    worst_projected = std::max(worst_projected, oracle::rel_err(projected_gd(f, w0.matrix, d, OptimConfig{}).w1, closed));
  }
  o.pass = worst_lambda < 1e-3 && worst_projected < 1e-3;
  o.detail = fmt("10 layers, lr 0.05, 2001 it: Lambda rel err %.2e, projected %.2e", worst_lambda, worst_projected);
  return o;
}

Outcome gradients() {
  Outcome o;
  const Nonlinearity acts[] = {Nonlinearity::identity, Nonlinearity::relu, Nonlinearity::leaky_relu,
                               Nonlinearity::tanh};
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    LayerSpec layer = random_layer(2, 8, 3, acts[s % 4], 100 + s, 0.2);
    for (std::size_t i = 0; i < layer.bias.size(); ++i)
      layer.bias.data[i] += static_cast<float>(0.1 * counter_normal(101 + s, i));
    const PatchProblem f(layer, random_tensor({8, 3, 3}, 200 + s), {0, 0}, random_tensor({2, 3, 3}, 300 + s, 0.5));
    const Matrix w = as_assoc_view(layer).matrix;
    Matrix grad;
    f.loss(w, &grad);
    const Matrix fd = oracle::fd_gradient([&](const Matrix& x) { return f.loss(x); }, w, 1e-6);
    worst = std::max(worst, oracle::rel_err(grad, fd));
  }
  o.pass = worst < 1e-4;
  o.detail = fmt("50 layers over 4 nonlinearities, max rel err %.2e", worst);
  return o;
}

Outcome rank_reduction() {
  Outcome o;
  int beaten = 0;
  const int n = 3;
  for (std::uint64_t c = 0; c < 5; ++c) {
    const KeyStats s = key_stats_from_moment(oracle::random_psd(n, 12 + c) / n + 0.1 * Matrix::Identity(n, n));
    const Matrix k = oracle::random_matrix(n, 8, 13 + c);
    const Matrix kw = whiten_context(k, s);
    const Matrix m = kw * kw.transpose();
    for (int rank = 1; rank <= 2; ++rank) {
      const Matrix q = oracle::gram_schmidt(s.z.inverse() * reduce_context(k, s, rank).d);
      const double best = (q.transpose() * m * q).trace();
      for (std::uint64_t i = 0; i < 2000; ++i)
        if (oracle::random_projection_trace(m, rank, 5000 + 2000 * c + i) > best + 1e-9) ++beaten;
    }
  }
  double worst_angle = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const KeyStats s = key_stats_from_moment(oracle::random_psd(6, 100 + i) / 6 + 0.1 * Matrix::Identity(6, 6));
    const Vector k = oracle::random_matrix(6, 1, 200 + i).col(0);
    worst_angle = std::max(worst_angle, linalg::max_principal_angle(reduce_context(k, s, 1).d, update_direction(s, k)));
  }
  o.pass = beaten == 0 && worst_angle < 1e-5;
  o.detail = fmt("random projections beating top-S: %.0f of 20000; T=1 angle to C^-1 k* %.2e rad", beaten, worst_angle);
  return o;
}

std::vector<Tensor> renders(const Generator& g, int n) {
  std::vector<Tensor> out;
  for (int s = 0; s < n; ++s) out.push_back(forward(g, latent_for_seed(static_cast<std::uint64_t>(s), g.latent_dim)));
  return out;
}

std::vector<std::vector<std::uint8_t>> rule_masks(const PlantedGenerator& p, int rule, int n) {
  std::vector<std::vector<std::uint8_t>> masks;
  for (int s = 0; s < n; ++s)
    masks.push_back(occurrence_mask(p.gen, p.manifest.memory_layer,
                                    latent_for_seed(static_cast<std::uint64_t>(s), p.gen.latent_dim),
                                    p.manifest.rules[static_cast<std::size_t>(rule)].key));
  return masks;
}

Outcome locality() {
  Outcome o;
  const PlantedGenerator p = load_planted(kFixtures / "models" / "planted.gtf");
  const EditSession s = EditSession::load(kFixtures / "sessions" / "planted-transfer-1-0.json");
  const EditOutcome edit = apply_edit(p.gen, s);
  const Efficacy eff = efficacy_planted_rule(p.gen, edit.generator, p.manifest, 0, p.manifest.rules[1].value, 0, 100);
  const auto before = renders(p.gen, 100);
  const auto masks = rule_masks(p, 0, 100);
  const double rank1 = masked_change(before, renders(edit.generator, 100), masks).mean;
  OptimConfig cfg = finetune_all_defaults();
  cfg.iterations = s.config.iterations;
  const Exemplar e{latent_for_seed(s.paste.seed, p.gen.latent_dim), pasted_target_image(p.gen, s)};
  const EditResult ft = finetune_all(p.gen, {e}, 1.0, cfg);
  const double finetune = masked_change(before, renders(*ft.theta1, 100), masks).mean;
  o.pass = eff.fraction >= 0.9 && rank1 < 1e-2 && finetune >= 5.0 * rank1;
  o.detail = fmt("efficacy %.3f, off-context change rank-1 %.2e vs finetune-all %.2e", eff.fraction, rank1, finetune);
  return o;
}

Outcome watermark() {
  Outcome o;
  const PlantedGenerator p = load_planted(kFixtures / "models" / "watermark.gtf");
  const int rule = 0, layer = p.manifest.memory_layer;
  const KeyStats stats = estimate_key_stats(p.gen, layer, 256, 0);
  const EditResult erased = erase_planted_rule(p, rule, stats, 1, 8, OptimConfig{});
  const Generator edited = with_layer_weights(p.gen, layer, erased.w1);
  const Generator zeroed = zero_units(p.gen, layer - 1, top_scored_units(p, rule, stats, 0.3, 8));
  const Vector none = Vector::Zero(p.manifest.rules[rule].value.size());
  const Efficacy e_edit = efficacy_planted_rule(p.gen, edited, p.manifest, rule, none, 0, 100);
  const Efficacy e_zero = efficacy_planted_rule(p.gen, zeroed, p.manifest, rule, none, 0, 100);
  const auto before = renders(p.gen, 100);
  const auto masks = rule_masks(p, rule, 100);
  const double c_edit = masked_change(before, renders(edited, 100), masks).mean;
  const double c_zero = masked_change(before, renders(zeroed, 100), masks).mean;
  o.pass = e_edit.changed >= e_zero.changed && c_edit < c_zero;
  std::ostringstream d;
  d << "removed at " << e_edit.changed << "/" << e_edit.locations << " (rank-1) vs " << e_zero.changed << "/"
    << e_zero.locations << " (zero 30% units); off-motif change " << fmt("%.2e vs %.2e", c_edit, c_zero);
  o.detail = d.str();
  return o;
}

Outcome discovery() {
  Outcome o;
  int hits = 0;
  std::ostringstream d;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DiscoveryFixture f = build_discovery_fixture(seed);
    const DiscoveryResult r = rank_constrained_discovery(f.gen, f.pairs, 1, discovery_fixture_config());
    if (r.best_layer == f.layer) ++hits;
    else d << " seed " << seed << " picked " << r.best_layer << " (true " << f.layer << ")";
  }
  o.pass = hits == 10;
  o.detail = std::to_string(hits) + "/10 fixtures select the changed layer" + d.str();
  return o;
}

Outcome parity() {
  Outcome o;
  service::Options opts;
  opts.models_dir = kFixtures / "models";
  service::Service svc(opts);
  const fs::path out = fs::temp_directory_path() / "remem-acceptance.gtf";
  int sessions = 0, matched = 0;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(kFixtures / "sessions")) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    ++sessions;
    const std::string models = opts.models_dir.string(), session = path.string(), target = out.string();
    const char* argv[] = {"remem", "--json", "--models", models.c_str(), "edit", "apply",
                          "--session", session.c_str(), "--out", target.c_str()};
    std::ostringstream cli_out, cli_err;
    if (cli::run(10, argv, cli_out, cli_err) != cli::kOk) {
      o.detail += " cli failed on " + path.filename().string();
      continue;
    }
    const std::string cli_hash = json::parse(cli_out.str())["hash"];
    const auto created = svc.handle({"POST", "/sessions/import", {}, EditSession::load(path).to_json().dump()});
    const std::string id = json::parse(created.body).value("id", "");
    const auto applied = svc.handle({"POST", "/sessions/" + id + "/apply", {}, ""});
    const std::string svc_hash = applied.status == 200 ? json::parse(applied.body)["generator"].get<std::string>() : "";
    if (cli_hash == svc_hash && gtf::generator_hash(gtf::load_fixture(out)) == cli_hash) ++matched;
    else o.detail += " mismatch on " + path.filename().string();
  }
  fs::remove(out);
  o.pass = sessions > 0 && matched == sessions;
  o.detail = std::to_string(matched) + "/" + std::to_string(sessions) + " sessions hash-identical" + o.detail;
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    std::string name;
    std::function<Outcome()> check;
    double seconds;  // runtime limit; 0 for none
  };
  const std::vector<Criterion> criteria{
      {"closed-form correctness", closed_form, 5.0},
      {"rank-one structure", rank_one, 0.0},
      {"linear/nonlinear agreement", linear_agreement, 30.0},
      {"gradient checks", gradients, 0.0},
      {"rank-reduction optimality", rank_reduction, 0.0},
      {"locality and generalization", locality, 120.0},
      {"unit zeroing vs rank-1 erase", watermark, 0.0},
      {"layer discovery", discovery, 0.0},
      {"CLI/service parity", parity, 0.0},
  };
  int failed = 0;
  for (const auto& [name, check, limit] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (limit > 0.0 && secs >= limit) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s limit", limit);
    }
    if (!o.pass) ++failed;
    std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
