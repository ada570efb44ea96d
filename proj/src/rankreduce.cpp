#include "remem/rankreduce.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "remem/error.hpp"
#include "remem/gtf.hpp"

namespace remem {

Matrix whiten_context(const Matrix& k_ctx, const KeyStats& stats) {
  if (k_ctx.rows() != stats.dim()) throw ValidationError("whiten_context: key dimension does not match stats");
  return stats.z * k_ctx;
}

double context_information(const Matrix& k_whitened, int n, int t) {
  if (t < 1) throw ValidationError("context_information: t must be >= 1");
  return k_whitened.squaredNorm() / (2.0 * t) + n / (2.0 * t) * std::log(2.0 * std::numbers::pi);
}

std::string matrix_hash(const Matrix& m) {
  std::string bytes;
  const Eigen::Index shape[2] = {m.rows(), m.cols()};
  bytes.append(reinterpret_cast<const char*>(shape), sizeof shape);
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const double v = m(r, c);
      bytes.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
  return gtf::content_hash(bytes);
}

DirectionSet reduce_context(const Matrix& k_ctx, const KeyStats& stats, int s) {
  if (k_ctx.cols() < 1) throw ValidationError("reduce_context: empty context");
  if (!linalg::all_finite(k_ctx)) throw ValidationError("reduce_context: non-finite context keys");
  const int limit = static_cast<int>(std::min<Eigen::Index>(k_ctx.rows(), k_ctx.cols()));
  if (s < 1 || s > limit) {
    throw ValidationError("reduce_context: rank " + std::to_string(s) + " outside 1.." + std::to_string(limit));
  }
  const Matrix kp = whiten_context(k_ctx, stats);
  Matrix gram = kp * kp.transpose();
  gram = 0.5 * (gram + gram.transpose()).eval();
  const auto eig = linalg::sym_eig(gram, 1e-9 * std::max(1.0, gram.cwiseAbs().maxCoeff()));
  const double top = eig.values(0);
  int achievable = 0;
  for (Eigen::Index i = 0; i < eig.values.size(); ++i)
    if (top > 0 && eig.values(i) > 1e-10 * top) ++achievable;
  if (s > achievable) {
    throw ValidationError("reduce_context: rank " + std::to_string(s) + " exceeds the context's numerical rank " +
                          std::to_string(achievable) + "; use rank <= " + std::to_string(achievable));
  }
  DirectionSet ds;
  ds.d = stats.z * eig.vectors.leftCols(s);
  for (int j = 0; j < s; ++j) ds.d.col(j).normalize();
  ds.context_hash = matrix_hash(k_ctx);
  ds.stats_hash = matrix_hash(stats.second_moment);
  return ds;
}

AxisScores axis_aligned_scores(const Matrix& k_ctx, const Vector& sigma) {
  if (sigma.size() != k_ctx.rows()) throw ValidationError("axis_aligned_scores: sigma length mismatch");
  for (Eigen::Index i = 0; i < sigma.size(); ++i)
    if (!(sigma(i) > 0)) throw ValidationError("axis_aligned_scores: sigma of unit " + std::to_string(i) + " is zero");
  AxisScores out;
  out.scores = k_ctx.rowwise().squaredNorm().cwiseQuotient(sigma.cwiseAbs2());
  out.order.resize(static_cast<std::size_t>(sigma.size()));
  std::iota(out.order.begin(), out.order.end(), 0);
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](int a, int b) { return out.scores(a) > out.scores(b); });
  return out;
}

void save_direction_set(const std::filesystem::path& path, const DirectionSet& ds) {
  gtf::Container c;
  c.kind = "direction_set";
  c.metadata = {{"rank", ds.rank()}, {"context_hash", ds.context_hash}, {"stats_hash", ds.stats_hash}};
  Tensor t({static_cast<int>(ds.d.rows()), static_cast<int>(ds.d.cols())});
  for (Eigen::Index r = 0; r < ds.d.rows(); ++r)
    for (Eigen::Index k = 0; k < ds.d.cols(); ++k) t.data[r * ds.d.cols() + k] = static_cast<float>(ds.d(r, k));
  c.add("D", t);
  gtf::write_file(path, c);
}

DirectionSet load_direction_set(const std::filesystem::path& path) {
  const auto c = gtf::read_file(path);
  if (c.kind != "direction_set") throw FormatError("GTF: expected kind 'direction_set' in " + path.string());
  const auto& t = c.get("D");
  if (t.rank() != 2) throw FormatError("direction set: D must be 2-d");
  DirectionSet ds;
  ds.d.resize(t.dim(0), t.dim(1));
  for (int r = 0; r < t.dim(0); ++r)
    for (int k = 0; k < t.dim(1); ++k) ds.d(r, k) = t.data[static_cast<std::size_t>(r) * t.dim(1) + k];
  ds.context_hash = c.metadata.value("context_hash", "");
  ds.stats_hash = c.metadata.value("stats_hash", "");
  return ds;
}

}  // namespace remem
