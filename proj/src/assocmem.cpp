#include "remem/assocmem.hpp"

#include <cmath>
#include <cstring>

#include "remem/error.hpp"
#include "remem/gtf.hpp"

namespace remem {

AssocView as_assoc_view(const LayerSpec& layer) { return as_assoc_view(layer.weight); }

AssocView as_assoc_view(const Tensor& weight) {
  if (weight.rank() != 4) throw ValidationError("as_assoc_view: weight must be 4-d");
  AssocView v;
  v.out_channels = weight.dim(0);
  const int in = weight.dim(1);
  v.kh = weight.dim(2);
  v.kw = weight.dim(3);
  v.matrix.resize(v.out_channels * v.kh * v.kw, in);
  for (int o = 0; o < v.out_channels; ++o)
    for (int i = 0; i < in; ++i)
      for (int a = 0; a < v.kh; ++a)
        for (int b = 0; b < v.kw; ++b) {
          const float w = weight.data[((static_cast<std::size_t>(o) * in + i) * v.kh + a) * v.kw + b];
          v.matrix(v.row(o, v.kh - 1 - a, v.kw - 1 - b), i) = w;
        }
  return v;
}

Tensor to_layer(const AssocView& view) {
  if (view.rows() != view.out_channels * view.kh * view.kw) throw ValidationError("to_layer: inconsistent view shape");
  const int in = view.cols();
  Tensor w({view.out_channels, in, view.kh, view.kw});
  for (int o = 0; o < view.out_channels; ++o)
    for (int i = 0; i < in; ++i)
      for (int a = 0; a < view.kh; ++a)
        for (int b = 0; b < view.kw; ++b)
          w.data[((static_cast<std::size_t>(o) * in + i) * view.kh + a) * view.kw + b] =
              static_cast<float>(view.matrix(view.row(o, view.kh - 1 - a, view.kw - 1 - b), i));
  return w;
}

Vector recall(const AssocView& view, const Vector& k) {
  if (k.size() != view.cols()) throw ValidationError("recall: key has wrong length");
  return view.matrix * k;
}

namespace {

AssocView wrap(Matrix m, int kh, int kw) {
  if (kh < 1 || kw < 1 || m.rows() % (kh * kw) != 0) throw ValidationError("memory rows not divisible by kernel area");
  AssocView v;
  v.out_channels = static_cast<int>(m.rows()) / (kh * kw);
  v.kh = kh;
  v.kw = kw;
  v.matrix = std::move(m);
  return v;
}

}  // namespace

AssocView build_orthogonal_memory(const Matrix& keys, const Matrix& values, int kh, int kw, double tol) {
  if (keys.cols() != values.cols()) throw ValidationError("build_orthogonal_memory: key and value counts differ");
  for (Eigen::Index i = 0; i < keys.cols(); ++i) {
    if (std::abs(keys.col(i).norm() - 1.0) > tol) {
      throw ValidationError("build_orthogonal_memory: key " + std::to_string(i) + " is not unit norm");
    }
    for (Eigen::Index j = 0; j < i; ++j) {
      const double dot = keys.col(i).dot(keys.col(j));
      if (std::abs(dot) > tol) {
        throw ValidationError("build_orthogonal_memory: keys " + std::to_string(j) + " and " + std::to_string(i) +
                              " are not orthogonal (dot " + std::to_string(dot) + ")");
      }
    }
  }
  return wrap(values * keys.transpose(), kh, kw);
}

AssocView fit_memory(const Matrix& keys, const Matrix& values, int kh, int kw) {
  return wrap(linalg::solve_least_squares(keys, values), kh, kw);
}

Vector KeyStats::sigma() const { return second_moment.diagonal().cwiseSqrt(); }

KeyStats key_stats_from_moment(const Matrix& second_moment, double epsilon_scale) {
  if (second_moment.rows() != second_moment.cols() || second_moment.rows() == 0) {
    throw ValidationError("key stats: second moment must be square and non-empty");
  }
  if (!linalg::all_finite(second_moment)) throw NumericalError("key stats: non-finite second moment");
  KeyStats s;
  s.second_moment = 0.5 * (second_moment + second_moment.transpose());
  const double mean_diag = s.second_moment.diagonal().mean();
  s.epsilon = epsilon_scale * mean_diag;
  s.c = s.second_moment;
  s.c.diagonal().array() += s.epsilon;
  s.eig = linalg::sym_eig(s.c, 1e-9 * std::max(1.0, mean_diag));
  const double floor = s.eig.values(0) * 1e-15;
  if (s.eig.values(s.eig.values.size() - 1) <= floor) {
    throw NumericalError("key stats: second moment is singular; use a positive regularizer");
  }
  const Vector inv = s.eig.values.cwiseInverse();
  s.c_inv = s.eig.vectors * inv.asDiagonal() * s.eig.vectors.transpose();
  s.c_inv = 0.5 * (s.c_inv + s.c_inv.transpose()).eval();
  s.z = linalg::zca(s.eig, floor);
  return s;
}

KeyStats estimate_key_stats(const Generator& gen, int layer, int n_samples, std::uint64_t seed,
                            double epsilon_scale) {
  if (n_samples < 1) throw ValidationError("estimate_key_stats: n_samples must be >= 1");
  const int n = gen.layer(layer).in_channels();
  Matrix acc = Matrix::Zero(n, n);
  std::int64_t count = 0;
  for (const auto& z : sample_latents(seed, n_samples, gen.latent_dim)) {
    const auto f = features(gen, z, layer);
    kernels::accumulate_second_moment(f.keys.data, acc);
    count += static_cast<std::int64_t>(f.keys.height()) * f.keys.width();
  }
  // Rounded to float32 so stats rebuilt from a cache file are identical.
  const Matrix moment = (acc / static_cast<double>(count)).cast<float>().cast<double>();
  KeyStats s = key_stats_from_moment(moment, epsilon_scale);
  s.layer = layer;
  s.n_samples = n_samples;
  s.seed = seed;
  s.n_keys = count;
  return s;
}

namespace {

Tensor to_tensor(const Matrix& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data[r * m.cols() + c] = static_cast<float>(m(r, c));
  return t;
}

Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw FormatError("expected a 2-d tensor");
  Matrix m(t.dim(0), t.dim(1));
  for (int r = 0; r < t.dim(0); ++r)
    for (int c = 0; c < t.dim(1); ++c) m(r, c) = t.data[static_cast<std::size_t>(r) * t.dim(1) + c];
  return m;
}

}  // namespace

void save_key_stats(const std::filesystem::path& path, const KeyStats& stats) {
  gtf::Container c;
  c.kind = "key_stats";
  const double scale = stats.second_moment.diagonal().mean() > 0
                           ? stats.epsilon / stats.second_moment.diagonal().mean()
                           : 0.0;
  c.metadata = {{"layer", stats.layer},         {"n_samples", stats.n_samples},
                {"seed", stats.seed},           {"n_keys", stats.n_keys},
                {"epsilon", stats.epsilon},     {"epsilon_scale", scale}};
  c.add("C", to_tensor(stats.second_moment));
  Tensor ev({static_cast<int>(stats.eig.values.size())});
  for (Eigen::Index i = 0; i < stats.eig.values.size(); ++i) ev.data[i] = static_cast<float>(stats.eig.values(i));
  c.add("eigenvalues", ev);
  c.add("U", to_tensor(stats.eig.vectors));
  c.add("Z", to_tensor(stats.z));
  gtf::write_file(path, c);
}

KeyStats load_key_stats(const std::filesystem::path& path) {
  const auto c = gtf::read_file(path);
  if (c.kind != "key_stats") throw FormatError("GTF: expected kind 'key_stats' in " + path.string());
  try {
    // Derived matrices are rebuilt from C so cached and fresh stats agree exactly.
    KeyStats s = key_stats_from_moment(to_matrix(c.get("C")), c.metadata.at("epsilon_scale").get<double>());
    s.layer = c.metadata.at("layer").get<int>();
    s.n_samples = c.metadata.at("n_samples").get<int>();
    s.seed = c.metadata.at("seed").get<std::uint64_t>();
    s.n_keys = c.metadata.at("n_keys").get<std::int64_t>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("key stats metadata: ") + e.what());
  }
}

std::string key_stats_cache_name(const Generator& gen, int layer, int n_samples, std::uint64_t seed) {
  return "stats-" + gtf::generator_hash(gen) + "-L" + std::to_string(layer) + "-n" + std::to_string(n_samples) +
         "-s" + std::to_string(seed) + ".gtf";
}

KeyStats cached_key_stats(const Generator& gen, int layer, int n_samples, std::uint64_t seed,
                          const std::filesystem::path& cache_dir) {
  if (cache_dir.empty()) return estimate_key_stats(gen, layer, n_samples, seed);
  const auto path = cache_dir / key_stats_cache_name(gen, layer, n_samples, seed);
  if (std::filesystem::exists(path)) return load_key_stats(path);
  KeyStats s = estimate_key_stats(gen, layer, n_samples, seed);
  save_key_stats(path, s);
  return s;
}

Vector update_direction(const KeyStats& stats, const Vector& k_star) {
  if (k_star.size() != stats.dim()) throw ValidationError("update_direction: key has wrong length");
  if (k_star.isZero(0.0)) throw ValidationError("update_direction: k_star is zero");
  return stats.c_inv * k_star;
}

LinearInsert insert_linear_closed_form(const AssocView& view, const KeyStats& stats, const Vector& k_star,
                                       const Vector& v_star) {
  if (v_star.size() != view.rows()) throw ValidationError("insert: v_star has wrong length");
  LinearInsert out;
  out.d = update_direction(stats, k_star);
  const double denom = out.d.dot(k_star);
  if (!(denom > 1e-300) || denom <= 1e-14 * out.d.norm() * k_star.norm()) {
    throw NumericalError("insert: direction d is numerically orthogonal to k_star");
  }
  out.lambda = (v_star - view.matrix * k_star) / denom;
  out.w1 = view;
  out.w1.matrix += out.lambda * out.d.transpose();
  return out;
}

Vector key_at(const FeatureMap& keys, Location loc) { return key_at(keys.data, loc); }

Vector key_at(const Tensor& keys, Location loc) {
  if (loc.y < 0 || loc.y >= keys.dim(1) || loc.x < 0 || loc.x >= keys.dim(2)) {
    throw ValidationError("key_at: location outside key map");
  }
  Vector k(keys.dim(0));
  for (int c = 0; c < keys.dim(0); ++c) k(c) = keys.at(c, loc.y, loc.x);
  return k;
}

Vector value_patch(const Tensor& values, Location loc, int kh, int kw) {
  const int ry = kh / 2, rx = kw / 2;
  Vector v = Vector::Zero(static_cast<Eigen::Index>(values.dim(0)) * kh * kw);
  for (int o = 0; o < values.dim(0); ++o)
    for (int py = 0; py < kh; ++py)
      for (int px = 0; px < kw; ++px) {
        const int y = loc.y + py - ry, x = loc.x + px - rx;
        if (y >= 0 && y < values.dim(1) && x >= 0 && x < values.dim(2)) v((o * kh + py) * kw + px) = values.at(o, y, x);
      }
  return v;
}

}  // namespace remem
