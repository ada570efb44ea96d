#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "oracles.hpp"
#include "remem/error.hpp"
#include "remem/rankreduce.hpp"

using namespace remem;
namespace fs = std::filesystem;

namespace {

KeyStats random_stats(int n, std::uint64_t seed) {
  return key_stats_from_moment(oracle::random_psd(n, seed) / n + 0.1 * Matrix::Identity(n, n));
}

// Whitened basis of D (columns of Z^{-1} D, orthonormalized) for trace comparisons.
Matrix whitened_basis(const DirectionSet& ds, const KeyStats& stats) {
  return oracle::gram_schmidt(stats.z.inverse() * ds.d);
}

}  // namespace

TEST_SUITE("rankreduce") {

TEST_CASE("whiten_context") {
  const Matrix k = oracle::random_matrix(4, 6, 1);
  SUBCASE("Z = I") { CHECK((whiten_context(k, key_stats_from_moment(Matrix::Identity(4, 4), 0.0)) - k).norm() < 1e-12); }
  SUBCASE("diagonal C scales each axis by 1/sqrt(sigma)") {
    Vector diag(4);
    diag << 1, 4, 9, 16;
    const Matrix w = whiten_context(k, key_stats_from_moment(Matrix(diag.asDiagonal()), 0.0));
    for (int i = 0; i < 4; ++i) CHECK((w.row(i) - k.row(i) / std::sqrt(diag(i))).norm() < 1e-10);
  }
  SUBCASE("un-whitening recovers the context") {
    const KeyStats s = random_stats(5, 2);
    const Matrix kk = oracle::random_matrix(5, 7, 3);
    CHECK((oracle::gauss_solve(s.z, whiten_context(kk, s)) - kk).norm() < 1e-5 * kk.norm());
  }
  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(whiten_context(k, random_stats(3, 4)), ValidationError); }
}

TEST_CASE("context_information") {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  CHECK(context_information(Matrix::Zero(5, 3), 5, 3) == doctest::Approx(5.0 / 6.0 * log2pi));
  Matrix unit = Matrix::Zero(4, 1);
  unit(2, 0) = 1.0;
  CHECK(context_information(unit, 4, 1) == doctest::Approx(0.5 + 2.0 * log2pi));
  const Matrix k = oracle::random_matrix(6, 9, 5);
  double sum = 0.0;
  for (int j = 0; j < 9; ++j)
    for (int i = 0; i < 6; ++i) sum += k(i, j) * k(i, j);
  CHECK(context_information(k, 6, 9) == doctest::Approx(sum / 18.0 + 6.0 / 18.0 * log2pi));
  CHECK_THROWS_AS(context_information(k, 6, 0), ValidationError);
}

TEST_CASE("reduce_context examples") {
  SUBCASE("columns along one whitened direction") {
    const KeyStats s = random_stats(5, 6);
    const Vector q = oracle::random_matrix(5, 1, 7).col(0).normalized();
    Matrix kw(5, 4);
    for (int j = 0; j < 4; ++j) kw.col(j) = (0.5 + j) * q;
    const Matrix k_ctx = oracle::gauss_solve(s.z, kw);
    const DirectionSet ds = reduce_context(k_ctx, s, 1);
    CHECK(linalg::max_principal_angle(ds.d, s.z * q) < 1e-6);
    CHECK(ds.d.col(0).norm() == doctest::Approx(1.0));
  }
  SUBCASE("T = 1 gives the single-key update direction") {
    for (std::uint64_t i = 0; i < 20; ++i) {
      const KeyStats s = random_stats(6, 100 + i);
      const Vector k = oracle::random_matrix(6, 1, 200 + i).col(0);
      const DirectionSet ds = reduce_context(k, s, 1);
      const Vector d = update_direction(s, k).normalized();
      CHECK(std::abs(ds.d.col(0).dot(d)) > 1.0 - 1e-10);
      CHECK(linalg::max_principal_angle(ds.d, d) < 1e-5);
    }
  }
  SUBCASE("rank errors name the achievable rank") {
    const KeyStats s = random_stats(4, 8);
    const Matrix k = oracle::random_matrix(4, 1, 9) * oracle::random_matrix(1, 5, 10);
    CHECK_THROWS_WITH_AS(reduce_context(k, s, 2), doctest::Contains("numerical rank 1"), ValidationError);
    CHECK_THROWS_AS(reduce_context(k, s, 0), ValidationError);
    CHECK_THROWS_AS(reduce_context(oracle::random_matrix(4, 2, 11), s, 3), ValidationError);
    CHECK_THROWS_AS(reduce_context(Matrix(4, 0), s, 1), ValidationError);
  }
}

TEST_CASE("top-S projection captures more than 2000 random projections") {
  const int n = 3;
  const KeyStats s = random_stats(n, 12);
  const Matrix k = oracle::random_matrix(n, 8, 13);
  const Matrix kw = whiten_context(k, s);
  const Matrix m = kw * kw.transpose();
  for (int rank = 1; rank <= 2; ++rank) {
    const Matrix q = whitened_basis(reduce_context(k, s, rank), s);
    const double best = (q.transpose() * m * q).trace();
    int beaten = 0;
    for (std::uint64_t i = 0; i < 2000; ++i)
      if (oracle::random_projection_trace(m, rank, 5000 + i) > best + 1e-9) ++beaten;
    CHECK(beaten == 0);
  }
}

TEST_CASE("reduce_context subspace invariances") {
  for (std::uint64_t i = 0; i < 10; ++i) {
    const KeyStats s = random_stats(7, 300 + i);
    const Matrix k = oracle::random_matrix(7, 6, 400 + i);
    const int rank = 1 + static_cast<int>(i % 4);
    const DirectionSet base = reduce_context(k, s, rank);
    Matrix perm(7, 6);
    for (int j = 0; j < 6; ++j) perm.col(j) = k.col((j * 5 + 3) % 6);
    Matrix dup(7, 12);
    dup << k, k;
    CHECK(linalg::max_principal_angle(base.d, reduce_context(perm, s, rank).d) < 1e-6);
    CHECK(linalg::max_principal_angle(base.d, reduce_context(dup, s, rank).d) < 1e-6);
    // Columns independent.
    const Eigen::JacobiSVD<Matrix> svd(base.d);
    CHECK(svd.singularValues()(rank - 1) > 1e-8 * svd.singularValues()(0));
  }
}

TEST_CASE("retained trace is monotone in S and complete at full rank") {
  const KeyStats s = random_stats(6, 20);
  const Matrix k = oracle::random_matrix(6, 4, 21);
  const Matrix kw = whiten_context(k, s);
  const Matrix m = kw * kw.transpose();
  double prev = 0.0;
  for (int rank = 1; rank <= 4; ++rank) {
    const Matrix q = whitened_basis(reduce_context(k, s, rank), s);
    const double tr = (q.transpose() * m * q).trace();
    CHECK(tr >= prev - 1e-9);
    prev = tr;
  }
  CHECK(prev == doctest::Approx(m.trace()).epsilon(1e-8));
}

TEST_CASE("axis-aligned scores") {
  SUBCASE("e1 column with unit sigma") {
    Matrix k = Matrix::Zero(4, 1);
    k(0, 0) = 1.0;
    const AxisScores a = axis_aligned_scores(k, Vector::Ones(4));
    CHECK(a.scores(0) == 1.0);
    CHECK(a.scores.tail(3).isZero());
    CHECK(a.order == std::vector<int>{0, 1, 2, 3});
  }
  SUBCASE("doubling sigma quarters the score") {
    const Matrix k = oracle::random_matrix(3, 5, 22);
    Vector sigma = Vector::Ones(3);
    const double before = axis_aligned_scores(k, sigma).scores(1);
    sigma(1) = 2.0;
    CHECK(axis_aligned_scores(k, sigma).scores(1) == doctest::Approx(before / 4.0));
  }
  SUBCASE("random case matches direct summation and sorts descending") {
    const Matrix k = oracle::random_matrix(6, 4, 23);
    Vector sigma(6);
    for (int i = 0; i < 6; ++i) sigma(i) = 0.5 + i;
    const AxisScores a = axis_aligned_scores(k, sigma);
    for (int i = 0; i < 6; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 4; ++j) sum += k(i, j) * k(i, j) / (sigma(i) * sigma(i));
      CHECK(a.scores(i) == doctest::Approx(sum));
    }
    for (std::size_t r = 1; r < a.order.size(); ++r) CHECK(a.scores(a.order[r - 1]) >= a.scores(a.order[r]));
  }
  SUBCASE("zero sigma") {
    Vector sigma = Vector::Ones(3);
    sigma(2) = 0.0;
    CHECK_THROWS_WITH_AS(axis_aligned_scores(Matrix::Ones(3, 1), sigma), doctest::Contains("unit 2"), ValidationError);
  }
}

TEST_CASE("direction set round-trip") {
  const KeyStats s = random_stats(5, 30);
  const DirectionSet ds = reduce_context(oracle::random_matrix(5, 3, 31), s, 2);
  const fs::path p = fs::temp_directory_path() / "remem-test-ds.gtf";
  save_direction_set(p, ds);
  const DirectionSet back = load_direction_set(p);
  CHECK((back.d - ds.d).norm() < 1e-6);
  CHECK(back.context_hash == ds.context_hash);
  CHECK(back.stats_hash == ds.stats_hash);
  fs::remove(p);
}

}  // TEST_SUITE
