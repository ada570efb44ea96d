#include "remem/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "remem/error.hpp"

namespace remem::linalg {

namespace {

void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m)) throw ValidationError(std::string(what) + ": non-finite entries");
}

Eigen::JacobiSVD<Matrix> thin_svd(const Matrix& m) {
  return Eigen::JacobiSVD<Matrix>(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
}

// Orthonormal basis for the column span, dropping directions below rel_tol.
Matrix span_basis(const Matrix& a, double rel_tol = 1e-10) {
  if (a.cols() == 0) return Matrix(a.rows(), 0);
  auto svd = thin_svd(a);
  const auto& s = svd.singularValues();
  int r = 0;
  const double top = s.size() ? s(0) : 0.0;
  while (r < s.size() && s(r) > rel_tol * top && s(r) > 0.0) ++r;
  return svd.matrixU().leftCols(r);
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

Matrix solve_least_squares(const Matrix& keys, const Matrix& values) {
  if (keys.cols() != values.cols()) {
    throw ValidationError("solve_least_squares: keys have " + std::to_string(keys.cols()) +
                          " columns but values have " + std::to_string(values.cols()));
  }
  if (keys.cols() < 1) throw ValidationError("solve_least_squares: need at least one pair");
  require_finite(keys, "solve_least_squares keys");
  require_finite(values, "solve_least_squares values");
  // min ||K^T W^T - V^T||, minimum norm when rank deficient.
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(keys.transpose());
  Matrix wt = cod.solve(values.transpose());
  return wt.transpose();
}

Matrix pseudoinverse(const Matrix& a) {
  require_finite(a, "pseudoinverse");
  if (a.size() == 0) return Matrix(a.cols(), a.rows());
  auto svd = thin_svd(a);
  const auto& s = svd.singularValues();
  const double tol = std::max(a.rows(), a.cols()) * std::numeric_limits<double>::epsilon() *
                     (s.size() ? s(0) : 0.0);
  Vector inv = s;
  for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) > tol ? 1.0 / s(i) : 0.0;
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

EigenDecomposition sym_eig(const Matrix& c, double tol) {
  if (c.rows() != c.cols()) throw ValidationError("sym_eig: matrix is not square");
  require_finite(c, "sym_eig");
  const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
  if ((c - c.transpose()).cwiseAbs().maxCoeff() > tol * scale) {
    throw ValidationError("sym_eig: matrix is not symmetric");
  }
  Matrix sym = 0.5 * (c + c.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
  if (solver.info() != Eigen::Success) throw NumericalError("sym_eig: eigensolver failed");
  const Eigen::Index n = c.rows();
  EigenDecomposition out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  const double top = n ? std::abs(solver.eigenvalues()(n - 1)) : 0.0;
  const double floor = -tol * std::max(1.0, top);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index src = n - 1 - i;
    double v = solver.eigenvalues()(src);
    if (v < floor) {
      throw NumericalError("sym_eig: significantly negative eigenvalue " + std::to_string(v) +
                           " (matrix is not PSD)");
    }
    out.values(i) = std::max(v, 0.0);
    out.vectors.col(i) = solver.eigenvectors().col(src);
  }
  return out;
}

Matrix zca(const EigenDecomposition& stats, double epsilon) {
  Vector scale = stats.values;
  for (Eigen::Index i = 0; i < scale.size(); ++i) {
    scale(i) = 1.0 / std::sqrt(std::max(scale(i), epsilon));
  }
  Matrix z = stats.vectors * scale.asDiagonal() * stats.vectors.transpose();
  return 0.5 * (z + z.transpose());
}

Matrix svd_truncate(const Matrix& m, int rank) {
  if (rank < 1) throw ValidationError("svd_truncate: rank must be >= 1");
  require_finite(m, "svd_truncate");
  const int full = static_cast<int>(std::min(m.rows(), m.cols()));
  if (full == 0) return m;
  const int r = std::min(rank, full);
  auto svd = thin_svd(m);
  return svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal() *
         svd.matrixV().leftCols(r).transpose();
}

Matrix sqrtm_psd(const Matrix& c, double tol) {
  auto eig = sym_eig(c, tol);
  Vector root = eig.values.cwiseSqrt();
  Matrix s = eig.vectors * root.asDiagonal() * eig.vectors.transpose();
  return 0.5 * (s + s.transpose());
}

double frechet_gaussian(const Vector& mu1, const Matrix& cov1, const Vector& mu2,
                        const Matrix& cov2) {
  const Eigen::Index n = mu1.size();
  if (mu2.size() != n || cov1.rows() != n || cov1.cols() != n || cov2.rows() != n ||
      cov2.cols() != n) {
    throw ValidationError("frechet_gaussian: dimension mismatch");
  }
  // tr((S1 S2)^{1/2}) = tr((S1^{1/2} S2 S1^{1/2})^{1/2}), the inner product is symmetric.
  const double tol = 1e-8;
  Matrix root1 = sqrtm_psd(cov1, tol);
  sym_eig(cov2, tol);  // PSD check
  Matrix inner = root1 * cov2 * root1;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(inner, Eigen::EigenvaluesOnly);
  double trace_root = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) trace_root += std::sqrt(std::max(solver.eigenvalues()(i), 0.0));
  const double value =
      (mu1 - mu2).squaredNorm() + cov1.trace() + cov2.trace() - 2.0 * trace_root;
  return std::max(value, 0.0);
}

int numerical_rank(const Matrix& m, double rel_tol) {
  if (m.size() == 0) return 0;
  return static_cast<int>(span_basis(m, rel_tol).cols());
}

double max_principal_angle(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ValidationError("max_principal_angle: row mismatch");
  Matrix qa = span_basis(a);
  Matrix qb = span_basis(b);
  if (qa.cols() == 0 || qb.cols() == 0) return 0.0;
  if (qa.cols() > qb.cols()) std::swap(qa, qb);
  // sin of the largest angle is the norm of the part of span(a) outside span(b);
  // this stays accurate for tiny angles where acos of the cosine would not.
  Matrix residual = qa - qb * (qb.transpose() * qa);
  Eigen::JacobiSVD<Matrix> svd(residual);
  const double sine = std::min(1.0, svd.singularValues()(0));
  return std::asin(sine);
}

}  // namespace remem::linalg
