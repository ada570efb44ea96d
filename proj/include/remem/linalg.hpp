#pragma once

// Dense double-precision linear algebra used by the associative-memory code.
// Backed by Eigen; everything here is a pure function of its arguments.

#include <Eigen/Dense>

namespace remem::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct EigenDecomposition {
  Vector values;   // descending
  Matrix vectors;  // orthonormal columns, column i pairs with values(i)
};

/// Minimizes ||V - W K||_F over W. Falls back to the minimum-norm solution
/// (W = V K^+) when K K^T is singular.
Matrix solve_least_squares(const Matrix& keys, const Matrix& values);

/// Moore-Penrose pseudoinverse via SVD.
Matrix pseudoinverse(const Matrix& a);

/// Eigendecomposition of a symmetric PSD matrix, eigenvalues descending.
/// Values in [-tol, 0) are clamped to zero; anything below -tol throws.
EigenDecomposition sym_eig(const Matrix& c, double tol = 1e-9);

/// Symmetric whitening transform C^{-1/2}; eigenvalues below epsilon are
/// raised to epsilon first.
Matrix zca(const EigenDecomposition& stats, double epsilon);

/// Best rank-`rank` approximation in Frobenius norm. Rank is clamped to
/// min(rows, cols).
Matrix svd_truncate(const Matrix& m, int rank);

/// Symmetric PSD square root through the eigendecomposition.
Matrix sqrtm_psd(const Matrix& c, double tol = 1e-9);

/// Frechet distance between N(mu1, cov1) and N(mu2, cov2).
double frechet_gaussian(const Vector& mu1, const Matrix& cov1, const Vector& mu2,
                        const Matrix& cov2);

/// Number of singular values above rel_tol times the largest.
int numerical_rank(const Matrix& m, double rel_tol = 1e-10);

/// Largest principal angle (radians) between the column spans of a and b.
double max_principal_angle(const Matrix& a, const Matrix& b);

bool all_finite(const Matrix& m);

}  // namespace remem::linalg
