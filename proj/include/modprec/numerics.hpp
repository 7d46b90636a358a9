#pragma once

#include "modprec/errors.hpp"
#include "modprec/la.hpp"

namespace modprec::numerics {

/// Eigendecomposition of a symmetric matrix: A = Q diag(lambda) Q^T with
/// eigenvalues ascending and Q orthonormal.
struct EigenPair {
    Vec eigenvalues;
    Mat eigenvectors;
};

/// Symmetry tolerance used by all entry points:
/// |A(i,j) - A(j,i)| <= tol * max(1, max_abs(A)).
void require_symmetric(const Mat& a, double tol = 1e-10);

/// Throws ValidationError on non-symmetric input, NumericalError if the
/// solver does not converge.
EigenPair sym_eigh(const Mat& a);

/// (A + eps*I)^(-1/p) for symmetric PSD A and even p, with relative damping
/// eps = damping * max(lambda_max(A), 1e-30). Eigenvalues are clamped at eps
/// from below before the negative power, which keeps rank-deficient factors
/// usable. Throws ValidationError if A has an eigenvalue below
/// -1e-8 * lambda_max.
Mat inverse_pth_root(const Mat& a, int p, double damping);

/// Kronecker-metric application in matrix form: L * G * R.
/// Under column-major vec this equals unvec((R ⊗ L) vec(G)) for symmetric R;
/// the explicit product is only ever materialized by kron_product below.
Mat kron_apply(const Mat& l, const Mat& r, const Mat& g);

/// Explicit Kronecker product A ⊗ B, materialized densely. Reference route
/// for equivalence tests; quadratic in the factor sizes, never used by the
/// optimizer paths.
Mat kron_product(const Mat& a, const Mat& b);

} // namespace modprec::numerics
