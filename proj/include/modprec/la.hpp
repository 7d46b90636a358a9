#pragma once

#include <Eigen/Dense>

namespace modprec {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Frobenius inner product <a, b> = sum_ij a_ij * b_ij.
inline double frob_dot(const Mat& a, const Mat& b) {
    return (a.array() * b.array()).sum();
}

inline double frob_norm(const Mat& a) { return a.norm(); }

/// Largest absolute entry (0 for empty matrices).
inline double max_abs(const Mat& a) {
    return a.size() > 0 ? a.cwiseAbs().maxCoeff() : 0.0;
}

/// Column-major vectorization. All Kronecker identities in this library are
/// stated under this convention: vec(L*G*R) = (R ⊗ L) vec(G) for symmetric R.
inline Vec vectorize(const Mat& g) {
    return Eigen::Map<const Vec>(g.data(), g.size());
}

inline Mat unvectorize(const Vec& v, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<const Mat>(v.data(), rows, cols);
}

inline bool all_finite(const Mat& a) { return a.allFinite(); }

} // namespace modprec
