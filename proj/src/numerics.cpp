#include "modprec/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace modprec::numerics {

void require_symmetric(const Mat& a, double tol) {
    if (a.rows() != a.cols()) {
        std::ostringstream os;
        os << "matrix is not square: " << a.rows() << "x" << a.cols();
        throw ValidationError(os.str());
    }
    const double scale = std::max(1.0, max_abs(a));
    const double worst = max_abs(a - a.transpose());
    if (worst > tol * scale) {
        std::ostringstream os;
        os << "matrix is not symmetric: max |A - A^T| = " << worst
           << " exceeds " << tol * scale;
        throw ValidationError(os.str());
    }
}

EigenPair sym_eigh(const Mat& a) {
    require_symmetric(a);
    // Work on the symmetrized matrix so the decomposition is exact for inputs
    // that are only symmetric to tolerance.
    Mat sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> solver(sym);
    if (solver.info() != Eigen::Success) {
        throw NumericalError("symmetric eigendecomposition did not converge");
    }
    return EigenPair{solver.eigenvalues(), solver.eigenvectors()};
}

Mat inverse_pth_root(const Mat& a, int p, double damping) {
    if (p <= 0 || p % 2 != 0) {
        std::ostringstream os;
        os << "inverse_pth_root requires a positive even p, got " << p;
        throw ValidationError(os.str());
    }
    if (damping < 0.0) {
        throw ValidationError("inverse_pth_root requires damping >= 0");
    }
    EigenPair eig = sym_eigh(a);
    const double lam_max = eig.eigenvalues.size() > 0 ? eig.eigenvalues.maxCoeff() : 0.0;
    const double neg_floor = -1e-8 * std::max(lam_max, 0.0);
    if (eig.eigenvalues.minCoeff() < neg_floor) {
        std::ostringstream os;
        os << "matrix is not PSD: smallest eigenvalue " << eig.eigenvalues.minCoeff()
           << " below tolerance " << neg_floor;
        throw ValidationError(os.str());
    }
    const double eps = damping * std::max(lam_max, 1e-30);
    Vec powered(eig.eigenvalues.size());
    for (Eigen::Index i = 0; i < eig.eigenvalues.size(); ++i) {
        const double lam = std::max(eig.eigenvalues[i] + eps, eps);
        if (lam <= 0.0) {
            throw NumericalError("inverse_pth_root: singular matrix with zero damping");
        }
        powered[i] = std::pow(lam, -1.0 / static_cast<double>(p));
    }
    Mat root = eig.eigenvectors * powered.asDiagonal() * eig.eigenvectors.transpose();
    return 0.5 * (root + root.transpose());
}

Mat kron_apply(const Mat& l, const Mat& r, const Mat& g) {
    if (l.rows() != l.cols() || r.rows() != r.cols()) {
        throw ValidationError("kron_apply: factors must be square");
    }
    if (l.cols() != g.rows() || r.rows() != g.cols()) {
        std::ostringstream os;
        os << "kron_apply: dimension mismatch, L is " << l.rows() << "x" << l.cols()
           << ", R is " << r.rows() << "x" << r.cols()
           << ", G is " << g.rows() << "x" << g.cols();
        throw ValidationError(os.str());
    }
    return l * g * r;
}

Mat kron_product(const Mat& a, const Mat& b) {
    Mat out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
        }
    }
    return out;
}

} // namespace modprec::numerics
