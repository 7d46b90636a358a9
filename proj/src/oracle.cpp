#include "modprec/oracle.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace modprec::oracle {

DenseFisher empirical_fisher(const std::vector<Vec>& sample_grads, double damping) {
    if (sample_grads.empty()) {
        throw ValidationError("empirical_fisher: need at least one sample gradient");
    }
    const Eigen::Index d = sample_grads.front().size();
    Mat f = Mat::Zero(d, d);
    for (const Vec& g : sample_grads) {
        if (g.size() != d) throw ValidationError("empirical_fisher: inconsistent dimensions");
        f.noalias() += g * g.transpose();
    }
    f /= static_cast<double>(sample_grads.size());
    const double lam_max = Eigen::SelfAdjointEigenSolver<Mat>(f).eigenvalues().maxCoeff();
    f += (damping * std::max(lam_max, 0.0)) * Mat::Identity(d, d);
    return DenseFisher{std::move(f), damping};
}

Vec ngd_direction(const DenseFisher& fisher, const Vec& g) {
    if (fisher.dim() != g.size()) throw ValidationError("ngd_direction: dimension mismatch");
    Eigen::LDLT<Mat> solver(fisher.f);
    if (solver.info() != Eigen::Success) {
        throw NumericalError("ngd_direction: Fisher factorization failed");
    }
    Vec d = solver.solve(g);
    const double g_norm = g.norm();
    const double residual = (fisher.f * d - g).norm();
    if (g_norm > 0.0 && residual > 1e-10 * g_norm) {
        std::ostringstream os;
        os << "ngd_direction: solve residual " << residual / g_norm
           << " exceeds 1e-10 (Fisher singular after damping?)";
        throw NumericalError(os.str());
    }
    return d;
}

double ngd_norm_identity(const std::vector<Vec>& sample_grads, double damping) {
    const DenseFisher fisher = empirical_fisher(sample_grads, damping);
    double acc = 0.0;
    for (const Vec& g : sample_grads) acc += g.dot(ngd_direction(fisher, g));
    return acc / static_cast<double>(sample_grads.size());
}

double surrogate_value(const Vec& g_i, const DenseFisher& fisher, const Vec& d) {
    if (g_i.size() != d.size() || fisher.dim() != d.size()) {
        throw ValidationError("surrogate_value: dimension mismatch");
    }
    return -g_i.dot(d) + 0.5 * d.dot(fisher.f * d);
}

Vec dense_orthogonal_residual(const Vec& g_avg, const Vec& g_diff, const Mat& fisher,
                              double eps) {
    if (g_avg.size() != g_diff.size() || fisher.rows() != g_avg.size() ||
        fisher.cols() != g_avg.size()) {
        throw ValidationError("dense_orthogonal_residual: dimension mismatch");
    }
    const Vec m_avg = fisher * g_avg;
    const double denom = g_avg.dot(m_avg);
    if (denom + eps <= 0.0) {
        throw ValidationError("dense_orthogonal_residual: zero mean gradient with zero stabilizer");
    }
    const double s = g_diff.dot(m_avg) / (denom + eps);
    return g_diff - s * g_avg;
}

BruteForceBeta brute_force_beta(const Vec& g_avg, const Vec& g_diff, const DenseFisher& fisher,
                                const BetaGrid& grid) {
    if (grid.steps < 2 || !(grid.hi > grid.lo)) {
        throw ValidationError("brute_force_beta: degenerate grid");
    }
    const Vec g2 = g_avg - 0.5 * g_diff;
    const Vec base = ngd_direction(fisher, g_avg); // F^-1 g_avg
    const double j_soap = surrogate_value(g2, fisher, base);

    const Vec r = dense_orthogonal_residual(g_avg, g_diff, fisher.f, 0.0);
    const double r_scale = r.norm();
    if (r_scale <= 1e-14 * std::max(1.0, g_diff.norm())) {
        return BruteForceBeta{0.0, j_soap};
    }
    const Vec correction = ngd_direction(fisher, r); // F^-1 r

    BruteForceBeta best{0.0, std::numeric_limits<double>::infinity()};
    const double step = (grid.hi - grid.lo) / static_cast<double>(grid.steps - 1);
    for (long i = 0; i < grid.steps; ++i) {
        const double beta = grid.lo + step * static_cast<double>(i);
        const Vec d = base + beta * correction;
        const double j = surrogate_value(g2, fisher, d);
        if (j < best.j_min) {
            best.beta_hat = beta;
            best.j_min = j;
        }
    }
    return best;
}

} // namespace modprec::oracle
