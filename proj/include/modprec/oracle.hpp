#pragma once

#include <vector>

#include "modprec/errors.hpp"
#include "modprec/la.hpp"

namespace modprec::oracle {

// Exact dense references. Everything here is O(d^3) and meant for d <= 64:
// these routines exist to check the scalable factored paths, not to be fast.

struct DenseFisher {
    Mat f;
    double damping = 0.0;

    Eigen::Index dim() const { return f.rows(); }
};

/// Uncentered second moment of the sample gradients with relative damping:
/// F = (1/N) sum g_i g_i^T + damping * lambda_max * I.
DenseFisher empirical_fisher(const std::vector<Vec>& sample_grads, double damping);

/// Solves F d = g to relative residual 1e-10.
Vec ngd_direction(const DenseFisher& fisher, const Vec& g);

/// (1/N) sum_i g_i^T F^-1 g_i with F the empirical Fisher of the same
/// samples; equals the dimension when the Fisher is full rank and the damping
/// is negligible.
double ngd_norm_identity(const std::vector<Vec>& sample_grads, double damping);

/// Local quadratic surrogate J_i(d) = -g_i^T d + 1/2 d^T F d.
double surrogate_value(const Vec& g_i, const DenseFisher& fisher, const Vec& d);

/// Fisher-orthogonal residual under the dense metric (reference route,
/// independent of the Kronecker proxy).
Vec dense_orthogonal_residual(const Vec& g_avg, const Vec& g_diff, const Mat& fisher,
                              double eps);

struct BetaGrid {
    double lo = -5.0;
    double hi = 5.0;
    long steps = 100000;
};

struct BruteForceBeta {
    double beta_hat = 0.0;
    double j_min = 0.0;
};

/// Grid-minimizes the second modality's surrogate J_2(F^-1 (g_avg + beta r))
/// over beta, with g_2 = g_avg - g_diff/2 and r the dense Fisher-orthogonal
/// residual. Returns (0, J_2 of the plain preconditioned mean) when the
/// residual is degenerate.
BruteForceBeta brute_force_beta(const Vec& g_avg, const Vec& g_diff, const DenseFisher& fisher,
                                const BetaGrid& grid);

} // namespace modprec::oracle
