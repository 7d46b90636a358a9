#pragma once

#include "modprec/errors.hpp"
#include "modprec/la.hpp"
#include "modprec/preconditioners.hpp"

namespace modprec::fop {

enum class BetaPolicy {
    fixed,         // beta = beta_value
    normalized,    // beta = kappa * |g_avg|_M / (|r|_M + eps)
    optimal_oracle // beta = -1/2 <g_diff, F^-1 r> / <r, F^-1 r>, dense Fisher required
};

struct FopSettings {
    BetaPolicy beta_policy = BetaPolicy::normalized;
    double beta_value = 0.0;
    double kappa = 1.0;
    double eps = 1e-12;
    double beta_clip = 10.0;

    void validate() const;
};

/// Average and difference of two stochastic gradients from distinct
/// micro-batches; g_diff carries the within-window heterogeneity.
struct GradientPair {
    Mat g_avg;
    Mat g_diff;
};

/// Dense-Fisher context for the optimal_oracle beta policy (test use only).
/// The Fisher acts on column-major vectorized gradients.
struct OracleContext {
    Mat fisher;
    Mat g_diff;
};

/// Forward metric proxy M(V) = L * V * R built from the factor state.
/// Falls back to the identity metric while the factors were never updated.
Mat metric_apply(const precond::FactorState& state, const Mat& v);

/// Projects g_diff away from g_avg under the proxy metric:
///   r = g_diff - s * g_avg,  s = <g_diff, M(g_avg)> / (<g_avg, M(g_avg)> + eps)
/// so that <r, M(g_avg)> vanishes up to the eps stabilizer.
Mat orthogonal_residual(const GradientPair& pair, const precond::FactorState& state, double eps);

/// Mixing coefficient for the combined direction, per FopSettings policy.
/// Every policy's result is clamped to [-beta_clip, +beta_clip].
double mixing_coefficient(const Mat& g_avg, const Mat& residual,
                          const precond::FactorState& state, const FopSettings& settings,
                          const OracleContext* oracle = nullptr);

/// g_comb = g_avg + beta * residual.
Mat combine(const Mat& g_avg, const Mat& residual, double beta);

} // namespace modprec::fop
