#include "modprec/fop.hpp"

#include <algorithm>
#include <cmath>

namespace modprec::fop {

void FopSettings::validate() const {
    if (!(eps > 0.0)) throw ValidationError("fop: eps must be positive");
    if (!(beta_clip > 0.0)) throw ValidationError("fop: beta_clip must be positive");
    if (!(kappa > 0.0)) throw ValidationError("fop: kappa must be positive");
}

Mat metric_apply(const precond::FactorState& state, const Mat& v) {
    if (state.step < 1 || state.L.size() == 0) return v;
    if (v.rows() != state.rows() || v.cols() != state.cols()) {
        throw ValidationError("metric_apply: shape mismatch between vector and factor state");
    }
    return state.L * v * state.R;
}

Mat orthogonal_residual(const GradientPair& pair, const precond::FactorState& state, double eps) {
    if (pair.g_avg.rows() != pair.g_diff.rows() || pair.g_avg.cols() != pair.g_diff.cols()) {
        throw ValidationError("orthogonal_residual: g_avg and g_diff shapes differ");
    }
    const Mat m_avg = metric_apply(state, pair.g_avg);
    const double denom = frob_dot(pair.g_avg, m_avg);
    if (denom + eps <= 0.0) {
        throw ValidationError("orthogonal_residual: zero mean gradient with zero stabilizer");
    }
    const double s = frob_dot(pair.g_diff, m_avg) / (denom + eps);
    return pair.g_diff - s * pair.g_avg;
}

namespace {

double clamp_beta(double beta, double clip) { return std::clamp(beta, -clip, clip); }

} // namespace

double mixing_coefficient(const Mat& g_avg, const Mat& residual,
                          const precond::FactorState& state, const FopSettings& settings,
                          const OracleContext* oracle) {
    settings.validate();
    switch (settings.beta_policy) {
    case BetaPolicy::fixed:
        return clamp_beta(settings.beta_value, settings.beta_clip);
    case BetaPolicy::normalized: {
        const double avg_norm = std::sqrt(std::max(0.0, frob_dot(g_avg, metric_apply(state, g_avg))));
        const double res_norm = std::sqrt(std::max(0.0, frob_dot(residual, metric_apply(state, residual))));
        return clamp_beta(settings.kappa * avg_norm / (res_norm + settings.eps), settings.beta_clip);
    }
    case BetaPolicy::optimal_oracle: {
        if (oracle == nullptr) {
            throw ConfigError("mixing_coefficient: optimal_oracle policy needs a dense Fisher");
        }
        const Vec r = vectorize(residual);
        const Vec d = vectorize(oracle->g_diff);
        if (oracle->fisher.rows() != r.size() || oracle->fisher.cols() != r.size()) {
            throw ValidationError("mixing_coefficient: dense Fisher has wrong dimension");
        }
        Eigen::LDLT<Mat> solver(oracle->fisher);
        if (solver.info() != Eigen::Success) {
            throw NumericalError("mixing_coefficient: dense Fisher factorization failed");
        }
        const Vec finv_r = solver.solve(r);
        const double denom = r.dot(finv_r);
        if (denom <= 0.0) return 0.0; // degenerate residual, no correction
        return clamp_beta(-0.5 * d.dot(finv_r) / denom, settings.beta_clip);
    }
    }
    throw ConfigError("mixing_coefficient: unknown beta policy");
}

Mat combine(const Mat& g_avg, const Mat& residual, double beta) {
    if (g_avg.rows() != residual.rows() || g_avg.cols() != residual.cols()) {
        throw ValidationError("combine: shape mismatch");
    }
    return g_avg + beta * residual;
}

} // namespace modprec::fop
