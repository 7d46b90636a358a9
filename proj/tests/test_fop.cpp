#include <doctest.h>

#include <cmath>

#include "modprec/fop.hpp"
#include "modprec/rng.hpp"

using namespace modprec;
using namespace modprec::fop;

namespace {

Mat random_gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

Mat random_spd(Rng& rng, Eigen::Index d) {
    const Mat g = random_gaussian(rng, d, d + 2);
    Mat m = g * g.transpose() / static_cast<double>(d + 2);
    return 0.5 * (m + m.transpose());
}

precond::FactorState metric_state(const Mat& l, const Mat& r) {
    precond::FactorState state(l.rows(), r.rows());
    state.L = l;
    state.R = r;
    state.step = 1;
    return state;
}

Mat col2(double a, double b) {
    Mat m(2, 1);
    m << a, b;
    return m;
}

} // namespace

TEST_CASE("metric_apply falls back to the identity before any factor update") {
    precond::FactorState state(2, 2);
    Rng rng(1);
    const Mat v = random_gaussian(rng, 2, 2);
    CHECK(max_abs(metric_apply(state, v) - v) == 0.0);
}

TEST_CASE("metric_apply with scalar factors") {
    const auto state = metric_state(2.0 * Mat::Identity(2, 2), 3.0 * Mat::Identity(2, 2));
    Rng rng(2);
    const Mat v = random_gaussian(rng, 2, 2);
    CHECK(max_abs(metric_apply(state, v) - 6.0 * v) <= 1e-14);
}

TEST_CASE("metric_apply is self-adjoint for SPD factors") {
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto state = metric_state(random_spd(rng, 3), random_spd(rng, 2));
        const Mat u = random_gaussian(rng, 3, 2);
        const Mat v = random_gaussian(rng, 3, 2);
        CHECK(frob_dot(u, metric_apply(state, v)) ==
              doctest::Approx(frob_dot(metric_apply(state, u), v)).epsilon(1e-10));
    }
}

TEST_CASE("metric_apply rejects shape mismatch") {
    const auto state = metric_state(Mat::Identity(2, 2), Mat::Identity(2, 2));
    CHECK_THROWS_AS(metric_apply(state, Mat::Zero(3, 2)), ValidationError);
}

TEST_CASE("orthogonal_residual: parallel difference vanishes") {
    precond::FactorState identity_state(2, 1);
    const Mat g_avg = col2(1.0, 2.0);
    const Mat g_diff = 3.0 * g_avg;
    const Mat r = orthogonal_residual({g_avg, g_diff}, identity_state, 1e-12);
    CHECK(frob_norm(r) <= 1e-10 * frob_norm(g_diff) + 1e-9);
}

TEST_CASE("orthogonal_residual: Euclidean projection example") {
    precond::FactorState identity_state(2, 1);
    const Mat r = orthogonal_residual({col2(1, 0), col2(1, 1)}, identity_state, 0.0);
    CHECK(r(0, 0) == doctest::Approx(0.0));
    CHECK(r(1, 0) == doctest::Approx(1.0));
}

TEST_CASE("orthogonal_residual: anisotropic metric example") {
    Mat l(2, 2);
    l << 4.0, 0.0, 0.0, 1.0;
    const auto state = metric_state(l, Mat::Identity(1, 1));
    const Mat g_avg = col2(1, 0);
    const Mat g_diff = col2(1, 1);
    const double eps = 1e-12;
    const Mat r = orthogonal_residual({g_avg, g_diff}, state, eps);
    // projection coefficient <(1,1),(4,0)> / (4 + eps) = 1
    CHECK(r(0, 0) == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(r(1, 0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::abs(frob_dot(r, metric_apply(state, g_avg))) <= 1e-10);
}

TEST_CASE("orthogonal_residual: zero mean with zero stabilizer is rejected") {
    precond::FactorState identity_state(2, 1);
    CHECK_THROWS_AS(orthogonal_residual({Mat::Zero(2, 1), col2(1, 1)}, identity_state, 0.0),
                    ValidationError);
    CHECK_THROWS_AS(orthogonal_residual({col2(1, 0), Mat::Zero(3, 1)}, identity_state, 1e-12),
                    ValidationError);
}

TEST_CASE("orthogonal_residual is idempotent") {
    Rng rng(5);
    for (int i = 0; i < 30; ++i) {
        const auto state = metric_state(random_spd(rng, 3), random_spd(rng, 2));
        const Mat g_avg = random_gaussian(rng, 3, 2);
        const Mat g_diff = random_gaussian(rng, 3, 2);
        const Mat r = orthogonal_residual({g_avg, g_diff}, state, 1e-12);
        const Mat r2 = orthogonal_residual({g_avg, r}, state, 1e-12);
        CHECK(max_abs(r2 - r) <= 1e-10 * std::max(1.0, max_abs(r)));
    }
}

TEST_CASE("orthogonal_residual scale behavior") {
    Rng rng(6);
    precond::FactorState identity_state(3, 1);
    const Mat g_avg = random_gaussian(rng, 3, 1);
    const Mat g_diff = random_gaussian(rng, 3, 1);
    const Mat r = orthogonal_residual({g_avg, g_diff}, identity_state, 0.0);
    // scaling g_diff scales the residual exactly
    const Mat r_scaled = orthogonal_residual({g_avg, 2.5 * g_diff}, identity_state, 0.0);
    CHECK(max_abs(r_scaled - 2.5 * r) <= 1e-12);
    // scaling g_avg leaves the residual direction unchanged
    const Mat r_avg_scaled = orthogonal_residual({7.0 * g_avg, g_diff}, identity_state, 0.0);
    CHECK(max_abs(r_avg_scaled - r) <= 1e-12);
}

TEST_CASE("residual stays metric-orthogonal over random instances") {
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        const auto state = metric_state(random_spd(rng, 4), random_spd(rng, 3));
        const Mat g_avg = random_gaussian(rng, 4, 3);
        const Mat g_diff = random_gaussian(rng, 4, 3);
        const Mat r = orthogonal_residual({g_avg, g_diff}, state, 1e-12);
        const Mat m_avg = metric_apply(state, g_avg);
        const double r_norm = std::sqrt(frob_dot(r, metric_apply(state, r)));
        const double a_norm = std::sqrt(frob_dot(g_avg, m_avg));
        CHECK(std::abs(frob_dot(r, m_avg)) <= 1e-6 * r_norm * a_norm + 1e-12);
    }
}

TEST_CASE("mixing_coefficient fixed policy is a clamped passthrough") {
    precond::FactorState state(2, 1);
    FopSettings settings;
    settings.beta_policy = BetaPolicy::fixed;
    settings.beta_value = 0.5;
    CHECK(mixing_coefficient(col2(1, 0), col2(0, 1), state, settings) == 0.5);
    settings.beta_value = -123.0;
    CHECK(mixing_coefficient(col2(1, 0), col2(0, 1), state, settings) == -10.0);
}

TEST_CASE("mixing_coefficient normalized policy matches norms and clamps at zero residual") {
    Mat l(2, 2);
    l << 2.0, 0.0, 0.0, 2.0;
    const auto state = metric_state(l, Mat::Identity(1, 1));
    FopSettings settings; // normalized, kappa = 1
    const Mat g_avg = col2(3, 4);
    const Mat residual = col2(-4, 3);
    const double expected = std::sqrt(2.0 * 25.0) / (std::sqrt(2.0 * 25.0) + settings.eps);
    CHECK(mixing_coefficient(g_avg, residual, state, settings) ==
          doctest::Approx(expected).epsilon(1e-12));
    // zero residual: norm ratio blows up and the clip takes over
    CHECK(mixing_coefficient(g_avg, Mat::Zero(2, 1), state, settings) == settings.beta_clip);
    // and the combined direction is unchanged since beta * 0 = 0
    CHECK(max_abs(combine(g_avg, Mat::Zero(2, 1), settings.beta_clip) - g_avg) == 0.0);
}

TEST_CASE("mixing_coefficient optimal oracle evaluates the closed form") {
    precond::FactorState state(2, 1);
    FopSettings settings;
    settings.beta_policy = BetaPolicy::optimal_oracle;
    const Mat g_avg = col2(1, 0);
    const Mat g_diff = col2(0, 2);
    const Mat residual = g_diff; // already orthogonal under F = I
    const OracleContext ctx{Mat::Identity(2, 2), g_diff};
    CHECK(mixing_coefficient(g_avg, residual, state, settings, &ctx) ==
          doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("mixing_coefficient optimal oracle without a Fisher is a configuration error") {
    precond::FactorState state(2, 1);
    FopSettings settings;
    settings.beta_policy = BetaPolicy::optimal_oracle;
    CHECK_THROWS_AS(mixing_coefficient(col2(1, 0), col2(0, 1), state, settings), ConfigError);
}

TEST_CASE("combine basics") {
    const Mat g_avg = col2(1, 0);
    const Mat r = col2(0, 1);
    CHECK(max_abs(combine(g_avg, r, 0.0) - g_avg) == 0.0);
    const Mat c = combine(g_avg, r, 1.0);
    CHECK(c(0, 0) == 1.0);
    CHECK(c(1, 0) == 1.0);
    CHECK_THROWS_AS(combine(g_avg, Mat::Zero(3, 1), 1.0), ValidationError);
}

TEST_CASE("combined direction preserves the mean component under the metric") {
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
        const auto state = metric_state(random_spd(rng, 3), random_spd(rng, 2));
        const Mat g_avg = random_gaussian(rng, 3, 2);
        const Mat g_diff = random_gaussian(rng, 3, 2);
        const Mat r = orthogonal_residual({g_avg, g_diff}, state, 1e-12);
        FopSettings settings;
        const double beta = mixing_coefficient(g_avg, r, state, settings);
        const Mat combined = combine(g_avg, r, beta);
        const Mat m_avg = metric_apply(state, g_avg);
        const double base = frob_dot(g_avg, m_avg);
        CHECK(frob_dot(combined, m_avg) == doctest::Approx(base).epsilon(1e-8));
    }
}
