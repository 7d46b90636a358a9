#pragma once

#include <string>

#include "modprec/errors.hpp"
#include "modprec/la.hpp"

#include <json.hpp>

namespace modprec::precond {

struct OptimizerHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double factor_decay = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    // Borrow the AdamW update norm for the Shampoo direction. Off by default.
    bool graft_adamw = false;

    void validate() const;
};

/// First/second moment EMAs for one parameter tensor, in raw or rotated
/// coordinates.
struct AdamMoments {
    Mat m;
    Mat v;
    long step = 0;

    AdamMoments() = default;
    AdamMoments(Eigen::Index rows, Eigen::Index cols)
        : m(Mat::Zero(rows, cols)), v(Mat::Zero(rows, cols)) {}
};

struct AdamResult {
    Mat update;
    Mat new_param;
};

/// One bias-corrected AdamW step with decoupled weight decay:
///   update = m_hat / (sqrt(v_hat) + eps)
///   new_param = param - lr*update - lr*weight_decay*param
/// Rejects non-finite gradients with a diagnostic naming the parameter.
AdamResult adamw_step(AdamMoments& state, const Mat& grad, const OptimizerHyper& hyper,
                      const Mat& param, const std::string& param_name = {});

/// Kronecker curvature state for one matrix parameter: EMAs of G*G^T and
/// G^T*G plus cached eigenbases. The bases are refreshed at step 1 and every
/// refresh_interval steps thereafter; a factor that is still exactly zero
/// keeps its current (identity) basis.
struct FactorState {
    Mat L;
    Mat R;
    Mat qL;
    Mat qR;
    // SOAP moments. The second moment v lives in the rotated frame (it is a
    // coordinate-wise statistic of the rotated gradient) and is carried
    // across basis refreshes as-is; the first moment m accumulates in the
    // original frame and is projected at use time, so refreshes cannot
    // invalidate it.
    AdamMoments rotated_moments;
    long step = 0;
    int refresh_interval = 10;

    FactorState() = default;
    FactorState(Eigen::Index rows, Eigen::Index cols, int refresh_interval = 10);

    Eigen::Index rows() const { return L.rows(); }
    Eigen::Index cols() const { return R.rows(); }
};

/// L <- decay*L + (1-decay)*G*G^T, same for R; increments step and refreshes
/// the eigenbases when due.
void update_factors(FactorState& state, const Mat& g, double factor_decay);

/// Shampoo preconditioning: L^(-1/4) * G * R^(-1/4) with per-factor relative
/// damping.
Mat shampoo_precondition(const FactorState& state, const Mat& g, double damping = 1e-6);

/// One SOAP step: updates factors with G, rotates G into the cached
/// eigenbases, runs the bias-corrected Adam normalization on the rotated
/// gradient, and rotates the normalized update back. Returns the update
/// direction (learning rate and weight decay are applied by the caller).
Mat soap_step(FactorState& state, const Mat& g, const OptimizerHyper& hyper,
              const std::string& param_name = {});

// --- checkpointing ------------------------------------------------------
// Versioned JSON snapshots. Round trips are exact: matrix entries serialize
// with shortest round-trip formatting.

inline constexpr int kCheckpointVersion = 1;

nlohmann::json save_state(const AdamMoments& state);
nlohmann::json save_state(const FactorState& state);
AdamMoments load_adam(const nlohmann::json& j);
FactorState load_factor(const nlohmann::json& j);

nlohmann::json matrix_to_json(const Mat& m);
Mat matrix_from_json(const nlohmann::json& j);

} // namespace modprec::precond
