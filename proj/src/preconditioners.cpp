#include "modprec/preconditioners.hpp"

#include <cmath>
#include <sstream>

#include "modprec/numerics.hpp"

namespace modprec::precond {

void OptimizerHyper::validate() const {
    if (!(lr > 0.0)) throw ValidationError("hyper: lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0) throw ValidationError("hyper: beta1 must be in [0, 1)");
    if (beta2 < 0.0 || beta2 >= 1.0) throw ValidationError("hyper: beta2 must be in [0, 1)");
    if (factor_decay < 0.0 || factor_decay > 1.0)
        throw ValidationError("hyper: factor_decay must be in [0, 1]");
    if (!(eps > 0.0)) throw ValidationError("hyper: eps must be positive");
    if (weight_decay < 0.0) throw ValidationError("hyper: weight_decay must be >= 0");
}

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* what,
                        const std::string& param_name) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        std::ostringstream os;
        os << what << ": shape mismatch for parameter '"
           << (param_name.empty() ? "?" : param_name) << "' (" << a.rows() << "x" << a.cols()
           << " vs " << b.rows() << "x" << b.cols() << ")";
        throw ValidationError(os.str());
    }
}

void require_finite_grad(const Mat& grad, const std::string& param_name) {
    if (!all_finite(grad)) {
        std::ostringstream os;
        os << "non-finite gradient for parameter '" << (param_name.empty() ? "?" : param_name)
           << "' (" << grad.rows() << "x" << grad.cols() << ")";
        throw ValidationError(os.str());
    }
}

/// Bias-corrected Adam normalization shared by the raw and rotated paths.
Mat adam_normalize(AdamMoments& state, const Mat& grad, const OptimizerHyper& hyper) {
    state.step += 1;
    state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad;
    state.v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
    const Mat m_hat = state.m / bc1;
    const Mat v_hat = state.v / bc2;
    return m_hat.array() / (v_hat.array().sqrt() + hyper.eps);
}

} // namespace

AdamResult adamw_step(AdamMoments& state, const Mat& grad, const OptimizerHyper& hyper,
                      const Mat& param, const std::string& param_name) {
    require_finite_grad(grad, param_name);
    if (state.m.size() == 0) state = AdamMoments(grad.rows(), grad.cols());
    require_same_shape(state.m, grad, "adamw_step", param_name);
    require_same_shape(param, grad, "adamw_step", param_name);
    AdamResult out;
    out.update = adam_normalize(state, grad, hyper);
    out.new_param = param - hyper.lr * out.update - (hyper.lr * hyper.weight_decay) * param;
    return out;
}

FactorState::FactorState(Eigen::Index rows, Eigen::Index cols, int refresh)
    : L(Mat::Zero(rows, rows)),
      R(Mat::Zero(cols, cols)),
      qL(Mat::Identity(rows, rows)),
      qR(Mat::Identity(cols, cols)),
      rotated_moments(rows, cols),
      refresh_interval(refresh) {
    if (refresh <= 0) throw ValidationError("FactorState: refresh_interval must be positive");
}

namespace {

// Eigenbasis refresh. Early-training factors are rank deficient and the
// eigensolver's null-space columns are an arbitrary orthonormal set, unstable
// under last-bit input changes. Those columns carry no curvature information,
// so they are replaced by a deterministic completion: the orthogonal
// complement of the significant eigenvectors, built from the identity basis
// by pivoted QR. Eigenvalue order (ascending) is preserved.
void refresh_basis(Mat& q, const Mat& factor) {
    // A factor that never saw a gradient stays at the identity basis.
    if (max_abs(factor) == 0.0) return;
    const numerics::EigenPair eig = numerics::sym_eigh(factor);
    const Eigen::Index d = factor.rows();
    const double lam_max = eig.eigenvalues.maxCoeff();
    const double threshold = 1e-10 * std::max(lam_max, 0.0);
    Eigen::Index null_count = 0;
    while (null_count < d && eig.eigenvalues[null_count] <= threshold) ++null_count;
    if (null_count == 0) {
        q = eig.eigenvectors;
        return;
    }
    const Mat significant = eig.eigenvectors.rightCols(d - null_count);
    const Mat projector =
        Mat::Identity(d, d) - significant * significant.transpose();
    Eigen::ColPivHouseholderQR<Mat> qr(projector);
    const Mat completion = Mat(qr.householderQ()).leftCols(null_count);
    q.resize(d, d);
    q.leftCols(null_count) = completion;
    q.rightCols(d - null_count) = significant;
}

// Later refreshes take one warm-started orthogonal-iteration step toward the
// current eigenbasis instead of a fresh decomposition. Successive bases stay
// close (no sign flips or column reordering), which is what keeps the
// un-reprojected rotated moments meaningful across refreshes. The ridge keeps
// directions the factor has not seen yet anchored to their previous columns.
void warm_refresh_basis(Mat& q, const Mat& factor) {
    const double scale = max_abs(factor);
    if (scale == 0.0) return;
    const Eigen::Index d = factor.rows();
    const Mat iterate = factor * q + (1e-12 * scale) * q;
    Eigen::HouseholderQR<Mat> qr(iterate);
    Mat next = qr.householderQ();
    const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < d; ++i) {
        if (r(i, i) < 0.0) next.col(i) = -next.col(i);
    }
    q = next;
}

} // namespace

void update_factors(FactorState& state, const Mat& g, double factor_decay) {
    if (state.L.size() == 0) state = FactorState(g.rows(), g.cols(), state.refresh_interval);
    if (g.rows() != state.rows() || g.cols() != state.cols()) {
        std::ostringstream os;
        os << "update_factors: gradient " << g.rows() << "x" << g.cols()
           << " does not match factor state " << state.rows() << "x" << state.cols();
        throw ValidationError(os.str());
    }
    state.L = factor_decay * state.L + (1.0 - factor_decay) * (g * g.transpose());
    state.R = factor_decay * state.R + (1.0 - factor_decay) * (g.transpose() * g);
    state.step += 1;
    if ((state.step - 1) % state.refresh_interval == 0) {
        if (state.step == 1) {
            refresh_basis(state.qL, state.L);
            refresh_basis(state.qR, state.R);
        } else {
            warm_refresh_basis(state.qL, state.L);
            warm_refresh_basis(state.qR, state.R);
        }
    }
}

Mat shampoo_precondition(const FactorState& state, const Mat& g, double damping) {
    if (state.step < 1) {
        throw StateError("shampoo_precondition: factors were never updated");
    }
    if (g.rows() != state.rows() || g.cols() != state.cols()) {
        throw ValidationError("shampoo_precondition: gradient shape mismatch");
    }
    const Mat left = numerics::inverse_pth_root(state.L, 4, damping);
    const Mat right = numerics::inverse_pth_root(state.R, 4, damping);
    return left * g * right;
}

Mat soap_step(FactorState& state, const Mat& g, const OptimizerHyper& hyper,
              const std::string& param_name) {
    require_finite_grad(g, param_name);
    update_factors(state, g, hyper.factor_decay);
    if (state.rotated_moments.m.size() == 0) {
        state.rotated_moments = AdamMoments(g.rows(), g.cols());
    }
    AdamMoments& moments = state.rotated_moments;
    // First moment accumulates in the original frame and is projected at use
    // time, so basis refreshes never invalidate it. The second moment lives
    // in the rotated frame (coordinate-wise statistics only exist there) and
    // is carried across refreshes as-is.
    moments.step += 1;
    moments.m = hyper.beta1 * moments.m + (1.0 - hyper.beta1) * g;
    const Mat rotated = state.qL.transpose() * g * state.qR;
    moments.v = hyper.beta2 * moments.v + (1.0 - hyper.beta2) * rotated.cwiseProduct(rotated);
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(moments.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(moments.step));
    const Mat m_hat_rotated = (state.qL.transpose() * moments.m * state.qR) / bc1;
    const Mat v_hat = moments.v / bc2;
    const Mat normalized = m_hat_rotated.array() / (v_hat.array().sqrt() + hyper.eps);
    return state.qL * normalized * state.qR.transpose();
}

// --- checkpointing ------------------------------------------------------

nlohmann::json matrix_to_json(const Mat& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

Mat matrix_from_json(const nlohmann::json& j) {
    const Eigen::Index rows = j.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = j.at("cols").get<Eigen::Index>();
    Mat m(rows, cols);
    const auto& data = j.at("data");
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = data.at(i).at(k).get<double>();
    return m;
}

nlohmann::json save_state(const AdamMoments& state) {
    return nlohmann::json{{"version", kCheckpointVersion},
                          {"kind", "adam_moments"},
                          {"m", matrix_to_json(state.m)},
                          {"v", matrix_to_json(state.v)},
                          {"step", state.step}};
}

nlohmann::json save_state(const FactorState& state) {
    return nlohmann::json{{"version", kCheckpointVersion},
                          {"kind", "factor_state"},
                          {"L", matrix_to_json(state.L)},
                          {"R", matrix_to_json(state.R)},
                          {"qL", matrix_to_json(state.qL)},
                          {"qR", matrix_to_json(state.qR)},
                          {"rotated_moments", save_state(state.rotated_moments)},
                          {"step", state.step},
                          {"refresh_interval", state.refresh_interval}};
}

namespace {

void check_version(const nlohmann::json& j, const char* kind) {
    if (j.at("version").get<int>() != kCheckpointVersion) {
        throw ConfigError(std::string("unsupported checkpoint version for ") + kind);
    }
    if (j.at("kind").get<std::string>() != kind) {
        throw ConfigError(std::string("checkpoint kind mismatch, expected ") + kind);
    }
}

} // namespace

AdamMoments load_adam(const nlohmann::json& j) {
    check_version(j, "adam_moments");
    AdamMoments s;
    s.m = matrix_from_json(j.at("m"));
    s.v = matrix_from_json(j.at("v"));
    s.step = j.at("step").get<long>();
    return s;
}

FactorState load_factor(const nlohmann::json& j) {
    check_version(j, "factor_state");
    FactorState s;
    s.L = matrix_from_json(j.at("L"));
    s.R = matrix_from_json(j.at("R"));
    s.qL = matrix_from_json(j.at("qL"));
    s.qR = matrix_from_json(j.at("qR"));
    s.rotated_moments = load_adam(j.at("rotated_moments"));
    s.step = j.at("step").get<long>();
    s.refresh_interval = j.at("refresh_interval").get<int>();
    return s;
}

} // namespace modprec::precond
