#include "modprec/mlfold.hpp"

#include <cmath>
#include <sstream>

namespace modprec::mlfold {

namespace {

bool is_power_of_two(long x) { return x >= 1 && (x & (x - 1)) == 0; }

} // namespace

void FoldConfig::validate() const {
    if (!is_power_of_two(window_size)) {
        std::ostringstream os;
        os << "fold window size must be a power of two >= 1, got " << window_size;
        throw ConfigError(os.str());
    }
    if (!(level_decay > 0.0) || level_decay > 1.0) {
        throw ConfigError("fold level_decay must be in (0, 1]");
    }
    fop.validate();
}

FoldState::FoldState(Eigen::Index rows, Eigen::Index cols, const FoldConfig& config) {
    config.validate();
    window_size = config.window_size;
    cum_mean = Mat::Zero(rows, cols);
    prev_snapshot.mean = Mat::Zero(rows, cols);
    z = Mat::Zero(rows, cols);
}

long FoldState::buffer_doubles() const {
    return static_cast<long>(cum_mean.size()) + static_cast<long>(prev_snapshot.mean.size()) +
           static_cast<long>(z.size());
}

void FoldState::reset() {
    micro_count = 0;
    level = 0;
    cum_mean.setZero();
    prev_snapshot.count = 0;
    prev_snapshot.mean.setZero();
    z.setZero();
    window_betas.clear();
}

Mat reconstruct_segment(const Snapshot& prev, const Snapshot& curr) {
    if (curr.count <= prev.count || prev.count < 0) {
        std::ostringstream os;
        os << "reconstruct_segment: need curr.count > prev.count >= 0, got "
           << prev.count << " -> " << curr.count;
        throw ValidationError(os.str());
    }
    if (prev.count == 0) return curr.mean;
    const double n1 = static_cast<double>(prev.count);
    const double n2 = static_cast<double>(curr.count);
    return (n2 * curr.mean - n1 * prev.mean) / (n2 - n1);
}

Mat fold(const Mat& z_prev, const Mat& segment_mean, long n1, long n2,
         const precond::FactorState& metric_state, const FoldConfig& config, int level,
         double* beta_out) {
    if (n1 <= 0 || n2 <= 0) throw ValidationError("fold: counts must be positive");
    const double w1 = static_cast<double>(n1);
    const double w2 = static_cast<double>(n2);
    const Mat a = (w1 * z_prev + w2 * segment_mean) / (w1 + w2);
    const Mat d = z_prev - segment_mean;
    const Mat r = fop::orthogonal_residual({a, d}, metric_state, config.fop.eps);
    fop::OracleContext* no_oracle = nullptr;
    double beta = fop::mixing_coefficient(a, r, metric_state, config.fop, no_oracle) *
                  std::pow(config.level_decay, level);
    if (beta_out != nullptr) *beta_out = beta;
    return a + beta * r;
}

void accumulate_micro(FoldState& state, const Mat& g_k,
                      const precond::FactorState& metric_state, const FoldConfig& config) {
    if (state.micro_count >= state.window_size) {
        std::ostringstream os;
        os << "accumulate_micro: window of " << state.window_size << " already complete";
        throw StateError(os.str());
    }
    if (state.cum_mean.size() == 0) {
        state = FoldState(g_k.rows(), g_k.cols(), config);
    }
    if (g_k.rows() != state.cum_mean.rows() || g_k.cols() != state.cum_mean.cols()) {
        throw ValidationError("accumulate_micro: gradient shape mismatch");
    }
    const long k = state.micro_count + 1;
    // Welford-style mean update: exact for constant streams, and the dyadic
    // boundary algebra downstream is power-of-two exact on top of it.
    state.cum_mean += (g_k - state.cum_mean) / static_cast<double>(k);
    state.micro_count = static_cast<int>(k);
    if (k == 1) {
        state.z = g_k;
        state.prev_snapshot.count = 1;
        state.prev_snapshot.mean = g_k;
        state.level = 0;
        return;
    }
    if (is_power_of_two(k)) {
        const Snapshot curr{k, state.cum_mean};
        const Mat segment = reconstruct_segment(state.prev_snapshot, curr);
        const long n1 = state.prev_snapshot.count;
        const long n2 = k - state.prev_snapshot.count;
        state.level += 1;
        // decay exponent counts dyadic levels below the window's top level
        int total_levels = 0;
        for (long w = state.window_size; w > 1; w /= 2) ++total_levels;
        double beta = 0.0;
        state.z = fold(state.z, segment, n1, n2, metric_state, config,
                       total_levels - state.level, &beta);
        state.window_betas.push_back(beta);
        state.prev_snapshot.count = k;
        state.prev_snapshot.mean = state.cum_mean;
    }
}

Mat finalize(const FoldState& state) {
    if (state.micro_count != state.window_size) {
        std::ostringstream os;
        os << "finalize: window incomplete (" << state.micro_count << " of "
           << state.window_size << " micro-gradients)";
        throw StateError(os.str());
    }
    return state.z;
}

} // namespace modprec::mlfold
