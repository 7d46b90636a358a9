#pragma once

#include <vector>

#include "modprec/errors.hpp"
#include "modprec/fop.hpp"
#include "modprec/la.hpp"

namespace modprec::mlfold {

struct FoldConfig {
    int window_size = 1; // K, must be a power of two
    fop::FopSettings fop;
    // gamma: a fold's beta is scaled by gamma^(levels below the top), so the
    // coarsest fold (half-window statistics, the most reliable) is undamped
    // and finer, noisier folds are damped geometrically.
    double level_decay = 0.25;

    void validate() const; // ConfigError on non-power-of-two window
};

struct Snapshot {
    long count = 0;
    Mat mean;
};

/// Dyadic accumulation state for one parameter over a window of K
/// micro-gradients. Holds exactly three parameter-sized buffers regardless of
/// K: the running cumulative mean, the snapshot at the last completed dyadic
/// boundary, and the folded vector z.
struct FoldState {
    int micro_count = 0;
    int window_size = 1;
    Mat cum_mean;
    Snapshot prev_snapshot;
    Mat z;
    int level = 0;
    std::vector<double> window_betas; // betas applied at each fold, for logging

    FoldState() = default;
    FoldState(Eigen::Index rows, Eigen::Index cols, const FoldConfig& config);

    /// Total doubles held in parameter-sized buffers (memory-contract audit).
    long buffer_doubles() const;

    /// Rearms the state for the next accumulation window.
    void reset();
};

/// Feeds the next micro-gradient. Updates the cumulative mean; at each dyadic
/// boundary reconstructs the just-completed segment mean and folds it into z.
void accumulate_micro(FoldState& state, const Mat& g_k,
                      const precond::FactorState& metric_state, const FoldConfig& config);

/// Exact mean of micro-gradients n1+1..n2 recovered from two cumulative
/// snapshots: (n2*mu2 - n1*mu1) / (n2 - n1).
Mat reconstruct_segment(const Snapshot& prev, const Snapshot& curr);

/// One folding step: count-weighted mean of the previous folded state and the
/// segment mean, plus the beta-scaled orthogonal residual of their difference.
/// beta is the mixing coefficient scaled by level_decay^level; the value used
/// is written to *beta_out when given.
Mat fold(const Mat& z_prev, const Mat& segment_mean, long n1, long n2,
         const precond::FactorState& metric_state, const FoldConfig& config, int level,
         double* beta_out = nullptr);

/// Returns the folded vector once the window is complete.
Mat finalize(const FoldState& state);

} // namespace modprec::mlfold
