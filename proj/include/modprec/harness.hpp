#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "modprec/fop.hpp"
#include "modprec/mlfold.hpp"
#include "modprec/preconditioners.hpp"
#include "modprec/tasks.hpp"

#include <json.hpp>

namespace modprec::harness {

enum class OptimizerKind {
    adamw,
    shampoo,
    soap,
    fop_soap,
    mlfop_soap,
    fop_shampoo,
    mlfop_shampoo,
};

std::string optimizer_name(OptimizerKind kind);
OptimizerKind optimizer_from_name(const std::string& name);

struct RunConfig {
    tasks::ModalityTaskSpec task;
    OptimizerKind optimizer = OptimizerKind::adamw;
    precond::OptimizerHyper hyper;
    fop::FopSettings fop;
    double level_decay = 0.25; // gamma for the mlfop fold hierarchy
    int refresh_interval = 10;
    double factor_damping = 1e-6; // relative damping for the Shampoo roots
    double base_lr = 0.01;
    long global_batch = 256;
    long micro_batch = 16;
    long total_steps = 100;
    double warmup_ratio = 0.10;
    double lr_floor = 1e-6;
    std::uint64_t seed = 0;

    long accumulation() const { return micro_batch > 0 ? global_batch / micro_batch : 0; }
    void validate() const;
};

struct RunRow {
    long step = 0;
    double tokens_or_samples = 0.0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_image = 0.0;
    double loss_text = 0.0;
    double tr_img = 0.0;
    double tr_text = 0.0;
    double beta_min = 0.0;
    double beta_mean = 0.0;
    double beta_max = 0.0;
    double wall_ms = 0.0;
};

struct RunRecord {
    std::vector<RunRow> rows;
    bool diverged = false;
    double wall_s = 0.0;
};

/// Square-root batch-size scaling: base * sqrt(batch / 1024).
double scale_lr(double base, long batch);

/// Linear warmup to the peak over warmup_ratio * total_steps, then cosine
/// decay to the floor; exactly the floor at step == total_steps.
double lr_at(long step, long total_steps, double peak, double warmup_ratio, double floor);

/// Runs one training configuration. Deterministic for a fixed config; aborts
/// with a partial record flagged diverged when the loss explodes.
RunRecord run_training(const RunConfig& config);

struct SweepRun {
    double lr = 0.0;
    RunRecord record;
    double smoothed_final = 0.0;
};

struct SweepResult {
    double best_lr = 0.0;
    std::vector<SweepRun> runs;
};

/// The half-decade logarithmic learning-rate grid.
std::vector<double> default_lr_grid();

/// Runs every learning rate in the grid with the config's seed and picks the
/// lowest final smoothed loss; diverged runs are excluded. Throws Error when
/// every run diverged.
SweepResult grid_search(const RunConfig& config, const std::vector<double>& grid);

/// Mean loss over the last 10% of steps (ranking statistic for sweeps).
double smoothed_final_loss(const RunRecord& record);

// --- environment ---------------------------------------------------------

/// True when MODPREC_THREADS=1: the reproducibility reference mode. Per-step
/// wall-clock columns are zeroed so CSV output is byte-stable.
bool reproducibility_mode();

/// Worker threads for sweep/acceptance runs: MODPREC_THREADS if set, else the
/// hardware concurrency.
int worker_threads();

// --- config file ----------------------------------------------------------
// Plain-text key = value lines with optional [section] headers; section names
// prefix the keys (e.g. [task] + kind=... is task.kind). '#' starts a comment.

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
void apply_override(RunConfig& config, const std::string& assignment); // "key=value"

// --- outputs ---------------------------------------------------------------

extern const char* const kCsvHeader;

void write_csv(const RunRecord& record, std::ostream& os);
std::string csv_string(const RunRecord& record);
nlohmann::json manifest_json(const RunConfig& config, const RunRecord& record);
nlohmann::json config_json(const RunConfig& config);

/// Reads run CSVs + manifests from a directory and writes a merged
/// per-modality loss-curve CSV plus an efficiency summary CSV
/// (<out> and <out stem>_efficiency.csv).
void write_report(const std::string& runs_dir, const std::string& out_csv);

} // namespace modprec::harness
