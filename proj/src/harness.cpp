#include "modprec/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <sstream>
#include <thread>

namespace modprec::harness {

std::string optimizer_name(OptimizerKind kind) {
    switch (kind) {
    case OptimizerKind::adamw: return "adamw";
    case OptimizerKind::shampoo: return "shampoo";
    case OptimizerKind::soap: return "soap";
    case OptimizerKind::fop_soap: return "fop_soap";
    case OptimizerKind::mlfop_soap: return "mlfop_soap";
    case OptimizerKind::fop_shampoo: return "fop_shampoo";
    case OptimizerKind::mlfop_shampoo: return "mlfop_shampoo";
    }
    throw ConfigError("unknown optimizer kind");
}

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "adamw") return OptimizerKind::adamw;
    if (name == "shampoo") return OptimizerKind::shampoo;
    if (name == "soap") return OptimizerKind::soap;
    if (name == "fop_soap") return OptimizerKind::fop_soap;
    if (name == "mlfop_soap") return OptimizerKind::mlfop_soap;
    if (name == "fop_shampoo") return OptimizerKind::fop_shampoo;
    if (name == "mlfop_shampoo") return OptimizerKind::mlfop_shampoo;
    throw ConfigError("unknown optimizer '" + name + "'");
}

namespace {

bool is_power_of_two(long x) { return x >= 1 && (x & (x - 1)) == 0; }

bool uses_fold(OptimizerKind k) {
    return k == OptimizerKind::mlfop_soap || k == OptimizerKind::mlfop_shampoo;
}

bool uses_halves(OptimizerKind k) {
    return k == OptimizerKind::fop_soap || k == OptimizerKind::fop_shampoo;
}

bool soap_family(OptimizerKind k) {
    return k == OptimizerKind::soap || k == OptimizerKind::fop_soap ||
           k == OptimizerKind::mlfop_soap;
}

bool shampoo_family(OptimizerKind k) {
    return k == OptimizerKind::shampoo || k == OptimizerKind::fop_shampoo ||
           k == OptimizerKind::mlfop_shampoo;
}

} // namespace

void RunConfig::validate() const {
    task.validate();
    fop.validate();
    if (micro_batch < 1 || global_batch < 1 || global_batch % micro_batch != 0) {
        throw ConfigError("global_batch must be a positive multiple of micro_batch");
    }
    const long k = accumulation();
    if (uses_fold(optimizer) && !is_power_of_two(k)) {
        throw ConfigError("mlfop optimizers need a power-of-two accumulation window");
    }
    if (uses_halves(optimizer) && (k < 2 || k % 2 != 0)) {
        throw ConfigError("fop optimizers need an even accumulation window >= 2");
    }
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (base_lr < 0.0) throw ConfigError("base_lr must be >= 0");
    if (lr_floor < 0.0) throw ConfigError("lr_floor must be >= 0");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ConfigError("warmup_ratio must be in [0, 1]");
    if (refresh_interval < 1) throw ConfigError("refresh_interval must be >= 1");
    if (factor_damping < 0.0) throw ConfigError("factor_damping must be >= 0");
    if (!(level_decay > 0.0) || level_decay > 1.0) throw ConfigError("level_decay must be in (0, 1]");
    if (hyper.beta1 < 0.0 || hyper.beta1 >= 1.0) throw ConfigError("hyper.beta1 must be in [0, 1)");
    if (hyper.beta2 < 0.0 || hyper.beta2 >= 1.0) throw ConfigError("hyper.beta2 must be in [0, 1)");
    if (hyper.factor_decay < 0.0 || hyper.factor_decay > 1.0)
        throw ConfigError("hyper.factor_decay must be in [0, 1]");
    if (!(hyper.eps > 0.0)) throw ConfigError("hyper.eps must be positive");
    if (hyper.weight_decay < 0.0) throw ConfigError("hyper.weight_decay must be >= 0");
}

double scale_lr(double base, long batch) {
    if (batch < 1) throw ValidationError("scale_lr: batch must be >= 1");
    return base * std::sqrt(static_cast<double>(batch) / 1024.0);
}

double lr_at(long step, long total_steps, double peak, double warmup_ratio, double floor) {
    if (step < 0 || step > total_steps) throw ValidationError("lr_at: step out of range");
    if (step >= total_steps) return floor;
    const double warmup = warmup_ratio * static_cast<double>(total_steps);
    if (static_cast<double>(step) < warmup) {
        return peak * static_cast<double>(step) / warmup;
    }
    const double denom = static_cast<double>(total_steps) - warmup;
    const double t = denom > 0.0 ? (static_cast<double>(step) - warmup) / denom : 1.0;
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * t));
}

bool reproducibility_mode() {
    const char* v = std::getenv("MODPREC_THREADS");
    return v != nullptr && std::strcmp(v, "1") == 0;
}

int worker_threads() {
    if (const char* v = std::getenv("MODPREC_THREADS")) {
        const int n = std::atoi(v);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

namespace {

struct ParamOptState {
    precond::AdamMoments adam;
    precond::FactorState factors;
    precond::AdamMoments graft;
    mlfold::FoldState fold;
};

Vec flatten(const tasks::ParamSet& grads) {
    Eigen::Index total = 0;
    for (const auto& g : grads) total += g.value.size();
    Vec out(total);
    Eigen::Index at = 0;
    for (const auto& g : grads) {
        out.segment(at, g.value.size()) = vectorize(g.value);
        at += g.value.size();
    }
    return out;
}

} // namespace

RunRecord run_training(const RunConfig& config) {
    config.validate();
    const auto run_start = std::chrono::steady_clock::now();
    const bool zero_wall = reproducibility_mode();

    tasks::ModalityTaskSpec task_spec = config.task;
    task_spec.seed = config.seed; // the run seed governs all sampling
    if (task_spec.routing == tasks::Routing::half) {
        task_spec.route_block = static_cast<int>(std::max<long>(1, config.accumulation() / 2));
    }
    tasks::TaskInstance task(task_spec);
    tasks::ParamSet params = task.init_params();

    const long window = config.accumulation();
    const OptimizerKind opt = config.optimizer;
    mlfold::FoldConfig fold_config;
    fold_config.window_size = static_cast<int>(window);
    fold_config.fop = config.fop;
    fold_config.level_decay = config.level_decay;

    std::vector<ParamOptState> states(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Eigen::Index rows = params[i].value.rows();
        const Eigen::Index cols = params[i].value.cols();
        states[i].adam = precond::AdamMoments(rows, cols);
        states[i].factors = precond::FactorState(rows, cols, config.refresh_interval);
        states[i].graft = precond::AdamMoments(rows, cols);
        if (uses_fold(opt)) states[i].fold = mlfold::FoldState(rows, cols, fold_config);
    }

    const double peak = scale_lr(config.base_lr, config.global_batch);
    const double per_step_units =
        task_spec.kind == tasks::TaskKind::toy_token
            ? static_cast<double>(window * config.micro_batch * task_spec.seq_len)
            : static_cast<double>(window * config.micro_batch);

    RunRecord record;
    record.rows.reserve(static_cast<std::size_t>(config.total_steps));
    double cum_units = 0.0;
    double carry_loss_image = 0.0, carry_loss_text = 0.0;
    double carry_tr_img = 0.0, carry_tr_text = 0.0;

    for (long step = 0; step < config.total_steps; ++step) {
        const auto step_start = std::chrono::steady_clock::now();
        const double lr = lr_at(step, config.total_steps, peak, config.warmup_ratio, config.lr_floor);

        std::vector<Mat> mean_grad(params.size());
        std::vector<Mat> half_first(params.size()), half_second(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            mean_grad[i] = Mat::Zero(params[i].value.rows(), params[i].value.cols());
            if (uses_halves(opt)) {
                half_first[i] = mean_grad[i];
                half_second[i] = mean_grad[i];
            }
        }
        std::vector<Vec> img_flat, text_flat;
        double loss_image_sum = 0.0, loss_text_sum = 0.0;
        long n_image = 0, n_text = 0;
        bool bad_step = false;

        try {
            for (long k = 0; k < window; ++k) {
                const tasks::MicroBatch batch =
                    task.sample_micro_batch(step, k, static_cast<int>(config.micro_batch));
                const tasks::LossGrad lg = task.loss_and_grad(params, batch);
                loss_image_sum += lg.loss_image * static_cast<double>(lg.n_image);
                loss_text_sum += lg.loss_text * static_cast<double>(lg.n_text);
                n_image += lg.n_image;
                n_text += lg.n_text;
                if (batch.modality == tasks::Modality::image) {
                    img_flat.push_back(flatten(lg.grad));
                } else if (batch.modality == tasks::Modality::text) {
                    text_flat.push_back(flatten(lg.grad));
                }
                for (std::size_t i = 0; i < params.size(); ++i) {
                    const Mat& g = lg.grad[i].value;
                    mean_grad[i] += g / static_cast<double>(window);
                    if (uses_halves(opt)) {
                        Mat& half = k < window / 2 ? half_first[i] : half_second[i];
                        half += g / static_cast<double>(window / 2);
                    }
                    if (uses_fold(opt)) {
                        mlfold::accumulate_micro(states[i].fold, g, states[i].factors, fold_config);
                    }
                }
            }
        } catch (const TaskError&) {
            record.diverged = true;
            break;
        }

        for (const Mat& g : mean_grad) {
            if (!all_finite(g)) {
                bad_step = true;
                break;
            }
        }
        if (bad_step) {
            record.diverged = true;
            break;
        }

        // Combine the window and step each parameter.
        std::vector<double> betas;
        try {
            for (std::size_t i = 0; i < params.size(); ++i) {
                Mat g_comb;
                if (uses_halves(opt)) {
                    const Mat g_avg = 0.5 * (half_first[i] + half_second[i]);
                    const Mat g_diff = half_first[i] - half_second[i];
                    const Mat r = fop::orthogonal_residual({g_avg, g_diff}, states[i].factors,
                                                           config.fop.eps);
                    const double beta =
                        fop::mixing_coefficient(g_avg, r, states[i].factors, config.fop);
                    betas.push_back(beta);
                    g_comb = fop::combine(g_avg, r, beta);
                } else if (uses_fold(opt)) {
                    g_comb = mlfold::finalize(states[i].fold);
                    for (double b : states[i].fold.window_betas) betas.push_back(b);
                    states[i].fold.reset();
                } else {
                    g_comb = mean_grad[i];
                }

                precond::OptimizerHyper hyper = config.hyper;
                hyper.lr = lr;
                Mat& value = params[i].value;
                if (opt == OptimizerKind::adamw) {
                    value = precond::adamw_step(states[i].adam, g_comb, hyper, value,
                                                params[i].name)
                                .new_param;
                } else if (soap_family(opt)) {
                    const Mat update =
                        precond::soap_step(states[i].factors, g_comb, hyper, params[i].name);
                    value = value - hyper.lr * update - (hyper.lr * hyper.weight_decay) * value;
                } else if (shampoo_family(opt)) {
                    precond::update_factors(states[i].factors, g_comb, hyper.factor_decay);
                    Mat update =
                        precond::shampoo_precondition(states[i].factors, g_comb, config.factor_damping);
                    if (hyper.graft_adamw) {
                        const Mat adam_update =
                            precond::adamw_step(states[i].graft, g_comb, hyper, value,
                                                params[i].name)
                                .update;
                        const double scale =
                            frob_norm(adam_update) / (frob_norm(update) + 1e-30);
                        update *= scale;
                    }
                    value = value - hyper.lr * update - (hyper.lr * hyper.weight_decay) * value;
                }
            }
        } catch (const NumericalError&) {
            record.diverged = true;
            break;
        }

        RunRow row;
        row.step = step;
        cum_units += per_step_units;
        row.tokens_or_samples = cum_units;
        row.lr = lr;
        const long n_total = n_image + n_text;
        row.loss_total = n_total > 0 ? (loss_image_sum + loss_text_sum) / static_cast<double>(n_total)
                                     : 0.0;
        if (n_image > 0) carry_loss_image = loss_image_sum / static_cast<double>(n_image);
        if (n_text > 0) carry_loss_text = loss_text_sum / static_cast<double>(n_text);
        row.loss_image = carry_loss_image;
        row.loss_text = carry_loss_text;
        // Under step-level routing only one modality appears per step; each
        // trace updates whenever its own group has enough micro-gradients.
        auto group_trace = [](const std::vector<Vec>& grads) {
            Vec mean = grads.front();
            for (std::size_t i = 1; i < grads.size(); ++i) mean += grads[i];
            mean /= static_cast<double>(grads.size());
            double acc = 0.0;
            for (const Vec& g : grads) acc += (g - mean).squaredNorm();
            return acc / static_cast<double>(grads.size() - 1);
        };
        if (img_flat.size() >= 2) carry_tr_img = group_trace(img_flat);
        if (text_flat.size() >= 2) carry_tr_text = group_trace(text_flat);
        row.tr_img = carry_tr_img;
        row.tr_text = carry_tr_text;
        if (!betas.empty()) {
            double lo = betas.front(), hi = betas.front(), sum = 0.0;
            for (double b : betas) {
                lo = std::min(lo, b);
                hi = std::max(hi, b);
                sum += b;
            }
            row.beta_min = lo;
            row.beta_mean = sum / static_cast<double>(betas.size());
            row.beta_max = hi;
        }
        row.wall_ms =
            zero_wall ? 0.0
                      : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                  step_start)
                            .count();

        if (!std::isfinite(row.loss_total)) {
            record.diverged = true;
            break;
        }
        record.rows.push_back(row);
        if (row.loss_total > 1e6) {
            record.diverged = true;
            break;
        }
    }

    record.wall_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
    return record;
}

std::vector<double> default_lr_grid() {
    return {0.1, 0.0316, 0.01, 0.00316, 0.001, 0.000316};
}

double smoothed_final_loss(const RunRecord& record) {
    if (record.rows.empty()) return std::numeric_limits<double>::infinity();
    const std::size_t n = record.rows.size();
    const std::size_t window = std::max<std::size_t>(1, n / 10);
    double acc = 0.0;
    for (std::size_t i = n - window; i < n; ++i) acc += record.rows[i].loss_total;
    return acc / static_cast<double>(window);
}

SweepResult grid_search(const RunConfig& config, const std::vector<double>& grid) {
    if (grid.empty()) throw ConfigError("grid_search: empty learning-rate grid");
    SweepResult result;
    result.runs.resize(grid.size());

    const int threads = std::min<int>(worker_threads(), static_cast<int>(grid.size()));
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= grid.size()) return;
            RunConfig run_config = config;
            run_config.base_lr = grid[i];
            SweepRun run;
            run.lr = grid[i];
            run.record = run_training(run_config);
            run.smoothed_final = smoothed_final_loss(run.record);
            result.runs[i] = std::move(run);
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    bool any = false;
    double best_loss = std::numeric_limits<double>::infinity();
    double best_lr = 0.0;
    for (const SweepRun& run : result.runs) {
        if (run.record.diverged) continue;
        // Order-independent selection: lexicographic on (loss, lr).
        if (!any || run.smoothed_final < best_loss ||
            (run.smoothed_final == best_loss && run.lr < best_lr)) {
            any = true;
            best_loss = run.smoothed_final;
            best_lr = run.lr;
        }
    }
    if (!any) throw Error("grid_search: every run diverged");
    result.best_lr = best_lr;
    return result;
}

} // namespace modprec::harness
