#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "modprec/harness.hpp"

namespace modprec::harness {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return {};
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad numeric value '" + value + "' for " + key);
    }
}

long parse_long(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long v = std::stol(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer value '" + value + "' for " + key);
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: bad boolean value '" + value + "' for " + key);
}

fop::BetaPolicy beta_policy_from_name(const std::string& name) {
    if (name == "fixed") return fop::BetaPolicy::fixed;
    if (name == "normalized") return fop::BetaPolicy::normalized;
    if (name == "optimal_oracle") return fop::BetaPolicy::optimal_oracle;
    throw ConfigError("config: unknown beta_policy '" + name + "'");
}

std::string beta_policy_name(fop::BetaPolicy policy) {
    switch (policy) {
    case fop::BetaPolicy::fixed: return "fixed";
    case fop::BetaPolicy::normalized: return "normalized";
    case fop::BetaPolicy::optimal_oracle: return "optimal_oracle";
    }
    return "?";
}

tasks::TaskKind task_kind_from_name(const std::string& name) {
    if (name == "quadratic_pair") return tasks::TaskKind::quadratic_pair;
    if (name == "toy_token") return tasks::TaskKind::toy_token;
    throw ConfigError("config: unknown task kind '" + name + "'");
}

void assign(RunConfig& config, const std::string& key, const std::string& value) {
    // top level
    if (key == "optimizer") { config.optimizer = optimizer_from_name(value); return; }
    if (key == "base_lr") { config.base_lr = parse_double(key, value); return; }
    if (key == "global_batch") { config.global_batch = parse_long(key, value); return; }
    if (key == "micro_batch") { config.micro_batch = parse_long(key, value); return; }
    if (key == "total_steps") { config.total_steps = parse_long(key, value); return; }
    if (key == "warmup_ratio") { config.warmup_ratio = parse_double(key, value); return; }
    if (key == "lr_floor") { config.lr_floor = parse_double(key, value); return; }
    if (key == "seed") { config.seed = static_cast<std::uint64_t>(parse_long(key, value)); return; }
    if (key == "refresh_interval") { config.refresh_interval = static_cast<int>(parse_long(key, value)); return; }
    if (key == "factor_damping") { config.factor_damping = parse_double(key, value); return; }
    // task
    if (key == "task.kind") { config.task.kind = task_kind_from_name(value); return; }
    if (key == "task.mixing") { config.task.mixing = parse_double(key, value); return; }
    if (key == "task.routing") {
        if (value == "step") config.task.routing = tasks::Routing::step;
        else if (value == "half") config.task.routing = tasks::Routing::half;
        else if (value == "micro") config.task.routing = tasks::Routing::micro;
        else if (value == "sample") config.task.routing = tasks::Routing::sample;
        else throw ConfigError("config: unknown routing '" + value + "'");
        return;
    }
    if (key == "task.dim") { config.task.dim = static_cast<int>(parse_long(key, value)); return; }
    if (key == "task.h_cond") { config.task.h_cond = parse_double(key, value); return; }
    if (key == "task.h_scale") { config.task.h_scale = parse_double(key, value); return; }
    if (key == "task.cov_scale_text") { config.task.cov_scale_text = parse_double(key, value); return; }
    if (key == "task.cov_ratio") { config.task.cov_ratio = parse_double(key, value); return; }
    if (key == "task.mu_img") { config.task.mu_img = parse_double(key, value); return; }
    if (key == "task.mu_text") { config.task.mu_text = parse_double(key, value); return; }
    if (key == "task.init_scale") { config.task.init_scale = parse_double(key, value); return; }
    if (key == "task.vocab_img") { config.task.vocab_img = static_cast<int>(parse_long(key, value)); return; }
    if (key == "task.vocab_text") { config.task.vocab_text = static_cast<int>(parse_long(key, value)); return; }
    if (key == "task.embed_dim") { config.task.embed_dim = static_cast<int>(parse_long(key, value)); return; }
    if (key == "task.seq_len") { config.task.seq_len = static_cast<int>(parse_long(key, value)); return; }
    if (key == "task.img_bigram_mix") { config.task.img_bigram_mix = parse_double(key, value); return; }
    if (key == "task.img_classes") { config.task.img_classes = static_cast<int>(parse_long(key, value)); return; }
    if (key == "task.text_classes") { config.task.text_classes = static_cast<int>(parse_long(key, value)); return; }
    if (key == "task.zipf_exponent") { config.task.zipf_exponent = parse_double(key, value); return; }
    if (key == "task.embed_init_scale") { config.task.embed_init_scale = parse_double(key, value); return; }
    // hyper
    if (key == "hyper.beta1") { config.hyper.beta1 = parse_double(key, value); return; }
    if (key == "hyper.beta2") { config.hyper.beta2 = parse_double(key, value); return; }
    if (key == "hyper.factor_decay") { config.hyper.factor_decay = parse_double(key, value); return; }
    if (key == "hyper.eps") { config.hyper.eps = parse_double(key, value); return; }
    if (key == "hyper.weight_decay") { config.hyper.weight_decay = parse_double(key, value); return; }
    if (key == "hyper.graft_adamw") { config.hyper.graft_adamw = parse_bool(key, value); return; }
    // fop
    if (key == "fop.beta_policy") { config.fop.beta_policy = beta_policy_from_name(value); return; }
    if (key == "fop.beta_value") { config.fop.beta_value = parse_double(key, value); return; }
    if (key == "fop.kappa") { config.fop.kappa = parse_double(key, value); return; }
    if (key == "fop.eps") { config.fop.eps = parse_double(key, value); return; }
    if (key == "fop.beta_clip") { config.fop.beta_clip = parse_double(key, value); return; }
    // fold
    if (key == "fold.level_decay") { config.level_decay = parse_double(key, value); return; }
    throw ConfigError("config: unknown key '" + key + "'");
}

} // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig config;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("config: malformed section header at line " +
                                  std::to_string(line_no));
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: expected key = value at line " + std::to_string(line_no));
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config: empty key at line " + std::to_string(line_no));
        }
        assign(config, section.empty() ? key : section + "." + key, value);
    }
    return config;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override must look like key=value, got '" + assignment + "'");
    }
    assign(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

// --- outputs ---------------------------------------------------------------

const char* const kCsvHeader =
    "step,tokens_or_samples,lr,loss_total,loss_image,loss_text,tr_img,tr_text,"
    "beta_min,beta_mean,beta_max,wall_ms";

namespace {

/// Shortest round-trip decimal formatting; stable across runs.
std::string fmt(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace

void write_csv(const RunRecord& record, std::ostream& os) {
    os << kCsvHeader << "\n";
    for (const RunRow& r : record.rows) {
        os << r.step << ',' << fmt(r.tokens_or_samples) << ',' << fmt(r.lr) << ','
           << fmt(r.loss_total) << ',' << fmt(r.loss_image) << ',' << fmt(r.loss_text) << ','
           << fmt(r.tr_img) << ',' << fmt(r.tr_text) << ',' << fmt(r.beta_min) << ','
           << fmt(r.beta_mean) << ',' << fmt(r.beta_max) << ',' << fmt(r.wall_ms) << "\n";
    }
}

std::string csv_string(const RunRecord& record) {
    std::ostringstream os;
    write_csv(record, os);
    return os.str();
}

nlohmann::json config_json(const RunConfig& config) {
    const tasks::ModalityTaskSpec& t = config.task;
    const char* routing = "sample";
    if (t.routing == tasks::Routing::step) routing = "step";
    if (t.routing == tasks::Routing::half) routing = "half";
    if (t.routing == tasks::Routing::micro) routing = "micro";
    nlohmann::json task{{"kind", t.kind == tasks::TaskKind::quadratic_pair ? "quadratic_pair"
                                                                           : "toy_token"},
                        {"mixing", t.mixing},
                        {"routing", routing}};
    if (t.kind == tasks::TaskKind::quadratic_pair) {
        task["dim"] = t.dim;
        task["h_cond"] = t.h_cond;
        task["h_scale"] = t.h_scale;
        task["cov_scale_text"] = t.cov_scale_text;
        task["cov_ratio"] = t.cov_ratio;
        task["mu_img"] = t.mu_img;
        task["mu_text"] = t.mu_text;
        task["init_scale"] = t.init_scale;
    } else {
        task["vocab_img"] = t.vocab_img;
        task["vocab_text"] = t.vocab_text;
        task["embed_dim"] = t.embed_dim;
        task["seq_len"] = t.seq_len;
        task["zipf_exponent"] = t.zipf_exponent;
        task["embed_init_scale"] = t.embed_init_scale;
    }
    return nlohmann::json{
        {"task", task},
        {"optimizer", optimizer_name(config.optimizer)},
        {"hyper",
         {{"beta1", config.hyper.beta1},
          {"beta2", config.hyper.beta2},
          {"factor_decay", config.hyper.factor_decay},
          {"eps", config.hyper.eps},
          {"weight_decay", config.hyper.weight_decay},
          {"graft_adamw", config.hyper.graft_adamw}}},
        {"fop",
         {{"beta_policy", beta_policy_name(config.fop.beta_policy)},
          {"beta_value", config.fop.beta_value},
          {"kappa", config.fop.kappa},
          {"eps", config.fop.eps},
          {"beta_clip", config.fop.beta_clip}}},
        {"fold", {{"window_size", config.accumulation()}, {"level_decay", config.level_decay}}},
        {"base_lr", config.base_lr},
        {"global_batch", config.global_batch},
        {"micro_batch", config.micro_batch},
        {"total_steps", config.total_steps},
        {"warmup_ratio", config.warmup_ratio},
        {"lr_floor", config.lr_floor},
        {"refresh_interval", config.refresh_interval},
        {"factor_damping", config.factor_damping},
        {"seed", config.seed}};
}

nlohmann::json manifest_json(const RunConfig& config, const RunRecord& record) {
    return nlohmann::json{{"config", config_json(config)},
                          {"seed", config.seed},
                          {"version", "modprec 0.1.0"},
                          {"wall_time_s", record.wall_s},
                          {"diverged", record.diverged}};
}

// --- report ------------------------------------------------------------------

namespace {

struct LoadedRun {
    std::string name;
    std::string optimizer;
    std::uint64_t seed = 0;
    std::vector<RunRow> rows;
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    return out;
}

LoadedRun load_run(const std::filesystem::path& csv_path) {
    LoadedRun run;
    run.name = csv_path.stem().string();
    std::ifstream in(csv_path);
    if (!in) throw Error("report: cannot open " + csv_path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error("report: empty csv " + csv_path.string());
    if (trim(line) != kCsvHeader) {
        throw Error("report: unexpected csv header in " + csv_path.string());
    }
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 12) throw Error("report: malformed row in " + csv_path.string());
        RunRow row;
        row.step = std::stol(fields[0]);
        row.tokens_or_samples = std::stod(fields[1]);
        row.lr = std::stod(fields[2]);
        row.loss_total = std::stod(fields[3]);
        row.loss_image = std::stod(fields[4]);
        row.loss_text = std::stod(fields[5]);
        row.tr_img = std::stod(fields[6]);
        row.tr_text = std::stod(fields[7]);
        row.beta_min = std::stod(fields[8]);
        row.beta_mean = std::stod(fields[9]);
        row.beta_max = std::stod(fields[10]);
        row.wall_ms = std::stod(fields[11]);
        run.rows.push_back(row);
    }
    const std::filesystem::path manifest_path =
        csv_path.parent_path() / (csv_path.stem().string() + ".manifest.json");
    if (std::filesystem::exists(manifest_path)) {
        std::ifstream min(manifest_path);
        nlohmann::json manifest = nlohmann::json::parse(min);
        run.optimizer = manifest.at("config").at("optimizer").get<std::string>();
        run.seed = manifest.at("seed").get<std::uint64_t>();
    }
    return run;
}

double trailing_average(const std::vector<RunRow>& rows, std::size_t end, std::size_t window) {
    const std::size_t begin = end >= window ? end - window : 0;
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) acc += rows[i].loss_total;
    return acc / static_cast<double>(end - begin);
}

/// Cumulative sample count at which the trailing moving average of the total
/// loss reaches the target and stays at or below it for the rest of the run
/// (window 10% of steps); negative when never attained sustainably.
double samples_to_reach(const std::vector<RunRow>& rows, double target) {
    const std::size_t n = rows.size();
    const std::size_t window = std::max<std::size_t>(1, n / 10);
    if (n == 0 || trailing_average(rows, n, window) > target * (1.0 + 1e-12)) return -1.0;
    std::size_t attained = n;
    while (attained > 0 && trailing_average(rows, attained, window) <= target * (1.0 + 1e-12)) --attained;
    return rows[attained].tokens_or_samples;
}

} // namespace

void write_report(const std::string& runs_dir, const std::string& out_csv) {
    namespace fs = std::filesystem;
    std::vector<LoadedRun> runs;
    std::vector<fs::path> csvs;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
        if (entry.path().extension() == ".csv") csvs.push_back(entry.path());
    }
    std::sort(csvs.begin(), csvs.end());
    for (const auto& path : csvs) runs.push_back(load_run(path));
    if (runs.empty()) throw Error("report: no run CSVs found in " + runs_dir);

    std::ofstream curves(out_csv);
    if (!curves) throw Error("report: cannot write " + out_csv);
    curves << "run,optimizer,seed,step,tokens_or_samples,loss_total,loss_image,loss_text\n";
    for (const LoadedRun& run : runs) {
        for (const RunRow& row : run.rows) {
            curves << run.name << ',' << run.optimizer << ',' << run.seed << ',' << row.step << ','
                   << fmt(row.tokens_or_samples) << ',' << fmt(row.loss_total) << ','
                   << fmt(row.loss_image) << ',' << fmt(row.loss_text) << "\n";
        }
    }

    // Efficiency relative to the AdamW baseline (or the first run when no
    // AdamW run is present): samples needed to reach the baseline's final
    // smoothed loss.
    const LoadedRun* baseline = nullptr;
    for (const LoadedRun& run : runs) {
        if (run.optimizer == "adamw") {
            baseline = &run;
            break;
        }
    }
    if (baseline == nullptr) baseline = &runs.front();
    RunRecord baseline_record;
    baseline_record.rows = baseline->rows;
    const double target = smoothed_final_loss(baseline_record);
    const double baseline_samples = samples_to_reach(baseline->rows, target);

    fs::path eff_path(out_csv);
    eff_path.replace_filename(eff_path.stem().string() + "_efficiency.csv");
    std::ofstream eff(eff_path);
    if (!eff) throw Error("report: cannot write " + eff_path.string());
    eff << "run,optimizer,seed,final_loss_total,final_loss_image,final_loss_text,"
           "baseline,target_loss,samples_to_target,sample_ratio_vs_baseline\n";
    for (const LoadedRun& run : runs) {
        RunRecord rec;
        rec.rows = run.rows;
        const double reached = samples_to_reach(run.rows, target);
        const RunRow& last = run.rows.back();
        eff << run.name << ',' << run.optimizer << ',' << run.seed << ','
            << fmt(smoothed_final_loss(rec)) << ',' << fmt(last.loss_image) << ','
            << fmt(last.loss_text) << ',' << baseline->name << ',' << fmt(target) << ','
            << fmt(reached) << ','
            << (reached > 0.0 && baseline_samples > 0.0 ? fmt(reached / baseline_samples) : "nan")
            << "\n";
    }
}

} // namespace modprec::harness
