// Command-line front end: train / sweep / verify / report.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "modprec/harness.hpp"
#include "modprec/verify.hpp"

namespace {

namespace fs = std::filesystem;
using namespace modprec;

harness::RunConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
    harness::RunConfig config = harness::parse_config_file(path);
    for (const std::string& assignment : sets) harness::apply_override(config, assignment);
    config.validate();
    return config;
}

std::string run_name(const harness::RunConfig& config, double lr) {
    std::ostringstream os;
    os << harness::optimizer_name(config.optimizer) << "_lr" << lr << "_seed" << config.seed;
    return os.str();
}

void save_run(const harness::RunConfig& config, const harness::RunRecord& record,
              const std::string& out_dir, const std::string& name) {
    fs::create_directories(out_dir);
    const fs::path csv_path = fs::path(out_dir) / (name + ".csv");
    std::ofstream csv(csv_path);
    if (!csv) throw Error("cannot write " + csv_path.string());
    harness::write_csv(record, csv);
    const fs::path manifest_path = fs::path(out_dir) / (name + ".manifest.json");
    std::ofstream manifest(manifest_path);
    manifest << harness::manifest_json(config, record).dump(2) << "\n";
    std::cout << "wrote " << csv_path.string() << (record.diverged ? "  [diverged]" : "") << "\n";
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out_dir, std::string name) {
    const harness::RunConfig config = load_config(config_path, sets);
    const harness::RunRecord record = harness::run_training(config);
    if (name.empty()) name = run_name(config, config.base_lr);
    save_run(config, record, out_dir, name);
    if (!record.rows.empty()) {
        const auto& last = record.rows.back();
        std::cout << "final: step " << last.step << "  loss_total " << last.loss_total
                  << "  loss_image " << last.loss_image << "  loss_text " << last.loss_text
                  << "\n";
    }
    return record.diverged ? 2 : 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& grid_arg, const std::string& out_dir) {
    const harness::RunConfig config = load_config(config_path, sets);
    std::vector<double> grid;
    if (grid_arg == "default") {
        grid = harness::default_lr_grid();
    } else {
        std::istringstream in(grid_arg);
        std::string item;
        while (std::getline(in, item, ',')) grid.push_back(std::stod(item));
    }
    const harness::SweepResult sweep = harness::grid_search(config, grid);
    for (const harness::SweepRun& run : sweep.runs) {
        harness::RunConfig run_config = config;
        run_config.base_lr = run.lr;
        save_run(run_config, run.record, out_dir, run_name(run_config, run.lr));
        std::cout << "  lr " << run.lr << "  smoothed final "
                  << (run.record.diverged ? std::string("diverged")
                                          : std::to_string(run.smoothed_final))
                  << "\n";
    }
    std::cout << "best_lr " << sweep.best_lr << "\n";
    return 0;
}

int cmd_verify(const std::string& report_path, std::uint64_t seed) {
    const auto results = verify::run_identity_suite(seed);
    bool all_pass = true;
    for (const auto& r : results) {
        const char* status = r.informational ? "info" : (r.pass ? "pass" : "FAIL");
        std::cout << "[" << status << "] " << r.name << ": " << r.detail << "  ("
                  << std::fixed << std::setprecision(2) << r.seconds << "s)\n";
        std::cout.unsetf(std::ios::floatfield);
        if (!r.informational && !r.pass) all_pass = false;
    }
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw Error("cannot write " + report_path);
        out << verify::report_json(results).dump(2) << "\n";
        std::cout << "wrote " << report_path << "\n";
    }
    return all_pass ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"modality-aware preconditioning experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs", name, grid_arg = "default";
    std::string report_path, runs_dir, report_out;
    std::vector<std::string> sets;
    std::uint64_t verify_seed = 0;

    auto* train = app.add_subcommand("train", "run one training configuration");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--set", sets, "override key=value");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--name", name, "run name (default optimizer_lr_seed)");

    auto* sweep = app.add_subcommand("sweep", "learning-rate grid search");
    sweep->add_option("--config", config_path, "config file")->required();
    sweep->add_option("--set", sets, "override key=value");
    sweep->add_option("--grid", grid_arg, "'default' or comma-separated learning rates");
    sweep->add_option("--out", out_dir, "output directory");

    auto* verify_cmd = app.add_subcommand("verify", "run the exact-identity suite");
    verify_cmd->add_option("--report", report_path, "write a JSON report here");
    verify_cmd->add_option("--seed", verify_seed, "suite seed");

    auto* report = app.add_subcommand("report", "merge run CSVs into loss curves + efficiency");
    report->add_option("--runs", runs_dir, "directory of run CSVs")->required();
    report->add_option("--out", report_out, "output CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, sets, out_dir, name);
        if (sweep->parsed()) return cmd_sweep(config_path, sets, grid_arg, out_dir);
        if (verify_cmd->parsed()) return cmd_verify(report_path, verify_seed);
        if (report->parsed()) {
            modprec::harness::write_report(runs_dir, report_out);
            std::cout << "wrote " << report_out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
