#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace modprec::verify {

/// Outcome of one identity check. Informational checks report a measurement
/// without gating (pass stays true).
struct CheckResult {
    std::string name;
    bool pass = false;
    bool informational = false;
    double worst = 0.0;
    double tolerance = 0.0;
    double seconds = 0.0;
    std::string detail;
};

CheckResult check_kron_equivalence(std::uint64_t seed);
CheckResult check_inverse_root_contract(std::uint64_t seed);
CheckResult check_fisher_orthogonality(std::uint64_t seed);
CheckResult check_optimal_beta_agreement(std::uint64_t seed);
CheckResult check_strict_reduction(std::uint64_t seed);
CheckResult check_ngd_norm_identity(std::uint64_t seed);
CheckResult check_segment_reconstruction(std::uint64_t seed);
CheckResult check_fold_degeneracy(std::uint64_t seed);
CheckResult check_one_step_ngd(std::uint64_t seed);
/// Samples the universal "combined direction beats the plain mean for every
/// nonzero mixing coefficient" claim and reports the fraction of draws where
/// it holds. Reported, never asserted.
CheckResult check_fop_superiority_universal(std::uint64_t seed);

std::vector<CheckResult> run_identity_suite(std::uint64_t seed = 0);
nlohmann::json report_json(const std::vector<CheckResult>& results);

} // namespace modprec::verify
