#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace peftlab {

/// One measured quantity and the bound it must not exceed.
struct CheckLine {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;

    bool passed() const { return value <= tolerance; }
};

struct SuiteResult {
    std::string name;
    std::vector<CheckLine> checks;
    double seconds = 0.0;
    /// Wall-clock limit for the suite; 0 means none.
    double time_limit = 0.0;

    bool passed() const;
    /// Largest value over checks whose tolerance is below 1 (error checks).
    double max_error() const;
};

/// Native vs decomposed prefix attention over 100 random configurations.
SuiteResult verify_equivalence(std::uint64_t seed = 1);
/// Range, uniform-logit and dominant-prefix properties of lambda.
SuiteResult verify_lambda(std::uint64_t seed = 1);
/// Audit vs closed-form counts on desk and BART-shape models, and the
/// four reference budget percentages.
SuiteResult verify_counts();
/// Central differences for every primitive and PEFT module.
SuiteResult verify_gradients(std::uint64_t seed = 1);
/// Zero-init identity, LoRA merge, s = 1 and gating-off identities.
SuiteResult verify_identity(std::uint64_t seed = 1);
/// Singular values of modification matrices beyond the bottleneck.
SuiteResult verify_rank(std::uint64_t seed = 1);

const std::vector<std::string>& verify_suite_names();
SuiteResult run_verify_suite(const std::string& name, std::uint64_t seed = 1);
std::vector<SuiteResult> run_verify_suites(std::uint64_t seed = 1);

/// "PASS name  max_error=... (n checks, t s)" plus one line per failed check.
std::string format_suite(const SuiteResult& r, bool verbose = false);

}  // namespace peftlab
