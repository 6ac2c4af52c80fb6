#pragma once

#include <cstddef>
#include <string>

#include "peftlab/model_config.hpp"
#include "peftlab/peft.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

/// Tunable parameters one method adds to a single sublayer of each kind.
struct SublayerCount {
    std::size_t attn = 0;   // N_W^attn
    std::size_t ffn = 0;    // N_W^ffn
    std::size_t input = 0;  // prompt vectors, counted once
};

struct BudgetReport {
    std::string method;
    SublayerCount per_sublayer;
    std::size_t attn_total = 0;  // N_W^attn * N_attn * L
    std::size_t ffn_total = 0;   // N_W^ffn * N_ffn * L
    std::size_t input_total = 0;
    /// Parameters outside the closed formulas: prefix MLPs and learned
    /// composition scales.
    std::size_t overhead = 0;
    /// Part of |Theta| produced by a prefix MLP instead of being trained.
    std::size_t generated = 0;
    /// Whole-model trainable sets (BitFit, full) counted from the model.
    std::size_t audited = 0;
    std::size_t base_total = 0;
    double relative_percent = 0.0;

    /// |Theta| = attn + ffn (+ prompt vectors).
    std::size_t theta() const { return attn_total + ffn_total + input_total; }
    /// Everything that will be trainable.
    std::size_t tunable() const { return theta() - generated + overhead + audited; }
};

/// Closed-form per-sublayer count. Throws ConfigError for methods without
/// one (BitFit, full) or a method/target pair that does not exist.
SublayerCount count_per_sublayer(const MethodSpec& m, std::size_t d, std::size_t d_m);
SublayerCount count_per_sublayer(const DesignSpec& spec, std::size_t d, std::size_t d_m);

/// Applies the layer and sublayer multiplicities (N_attn = 3, N_ffn = 2
/// per counted layer for encoder-decoder; 1 and 1 for encoder-only).
BudgetReport count_total(const ModelConfig& config, const PeftPlan& plan);

/// Sum of trainable tensor sizes in the live model.
std::size_t audit_trainable(const Transformer& model);
/// Sum of base-group tensor sizes.
std::size_t base_total(const Transformer& model);
/// Base size of a model built from `config`, without allocating weights.
std::size_t base_total(const ModelConfig& config);

/// 100 * |Theta| / base_total.
double relative_percentage(const BudgetReport& report, std::size_t base_total);
double relative_percentage(std::size_t tunable, std::size_t base_total);

std::string format_report(const BudgetReport& r);
std::string report_csv_header();
std::string report_csv_row(const BudgetReport& r);

}  // namespace peftlab
