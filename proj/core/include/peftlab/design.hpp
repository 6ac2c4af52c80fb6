#pragma once

#include <cstddef>
#include <string>

#include "peftlab/hooks.hpp"

namespace peftlab {

/// How the modification vector is computed from its input.
enum class FunctionalForm { relu_bottleneck, softmax_bottleneck, linear_bottleneck };
/// Whether the module reads the sublayer output (sequential) or input (parallel).
enum class InsertionForm { sequential, parallel };
enum class CompositionKind { add, scaled_add, gated_add };

struct Composition {
    CompositionKind kind = CompositionKind::add;
    double scale = 1.0;            // scaled_add only
    bool trainable_scale = false;  // scaled_add only: s is learned, starting at `scale`

    bool operator==(const Composition&) const = default;
};

/// One point of the design space: functional form x insertion form x
/// modified representation x composition function, plus the bottleneck
/// size (r, or l for prefixes).
struct DesignSpec {
    FunctionalForm functional_form = FunctionalForm::relu_bottleneck;
    InsertionForm insertion_form = InsertionForm::parallel;
    HookPoint modified_representation = HookPoint::ffn_sublayer_output;
    Composition composition;
    std::size_t bottleneck = 1;

    bool operator==(const DesignSpec&) const = default;

    /// Throws ConfigError for combinations no module implements.
    void validate() const;
    std::string str() const;
};

std::string to_string(FunctionalForm f);
std::string to_string(InsertionForm f);
std::string to_string(CompositionKind k);
std::string to_string(const Composition& c);

FunctionalForm parse_functional_form(const std::string& s);
InsertionForm parse_insertion_form(const std::string& s);
/// Accepts "add", "gated_add", "scaled_add", "scaled_add(4)" and
/// "scaled_add(trainable)" / "scaled_add(trainable,4)".
Composition parse_composition(const std::string& s);

bool is_attention_hook(HookPoint p);
bool is_ffn_hook(HookPoint p);
bool is_projection_hook(HookPoint p);

}  // namespace peftlab
