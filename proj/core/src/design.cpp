#include "peftlab/design.hpp"

#include <sstream>

#include "peftlab/tensor.hpp"

namespace peftlab {

std::string to_string(FunctionalForm f) {
    switch (f) {
    case FunctionalForm::relu_bottleneck: return "relu_bottleneck";
    case FunctionalForm::softmax_bottleneck: return "softmax_bottleneck";
    case FunctionalForm::linear_bottleneck: return "linear_bottleneck";
    }
    return "?";
}

std::string to_string(InsertionForm f) { return f == InsertionForm::sequential ? "sequential" : "parallel"; }

std::string to_string(CompositionKind k) {
    switch (k) {
    case CompositionKind::add: return "add";
    case CompositionKind::scaled_add: return "scaled_add";
    case CompositionKind::gated_add: return "gated_add";
    }
    return "?";
}

std::string to_string(const Composition& c) {
    if (c.kind != CompositionKind::scaled_add) return to_string(c.kind);
    std::ostringstream os;
    os << "scaled_add(";
    if (c.trainable_scale) os << "trainable,";
    os << c.scale << ')';
    return os.str();
}

FunctionalForm parse_functional_form(const std::string& s) {
    for (auto f : {FunctionalForm::relu_bottleneck, FunctionalForm::softmax_bottleneck,
                   FunctionalForm::linear_bottleneck})
        if (s == to_string(f)) return f;
    throw ConfigError("unknown functional_form '" + s + "'");
}

InsertionForm parse_insertion_form(const std::string& s) {
    if (s == "sequential") return InsertionForm::sequential;
    if (s == "parallel") return InsertionForm::parallel;
    throw ConfigError("unknown insertion_form '" + s + "'");
}

Composition parse_composition(const std::string& s) {
    Composition c;
    if (s == "add") return c;
    if (s == "gated_add") {
        c.kind = CompositionKind::gated_add;
        return c;
    }
    if (s.rfind("scaled_add", 0) != 0) throw ConfigError("unknown composition '" + s + "'");
    c.kind = CompositionKind::scaled_add;
    c.scale = 4.0;
    std::string rest = s.substr(10);
    if (rest.empty()) return c;
    if (rest.front() != '(' || rest.back() != ')') throw ConfigError("malformed composition '" + s + "'");
    rest = rest.substr(1, rest.size() - 2);
    if (rest.rfind("trainable", 0) == 0) {
        c.trainable_scale = true;
        rest = rest.substr(9);
        if (!rest.empty() && rest.front() == ',') rest = rest.substr(1);
        if (rest.empty()) return c;
    }
    try {
        std::size_t used = 0;
        c.scale = std::stod(rest, &used);
        if (used != rest.size()) throw ConfigError("");
    } catch (const std::exception&) {
        throw ConfigError("malformed scale in composition '" + s + "'");
    }
    return c;
}

bool is_attention_hook(HookPoint p) {
    return p == HookPoint::attn_query_proj || p == HookPoint::attn_value_proj || p == HookPoint::head_attn_output ||
           p == HookPoint::attn_sublayer_output;
}

bool is_ffn_hook(HookPoint p) {
    return p == HookPoint::ffn_weight_1 || p == HookPoint::ffn_weight_2 || p == HookPoint::ffn_sublayer_output;
}

bool is_projection_hook(HookPoint p) {
    return p == HookPoint::attn_query_proj || p == HookPoint::attn_value_proj || p == HookPoint::ffn_weight_1 ||
           p == HookPoint::ffn_weight_2;
}

void DesignSpec::validate() const {
    const auto where = modified_representation;
    auto fail = [this](const std::string& why) { throw ConfigError("invalid design " + str() + ": " + why); };
    if (bottleneck < 1) fail("bottleneck must be at least 1");
    if (where == HookPoint::input_embedding) fail("input embeddings are modified through prompt tuning");
    if (where == HookPoint::bias_terms) fail("bias terms are tuned through BitFit");
    if (composition.kind == CompositionKind::gated_add &&
        (functional_form != FunctionalForm::softmax_bottleneck || where != HookPoint::head_attn_output)) {
        fail("gated_add needs a softmax bottleneck at head_attn_output");
    }
    if (composition.kind == CompositionKind::scaled_add && !(composition.scale > 0.0)) fail("scale must be positive");
    if (functional_form == FunctionalForm::softmax_bottleneck) {
        if (where != HookPoint::head_attn_output) fail("softmax bottleneck only exists at head_attn_output");
        if (insertion_form != InsertionForm::parallel) fail("softmax bottleneck reads the sublayer input");
        if (composition.kind == CompositionKind::scaled_add) fail("softmax bottleneck composes by gated_add or add");
    }
    if (is_projection_hook(where)) {
        if (functional_form != FunctionalForm::linear_bottleneck) fail("weight updates are linear bottlenecks");
        if (insertion_form != InsertionForm::parallel) fail("weight updates read the projection input");
    }
    if (where == HookPoint::head_attn_output && insertion_form != InsertionForm::parallel) {
        fail("head outputs are only modified in parallel");
    }
}

std::string DesignSpec::str() const {
    std::ostringstream os;
    os << '{' << to_string(functional_form) << ", " << to_string(insertion_form) << ", "
       << to_string(modified_representation) << ", " << to_string(composition) << ", b=" << bottleneck << '}';
    return os.str();
}

}  // namespace peftlab
