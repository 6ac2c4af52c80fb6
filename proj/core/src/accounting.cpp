#include "peftlab/accounting.hpp"

#include <iomanip>
#include <sstream>

namespace peftlab {

namespace {

std::size_t projection_count(HookPoint p, std::size_t r, std::size_t d, std::size_t d_m) {
    switch (p) {
    case HookPoint::attn_query_proj:
    case HookPoint::attn_value_proj: return r * (d + d);
    case HookPoint::ffn_weight_1:
    case HookPoint::ffn_weight_2: return r * (d + d_m);
    default: break;
    }
    throw ConfigError(to_string(p) + " is not a projection");
}

std::string with_commas(std::size_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i > 0 && (digits.size() - i) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

}  // namespace

SublayerCount count_per_sublayer(const DesignSpec& spec, std::size_t d, std::size_t d_m) {
    spec.validate();
    const std::size_t b = spec.bottleneck;
    const HookPoint p = spec.modified_representation;
    std::size_t n = 0;
    if (spec.functional_form == FunctionalForm::softmax_bottleneck) {
        n = 2 * b * d;
    } else if (is_projection_hook(p)) {
        n = projection_count(p, b, d, d_m);
    } else {
        // sublayer outputs, and per-head pairs at head outputs (N_h * 2 r d_h)
        n = 2 * b * d;
    }
    SublayerCount c;
    (is_attention_hook(p) ? c.attn : c.ffn) = n;
    return c;
}

SublayerCount count_per_sublayer(const MethodSpec& m, std::size_t d, std::size_t d_m) {
    if (m.bottleneck < 1 && m.method != Method::bitfit && m.method != Method::full) {
        throw ContractError("bottleneck must be at least 1");
    }
    if (m.method == Method::bitfit || m.method == Method::full) {
        throw ConfigError(to_string(m.method) + " has no per-sublayer formula; audit the model instead");
    }
    SublayerCount c;
    if (m.method == Method::prompt) {
        c.input = m.bottleneck * d;
        return c;
    }
    for (const auto& spec : designs_for(m)) {
        auto part = count_per_sublayer(spec, d, d_m);
        c.attn += part.attn;
        c.ffn += part.ffn;
    }
    return c;
}

BudgetReport count_total(const ModelConfig& config, const PeftPlan& plan) {
    config.validate();
    BudgetReport r;
    const std::size_t L = config.layers, d = config.d_model, dm = config.d_ff;
    const std::size_t n_attn = config.attn_sublayers_per_layer() * L;
    const std::size_t n_ffn = config.ffn_sublayers_per_layer() * L;
    bool needs_model = false;
    for (const auto& m : plan) {
        if (!r.method.empty()) r.method += "+";
        r.method += m.label();
        if (m.method == Method::bitfit || m.method == Method::full) {
            needs_model = true;
            continue;
        }
        SublayerCount c = count_per_sublayer(m, d, dm);
        r.per_sublayer.attn += c.attn;
        r.per_sublayer.ffn += c.ffn;
        r.per_sublayer.input += c.input;
        r.attn_total += c.attn * n_attn;
        r.ffn_total += c.ffn * n_ffn;
        r.input_total += c.input;

        for (const auto& spec : designs_for(m)) {
            const std::size_t sites = is_attention_hook(spec.modified_representation) ? n_attn : n_ffn;
            const auto& comp = spec.composition;
            if (comp.kind == CompositionKind::scaled_add && comp.trainable_scale) {
                const bool per_head = spec.modified_representation == HookPoint::head_attn_output;
                r.overhead += sites * (per_head ? config.heads : 1);
            }
            if (spec.functional_form == FunctionalForm::softmax_bottleneck && m.prefix_reparam) {
                const std::size_t e = m.reparam_embed ? m.reparam_embed : d, h = m.reparam_hidden;
                const std::size_t out = 2 * d * sites;
                r.overhead += spec.bottleneck * e + e * h + h + h * out + out;
                r.generated += 2 * spec.bottleneck * d * sites;
            }
        }
    }
    r.base_total = base_total(config);
    if (needs_model) {
        Transformer meta(config, 0, false);
        attach_plan(meta, plan, 0);
        const bool full = plan_has(plan, Method::full);
        for (const auto& p : meta.parameters().all()) {
            if (p.group != ParamGroup::base) continue;
            if (full || p.is_bias) r.audited += p.size();
        }
    }
    r.relative_percent = relative_percentage(r.tunable(), r.base_total);
    return r;
}

std::size_t audit_trainable(const Transformer& model) {
    std::size_t n = 0;
    for (const auto& p : model.parameters().all())
        if (p.trainable) n += p.size();
    return n;
}

std::size_t base_total(const Transformer& model) {
    std::size_t n = 0;
    for (const auto& p : model.parameters().all())
        if (p.group == ParamGroup::base) n += p.size();
    return n;
}

std::size_t base_total(const ModelConfig& config) { return base_total(Transformer(config, 0, false)); }

double relative_percentage(std::size_t tunable, std::size_t base) {
    if (base == 0) throw ContractError("relative_percentage: base total must be positive");
    return 100.0 * static_cast<double>(tunable) / static_cast<double>(base);
}

double relative_percentage(const BudgetReport& report, std::size_t base) {
    return relative_percentage(report.tunable(), base);
}

std::string format_report(const BudgetReport& r) {
    std::ostringstream os;
    auto line = [&](const char* key, const std::string& value) {
        os << std::left << std::setw(22) << key << value << '\n';
    };
    line("method", r.method.empty() ? "(none)" : r.method);
    line("N_W^attn", with_commas(r.per_sublayer.attn));
    line("N_W^ffn", with_commas(r.per_sublayer.ffn));
    line("|Theta|_attn", with_commas(r.attn_total));
    line("|Theta|_ffn", with_commas(r.ffn_total));
    if (r.input_total) line("prompt vectors", with_commas(r.input_total));
    line("|Theta|", with_commas(r.theta()));
    if (r.generated) line("generated by MLP", with_commas(r.generated));
    if (r.overhead) line("overhead", with_commas(r.overhead));
    if (r.audited) line("audited", with_commas(r.audited));
    line("tunable", with_commas(r.tunable()));
    line("base total", with_commas(r.base_total));
    std::ostringstream pct;
    pct << std::fixed << std::setprecision(3) << r.relative_percent << '%';
    line("relative", pct.str());
    return os.str();
}

std::string report_csv_header() {
    return "method,n_w_attn,n_w_ffn,theta_attn,theta_ffn,prompt,theta,overhead,audited,tunable,base_total,"
           "rel_percent";
}

std::string report_csv_row(const BudgetReport& r) {
    std::ostringstream os;
    os << '"' << r.method << "\"," << r.per_sublayer.attn << ',' << r.per_sublayer.ffn << ',' << r.attn_total << ','
       << r.ffn_total << ',' << r.input_total << ',' << r.theta() << ',' << r.overhead << ',' << r.audited << ','
       << r.tunable() << ',' << r.base_total << ',' << std::setprecision(10) << r.relative_percent;
    return os.str();
}

}  // namespace peftlab
