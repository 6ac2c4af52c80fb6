#include "peftlab/peft.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "peftlab/random.hpp"

namespace peftlab {

namespace {

Tensor activate(const Tensor& t, FunctionalForm form) {
    return form == FunctionalForm::relu_bottleneck ? relu(t) : t;
}

Tensor compose_scaled(const Tensor& h, const Tensor& delta, const Composition& c, const Tensor& learned) {
    switch (c.kind) {
    case CompositionKind::add: return add(h, delta);
    case CompositionKind::scaled_add:
        return add(h, learned.defined() ? scale_by(delta, learned) : scale(delta, c.scale));
    case CompositionKind::gated_add: break;
    }
    throw ContractError("gated_add composes only prefix modules");
}

void require_width(const Tensor& t, std::size_t width, const char* what) {
    if (t.cols() != width) {
        throw DimensionError(std::string(what) + ": input " + shape_str(t.shape()) + " does not match width " +
                             std::to_string(width));
    }
}

Tensor extended_mask(const Tensor& mask, std::size_t n, std::size_t l) {
    if (!mask.defined()) return {};
    return concat_cols(std::vector<Tensor>{Tensor::zeros({n, l}), mask});
}

std::size_t head_count_check(std::size_t d, std::size_t heads) {
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("width " + std::to_string(d) + " does not split into " + std::to_string(heads) +
                             " heads");
    }
    return d / heads;
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels

Tensor adapter_delta(const Tensor& input, const AdapterParams& p, FunctionalForm form) {
    if (form == FunctionalForm::softmax_bottleneck) throw ContractError("adapter_delta: softmax is the prefix form");
    require_width(input, p.W_down.rows(), "adapter_delta");
    if (p.W_down.cols() != p.W_up.rows()) {
        throw DimensionError("adapter_delta: W_down " + shape_str(p.W_down.shape()) + " vs W_up " +
                             shape_str(p.W_up.shape()));
    }
    return matmul(activate(matmul(input, p.W_down), form), p.W_up);
}

Tensor lora_delta(const Tensor& x, const LoraParams& p) {
    require_width(x, p.W_down.rows(), "lora_delta");
    if (p.W_down.cols() != p.W_up.rows()) {
        throw DimensionError("lora_delta: W_down " + shape_str(p.W_down.shape()) + " vs W_up " +
                             shape_str(p.W_up.shape()));
    }
    Tensor low = matmul(matmul(x, p.W_down), p.W_up);
    return p.scale.defined() ? scale_by(low, p.scale) : scale(low, p.s);
}

std::vector<Tensor> multihead_parallel_adapter_delta(const Tensor& x, const MultiHeadAdapterParams& p) {
    const std::size_t heads = p.heads.size();
    const std::size_t dh = head_count_check(x.cols(), heads);
    std::vector<Tensor> out;
    out.reserve(heads);
    for (std::size_t i = 0; i < heads; ++i) out.push_back(adapter_delta(slice_cols(x, i * dh, dh), p.heads[i]));
    return out;
}

std::pair<Tensor, Tensor> prefix_reparam_forward(const PrefixParams& p) {
    if (!p.reparam) return {p.P_k, p.P_v};
    const auto& r = *p.reparam;
    if (p.site >= r.sites) throw ContractError("prefix site outside the shared reparameterization");
    Tensor hidden = tanh(add_row(matmul(r.embedding, r.W_hidden), r.b_hidden));
    Tensor out = add_row(matmul(hidden, r.W_out), r.b_out);
    const std::size_t d = r.d_model;
    return {slice_cols(out, p.site * 2 * d, d), slice_cols(out, p.site * 2 * d + d, d)};
}

Tensor prefix_head_native(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& P_k, const Tensor& P_v,
                          double scale_factor, const Tensor& mask) {
    if (P_k.rows() == 0) throw ContractError("prefix length must be at least 1");
    return attn(q, concat_rows(P_k, k), concat_rows(P_v, v), scale_factor, extended_mask(mask, q.rows(), P_k.rows()));
}

Tensor prefix_head_lambda(const Tensor& q, const Tensor& k, const Tensor& P_k, double scale_factor,
                          const Tensor& mask) {
    if (P_k.rows() == 0) throw ContractError("prefix length must be at least 1");
    Tensor prefix_logits = scale(matmul(q, transpose(P_k)), scale_factor);
    Tensor content_logits = scale(matmul(q, transpose(k)), scale_factor);
    if (mask.defined()) content_logits = add(content_logits, mask);
    Tensor all = concat_cols(std::vector<Tensor>{prefix_logits, content_logits});
    return exp(sub(logsumexp_rows(prefix_logits), logsumexp_rows(all)));
}

Tensor prefix_head_equivalent(const Tensor& h, const Tensor& q, const Tensor& k, const Tensor& P_k,
                              const Tensor& P_v, double scale_factor, const Tensor& mask, bool gated) {
    Tensor delta = attn(q, P_k, P_v, scale_factor);
    if (!gated) return add(h, delta);
    Tensor lambda = prefix_head_lambda(q, k, P_k, scale_factor, mask);
    Tensor keep = add_scalar(scale(lambda, -1.0), 1.0);
    return add(mul_rows(h, keep), mul_rows(delta, lambda));
}

namespace {

struct HeadViews {
    std::size_t dh;
    double scale_factor;
    Tensor q, k, v, P_k, P_v;
};

HeadViews project(const Tensor& x, const Tensor& c, const AttentionWeights& w, const PrefixParams& p,
                  std::size_t heads) {
    HeadViews out;
    out.dh = head_count_check(x.cols(), heads);
    out.scale_factor = 1.0 / std::sqrt(static_cast<double>(out.dh));
    out.q = matmul(x, w.W_q);
    out.k = matmul(c, w.W_k);
    out.v = matmul(c, w.W_v);
    std::tie(out.P_k, out.P_v) = prefix_reparam_forward(p);
    if (out.P_k.rows() == 0) throw ContractError("prefix length must be at least 1");
    if (out.P_k.cols() != x.cols() || out.P_v.cols() != x.cols() || out.P_k.rows() != out.P_v.rows()) {
        throw DimensionError("prefix blocks " + shape_str(out.P_k.shape()) + " / " + shape_str(out.P_v.shape()) +
                             " do not fit width " + std::to_string(x.cols()));
    }
    return out;
}

Tensor cols(const Tensor& t, std::size_t head, std::size_t dh) { return slice_cols(t, head * dh, dh); }

}  // namespace

std::vector<Tensor> prefix_attention_native(const Tensor& x, const Tensor& c, const AttentionWeights& w,
                                            const PrefixParams& p, std::size_t heads, const Tensor& mask) {
    HeadViews hv = project(x, c, w, p, heads);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < heads; ++i) {
        out.push_back(prefix_head_native(cols(hv.q, i, hv.dh), cols(hv.k, i, hv.dh), cols(hv.v, i, hv.dh),
                                         cols(hv.P_k, i, hv.dh), cols(hv.P_v, i, hv.dh), hv.scale_factor, mask));
    }
    return out;
}

std::vector<Tensor> prefix_lambda(const Tensor& x, const Tensor& c, const AttentionWeights& w, const PrefixParams& p,
                                  std::size_t heads, const Tensor& mask) {
    HeadViews hv = project(x, c, w, p, heads);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < heads; ++i) {
        out.push_back(prefix_head_lambda(cols(hv.q, i, hv.dh), cols(hv.k, i, hv.dh), cols(hv.P_k, i, hv.dh),
                                         hv.scale_factor, mask));
    }
    return out;
}

std::vector<Tensor> prefix_attention_equivalent(const Tensor& x, const Tensor& c, const AttentionWeights& w,
                                                const PrefixParams& p, std::size_t heads, const Tensor& mask,
                                                bool gated) {
    HeadViews hv = project(x, c, w, p, heads);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < heads; ++i) {
        Tensor q = cols(hv.q, i, hv.dh), k = cols(hv.k, i, hv.dh);
        Tensor h = attn(q, k, cols(hv.v, i, hv.dh), hv.scale_factor, mask);
        out.push_back(prefix_head_equivalent(h, q, k, cols(hv.P_k, i, hv.dh), cols(hv.P_v, i, hv.dh),
                                             hv.scale_factor, mask, gated));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Modules

AdapterModule::AdapterModule(DesignSpec spec, AdapterParams p) : spec_(std::move(spec)), p_(std::move(p)) {}

Tensor AdapterModule::apply(const HookContext& ctx, const Tensor& h) const {
    const Stage wanted = spec_.insertion_form == InsertionForm::parallel ? Stage::parallel : Stage::sequential;
    if (ctx.stage != wanted) return h;
    return compose_scaled(h, adapter_delta(ctx.input, p_, spec_.functional_form), spec_.composition, p_.scale);
}

std::string AdapterModule::describe() const { return "adapter " + spec_.str(); }

MultiHeadAdapterModule::MultiHeadAdapterModule(DesignSpec spec, MultiHeadAdapterParams p)
    : spec_(std::move(spec)), p_(std::move(p)) {}

Tensor MultiHeadAdapterModule::apply(const HookContext& ctx, const Tensor& h) const {
    if (!ctx.head) throw ContractError("multi-head adapter invoked without a head context");
    const auto& hc = *ctx.head;
    if (hc.head >= p_.heads.size()) throw ContractError("head index outside multi-head adapter");
    const auto& pair = p_.heads[hc.head];
    Tensor xh = slice_cols(hc.x, hc.head * hc.head_dim, hc.head_dim);
    return compose_scaled(h, adapter_delta(xh, pair, spec_.functional_form), spec_.composition, pair.scale);
}

std::string MultiHeadAdapterModule::describe() const { return "multi-head adapter " + spec_.str(); }

LoraModule::LoraModule(DesignSpec spec, LoraParams p) : spec_(std::move(spec)), p_(std::move(p)) {}

Tensor LoraModule::apply(const HookContext& ctx, const Tensor& h) const { return add(h, lora_delta(ctx.input, p_)); }

std::string LoraModule::describe() const { return "lora " + spec_.str(); }

PrefixModule::PrefixModule(DesignSpec spec, PrefixParams p, std::size_t heads, PrefixForm form)
    : spec_(std::move(spec)), p_(std::move(p)), heads_(heads), form_(form) {}

std::pair<Tensor, Tensor> PrefixModule::head_blocks(std::uint64_t pass_id, std::size_t head) const {
    std::lock_guard<std::mutex> lock(mu_);
    if (cache_.keys.empty() || cache_.pass_id != pass_id) {
        auto [P_k, P_v] = prefix_reparam_forward(p_);
        const std::size_t dh = head_count_check(P_k.cols(), heads_);
        cache_.pass_id = pass_id;
        cache_.keys.clear();
        cache_.values.clear();
        for (std::size_t i = 0; i < heads_; ++i) {
            cache_.keys.push_back(cols(P_k, i, dh));
            cache_.values.push_back(cols(P_v, i, dh));
        }
    }
    return {cache_.keys.at(head), cache_.values.at(head)};
}

Tensor PrefixModule::apply(const HookContext& ctx, const Tensor& h) const {
    if (!ctx.head) throw ContractError("prefix module invoked without a head context");
    const auto& hc = *ctx.head;
    auto [P_k, P_v] = head_blocks(ctx.pass_id, hc.head);
    const bool gated = spec_.composition.kind == CompositionKind::gated_add;
    if (form_ == PrefixForm::native && gated) return prefix_head_native(hc.q, hc.k, hc.v, P_k, P_v, hc.scale, hc.mask);
    return prefix_head_equivalent(h, hc.q, hc.k, P_k, P_v, hc.scale, hc.mask, gated);
}

std::string PrefixModule::describe() const { return "prefix " + spec_.str(); }

std::string PromptModule::describe() const { return "prompt l=" + std::to_string(p_.length); }

// ---------------------------------------------------------------------------
// Dispatch

namespace {

bool location_fits(HookPoint p, const Location& where) {
    if (is_attention_hook(p)) {
        return where.sublayer == Sublayer::self_attention || where.sublayer == Sublayer::cross_attention;
    }
    if (is_ffn_hook(p)) return where.sublayer == Sublayer::ffn;
    return false;
}

/// Input and output widths of the representation a projection hook adds to.
std::pair<std::size_t, std::size_t> projection_widths(HookPoint p, const ModelConfig& c) {
    switch (p) {
    case HookPoint::attn_query_proj:
    case HookPoint::attn_value_proj: return {c.d_model, c.d_model};
    case HookPoint::ffn_weight_1: return {c.d_model, c.d_ff};
    case HookPoint::ffn_weight_2: return {c.d_ff, c.d_model};
    default: break;
    }
    throw ConfigError(to_string(p) + " is not a projection");
}

class Registrar {
public:
    explicit Registrar(Transformer& model) : store_(model.parameters()) {}

    Tensor add(const std::string& name, const Shape& shape, const Tensor& value) {
        if (store_.materialized() && !value.defined()) throw ConfigError("parameter '" + name + "' has no value");
        return store_.add(name, shape, ParamGroup::peft, [&](const Shape&) { return value; });
    }

    void add_scale(const std::string& prefix, const Composition& c, Tensor& scale) {
        if (c.kind != CompositionKind::scaled_add || !c.trainable_scale) return;
        if (store_.materialized() && !scale.defined()) scale = Tensor::scalar(c.scale);
        scale = add(prefix + "scale", {}, scale);
    }

    void add_reparam(const std::shared_ptr<const PrefixReparam>& r, std::size_t length) {
        if (!r || seen_.count(r.get())) return;
        const std::string prefix = "peft.prefix_mlp" + std::to_string(count_mlps()) + ".";
        seen_.emplace(r.get(), prefix);
        const std::size_t out_width = 2 * r->d_model * r->sites;
        const std::size_t e = r->embedding.defined() ? r->embedding.cols() : r->embed_dim;
        const std::size_t hidden = r->W_hidden.defined() ? r->W_hidden.cols() : r->hidden;
        add(prefix + "embedding", {length, e}, r->embedding);
        add(prefix + "W_hidden", {e, hidden}, r->W_hidden);
        add(prefix + "bias_hidden", {hidden}, r->b_hidden);
        add(prefix + "W_out", {hidden, out_width}, r->W_out);
        add(prefix + "bias_out", {out_width}, r->b_out);
    }

private:
    std::size_t count_mlps() const {
        std::size_t n = 0;
        for (const auto& p : store_.all())
            if (p.name.rfind("peft.prefix_mlp", 0) == 0 && p.name.find(".embedding") != std::string::npos) ++n;
        return n;
    }

    ParameterStore& store_;
    std::map<const PrefixReparam*, std::string> seen_;
};

std::string site_prefix(HookPoint p, const Location& where) {
    return "peft." + where.str() + "." + to_string(p) + ".";
}

}  // namespace

void attach_modifications(Transformer& model, const std::vector<Attachment>& attachments, PrefixForm prefix_form) {
    const ModelConfig& cfg = model.config();
    const std::size_t d = cfg.d_model, heads = cfg.heads, dh = cfg.head_dim();
    Registrar reg(model);
    for (const auto& a : attachments) {
        a.spec.validate();
        const HookPoint point = a.spec.modified_representation;
        if (!location_fits(point, a.where)) {
            throw ConfigError("hook point " + to_string(point) + " does not exist at " + a.where.str());
        }
        if (model.attachment(point, a.where)) {
            throw ConfigError("duplicate attachment at " + to_string(point) + " / " + a.where.str());
        }
        const std::size_t b = a.spec.bottleneck;
        const std::string prefix = site_prefix(point, a.where);
        auto mismatch = [&](const char* expected) {
            throw ConfigError("design " + a.spec.str() + " expects " + expected + " parameters");
        };

        std::shared_ptr<const Modification> mod;
        if (a.spec.functional_form == FunctionalForm::softmax_bottleneck) {
            auto* pp = std::get_if<PrefixParams>(&a.params);
            if (!pp) mismatch("prefix");
            PrefixParams p = *pp;
            if (p.length == 0) throw ContractError("prefix length must be at least 1");
            if (p.length != b) throw ConfigError("prefix length differs from design bottleneck");
            if (p.reparam) {
                reg.add_reparam(p.reparam, p.length);
            } else {
                p.P_k = reg.add(prefix + "P_k", {b, d}, p.P_k);
                p.P_v = reg.add(prefix + "P_v", {b, d}, p.P_v);
            }
            mod = std::make_shared<PrefixModule>(a.spec, p, heads, prefix_form);
        } else if (point == HookPoint::head_attn_output) {
            auto* pp = std::get_if<MultiHeadAdapterParams>(&a.params);
            if (!pp) mismatch("multi-head adapter");
            MultiHeadAdapterParams p = *pp;
            if (p.heads.size() != heads) throw DimensionError("multi-head adapter needs one pair per head");
            for (std::size_t i = 0; i < heads; ++i) {
                const std::string hp = prefix + "head" + std::to_string(i) + ".";
                p.heads[i].W_down = reg.add(hp + "W_down", {dh, b}, p.heads[i].W_down);
                p.heads[i].W_up = reg.add(hp + "W_up", {b, dh}, p.heads[i].W_up);
                reg.add_scale(hp, a.spec.composition, p.heads[i].scale);
            }
            mod = std::make_shared<MultiHeadAdapterModule>(a.spec, p);
        } else if (is_projection_hook(point)) {
            auto* pp = std::get_if<LoraParams>(&a.params);
            if (!pp) mismatch("lora");
            LoraParams p = *pp;
            if (p.target != point) throw ConfigError("lora target differs from design hook point");
            auto [in, out] = projection_widths(point, cfg);
            if (b > std::min(in, out)) throw ConfigError("lora rank exceeds min(d, k)");
            if (a.spec.composition.kind == CompositionKind::scaled_add) {
                p.s = a.spec.composition.scale;
            } else {
                p.s = 1.0;
            }
            if (p.s < 1.0) throw ConfigError("lora scale must be at least 1");
            p.W_down = reg.add(prefix + "W_down", {in, b}, p.W_down);
            p.W_up = reg.add(prefix + "W_up", {b, out}, p.W_up);
            reg.add_scale(prefix, a.spec.composition, p.scale);
            mod = std::make_shared<LoraModule>(a.spec, p);
        } else {
            auto* pp = std::get_if<AdapterParams>(&a.params);
            if (!pp) mismatch("adapter");
            AdapterParams p = *pp;
            p.W_down = reg.add(prefix + "W_down", {d, b}, p.W_down);
            p.W_up = reg.add(prefix + "W_up", {b, d}, p.W_up);
            reg.add_scale(prefix, a.spec.composition, p.scale);
            mod = std::make_shared<AdapterModule>(a.spec, p);
        }
        model.attach(a.where, std::move(mod));
    }
}

void prompt_tuning_attach(Transformer& model, const PromptParams& p) {
    if (p.length == 0) throw ContractError("prompt length must be at least 1");
    PromptParams q = p;
    auto& store = model.parameters();
    if (store.materialized() && !q.P_e.defined()) throw ConfigError("prompt vectors have no value");
    q.P_e = store.add("peft.prompt.P_e", {q.length, model.config().d_model}, ParamGroup::peft,
                      [&](const Shape&) { return q.P_e; });
    model.attach(Location{Stack::encoder, 0, Sublayer::embedding}, std::make_shared<PromptModule>(q));
}

BitfitMask bitfit_attach(Transformer& model) {
    BitfitMask mask;
    auto& store = model.parameters();
    std::vector<std::string> names;
    for (const auto& p : store.all()) names.push_back(p.name);
    for (const auto& name : names) {
        const auto& p = store.at(name);
        const bool on = p.group == ParamGroup::base && p.is_bias;
        store.set_trainable(name, on);
        if (on) mask.names.push_back(name);
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Plans

std::string to_string(Method m) {
    switch (m) {
    case Method::prefix: return "prefix";
    case Method::adapter_seq: return "adapter_seq";
    case Method::adapter_par: return "adapter_par";
    case Method::scaled_pa: return "scaled_pa";
    case Method::mh_pa: return "mh_pa";
    case Method::lora: return "lora";
    case Method::prompt: return "prompt";
    case Method::bitfit: return "bitfit";
    case Method::full: return "full";
    case Method::custom: return "custom";
    }
    return "?";
}

Method parse_method(const std::string& s) {
    for (auto m : {Method::prefix, Method::adapter_seq, Method::adapter_par, Method::scaled_pa, Method::mh_pa,
                   Method::lora, Method::prompt, Method::bitfit, Method::full, Method::custom})
        if (s == to_string(m)) return m;
    throw ConfigError("unknown method '" + s + "'");
}

std::string to_string(Target t) { return t == Target::attn ? "attn" : "ffn"; }

Target parse_target(const std::string& s) {
    if (s == "attn") return Target::attn;
    if (s == "ffn") return Target::ffn;
    throw ConfigError("unknown target '" + s + "'");
}

std::string MethodSpec::label() const {
    std::ostringstream os;
    switch (method) {
    case Method::prefix:
        os << "prefix(l=" << bottleneck << (gating ? "" : ",-gating") << ')';
        return os.str();
    case Method::prompt: os << "prompt(l=" << bottleneck << ')'; return os.str();
    case Method::bitfit: return "bitfit";
    case Method::full: return "full";
    case Method::custom: return "custom" + design.str();
    default: break;
    }
    os << to_string(method) << '-' << to_string(target) << "(r=" << bottleneck;
    if (method == Method::scaled_pa || method == Method::lora) {
        os << ",s=" << (trainable_scale ? "trainable:" : "") << scale;
    }
    os << ')';
    return os.str();
}

std::vector<DesignSpec> designs_for(const MethodSpec& m) {
    if (m.bottleneck < 1 && m.method != Method::bitfit && m.method != Method::full) {
        throw ContractError(to_string(m.method) + ": bottleneck must be at least 1");
    }
    const HookPoint out = m.target == Target::attn ? HookPoint::attn_sublayer_output : HookPoint::ffn_sublayer_output;
    Composition scaled{CompositionKind::scaled_add, m.scale, m.trainable_scale};
    DesignSpec d;
    d.bottleneck = m.bottleneck;
    switch (m.method) {
    case Method::prefix:
        if (m.target != Target::attn) throw ConfigError("prefix tuning modifies attention heads only");
        d.functional_form = FunctionalForm::softmax_bottleneck;
        d.insertion_form = InsertionForm::parallel;
        d.modified_representation = HookPoint::head_attn_output;
        d.composition.kind = m.gating ? CompositionKind::gated_add : CompositionKind::add;
        return {d};
    case Method::adapter_seq:
    case Method::adapter_par:
    case Method::scaled_pa:
        d.functional_form = m.form;
        d.insertion_form = m.method == Method::adapter_seq ? InsertionForm::sequential : InsertionForm::parallel;
        d.modified_representation = out;
        if (m.method == Method::scaled_pa) d.composition = scaled;
        return {d};
    case Method::mh_pa:
        if (m.target != Target::attn) throw ConfigError("multi-head adapters modify attention heads only");
        d.functional_form = m.form;
        d.insertion_form = InsertionForm::parallel;
        d.modified_representation = HookPoint::head_attn_output;
        return {d};
    case Method::lora: {
        d.functional_form = FunctionalForm::linear_bottleneck;
        d.insertion_form = InsertionForm::parallel;
        d.composition = scaled;
        DesignSpec second = d;
        if (m.target == Target::attn) {
            d.modified_representation = HookPoint::attn_query_proj;
            second.modified_representation = HookPoint::attn_value_proj;
        } else {
            d.modified_representation = HookPoint::ffn_weight_1;
            second.modified_representation = HookPoint::ffn_weight_2;
        }
        return {d, second};
    }
    case Method::custom: return {m.design};
    case Method::prompt:
    case Method::bitfit:
    case Method::full: return {};
    }
    return {};
}

namespace {

bool lora_init(const DesignSpec& d) {
    return d.composition.kind == CompositionKind::scaled_add;
}

Tensor maybe(bool materialized, const std::function<Tensor()>& make) { return materialized ? make() : Tensor{}; }

}  // namespace

std::vector<Attachment> instantiate(const Transformer& model, const PeftPlan& plan, std::uint64_t seed,
                                    const InitOptions& init) {
    const ModelConfig& cfg = model.config();
    const bool mat = model.parameters().materialized();
    const std::size_t d = cfg.d_model, heads = cfg.heads, dh = cfg.head_dim();
    std::vector<Attachment> out;
    for (std::size_t mi = 0; mi < plan.size(); ++mi) {
        const MethodSpec& m = plan[mi];
        Rng rng(mix_seed(seed, mi + 1));
        auto up = [&](Shape s, double sd) {
            return maybe(mat, [&] { return init.zero_up ? Tensor::zeros(s) : rng.normal_tensor(s, sd); });
        };
        auto down_uniform = [&](Shape s) {
            return maybe(mat, [&] { return rng.uniform_tensor(s, 1.0 / std::sqrt(static_cast<double>(s[0]))); });
        };
        auto normal = [&](Shape s, double sd) { return maybe(mat, [&] { return rng.normal_tensor(s, sd); }); };

        for (const DesignSpec& spec : designs_for(m)) {
            spec.validate();
            const HookPoint point = spec.modified_representation;
            const auto locations = is_attention_hook(point) ? model.attention_locations() : model.ffn_locations();
            const std::size_t b = spec.bottleneck;

            std::shared_ptr<PrefixReparam> reparam;
            if (spec.functional_form == FunctionalForm::softmax_bottleneck && m.prefix_reparam) {
                reparam = std::make_shared<PrefixReparam>();
                reparam->sites = locations.size();
                reparam->d_model = d;
                reparam->embed_dim = m.reparam_embed ? m.reparam_embed : d;
                reparam->hidden = m.reparam_hidden;
                const std::size_t e = reparam->embed_dim, hdim = reparam->hidden, ow = 2 * d * reparam->sites;
                reparam->embedding = normal({b, e}, 1.0);
                reparam->W_hidden = down_uniform({e, hdim});
                reparam->b_hidden = maybe(mat, [&] { return Tensor::zeros({hdim}); });
                reparam->W_out = init.zero_up ? maybe(mat, [&] { return Tensor::zeros({hdim, ow}); })
                                              : down_uniform({hdim, ow});
                reparam->b_out = maybe(mat, [&] { return Tensor::zeros({ow}); });
            }

            for (std::size_t si = 0; si < locations.size(); ++si) {
                Attachment a{spec, locations[si], AdapterParams{}};
                if (spec.functional_form == FunctionalForm::softmax_bottleneck) {
                    PrefixParams p;
                    p.length = b;
                    if (reparam) {
                        p.reparam = reparam;
                        p.site = si;
                    } else {
                        p.P_k = normal({b, d}, init.prefix_std);
                        p.P_v = up({b, d}, init.prefix_std);
                    }
                    a.params = p;
                } else if (point == HookPoint::head_attn_output) {
                    MultiHeadAdapterParams p;
                    for (std::size_t h = 0; h < heads; ++h) {
                        AdapterParams pair;
                        if (lora_init(spec)) {
                            pair.W_down = down_uniform({dh, b});
                            pair.W_up = maybe(mat, [&] { return Tensor::zeros({b, dh}); });
                        } else {
                            pair.W_down = normal({dh, b}, init.adapter_std);
                            pair.W_up = up({b, dh}, init.adapter_std);
                        }
                        p.heads.push_back(pair);
                    }
                    a.params = p;
                } else if (is_projection_hook(point)) {
                    auto [in, width] = projection_widths(point, cfg);
                    LoraParams p;
                    p.target = point;
                    p.s = spec.composition.kind == CompositionKind::scaled_add ? spec.composition.scale : 1.0;
                    p.W_down = down_uniform({in, b});
                    p.W_up = maybe(mat, [&] { return Tensor::zeros({b, width}); });
                    a.params = p;
                } else {
                    AdapterParams p;
                    if (lora_init(spec)) {
                        p.W_down = down_uniform({d, b});
                        p.W_up = maybe(mat, [&] { return Tensor::zeros({b, d}); });
                    } else {
                        p.W_down = normal({d, b}, init.adapter_std);
                        p.W_up = up({b, d}, init.adapter_std);
                    }
                    a.params = p;
                }
                out.push_back(std::move(a));
            }
        }
    }
    return out;
}

void attach_plan(Transformer& model, const PeftPlan& plan, std::uint64_t seed, const InitOptions& init,
                 PrefixForm prefix_form) {
    attach_modifications(model, instantiate(model, plan, seed, init), prefix_form);
    for (std::size_t mi = 0; mi < plan.size(); ++mi) {
        const MethodSpec& m = plan[mi];
        if (m.method != Method::prompt) continue;
        Rng rng(mix_seed(seed, 0x9f0f + mi));
        PromptParams p;
        p.length = m.bottleneck;
        if (model.parameters().materialized()) {
            p.P_e = rng.normal_tensor({p.length, model.config().d_model}, init.prompt_std);
        }
        prompt_tuning_attach(model, p);
    }
}

PeftPlan build_mam(const ModelConfig& config, std::size_t l, std::size_t r, double s) {
    if (l == 0) throw ContractError("build_mam: prefix length must be at least 1");
    if (r == 0) r = std::max<std::size_t>(1, 512 * config.d_model / 1024);
    MethodSpec prefix;
    prefix.method = Method::prefix;
    prefix.target = Target::attn;
    prefix.bottleneck = l;
    MethodSpec pa;
    pa.method = Method::scaled_pa;
    pa.target = Target::ffn;
    pa.bottleneck = r;
    pa.scale = s;
    return {prefix, pa};
}

bool plan_has(const PeftPlan& plan, Method m) {
    for (const auto& s : plan)
        if (s.method == m) return true;
    return false;
}

}  // namespace peftlab
