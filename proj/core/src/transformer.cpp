#include "peftlab/transformer.hpp"

#include <atomic>
#include <cmath>

namespace peftlab {

// ---------------------------------------------------------------------------
// ParameterStore

Tensor ParameterStore::add(const std::string& name, Shape shape, ParamGroup group,
                           const std::function<Tensor(const Shape&)>& init) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
    Parameter p;
    p.name = name;
    p.shape = shape;
    p.group = group;
    p.is_bias = name.find("bias") != std::string::npos;
    if (materialized_) {
        p.value = init(shape);
        if (p.value.shape() != shape) {
            throw DimensionError("parameter '" + name + "' initialised with shape " + shape_str(p.value.shape()) +
                                 ", expected " + shape_str(shape));
        }
        p.value.set_requires_grad(false);
    }
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return params_.back().value;
}

const Parameter* ParameterStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter& ParameterStore::at(const std::string& name) const {
    if (auto* p = find(name)) return *p;
    throw ConfigError("no parameter named '" + name + "'");
}

Parameter& ParameterStore::mutable_at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return params_[it->second];
}

void ParameterStore::set_trainable(const std::string& name, bool on) {
    auto& p = mutable_at(name);
    p.trainable = on;
    if (p.value.defined()) p.value.set_requires_grad(on);
}

void ParameterStore::set_all_trainable(bool on) {
    for (auto& p : params_) {
        p.trainable = on;
        if (p.value.defined()) p.value.set_requires_grad(on);
    }
}

void ParameterStore::remove_group(ParamGroup group) {
    std::vector<Parameter> kept;
    for (auto& p : params_)
        if (p.group != group) kept.push_back(std::move(p));
    params_ = std::move(kept);
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].name, i);
}

std::vector<Parameter> ParameterStore::trainable() const {
    std::vector<Parameter> out;
    for (const auto& p : params_)
        if (p.trainable) out.push_back(p);
    return out;
}

// ---------------------------------------------------------------------------
// Free-standing primitives

Tensor attn(const Tensor& q, const Tensor& k, const Tensor& v, double scale_factor, const Tensor& mask) {
    if (q.cols() != k.cols()) {
        throw DimensionError("attn: query width " + shape_str(q.shape()) + " differs from key width " +
                             shape_str(k.shape()));
    }
    if (k.rows() != v.rows()) {
        throw DimensionError("attn: " + shape_str(k.shape()) + " keys vs " + shape_str(v.shape()) + " values");
    }
    Tensor logits = scale(matmul(q, transpose(k)), scale_factor);
    if (mask.defined()) logits = add(logits, mask);
    return matmul(softmax_rows(logits), v);
}

Tensor mha(const Tensor& c, const Tensor& x, const AttentionWeights& w, std::size_t heads, const Tensor& mask) {
    const std::size_t d = x.cols();
    if (c.cols() != d || w.W_q.rows() != d || w.W_q.cols() != d) {
        throw DimensionError("mha: context " + shape_str(c.shape()) + " / queries " + shape_str(x.shape()) +
                             " do not match W_q " + shape_str(w.W_q.shape()));
    }
    if (heads == 0 || d % heads) throw DimensionError("mha: width not divisible by head count");
    const std::size_t dh = d / heads;
    Tensor q = matmul(x, w.W_q), k = matmul(c, w.W_k), v = matmul(c, w.W_v);
    std::vector<Tensor> outs;
    for (std::size_t i = 0; i < heads; ++i) {
        outs.push_back(attn(slice_cols(q, i * dh, dh), slice_cols(k, i * dh, dh), slice_cols(v, i * dh, dh),
                            1.0 / std::sqrt(static_cast<double>(dh)), mask));
    }
    return matmul(concat_cols(outs), w.W_o);
}

Tensor ffn(const Tensor& x, const FFNWeights& w) {
    return add_row(matmul(relu(add_row(matmul(x, w.W_1), w.b_1)), w.W_2), w.b_2);
}

Tensor causal_mask(std::size_t n) {
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = kMaskedLogit;
    return Tensor::from({n, n}, std::move(m));
}

Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
    std::vector<double> v(n * d);
    for (std::size_t pos = 0; pos < n; ++pos) {
        for (std::size_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
            v[pos * d + i] = i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate);
        }
    }
    return Tensor::from({n, d}, std::move(v));
}

Segments Segments::from_lengths(const std::vector<std::size_t>& lengths) {
    Segments s;
    std::size_t at = 0;
    for (auto len : lengths) {
        s.offset.push_back(at);
        s.length.push_back(len);
        at += len;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Transformer

namespace {
std::atomic<std::uint64_t> g_pass_counter{0};
}  // namespace

struct Transformer::Pass {
    explicit Pass(const ForwardOptions& o) : opts(o), id(++g_pass_counter) {}

    const ForwardOptions& opts;
    std::uint64_t id;
    std::uint64_t dropout_calls = 0;

    Tensor drop(const Tensor& t) {
        if (opts.dropout <= 0.0) return t;
        return dropout(t, opts.dropout, mix_seed(opts.dropout_seed, dropout_calls++));
    }
};

namespace {

std::string prefix_of(Stack s, std::size_t layer) { return to_string(s) + "." + std::to_string(layer) + "."; }

}  // namespace

Transformer::Transformer(const ModelConfig& config, std::uint64_t seed, bool materialize)
    : config_(config), params_(materialize) {
    config_.validate();
    Rng rng(seed);
    const std::size_t d = config_.d_model, dm = config_.d_ff;
    auto normal = [&rng](double sd) { return [&rng, sd](const Shape& s) { return rng.normal_tensor(s, sd); }; };
    auto constant = [](double c) { return [c](const Shape& s) { return Tensor::full(s, c); }; };
    const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double sd_m = 1.0 / std::sqrt(static_cast<double>(dm));

    embed_ = params_.add("embed.tokens", {config_.vocab, d}, ParamGroup::base, normal(1.0));
    if (config_.learned_positions > 0) {
        positions_[0] = params_.add("embed.positions.encoder", {config_.learned_positions, d}, ParamGroup::base,
                                    normal(0.02));
        if (config_.arch == Architecture::encoder_decoder) {
            positions_[1] = params_.add("embed.positions.decoder", {config_.learned_positions, d},
                                        ParamGroup::base, normal(0.02));
        }
    }

    auto make_attention = [&](const std::string& p) {
        AttentionWeights w;
        w.W_q = params_.add(p + "W_q", {d, d}, ParamGroup::base, normal(sd_d));
        w.W_k = params_.add(p + "W_k", {d, d}, ParamGroup::base, normal(sd_d));
        w.W_v = params_.add(p + "W_v", {d, d}, ParamGroup::base, normal(sd_d));
        w.W_o = params_.add(p + "W_o", {d, d}, ParamGroup::base, normal(sd_d));
        return w;
    };
    auto make_ln = [&](const std::string& p) {
        return LayerNormWeights{params_.add(p + "gain", {d}, ParamGroup::base, constant(1.0)),
                                params_.add(p + "bias", {d}, ParamGroup::base, constant(0.0))};
    };
    auto make_layer = [&](Stack stack, std::size_t i) {
        const auto p = prefix_of(stack, i);
        LayerWeights lw;
        lw.self_attn = make_attention(p + "self_attn.");
        lw.self_ln = make_ln(p + "self_attn_ln.");
        if (stack == Stack::decoder) {
            lw.cross_attn = make_attention(p + "cross_attn.");
            lw.cross_ln = make_ln(p + "cross_attn_ln.");
        }
        lw.ffn.W_1 = params_.add(p + "ffn.W_1", {d, dm}, ParamGroup::base, normal(sd_d));
        lw.ffn.b_1 = params_.add(p + "ffn.bias_1", {dm}, ParamGroup::base, normal(0.02));
        lw.ffn.W_2 = params_.add(p + "ffn.W_2", {dm, d}, ParamGroup::base, normal(sd_m));
        lw.ffn.b_2 = params_.add(p + "ffn.bias_2", {d}, ParamGroup::base, normal(0.02));
        lw.ffn_ln = make_ln(p + "ffn_ln.");
        return lw;
    };
    for (std::size_t i = 0; i < config_.layers; ++i) encoder_.push_back(make_layer(Stack::encoder, i));
    if (config_.arch == Architecture::encoder_decoder) {
        for (std::size_t i = 0; i < config_.layers; ++i) decoder_.push_back(make_layer(Stack::decoder, i));
        if (!config_.tie_embeddings) {
            lm_head_ = params_.add("lm_head.W", {d, config_.vocab}, ParamGroup::base, normal(sd_d));
        }
    } else {
        cls_w_ = params_.add("classifier.W", {d, config_.num_classes}, ParamGroup::base, normal(sd_d));
        cls_b_ = params_.add("classifier.bias", {config_.num_classes}, ParamGroup::base, constant(0.0));
    }
}

const LayerWeights& Transformer::layer(Stack stack, std::size_t i) const {
    const auto& v = stack == Stack::encoder ? encoder_ : decoder_;
    if (i >= v.size()) throw ContractError("no " + to_string(stack) + " layer " + std::to_string(i));
    return v[i];
}

std::vector<Location> Transformer::locations() const {
    std::vector<Location> out;
    auto stack_locs = [&](Stack s, std::size_t n) {
        out.push_back({s, 0, Sublayer::embedding});
        for (std::size_t i = 0; i < n; ++i) {
            out.push_back({s, i, Sublayer::self_attention});
            if (s == Stack::decoder) out.push_back({s, i, Sublayer::cross_attention});
            out.push_back({s, i, Sublayer::ffn});
        }
    };
    stack_locs(Stack::encoder, encoder_.size());
    if (!decoder_.empty()) stack_locs(Stack::decoder, decoder_.size());
    return out;
}

std::vector<Location> Transformer::attention_locations() const {
    std::vector<Location> out;
    for (const auto& l : locations())
        if (l.sublayer == Sublayer::self_attention || l.sublayer == Sublayer::cross_attention) out.push_back(l);
    return out;
}

std::vector<Location> Transformer::ffn_locations() const {
    std::vector<Location> out;
    for (const auto& l : locations())
        if (l.sublayer == Sublayer::ffn) out.push_back(l);
    return out;
}

void Transformer::attach(const Location& where, std::shared_ptr<const Modification> mod) {
    const auto key = std::make_pair(mod->hook_point(), where);
    if (hooks_.count(key)) {
        throw ConfigError("duplicate attachment at " + to_string(key.first) + " " + where.str() + " (" +
                          hooks_.at(key)->describe() + " already attached)");
    }
    hooks_.emplace(key, std::move(mod));
}

void Transformer::detach_all() { hooks_.clear(); }

const Modification* Transformer::attachment(HookPoint p, const Location& where) const {
    auto it = hooks_.find({p, where});
    return it == hooks_.end() ? nullptr : it->second.get();
}

void Transformer::require_materialized() const {
    if (!params_.materialized()) throw ContractError("forward pass on an unmaterialized (accounting-only) model");
}

Tensor Transformer::hook(HookPoint point, const Location& where, Stage stage, const Tensor& input, Tensor h,
                         Pass& pass, const HeadContext* head, std::size_t segment) const {
    if (const Modification* mod = attachment(point, where)) {
        HookContext ctx{point, where, stage, input, head, pass.id};
        h = mod->apply(ctx, h);
    }
    if (pass.opts.trace) {
        pass.opts.trace->entries.push_back({point, where, stage, segment, head ? head->head : 0, h});
    }
    return h;
}

Tensor Transformer::embed_tokens(const std::vector<TokenSeq>& seqs, Stack stack, Segments& segs,
                                 Pass& pass) const {
    std::vector<std::size_t> ids, pos, lengths;
    for (const auto& s : seqs) {
        if (s.empty()) throw ContractError("zero-length " + to_string(stack) + " sequence");
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (s[j] < 0 || static_cast<std::size_t>(s[j]) >= config_.vocab) {
                throw ContractError("token id " + std::to_string(s[j]) + " outside vocabulary of " +
                                    std::to_string(config_.vocab));
            }
            ids.push_back(static_cast<std::size_t>(s[j]));
            pos.push_back(j);
        }
        lengths.push_back(s.size());
    }
    Tensor x = gather_rows(embed_, ids);
    const std::size_t d = config_.d_model;
    if (config_.learned_positions > 0) {
        for (auto p : pos)
            if (p >= config_.learned_positions) throw ContractError("sequence longer than the position table");
        x = add(x, gather_rows(positions_[stack == Stack::encoder ? 0 : 1], pos));
    } else {
        std::size_t longest = 0;
        for (auto l : lengths) longest = std::max(longest, l);
        x = add(x, gather_rows(sinusoidal_positions(longest, d), pos));
    }
    segs = Segments::from_lengths(lengths);

    const Location where{stack, 0, Sublayer::embedding};
    if (const Modification* mod = attachment(HookPoint::input_embedding, where)) {
        Tensor rows = mod->prepended_rows();
        if (rows.defined()) {
            const std::size_t l = rows.rows();
            std::vector<std::size_t> order;
            std::vector<std::size_t> new_lengths;
            for (std::size_t s = 0; s < segs.count(); ++s) {
                for (std::size_t j = 0; j < l; ++j) order.push_back(j);
                for (std::size_t j = 0; j < segs.length[s]; ++j) order.push_back(l + segs.offset[s] + j);
                new_lengths.push_back(l + segs.length[s]);
            }
            x = gather_rows(concat_rows(rows, x), order);
            segs = Segments::from_lengths(new_lengths);
        }
    }
    return hook(HookPoint::input_embedding, where, Stage::inline_site, x, x, pass);
}

Tensor Transformer::attention_sublayer(const AttentionWeights& w, const Location& where, const Tensor& x,
                                       const Segments& xsegs, const Tensor& c, const Segments& csegs, bool causal,
                                       Pass& pass) const {
    const std::size_t heads = config_.heads, dh = config_.head_dim();
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    if (xsegs.count() != csegs.count()) throw DimensionError("attention: query and context batch sizes differ");

    Tensor q = hook(HookPoint::attn_query_proj, where, Stage::inline_site, x, matmul(x, w.W_q), pass);
    Tensor k = matmul(c, w.W_k);
    Tensor v = hook(HookPoint::attn_value_proj, where, Stage::inline_site, c, matmul(c, w.W_v), pass);

    const bool single = xsegs.count() == 1;
    std::vector<Tensor> seg_out;
    for (std::size_t s = 0; s < xsegs.count(); ++s) {
        const std::size_t n = xsegs.length[s], m = csegs.length[s];
        Tensor xs = single ? x : slice_rows(x, xsegs.offset[s], n);
        Tensor qs = single ? q : slice_rows(q, xsegs.offset[s], n);
        Tensor ks = single ? k : slice_rows(k, csegs.offset[s], m);
        Tensor vs = single ? v : slice_rows(v, csegs.offset[s], m);
        Tensor mask;
        if (causal) {
            if (n != m) throw DimensionError("causal attention needs equal query and key lengths");
            mask = causal_mask(n);
        }
        std::vector<Tensor> head_out;
        for (std::size_t i = 0; i < heads; ++i) {
            HeadContext hc;
            hc.head = i;
            hc.head_dim = dh;
            hc.x = xs;
            hc.q = heads == 1 ? qs : slice_cols(qs, i * dh, dh);
            hc.k = heads == 1 ? ks : slice_cols(ks, i * dh, dh);
            hc.v = heads == 1 ? vs : slice_cols(vs, i * dh, dh);
            hc.mask = mask;
            hc.scale = scale_factor;
            Tensor h = attn(hc.q, hc.k, hc.v, scale_factor, mask);
            head_out.push_back(hook(HookPoint::head_attn_output, where, Stage::inline_site, xs, h, pass, &hc, s));
        }
        seg_out.push_back(heads == 1 ? head_out.front() : concat_cols(head_out));
    }
    Tensor merged = single ? seg_out.front() : concat_rows(seg_out);
    return matmul(merged, w.W_o);
}

Tensor Transformer::ffn_sublayer(const FFNWeights& w, const Location& where, const Tensor& x, Pass& pass) const {
    Tensor h1 = hook(HookPoint::ffn_weight_1, where, Stage::inline_site, x, matmul(x, w.W_1), pass);
    Tensor a = relu(add_row(h1, w.b_1));
    Tensor h2 = hook(HookPoint::ffn_weight_2, where, Stage::inline_site, a, matmul(a, w.W_2), pass);
    return add_row(h2, w.b_2);
}

Tensor Transformer::residual(HookPoint point, const Location& where, const Tensor& x, Tensor out,
                             const LayerNormWeights& ln, Pass& pass) const {
    out = pass.drop(out);
    out = hook(point, where, Stage::parallel, x, out, pass);
    Tensor y = layer_norm(add(out, x), ln.gain, ln.bias, config_.ln_eps);
    return hook(point, where, Stage::sequential, y, y, pass);
}

Tensor Transformer::run_block(Stack stack, std::size_t li, const Tensor& x, const Segments& segs,
                              const Encoded* memory, Pass& pass) const {
    const LayerWeights& lw = layer(stack, li);
    const bool decoder = stack == Stack::decoder;
    const Location self_loc{stack, li, Sublayer::self_attention};
    Tensor h = attention_sublayer(lw.self_attn, self_loc, x, segs, x, segs, decoder, pass);
    h = residual(HookPoint::attn_sublayer_output, self_loc, x, h, lw.self_ln, pass);
    if (decoder) {
        if (!memory) throw ContractError("decoder block needs encoder memory");
        const Location cross_loc{stack, li, Sublayer::cross_attention};
        Tensor c = attention_sublayer(*lw.cross_attn, cross_loc, h, segs, memory->states, memory->segments, false,
                                      pass);
        h = residual(HookPoint::attn_sublayer_output, cross_loc, h, c, lw.cross_ln, pass);
    }
    const Location ffn_loc{stack, li, Sublayer::ffn};
    Tensor f = ffn_sublayer(lw.ffn, ffn_loc, h, pass);
    return residual(HookPoint::ffn_sublayer_output, ffn_loc, h, f, lw.ffn_ln, pass);
}

Tensor Transformer::block_forward(Stack stack, std::size_t layer_index, const Tensor& x, const Segments& segs,
                                  const Encoded* memory, const ForwardOptions& opts) const {
    require_materialized();
    Pass pass{opts};
    return run_block(stack, layer_index, x, segs, memory, pass);
}

Encoded Transformer::encode(const std::vector<TokenSeq>& src, const ForwardOptions& opts) const {
    require_materialized();
    if (src.empty()) throw ContractError("empty source batch");
    Pass pass{opts};
    Encoded out;
    Tensor h = embed_tokens(src, Stack::encoder, out.segments, pass);
    for (std::size_t i = 0; i < encoder_.size(); ++i) h = run_block(Stack::encoder, i, h, out.segments, nullptr, pass);
    out.states = h;
    return out;
}

Tensor Transformer::decode(const Encoded& memory, const std::vector<TokenSeq>& tgt_in,
                           const ForwardOptions& opts) const {
    require_materialized();
    if (config_.arch != Architecture::encoder_decoder) throw ContractError("decode() on an encoder-only model");
    if (tgt_in.size() != memory.segments.count()) throw ContractError("target batch size differs from source");
    ForwardOptions dec_opts = opts;
    dec_opts.dropout_seed = mix_seed(opts.dropout_seed, 0xdec0de);
    Pass pass{dec_opts};
    Segments segs;
    Tensor h = embed_tokens(tgt_in, Stack::decoder, segs, pass);
    for (std::size_t i = 0; i < decoder_.size(); ++i) h = run_block(Stack::decoder, i, h, segs, &memory, pass);
    return config_.tie_embeddings ? matmul(h, transpose(embed_)) : matmul(h, lm_head_);
}

Tensor Transformer::forward(const std::vector<TokenSeq>& src, const std::vector<TokenSeq>& tgt_in,
                            const ForwardOptions& opts) const {
    return decode(encode(src, opts), tgt_in, opts);
}

Tensor Transformer::forward(const TokenSeq& src, const TokenSeq& tgt_in, const ForwardOptions& opts) const {
    return forward(std::vector<TokenSeq>{src}, std::vector<TokenSeq>{tgt_in}, opts);
}

Tensor Transformer::classify(const std::vector<TokenSeq>& src, const ForwardOptions& opts) const {
    if (config_.arch != Architecture::encoder_only) throw ContractError("classify() needs an encoder-only model");
    Encoded enc = encode(src, opts);
    const auto& segs = enc.segments;
    std::vector<double> pool(segs.count() * segs.total(), 0.0);
    for (std::size_t s = 0; s < segs.count(); ++s)
        for (std::size_t j = 0; j < segs.length[s]; ++j)
            pool[s * segs.total() + segs.offset[s] + j] = 1.0 / static_cast<double>(segs.length[s]);
    Tensor pooled = matmul(Tensor::from({segs.count(), segs.total()}, std::move(pool)), enc.states);
    return add_row(matmul(pooled, cls_w_), cls_b_);
}

}  // namespace peftlab
