#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "peftlab/hooks.hpp"
#include "peftlab/model_config.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/random.hpp"

namespace peftlab {

using TokenSeq = std::vector<int>;

enum class ParamGroup { base, peft };

struct Parameter {
    std::string name;
    Shape shape;
    Tensor value;  // undefined in an unmaterialized store
    ParamGroup group = ParamGroup::base;
    bool is_bias = false;
    bool trainable = false;

    std::size_t size() const { return shape_size(shape); }
};

/// Named parameter registry shared by the base model and its attachments.
///
/// An unmaterialized store records names and shapes only, which is enough
/// for parameter accounting of models far too large to allocate.
class ParameterStore {
public:
    explicit ParameterStore(bool materialized = true) : materialized_(materialized) {}

    bool materialized() const { return materialized_; }

    /// Registers a parameter; `init` is only invoked when materialized.
    /// Names containing "bias" are bias tensors (the BitFit set).
    Tensor add(const std::string& name, Shape shape, ParamGroup group,
               const std::function<Tensor(const Shape&)>& init);

    const std::vector<Parameter>& all() const { return params_; }
    const Parameter* find(const std::string& name) const;
    const Parameter& at(const std::string& name) const;

    void set_trainable(const std::string& name, bool on);
    void set_all_trainable(bool on);
    void remove_group(ParamGroup group);

    std::vector<Parameter> trainable() const;

private:
    Parameter& mutable_at(const std::string& name);

    bool materialized_;
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

struct AttentionWeights {
    Tensor W_q, W_k, W_v, W_o;
};

struct FFNWeights {
    Tensor W_1, b_1, W_2, b_2;
};

struct LayerNormWeights {
    Tensor gain, bias;
};

struct LayerWeights {
    AttentionWeights self_attn;
    LayerNormWeights self_ln;
    std::optional<AttentionWeights> cross_attn;
    LayerNormWeights cross_ln;
    FFNWeights ffn;
    LayerNormWeights ffn_ln;
};

inline constexpr double kMaskedLogit = -1e9;

/// softmax(q k^T * scale + mask) v. `mask` is additive and may be undefined.
Tensor attn(const Tensor& q, const Tensor& k, const Tensor& v, double scale, const Tensor& mask = {});

/// Multi-head attention of queries from x over keys/values from c, heads
/// concatenated and projected by W_o.
Tensor mha(const Tensor& c, const Tensor& x, const AttentionWeights& w, std::size_t heads, const Tensor& mask = {});

/// relu(x W_1 + b_1) W_2 + b_2
Tensor ffn(const Tensor& x, const FFNWeights& w);

/// Additive mask hiding keys after each query position.
Tensor causal_mask(std::size_t n);
Tensor sinusoidal_positions(std::size_t n, std::size_t d);

/// Row ranges of the sequences packed into one [total x d] tensor.
struct Segments {
    std::vector<std::size_t> offset;
    std::vector<std::size_t> length;

    std::size_t count() const { return offset.size(); }
    std::size_t total() const { return offset.empty() ? 0 : offset.back() + length.back(); }
    static Segments from_lengths(const std::vector<std::size_t>& lengths);
};

struct ForwardOptions {
    double dropout = 0.0;
    std::uint64_t dropout_seed = 0;
    Trace* trace = nullptr;
};

struct Encoded {
    Tensor states;
    Segments segments;
};

/// Encoder-decoder (or encoder-only) transformer with post-layernorm
/// residual blocks and hook sites at every representation a PEFT method
/// can modify.
class Transformer {
public:
    Transformer(const ModelConfig& config, std::uint64_t seed, bool materialize = true);

    const ModelConfig& config() const { return config_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }
    const LayerWeights& layer(Stack stack, std::size_t i) const;
    Tensor token_embedding() const { return embed_; }

    /// Every location the model visits, in forward order.
    std::vector<Location> locations() const;
    std::vector<Location> attention_locations() const;
    std::vector<Location> ffn_locations() const;

    void attach(const Location& where, std::shared_ptr<const Modification> mod);
    void detach_all();
    std::size_t attachment_count() const { return hooks_.size(); }
    const Modification* attachment(HookPoint p, const Location& where) const;

    Encoded encode(const std::vector<TokenSeq>& src, const ForwardOptions& opts = {}) const;
    /// Packed logits [sum(len(tgt_in)) x vocab].
    Tensor decode(const Encoded& memory, const std::vector<TokenSeq>& tgt_in, const ForwardOptions& opts = {}) const;
    Tensor forward(const std::vector<TokenSeq>& src, const std::vector<TokenSeq>& tgt_in,
                   const ForwardOptions& opts = {}) const;
    /// Single pair: logits [len(tgt_in) x vocab].
    Tensor forward(const TokenSeq& src, const TokenSeq& tgt_in, const ForwardOptions& opts = {}) const;
    /// Encoder-only: pooled class logits [batch x num_classes].
    Tensor classify(const std::vector<TokenSeq>& src, const ForwardOptions& opts = {}) const;

    /// One block of `stack` over packed rows; `memory` is required for
    /// decoder blocks.
    Tensor block_forward(Stack stack, std::size_t layer, const Tensor& x, const Segments& segs,
                         const Encoded* memory, const ForwardOptions& opts = {}) const;

private:
    struct Pass;

    void require_materialized() const;
    Tensor embed_tokens(const std::vector<TokenSeq>& seqs, Stack stack, Segments& segs, Pass& pass) const;
    Tensor run_block(Stack stack, std::size_t layer, const Tensor& x, const Segments& segs, const Encoded* memory,
                     Pass& pass) const;
    Tensor attention_sublayer(const AttentionWeights& w, const Location& where, const Tensor& x,
                              const Segments& xsegs, const Tensor& c, const Segments& csegs, bool causal,
                              Pass& pass) const;
    Tensor ffn_sublayer(const FFNWeights& w, const Location& where, const Tensor& x, Pass& pass) const;
    Tensor residual(HookPoint point, const Location& where, const Tensor& x, Tensor out, const LayerNormWeights& ln,
                    Pass& pass) const;
    Tensor hook(HookPoint point, const Location& where, Stage stage, const Tensor& input, Tensor h, Pass& pass,
                const HeadContext* head = nullptr, std::size_t segment = 0) const;

    ModelConfig config_;
    ParameterStore params_;
    Tensor embed_;
    Tensor positions_[2];
    Tensor lm_head_;
    Tensor cls_w_, cls_b_;
    std::vector<LayerWeights> encoder_;
    std::vector<LayerWeights> decoder_;
    std::map<std::pair<HookPoint, Location>, std::shared_ptr<const Modification>> hooks_;
};

}  // namespace peftlab
