#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "peftlab/design.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

/// Bottleneck pair W_down [d_in x r], W_up [r x d_out].
struct AdapterParams {
    Tensor W_down;
    Tensor W_up;
    /// Learned composition scale (shape {}), only for scaled_add(trainable).
    Tensor scale;

    std::size_t bottleneck() const { return W_down.shape().at(1); }
};

/// One independent adapter pair per head, widths d_h.
struct MultiHeadAdapterParams {
    std::vector<AdapterParams> heads;
};

/// Shared prefix MLP: embedding [l x d_e] -> tanh(. W_hidden + b_hidden)
/// -> . W_out + b_out, whose output [l x 2 d sites] holds P_k and P_v
/// for every site that uses it.
struct PrefixReparam {
    Tensor embedding;
    Tensor W_hidden, b_hidden;
    Tensor W_out, b_out;
    std::size_t sites = 0;
    std::size_t d_model = 0;
    std::size_t embed_dim = 0;  // shapes for unmaterialized models
    std::size_t hidden = 0;
};

struct PrefixParams {
    Tensor P_k;  // [l x d], ignored when reparam is set
    Tensor P_v;
    std::size_t length = 0;
    std::shared_ptr<const PrefixReparam> reparam;
    std::size_t site = 0;  // column block of reparam output
};

struct LoraParams {
    Tensor W_down;  // [d x r]
    Tensor W_up;    // [r x k]
    double s = 4.0;
    HookPoint target = HookPoint::attn_query_proj;
    Tensor scale;  // learned s (shape {}), optional

    std::size_t rank() const { return W_down.shape().at(1); }
};

struct PromptParams {
    Tensor P_e;  // [l x d]
    std::size_t length = 0;
};

struct BitfitMask {
    std::vector<std::string> names;
};

using PeftParams = std::variant<AdapterParams, MultiHeadAdapterParams, PrefixParams, LoraParams>;

// ---------------------------------------------------------------------------
// Stateless kernels

/// f(input W_down) W_up with f = relu, or identity for a linear bottleneck.
Tensor adapter_delta(const Tensor& input, const AdapterParams& p,
                     FunctionalForm form = FunctionalForm::relu_bottleneck);

/// s x W_down W_up; uses the learned scale when present.
Tensor lora_delta(const Tensor& x, const LoraParams& p);

/// Per-head deltas, x split into N_h column blocks.
std::vector<Tensor> multihead_parallel_adapter_delta(const Tensor& x, const MultiHeadAdapterParams& p);

/// (P_k, P_v), each [l x d].
std::pair<Tensor, Tensor> prefix_reparam_forward(const PrefixParams& p);

/// One head with prefixes prepended to keys and values. `mask` covers the
/// content keys only; prefixes are visible to every query.
Tensor prefix_head_native(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& P_k, const Tensor& P_v,
                          double scale, const Tensor& mask = {});
/// Attention mass on prefixes per query, [n x 1].
Tensor prefix_head_lambda(const Tensor& q, const Tensor& k, const Tensor& P_k, double scale, const Tensor& mask = {});
/// Gated: (1 - lambda) h + lambda dh; ungated: h + dh, where h is the
/// standard head output and dh = softmax(q P_k^T scale) P_v.
Tensor prefix_head_equivalent(const Tensor& h, const Tensor& q, const Tensor& k, const Tensor& P_k, const Tensor& P_v,
                              double scale, const Tensor& mask = {}, bool gated = true);

/// Full-width versions over one sequence: queries from x, keys/values
/// from c, one output [n x d_h] per head (before concatenation and W_o).
std::vector<Tensor> prefix_attention_native(const Tensor& x, const Tensor& c, const AttentionWeights& w,
                                            const PrefixParams& p, std::size_t heads, const Tensor& mask = {});
std::vector<Tensor> prefix_lambda(const Tensor& x, const Tensor& c, const AttentionWeights& w, const PrefixParams& p,
                                  std::size_t heads, const Tensor& mask = {});
std::vector<Tensor> prefix_attention_equivalent(const Tensor& x, const Tensor& c, const AttentionWeights& w,
                                                const PrefixParams& p, std::size_t heads, const Tensor& mask = {},
                                                bool gated = true);

// ---------------------------------------------------------------------------
// Modules

/// Which of the two prefix formulations a prefix module evaluates.
enum class PrefixForm { native, equivalent };

class AdapterModule final : public Modification {
public:
    AdapterModule(DesignSpec spec, AdapterParams p);
    HookPoint hook_point() const override { return spec_.modified_representation; }
    Tensor apply(const HookContext& ctx, const Tensor& h) const override;
    std::string describe() const override;

private:
    DesignSpec spec_;
    AdapterParams p_;
};

class MultiHeadAdapterModule final : public Modification {
public:
    MultiHeadAdapterModule(DesignSpec spec, MultiHeadAdapterParams p);
    HookPoint hook_point() const override { return HookPoint::head_attn_output; }
    Tensor apply(const HookContext& ctx, const Tensor& h) const override;
    std::string describe() const override;

private:
    DesignSpec spec_;
    MultiHeadAdapterParams p_;
};

class LoraModule final : public Modification {
public:
    LoraModule(DesignSpec spec, LoraParams p);
    HookPoint hook_point() const override { return p_.target; }
    Tensor apply(const HookContext& ctx, const Tensor& h) const override;
    std::string describe() const override;

private:
    DesignSpec spec_;
    LoraParams p_;
};

class PrefixModule final : public Modification {
public:
    PrefixModule(DesignSpec spec, PrefixParams p, std::size_t heads, PrefixForm form);
    HookPoint hook_point() const override { return HookPoint::head_attn_output; }
    Tensor apply(const HookContext& ctx, const Tensor& h) const override;
    std::string describe() const override;

private:
    struct Blocks {
        std::uint64_t pass_id = 0;
        std::vector<Tensor> keys, values;
    };
    std::pair<Tensor, Tensor> head_blocks(std::uint64_t pass_id, std::size_t head) const;

    DesignSpec spec_;
    PrefixParams p_;
    std::size_t heads_;
    PrefixForm form_;
    mutable std::mutex mu_;
    mutable Blocks cache_;
};

class PromptModule final : public Modification {
public:
    explicit PromptModule(PromptParams p) : p_(std::move(p)) {}
    HookPoint hook_point() const override { return HookPoint::input_embedding; }
    Tensor apply(const HookContext&, const Tensor& h) const override { return h; }
    Tensor prepended_rows() const override { return p_.P_e; }
    std::string describe() const override;

private:
    PromptParams p_;
};

// ---------------------------------------------------------------------------
// Dispatch

struct Attachment {
    DesignSpec spec;
    Location where;
    PeftParams params;
};

/// Registers each attachment's tensors in the model's parameter store
/// (group peft) and attaches the matching module. Throws ConfigError on an
/// invalid design, a params/design mismatch, a location that does not fit
/// the hook point, or a duplicate (hook point, location).
void attach_modifications(Transformer& model, const std::vector<Attachment>& attachments,
                          PrefixForm prefix_form = PrefixForm::equivalent);

/// Prepends l trainable vectors to the encoder input.
void prompt_tuning_attach(Transformer& model, const PromptParams& p);
/// Marks every bias tensor trainable and everything else frozen.
BitfitMask bitfit_attach(Transformer& model);

// ---------------------------------------------------------------------------
// Method-level plans

enum class Method { prefix, adapter_seq, adapter_par, scaled_pa, mh_pa, lora, prompt, bitfit, full, custom };
enum class Target { attn, ffn };

std::string to_string(Method m);
Method parse_method(const std::string& s);
std::string to_string(Target t);
Target parse_target(const std::string& s);

/// One named method applied at every sublayer of its target kind.
struct MethodSpec {
    Method method = Method::adapter_par;
    Target target = Target::ffn;
    std::size_t bottleneck = 8;
    double scale = 4.0;  // scaled PA and LoRA
    bool trainable_scale = false;
    bool gating = true;  // prefix: false gives h + dh
    FunctionalForm form = FunctionalForm::relu_bottleneck;  // adapters
    bool prefix_reparam = false;
    std::size_t reparam_embed = 0;    // 0 means d
    std::size_t reparam_hidden = 64;
    DesignSpec design;  // Method::custom only

    std::string label() const;
};

using PeftPlan = std::vector<MethodSpec>;

/// The design-space coordinates a method expands to. LoRA yields two
/// designs (W_q and W_v, or W_1 and W_2); prompt, bitfit and full none.
std::vector<DesignSpec> designs_for(const MethodSpec& m);

struct InitOptions {
    bool zero_up = false;  // all up-projections and P_v start at zero
    double adapter_std = 0.01;
    double prefix_std = 0.01;
    double prompt_std = 0.5;
};

/// Instantiates parameters for every sublayer a plan covers. In an
/// unmaterialized model the tensors are left undefined.
std::vector<Attachment> instantiate(const Transformer& model, const PeftPlan& plan, std::uint64_t seed,
                                    const InitOptions& init = {});

/// instantiate + attach_modifications + prompt/bitfit handling.
void attach_plan(Transformer& model, const PeftPlan& plan, std::uint64_t seed, const InitOptions& init = {},
                 PrefixForm prefix_form = PrefixForm::equivalent);

/// Prefix at every attention sublayer plus scaled PA at every FFN
/// sublayer. r = 0 picks 512 scaled by d/1024.
PeftPlan build_mam(const ModelConfig& config, std::size_t l = 30, std::size_t r = 0, double s = 4.0);

bool plan_has(const PeftPlan& plan, Method m);

}  // namespace peftlab
