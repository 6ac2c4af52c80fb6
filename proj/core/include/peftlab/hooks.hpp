#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

/// Representations a modification can act on.
enum class HookPoint {
    input_embedding,
    attn_query_proj,
    attn_value_proj,
    head_attn_output,
    attn_sublayer_output,
    ffn_weight_1,
    ffn_weight_2,
    ffn_sublayer_output,
    bias_terms,
};

inline constexpr HookPoint kAllHookPoints[] = {
    HookPoint::input_embedding,      HookPoint::attn_query_proj, HookPoint::attn_value_proj,
    HookPoint::head_attn_output,     HookPoint::attn_sublayer_output, HookPoint::ffn_weight_1,
    HookPoint::ffn_weight_2,         HookPoint::ffn_sublayer_output,  HookPoint::bias_terms,
};

std::string to_string(HookPoint p);
HookPoint parse_hook_point(const std::string& s);

enum class Stack { encoder, decoder };
enum class Sublayer { embedding, self_attention, cross_attention, ffn };

std::string to_string(Stack s);
std::string to_string(Sublayer s);

struct Location {
    Stack stack = Stack::encoder;
    std::size_t layer = 0;
    Sublayer sublayer = Sublayer::self_attention;

    auto operator<=>(const Location&) const = default;
    std::string str() const;
};

/// Where a sublayer-output hook fires relative to residual + layer norm.
/// `parallel` fires before the residual add with the sublayer input as
/// `input`; `sequential` fires after layer norm with the normalized output.
enum class Stage { inline_site, parallel, sequential };

/// Per-head view handed to head_attn_output modifications, for one
/// sequence of the batch.
struct HeadContext {
    std::size_t head = 0;
    std::size_t head_dim = 0;
    Tensor x;     // sublayer query-side input rows [n x d]
    Tensor q;     // [n x d_h]
    Tensor k;     // [m x d_h]
    Tensor v;     // [m x d_h]
    Tensor mask;  // additive [n x m], undefined when unmasked
    double scale = 1.0;
};

struct HookContext {
    HookPoint point = HookPoint::input_embedding;
    Location where;
    Stage stage = Stage::inline_site;
    Tensor input;
    const HeadContext* head = nullptr;
    /// Unique per forward pass; lets a modification reuse work across the
    /// sites and heads of one pass.
    std::uint64_t pass_id = 0;
};

/// A representation change attached at one (hook point, location).
class Modification {
public:
    virtual ~Modification() = default;

    virtual HookPoint hook_point() const = 0;
    /// Returns the new representation given the current one.
    virtual Tensor apply(const HookContext& ctx, const Tensor& h) const = 0;
    /// Rows prepended to each input sequence; undefined unless the
    /// modification extends the sequence (prompt tuning).
    virtual Tensor prepended_rows() const { return {}; }
    virtual std::string describe() const = 0;
};

struct TraceEntry {
    HookPoint point;
    Location where;
    Stage stage;
    std::size_t segment;
    std::size_t head;
    Tensor value;
};

/// Tensors observed at hook sites during one forward pass.
struct Trace {
    std::vector<TraceEntry> entries;

    std::size_t count(HookPoint p) const;
    std::vector<const TraceEntry*> find(HookPoint p, const Location& where) const;
};

}  // namespace peftlab
