#include "peftlab/hooks.hpp"

namespace peftlab {

namespace {
struct HookName {
    HookPoint point;
    const char* name;
};
constexpr HookName kHookNames[] = {
    {HookPoint::input_embedding, "input_embedding"},
    {HookPoint::attn_query_proj, "attn_query_proj"},
    {HookPoint::attn_value_proj, "attn_value_proj"},
    {HookPoint::head_attn_output, "head_attn_output"},
    {HookPoint::attn_sublayer_output, "attn_sublayer_output"},
    {HookPoint::ffn_weight_1, "ffn_weight_1"},
    {HookPoint::ffn_weight_2, "ffn_weight_2"},
    {HookPoint::ffn_sublayer_output, "ffn_sublayer_output"},
    {HookPoint::bias_terms, "bias_terms"},
};
}  // namespace

std::string to_string(HookPoint p) {
    for (const auto& h : kHookNames)
        if (h.point == p) return h.name;
    return "?";
}

HookPoint parse_hook_point(const std::string& s) {
    for (const auto& h : kHookNames)
        if (s == h.name) return h.point;
    throw ConfigError("unknown hook point '" + s + "'");
}

std::string to_string(Stack s) { return s == Stack::encoder ? "encoder" : "decoder"; }

std::string to_string(Sublayer s) {
    switch (s) {
    case Sublayer::embedding: return "embedding";
    case Sublayer::self_attention: return "self_attn";
    case Sublayer::cross_attention: return "cross_attn";
    case Sublayer::ffn: return "ffn";
    }
    return "?";
}

std::string Location::str() const { return to_string(stack) + "." + std::to_string(layer) + "." + to_string(sublayer); }

std::size_t Trace::count(HookPoint p) const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.point == p;
    return n;
}

std::vector<const TraceEntry*> Trace::find(HookPoint p, const Location& where) const {
    std::vector<const TraceEntry*> out;
    for (const auto& e : entries)
        if (e.point == p && e.where == where) out.push_back(&e);
    return out;
}

}  // namespace peftlab
