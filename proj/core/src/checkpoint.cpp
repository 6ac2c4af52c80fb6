#include "peftlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace peftlab {

namespace {

constexpr const char* kMagic = "PEFTLAB-CKPT 1";

const char* group_name(ParamGroup g) { return g == ParamGroup::base ? "base" : "peft"; }

void put_double(std::ostream& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(bytes, 8);
}

double get_double(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

Checkpoint snapshot(const Transformer& model) {
    Checkpoint c;
    for (const auto& p : model.parameters().all()) {
        if (!p.value.defined()) throw ContractError("snapshot: parameter '" + p.name + "' is not materialized");
        c.entries.push_back({p.name, p.shape, p.trainable, p.group, {p.value.data().begin(), p.value.data().end()}});
    }
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
    out << kMagic << '\n' << ckpt.entries.size() << '\n';
    for (const auto& e : ckpt.entries) {
        out << e.name << ' ' << e.shape.size();
        for (auto s : e.shape) out << ' ' << s;
        out << ' ' << (e.trainable ? 1 : 0) << ' ' << group_name(e.group) << '\n';
    }
    out << "data\n";
    for (const auto& e : ckpt.entries)
        for (double v : e.values) put_double(out, v);
    if (!out) throw ConfigError("failed writing checkpoint '" + path + "'");
}

void save_checkpoint(const Transformer& model, const std::string& path) { save_checkpoint(snapshot(model), path); }

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read checkpoint '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line != kMagic) throw ConfigError(path + ": not a checkpoint (bad header)");
    std::getline(in, line);
    std::size_t count = 0;
    try {
        count = std::stoull(line);
    } catch (const std::exception&) {
        throw ConfigError(path + ": bad tensor count");
    }
    Checkpoint c;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw ConfigError(path + ": truncated header");
        std::istringstream ls(line);
        CheckpointEntry e;
        std::size_t rank = 0;
        int trainable = 0;
        std::string group;
        ls >> e.name >> rank;
        e.shape.resize(rank);
        for (auto& s : e.shape) ls >> s;
        ls >> trainable >> group;
        if (!ls || (group != "base" && group != "peft")) throw ConfigError(path + ": bad header line '" + line + "'");
        e.trainable = trainable != 0;
        e.group = group == "base" ? ParamGroup::base : ParamGroup::peft;
        std::size_t n = 1;
        for (auto s : e.shape) n *= s;
        e.values.resize(n);
        c.entries.push_back(std::move(e));
    }
    if (!std::getline(in, line) || line != "data") throw ConfigError(path + ": missing data marker");
    for (auto& e : c.entries)
        for (auto& v : e.values) v = get_double(in);
    if (!in) throw ConfigError(path + ": truncated data");
    if (in.peek() != std::char_traits<char>::eof()) throw ConfigError(path + ": trailing bytes after data");
    return c;
}

void restore(Transformer& model, const Checkpoint& ckpt) {
    const auto& params = model.parameters().all();
    if (params.size() != ckpt.entries.size())
        throw ConfigError("checkpoint has " + std::to_string(ckpt.entries.size()) + " tensors, model has " +
                          std::to_string(params.size()));
    for (const auto& p : params) {
        const auto* e = ckpt.find(p.name);
        if (!e) throw ConfigError("checkpoint lacks tensor '" + p.name + "'");
        if (e->shape != p.shape)
            throw ConfigError("checkpoint tensor '" + p.name + "' has shape " + shape_str(e->shape) + ", model has " +
                              shape_str(p.shape));
    }
    for (const auto& p : params) {
        const auto* e = ckpt.find(p.name);
        Tensor t = p.value;
        auto dst = t.mutable_data();
        std::memcpy(dst.data(), e->values.data(), e->values.size() * sizeof(double));
    }
}

std::vector<std::string> changed_tensors(const Transformer& model, const Checkpoint& ckpt, bool frozen_only) {
    std::vector<std::string> out;
    for (const auto& p : model.parameters().all()) {
        if (frozen_only && p.trainable) continue;
        const auto* e = ckpt.find(p.name);
        if (!e || e->shape != p.shape) {
            out.push_back(p.name);
            continue;
        }
        const auto v = p.value.data();
        for (std::size_t i = 0; i < v.size(); ++i)
            if (!same_bits(v[i], e->values[i])) {
                out.push_back(p.name);
                break;
            }
    }
    return out;
}

}  // namespace peftlab
