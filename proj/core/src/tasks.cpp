#include "peftlab/tasks.hpp"

#include <algorithm>
#include <set>

#include "peftlab/random.hpp"

namespace peftlab {

std::string to_string(TaskKind k) {
    switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::classify_parity: return "classify_parity";
    }
    return "?";
}

TaskKind parse_task_kind(const std::string& s) {
    for (auto k : {TaskKind::copy, TaskKind::reverse, TaskKind::classify_parity})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown task '" + s + "'");
}

void TaskSpec::validate() const {
    if (vocab < static_cast<std::size_t>(kFirstSymbol) + 2) throw ConfigError("task vocab must be at least 4");
    if (seq_len == 0) throw ConfigError("task seq_len must be positive");
    if (train_size == 0) throw ConfigError("task train_size must be positive");
    // Room for all requested distinct sequences.
    const double symbols = static_cast<double>(vocab - kFirstSymbol);
    double space = 1.0;
    for (std::size_t i = 0; i < seq_len && space < 1e18; ++i) space *= symbols;
    if (space < static_cast<double>(train_size + dev_size + test_size)) {
        throw ConfigError("task asks for more distinct sequences than vocab^seq_len allows");
    }
}

TokenSeq decoder_input(const TokenSeq& tgt) {
    TokenSeq in{kBos};
    if (!tgt.empty()) in.insert(in.end(), tgt.begin(), tgt.end() - 1);
    return in;
}

Dataset gen_task(const TaskSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const std::size_t total = spec.train_size + spec.dev_size + spec.test_size;
    const std::size_t symbols = spec.vocab - kFirstSymbol;
    std::set<TokenSeq> seen;
    std::vector<TokenSeq> seqs;
    seqs.reserve(total);
    while (seqs.size() < total) {
        TokenSeq s(spec.seq_len);
        for (auto& t : s) t = kFirstSymbol + static_cast<int>(rng.below(symbols));
        if (seen.insert(s).second) seqs.push_back(std::move(s));
    }
    auto make = [&](const TokenSeq& s) {
        Example e;
        e.src = s;
        switch (spec.kind) {
        case TaskKind::copy: e.tgt = s; break;
        case TaskKind::reverse: e.tgt.assign(s.rbegin(), s.rend()); break;
        case TaskKind::classify_parity:
            e.label = static_cast<int>(std::count(s.begin(), s.end(), kParityToken) % 2);
            break;
        }
        return e;
    };
    Dataset ds;
    ds.spec = spec;
    for (std::size_t i = 0; i < total; ++i) {
        auto& split = i < spec.train_size ? ds.train : (i < spec.train_size + spec.dev_size ? ds.dev : ds.test);
        split.push_back(make(seqs[i]));
    }
    return ds;
}

ModelConfig config_for_task(const ModelConfig& base, const TaskSpec& task) {
    ModelConfig c = base;
    c.vocab = task.vocab;
    if (task.is_classification()) {
        c.arch = Architecture::encoder_only;
        c.num_classes = 2;
    } else {
        c.arch = Architecture::encoder_decoder;
    }
    return c;
}

}  // namespace peftlab
