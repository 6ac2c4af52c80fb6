#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/transformer.hpp"

namespace peftlab {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
/// Smallest id a task emits as content.
inline constexpr int kFirstSymbol = 2;
/// Token whose count decides the classify_parity label.
inline constexpr int kParityToken = kFirstSymbol;

enum class TaskKind { copy, reverse, classify_parity };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

struct TaskSpec {
    TaskKind kind = TaskKind::copy;
    std::size_t vocab = 16;
    std::size_t seq_len = 10;
    std::size_t train_size = 2000;
    std::size_t dev_size = 200;
    std::size_t test_size = 200;
    std::uint64_t seed = 1;

    bool is_classification() const { return kind == TaskKind::classify_parity; }
    void validate() const;
};

struct Example {
    TokenSeq src;
    TokenSeq tgt;    // seq2seq target, without BOS
    int label = -1;  // classification target
};

struct Dataset {
    TaskSpec spec;
    std::vector<Example> train, dev, test;
};

/// Distinct random sequences split into train/dev/test, so no source
/// appears in two splits. Deterministic per seed.
Dataset gen_task(const TaskSpec& spec);

/// [BOS] + tgt without its last token.
TokenSeq decoder_input(const TokenSeq& tgt);

/// Model shape that fits a task: vocab and architecture follow the task.
ModelConfig config_for_task(const ModelConfig& base, const TaskSpec& task);

}  // namespace peftlab
