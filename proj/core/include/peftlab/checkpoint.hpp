#pragma once

#include <string>
#include <vector>

#include "peftlab/transformer.hpp"

namespace peftlab {

struct CheckpointEntry {
    std::string name;
    Shape shape;
    bool trainable = false;
    ParamGroup group = ParamGroup::base;
    std::vector<double> values;
};

/// Values of every materialized parameter, in store order.
struct Checkpoint {
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const;
};

Checkpoint snapshot(const Transformer& model);

/// Text header ("PEFTLAB-CKPT 1", one line per tensor) then the values as
/// little-endian IEEE-754 doubles in header order.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
void save_checkpoint(const Transformer& model, const std::string& path);
/// Throws ConfigError on a missing, truncated or malformed file.
Checkpoint load_checkpoint(const std::string& path);

/// Copies values into a model whose parameter names and shapes match the
/// checkpoint exactly; throws ConfigError otherwise.
void restore(Transformer& model, const Checkpoint& ckpt);

/// Names whose values differ bit-wise from the checkpoint. With
/// `frozen_only`, only tensors that are frozen in `model` are compared.
std::vector<std::string> changed_tensors(const Transformer& model, const Checkpoint& ckpt, bool frozen_only);

}  // namespace peftlab
