#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/peft.hpp"
#include "peftlab/tasks.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

struct TrainConfig {
    double learning_rate = 1e-2;  // desk scale; full-size models use 1e-4 or lower
    std::size_t batch_size = 32;
    double label_smoothing = 0.1;
    double max_grad_norm = 1.0;
    double weight_decay = 0.0;
    std::size_t total_steps = 3000;
    double warmup_fraction = 0.06;
    double dropout = 0.0;
    std::uint64_t seed = 1;
    /// Dev evaluation period in steps; 0 evaluates only at the start and end.
    std::size_t eval_every = 500;
    /// Dev examples used per evaluation; 0 means all.
    std::size_t eval_examples = 0;

    void validate() const;
};

/// Linear warmup from 0 to the peak, then linear decay to 0 at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::string> names;
    std::vector<Tensor> params;
    std::vector<std::vector<double>> m, v;
};

/// Moment buffers for exactly the trainable tensors of `model`.
AdamState make_adam(const Transformer& model);
AdamState make_adam(std::vector<std::string> names, std::vector<Tensor> params);

struct StepStats {
    double grad_norm = 0.0;  // before clipping
    double clip_scale = 1.0;
};

/// Global-norm clipping (max_grad_norm <= 0 disables it), bias-corrected
/// Adam update and decoupled weight decay. Throws NumericalError naming
/// the tensor if any gradient is not finite.
StepStats adam_step(AdamState& state, double lr, double max_grad_norm, double weight_decay);

/// (1 - a) NLL + a/(V-1) sum over the other classes of -log p; mean over
/// rows whose target is not `ignore`.
Tensor smoothed_cross_entropy(const Tensor& logits, const std::vector<int>& targets, double smoothing,
                              int ignore = -1);

/// Trainable set = PEFT parameters, plus base biases with BitFit, or
/// everything with full fine-tuning.
void freeze_base(Transformer& model, const PeftPlan& plan);

struct MetricPoint {
    std::size_t step = 0;
    double loss = 0.0;    // mean training loss since the previous point
    double metric = 0.0;  // dev token accuracy, or class accuracy
};

struct TrainResult {
    std::vector<MetricPoint> curve;
    double final_metric = 0.0;
    std::size_t steps = 0;
    bool failed = false;
    std::string failure;
};

/// Greedy decoding: `lengths[i]` tokens per source.
std::vector<TokenSeq> greedy_decode(const Transformer& model, const std::vector<TokenSeq>& src,
                                    const std::vector<std::size_t>& lengths);

/// Token accuracy (seq2seq, greedy) or classification accuracy.
double evaluate(const Transformer& model, const std::vector<Example>& examples, bool classification,
                std::size_t limit = 0, std::size_t batch_size = 100);

/// Loss of one batch; logits from the task's forward pass.
Tensor batch_loss(const Transformer& model, const std::vector<const Example*>& batch, bool classification,
                  double smoothing, const ForwardOptions& opts = {});

/// Trains the model's trainable parameters. Deterministic per cfg.seed.
TrainResult train_loop(Transformer& model, const Dataset& data, const TrainConfig& cfg);

}  // namespace peftlab
