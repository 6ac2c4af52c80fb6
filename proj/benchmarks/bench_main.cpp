// Microbenchmarks for the hot paths: matmul with gradients, a forward pass,
// one optimizer step, and the two prefix formulations.

#include <benchmark/benchmark.h>

#include "peftlab/experiment.hpp"
#include "peftlab/peft.hpp"
#include "peftlab/trainer.hpp"

using namespace peftlab;

namespace {

void BM_MatmulBackward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Tensor a = rng.normal_tensor({n, n}, 1.0, true);
    const Tensor b = rng.normal_tensor({n, n}, 1.0, true);
    for (auto _ : state) {
        const Tensor y = sum(matmul(a, b));
        y.backward();
        benchmark::DoNotOptimize(y.item());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_MatmulBackward)->RangeMultiplier(2)->Range(16, 128)->Complexity();

struct Desk {
    ExperimentSpec spec;
    Dataset data;
    std::unique_ptr<Transformer> model;
    std::vector<const Example*> batch;

    explicit Desk(PeftPlan plan) {
        spec.plan = std::move(plan);
        data = gen_task(spec.task);
        model = std::make_unique<Transformer>(spec.resolved_model(), spec.model_seed);
        attach_plan(*model, spec.plan, spec.train.seed, spec.init);
        freeze_base(*model, spec.plan);
        for (std::size_t i = 0; i < spec.train.batch_size; ++i) batch.push_back(&data.train[i]);
    }
};

PeftPlan plan_for(int which) {
    MethodSpec m;
    switch (which) {
        case 0: m.method = Method::full; break;
        case 1: m.method = Method::prefix, m.target = Target::attn, m.bottleneck = 8; break;
        case 2: m.method = Method::adapter_par, m.target = Target::ffn, m.bottleneck = 16; break;
        default: m.method = Method::lora, m.target = Target::attn, m.bottleneck = 8; break;
    }
    return {m};
}

const char* kPlanNames[] = {"full", "prefix", "pa_ffn", "lora_attn"};

void BM_Forward(benchmark::State& state) {
    Desk d(plan_for(static_cast<int>(state.range(0))));
    state.SetLabel(kPlanNames[state.range(0)]);
    for (auto _ : state) {
        const Tensor loss = batch_loss(*d.model, d.batch, false, 0.0);
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_Forward)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    Desk d(plan_for(static_cast<int>(state.range(0))));
    state.SetLabel(kPlanNames[state.range(0)]);
    AdamState adam = make_adam(*d.model);
    for (auto _ : state) {
        const Tensor loss = batch_loss(*d.model, d.batch, false, d.spec.train.label_smoothing);
        loss.backward();
        adam_step(adam, d.spec.train.learning_rate, d.spec.train.max_grad_norm, d.spec.train.weight_decay);
    }
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

// Prefix attention over one sequence of length n, prefix length 8.
template <bool Native>
void BM_PrefixAttention(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    constexpr std::size_t d = 64, heads = 4, l = 8;
    Rng rng(3);
    const Tensor x = rng.normal_tensor({n, d}, 1.0);
    const AttentionWeights w{rng.normal_tensor({d, d}, 0.1), rng.normal_tensor({d, d}, 0.1),
                             rng.normal_tensor({d, d}, 0.1), rng.normal_tensor({d, d}, 0.1)};
    PrefixParams p;
    p.P_k = rng.normal_tensor({l, d}, 1.0);
    p.P_v = rng.normal_tensor({l, d}, 1.0);
    p.length = l;
    for (auto _ : state) {
        const auto out = Native ? prefix_attention_native(x, x, w, p, heads) : prefix_attention_equivalent(x, x, w, p, heads);
        benchmark::DoNotOptimize(out.front()[0]);
    }
}
BENCHMARK_TEMPLATE(BM_PrefixAttention, true)->Arg(16)->Arg(64);
BENCHMARK_TEMPLATE(BM_PrefixAttention, false)->Arg(16)->Arg(64);

}  // namespace
BENCHMARK_MAIN();
