#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "doctest.h"
#include "peftlab/accounting.hpp"
#include "peftlab/trainer.hpp"

using namespace peftlab;

namespace {

MethodSpec method(Method m, Target t, std::size_t b) {
    MethodSpec s;
    s.method = m;
    s.target = t;
    s.bottleneck = b;
    return s;
}

ModelConfig tiny() {
    ModelConfig c = ModelConfig::desk();
    c.layers = 1;
    c.d_model = 16;
    c.heads = 2;
    c.d_ff = 32;
    return c;
}

TaskSpec small_task() {
    TaskSpec t;
    t.vocab = 8;
    t.seq_len = 4;
    t.train_size = 64;
    t.dev_size = 16;
    t.test_size = 16;
    return t;
}

std::vector<std::vector<double>> snapshot(const Transformer& m) {
    std::vector<std::vector<double>> out;
    for (const auto& p : m.parameters().all()) out.emplace_back(p.value.data().begin(), p.value.data().end());
    return out;
}

}  // namespace

TEST_CASE("lr schedule") {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.total_steps = 1000;
    c.warmup_fraction = 0.06;
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(60, c) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(lr_at(530, c) == doctest::Approx(0.5e-3).epsilon(1e-12));
    CHECK(lr_at(1000, c) == 0.0);
    CHECK(lr_at(30, c) == doctest::Approx(0.5e-3).epsilon(1e-12));
    double prev = lr_at(0, c);
    for (std::size_t s = 1; s <= 1000; ++s) {
        const double now = lr_at(s, c);
        CHECK(std::abs(now - prev) <= 1e-3 / 60.0 + 1e-15);
        prev = now;
    }
    CHECK_THROWS_AS(lr_at(1001, c), ContractError);
    c.warmup_fraction = 0.0;
    CHECK(lr_at(0, c) == 1e-3);
}

TEST_CASE("adam step") {
    Tensor w = Tensor::vector({0.5}, true);
    AdamState st = make_adam({"w"}, {w});
    adam_step(st, 0.1, 0.0, 0.0);
    CHECK(w[0] == 0.5);  // zero gradient

    w.node()->grad_buffer()[0] = 1.0;
    AdamState fresh = make_adam({"w"}, {w});
    adam_step(fresh, 0.1, 0.0, 0.0);
    CHECK(w[0] == doctest::Approx(0.4).epsilon(1e-6));

    Tensor v = Tensor::vector({0.0, 0.0}, true);
    v.node()->grad_buffer() = {6.0, 8.0};
    AdamState clip = make_adam({"v"}, {v});
    StepStats s = adam_step(clip, 0.1, 1.0, 0.0);
    CHECK(s.grad_norm == doctest::Approx(10.0));
    CHECK(s.clip_scale == doctest::Approx(0.1));
    CHECK(clip.m[0][0] == doctest::Approx(0.1 * 0.6));

    Tensor decay = Tensor::vector({2.0}, true);
    AdamState wd = make_adam({"decay"}, {decay});
    adam_step(wd, 0.1, 0.0, 0.5);
    CHECK(decay[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));

    Tensor bad = Tensor::vector({1.0}, true);
    bad.node()->grad_buffer()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState nan_state = make_adam({"encoder.0.ffn.W_1"}, {bad});
    try {
        adam_step(nan_state, 0.1, 1.0, 0.0);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("encoder.0.ffn.W_1") != std::string::npos);
    }
}

TEST_CASE("smoothed cross entropy") {
    Tensor logits = Tensor::matrix({{std::log(3.0), 0.0}});
    CHECK(smoothed_cross_entropy(logits, {0}, 0.1).item() ==
          doctest::Approx(0.9 * std::log(4.0 / 3.0) + 0.1 * std::log(4.0)).epsilon(1e-12));
    CHECK(smoothed_cross_entropy(logits, {0}, 0.1).item() == doctest::Approx(0.3975).epsilon(1e-4));
    CHECK(smoothed_cross_entropy(logits, {0}, 0.0).item() == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));

    Tensor uniform = Tensor::zeros({3, 7});
    for (double a : {0.0, 0.1, 0.5})
        CHECK(smoothed_cross_entropy(uniform, {1, 2, 3}, a).item() == doctest::Approx(std::log(7.0)).epsilon(1e-12));

    Rng rng(2);
    Tensor x = rng.normal_tensor({4, 5}, 1.0);
    const double both = smoothed_cross_entropy(x, {1, 0, 2, 3}, 0.0).item();
    const double masked = smoothed_cross_entropy(x, {1, kPad, 2, kPad}, 0.0, kPad).item();
    CHECK(both != masked);
    std::vector<double> kept(x.data().begin(), x.data().begin() + 5);
    kept.insert(kept.end(), x.data().begin() + 10, x.data().begin() + 15);
    CHECK(masked == doctest::Approx(smoothed_cross_entropy(Tensor::from({2, 5}, kept), {1, 2}, 0.0).item()).epsilon(1e-12));
    CHECK_THROWS_AS(smoothed_cross_entropy(x, {1, 2}, 0.1), DimensionError);
    CHECK_THROWS_AS(smoothed_cross_entropy(x, {1, 9, 2, 3}, 0.1), ContractError);
}

TEST_CASE("tasks") {
    TaskSpec t = small_task();
    Dataset a = gen_task(t), b = gen_task(t);
    REQUIRE(a.train.size() == 64);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].src == b.train[i].src);
        CHECK(a.train[i].tgt == a.train[i].src);
    }
    std::set<TokenSeq> seen;
    for (const auto* split : {&a.train, &a.dev, &a.test})
        for (const auto& e : *split) CHECK(seen.insert(e.src).second);

    t.kind = TaskKind::reverse;
    Dataset r = gen_task(t);
    CHECK(r.train[0].tgt == TokenSeq(r.train[0].src.rbegin(), r.train[0].src.rend()));

    t.kind = TaskKind::classify_parity;
    Dataset p = gen_task(t);
    for (const auto& e : p.train) {
        int count = 0;
        for (int tok : e.src) count += tok == kParityToken;
        CHECK(e.label == count % 2);
    }
    CHECK(decoder_input({3, 1, 4}) == TokenSeq{kBos, 3, 1});
    t.seq_len = 1;
    t.vocab = 4;
    CHECK_THROWS_AS(gen_task(t), ConfigError);
}

TEST_CASE("freeze_base") {
    const ModelConfig cfg = tiny();
    Transformer full_model(cfg, 1);
    MethodSpec full;
    full.method = Method::full;
    freeze_base(full_model, {full});
    for (const auto& p : full_model.parameters().all()) CHECK(p.trainable);

    Transformer adapter(cfg, 1);
    PeftPlan plan{method(Method::adapter_par, Target::ffn, 2)};
    attach_plan(adapter, plan, 3);
    freeze_base(adapter, plan);
    for (const auto& p : adapter.parameters().all()) {
        const bool is_adapter = p.name.find("W_down") != std::string::npos || p.name.find("W_up") != std::string::npos;
        CHECK(p.trainable == is_adapter);
        CHECK(p.value.requires_grad() == is_adapter);
    }
}

TEST_CASE("train_loop determinism and freeze audit") {
    Dataset data = gen_task(small_task());
    const ModelConfig cfg = config_for_task(tiny(), data.spec);
    TrainConfig tc;
    tc.total_steps = 12;
    tc.batch_size = 8;
    tc.eval_every = 4;
    tc.learning_rate = 1e-2;

    auto run = [&](std::vector<std::vector<double>>* before, std::vector<std::vector<double>>* after) {
        Transformer m(cfg, 5);
        PeftPlan plan = build_mam(cfg, 2, 4);
        attach_plan(m, plan, 6);
        freeze_base(m, plan);
        if (before) *before = snapshot(m);
        auto r = train_loop(m, data, tc);
        if (after) *after = snapshot(m);
        for (std::size_t i = 0; i < m.parameters().all().size(); ++i) {
            const auto& p = m.parameters().all()[i];
            if (!p.trainable && before && after) CHECK((*before)[i] == (*after)[i]);
        }
        return r;
    };
    std::vector<std::vector<double>> before, after;
    auto a = run(&before, &after);
    auto b = run(nullptr, nullptr);
    REQUIRE(a.curve.size() == 4);
    CHECK_FALSE(a.failed);
    for (std::size_t i = 0; i < a.curve.size(); ++i) {
        CHECK(a.curve[i].metric == b.curve[i].metric);
        if (i > 0) CHECK(a.curve[i].loss == b.curve[i].loss);
    }
    CHECK(before != after);

    TrainConfig zero = tc;
    zero.total_steps = 0;
    Transformer m(cfg, 5);
    auto z = train_loop(m, data, zero);
    CHECK(z.curve.size() == 1);
    CHECK(z.curve[0].step == 0);
    CHECK(z.final_metric == z.curve[0].metric);

    Transformer frozen(cfg, 5);
    freeze_base(frozen, {});
    auto f = train_loop(frozen, data, tc);
    CHECK(f.failed);
}

TEST_CASE("loss decreases on a fixed batch for every method") {
    Dataset data = gen_task(small_task());
    const ModelConfig cfg = config_for_task(tiny(), data.spec);
    std::vector<const Example*> batch;
    for (std::size_t i = 0; i < 8; ++i) batch.push_back(&data.train[i]);
    MethodSpec full;
    full.method = Method::full;
    MethodSpec bitfit;
    bitfit.method = Method::bitfit;
    const std::vector<PeftPlan> plans{
        {method(Method::prefix, Target::attn, 4)},       {method(Method::adapter_seq, Target::ffn, 4)},
        {method(Method::adapter_par, Target::ffn, 4)},   {method(Method::scaled_pa, Target::ffn, 4)},
        {method(Method::mh_pa, Target::attn, 4)},        {method(Method::lora, Target::attn, 4)},
        {method(Method::lora, Target::ffn, 4)},          {method(Method::prompt, Target::attn, 4)},
        build_mam(cfg, 2, 4),                            {bitfit},
        {full},
    };
    const TrainConfig defaults;
    for (const auto& plan : plans) {
        Transformer m(cfg, 9);
        attach_plan(m, plan, 4);
        freeze_base(m, plan);
        AdamState st = make_adam(m);
        double prev = std::numeric_limits<double>::infinity();
        for (int step = 0; step < 10; ++step) {
            for (auto& p : st.params) p.zero_grad();
            Tensor loss = batch_loss(m, batch, false, defaults.label_smoothing);
            CAPTURE(plan.front().label());
            CAPTURE(step);
            CHECK(loss.item() < prev);
            prev = loss.item();
            loss.backward();
            adam_step(st, defaults.learning_rate, defaults.max_grad_norm, defaults.weight_decay);
        }
    }
}

TEST_CASE("classification runs end to end") {
    TaskSpec t = small_task();
    t.kind = TaskKind::classify_parity;
    Dataset data = gen_task(t);
    const ModelConfig cfg = config_for_task(tiny(), t);
    CHECK(cfg.arch == Architecture::encoder_only);
    Transformer m(cfg, 1);
    PeftPlan plan{method(Method::lora, Target::attn, 2)};
    attach_plan(m, plan, 2);
    freeze_base(m, plan);
    TrainConfig tc;
    tc.total_steps = 5;
    tc.batch_size = 8;
    auto r = train_loop(m, data, tc);
    CHECK_FALSE(r.failed);
    CHECK(r.final_metric >= 0.0);
    CHECK(r.final_metric <= 1.0);
}
