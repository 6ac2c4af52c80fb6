#include <cmath>
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

std::size_t audited(const ModelConfig& cfg, const PeftPlan& plan, bool materialize) {
    Transformer m(cfg, 1, materialize);
    attach_plan(m, plan, 2);
    freeze_base(m, plan);
    return audit_trainable(m);
}

}  // namespace

TEST_CASE("per-sublayer formulas") {
    CHECK(count_per_sublayer(method(Method::prefix, Target::attn, 200), 1024, 4096).attn == 409600);
    CHECK(count_per_sublayer(method(Method::lora, Target::ffn, 102), 1024, 4096).ffn == 1044480);
    CHECK(count_per_sublayer(method(Method::lora, Target::ffn, 102), 1024, 4096).ffn == 10 * 102 * 1024);
    CHECK(count_per_sublayer(method(Method::lora, Target::attn, 5), 64, 256).attn == 4 * 5 * 64);
    CHECK(count_per_sublayer(method(Method::adapter_seq, Target::ffn, 1), 32, 128).ffn == 2 * 32);
    CHECK(count_per_sublayer(method(Method::mh_pa, Target::attn, 30), 1024, 4096).attn ==
          count_per_sublayer(method(Method::prefix, Target::attn, 30), 1024, 4096).attn);
    CHECK(count_per_sublayer(method(Method::prompt, Target::attn, 3), 32, 128).input == 96);
    CHECK_THROWS_AS(count_per_sublayer(method(Method::bitfit, Target::attn, 1), 32, 128), ConfigError);
    CHECK_THROWS_AS(count_per_sublayer(method(Method::prefix, Target::ffn, 4), 32, 128), ConfigError);
    CHECK_THROWS_AS(count_per_sublayer(method(Method::adapter_par, Target::ffn, 0), 32, 128), ContractError);
}

TEST_CASE("totals on the BART-shape config") {
    const ModelConfig bart = ModelConfig::bart_large();
    CHECK(count_total(bart, {method(Method::prefix, Target::attn, 200)}).theta() == 14745600);
    CHECK(count_total(bart, build_mam(bart, 30, 512)).theta() == 27377664);
    auto empty = count_total(bart, {});
    CHECK(empty.theta() == 0);
    CHECK(empty.relative_percent == 0.0);
    auto r = count_total(bart, {method(Method::prefix, Target::attn, 200)});
    CHECK(r.attn_total + r.ffn_total == r.theta());
    CHECK(r.attn_total == r.per_sublayer.attn * 3 * 12);
}

TEST_CASE("BART-shape base total and budgets") {
    const ModelConfig bart = ModelConfig::bart_large();
    // 50265*1024 tied embeddings + 2*1024*1024 positions + 12 encoder layers
    // (4d^2 + 2 d d_m + d_m + d + 4d) + 12 decoder layers (8d^2 + 2 d d_m + d_m + d + 6d)
    const std::size_t d = 1024, dm = 4096;
    const std::size_t enc = 4 * d * d + 2 * d * dm + dm + d + 4 * d;
    const std::size_t dec = 8 * d * d + 2 * d * dm + dm + d + 6 * d;
    const std::size_t expected = 50265 * d + 2 * 1024 * d + 12 * enc + 12 * dec;
    CHECK(expected == 406135808);
    CHECK(base_total(bart) == expected);

    auto pct = [&](const PeftPlan& plan) { return count_total(bart, plan).relative_percent; };
    CHECK(std::abs(pct({method(Method::prefix, Target::attn, 200)}) - 3.6) <= 0.1);
    CHECK(std::abs(pct({method(Method::lora, Target::ffn, 102)}) - 6.1) <= 0.1);
    CHECK(std::abs(pct({method(Method::adapter_par, Target::ffn, 1024)}) - 12.3) <= 0.1);
    CHECK(std::abs(pct(build_mam(bart, 30, 512)) - 6.7) <= 0.1);
}

TEST_CASE("relative percentage") {
    CHECK(relative_percentage(100, 100) == 100.0);
    CHECK(relative_percentage(0, 100) == 0.0);
    CHECK_THROWS_AS(relative_percentage(1, 0), ContractError);
    BudgetReport r;
    r.attn_total = 25;
    CHECK(relative_percentage(r, 100) == 25.0);
}

TEST_CASE("audit equals closed form on materialized and unmaterialized models") {
    const std::vector<MethodSpec> methods{
        method(Method::prefix, Target::attn, 1),      method(Method::adapter_seq, Target::attn, 1),
        method(Method::adapter_seq, Target::ffn, 1),  method(Method::adapter_par, Target::attn, 1),
        method(Method::adapter_par, Target::ffn, 1),  method(Method::mh_pa, Target::attn, 1),
        method(Method::scaled_pa, Target::ffn, 1),    method(Method::lora, Target::attn, 1),
        method(Method::lora, Target::ffn, 1),         method(Method::prompt, Target::attn, 1),
    };
    ModelConfig desk = ModelConfig::desk();
    ModelConfig enc = desk;
    enc.arch = Architecture::encoder_only;
    for (auto m : methods) {
        for (std::size_t b : {1, 4, 16}) {
            m.bottleneck = b;
            CAPTURE(m.label());
            CHECK(audited(desk, {m}, true) == count_total(desk, {m}).tunable());
            CHECK(audited(desk, {m}, false) == count_total(desk, {m}).tunable());
            CHECK(audited(enc, {m}, false) == count_total(enc, {m}).tunable());
        }
    }
    MethodSpec trainable = method(Method::scaled_pa, Target::ffn, 4);
    trainable.trainable_scale = true;
    auto r = count_total(desk, {trainable});
    CHECK(r.overhead == 2 * desk.layers);
    CHECK(audited(desk, {trainable}, true) == r.tunable());

    MethodSpec reparam = method(Method::prefix, Target::attn, 4);
    reparam.prefix_reparam = true;
    reparam.reparam_hidden = 16;
    auto rr = count_total(desk, {reparam});
    CHECK(rr.overhead > 0);
    CHECK(audited(desk, {reparam}, true) == rr.tunable());
    CHECK(audited(desk, {reparam}, false) == rr.tunable());

    auto mam = build_mam(desk, 4, 16);
    CHECK(audited(desk, mam, true) == count_total(desk, mam).tunable());
}

TEST_CASE("audit of whole-model sets") {
    const ModelConfig desk = ModelConfig::desk();
    CHECK(audited(desk, {}, true) == 0);
    MethodSpec full;
    full.method = Method::full;
    CHECK(audited(desk, {full}, true) == base_total(desk));
    CHECK(count_total(desk, {full}).tunable() == base_total(desk));
    CHECK(count_total(desk, {full}).relative_percent == doctest::Approx(100.0));
    MethodSpec bitfit;
    bitfit.method = Method::bitfit;
    Transformer m(desk, 1);
    std::size_t biases = 0;
    for (const auto& p : m.parameters().all())
        if (p.is_bias) biases += p.size();
    CHECK(audited(desk, {bitfit}, true) == biases);
    CHECK(count_total(desk, {bitfit}).tunable() == biases);
}

TEST_CASE("budget parity and monotonicity") {
    for (std::size_t b = 1; b <= 64; b *= 2) {
        const auto prefix = count_per_sublayer(method(Method::prefix, Target::attn, b), 32, 128).attn;
        const auto adapter = count_per_sublayer(method(Method::adapter_par, Target::attn, b), 32, 128).attn;
        const auto lora = count_per_sublayer(method(Method::lora, Target::attn, b), 32, 128).attn;
        CHECK(prefix == adapter);
        CHECK(lora == 2 * adapter);
    }
    const ModelConfig desk = ModelConfig::desk();
    for (Method m : {Method::prefix, Method::adapter_par, Method::lora, Method::mh_pa, Method::prompt}) {
        std::size_t last = 0;
        for (std::size_t b = 1; b <= 32; ++b) {
            const auto now = count_total(desk, {method(m, Target::attn, b)}).tunable();
            CHECK(now > last);
            last = now;
        }
    }
}

TEST_CASE("report formatting") {
    auto r = count_total(ModelConfig::bart_large(), {method(Method::prefix, Target::attn, 200)});
    CHECK(format_report(r).find("14,745,600") != std::string::npos);
    const std::string row = report_csv_row(r);
    CHECK(row.find("14745600") != std::string::npos);
    std::size_t commas = 0;
    for (char c : report_csv_header()) commas += c == ',';
    std::size_t row_commas = 0;
    for (char c : row) row_commas += c == ',';
    CHECK(commas == row_commas);
}
