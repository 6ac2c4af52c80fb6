#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "doctest.h"
#include "peftlab/gradcheck.hpp"
#include "peftlab/transformer.hpp"

using namespace peftlab;

namespace {

void zero_fill(Tensor t) {
    for (auto& v : t.mutable_data()) v = 0.0;
}

Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(t, rng.normal_tensor(t.shape(), 1.0)));
}

// Plain-loop multi-head attention used as an independent reference.
std::vector<double> reference_mha(const Tensor& c, const Tensor& x, const AttentionWeights& w, std::size_t heads) {
    const std::size_t n = x.rows(), m = c.rows(), d = x.cols(), dh = d / heads;
    auto proj = [d](const Tensor& in, const Tensor& W) {
        std::vector<double> out(in.rows() * d, 0.0);
        for (std::size_t i = 0; i < in.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t p = 0; p < d; ++p) out[i * d + j] += in.at(i, p) * W.at(p, j);
        return out;
    };
    auto q = proj(x, w.W_q), k = proj(c, w.W_k), v = proj(c, w.W_v);
    std::vector<double> cat(n * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> logit(m);
            double mx = -1e300;
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) s += q[i * d + h * dh + t] * k[j * d + h * dh + t];
                logit[j] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, logit[j]);
            }
            double z = 0.0;
            for (auto& l : logit) z += (l = std::exp(l - mx));
            for (std::size_t t = 0; t < dh; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j < m; ++j) acc += logit[j] / z * v[j * d + h * dh + t];
                cat[i * d + h * dh + t] = acc;
            }
        }
    }
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t p = 0; p < d; ++p) out[i * d + j] += cat[i * d + p] * w.W_o.at(p, j);
    return out;
}

AttentionWeights random_attention(Rng& rng, std::size_t d) {
    return {rng.normal_tensor({d, d}, 0.5), rng.normal_tensor({d, d}, 0.5), rng.normal_tensor({d, d}, 0.5),
            rng.normal_tensor({d, d}, 0.5)};
}

class Probe final : public Modification {
public:
    Probe(HookPoint p, std::map<HookPoint, std::vector<Shape>>* seen) : point_(p), seen_(seen) {}
    HookPoint hook_point() const override { return point_; }
    Tensor apply(const HookContext& ctx, const Tensor& h) const override {
        if (ctx.point == point_) (*seen_)[point_].push_back(h.shape());
        return h;
    }
    std::string describe() const override { return "probe"; }

private:
    HookPoint point_;
    std::map<HookPoint, std::vector<Shape>>* seen_;
};

}  // namespace

TEST_CASE("attn examples") {
    Rng rng(1);
    auto v1 = Tensor::matrix({{3, -1, 2}});
    auto out = attn(rng.normal_tensor({4, 2}, 1.0), rng.normal_tensor({1, 2}, 1.0), v1, 0.7);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(out.at(i, j) == doctest::Approx(v1.at(0, j)).epsilon(1e-14));

    auto k_same = Tensor::matrix({{1, 2}, {1, 2}, {1, 2}});
    auto v = Tensor::matrix({{1, 0}, {2, 4}, {6, 2}});
    auto avg = attn(Tensor::matrix({{0.3, -4}}), k_same, v, 1.0);
    CHECK(avg.at(0, 0) == doctest::Approx(3.0));
    CHECK(avg.at(0, 1) == doctest::Approx(2.0));

    auto hand = attn(Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{1, 0}, {0, 1}}), 1.0);
    const double e = std::exp(1.0);
    CHECK(hand.at(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-14));
    CHECK(hand.at(0, 1) == doctest::Approx(1 / (e + 1)).epsilon(1e-14));
    CHECK(hand.at(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));

    CHECK_THROWS_AS(attn(Tensor::zeros({1, 2}), Tensor::zeros({2, 3}), Tensor::zeros({2, 2}), 1.0), DimensionError);
}

TEST_CASE("mha examples") {
    Rng rng(2);
    const std::size_t d = 4;
    auto x = rng.normal_tensor({3, d}, 1.0);
    auto c = rng.normal_tensor({5, d}, 1.0);

    auto w = random_attention(rng, d);
    w.W_o = Tensor::identity(d);
    auto single = mha(c, x, w, 1);
    auto direct = attn(matmul(x, w.W_q), matmul(c, w.W_k), matmul(c, w.W_v), 0.5);
    for (std::size_t i = 0; i < single.size(); ++i) CHECK(single[i] == direct[i]);

    AttentionWeights zero{Tensor::zeros({d, d}), Tensor::zeros({d, d}), Tensor::zeros({d, d}), Tensor::zeros({d, d})};
    auto zero_out = mha(c, x, zero, 2);
    for (double val : zero_out.data()) CHECK(val == 0.0);

    for (int trial = 0; trial < 5; ++trial) {
        auto wr = random_attention(rng, d);
        auto got = mha(c, x, wr, 2);
        auto ref = reference_mha(c, x, wr, 2);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(got[i] - ref[i]) <= 1e-12);
    }
    for (std::size_t heads : {1u, 2u, 4u}) {
        auto x8 = rng.normal_tensor({4, 8}, 1.0);
        auto c8 = rng.normal_tensor({6, 8}, 1.0);
        auto w8 = random_attention(rng, 8);
        auto got = mha(c8, x8, w8, heads);
        auto ref = reference_mha(c8, x8, w8, heads);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(got[i] - ref[i]) <= 1e-12);
    }
}

TEST_CASE("ffn examples") {
    Rng rng(3);
    auto x = rng.normal_tensor({3, 2}, 1.0);
    FFNWeights zero{Tensor::zeros({2, 5}), rng.normal_tensor({5}, 1.0), Tensor::zeros({5, 2}), Tensor::vector({4, -1})};
    auto out = ffn(x, zero);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(out.at(i, 0) == 4.0);
        CHECK(out.at(i, 1) == -1.0);
    }
    FFNWeights gated{rng.normal_tensor({2, 5}, 0.1), Tensor::full({5}, -100.0), rng.normal_tensor({5, 2}, 1.0),
                     Tensor::vector({0.5, 2})};
    auto g = ffn(x, gated);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(g.at(i, 0) == 0.5);
        CHECK(g.at(i, 1) == 2.0);
    }
    FFNWeights hand{Tensor::matrix({{1}}), Tensor::vector({0}), Tensor::matrix({{3}}), Tensor::vector({1})};
    CHECK(ffn(Tensor::matrix({{2}}), hand).item() == 7.0);
}

TEST_CASE("transformer primitives pass the gradient oracle") {
    Rng wr(4);
    const std::size_t d = 4;
    auto c = wr.normal_tensor({5, d}, 1.0);
    auto w = random_attention(wr, d);
    FFNWeights f{wr.normal_tensor({d, 6}, 0.5), wr.normal_tensor({6}, 0.5), wr.normal_tensor({6, d}, 0.5),
                 wr.normal_tensor({d}, 0.5)};
    auto mask = causal_mask(3);
    Rng rng(40);
    for (int i = 0; i < 10; ++i) {
        auto x = rng.normal_tensor({3, d}, 1.0);
        CHECK(finite_diff_check([&](const Tensor& t) { return weighted_sum(mha(c, t, w, 2), 1); }, x, 1e-4) <= 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return weighted_sum(mha(t, t, w, 2, mask), 2); }, x, 1e-4) <=
              1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return weighted_sum(attn(t, c, c, 0.5), 3); }, x, 1e-4) <=
              1e-4);
        bool kink = false;
        auto pre = add_row(matmul(x, f.W_1), f.b_1);
        for (double v : pre.data()) kink = kink || std::abs(v) < 1e-3;
        if (!kink) {
            CHECK(finite_diff_check([&](const Tensor& t) { return weighted_sum(ffn(t, f), 4); }, x, 1e-4) <= 1e-4);
        }
    }
}

TEST_CASE("model config invariants") {
    auto c = ModelConfig::desk();
    CHECK(c.head_dim() == 8);
    CHECK(c.attn_sublayers_per_layer() == 3);
    CHECK(c.ffn_sublayers_per_layer() == 2);
    c.arch = Architecture::encoder_only;
    CHECK(c.attn_sublayers_per_layer() == 1);
    CHECK(c.ffn_sublayers_per_layer() == 1);
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("block_forward") {
    auto cfg = ModelConfig::desk();
    Transformer model(cfg, 7);
    Rng rng(8);
    auto x = rng.normal_tensor({5, cfg.d_model}, 1.0);
    auto segs = Segments::from_lengths({2, 3});

    auto y = model.block_forward(Stack::encoder, 0, x, segs, nullptr);
    CHECK(y.shape() == x.shape());

    // zero every sublayer weight: each sublayer contributes only its (zero) bias
    for (const auto& p : model.parameters().all()) {
        if (p.name.rfind("encoder.0.", 0) == 0 && p.name.find("_ln.") == std::string::npos) zero_fill(p.value);
    }
    auto z = model.block_forward(Stack::encoder, 0, x, segs, nullptr);
    const auto& lw = model.layer(Stack::encoder, 0);
    auto expected = layer_norm(layer_norm(x, lw.self_ln.gain, lw.self_ln.bias, cfg.ln_eps), lw.ffn_ln.gain,
                               lw.ffn_ln.bias, cfg.ln_eps);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == expected[i]);

    Trace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    Transformer fresh(cfg, 7);
    fresh.forward(std::vector<TokenSeq>{{3, 4, 5}}, std::vector<TokenSeq>{{1, 2}}, opts);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (Stack s : {Stack::encoder, Stack::decoder}) {
            CHECK(trace.find(HookPoint::head_attn_output, {s, l, Sublayer::self_attention}).size() == cfg.heads);
            CHECK(!trace.find(HookPoint::attn_sublayer_output, {s, l, Sublayer::self_attention}).empty());
            CHECK(!trace.find(HookPoint::ffn_sublayer_output, {s, l, Sublayer::ffn}).empty());
        }
    }
}

TEST_CASE("model_forward") {
    auto cfg = ModelConfig::desk();
    Transformer model(cfg, 11);
    CHECK_THROWS_AS(model.forward(TokenSeq{1, 2}, TokenSeq{}), ContractError);
    CHECK_THROWS_AS(model.forward(TokenSeq{1, 99}, TokenSeq{1}), ContractError);

    auto logits = model.forward(TokenSeq{3, 1, 4, 1, 5}, TokenSeq{1, 7, 8});
    CHECK(logits.shape() == Shape{3, cfg.vocab});

    auto again = model.forward(TokenSeq{3, 1, 4, 1, 5}, TokenSeq{1, 7, 8});
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == again[i]);

    // causality: changing target tokens after t leaves logits at <= t unchanged
    Rng rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        TokenSeq src, tgt;
        for (int i = 0; i < 6; ++i) src.push_back(static_cast<int>(rng.below(cfg.vocab)));
        for (int i = 0; i < 6; ++i) tgt.push_back(static_cast<int>(rng.below(cfg.vocab)));
        auto base = model.forward(src, tgt);
        for (std::size_t t = 0; t + 1 < tgt.size(); ++t) {
            auto changed = tgt;
            for (std::size_t j = t + 1; j < changed.size(); ++j) changed[j] = (changed[j] + 1) % cfg.vocab;
            auto alt = model.forward(src, changed);
            for (std::size_t p = 0; p <= t; ++p)
                for (std::size_t v = 0; v < cfg.vocab; ++v) CHECK(alt.at(p, v) == doctest::Approx(base.at(p, v)).epsilon(1e-12));
        }
    }

    // packed batches match one-at-a-time forwards
    std::vector<TokenSeq> srcs{{3, 4, 5}, {6, 7}, {8, 9, 10, 11}};
    std::vector<TokenSeq> tgts{{1, 2}, {1, 3, 4}, {1}};
    auto packed = model.forward(srcs, tgts);
    std::size_t row = 0;
    for (std::size_t b = 0; b < srcs.size(); ++b) {
        auto one = model.forward(srcs[b], tgts[b]);
        for (std::size_t i = 0; i < one.rows(); ++i, ++row)
            for (std::size_t v = 0; v < cfg.vocab; ++v)
                CHECK(packed.at(row, v) == doctest::Approx(one.at(i, v)).epsilon(1e-12));
    }
}

TEST_CASE("every forward hook point is reachable with documented shapes") {
    auto cfg = ModelConfig::desk();
    Transformer model(cfg, 13);
    std::map<HookPoint, std::vector<Shape>> seen;
    const Location enc_self{Stack::encoder, 1, Sublayer::self_attention};
    const Location dec_cross{Stack::decoder, 0, Sublayer::cross_attention};
    const Location dec_ffn{Stack::decoder, 1, Sublayer::ffn};
    model.attach({Stack::encoder, 0, Sublayer::embedding}, std::make_shared<Probe>(HookPoint::input_embedding, &seen));
    model.attach(enc_self, std::make_shared<Probe>(HookPoint::attn_query_proj, &seen));
    model.attach(dec_cross, std::make_shared<Probe>(HookPoint::attn_value_proj, &seen));
    model.attach(enc_self, std::make_shared<Probe>(HookPoint::head_attn_output, &seen));
    model.attach(dec_cross, std::make_shared<Probe>(HookPoint::attn_sublayer_output, &seen));
    model.attach(dec_ffn, std::make_shared<Probe>(HookPoint::ffn_weight_1, &seen));
    model.attach(dec_ffn, std::make_shared<Probe>(HookPoint::ffn_weight_2, &seen));
    model.attach(dec_ffn, std::make_shared<Probe>(HookPoint::ffn_sublayer_output, &seen));
    CHECK_THROWS_AS(model.attach(dec_ffn, std::make_shared<Probe>(HookPoint::ffn_weight_2, &seen)), ConfigError);

    const std::size_t n = 5, m = 3, d = cfg.d_model;
    model.forward(TokenSeq{2, 3, 4, 5, 6}, TokenSeq{1, 2, 3});
    CHECK(seen[HookPoint::input_embedding] == std::vector<Shape>{{n, d}});
    CHECK(seen[HookPoint::attn_query_proj] == std::vector<Shape>{{n, d}});
    CHECK(seen[HookPoint::attn_value_proj] == std::vector<Shape>{{n, d}});  // cross-attention values come from the encoder
    CHECK(seen[HookPoint::head_attn_output] == std::vector<Shape>(cfg.heads, Shape{n, cfg.head_dim()}));
    // parallel and sequential stages
    CHECK(seen[HookPoint::attn_sublayer_output] == std::vector<Shape>{{m, d}, {m, d}});
    CHECK(seen[HookPoint::ffn_weight_1] == std::vector<Shape>{{m, cfg.d_ff}});
    CHECK(seen[HookPoint::ffn_weight_2] == std::vector<Shape>{{m, d}});
    CHECK(seen[HookPoint::ffn_sublayer_output] == std::vector<Shape>{{m, d}, {m, d}});

    // bias_terms has no forward site; it names the bias tensors
    std::size_t biases = 0;
    for (const auto& p : model.parameters().all()) biases += p.is_bias;
    CHECK(biases > 0);
}

TEST_CASE("unmaterialized model supports accounting only") {
    Transformer big(ModelConfig::bart_large(), 1, false);
    CHECK(!big.parameters().materialized());
    std::size_t total = 0;
    for (const auto& p : big.parameters().all()) total += p.size();
    CHECK(total > 400'000'000);
    CHECK_THROWS_AS(big.forward(TokenSeq{1}, TokenSeq{1}), ContractError);
}

TEST_CASE("encoder-only classification") {
    auto cfg = ModelConfig::desk();
    cfg.arch = Architecture::encoder_only;
    cfg.num_classes = 3;
    Transformer model(cfg, 5);
    auto logits = model.classify({{1, 2, 3}, {4, 5}});
    CHECK(logits.shape() == Shape{2, 3});
    CHECK_THROWS_AS(model.forward(TokenSeq{1}, TokenSeq{1}), ContractError);
}
