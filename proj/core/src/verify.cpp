#include "peftlab/verify.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>

#include "peftlab/accounting.hpp"
#include "peftlab/gradcheck.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/peft.hpp"
#include "peftlab/random.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(t, rng.normal_tensor(t.shape(), 1.0)));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// 0 when every element matches bit for bit, otherwise the largest difference
// (infinite when shapes differ or a difference is NaN).
double exact_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) m = std::max(m, std::isnan(a[i] - b[i]) ? INFINITY : std::abs(a[i] - b[i]) + 1e-300);
    return m;
}

bool near_kink(const Tensor& pre) {
    for (double v : pre.data())
        if (std::abs(v) < 1e-3) return true;
    return false;
}

MethodSpec make_method(Method m, Target t, std::size_t b) {
    MethodSpec s;
    s.method = m;
    s.target = t;
    s.bottleneck = b;
    return s;
}

ModelConfig small_config() {
    ModelConfig c = ModelConfig::desk();
    c.d_model = 16;
    c.d_ff = 32;
    c.vocab = 12;
    return c;
}

const std::vector<TokenSeq> kSrc{{3, 4, 5, 6}, {7, 2}};
const std::vector<TokenSeq> kTgt{{1, 3, 4}, {1, 8, 9, 10}};

}  // namespace

bool SuiteResult::passed() const {
    if (checks.empty()) return false;
    for (const auto& c : checks)
        if (!c.passed()) return false;
    return time_limit <= 0.0 || seconds <= time_limit;
}

double SuiteResult::max_error() const {
    double m = 0.0;
    for (const auto& c : checks)
        if (c.tolerance < 1.0) m = std::max(m, c.value);
    return m;
}

SuiteResult verify_equivalence(std::uint64_t seed) {
    const auto t0 = Clock::now();
    SuiteResult r{"equivalence", {}, 0.0, 10.0};
    Rng rng(mix_seed(seed, 0xe9));
    const std::size_t ds[] = {8, 16}, hs[] = {1, 2, 4}, ls[] = {1, 3, 8}, ms[] = {1, 5, 9}, ns[] = {1, 4};
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = ds[rng.below(2)], heads = hs[rng.below(3)], l = ls[rng.below(3)], m = ms[rng.below(3)],
                          n = ns[rng.below(2)];
        AttentionWeights w{rng.normal_tensor({d, d}, 0.5), rng.normal_tensor({d, d}, 0.5),
                           rng.normal_tensor({d, d}, 0.5), rng.normal_tensor({d, d}, 0.5)};
        PrefixParams p;
        p.length = l;
        p.P_k = rng.normal_tensor({l, d}, 1.0);
        p.P_v = rng.normal_tensor({l, d}, 1.0);
        const Tensor x = rng.normal_tensor({n, d}, 1.0), c = rng.normal_tensor({m, d}, 1.0);
        const auto a = prefix_attention_native(x, c, w, p, heads);
        const auto b = prefix_attention_equivalent(x, c, w, p, heads);
        if (a.size() != heads || b.size() != heads) {
            worst = INFINITY;
            continue;
        }
        for (std::size_t h = 0; h < heads; ++h) {
            if (a[h].shape() != b[h].shape()) worst = INFINITY;
            else
                for (std::size_t i = 0; i < a[h].size(); ++i)
                    worst = std::max(worst, std::abs(a[h][i] - b[h][i]) / std::max(std::abs(a[h][i]), 1e-12));
        }
    }
    r.checks.push_back({"max relative error native vs decomposed (100 configs)", worst, 1e-6});
    r.seconds = since(t0);
    return r;
}

SuiteResult verify_lambda(std::uint64_t seed) {
    const auto t0 = Clock::now();
    SuiteResult r{"lambda", {}, 0.0, 0.0};
    Rng rng(mix_seed(seed, 0x1a));

    // finite random inputs stay strictly inside (0, 1)
    double outside = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(4), m = 1 + rng.below(9), l = 1 + rng.below(8), dh = 2 + rng.below(7);
        const double sd = trial % 2 ? 1.0 : 3.0;
        Tensor lam = prefix_head_lambda(rng.normal_tensor({n, dh}, sd), rng.normal_tensor({m, dh}, sd),
                                        rng.normal_tensor({l, dh}, sd), 1.0 / std::sqrt(double(dh)));
        for (double v : std::vector<double>(lam.data().begin(), lam.data().end()))
            if (!(v > 0.0 && v < 1.0)) outside += 1.0;
    }
    r.checks.push_back({"values outside (0,1) over 200 random heads", outside, 0.0});

    // equal logits give l / (l + m)
    double uniform_err = 0.0;
    for (std::size_t l : {1, 3, 8})
        for (std::size_t m : {1, 5, 9}) {
            Tensor lam = prefix_head_lambda(Tensor::zeros({3, 4}), rng.normal_tensor({m, 4}, 1.0),
                                            rng.normal_tensor({l, 4}, 1.0), 0.5);
            for (double v : std::vector<double>(lam.data().begin(), lam.data().end()))
                uniform_err = std::max(uniform_err, std::abs(v - double(l) / double(l + m)));
        }
    r.checks.push_back({"|lambda - l/(l+m)| with equal logits", uniform_err, 1e-12});

    // prefix logits 40 above every content logit
    double shortfall = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.below(9), l = 1 + rng.below(8), dh = 4;
        const double scale = 0.5;
        Tensor q = rng.normal_tensor({1, dh}, 1.0), k = rng.normal_tensor({m, dh}, 1.0);
        Tensor logits = scale_by(matmul(q, transpose(k)), Tensor::scalar(scale));
        double top = -INFINITY, qq = 0.0;
        for (double v : std::vector<double>(logits.data().begin(), logits.data().end())) top = std::max(top, v);
        for (double v : std::vector<double>(q.data().begin(), q.data().end())) qq += v * v;
        // P_k rows along q so each prefix logit equals top + 40
        const double t = (top + 40.0) / (qq * scale);
        std::vector<double> rows;
        for (std::size_t j = 0; j < l; ++j)
            for (double v : std::vector<double>(q.data().begin(), q.data().end())) rows.push_back(t * v);
        const double lam = prefix_head_lambda(q, k, Tensor::from({l, dh}, rows), scale).item();
        shortfall = std::max(shortfall, 1.0 - lam);
    }
    r.checks.push_back({"1 - lambda with prefixes shifted +40", shortfall, 1e-12});
    r.seconds = since(t0);
    return r;
}

SuiteResult verify_counts() {
    const auto t0 = Clock::now();
    SuiteResult r{"counts", {}, 0.0, 60.0};
    const std::vector<MethodSpec> methods{
        make_method(Method::prefix, Target::attn, 1),      make_method(Method::adapter_seq, Target::attn, 1),
        make_method(Method::adapter_seq, Target::ffn, 1),  make_method(Method::adapter_par, Target::attn, 1),
        make_method(Method::adapter_par, Target::ffn, 1),  make_method(Method::mh_pa, Target::attn, 1),
        make_method(Method::scaled_pa, Target::ffn, 1),    make_method(Method::lora, Target::attn, 1),
        make_method(Method::lora, Target::ffn, 1),         make_method(Method::prompt, Target::attn, 1),
    };
    double mismatches = 0.0, cells = 0.0;
    for (const ModelConfig& cfg : {ModelConfig::desk(), ModelConfig::bart_large()}) {
        const bool materialize = cfg.d_model <= 64;
        for (auto m : methods)
            for (std::size_t b : {1, 4, 16}) {
                m.bottleneck = b;
                Transformer model(cfg, 1, materialize);
                attach_plan(model, {m}, 2);
                freeze_base(model, {m});
                cells += 1.0;
                if (audit_trainable(model) != count_total(cfg, {m}).tunable()) mismatches += 1.0;
            }
    }
    r.checks.push_back({"audit != count_total cells (of " + std::to_string(int(cells)) + ")", mismatches, 0.0});

    const ModelConfig bart = ModelConfig::bart_large();
    struct Budget {
        const char* name;
        PeftPlan plan;
        double reference;
    };
    const std::vector<Budget> budgets{
        {"prefix l=200", {make_method(Method::prefix, Target::attn, 200)}, 3.6},
        {"lora-ffn r=102", {make_method(Method::lora, Target::ffn, 102)}, 6.1},
        {"adapter_par-ffn r=1024", {make_method(Method::adapter_par, Target::ffn, 1024)}, 12.3},
        {"mam l=30 r=512", build_mam(bart, 30, 512), 6.7},
    };
    for (const auto& b : budgets) {
        const double pct = count_total(bart, b.plan).relative_percent;
        char name[96];
        std::snprintf(name, sizeof name, "|%%%s - %.1f| on BART shape (%.3f%%), pp", b.name, b.reference, pct);
        r.checks.push_back({name, std::abs(pct - b.reference), 0.1});
    }
    r.seconds = since(t0);
    return r;
}

SuiteResult verify_gradients(std::uint64_t seed) {
    const auto t0 = Clock::now();
    SuiteResult r{"gradients", {}, 0.0, 0.0};
    using Fn = std::function<Tensor(const Tensor&)>;
    struct Case {
        std::string name;
        Shape shape;
        Fn f;
        std::function<bool(const Tensor&)> skip;  // kink-adjacent points
    };
    Rng wr(mix_seed(seed, 0x9c));
    const auto W = wr.normal_tensor({4, 3}, 1.0);
    const auto B = wr.normal_tensor({3, 4}, 1.0);
    const auto G = wr.normal_tensor({4}, 1.0);
    const auto Bias = wr.normal_tensor({4}, 1.0);
    const auto Rows = wr.normal_tensor({3, 4}, 1.0);
    const auto RowW = wr.normal_tensor({3}, 1.0);
    const auto Scal = Tensor::scalar(1.7);
    const std::vector<std::size_t> idx{2, 0, 2, 1};

    // transformer pieces
    const std::size_t d = 4;
    const auto C = wr.normal_tensor({5, d}, 1.0);
    AttentionWeights aw{wr.normal_tensor({d, d}, 0.5), wr.normal_tensor({d, d}, 0.5), wr.normal_tensor({d, d}, 0.5),
                        wr.normal_tensor({d, d}, 0.5)};
    FFNWeights fw{wr.normal_tensor({d, 6}, 0.5), wr.normal_tensor({6}, 0.5), wr.normal_tensor({6, d}, 0.5),
                  wr.normal_tensor({d}, 0.5)};
    const auto causal = causal_mask(3);

    // PEFT pieces
    const Tensor X = wr.normal_tensor({5, 8}, 1.0);
    const Tensor Wd = wr.normal_tensor({8, 3}, 1.0), Wu = wr.normal_tensor({3, 8}, 1.0);
    const Tensor Q = wr.normal_tensor({3, 4}, 1.0), K = wr.normal_tensor({4, 4}, 1.0), V = wr.normal_tensor({4, 4}, 1.0);
    const Tensor Pk = wr.normal_tensor({2, 4}, 1.0), Pv = wr.normal_tensor({2, 4}, 1.0);
    const double hs = 0.5;
    const Tensor Hstd = attn(Q, K, V, hs);
    MultiHeadAdapterParams mh;
    for (int h = 0; h < 2; ++h) mh.heads.push_back({wr.normal_tensor({4, 2}, 1.0), wr.normal_tensor({2, 4}, 1.0), {}});
    auto reparam = std::make_shared<PrefixReparam>();
    reparam->embedding = wr.normal_tensor({2, 3}, 1.0);
    reparam->W_hidden = wr.normal_tensor({3, 5}, 0.5);
    reparam->b_hidden = wr.normal_tensor({5}, 0.5);
    reparam->W_out = wr.normal_tensor({5, 16}, 0.5);
    reparam->b_out = wr.normal_tensor({16}, 0.5);
    reparam->sites = 2;
    reparam->d_model = 4;
    reparam->embed_dim = 3;
    reparam->hidden = 5;
    auto through_reparam = [reparam](std::function<void(PrefixReparam&, const Tensor&)> set, std::uint64_t s) {
        return [reparam, set, s](const Tensor& t) {
            auto live = std::make_shared<PrefixReparam>(*reparam);
            set(*live, t);
            PrefixParams p;
            p.length = 2;
            p.reparam = live;
            p.site = 1;
            auto [k, v] = prefix_reparam_forward(p);
            return add(weighted_sum(k, s), weighted_sum(v, s + 1));
        };
    };
    std::vector<Case> cases = {
        {"matmul_left", {3, 4}, [&](const Tensor& x) { return weighted_sum(matmul(x, W), 1); }, {}},
        {"matmul_right", {4, 3}, [&](const Tensor& x) { return weighted_sum(matmul(B, x), 2); }, {}},
        {"transpose", {3, 4}, [&](const Tensor& x) { return weighted_sum(transpose(x), 3); }, {}},
        {"add", {3, 4}, [&](const Tensor& x) { return weighted_sum(add(x, Rows), 4); }, {}},
        {"sub", {3, 4}, [&](const Tensor& x) { return weighted_sum(sub(Rows, x), 5); }, {}},
        {"mul", {3, 4}, [&](const Tensor& x) { return weighted_sum(mul(x, x), 6); }, {}},
        {"scale", {3, 4}, [&](const Tensor& x) { return weighted_sum(scale(x, -2.5), 7); }, {}},
        {"scale_by_factor", {}, [&](const Tensor& s) { return weighted_sum(scale_by(Rows, s), 8); }, {}},
        {"scale_by_tensor", {3, 4}, [&](const Tensor& x) { return weighted_sum(scale_by(x, Scal), 9); }, {}},
        {"add_scalar", {3, 4}, [&](const Tensor& x) { return weighted_sum(add_scalar(x, 0.3), 30); }, {}},
        {"add_row_bias", {4}, [&](const Tensor& b) { return weighted_sum(add_row(Rows, b), 10); }, {}},
        {"mul_rows_weights", {3}, [&](const Tensor& w) { return weighted_sum(mul_rows(Rows, w), 11); }, {}},
        {"mul_rows_input", {3, 4}, [&](const Tensor& x) { return weighted_sum(mul_rows(x, RowW), 12); }, {}},
        {"relu", {3, 4}, [&](const Tensor& x) { return weighted_sum(relu(x), 13); }, near_kink},
        {"tanh", {3, 4}, [&](const Tensor& x) { return weighted_sum(tanh(x), 14); }, {}},
        {"exp", {3, 4}, [&](const Tensor& x) { return weighted_sum(exp(x), 15); }, {}},
        {"softmax_rows", {3, 4}, [&](const Tensor& x) { return weighted_sum(softmax_rows(x), 16); }, {}},
        {"log_softmax_rows", {3, 4}, [&](const Tensor& x) { return weighted_sum(log_softmax_rows(x), 17); }, {}},
        {"logsumexp_rows", {3, 4}, [&](const Tensor& x) { return weighted_sum(logsumexp_rows(x), 18); }, {}},
        {"layer_norm_input", {3, 4}, [&](const Tensor& x) { return weighted_sum(layer_norm(x, G, Bias, 1e-5), 19); }, {}},
        {"layer_norm_gain", {4}, [&](const Tensor& g) { return weighted_sum(layer_norm(Rows, g, Bias, 1e-5), 20); }, {}},
        {"layer_norm_bias", {4}, [&](const Tensor& b) { return weighted_sum(layer_norm(Rows, G, b, 1e-5), 21); }, {}},
        {"concat_rows", {2, 4}, [&](const Tensor& x) { return weighted_sum(concat_rows(Rows, x), 22); }, {}},
        {"concat_cols", {3, 2}, [&](const Tensor& x) {
             const Tensor parts[] = {x, Rows, x};
             return weighted_sum(concat_cols(parts), 23);
         }, {}},
        {"slice_rows", {3, 4}, [&](const Tensor& x) { return weighted_sum(slice_rows(x, 1, 2), 24); }, {}},
        {"slice_cols", {3, 4}, [&](const Tensor& x) { return weighted_sum(slice_cols(x, 1, 2), 25); }, {}},
        {"gather_rows", {3, 4}, [&](const Tensor& x) { return weighted_sum(gather_rows(x, idx), 26); }, {}},
        {"sum", {3, 4}, [&](const Tensor& x) { return mul(sum(x), sum(x)); }, {}},
        {"mean", {3, 4}, [&](const Tensor& x) { return mul(mean(x), mean(x)); }, {}},
        {"dropout", {3, 4}, [&](const Tensor& x) { return weighted_sum(dropout(x, 0.3, 77), 27); }, {}},
        // transformer primitives
        {"attn", {3, d}, [&](const Tensor& x) { return weighted_sum(attn(x, C, C, 0.5), 40); }, {}},
        {"mha_cross", {3, d}, [&](const Tensor& x) { return weighted_sum(mha(C, x, aw, 2), 41); }, {}},
        {"mha_self_causal", {3, d}, [&](const Tensor& x) { return weighted_sum(mha(x, x, aw, 2, causal), 42); }, {}},
        {"ffn", {3, d}, [&](const Tensor& x) { return weighted_sum(ffn(x, fw), 43); },
         [&](const Tensor& x) { return near_kink(add_row(matmul(x, fw.W_1), fw.b_1)); }},
        // PEFT modules
        {"adapter_relu_down", {8, 3},
         [&](const Tensor& D) { return weighted_sum(adapter_delta(X, {D, Wu, {}}), 50); },
         [&](const Tensor& D) { return near_kink(matmul(X, D)); }},
        {"adapter_relu_up", {3, 8},
         [&](const Tensor& U) { return weighted_sum(adapter_delta(X, {Wd, U, {}}), 51); }, {}},
        {"adapter_relu_input", {5, 8},
         [&](const Tensor& x) { return weighted_sum(adapter_delta(x, {Wd, Wu, {}}), 52); },
         [&](const Tensor& x) { return near_kink(matmul(x, Wd)); }},
        {"adapter_linear_down", {8, 3},
         [&](const Tensor& D) {
             return weighted_sum(adapter_delta(X, {D, Wu, {}}, FunctionalForm::linear_bottleneck), 53);
         }, {}},
        {"lora_down", {8, 3},
         [&](const Tensor& D) { return weighted_sum(lora_delta(X, {D, Wu, 4.0, HookPoint::attn_query_proj, {}}), 54); },
         {}},
        {"lora_up", {3, 8},
         [&](const Tensor& U) { return weighted_sum(lora_delta(X, {Wd, U, 4.0, HookPoint::attn_query_proj, {}}), 55); },
         {}},
        {"learned_scale", {},
         [&](const Tensor& s) { return weighted_sum(lora_delta(X, {Wd, Wu, 1.0, HookPoint::attn_query_proj, s}), 56); },
         {}},
        {"mh_adapter_head0_down", {4, 2},
         [&](const Tensor& D) {
             MultiHeadAdapterParams p = mh;
             p.heads[0].W_down = D;
             auto parts = multihead_parallel_adapter_delta(X, p);
             return add(weighted_sum(parts[0], 57), weighted_sum(parts[1], 58));
         },
         [&](const Tensor& D) { return near_kink(matmul(slice_cols(X, 0, 4), D)); }},
        {"prefix_native_Pk", {2, 4},
         [&](const Tensor& pk) { return weighted_sum(prefix_head_native(Q, K, V, pk, Pv, hs), 60); }, {}},
        {"prefix_native_Pv", {2, 4},
         [&](const Tensor& pv) { return weighted_sum(prefix_head_native(Q, K, V, Pk, pv, hs), 61); }, {}},
        {"prefix_native_q", {3, 4},
         [&](const Tensor& q) { return weighted_sum(prefix_head_native(q, K, V, Pk, Pv, hs), 62); }, {}},
        {"prefix_gated_Pk", {2, 4},
         [&](const Tensor& pk) { return weighted_sum(prefix_head_equivalent(Hstd, Q, K, pk, Pv, hs), 63); }, {}},
        {"prefix_gated_Pv", {2, 4},
         [&](const Tensor& pv) { return weighted_sum(prefix_head_equivalent(Hstd, Q, K, Pk, pv, hs), 64); }, {}},
        {"prefix_ungated_Pk", {2, 4},
         [&](const Tensor& pk) {
             return weighted_sum(prefix_head_equivalent(Hstd, Q, K, pk, Pv, hs, {}, false), 65);
         }, {}},
        {"prefix_lambda_Pk", {2, 4},
         [&](const Tensor& pk) { return weighted_sum(prefix_head_lambda(Q, K, pk, hs), 66); }, {}},
        {"prefix_reparam_W_hidden", {3, 5}, through_reparam([](PrefixReparam& p, const Tensor& t) { p.W_hidden = t; }, 67),
         {}},
        {"prefix_reparam_embedding", {2, 3},
         through_reparam([](PrefixReparam& p, const Tensor& t) { p.embedding = t; }, 69), {}},
        {"prefix_reparam_W_out", {5, 16}, through_reparam([](PrefixReparam& p, const Tensor& t) { p.W_out = t; }, 71),
         {}},
    };

    double worst = 0.0;
    std::size_t short_cases = 0;
    std::string worst_name;
    for (const auto& c : cases) {
        Rng rng(mix_seed(seed, 1000));
        int checked = 0;
        for (int attempt = 0; checked < 10 && attempt < 200; ++attempt) {
            auto point = rng.normal_tensor(c.shape, 1.0);
            if (c.skip && c.skip(point)) continue;
            const double e = finite_diff_check(c.f, point, 1e-4);
            if (std::isnan(e) || e > worst) {
                worst = std::isnan(e) ? INFINITY : e;
                worst_name = c.name;
            }
            ++checked;
        }
        if (checked < 10) ++short_cases;
    }
    r.checks.push_back({"max relative gradient error over " + std::to_string(cases.size()) +
                            " functions x 10 points (worst: " + worst_name + ")",
                        worst, 1e-4});
    r.checks.push_back({"functions with fewer than 10 usable points", double(short_cases), 0.0});
    r.seconds = since(t0);
    return r;
}

SuiteResult verify_identity(std::uint64_t seed) {
    const auto t0 = Clock::now();
    SuiteResult r{"identity", {}, 0.0, 0.0};
    const ModelConfig cfg = small_config();
    const Tensor base = Transformer(cfg, 1).forward(kSrc, kTgt);

    // zero up-projections leave the model untouched
    const std::vector<std::pair<std::string, PeftPlan>> plans{
        {"adapter_seq", {make_method(Method::adapter_seq, Target::attn, 3), make_method(Method::adapter_seq, Target::ffn, 3)}},
        {"adapter_par", {make_method(Method::adapter_par, Target::attn, 3), make_method(Method::adapter_par, Target::ffn, 3)}},
        {"scaled_pa", {make_method(Method::scaled_pa, Target::attn, 3), make_method(Method::scaled_pa, Target::ffn, 3)}},
        {"mh_pa", {make_method(Method::mh_pa, Target::attn, 2)}},
        {"lora", {make_method(Method::lora, Target::attn, 4), make_method(Method::lora, Target::ffn, 2)}},
    };
    InitOptions zero;
    zero.zero_up = true;
    for (const auto& [name, plan] : plans) {
        Transformer m(cfg, 1);
        attach_plan(m, plan, mix_seed(seed, 99), zero);
        const double diff = m.attachment_count() == 0 ? INFINITY : exact_diff(m.forward(kSrc, kTgt), base);
        r.checks.push_back({"zero-init " + name + " vs base (bit difference)", diff, 0.0});
    }

    // LoRA merged into W_q / W_v
    {
        Transformer m(cfg, 4);
        auto att = instantiate(m, {make_method(Method::lora, Target::attn, 3)}, mix_seed(seed, 6));
        Rng rng(mix_seed(seed, 10));
        for (auto& a : att) {
            auto& p = std::get<LoraParams>(a.params);
            p.W_up = rng.normal_tensor(p.W_up.shape(), 0.3);
        }
        attach_modifications(m, att);
        const Tensor attached = m.forward(kSrc, kTgt);
        for (const auto& a : att) {
            const auto& p = std::get<LoraParams>(a.params);
            const auto& lw = m.layer(a.where.stack, a.where.layer);
            const AttentionWeights& w = a.where.sublayer == Sublayer::cross_attention ? *lw.cross_attn : lw.self_attn;
            Tensor Wt = p.target == HookPoint::attn_query_proj ? w.W_q : w.W_v;
            const Tensor update = scale(matmul(p.W_down, p.W_up), p.s);
            auto dst = Wt.mutable_data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += update[i];
        }
        m.detach_all();
        m.parameters().remove_group(ParamGroup::peft);
        r.checks.push_back({"LoRA merged vs attached, max abs", max_abs_diff(m.forward(kSrc, kTgt), attached), 1e-10});
    }

    // scaled_add with s = 1 is plain addition
    {
        MethodSpec scaled = make_method(Method::scaled_pa, Target::ffn, 3);
        scaled.scale = 1.0;
        Transformer a(cfg, 2), b(cfg, 2);
        auto att = instantiate(a, {scaled}, mix_seed(seed, 5));
        Rng rng(mix_seed(seed, 7));
        for (auto& x : att) {
            auto& p = std::get<AdapterParams>(x.params);
            p.W_up = rng.normal_tensor(p.W_up.shape(), 0.5);
        }
        auto plain = att;
        for (auto& x : plain) x.spec.composition = Composition{};
        attach_modifications(a, att);
        attach_modifications(b, plain);
        r.checks.push_back({"scaled_add(s=1) vs add (bit difference)", exact_diff(a.forward(kSrc, kTgt), b.forward(kSrc, kTgt)),
                            0.0});
    }

    // gating off: h + dh
    {
        Rng rng(mix_seed(seed, 8));
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor q = rng.normal_tensor({3, 4}, 1.0), k = rng.normal_tensor({5, 4}, 1.0),
                         v = rng.normal_tensor({5, 4}, 1.0), pk = rng.normal_tensor({2, 4}, 1.0),
                         pv = rng.normal_tensor({2, 4}, 1.0);
            const Tensor h = attn(q, k, v, 0.5);
            worst = std::max(worst, exact_diff(prefix_head_equivalent(h, q, k, pk, pv, 0.5, {}, false),
                                               add(h, attn(q, pk, pv, 0.5))));
        }
        r.checks.push_back({"gating-off prefix vs h + dh (bit difference)", worst, 0.0});
    }
    r.seconds = since(t0);
    return r;
}

SuiteResult verify_rank(std::uint64_t seed) {
    const auto t0 = Clock::now();
    SuiteResult r{"rank", {}, 0.0, 0.0};
    Rng rng(mix_seed(seed, 0x4a));
    const std::size_t n = 64, d = 32;
    auto tail_ratio = [](const Tensor& t, std::size_t rank) {
        Eigen::MatrixXd m(t.rows(), t.cols());
        for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
        const Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
        if (s.size() == 0 || s(0) == 0.0) return double(INFINITY);
        double tail = 0.0;
        for (Eigen::Index i = static_cast<Eigen::Index>(rank); i < s.size(); ++i) tail = std::max(tail, s(i));
        return tail / s(0);
    };
    for (std::size_t b : {1, 4, 8}) {
        const Tensor x = rng.normal_tensor({n, d}, 1.0);
        const AdapterParams ap{rng.normal_tensor({d, b}, 1.0), rng.normal_tensor({b, d}, 1.0), {}};
        const LoraParams lp{ap.W_down, ap.W_up, 4.0, HookPoint::attn_query_proj, {}};
        const Tensor q = rng.normal_tensor({n, d}, 1.0), pk = rng.normal_tensor({b, d}, 1.0),
                     pv = rng.normal_tensor({b, d}, 1.0);
        const std::string tag = "(r=" + std::to_string(b) + ")";
        r.checks.push_back({"relu adapter dh tail/top " + tag, tail_ratio(adapter_delta(x, ap), b), 1e-8});
        r.checks.push_back({"linear adapter dh tail/top " + tag,
                            tail_ratio(adapter_delta(x, ap, FunctionalForm::linear_bottleneck), b), 1e-8});
        r.checks.push_back({"lora dh tail/top " + tag, tail_ratio(lora_delta(x, lp), b), 1e-8});
        r.checks.push_back({"prefix dh tail/top (l=" + std::to_string(b) + ")",
                            tail_ratio(attn(q, pk, pv, 1.0 / std::sqrt(double(d))), b), 1e-8});
    }
    r.seconds = since(t0);
    return r;
}

const std::vector<std::string>& verify_suite_names() {
    static const std::vector<std::string> names{"equivalence", "lambda", "counts", "gradients", "identity", "rank"};
    return names;
}

SuiteResult run_verify_suite(const std::string& name, std::uint64_t seed) {
    if (name == "equivalence") return verify_equivalence(seed);
    if (name == "lambda") return verify_lambda(seed);
    if (name == "counts") return verify_counts();
    if (name == "gradients") return verify_gradients(seed);
    if (name == "identity") return verify_identity(seed);
    if (name == "rank") return verify_rank(seed);
    throw ConfigError("unknown verify suite '" + name + "'");
}

std::vector<SuiteResult> run_verify_suites(std::uint64_t seed) {
    std::vector<SuiteResult> out;
    for (const auto& n : verify_suite_names()) out.push_back(run_verify_suite(n, seed));
    return out;
}

std::string format_suite(const SuiteResult& r, bool verbose) {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s %-12s max_error=%.3e (%zu checks, %.2f s)", r.passed() ? "PASS" : "FAIL",
                  r.name.c_str(), r.max_error(), r.checks.size(), r.seconds);
    os << buf;
    if (r.time_limit > 0.0 && r.seconds > r.time_limit) os << " over time limit " << r.time_limit << " s";
    os << '\n';
    for (const auto& c : r.checks) {
        if (!verbose && c.passed()) continue;
        std::snprintf(buf, sizeof buf, "    %s %.3e <= %.1e  ", c.passed() ? "ok  " : "FAIL", c.value, c.tolerance);
        os << buf << c.name << '\n';
    }
    return os.str();
}

}  // namespace peftlab
