#include "peftlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "peftlab/random.hpp"

namespace peftlab {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("label_smoothing must be in [0, 1)");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ConfigError("warmup_fraction must be in [0, 1)");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step > cfg.total_steps) throw ContractError("lr_at: step beyond total_steps");
    const double total = static_cast<double>(cfg.total_steps);
    const double warmup = std::floor(cfg.warmup_fraction * total);
    const double s = static_cast<double>(step);
    if (s < warmup) return cfg.learning_rate * s / warmup;
    if (total <= warmup) return cfg.learning_rate;
    return cfg.learning_rate * (total - s) / (total - warmup);
}

AdamState make_adam(std::vector<std::string> names, std::vector<Tensor> params) {
    AdamState st;
    st.names = std::move(names);
    st.params = std::move(params);
    for (const auto& p : st.params) {
        st.m.emplace_back(p.size(), 0.0);
        st.v.emplace_back(p.size(), 0.0);
    }
    return st;
}

AdamState make_adam(const Transformer& model) {
    std::vector<std::string> names;
    std::vector<Tensor> params;
    for (const auto& p : model.parameters().all()) {
        if (!p.trainable) continue;
        if (!p.value.defined()) throw ContractError("cannot optimise an unmaterialized model");
        names.push_back(p.name);
        params.push_back(p.value);
    }
    return make_adam(std::move(names), std::move(params));
}

StepStats adam_step(AdamState& st, double lr, double max_grad_norm, double weight_decay) {
    StepStats stats;
    double sq = 0.0;
    for (std::size_t i = 0; i < st.params.size(); ++i) {
        const auto& g = st.params[i].node()->grad;
        for (double x : g) {
            if (!std::isfinite(x)) throw NumericalError("non-finite gradient in '" + st.names[i] + "'");
            sq += x * x;
        }
    }
    stats.grad_norm = std::sqrt(sq);
    if (max_grad_norm > 0.0 && stats.grad_norm > max_grad_norm) stats.clip_scale = max_grad_norm / stats.grad_norm;

    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < st.params.size(); ++i) {
        auto w = st.params[i].mutable_data();
        const auto& g = st.params[i].node()->grad;
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j] * stats.clip_scale;
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
            const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + st.eps);
            w[j] -= lr * update + lr * weight_decay * w[j];
        }
    }
    return stats;
}

Tensor smoothed_cross_entropy(const Tensor& logits, const std::vector<int>& targets, double smoothing, int ignore) {
    const std::size_t n = logits.rows(), V = logits.cols();
    if (targets.size() != n) {
        throw DimensionError("smoothed_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    }
    if (smoothing < 0.0 || smoothing >= 1.0) throw ContractError("label smoothing must be in [0, 1)");
    std::size_t counted = 0;
    for (int t : targets) {
        if (t == ignore) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= V) {
            throw ContractError("target id " + std::to_string(t) + " outside " + std::to_string(V) + " classes");
        }
        ++counted;
    }
    if (counted == 0) return Tensor::scalar(0.0);
    const double norm = 1.0 / static_cast<double>(counted);
    const double on = (V > 1 ? 1.0 - smoothing : 1.0) * norm;
    const double off = V > 1 ? smoothing / static_cast<double>(V - 1) * norm : 0.0;
    std::vector<double> weights(n * V, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] == ignore) continue;
        for (std::size_t j = 0; j < V; ++j) weights[i * V + j] = off;
        weights[i * V + static_cast<std::size_t>(targets[i])] = on;
    }
    Tensor w = Tensor::from({n, V}, std::move(weights));
    return scale(sum(mul(log_softmax_rows(logits), w)), -1.0);
}

void freeze_base(Transformer& model, const PeftPlan& plan) {
    const bool full = plan_has(plan, Method::full);
    const bool bitfit = plan_has(plan, Method::bitfit);
    auto& store = model.parameters();
    std::vector<std::pair<std::string, bool>> wanted;
    for (const auto& p : store.all()) {
        const bool on = full || p.group == ParamGroup::peft || (bitfit && p.is_bias);
        wanted.emplace_back(p.name, on);
    }
    for (const auto& [name, on] : wanted) store.set_trainable(name, on);
}

std::vector<TokenSeq> greedy_decode(const Transformer& model, const std::vector<TokenSeq>& src,
                                    const std::vector<std::size_t>& lengths) {
    if (lengths.size() != src.size()) throw ContractError("greedy_decode: one length per source");
    const std::size_t steps = lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
    Encoded memory = model.encode(src);
    std::vector<TokenSeq> prefix(src.size(), TokenSeq{kBos});
    const std::size_t V = model.config().vocab;
    for (std::size_t t = 0; t < steps; ++t) {
        Tensor logits = model.decode(memory, prefix);
        auto data = logits.data();
        for (std::size_t s = 0; s < src.size(); ++s) {
            const std::size_t row = s * (t + 1) + t;
            auto first = data.begin() + static_cast<std::ptrdiff_t>(row * V);
            prefix[s].push_back(static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(V)) - first));
        }
    }
    std::vector<TokenSeq> out;
    for (std::size_t s = 0; s < src.size(); ++s) out.emplace_back(prefix[s].begin() + 1, prefix[s].begin() + 1 + static_cast<std::ptrdiff_t>(lengths[s]));
    return out;
}

double evaluate(const Transformer& model, const std::vector<Example>& examples, bool classification,
                std::size_t limit, std::size_t batch_size) {
    const std::size_t n = limit ? std::min(limit, examples.size()) : examples.size();
    if (n == 0) return 0.0;
    std::size_t correct = 0, total = 0;
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const std::size_t end = std::min(n, begin + batch_size);
        std::vector<TokenSeq> src;
        std::vector<std::size_t> lengths;
        for (std::size_t i = begin; i < end; ++i) {
            src.push_back(examples[i].src);
            lengths.push_back(examples[i].tgt.size());
        }
        if (classification) {
            Tensor logits = model.classify(src);
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t r = i - begin;
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.cols(); ++c)
                    if (logits.at(r, c) > logits.at(r, best)) best = c;
                correct += static_cast<int>(best) == examples[i].label;
                ++total;
            }
        } else {
            auto out = greedy_decode(model, src, lengths);
            for (std::size_t i = begin; i < end; ++i) {
                const auto& tgt = examples[i].tgt;
                for (std::size_t j = 0; j < tgt.size(); ++j) correct += out[i - begin][j] == tgt[j];
                total += tgt.size();
            }
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

Tensor batch_loss(const Transformer& model, const std::vector<const Example*>& batch, bool classification,
                  double smoothing, const ForwardOptions& opts) {
    std::vector<TokenSeq> src;
    std::vector<int> targets;
    for (const auto* e : batch) src.push_back(e->src);
    if (classification) {
        for (const auto* e : batch) targets.push_back(e->label);
        return smoothed_cross_entropy(model.classify(src, opts), targets, smoothing);
    }
    std::vector<TokenSeq> tgt_in;
    for (const auto* e : batch) {
        tgt_in.push_back(decoder_input(e->tgt));
        targets.insert(targets.end(), e->tgt.begin(), e->tgt.end());
    }
    return smoothed_cross_entropy(model.forward(src, tgt_in, opts), targets, smoothing, kPad);
}

TrainResult train_loop(Transformer& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    const bool cls = data.spec.is_classification();
    TrainResult result;
    AdamState adam = make_adam(model);
    auto eval = [&] { return evaluate(model, data.dev, cls, cfg.eval_examples); };

    result.curve.push_back({0, std::nan(""), eval()});
    if (cfg.total_steps > 0 && adam.params.empty()) {
        result.failed = true;
        result.failure = "no trainable parameters";
        result.final_metric = result.curve.back().metric;
        return result;
    }

    Rng rng(mix_seed(cfg.seed, 0x7a11));
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;

    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        std::vector<const Example*> batch;
        while (batch.size() < cfg.batch_size) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
            }
            batch.push_back(&data.train[order[cursor++]]);
        }
        ForwardOptions opts;
        opts.dropout = cfg.dropout;
        opts.dropout_seed = mix_seed(cfg.seed, step);
        for (auto& p : adam.params) p.zero_grad();
        Tensor loss = batch_loss(model, batch, cls, cfg.label_smoothing, opts);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            result.failed = true;
            result.failure = "loss diverged at step " + std::to_string(step);
            break;
        }
        loss.backward();
        try {
            adam_step(adam, lr_at(step, cfg), cfg.max_grad_norm, cfg.weight_decay);
        } catch (const NumericalError& e) {
            result.failed = true;
            result.failure = std::string(e.what()) + " at step " + std::to_string(step);
            break;
        }
        result.steps = step + 1;
        loss_sum += value;
        ++loss_count;
        const bool last = step + 1 == cfg.total_steps;
        if (last || (cfg.eval_every && (step + 1) % cfg.eval_every == 0)) {
            result.curve.push_back({step + 1, loss_sum / static_cast<double>(loss_count), eval()});
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    for (auto& p : adam.params) p.zero_grad();
    result.final_metric = result.curve.back().metric;
    return result;
}

}  // namespace peftlab
