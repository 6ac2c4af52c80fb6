#include "peftlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "peftlab/accounting.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/random.hpp"

namespace peftlab {

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string method_canonical(const MethodSpec& m) {
    std::ostringstream os;
    os << to_string(m.method) << '|' << to_string(m.target) << '|' << m.bottleneck << '|' << num(m.scale) << '|'
       << m.trainable_scale << '|' << m.gating << '|' << to_string(m.form) << '|' << m.prefix_reparam << '|'
       << m.reparam_embed << '|' << m.reparam_hidden;
    if (m.method == Method::custom) os << '|' << m.design.str();
    return os.str();
}

ModelConfig model_preset(const std::string& name) {
    if (name == "desk") return ModelConfig::desk();
    if (name == "bart_large") return ModelConfig::bart_large();
    if (name == "roberta_base") return ModelConfig::roberta_base();
    throw ConfigError("unknown model preset '" + name + "' (desk, bart_large, roberta_base)");
}

std::vector<std::size_t> parse_sizes(const ConfigFile& cf, const std::string& key) {
    std::vector<std::size_t> out;
    for (const auto& s : cf.get_list(key)) {
        std::size_t v = 0;
        try {
            std::size_t used = 0;
            v = std::stoull(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            throw ConfigError(cf.source() + ": '" + key + "' expects integers, got '" + s + "'");
        }
        out.push_back(v);
    }
    return out;
}

MethodSpec make_method(Method m, Target t, std::size_t b) {
    MethodSpec s;
    s.method = m;
    s.target = t;
    s.bottleneck = b;
    return s;
}

/// True when every design of the plan is implementable.
bool plan_valid(const PeftPlan& plan) {
    try {
        for (const auto& m : plan)
            for (const auto& d : designs_for(m)) d.validate();
        return true;
    } catch (const std::exception&) {
        return false;
    }
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + '"';
}

template <class F>
std::string join_designs(const RunRecord& r, F f) {
    if (r.designs.empty()) return "-";
    std::string out;
    for (std::size_t i = 0; i < r.designs.size(); ++i) out += (i ? "+" : "") + f(r.designs[i]);
    return out;
}

}  // namespace

std::string ExperimentSpec::canonical() const {
    const ModelConfig m = resolved_model();
    std::ostringstream os;
    os << "task=" << to_string(task.kind) << ',' << task.vocab << ',' << task.seq_len << ',' << task.train_size << ','
       << task.dev_size << ',' << task.test_size << ',' << task.seed << ';';
    os << "model=" << to_string(m.arch) << ',' << m.layers << ',' << m.d_model << ',' << m.heads << ',' << m.d_ff
       << ',' << m.vocab << ',' << m.num_classes << ',' << m.learned_positions << ',' << m.tie_embeddings << ','
       << num(m.ln_eps) << ',' << model_seed << ';';
    os << "train=" << num(train.learning_rate) << ',' << train.batch_size << ',' << num(train.label_smoothing) << ','
       << num(train.max_grad_norm) << ',' << num(train.weight_decay) << ',' << train.total_steps << ','
       << num(train.warmup_fraction) << ',' << num(train.dropout) << ',' << train.eval_every << ','
       << train.eval_examples << ';';
    os << "init=" << init.zero_up << ',' << num(init.adapter_std) << ',' << num(init.prefix_std) << ','
       << num(init.prompt_std) << ';';
    os << "plan=";
    for (const auto& p : plan) os << method_canonical(p) << ';';
    return os.str();
}

PeftPlan plan_from_config(const ConfigFile& cf, const ModelConfig& model) {
    std::set<std::size_t> indices;
    for (const auto& k : cf.keys_with_prefix("peft.")) {
        const auto rest = k.substr(5);
        const auto dot = rest.find('.');
        std::size_t idx = 0;
        try {
            std::size_t used = 0;
            idx = std::stoull(rest.substr(0, dot), &used);
            if (used != dot) throw std::invalid_argument(k);
        } catch (const std::exception&) {
            throw ConfigError(cf.source() + ": PEFT keys look like peft.<index>.<field>, got '" + k + "'");
        }
        indices.insert(idx);
    }
    PeftPlan plan;
    for (std::size_t i : indices) {
        const std::string p = "peft." + std::to_string(i) + ".";
        const std::string method = cf.require(p + "method");
        if (method == "mam") {
            const auto l = cf.get_size(p + "prefix_length", 30);
            const auto r = cf.get_size(p + "bottleneck", 0);
            const auto s = cf.get_double(p + "scale", 4.0);
            for (auto& m : build_mam(model, l, r, s)) plan.push_back(m);
            continue;
        }
        MethodSpec m;
        m.method = parse_method(method);
        m.target = parse_target(cf.get(p + "target", m.method == Method::prefix || m.method == Method::mh_pa ||
                                                             m.method == Method::prompt
                                                         ? "attn"
                                                         : "ffn"));
        m.bottleneck = cf.get_size(p + "bottleneck", m.bottleneck);
        m.scale = cf.get_double(p + "scale", m.scale);
        m.trainable_scale = cf.get_bool(p + "trainable_scale", m.trainable_scale);
        m.gating = cf.get_bool(p + "gating", m.gating);
        m.form = parse_functional_form(cf.get(p + "functional_form", to_string(m.form)));
        m.prefix_reparam = cf.get_bool(p + "prefix_reparam", m.prefix_reparam);
        m.reparam_embed = cf.get_size(p + "reparam_embed", m.reparam_embed);
        m.reparam_hidden = cf.get_size(p + "reparam_hidden", m.reparam_hidden);
        if (m.method == Method::custom) {
            m.design.functional_form = m.form;
            m.design.insertion_form = parse_insertion_form(cf.require(p + "insertion_form"));
            m.design.modified_representation = parse_hook_point(cf.require(p + "modified_representation"));
            m.design.composition = parse_composition(cf.get(p + "composition", "add"));
            m.design.bottleneck = m.bottleneck;
            m.design.validate();
        }
        plan.push_back(m);
    }
    return plan;
}

ExperimentSpec experiment_from_config(const ConfigFile& cf) {
    ExperimentSpec e;
    e.name = cf.get("run.name", e.name);
    e.output = cf.get("run.output", "");
    e.checkpoint = cf.get("run.checkpoint", "");

    TaskSpec& t = e.task;
    t.kind = parse_task_kind(cf.get("task.kind", to_string(t.kind)));
    t.vocab = cf.get_size("task.vocab", t.vocab);
    t.seq_len = cf.get_size("task.seq_len", t.seq_len);
    t.train_size = cf.get_size("task.train_size", t.train_size);
    t.dev_size = cf.get_size("task.dev_size", t.dev_size);
    t.test_size = cf.get_size("task.test_size", t.test_size);
    t.seed = cf.get_u64("task.seed", t.seed);
    t.validate();

    ModelConfig& m = e.model;
    m = model_preset(cf.get("model.preset", "desk"));
    m.arch = parse_architecture(cf.get("model.arch", to_string(m.arch)));
    m.layers = cf.get_size("model.layers", m.layers);
    m.d_model = cf.get_size("model.d_model", m.d_model);
    m.heads = cf.get_size("model.heads", m.heads);
    m.d_ff = cf.get_size("model.d_ff", m.d_ff);
    m.vocab = cf.get_size("model.vocab", m.vocab);
    m.num_classes = cf.get_size("model.num_classes", m.num_classes);
    m.learned_positions = cf.get_size("model.learned_positions", m.learned_positions);
    m.tie_embeddings = cf.get_bool("model.tie_embeddings", m.tie_embeddings);
    m.validate();
    e.model_seed = cf.get_u64("model.seed", e.model_seed);

    TrainConfig& tr = e.train;
    tr.learning_rate = cf.get_double("train.learning_rate", tr.learning_rate);
    tr.batch_size = cf.get_size("train.batch_size", tr.batch_size);
    tr.label_smoothing = cf.get_double("train.label_smoothing", tr.label_smoothing);
    tr.max_grad_norm = cf.get_double("train.max_grad_norm", tr.max_grad_norm);
    tr.weight_decay = cf.get_double("train.weight_decay", tr.weight_decay);
    tr.total_steps = cf.get_size("train.total_steps", tr.total_steps);
    tr.warmup_fraction = cf.get_double("train.warmup_fraction", tr.warmup_fraction);
    tr.dropout = cf.get_double("train.dropout", tr.dropout);
    tr.eval_every = cf.get_size("train.eval_every", tr.eval_every);
    tr.eval_examples = cf.get_size("train.eval_examples", tr.eval_examples);
    tr.seed = cf.get_u64("train.seed", tr.seed);
    tr.validate();

    InitOptions& in = e.init;
    in.zero_up = cf.get_bool("init.zero_up", in.zero_up);
    in.adapter_std = cf.get_double("init.adapter_std", in.adapter_std);
    in.prefix_std = cf.get_double("init.prefix_std", in.prefix_std);
    in.prompt_std = cf.get_double("init.prompt_std", in.prompt_std);

    e.plan = plan_from_config(cf, m);
    return e;
}

std::string plan_label(const PeftPlan& plan) {
    if (plan.empty()) return "none";
    std::string out;
    for (std::size_t i = 0; i < plan.size(); ++i) out += (i ? "+" : "") + plan[i].label();
    return out;
}

RunRecord run_experiment(const ExperimentSpec& spec, std::unique_ptr<Transformer>* model_out) {
    RunRecord r;
    r.seed = spec.train.seed;
    r.plan = spec.plan;
    r.label = plan_label(spec.plan);
    const auto t0 = std::chrono::steady_clock::now();
    try {
        r.config_hash = spec.config_hash();
        for (const auto& m : spec.plan)
            for (const auto& d : designs_for(m)) r.designs.push_back(d);
        if (spec.plan.empty()) throw ConfigError("no PEFT method configured (use method = full for fine-tuning)");

        const ModelConfig cfg = spec.resolved_model();
        const Dataset data = gen_task(spec.task);
        auto model = std::make_unique<Transformer>(cfg, spec.model_seed);
        attach_plan(*model, spec.plan, spec.train.seed, spec.init);
        freeze_base(*model, spec.plan);

        r.tunable_params = audit_trainable(*model);
        r.base_total = base_total(*model);
        r.rel_percent = relative_percentage(r.tunable_params, r.base_total);
        const std::size_t expected = count_total(cfg, spec.plan).tunable();
        if (expected != r.tunable_params)
            throw ContractError("audited " + std::to_string(r.tunable_params) + " trainable parameters, accounting says " +
                                std::to_string(expected));

        const TrainResult tr = train_loop(*model, data, spec.train);
        r.curve = tr.curve;
        r.final_metric = tr.final_metric;
        r.steps = tr.steps;
        if (tr.failed) r.status = "failed: " + tr.failure;
        if (r.ok() && !spec.checkpoint.empty()) save_checkpoint(*model, spec.checkpoint);
        if (model_out) *model_out = std::move(model);
    } catch (const std::exception& ex) {
        r.status = std::string("failed: ") + ex.what();
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

RunRecord run_experiment(const ModelConfig& model, const PeftPlan& plan, const TaskSpec& task,
                         const TrainConfig& train, std::uint64_t model_seed) {
    ExperimentSpec e;
    e.model = model;
    e.plan = plan;
    e.task = task;
    e.train = train;
    e.model_seed = model_seed;
    return run_experiment(e);
}

std::uint64_t cell_seed(std::uint64_t grid_seed, std::size_t index) { return mix_seed(grid_seed, index); }

std::vector<RunRecord> run_grid(const GridSpec& grid, const std::function<void(std::size_t, const RunRecord&)>& on_done) {
    const std::size_t total = grid.size();
    std::vector<RunRecord> records(total);
    std::atomic<std::size_t> next{0};
    std::mutex sink;
    auto work = [&] {
        for (std::size_t i = next++; i < total; i = next++) {
            ExperimentSpec e = grid.base;
            e.plan = grid.cells[i / grid.seeds_per_cell].plan;
            e.train.seed = cell_seed(grid.seed, i);
            e.checkpoint.clear();
            RunRecord r = run_experiment(e);
            std::lock_guard<std::mutex> lock(sink);
            records[i] = std::move(r);
            if (on_done) on_done(i, records[i]);
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(grid.workers, 1, std::max<std::size_t>(total, 1));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return records;
}

const std::vector<std::string>& prebuilt_grid_names() {
    static const std::vector<std::string> names{"insertion", "representation", "composition", "budget",
                                                "combination"};
    return names;
}

GridSpec prebuilt_grid(const std::string& name, const ExperimentSpec& base, std::vector<std::size_t> bottlenecks) {
    GridSpec g;
    g.name = name;
    g.base = base;
    auto add = [&g](PeftPlan plan) {
        if (!plan_valid(plan)) {
            ++g.skipped;
            return;
        }
        g.cells.push_back({plan_label(plan), std::move(plan)});
    };
    if (name == "insertion") {
        // sequential vs parallel adapters at each sublayer kind
        if (bottlenecks.empty()) bottlenecks = {4, 16};
        for (auto b : bottlenecks)
            for (Method m : {Method::adapter_seq, Method::adapter_par})
                for (Target t : {Target::attn, Target::ffn}) add({make_method(m, t, b)});
    } else if (name == "representation") {
        // attention vs FFN modification for each method that can do both
        if (bottlenecks.empty()) bottlenecks = {4, 16};
        for (auto b : bottlenecks) {
            add({make_method(Method::prefix, Target::attn, b)});
            for (Method m : {Method::adapter_par, Method::lora})
                for (Target t : {Target::attn, Target::ffn}) add({make_method(m, t, b)});
        }
    } else if (name == "composition") {
        // gated vs plain vs scaled composition
        if (bottlenecks.empty()) bottlenecks = {8};
        for (auto b : bottlenecks) {
            MethodSpec gated = make_method(Method::prefix, Target::attn, b);
            MethodSpec ungated = gated;
            ungated.gating = false;
            add({gated});
            add({ungated});
            add({make_method(Method::adapter_par, Target::ffn, b)});
            add({make_method(Method::scaled_pa, Target::ffn, b)});
            MethodSpec learned = make_method(Method::scaled_pa, Target::ffn, b);
            learned.trainable_scale = true;
            add({learned});
            add({make_method(Method::lora, Target::ffn, b)});
        }
    } else if (name == "budget") {
        // small-bottleneck attention methods
        if (bottlenecks.empty()) bottlenecks = {1, 2};
        for (auto b : bottlenecks)
            for (Method m : {Method::prefix, Method::mh_pa, Method::adapter_par, Method::lora})
                add({make_method(m, Target::attn, b)});
    } else if (name == "combination") {
        // single methods and their attention + FFN combinations
        if (bottlenecks.empty()) bottlenecks = {8};
        for (auto b : bottlenecks) {
            add({make_method(Method::prefix, Target::attn, b)});
            add({make_method(Method::scaled_pa, Target::ffn, b)});
            add({make_method(Method::prefix, Target::attn, b), make_method(Method::adapter_par, Target::ffn, b)});
            add({make_method(Method::mh_pa, Target::attn, b), make_method(Method::scaled_pa, Target::ffn, b)});
            add(build_mam(base.resolved_model(), b, b));
        }
    } else {
        throw ConfigError("unknown grid '" + name + "'");
    }
    return g;
}

GridSpec grid_from_config(const ConfigFile& cf) {
    const ExperimentSpec base = experiment_from_config(cf);
    if (!base.plan.empty()) throw ConfigError(cf.source() + ": a grid file sets grid.* axes, not peft.N.* entries");
    const std::string preset = cf.require("grid.preset");
    const std::vector<std::size_t> bottlenecks = parse_sizes(cf, "grid.bottlenecks");
    GridSpec g;
    if (preset == "methods") {
        g.base = base;
        const auto methods = cf.get_list("grid.methods");
        if (methods.empty()) throw ConfigError(cf.source() + ": grid.methods is required for preset 'methods'");
        auto targets = cf.get_list("grid.targets");
        if (targets.empty()) targets = {"attn", "ffn"};
        const auto bs = bottlenecks.empty() ? std::vector<std::size_t>{8} : bottlenecks;
        std::set<std::string> seen;
        for (auto b : bs)
            for (const auto& ms : methods)
                for (const auto& ts : targets) {
                    PeftPlan plan{make_method(parse_method(ms), parse_target(ts), b)};
                    if (!plan_valid(plan)) {
                        ++g.skipped;
                        continue;
                    }
                    const std::string label = plan_label(plan);
                    if (seen.insert(label).second) g.cells.push_back({label, plan});
                }
    } else if (preset == "design") {
        g.base = base;
        auto forms = cf.get_list("grid.functional_forms");
        auto inserts = cf.get_list("grid.insertion_forms");
        auto reps = cf.get_list("grid.representations");
        auto comps = cf.get_list("grid.compositions");
        if (forms.empty()) forms = {"relu_bottleneck"};
        if (inserts.empty()) inserts = {"sequential", "parallel"};
        if (reps.empty()) reps = {"attn_sublayer_output", "ffn_sublayer_output"};
        if (comps.empty()) comps = {"add"};
        const auto bs = bottlenecks.empty() ? std::vector<std::size_t>{8} : bottlenecks;
        for (auto b : bs)
            for (const auto& f : forms)
                for (const auto& i : inserts)
                    for (const auto& rp : reps)
                        for (const auto& c : comps) {
                            MethodSpec m;
                            m.method = Method::custom;
                            m.bottleneck = b;
                            m.design.functional_form = parse_functional_form(f);
                            m.form = m.design.functional_form;
                            m.design.insertion_form = parse_insertion_form(i);
                            m.design.modified_representation = parse_hook_point(rp);
                            m.design.composition = parse_composition(c);
                            m.design.bottleneck = b;
                            m.target = is_ffn_hook(m.design.modified_representation) ? Target::ffn : Target::attn;
                            PeftPlan plan{m};
                            if (!plan_valid(plan)) {
                                ++g.skipped;
                                continue;
                            }
                            g.cells.push_back({plan_label(plan), plan});
                        }
    } else {
        g = prebuilt_grid(preset, base, bottlenecks);
    }
    g.name = cf.get("grid.name", preset);
    g.seeds_per_cell = cf.get_size("grid.seeds", 1);
    g.seed = cf.get_u64("grid.seed", 1);
    g.workers = cf.get_size("grid.workers", 1);
    if (g.seeds_per_cell == 0) throw ConfigError(cf.source() + ": grid.seeds must be at least 1");
    if (g.cells.empty()) throw ConfigError(cf.source() + ": grid expands to no valid cells");
    return g;
}

std::string csv_header() {
    return "config_hash,method,functional_form,insertion_form,modified_representation,composition,bottleneck,seed,"
           "tunable_params,rel_percent,final_metric,steps,wall_seconds,status";
}

std::string csv_text(const std::vector<RunRecord>& records) {
    std::string out = csv_header() + "\n";
    char buf[64];
    for (const auto& r : records) {
        std::vector<std::string> f;
        f.push_back(r.config_hash);
        f.push_back(r.label);
        f.push_back(join_designs(r, [](const DesignSpec& d) { return to_string(d.functional_form); }));
        f.push_back(join_designs(r, [](const DesignSpec& d) { return to_string(d.insertion_form); }));
        f.push_back(join_designs(r, [](const DesignSpec& d) { return to_string(d.modified_representation); }));
        f.push_back(join_designs(r, [](const DesignSpec& d) { return to_string(d.composition); }));
        std::string bneck;
        if (!r.designs.empty()) {
            bneck = join_designs(r, [](const DesignSpec& d) { return std::to_string(d.bottleneck); });
        } else {
            for (const auto& m : r.plan)
                if (m.method == Method::prompt) bneck += (bneck.empty() ? "" : "+") + std::to_string(m.bottleneck);
            if (bneck.empty()) bneck = "-";
        }
        f.push_back(bneck);
        f.push_back(std::to_string(r.seed));
        f.push_back(std::to_string(r.tunable_params));
        std::snprintf(buf, sizeof buf, "%.12g", r.rel_percent);
        f.push_back(buf);
        std::snprintf(buf, sizeof buf, "%.6f", r.final_metric);
        f.push_back(buf);
        f.push_back(std::to_string(r.steps));
        std::snprintf(buf, sizeof buf, "%.3f", r.wall_seconds);
        f.push_back(buf);
        f.push_back(r.status);
        for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + csv_field(f[i]);
        out += '\n';
    }
    return out;
}

void emit_csv(const std::vector<RunRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write CSV '" + path + "'");
    out << csv_text(records);
    if (!out) throw ConfigError("failed writing CSV '" + path + "'");
}

}  // namespace peftlab
