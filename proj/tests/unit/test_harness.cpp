#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "peftlab/accounting.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/experiment.hpp"
#include "peftlab/verify.hpp"

using namespace peftlab;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("peftlab_test_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

// Small, fast experiment: short copy task on a tiny model.
ExperimentSpec tiny_experiment() {
    ExperimentSpec e;
    e.task.vocab = 8;
    e.task.seq_len = 4;
    e.task.train_size = 64;
    e.task.dev_size = 16;
    e.task.test_size = 16;
    e.model.layers = 1;
    e.model.d_model = 16;
    e.model.heads = 2;
    e.model.d_ff = 32;
    e.train.total_steps = 6;
    e.train.batch_size = 8;
    e.train.eval_every = 3;
    MethodSpec m;
    m.method = Method::adapter_par;
    m.target = Target::ffn;
    m.bottleneck = 4;
    e.plan = {m};
    return e;
}

bool same_result(const RunRecord& a, const RunRecord& b) {
    if (a.config_hash != b.config_hash || a.label != b.label || a.seed != b.seed ||
        a.tunable_params != b.tunable_params || a.final_metric != b.final_metric || a.steps != b.steps ||
        a.status != b.status || a.curve.size() != b.curve.size())
        return false;
    for (std::size_t i = 0; i < a.curve.size(); ++i) {
        const bool loss_same = a.curve[i].loss == b.curve[i].loss ||
                               (std::isnan(a.curve[i].loss) && std::isnan(b.curve[i].loss));
        if (!loss_same || a.curve[i].metric != b.curve[i].metric || a.curve[i].step != b.curve[i].step) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("config file parsing") {
    auto cf = ConfigFile::parse("# comment\n a.b = 3 \n\nc = x, y ,z # trailing\nflag = true\nlist = add, scaled_add(trainable,4)\n");
    CHECK(cf.get_size("a.b", 0) == 3);
    CHECK(cf.get_list("c") == std::vector<std::string>{"x", "y", "z"});
    CHECK(cf.get_bool("flag", false));
    CHECK(cf.get_list("list") == std::vector<std::string>{"add", "scaled_add(trainable,4)"});
    CHECK(cf.get("missing", "fb") == "fb");
    CHECK_NOTHROW(cf.finish());

    auto unread = ConfigFile::parse("a = 1\ntypo.key = 2\n");
    unread.get_size("a", 0);
    CHECK_THROWS_WITH_AS(unread.finish(), doctest::Contains("unknown key 'typo.key'"), ConfigError);

    CHECK_THROWS_AS(ConfigFile::parse("no equals here\n"), ConfigError);
    CHECK_THROWS_AS(ConfigFile::parse("a = 1\na = 2\n"), ConfigError);
    CHECK_THROWS_AS(ConfigFile::parse("bad key = 1\n"), ConfigError);
    auto typed = ConfigFile::parse("n = 3x\nb = maybe\nd = 1e-3\n");
    CHECK_THROWS_AS(typed.get_size("n", 0), ConfigError);
    CHECK_THROWS_AS(typed.get_bool("b", false), ConfigError);
    CHECK(typed.get_double("d", 0.0) == 1e-3);
    CHECK_THROWS_AS(ConfigFile::load("/nonexistent/file.cfg"), ConfigError);
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("experiment spec from config") {
    auto cf = ConfigFile::parse(
        "task.kind = reverse\ntask.vocab = 12\nmodel.d_model = 16\nmodel.heads = 2\nmodel.d_ff = 32\n"
        "train.learning_rate = 0.005\ntrain.seed = 9\n"
        "peft.0.method = lora\npeft.0.target = attn\npeft.0.bottleneck = 4\n"
        "peft.1.method = adapter_par\npeft.1.bottleneck = 2\n");
    const ExperimentSpec e = experiment_from_config(cf);
    CHECK_NOTHROW(cf.finish());
    CHECK(e.task.kind == TaskKind::reverse);
    CHECK(e.resolved_model().vocab == 12);
    CHECK(e.train.learning_rate == 0.005);
    CHECK(e.train.seed == 9);
    REQUIRE(e.plan.size() == 2);
    CHECK(e.plan[0].method == Method::lora);
    CHECK(e.plan[1].target == Target::ffn);

    auto mam = ConfigFile::parse("model.preset = bart_large\npeft.0.method = mam\npeft.0.prefix_length = 30\n"
                                 "peft.0.bottleneck = 512\n");
    const ExperimentSpec me = experiment_from_config(mam);
    CHECK(count_total(me.model, me.plan).theta() == 27377664);

    auto custom = ConfigFile::parse("peft.0.method = custom\npeft.0.functional_form = linear_bottleneck\n"
                                    "peft.0.insertion_form = parallel\npeft.0.modified_representation = ffn_weight_1\n"
                                    "peft.0.composition = scaled_add(2)\npeft.0.bottleneck = 3\n");
    const ExperimentSpec ce = experiment_from_config(custom);
    CHECK(ce.plan[0].design.composition.scale == 2.0);

    CHECK_THROWS_AS(experiment_from_config(ConfigFile::parse("peft.0.method = nonsense\n")), ConfigError);
    CHECK_THROWS_AS(experiment_from_config(ConfigFile::parse("peft.x.method = lora\n")), ConfigError);
    CHECK_THROWS_AS(experiment_from_config(ConfigFile::parse("model.preset = gpt\n")), ConfigError);
    CHECK_THROWS_AS(experiment_from_config(ConfigFile::parse("train.learning_rate = -1\n")), ConfigError);
    CHECK_THROWS_AS(experiment_from_config(ConfigFile::parse(
                        "peft.0.method = custom\npeft.0.functional_form = softmax_bottleneck\n"
                        "peft.0.insertion_form = sequential\npeft.0.modified_representation = ffn_sublayer_output\n")),
                    ConfigError);
}

TEST_CASE("config hash ignores the run seed only") {
    ExperimentSpec a = tiny_experiment(), b = tiny_experiment();
    b.train.seed = 99;
    b.output = "elsewhere.csv";
    CHECK(a.config_hash() == b.config_hash());
    b.train.learning_rate = 0.02;
    CHECK(a.config_hash() != b.config_hash());
    ExperimentSpec c = tiny_experiment();
    c.plan[0].bottleneck = 5;
    CHECK(a.config_hash() != c.config_hash());
    CHECK(a.config_hash().size() == 16);
}

TEST_CASE("checkpoint round trip and freeze diff") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.d_model = 16;
    cfg.d_ff = 32;
    Transformer m(cfg, 3);
    MethodSpec lora;
    lora.method = Method::lora;
    lora.target = Target::attn;
    lora.bottleneck = 2;
    attach_plan(m, {lora}, 5);
    freeze_base(m, {lora});
    const std::string path = temp_path("ckpt.bin");
    save_checkpoint(m, path);
    const Checkpoint c = load_checkpoint(path);
    REQUIRE(c.entries.size() == m.parameters().all().size());
    CHECK(changed_tensors(m, c, false).empty());
    CHECK(c.find("embed.tokens") != nullptr);
    CHECK(c.find("embed.tokens")->trainable == false);

    // restore into a differently seeded twin reproduces outputs bit for bit
    Transformer twin(cfg, 4);
    attach_plan(twin, {lora}, 6);
    const std::vector<TokenSeq> src{{3, 4, 5}}, tgt{{1, 3, 4}};
    restore(twin, c);
    const Tensor a = m.forward(src, tgt), b = twin.forward(src, tgt);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    // a write to a frozen tensor shows up; trainable ones are ignored with frozen_only
    Tensor w = m.parameters().at("embed.tokens").value;
    w.mutable_data()[0] += 1.0;
    for (const auto& p : m.parameters().all())
        if (p.trainable) {
            Tensor t = p.value;
            t.mutable_data()[0] += 1.0;
            break;
        }
    CHECK(changed_tensors(m, c, true) == std::vector<std::string>{"embed.tokens"});
    CHECK(changed_tensors(m, c, false).size() == 2);

    Transformer other(cfg, 3);
    CHECK_THROWS_AS(restore(other, c), ConfigError);
    {
        std::ofstream bad(path, std::ios::binary);
        bad << "PEFTLAB-CKPT 1\n1\nx 1 4 0 base\ndata\nabc";
    }
    CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.bin")), ConfigError);
    std::remove(path.c_str());
}

TEST_CASE("run_experiment records audited counts") {
    const ExperimentSpec e = tiny_experiment();
    const RunRecord r = run_experiment(e);
    REQUIRE(r.ok());
    CHECK(r.tunable_params == count_total(e.resolved_model(), e.plan).tunable());
    CHECK(r.base_total == base_total(e.resolved_model()));
    CHECK(std::abs(r.rel_percent - 100.0 * double(r.tunable_params) / double(r.base_total)) <= 1e-9);
    CHECK(r.steps == 6);
    CHECK(r.curve.front().step == 0);
    CHECK(r.curve.back().step == 6);
    CHECK(r.designs.size() == 1);

    ExperimentSpec other = e;
    other.train.seed = 2;
    const RunRecord r2 = run_experiment(other);
    CHECK(r2.config_hash == r.config_hash);
    CHECK(r2.seed == 2);

    // full fine-tuning runs with no designs and everything trainable
    ExperimentSpec full = e;
    full.plan = {MethodSpec{}};
    full.plan[0].method = Method::full;
    const RunRecord rf = run_experiment(full);
    REQUIRE(rf.ok());
    CHECK(rf.designs.empty());
    CHECK(rf.tunable_params == rf.base_total);

    // failures become a status
    ExperimentSpec bad = e;
    bad.plan[0].method = Method::prefix;
    bad.plan[0].target = Target::ffn;
    const RunRecord rb = run_experiment(bad);
    CHECK_FALSE(rb.ok());
    CHECK(rb.status.rfind("failed: ", 0) == 0);
    ExperimentSpec empty = e;
    empty.plan.clear();
    CHECK_FALSE(run_experiment(empty).ok());
}

TEST_CASE("grids: structure, determinism and parallelism") {
    const ExperimentSpec base = tiny_experiment();
    GridSpec one;
    one.base = base;
    one.cells = {{plan_label(base.plan), base.plan}};
    one.seed = 3;
    const auto single = run_grid(one);
    REQUIRE(single.size() == 1);
    ExperimentSpec direct = base;
    direct.train.seed = cell_seed(3, 0);
    CHECK(same_result(single[0], run_experiment(direct)));

    GridSpec ins = prebuilt_grid("insertion", base, {2, 4});
    ins.seeds_per_cell = 2;
    ins.base.train.total_steps = 2;
    ins.base.train.eval_every = 0;
    ins.base.train.eval_examples = 4;
    CHECK(ins.cells.size() == 2 * 2 * 2);
    const auto serial = run_grid(ins);
    CHECK(serial.size() == 16);
    ins.workers = 3;
    std::size_t callbacks = 0;
    const auto parallel = run_grid(ins, [&](std::size_t, const RunRecord&) { ++callbacks; });
    CHECK(callbacks == 16);
    for (std::size_t i = 0; i < serial.size(); ++i) {
        CAPTURE(i);
        CHECK(serial[i].ok());
        CHECK(same_result(serial[i], parallel[i]));
    }
    // replicates of a cell share the hash and differ in seed
    CHECK(serial[0].config_hash == serial[1].config_hash);
    CHECK(serial[0].seed != serial[1].seed);
    CHECK(serial[0].config_hash != serial[2].config_hash);

    for (const auto& name : prebuilt_grid_names()) {
        CAPTURE(name);
        const GridSpec g = prebuilt_grid(name, base);
        CHECK(!g.cells.empty());
        CHECK(g.skipped == 0);
    }
    CHECK_THROWS_AS(prebuilt_grid("nope", base), ConfigError);
}

TEST_CASE("grid from config") {
    auto cf = ConfigFile::parse(
        "model.d_model = 16\nmodel.heads = 2\nmodel.d_ff = 32\n"
        "grid.preset = methods\ngrid.methods = prefix, lora, full\ngrid.targets = attn, ffn\n"
        "grid.bottlenecks = 2\ngrid.seeds = 2\ngrid.seed = 5\ngrid.workers = 2\n");
    const GridSpec g = grid_from_config(cf);
    CHECK_NOTHROW(cf.finish());
    // prefix-ffn is dropped; full appears once
    CHECK(g.cells.size() == 4);
    CHECK(g.skipped == 1);
    CHECK(g.size() == 8);
    CHECK(g.workers == 2);

    auto design = ConfigFile::parse(
        "grid.preset = design\ngrid.functional_forms = relu_bottleneck, softmax_bottleneck\n"
        "grid.insertion_forms = sequential, parallel\n"
        "grid.representations = head_attn_output, attn_sublayer_output, ffn_sublayer_output\n");
    const GridSpec dg = grid_from_config(design);
    CHECK(dg.cells.size() + dg.skipped == 12);
    for (const auto& c : dg.cells) CHECK_NOTHROW(c.plan[0].design.validate());

    CHECK_THROWS_AS(grid_from_config(ConfigFile::parse("grid.preset = methods\n")), ConfigError);
    CHECK_THROWS_AS(grid_from_config(ConfigFile::parse("grid.preset = insertion\npeft.0.method = lora\n")),
                    ConfigError);
    CHECK_THROWS_AS(grid_from_config(ConfigFile::parse("grid.preset = insertion\ngrid.seeds = 0\n")), ConfigError);
}

TEST_CASE("csv emission") {
    const std::string path = temp_path("out.csv");
    emit_csv({}, path);
    CHECK(slurp(path) == csv_header() + "\n");

    RunRecord a;
    a.config_hash = "0123456789abcdef";
    a.label = "lora-attn(r=4,s=4)";
    DesignSpec d;
    d.functional_form = FunctionalForm::linear_bottleneck;
    d.composition = Composition{CompositionKind::scaled_add, 4.0, false};
    d.modified_representation = HookPoint::attn_query_proj;
    d.bottleneck = 4;
    a.designs = {d, d};
    a.seed = 7;
    a.tunable_params = 1024;
    a.rel_percent = 1.25;
    a.final_metric = 0.5;
    a.steps = 10;
    a.wall_seconds = 1.5;
    RunRecord b = a;
    b.status = "failed: bad, \"quoted\"";
    b.designs.clear();
    b.label = "full";
    emit_csv({a, b}, path);
    const std::string text = slurp(path);
    CHECK(count_lines(text) == 3);
    CHECK(text.find("0123456789abcdef,\"lora-attn(r=4,s=4)\",linear_bottleneck+linear_bottleneck,parallel+parallel,"
                    "attn_query_proj+attn_query_proj,scaled_add(4)+scaled_add(4),4+4,7,1024,1.25,0.500000,10,1.500,ok\n") !=
          std::string::npos);
    CHECK(text.find(",-,-,-,-,-,7,") != std::string::npos);
    CHECK(text.find("\"failed: bad, \"\"quoted\"\"\"") != std::string::npos);
    emit_csv({a, b}, path);
    CHECK(slurp(path) == text);
    CHECK_THROWS_AS(emit_csv({}, "/nonexistent/dir/x.csv"), ConfigError);
    std::remove(path.c_str());
}

TEST_CASE("verify suites pass") {
    for (const auto& r : run_verify_suites()) {
        CAPTURE(format_suite(r, true));
        CHECK(r.passed());
    }
    CHECK_THROWS_AS(run_verify_suite("nope"), ConfigError);
    SuiteResult empty;
    CHECK_FALSE(empty.passed());
    SuiteResult failing{"x", {{"err", 2e-6, 1e-6}}, 0.0, 0.0};
    CHECK_FALSE(failing.passed());
    CHECK(failing.max_error() == 2e-6);
}
