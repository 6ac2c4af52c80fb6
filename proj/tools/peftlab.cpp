// peftlab: command-line front end for training runs, grids, parameter
// budgets, oracle suites and checkpoint evaluation.

#include <cstdio>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "peftlab/accounting.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/experiment.hpp"
#include "peftlab/verify.hpp"

using namespace peftlab;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

// Invalid invocations (bad flags, unreadable or invalid config files).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ConfigFile load_config(const std::string& path) {
    try {
        return ConfigFile::load(path);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

template <class F>
auto as_usage(F f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

void print_curve(const RunRecord& r) {
    std::printf("%8s %10s %10s\n", "step", "loss", "metric");
    for (const auto& p : r.curve) std::printf("%8zu %10.4f %10.4f\n", p.step, p.loss, p.metric);
}

void print_record(const RunRecord& r) {
    std::printf("run        %s\n", r.label.c_str());
    std::printf("config     %s  seed %llu\n", r.config_hash.c_str(), static_cast<unsigned long long>(r.seed));
    std::printf("tunable    %zu of %zu base (%.4f%%)\n", r.tunable_params, r.base_total, r.rel_percent);
    std::printf("final      %.4f after %zu steps, %.1f s\n", r.final_metric, r.steps, r.wall_seconds);
    std::printf("status     %s\n", r.status.c_str());
}

struct TrainArgs {
    std::string config, csv, checkpoint;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    bool seed_set = false, quiet = false;
};

int cmd_train(const TrainArgs& a) {
    const ConfigFile cf = load_config(a.config);
    ExperimentSpec e = as_usage([&] {
        auto spec = experiment_from_config(cf);
        cf.finish();
        return spec;
    });
    if (a.seed_set) e.train.seed = a.seed;
    if (a.steps) e.train.total_steps = a.steps;
    if (!a.checkpoint.empty()) e.checkpoint = a.checkpoint;
    const std::string csv = a.csv.empty() ? e.output : a.csv;
    const RunRecord r = run_experiment(e);
    if (!a.quiet) print_curve(r);
    print_record(r);
    if (!csv.empty()) emit_csv({r}, csv);
    if (r.ok() && !e.checkpoint.empty()) std::printf("checkpoint %s\n", e.checkpoint.c_str());
    return r.ok() ? kOk : kFailure;
}

struct GridArgs {
    std::string config, csv;
    std::size_t workers = 0, steps = 0;
    bool quiet = false;
};

int cmd_grid(const GridArgs& a) {
    const ConfigFile cf = load_config(a.config);
    GridSpec g = as_usage([&] {
        auto spec = grid_from_config(cf);
        cf.finish();
        return spec;
    });
    if (a.workers) g.workers = a.workers;
    if (a.steps) g.base.train.total_steps = a.steps;
    const std::string csv = a.csv.empty() ? g.base.output : a.csv;
    std::fprintf(stderr, "grid %s: %zu cells x %zu seeds on %zu workers (%zu invalid combinations skipped)\n",
                 g.name.c_str(), g.cells.size(), g.seeds_per_cell, g.workers, g.skipped);
    const auto records = run_grid(g, [&](std::size_t i, const RunRecord& r) {
        if (!a.quiet)
            std::fprintf(stderr, "[%zu/%zu] %-40s seed %-20llu metric %.4f  %s\n", i + 1, g.size(), r.label.c_str(),
                         static_cast<unsigned long long>(r.seed), r.final_metric, r.status.c_str());
    });
    if (csv.empty() || csv == "-") {
        std::fputs(csv_text(records).c_str(), stdout);
    } else {
        emit_csv(records, csv);
        std::fprintf(stderr, "wrote %zu rows to %s\n", records.size(), csv.c_str());
    }
    std::size_t failed = 0;
    for (const auto& r : records) failed += !r.ok();
    if (failed) std::fprintf(stderr, "%zu of %zu runs failed\n", failed, records.size());
    return failed ? kFailure : kOk;
}

struct CountArgs {
    std::string config;
    bool csv = false;
};

int cmd_count(const CountArgs& a) {
    const ConfigFile cf = load_config(a.config);
    const ExperimentSpec e = as_usage([&] {
        auto spec = experiment_from_config(cf);
        cf.finish();
        return spec;
    });
    // the model as configured; task settings do not reshape it here
    BudgetReport report = as_usage([&] { return count_total(e.model, e.plan); });
    Transformer meta(e.model, e.model_seed, false);
    attach_plan(meta, e.plan, e.train.seed);
    freeze_base(meta, e.plan);
    const std::size_t audited = audit_trainable(meta);
    if (a.csv) {
        std::printf("%s\n%s\n", report_csv_header().c_str(), report_csv_row(report).c_str());
    } else {
        std::fputs(format_report(report).c_str(), stdout);
        std::printf("%-22s%s\n", "audit", audited == report.tunable() ? "matches" : "MISMATCH");
    }
    if (audited != report.tunable()) {
        std::fprintf(stderr, "audited %zu trainable parameters, closed form gives %zu\n", audited, report.tunable());
        return kFailure;
    }
    return kOk;
}

struct VerifyArgs {
    std::vector<std::string> suites;
    std::uint64_t seed = 1;
    bool verbose = false;
};

int cmd_verify(const VerifyArgs& a) {
    const auto names = a.suites.empty() ? verify_suite_names() : a.suites;
    bool all = true;
    for (const auto& n : names) {
        const SuiteResult r = as_usage([&] { return run_verify_suite(n, a.seed); });
        std::fputs(format_suite(r, a.verbose).c_str(), stdout);
        std::fflush(stdout);
        all = all && r.passed();
    }
    std::printf("%s: %zu suites\n", all ? "all suites passed" : "FAILED", names.size());
    return all ? kOk : kFailure;
}

struct EvalArgs {
    std::string config, checkpoint, split = "test";
    std::size_t limit = 0;
};

int cmd_eval(const EvalArgs& a) {
    const ConfigFile cf = load_config(a.config);
    const ExperimentSpec e = as_usage([&] {
        auto spec = experiment_from_config(cf);
        cf.finish();
        return spec;
    });
    const Checkpoint ckpt = as_usage([&] { return load_checkpoint(a.checkpoint); });
    const Dataset data = gen_task(e.task);
    Transformer model(e.resolved_model(), e.model_seed);
    attach_plan(model, e.plan, e.train.seed, e.init);
    freeze_base(model, e.plan);
    as_usage([&] {
        restore(model, ckpt);
        return 0;
    });
    const auto& examples = a.split == "train" ? data.train : a.split == "dev" ? data.dev : data.test;
    const double metric = evaluate(model, examples, e.task.is_classification(), a.limit);
    std::printf("%s %s accuracy %.4f on %zu examples\n", to_string(e.task.kind).c_str(), a.split.c_str(), metric,
                a.limit ? std::min(a.limit, examples.size()) : examples.size());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"peftlab: parameter-efficient fine-tuning laboratory"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Run one experiment from a config file");
    t->add_option("config", train.config, "Experiment config")->required()->check(CLI::ExistingFile);
    t->add_option("--csv", train.csv, "Write the run record as CSV");
    t->add_option("--checkpoint", train.checkpoint, "Save the trained model here");
    auto* seed_opt = t->add_option("--seed", train.seed, "Override the run seed");
    t->add_option("--steps", train.steps, "Override train.total_steps");
    t->add_flag("-q,--quiet", train.quiet, "Omit the metric curve");

    GridArgs grid;
    auto* g = app.add_subcommand("grid", "Run a grid of experiments and emit CSV");
    g->add_option("config", grid.config, "Grid config")->required()->check(CLI::ExistingFile);
    g->add_option("--csv", grid.csv, "CSV output path ('-' for stdout)");
    g->add_option("--workers", grid.workers, "Override grid.workers");
    g->add_option("--steps", grid.steps, "Override train.total_steps");
    g->add_flag("-q,--quiet", grid.quiet, "No per-run progress");

    CountArgs count;
    auto* c = app.add_subcommand("count-params", "Report the tunable-parameter budget of a config");
    c->add_option("config", count.config, "Experiment config")->required()->check(CLI::ExistingFile);
    c->add_flag("--csv", count.csv, "CSV instead of a table");

    VerifyArgs verify;
    auto* v = app.add_subcommand("verify", "Run the oracle suites");
    v->add_option("--suite", verify.suites, "Suite to run (repeatable): equivalence, lambda, counts, gradients, "
                                            "identity, rank");
    v->add_option("--seed", verify.seed, "Seed for random draws");
    v->add_flag("-v,--verbose", verify.verbose, "Print every check");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on its task");
    e->add_option("config", eval.config, "Experiment config the checkpoint was trained with")
        ->required()
        ->check(CLI::ExistingFile);
    e->add_option("checkpoint", eval.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    e->add_option("--split", eval.split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
    e->add_option("--limit", eval.limit, "Evaluate at most this many examples");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& err) {
        std::cerr << "error: " << err.what() << "\n\n" << app.help();
        return kUsage;
    }

    train.seed_set = seed_opt->count() > 0;
    try {
        if (*t) return cmd_train(train);
        if (*g) return cmd_grid(grid);
        if (*c) return cmd_count(count);
        if (*v) return cmd_verify(verify);
        if (*e) return cmd_eval(eval);
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kUsage;
    } catch (const std::exception& err) {
        std::cerr << "failed: " << err.what() << '\n';
        return kFailure;
    }
    std::cerr << app.help();
    return kUsage;
}
