#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "peftlab/config.hpp"
#include "peftlab/peft.hpp"
#include "peftlab/tasks.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab {

/// One training run. `train.seed` is the run seed: it drives PEFT init,
/// data order and dropout, while `model_seed` fixes the frozen base.
struct ExperimentSpec {
    std::string name = "run";
    TaskSpec task;
    ModelConfig model = ModelConfig::desk();  // before the task adjusts vocab and architecture
    std::uint64_t model_seed = 7;
    PeftPlan plan;
    TrainConfig train;
    InitOptions init;
    std::string output;      // CSV path, empty for none
    std::string checkpoint;  // checkpoint path, empty for none

    ModelConfig resolved_model() const { return config_for_task(model, task); }
    /// Every field that affects results except the run seed.
    std::string canonical() const;
    std::string config_hash() const { return fnv1a_hex(canonical()); }
};

/// Reads the task.*, model.*, train.*, peft.N.* and run.* keys. Leaves
/// ConfigFile::finish() to the caller so grid keys can share a file.
ExperimentSpec experiment_from_config(const ConfigFile& cf);
/// The peft.N.* entries in N order; `mam` expands to its two methods.
PeftPlan plan_from_config(const ConfigFile& cf, const ModelConfig& model);

struct RunRecord {
    std::string config_hash;
    std::string label;
    std::vector<MethodSpec> plan;
    std::vector<DesignSpec> designs;
    std::uint64_t seed = 0;
    std::size_t tunable_params = 0;  // audited from the live model
    std::size_t base_total = 0;
    double rel_percent = 0.0;
    std::vector<MetricPoint> curve;
    double final_metric = 0.0;
    std::size_t steps = 0;
    double wall_seconds = 0.0;
    std::string status = "ok";

    bool ok() const { return status == "ok"; }
};

std::string plan_label(const PeftPlan& plan);

/// attach, freeze, train, evaluate, record. Failures are recorded in
/// `status` rather than thrown. The trained model is handed back through
/// `model_out` when given.
RunRecord run_experiment(const ExperimentSpec& spec, std::unique_ptr<Transformer>* model_out = nullptr);
RunRecord run_experiment(const ModelConfig& model, const PeftPlan& plan, const TaskSpec& task,
                         const TrainConfig& train, std::uint64_t model_seed = 7);

struct GridCell {
    std::string label;
    PeftPlan plan;
};

struct GridSpec {
    std::string name = "grid";
    ExperimentSpec base;  // task, model and training shared by all cells
    std::vector<GridCell> cells;
    std::size_t seeds_per_cell = 1;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    /// Axis combinations dropped while expanding because no module
    /// implements them.
    std::size_t skipped = 0;

    std::size_t size() const { return cells.size() * seeds_per_cell; }
};

/// Seed of run `index` (cell-major, replicate-minor) in a grid.
std::uint64_t cell_seed(std::uint64_t grid_seed, std::size_t index);

/// Runs every cell x replicate on a pool of `workers` threads. Records are
/// returned in index order and do not depend on the worker count.
std::vector<RunRecord> run_grid(const GridSpec& grid,
                                const std::function<void(std::size_t, const RunRecord&)>& on_done = {});

/// insertion, representation, composition, budget, combination.
const std::vector<std::string>& prebuilt_grid_names();
/// Cells of a named comparison for each bottleneck (prefix length for
/// prefixes). Empty `bottlenecks` picks the grid's defaults.
GridSpec prebuilt_grid(const std::string& name, const ExperimentSpec& base, std::vector<std::size_t> bottlenecks = {});

/// grid.preset is one of the prebuilt names, `methods` (grid.methods x
/// grid.targets x grid.bottlenecks) or `design` (functional forms x
/// insertion forms x representations x compositions x bottlenecks).
GridSpec grid_from_config(const ConfigFile& cf);

std::string csv_header();
std::string csv_text(const std::vector<RunRecord>& records);
/// Throws ConfigError when the path cannot be written.
void emit_csv(const std::vector<RunRecord>& records, const std::string& path);

}  // namespace peftlab
