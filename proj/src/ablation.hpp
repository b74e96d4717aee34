#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "experiment.hpp"

namespace cprompt {

// Component grid in reporting order: the six on/off combinations of the
// consistency loss, sampled-prompt training, and per-class keys, then the
// auxiliary-head and regularizer replacements probed on the full method.
const std::vector<std::string>& ablation_variant_names();

// Rewrites the component flags of base for the named variant; every other
// knob (sizes, schedule, seeds) is left alone.
RunConfig apply_variant(RunConfig base, const std::string& variant);

struct RunRow {
    std::string variant;
    std::uint64_t seed = 0;
    double last = 0.0;
    double avg = 0.0;
    std::optional<double> ff;
    double task_acc = 0.0;
    double til_last = 0.0;
    double til_task_acc = 0.0;
    std::optional<double> fixed_prompt;
};

struct VariantMeans {
    std::string variant;
    double last = 0.0;
    double avg = 0.0;
    double task_acc = 0.0;
    double til_last = 0.0;
    double fixed_prompt = 0.0;
};

struct DirectionalCheck {
    std::string name;
    bool pass = false;
    double lhs = 0.0;
    double rhs = 0.0;
};

struct AblationResult {
    std::vector<RunRow> rows;           // one per (variant, seed), variant-major
    std::vector<VariantMeans> means;    // seed averages, variant order
    std::vector<DirectionalCheck> checks;
    bool all_pass = false;
    double wall_seconds = 0.0;
};

// Runs the grid as worker processes (at most jobs at once, each limited to a
// single thread), then aggregates their summary files. worker_exe must accept
// `run --config <path> --out <dir> --cache <dir>`; backbone caches are warmed
// in-process first so workers never race on a cache entry. Results land under
// out_root: runs/, configs/, logs/, grid.csv, ablation_summary.json.
AblationResult run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                            int jobs, const std::filesystem::path& out_root,
                            const std::filesystem::path& cache_dir,
                            const std::filesystem::path& worker_exe);

}  // namespace cprompt
