#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "config.hpp"
#include "report.hpp"

namespace cprompt {

// The numbers a caller needs without re-reading summary.json.
struct RunSummary {
    std::filesystem::path run_dir;
    double pretrain_accuracy = 0.0;
    double last = 0.0;
    double avg = 0.0;
    std::optional<double> ff;
    SummaryProbes probes;
};

// Cache directory resolution: explicit argument, else $CPROMPT_CACHE_DIR,
// else <out_root>/cache.
std::filesystem::path resolve_cache_dir(const std::filesystem::path& explicit_dir,
                                        const std::filesystem::path& out_root);

// Identity of the pretraining stage: precision, seed, data spec, backbone
// shape, and pretraining knobs. The continual-phase settings are excluded so
// every ablation variant of one seed shares a single cached backbone.
std::string backbone_cache_key(const RunConfig& cfg);

// Pretrains (or verifies) the cached backbone for cfg and returns its holdout
// accuracy. Loading a cache entry is bit-equivalent to regenerating it: the
// file captures the weights and the rng state right after pretraining.
double warm_backbone_cache(const RunConfig& cfg, const std::filesystem::path& cache_dir);

// Full pipeline: pretrain or load backbone, train the continual stream, probe
// the final state, and write config.json, report files, and checkpoint.ckpt
// under <out_root>/<config_hash>-s<seed>. Rerunning the same config is
// allowed (outputs are deterministic); a directory already holding a
// different config is an error.
RunSummary run_experiment(const RunConfig& cfg, const std::filesystem::path& out_root,
                          const std::filesystem::path& cache_dir);

// Rebuilds every report file of an existing run directory from its stored
// checkpoint and config. Byte-identical output doubles as an integrity check.
RunSummary reemit_report(const std::filesystem::path& run_dir);

}  // namespace cprompt
