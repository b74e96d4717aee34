#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cprompt/data.hpp"
#include "cprompt/trainer.hpp"
#include "cprompt/vit.hpp"

namespace cprompt {

struct PretrainParams {
    int epochs = 30;
    int batch_size = 16;
    double lr0 = 0.01;
    double momentum = 0.9;

    void validate() const;
};

// One experiment, fully described. A dumped config enumerates every field,
// so the file on disk is self-documenting and re-runnable as-is.
struct RunConfig {
    std::string precision = "f32";  // "f32" or "f64"
    std::uint64_t seed = 0;
    bool has_seed = false;  // true once a seed was given by file or flag
    SyntheticSpec data;
    BackboneConfig backbone;
    PretrainParams pretrain;
    TrainConfig train;

    void validate() const;
};

// Parsing is strict: unknown keys are errors (they are usually typos of real
// knobs), missing keys take defaults, and a seed is required before running.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Canonical dump: fixed key order, every field present.
std::string dump_config(const RunConfig& cfg);

// Identity of the experiment apart from its seed, as 16 hex digits. Output
// directories are <hash>-s<seed>, so reruns of the same setup collide on
// purpose and different setups never share a directory.
std::string config_hash(const RunConfig& cfg);

}  // namespace cprompt
