#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cprompt/eval.hpp"
#include "cprompt/trainer.hpp"

namespace cprompt {

// End-of-run probe values that accompany the accuracy matrix in summary.json.
// Everything here is a pure function of the trained state and the test data,
// so re-emitting a report reproduces it byte for byte.
struct SummaryProbes {
    double task_acc = 0.0;       // prompt-selection accuracy over the whole test stream
    double til_last = 0.0;       // class-weighted final accuracy with task identity given
    double til_task_acc = 1.0;   // selection is bypassed under TIL, hence always exact
    std::optional<double> fixed_prompt;  // mean accuracy under the forced first prompt; T >= 2
};

// Shortest decimal string that round-trips the exact double.
std::string format_double(double v);

std::string matrix_csv(const AccuracyMatrix& m);
std::string curves_csv(const AccuracyMatrix& m);
std::string steps_csv(const std::vector<TaskLog>& logs);
std::string tasks_json(const std::vector<TaskLog>& logs);
std::string summary_json(const AccuracyMatrix& m, const SummaryProbes& probes);

// Writes matrix.csv, curves.csv, steps.csv, tasks.json, and summary.json
// under dir, creating it if needed. Wall-clock figures appear only in
// tasks.json; every other file is a deterministic function of the run state.
void emit_report(const AccuracyMatrix& m, const std::vector<TaskLog>& logs,
                 const SummaryProbes& probes, const std::filesystem::path& dir);

}  // namespace cprompt
