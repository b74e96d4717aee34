#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "report.hpp"
#include "testutil.hpp"

using namespace cprompt;

namespace {

// Dyadic accuracies so every weighted mean and difference below is exact in
// binary and the expected CSV strings can be written out verbatim.
AccuracyMatrix hand_matrix() {
    AccuracyMatrix m;
    m.add_row({0.875}, 4);
    m.add_row({0.75, 0.625}, 4);
    m.add_row({0.5, 0.5, 0.5}, 2);
    return m;
}

std::vector<TaskLog> hand_logs() {
    std::vector<TaskLog> logs;
    TaskLog a;
    a.task = 0;
    a.epochs = 2;
    a.steps = {{0, 1.5, 0.0, 1.25, 0.125, 0.125, 0.0},
               {1, 1.0, 0.0, 0.75, 0.125, 0.125, 0.0}};
    a.first_epoch_mean_loss = 1.5;
    a.last_epoch_mean_loss = 1.0;
    a.wall_seconds = 0.25;
    logs.push_back(a);
    TaskLog b;
    b.task = 1;
    b.epochs = 1;
    b.steps = {{0, 2.0, 0.5, 1.0, 0.25, 0.25, 0.5}};
    b.first_epoch_mean_loss = 2.0;
    b.last_epoch_mean_loss = 2.0;
    b.wall_seconds = 0.5;
    logs.push_back(b);
    return logs;
}

}  // namespace

TEST_CASE("matrix csv lays out rows, class-weighted ff column by hand") {
    const auto m = hand_matrix();
    // ff after 2 rows: 0.875 - 0.75. After 3: mean of (0.875-0.5, 0.625-0.5).
    CHECK(matrix_csv(m) ==
          "after_task,task_1,task_2,task_3,ff\n"
          "1,0.875,,,\n"
          "2,0.75,0.625,,0.125\n"
          "3,0.5,0.5,0.5,0.25\n");
}

TEST_CASE("curve rows equal class-weighted row accuracies") {
    const auto m = hand_matrix();
    // Row 2: (4*0.75 + 4*0.625) / 8. Row 3: (4*0.5 + 4*0.5 + 2*0.5) / 10.
    CHECK(curves_csv(m) ==
          "after_task,seen_accuracy\n"
          "1,0.875\n"
          "2,0.6875\n"
          "3,0.5\n");
    for (int t = 0; t < m.num_rows(); ++t) {
        std::string row = std::to_string(t + 1) + "," +
                          format_double(row_weighted_accuracy(m, t)) + "\n";
        CHECK(curves_csv(m).find(row) != std::string::npos);
    }
}

TEST_CASE("single-task report has one curve point and null ff") {
    AccuracyMatrix m;
    m.add_row({0.75}, 4);
    CHECK(curves_csv(m) == "after_task,seen_accuracy\n1,0.75\n");
    CHECK(matrix_csv(m) == "after_task,task_1,ff\n1,0.75,\n");
    const auto s = nlohmann::json::parse(summary_json(m, SummaryProbes{}));
    CHECK(s["ff"].is_null());
    CHECK(s["fixed_prompt_probe"].is_null());
    CHECK(s["last"] == 0.75);
    CHECK(s["avg"] == 0.75);
}

TEST_CASE("steps csv carries every loss term in task-major order") {
    CHECK(steps_csv(hand_logs()) ==
          "task,step,L_total,L_CCL,L_ce,L_aux,L_mk,tau_rate\n"
          "0,0,1.5,0,1.25,0.125,0.125,0\n"
          "0,1,1,0,0.75,0.125,0.125,0\n"
          "1,0,2,0.5,1,0.25,0.25,0.5\n");
    CHECK(steps_csv({}) == "task,step,L_total,L_CCL,L_ce,L_aux,L_mk,tau_rate\n");
}

TEST_CASE("tasks json reflects the logs and keeps empty final losses null") {
    auto logs = hand_logs();
    logs.push_back(TaskLog{2, 0, {}, 0.0, 0.0, 0.125});
    const auto arr = nlohmann::json::parse(tasks_json(logs));
    REQUIRE(arr.size() == 3);
    CHECK(arr[0]["task"] == 0);
    CHECK(arr[0]["epochs"] == 2);
    CHECK(arr[0]["steps"] == 2);
    CHECK(arr[0]["first_epoch_mean_loss"] == 1.5);
    CHECK(arr[0]["last_epoch_mean_loss"] == 1.0);
    CHECK(arr[0]["final_losses"]["total"] == 1.0);
    CHECK(arr[0]["final_losses"]["tau_rate"] == 0.0);
    CHECK(arr[1]["final_losses"]["ccl"] == 0.5);
    CHECK(arr[1]["wall_seconds"] == 0.5);
    CHECK(arr[2]["final_losses"].is_null());
}

TEST_CASE("summary json keys appear in schema order with exact values") {
    const auto m = hand_matrix();
    SummaryProbes probes;
    probes.task_acc = 0.75;
    probes.til_last = 0.875;
    probes.fixed_prompt = 0.25;
    const std::string text = summary_json(m, probes);
    const auto s = nlohmann::json::parse(text);
    CHECK(s["schema_version"] == 1);
    CHECK(s["code_version"] == kCodeVersion);
    CHECK(s["last"] == 0.5);
    CHECK(s["avg"] == 0.6875);
    CHECK(s["ff"] == 0.25);
    CHECK(s["task_acc"] == 0.75);
    CHECK(s["til_last_acc"] == 0.875);
    CHECK(s["til_task_acc"] == 1.0);
    CHECK(s["fixed_prompt_probe"] == 0.25);
    const char* keys[] = {"schema_version", "code_version", "last",
                          "avg",            "ff",           "task_acc",
                          "til_last_acc",   "til_task_acc", "fixed_prompt_probe"};
    std::size_t prev = 0;
    for (const char* k : keys) {
        const auto pos = text.find(std::string("\"") + k + "\"");
        REQUIRE(pos != std::string::npos);
        CHECK(pos > prev);
        prev = pos;
    }
}

TEST_CASE("re-emitting a report is byte-identical") {
    const auto m = hand_matrix();
    const auto logs = hand_logs();
    SummaryProbes probes;
    probes.task_acc = 0.5;
    probes.til_last = 0.875;
    probes.fixed_prompt = 0.25;

    const auto dir = testutil::fresh_dir("report_emit");
    emit_report(m, logs, probes, dir / "a");
    emit_report(m, logs, probes, dir / "b");
    for (const char* name :
         {"matrix.csv", "curves.csv", "steps.csv", "tasks.json", "summary.json"}) {
        const auto a = testutil::read_file(dir / "a" / name);
        CHECK(a == testutil::read_file(dir / "b" / name));
        CHECK(!a.empty());
    }
    CHECK(testutil::read_file(dir / "a" / "matrix.csv") == matrix_csv(m));
    std::filesystem::remove_all(dir);
}

TEST_CASE("format_double round-trips exactly") {
    for (double v : {0.1, 1.0 / 3.0, 0.30000000000000004, 1e-17, 12345.6789}) {
        CHECK(std::stod(format_double(v)) == v);
    }
    CHECK(format_double(0.5) == "0.5");
    CHECK(format_double(0.0) == "0");
}
