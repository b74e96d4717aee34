#include "report.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cprompt {

namespace {

using ordered_json = nlohmann::ordered_json;

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("emit_report: cannot open " + p.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("emit_report: short write to " + p.string());
}

// Forgetting after the first t rows; the formula needs at least two.
std::optional<double> ff_after(const AccuracyMatrix& m, std::size_t t) {
    if (t < 2) return std::nullopt;
    AccuracyMatrix head;
    for (std::size_t i = 0; i < t; ++i) {
        head.add_row(std::vector<double>(m.a[i]), m.task_classes[i]);
    }
    return forgetting_ff(head);
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string matrix_csv(const AccuracyMatrix& m) {
    m.require_complete();
    const std::size_t T = m.a.size();
    std::ostringstream out;
    out << "after_task";
    for (std::size_t j = 1; j <= T; ++j) out << ",task_" << j;
    out << ",ff\n";
    for (std::size_t t = 0; t < T; ++t) {
        out << (t + 1);
        for (std::size_t j = 0; j < T; ++j) {
            out << ',';
            if (j < m.a[t].size()) out << format_double(m.a[t][j]);
        }
        out << ',';
        if (auto ff = ff_after(m, t + 1)) out << format_double(*ff);
        out << '\n';
    }
    return out.str();
}

std::string curves_csv(const AccuracyMatrix& m) {
    m.require_complete();
    std::ostringstream out;
    out << "after_task,seen_accuracy\n";
    for (std::size_t t = 0; t < m.a.size(); ++t)
        out << (t + 1) << ',' << format_double(row_weighted_accuracy(m, static_cast<int>(t)))
            << '\n';
    return out.str();
}

std::string steps_csv(const std::vector<TaskLog>& logs) {
    std::ostringstream out;
    out << "task,step,L_total,L_CCL,L_ce,L_aux,L_mk,tau_rate\n";
    for (const auto& log : logs)
        for (const auto& s : log.steps)
            out << log.task << ',' << s.step << ',' << format_double(s.total) << ','
                << format_double(s.ccl) << ',' << format_double(s.ce) << ','
                << format_double(s.aux) << ',' << format_double(s.mk) << ','
                << format_double(s.tau_rate) << '\n';
    return out.str();
}

std::string tasks_json(const std::vector<TaskLog>& logs) {
    ordered_json arr = ordered_json::array();
    for (const auto& log : logs) {
        ordered_json entry;
        entry["task"] = log.task;
        entry["epochs"] = log.epochs;
        entry["steps"] = log.steps.size();
        entry["first_epoch_mean_loss"] = log.first_epoch_mean_loss;
        entry["last_epoch_mean_loss"] = log.last_epoch_mean_loss;
        ordered_json fin;
        if (!log.steps.empty()) {
            const auto& s = log.steps.back();
            fin = {{"total", s.total}, {"ccl", s.ccl},      {"ce", s.ce},
                   {"aux", s.aux},     {"mk", s.mk},        {"tau_rate", s.tau_rate}};
        }
        entry["final_losses"] = fin;
        entry["wall_seconds"] = log.wall_seconds;
        arr.push_back(std::move(entry));
    }
    return arr.dump(2) + "\n";
}

std::string summary_json(const AccuracyMatrix& m, const SummaryProbes& probes) {
    m.require_complete();
    ordered_json s;
    s["schema_version"] = 1;
    s["code_version"] = kCodeVersion;
    s["last"] = last_acc(m);
    s["avg"] = avg_acc(m);
    if (auto ff = ff_after(m, m.a.size()))
        s["ff"] = *ff;
    else
        s["ff"] = nullptr;
    s["task_acc"] = probes.task_acc;
    s["til_last_acc"] = probes.til_last;
    s["til_task_acc"] = probes.til_task_acc;
    if (probes.fixed_prompt)
        s["fixed_prompt_probe"] = *probes.fixed_prompt;
    else
        s["fixed_prompt_probe"] = nullptr;
    return s.dump(2) + "\n";
}

void emit_report(const AccuracyMatrix& m, const std::vector<TaskLog>& logs,
                 const SummaryProbes& probes, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "matrix.csv", matrix_csv(m));
    write_text(dir / "curves.csv", curves_csv(m));
    write_text(dir / "steps.csv", steps_csv(logs));
    write_text(dir / "tasks.json", tasks_json(logs));
    write_text(dir / "summary.json", summary_json(m, probes));
}

}  // namespace cprompt
