#include <unistd.h>

#include <cstdlib>
#include <iostream>
#include <limits.h>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ablation.hpp"
#include "config.hpp"
#include "experiment.hpp"
#include "gradcheck.hpp"

namespace {

using namespace cprompt;

std::filesystem::path self_exe() {
    char buf[PATH_MAX];
    const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
    if (n <= 0) throw std::runtime_error("cannot resolve own executable path");
    buf[n] = '\0';
    return std::filesystem::path(buf);
}

RunConfig load_with_seed(const std::string& config_path, const std::optional<std::uint64_t>& seed) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) {
        cfg.seed = *seed;
        cfg.has_seed = true;
    }
    return cfg;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::string cur;
    for (char c : text + ",") {
        if (c == ',') {
            if (!cur.empty()) seeds.push_back(std::stoull(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (seeds.empty()) throw std::invalid_argument("--seeds: empty list");
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual-learning benchmark over a prompt-selecting transformer"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::string cache_dir;  // empty: $CPROMPT_CACHE_DIR, else <out>/cache
    std::optional<std::uint64_t> seed;
    std::string seeds_text = "0,1,2,3,4";
    int jobs = 1;

    auto add_common = [&](CLI::App* cmd, bool with_config) {
        if (with_config) cmd->add_option("--config", config_path, "experiment config (JSON)");
        cmd->add_option("--seed", seed, "seed override (required if the config has none)");
        cmd->add_option("--out", out_dir, "output root directory");
        cmd->add_option("--cache", cache_dir, "backbone cache directory")
            ->envname("CPROMPT_CACHE_DIR");
    };

    auto* cmd_pretrain = app.add_subcommand("pretrain", "pretrain and cache the frozen backbone");
    add_common(cmd_pretrain, true);

    auto* cmd_run = app.add_subcommand("run", "run one continual-learning experiment");
    add_common(cmd_run, true);

    auto* cmd_ablate = app.add_subcommand("ablate", "run the component grid across seeds");
    add_common(cmd_ablate, true);
    cmd_ablate->add_option("--seeds", seeds_text, "comma-separated seed list");
    cmd_ablate->add_option("--jobs", jobs, "max concurrent worker processes");

    std::string report_dir;
    auto* cmd_report = app.add_subcommand("report", "rebuild report files from a run directory");
    cmd_report->add_option("dir", report_dir, "run directory holding checkpoint + config")
        ->required();

    auto* cmd_gradcheck =
        app.add_subcommand("gradcheck", "finite-difference checks of the training objective");

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cache = resolve_cache_dir(cache_dir, out_dir);

        if (cmd_pretrain->parsed()) {
            auto cfg = load_with_seed(config_path, seed);
            const double acc = warm_backbone_cache(cfg, cache);
            std::cout << "backbone cached under " << cache.string() << " (key "
                      << backbone_cache_key(cfg) << "), holdout accuracy " << acc << "\n";
            return 0;
        }
        if (cmd_run->parsed()) {
            auto cfg = load_with_seed(config_path, seed);
            auto sum = run_experiment(cfg, out_dir, cache);
            std::cout << "run " << sum.run_dir.string() << "\n"
                      << "  pretrain holdout " << sum.pretrain_accuracy << "\n"
                      << "  last " << sum.last << "  avg " << sum.avg;
            if (sum.ff) std::cout << "  ff " << *sum.ff;
            std::cout << "  task_acc " << sum.probes.task_acc << "\n";
            return 0;
        }
        if (cmd_ablate->parsed()) {
            auto cfg = load_with_seed(config_path, seed);
            auto res =
                run_ablation(cfg, parse_seed_list(seeds_text), jobs, out_dir, cache, self_exe());
            for (const auto& c : res.checks)
                std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " (" << c.lhs << " vs "
                          << c.rhs << ")\n";
            std::cout << (res.all_pass ? "all checks passed" : "some checks FAILED") << " in "
                      << res.wall_seconds << " s; see " << (out_dir + "/ablation_summary.json")
                      << "\n";
            return res.all_pass ? 0 : 1;
        }
        if (cmd_report->parsed()) {
            auto sum = reemit_report(report_dir);
            std::cout << "report rebuilt in " << sum.run_dir.string() << "\n";
            return 0;
        }
        if (cmd_gradcheck->parsed()) {
            return run_gradcheck(std::cout) ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
