#include "experiment.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cprompt/serialize.hpp"

namespace cprompt {

namespace {

std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + p.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("short write to " + p.string());
}

std::vector<int> all_stream_class_ids(const SyntheticSpec& spec) {
    std::vector<int> ids;
    for (int c = 0; c < spec.num_stream_classes(); ++c)
        ids.push_back(spec.num_pretrain_classes + c);
    return ids;
}

template <std::floating_point T>
struct Prepared {
    TaskStream<T> stream;
    Backbone<T> net;  // frozen
    Rng rng;          // state right after pretraining
    double pretrain_acc = 0.0;
};

// Cache entry payload: code version, precision tag, cache key, holdout
// accuracy, backbone config + frozen weights, rng state after pretraining.
template <std::floating_point T>
void save_cache(const Backbone<T>& net, const Rng& rng, double acc, const std::string& key,
                const std::filesystem::path& path) {
    ByteWriter w;
    w.put_string(kCodeVersion);
    w.put_u8(sizeof(T) == 8 ? 1 : 0);
    w.put_string(key);
    w.put_f64(acc);
    net.serialize_config(w);
    net.serialize_weights(w);
    for (auto x : rng.state()) w.put_u64(x);
    // concurrent writers of the same key produce identical bytes; the rename
    // keeps readers from ever seeing a half-written file
    auto tmp = path;
    tmp += ".tmp" + std::to_string(getpid());
    write_container(tmp, w.take());
    std::filesystem::rename(tmp, path);
}

template <std::floating_point T>
double load_cache(Backbone<T>& net, Rng& rng, const std::string& key,
                  const std::filesystem::path& path) {
    auto payload = read_container(path);
    ByteReader r(payload);
    const auto version = r.get_string();
    if (version != kCodeVersion)
        throw std::runtime_error("backbone cache " + path.string() + ": made by '" + version +
                                 "', this build is '" + std::string(kCodeVersion) + "'");
    if ((r.get_u8() != 0) != (sizeof(T) == 8))
        throw std::runtime_error("backbone cache " + path.string() + ": precision mismatch");
    const auto stored_key = r.get_string();
    if (stored_key != key)
        throw std::runtime_error("backbone cache " + path.string() +
                                 ": key mismatch (stale or foreign entry)");
    const double acc = r.get_f64();
    const auto cfg = Backbone<T>::deserialize_config(r);
    if (!(cfg == net.config()))
        throw std::runtime_error("backbone cache " + path.string() + ": config mismatch");
    net.deserialize_weights(r);
    std::array<std::uint64_t, 4> rs{};
    for (auto& x : rs) x = r.get_u64();
    rng.set_state(rs);
    if (!r.exhausted()) throw std::runtime_error("backbone cache " + path.string() + ": trailing bytes");
    if (!net.frozen()) throw std::runtime_error("backbone cache " + path.string() + ": not frozen");
    return acc;
}

// Data generation and weight init consume the same rng draws whether or not
// the cache hits; a hit then jumps the rng to the saved post-pretraining
// state, which makes the two paths bit-equivalent from here on.
template <std::floating_point T>
Prepared<T> prepare(const RunConfig& cfg, const std::filesystem::path& cache_dir) {
    Rng rng(cfg.seed);
    auto stream = generate_synthetic<T>(cfg.data, rng);
    Backbone<T> net(cfg.backbone, rng);

    const auto key = backbone_cache_key(cfg);
    std::filesystem::create_directories(cache_dir);
    const auto path = cache_dir / ("backbone-" + key + ".ckpt");
    double acc;
    if (std::filesystem::exists(path)) {
        acc = load_cache(net, rng, key, path);
    } else {
        auto res = pretrain_backbone(net, stream.pretrain_train, stream.pretrain_test,
                                     all_stream_class_ids(cfg.data), cfg.pretrain.epochs,
                                     cfg.pretrain.batch_size, cfg.pretrain.lr0,
                                     cfg.pretrain.momentum, rng);
        acc = res.holdout_accuracy;
        save_cache(net, rng, acc, key, path);
    }
    return Prepared<T>{std::move(stream), std::move(net), std::move(rng), acc};
}

template <std::floating_point T>
SummaryProbes compute_probes(const ExperimentState<T>& st, const TaskStream<T>& stream) {
    SummaryProbes p;
    double sel = 0.0, til = 0.0;
    std::int64_t total = 0;
    for (int t = 0; t < stream.num_tasks(); ++t) {
        const auto& ds = stream.task(t).test;
        const auto n = static_cast<double>(ds.size());
        sel += task_selection_accuracy(st.backbone, st.pool, ds, t) * n;
        til += evaluate_accuracy(st.backbone, st.pool, st.bank, ds, EvalMode::til, t) * n;
        total += ds.size();
    }
    p.task_acc = sel / static_cast<double>(total);
    p.til_last = til / static_cast<double>(total);
    p.til_task_acc = 1.0;
    if (stream.num_tasks() >= 2)
        p.fixed_prompt = fixed_prompt_probe(st.backbone, st.pool, st.bank, stream);
    return p;
}

template <std::floating_point T>
RunSummary run_impl(const RunConfig& cfg, const std::filesystem::path& run_dir,
                    const std::filesystem::path& cache_dir) {
    auto prep = prepare<T>(cfg, cache_dir);
    auto st = ExperimentState<T>::make(std::move(prep.net), cfg.train, cfg.data.tasks,
                                       std::move(prep.rng));
    auto res = run_stream(st, prep.stream, cfg.train);
    auto probes = compute_probes(st, prep.stream);

    emit_report(res.matrix, res.logs, probes, run_dir);
    checkpoint_save(st, res.matrix, run_dir / "checkpoint.ckpt");
    {
        std::ostringstream pj;
        pj << "{\n  \"holdout_accuracy\": " << format_double(prep.pretrain_acc)
           << ",\n  \"epochs\": " << cfg.pretrain.epochs << "\n}\n";
        write_text(run_dir / "pretrain.json", pj.str());
    }

    RunSummary out;
    out.run_dir = run_dir;
    out.pretrain_accuracy = prep.pretrain_acc;
    out.last = last_acc(res.matrix);
    out.avg = avg_acc(res.matrix);
    if (res.matrix.num_rows() >= 2) out.ff = forgetting_ff(res.matrix);
    out.probes = probes;
    return out;
}

template <std::floating_point T>
RunSummary reemit_impl(const RunConfig& cfg, const std::filesystem::path& run_dir) {
    auto [st, matrix] = checkpoint_load<T>(run_dir / "checkpoint.ckpt");
    Rng rng(cfg.seed);
    auto stream = generate_synthetic<T>(cfg.data, rng);
    if (matrix.num_rows() != stream.num_tasks())
        throw std::runtime_error("reemit_report: checkpoint does not cover the full stream");
    auto probes = compute_probes(st, stream);

    write_text(run_dir / "matrix.csv", matrix_csv(matrix));
    write_text(run_dir / "curves.csv", curves_csv(matrix));
    write_text(run_dir / "summary.json", summary_json(matrix, probes));

    RunSummary out;
    out.run_dir = run_dir;
    out.last = last_acc(matrix);
    out.avg = avg_acc(matrix);
    if (matrix.num_rows() >= 2) out.ff = forgetting_ff(matrix);
    out.probes = probes;
    return out;
}

}  // namespace

std::filesystem::path resolve_cache_dir(const std::filesystem::path& explicit_dir,
                                        const std::filesystem::path& out_root) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (const char* env = std::getenv("CPROMPT_CACHE_DIR"); env && *env)
        return std::filesystem::path(env);
    return out_root / "cache";
}

std::string backbone_cache_key(const RunConfig& cfg) {
    RunConfig keyed = cfg;
    keyed.train = TrainConfig{};  // continual-phase knobs do not touch pretraining
    const std::string bytes = dump_config(keyed);
    const std::uint64_t h = fnv1a(bytes.data(), bytes.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 16);
}

double warm_backbone_cache(const RunConfig& cfg, const std::filesystem::path& cache_dir) {
    cfg.validate();
    if (!cfg.has_seed) throw std::invalid_argument("config: missing required field seed");
    if (cfg.precision == "f32") return prepare<float>(cfg, cache_dir).pretrain_acc;
    return prepare<double>(cfg, cache_dir).pretrain_acc;
}

RunSummary run_experiment(const RunConfig& cfg, const std::filesystem::path& out_root,
                          const std::filesystem::path& cache_dir) {
    cfg.validate();
    if (!cfg.has_seed) throw std::invalid_argument("config: missing required field seed");

    const auto run_dir = out_root / (config_hash(cfg) + "-s" + std::to_string(cfg.seed));
    std::filesystem::create_directories(run_dir);
    const std::string dump = dump_config(cfg);
    const auto cfg_path = run_dir / "config.json";
    if (std::filesystem::exists(cfg_path) && read_text(cfg_path) != dump)
        throw std::runtime_error("output directory " + run_dir.string() +
                                 " already holds a different configuration");
    write_text(cfg_path, dump);

    if (cfg.precision == "f32") return run_impl<float>(cfg, run_dir, cache_dir);
    return run_impl<double>(cfg, run_dir, cache_dir);
}

RunSummary reemit_report(const std::filesystem::path& run_dir) {
    auto cfg = load_config(run_dir / "config.json");
    cfg.validate();
    if (cfg.precision == "f32") return reemit_impl<float>(cfg, run_dir);
    return reemit_impl<double>(cfg, run_dir);
}

}  // namespace cprompt
