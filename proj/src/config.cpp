#include "config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "cprompt/serialize.hpp"

namespace cprompt {

namespace {

using ordered_json = nlohmann::ordered_json;

void PretrainParamsCheck(const PretrainParams& p) {
    if (p.epochs < 1) throw std::invalid_argument("pretrain.epochs must be >= 1");
    if (p.batch_size < 1) throw std::invalid_argument("pretrain.batch_size must be >= 1");
    if (p.lr0 <= 0.0) throw std::invalid_argument("pretrain.lr0 must be positive");
    if (p.momentum < 0.0 || p.momentum >= 1.0)
        throw std::invalid_argument("pretrain.momentum in [0, 1)");
}

std::string regularizer_name(Regularizer r) {
    switch (r) {
        case Regularizer::adaptive: return "adaptive";
        case Regularizer::edl: return "edl";
        case Regularizer::roh: return "roh";
    }
    throw std::logic_error("unknown regularizer value");
}

Regularizer regularizer_from(const std::string& s) {
    if (s == "adaptive") return Regularizer::adaptive;
    if (s == "edl") return Regularizer::edl;
    if (s == "roh") return Regularizer::roh;
    throw std::invalid_argument("train.regularizer must be adaptive, edl, or roh; got '" + s +
                                "'");
}

// Pulls section[key] into out when present and complains about any key the
// section does not declare; typos in config files should fail loudly.
struct Section {
    const ordered_json& j;
    std::string path;
    std::vector<std::string> known;

    Section(const ordered_json& obj, std::string p) : j(obj), path(std::move(p)) {
        if (!j.is_object()) throw std::invalid_argument("config: " + path + " must be an object");
    }

    template <typename T>
    void field(const char* key, T& out) {
        known.emplace_back(key);
        if (auto it = j.find(key); it != j.end()) {
            try {
                out = it->get<T>();
            } catch (const nlohmann::json::exception&) {
                throw std::invalid_argument("config: bad value type for " + path + "." + key);
            }
        }
    }

    bool has(const char* key) {
        known.emplace_back(key);
        return j.contains(key);
    }

    void finish() const {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::find(known.begin(), known.end(), it.key()) == known.end())
                throw std::invalid_argument("config: unknown key " + path + "." + it.key());
        }
    }
};

}  // namespace

void PretrainParams::validate() const { PretrainParamsCheck(*this); }

void RunConfig::validate() const {
    if (precision != "f64" && precision != "f32")
        throw std::invalid_argument("config: precision must be f64 or f32");
    data.validate();
    backbone.validate();
    pretrain.validate();
    train.validate();
    if (data.image_size != backbone.image_size || data.channels != backbone.channels)
        throw std::invalid_argument("config: data and backbone disagree on image shape");
}

RunConfig parse_config_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }

    RunConfig cfg;
    Section root(j, "<root>");
    root.field("precision", cfg.precision);
    if (root.has("seed")) {
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.has_seed = true;
    }

    if (root.has("data")) {
        Section s(j.at("data"), "data");
        s.field("num_pretrain_classes", cfg.data.num_pretrain_classes);
        s.field("tasks", cfg.data.tasks);
        s.field("classes_per_task", cfg.data.classes_per_task);
        s.field("train_per_class", cfg.data.train_per_class);
        s.field("test_per_class", cfg.data.test_per_class);
        s.field("pretrain_train_per_class", cfg.data.pretrain_train_per_class);
        s.field("pretrain_test_per_class", cfg.data.pretrain_test_per_class);
        s.field("image_size", cfg.data.image_size);
        s.field("channels", cfg.data.channels);
        s.field("noise_sigma", cfg.data.noise_sigma);
        s.field("style_shift", cfg.data.style_shift);
        s.finish();
    }

    if (root.has("backbone")) {
        Section s(j.at("backbone"), "backbone");
        s.field("image_size", cfg.backbone.image_size);
        s.field("patch_size", cfg.backbone.patch_size);
        s.field("channels", cfg.backbone.channels);
        s.field("embed_dim", cfg.backbone.embed_dim);
        s.field("num_layers", cfg.backbone.num_layers);
        s.field("num_heads", cfg.backbone.num_heads);
        s.field("mlp_ratio", cfg.backbone.mlp_ratio);
        s.field("prompt_len", cfg.backbone.prompt_len);
        s.field("prompt_insert_layers", cfg.backbone.prompt_insert_layers);
        s.finish();
    }

    if (root.has("pretrain")) {
        Section s(j.at("pretrain"), "pretrain");
        s.field("epochs", cfg.pretrain.epochs);
        s.field("batch_size", cfg.pretrain.batch_size);
        s.field("lr0", cfg.pretrain.lr0);
        s.field("momentum", cfg.pretrain.momentum);
        s.finish();
    }

    if (root.has("train")) {
        Section s(j.at("train"), "train");
        s.field("epochs_per_task", cfg.train.epochs_per_task);
        s.field("batch_size", cfg.train.batch_size);
        s.field("lr0", cfg.train.lr0);
        s.field("momentum", cfg.train.momentum);
        s.field("tau1", cfg.train.ccl.tau1);
        s.field("margin", cfg.train.ccl.margin);
        s.field("alpha", cfg.train.ccl.alpha);
        s.field("enable_ccl", cfg.train.flags.enable_ccl);
        s.field("enable_pcl", cfg.train.flags.enable_pcl);
        s.field("enable_aux_head", cfg.train.flags.enable_aux_head);
        s.field("enable_aux_loss", cfg.train.flags.enable_aux_loss);
        s.field("per_example_sampling", cfg.train.flags.per_example_sampling);
        s.field("enable_mk", cfg.train.enable_mk);
        std::string reg = regularizer_name(cfg.train.flags.regularizer);
        s.field("regularizer", reg);
        cfg.train.flags.regularizer = regularizer_from(reg);
        s.finish();
    }

    root.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("config: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_config_text(buf.str());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

std::string dump_config(const RunConfig& cfg) {
    ordered_json j;
    j["precision"] = cfg.precision;
    j["seed"] = cfg.seed;
    j["data"] = {{"num_pretrain_classes", cfg.data.num_pretrain_classes},
                 {"tasks", cfg.data.tasks},
                 {"classes_per_task", cfg.data.classes_per_task},
                 {"train_per_class", cfg.data.train_per_class},
                 {"test_per_class", cfg.data.test_per_class},
                 {"pretrain_train_per_class", cfg.data.pretrain_train_per_class},
                 {"pretrain_test_per_class", cfg.data.pretrain_test_per_class},
                 {"image_size", cfg.data.image_size},
                 {"channels", cfg.data.channels},
                 {"noise_sigma", cfg.data.noise_sigma},
                 {"style_shift", cfg.data.style_shift}};
    j["backbone"] = {{"image_size", cfg.backbone.image_size},
                     {"patch_size", cfg.backbone.patch_size},
                     {"channels", cfg.backbone.channels},
                     {"embed_dim", cfg.backbone.embed_dim},
                     {"num_layers", cfg.backbone.num_layers},
                     {"num_heads", cfg.backbone.num_heads},
                     {"mlp_ratio", cfg.backbone.mlp_ratio},
                     {"prompt_len", cfg.backbone.prompt_len},
                     {"prompt_insert_layers", cfg.backbone.prompt_insert_layers}};
    j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                     {"batch_size", cfg.pretrain.batch_size},
                     {"lr0", cfg.pretrain.lr0},
                     {"momentum", cfg.pretrain.momentum}};
    j["train"] = {{"epochs_per_task", cfg.train.epochs_per_task},
                  {"batch_size", cfg.train.batch_size},
                  {"lr0", cfg.train.lr0},
                  {"momentum", cfg.train.momentum},
                  {"tau1", cfg.train.ccl.tau1},
                  {"margin", cfg.train.ccl.margin},
                  {"alpha", cfg.train.ccl.alpha},
                  {"enable_ccl", cfg.train.flags.enable_ccl},
                  {"enable_pcl", cfg.train.flags.enable_pcl},
                  {"enable_aux_head", cfg.train.flags.enable_aux_head},
                  {"enable_aux_loss", cfg.train.flags.enable_aux_loss},
                  {"per_example_sampling", cfg.train.flags.per_example_sampling},
                  {"enable_mk", cfg.train.enable_mk},
                  {"regularizer", regularizer_name(cfg.train.flags.regularizer)}};
    return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
    RunConfig keyed = cfg;
    keyed.seed = 0;
    keyed.has_seed = false;
    const std::string bytes = dump_config(keyed);
    const std::uint64_t h = fnv1a(bytes.data(), bytes.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 16);
}

}  // namespace cprompt
