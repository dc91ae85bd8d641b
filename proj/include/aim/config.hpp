// config.hpp — run configuration: JSON file parsing with strict key checking,
// dotted-path --set overrides, and serialization for run snapshots and
// checkpoint headers.

#ifndef AIM_CONFIG_HPP
#define AIM_CONFIG_HPP

#include <fstream>
#include <string>
#include <vector>

#include "aim/data.hpp"
#include "aim/losses.hpp"
#include "aim/topdown.hpp"
#include "json.hpp"

namespace aim {

struct OptimConfig {
    int64_t epochs = 60;
    int64_t batch_size = 128;
    double lr_backbone = 0.001;
    double lr_topdown = 0.01;
    double weight_decay = 0.001;
    bool cosine = true;
    double dropout = 0.0;

    void validate() const {
        AIM_CHECK(epochs >= 1, ConfigError, "optimizer: epochs must be >= 1, got " << epochs);
        AIM_CHECK(batch_size >= 1, ConfigError,
                  "optimizer: batch_size must be >= 1, got " << batch_size);
        AIM_CHECK(lr_backbone > 0.0 && lr_topdown > 0.0, ConfigError,
                  "optimizer: learning rates must be positive");
        AIM_CHECK(weight_decay >= 0.0, ConfigError,
                  "optimizer: weight_decay must be >= 0, got " << weight_decay);
        AIM_CHECK(dropout >= 0.0 && dropout < 1.0, ConfigError,
                  "optimizer: dropout must be in [0,1), got " << dropout);
    }
};

struct TrainOptions {
    bool hflip = true;
    std::string out_dir = "runs/run";
};

struct EvalOptions {
    int64_t shifted_crop_deviation = 0;
    std::string gradcam_layer = "auto";  // auto | fused | backbone:<i> | stage:<i>

    void validate() const {
        AIM_CHECK(shifted_crop_deviation >= 0, ConfigError,
                  "eval: shifted_crop_deviation must be >= 0, got " << shifted_crop_deviation);
    }
};

struct RunConfig {
    uint64_t seed = 1;
    std::string data_root = "data/spurious";
    SpuriousSpec data;
    ModelConfig model;
    LossConfig loss;
    AnnealSchedule anneal;
    OptimConfig optimizer;
    TrainOptions train;
    EvalOptions eval;

    void validate() const {
        data.validate();
        model.validate();
        loss.validate();
        anneal.validate();
        optimizer.validate();
        eval.validate();
        AIM_CHECK(data.image_size >= model.backbone.input_size, ConfigError,
                  "config: data.image_size " << data.image_size
                                             << " smaller than backbone input_size "
                                             << model.backbone.input_size);
    }
};

namespace detail {

using nlohmann::json;

// Rejects keys outside the section's schema so typos fail loudly.
inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& section) {
    AIM_CHECK(j.is_object(), ConfigError, "config: section '" << section
                                                              << "' must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const auto& a : allowed) ok = ok || key == a;
        AIM_CHECK(ok, ConfigError, "config: unknown key '" << key << "' in section '" << section
                                                           << "'");
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception& e) {
            AIM_THROW(ConfigError, "config: bad value for '" << key << "': " << e.what());
        }
    }
}

inline void read_variant(const json& j, const char* key, Variant& out) {
    if (j.contains(key)) out = parse_variant(j.at(key).get<std::string>());
}

inline void read_init_scheme(const json& j, const char* key, nn::InitScheme& out) {
    if (!j.contains(key)) return;
    const std::string s = j.at(key).get<std::string>();
    if (s == "standard_random") {
        out = nn::InitScheme::kStandardRandom;
    } else if (s == "edge_emphasized") {
        out = nn::InitScheme::kEdgeEmphasized;
    } else {
        AIM_THROW(ConfigError, "config: unknown init_scheme '" << s
                               << "' (expected standard_random|edge_emphasized)");
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::read_field;
    RunConfig cfg;
    check_keys(j,
               {"seed", "data", "backbone", "estimator", "gate", "topdown", "loss", "anneal",
                "optimizer", "train", "eval", "model_selection"},
               "<root>");
    read_field(j, "seed", cfg.seed);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d,
                   {"root", "num_classes", "image_size", "train_correlation", "train_per_class",
                    "val_per_class", "test_per_class"},
                   "data");
        read_field(d, "root", cfg.data_root);
        read_field(d, "num_classes", cfg.data.num_classes);
        read_field(d, "image_size", cfg.data.image_size);
        read_field(d, "train_correlation", cfg.data.train_correlation);
        read_field(d, "train_per_class", cfg.data.train_per_class);
        read_field(d, "val_per_class", cfg.data.val_per_class);
        read_field(d, "test_per_class", cfg.data.test_per_class);
    }
    cfg.model.num_classes = cfg.data.num_classes;

    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        check_keys(b,
                   {"input_size", "in_channels", "stage_channels", "stage_strides",
                    "blocks_per_stage", "norm_eps"},
                   "backbone");
        read_field(b, "input_size", cfg.model.backbone.input_size);
        read_field(b, "in_channels", cfg.model.backbone.in_channels);
        read_field(b, "stage_channels", cfg.model.backbone.stage_channels);
        read_field(b, "stage_strides", cfg.model.backbone.stage_strides);
        read_field(b, "blocks_per_stage", cfg.model.backbone.blocks_per_stage);
        read_field(b, "norm_eps", cfg.model.backbone.norm_eps);
    }
    if (j.contains("estimator")) {
        const auto& e = j.at("estimator");
        check_keys(e, {"hidden_channels", "num_residual_blocks", "init_scheme"}, "estimator");
        read_field(e, "hidden_channels", cfg.model.estimator.hidden_channels);
        read_field(e, "num_residual_blocks", cfg.model.estimator.num_residual_blocks);
        detail::read_init_scheme(e, "init_scheme", cfg.model.estimator.init_scheme);
    }
    if (j.contains("gate")) {
        const auto& g = j.at("gate");
        check_keys(g, {"temperature", "eval_threshold"}, "gate");
        read_field(g, "temperature", cfg.model.gate.temperature);
        read_field(g, "eval_threshold", cfg.model.gate.eval_threshold);
    }
    if (j.contains("topdown")) {
        const auto& t = j.at("topdown");
        check_keys(t,
                   {"termination_stage", "fused_channels", "variant", "use_auxiliary_losses",
                    "bottom_up_masked_stages"},
                   "topdown");
        read_field(t, "termination_stage", cfg.model.topdown.termination_stage);
        read_field(t, "fused_channels", cfg.model.topdown.fused_channels);
        detail::read_variant(t, "variant", cfg.model.topdown.variant);
        read_field(t, "use_auxiliary_losses", cfg.model.topdown.use_auxiliary_losses);
        read_field(t, "bottom_up_masked_stages", cfg.model.topdown.bottom_up_masked_stages);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        check_keys(l, {"lambda_mask", "label_smoothing", "tau_targets"}, "loss");
        read_field(l, "lambda_mask", cfg.loss.lambda_mask);
        read_field(l, "label_smoothing", cfg.loss.label_smoothing);
        if (l.contains("tau_targets")) {
            for (const auto& [stage, tau] : l.at("tau_targets").items()) {
                cfg.loss.tau_targets[detail::parse_int_field(stage, "tau_targets", 0)] =
                    tau.get<double>();
            }
        }
    }
    cfg.loss.use_auxiliary_losses = cfg.model.topdown.use_auxiliary_losses;

    if (j.contains("anneal")) {
        const auto& a = j.at("anneal");
        check_keys(a, {"start_epoch", "duration_epochs", "final_tau"}, "anneal");
        read_field(a, "start_epoch", cfg.anneal.start_epoch);
        read_field(a, "duration_epochs", cfg.anneal.duration_epochs);
        read_field(a, "final_tau", cfg.anneal.final_tau);
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        check_keys(o,
                   {"epochs", "batch_size", "lr_backbone", "lr_topdown", "weight_decay",
                    "cosine", "dropout"},
                   "optimizer");
        read_field(o, "epochs", cfg.optimizer.epochs);
        read_field(o, "batch_size", cfg.optimizer.batch_size);
        read_field(o, "lr_backbone", cfg.optimizer.lr_backbone);
        read_field(o, "lr_topdown", cfg.optimizer.lr_topdown);
        read_field(o, "weight_decay", cfg.optimizer.weight_decay);
        read_field(o, "cosine", cfg.optimizer.cosine);
        read_field(o, "dropout", cfg.optimizer.dropout);
    }
    cfg.model.dropout = cfg.optimizer.dropout;

    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, {"hflip", "out_dir"}, "train");
        read_field(t, "hflip", cfg.train.hflip);
        read_field(t, "out_dir", cfg.train.out_dir);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, {"shifted_crop_deviation", "gradcam_layer"}, "eval");
        read_field(e, "shifted_crop_deviation", cfg.eval.shifted_crop_deviation);
        read_field(e, "gradcam_layer", cfg.eval.gradcam_layer);
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["data"] = {{"root", cfg.data_root},
                 {"num_classes", cfg.data.num_classes},
                 {"image_size", cfg.data.image_size},
                 {"train_correlation", cfg.data.train_correlation},
                 {"train_per_class", cfg.data.train_per_class},
                 {"val_per_class", cfg.data.val_per_class},
                 {"test_per_class", cfg.data.test_per_class}};
    j["backbone"] = {{"input_size", cfg.model.backbone.input_size},
                     {"in_channels", cfg.model.backbone.in_channels},
                     {"stage_channels", cfg.model.backbone.stage_channels},
                     {"stage_strides", cfg.model.backbone.stage_strides},
                     {"blocks_per_stage", cfg.model.backbone.blocks_per_stage},
                     {"norm_eps", cfg.model.backbone.norm_eps}};
    j["estimator"] = {{"hidden_channels", cfg.model.estimator.hidden_channels},
                      {"num_residual_blocks", cfg.model.estimator.num_residual_blocks},
                      {"init_scheme", cfg.model.estimator.init_scheme ==
                                              nn::InitScheme::kEdgeEmphasized
                                          ? "edge_emphasized"
                                          : "standard_random"}};
    j["gate"] = {{"temperature", cfg.model.gate.temperature},
                 {"eval_threshold", cfg.model.gate.eval_threshold}};
    j["topdown"] = {{"termination_stage", cfg.model.topdown.termination_stage},
                    {"fused_channels", cfg.model.topdown.fused_channels},
                    {"variant", variant_name(cfg.model.topdown.variant)},
                    {"use_auxiliary_losses", cfg.model.topdown.use_auxiliary_losses},
                    {"bottom_up_masked_stages", cfg.model.topdown.bottom_up_masked_stages}};
    nlohmann::json taus = nlohmann::json::object();
    for (const auto& [stage, tau] : cfg.loss.tau_targets) taus[std::to_string(stage)] = tau;
    j["loss"] = {{"lambda_mask", cfg.loss.lambda_mask},
                 {"label_smoothing", cfg.loss.label_smoothing},
                 {"tau_targets", taus}};
    j["anneal"] = {{"start_epoch", cfg.anneal.start_epoch},
                   {"duration_epochs", cfg.anneal.duration_epochs},
                   {"final_tau", cfg.anneal.final_tau}};
    j["optimizer"] = {{"epochs", cfg.optimizer.epochs},
                      {"batch_size", cfg.optimizer.batch_size},
                      {"lr_backbone", cfg.optimizer.lr_backbone},
                      {"lr_topdown", cfg.optimizer.lr_topdown},
                      {"weight_decay", cfg.optimizer.weight_decay},
                      {"cosine", cfg.optimizer.cosine},
                      {"dropout", cfg.optimizer.dropout}};
    j["train"] = {{"hflip", cfg.train.hflip}, {"out_dir", cfg.train.out_dir}};
    j["eval"] = {{"shifted_crop_deviation", cfg.eval.shifted_crop_deviation},
                 {"gradcam_layer", cfg.eval.gradcam_layer}};
    return j;
}

// `key.path=value` override applied to the raw JSON before parsing. The value
// is itself parsed as JSON when possible (numbers, bools, arrays) and used as
// a bare string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& kv) {
    const size_t eq = kv.find('=');
    AIM_CHECK(eq != std::string::npos && eq > 0, ArgError,
              "--set expects key.path=value, got '" << kv << "'");
    const std::string key = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    nlohmann::json* cur = &j;
    size_t start = 0;
    while (true) {
        const size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot - start);
        AIM_CHECK(!part.empty(), ArgError, "--set: empty path component in '" << key << "'");
        cur = &(*cur)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    const nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    *cur = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    AIM_CHECK(f.good(), IoError, "cannot open " << path);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        AIM_THROW(IoError, path << ": " << e.what());
    }
}

// Load, apply overrides, parse, validate. An empty path starts from defaults.
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
    nlohmann::json j = path.empty() ? nlohmann::json::object() : read_json_file(path);
    for (const auto& kv : overrides) apply_override(j, kv);
    return parse_run_config(j);
}

}  // namespace aim

#endif  // AIM_CONFIG_HPP
