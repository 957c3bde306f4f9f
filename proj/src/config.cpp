#include "niwf/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "niwf/backbone.hpp"

namespace niwf {

using nlohmann::json;

std::string to_string(RunMode mode) {
    switch (mode) {
        case RunMode::NiwfSoft: return "niwf_soft";
        case RunMode::NiwfHard: return "niwf_hard";
        case RunMode::NoLock: return "no_lock";
        case RunMode::NoSep: return "no_sep";
        case RunMode::NoDynamics: return "no_dynamics";
        case RunMode::DenseGating: return "dense_gating";
        case RunMode::SingleAdapterSeq: return "single_adapter_seq";
    }
    return "niwf_soft";
}

RunMode mode_from_string(const std::string& name) {
    if (name == "niwf_soft") return RunMode::NiwfSoft;
    if (name == "niwf_hard") return RunMode::NiwfHard;
    if (name == "no_lock") return RunMode::NoLock;
    if (name == "no_sep") return RunMode::NoSep;
    if (name == "no_dynamics") return RunMode::NoDynamics;
    if (name == "dense_gating") return RunMode::DenseGating;
    if (name == "single_adapter_seq") return RunMode::SingleAdapterSeq;
    throw ConfigError("unknown mode: " + name);
}

std::vector<std::string> Config::targets() const {
    return target_modules.empty() ? kTargetModuleNames : target_modules;
}

void Config::validate() const {
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (rank < 1 || rank > std::min(d_model, d_ff)) throw ConfigError("rank outside valid range");
    if (top_k < 1 || top_k > num_bases) throw ConfigError("top_k must lie in [1, num_bases]");
    if (payload_min < 1 || payload_max < payload_min) throw ConfigError("payload length range invalid");
    if (2 * payload_max + 2 > max_seq_len) {
        throw ConfigError("max_seq_len too small for payload_max (need 2*payload_max + 2)");
    }
    if (vocab_size < 8) throw ConfigError("vocab_size must be at least 8");
    if (batch_size < 1 || grad_accum < 1) throw ConfigError("batch_size and grad_accum must be >= 1");
    if (anchors_per_region < 1) throw ConfigError("anchors_per_region must be >= 1");
    if (region_quantile <= 0.0 || region_quantile > 1.0) throw ConfigError("region_quantile must be in (0, 1]");
    if (lambda_lock < 0.0f || lambda_sep < 0.0f || lambda_budget < 0.0f || margin < 0.0f) {
        throw ConfigError("loss weights must be non-negative");
    }
    std::set<std::string> known(kTargetModuleNames.begin(), kTargetModuleNames.end());
    for (const auto& t : target_modules) {
        if (known.find(t) == known.end()) throw ConfigError("unknown target module: " + t);
    }
}

void normalize(Config& cfg) {
    switch (cfg.mode) {
        case RunMode::DenseGating:
            cfg.top_k = cfg.num_bases;
            break;
        case RunMode::SingleAdapterSeq:
            cfg.num_bases = 1;
            cfg.top_k = 1;
            break;
        default:
            break;
    }
    cfg.validate();
}

Config default_config() {
    Config cfg;
    normalize(cfg);
    return cfg;
}

namespace {

template <typename T>
void read_int(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number_integer() && !j.at(key).is_number_unsigned()) {
        throw ConfigError(std::string("config key '") + key + "' must be an integer");
    }
    out = j.at(key).get<T>();
}

void read_float(const json& j, const char* key, float& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
    out = j.at(key).get<float>();
}

void read_double(const json& j, const char* key, double& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
    out = j.at(key).get<double>();
}

void read_bool(const json& j, const char* key, bool& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_boolean()) throw ConfigError(std::string("config key '") + key + "' must be a boolean");
    out = j.at(key).get<bool>();
}

void read_string(const json& j, const char* key, std::string& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
    out = j.at(key).get<std::string>();
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "mode", "seed", "n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len",
        "rank", "num_bases", "top_k", "alpha", "target_modules", "coord_dim", "field_hidden",
        "share_layers", "freeze_dynamics_after_commit", "train_examples", "val_examples",
        "payload_min", "payload_max", "learning_rate", "pretrain_learning_rate", "weight_decay",
        "grad_clip", "warmup_fraction", "grad_accum", "batch_size", "steps_per_task",
        "pretrain_steps", "lambda_lock", "lambda_sep", "lambda_budget", "margin",
        "anchors_per_region", "region_quantile", "out_dir", "checkpoint_dir",
    };
    return keys;
}

}  // namespace

Config parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (known_keys().find(it.key()) == known_keys().end()) {
            throw ConfigError("unknown config key: " + it.key());
        }
    }
    Config cfg;
    if (j.contains("mode")) {
        if (!j.at("mode").is_string()) throw ConfigError("config key 'mode' must be a string");
        cfg.mode = mode_from_string(j.at("mode").get<std::string>());
    }
    read_int(j, "seed", cfg.seed);
    read_int(j, "n_layers", cfg.n_layers);
    read_int(j, "d_model", cfg.d_model);
    read_int(j, "n_heads", cfg.n_heads);
    read_int(j, "d_ff", cfg.d_ff);
    read_int(j, "vocab_size", cfg.vocab_size);
    read_int(j, "max_seq_len", cfg.max_seq_len);
    read_int(j, "rank", cfg.rank);
    read_int(j, "num_bases", cfg.num_bases);
    read_int(j, "top_k", cfg.top_k);
    read_float(j, "alpha", cfg.alpha);
    if (j.contains("target_modules")) {
        if (!j.at("target_modules").is_array()) throw ConfigError("config key 'target_modules' must be an array");
        cfg.target_modules = j.at("target_modules").get<std::vector<std::string>>();
    }
    read_int(j, "coord_dim", cfg.coord_dim);
    read_int(j, "field_hidden", cfg.field_hidden);
    read_bool(j, "share_layers", cfg.share_layers);
    read_bool(j, "freeze_dynamics_after_commit", cfg.freeze_dynamics_after_commit);
    read_int(j, "train_examples", cfg.train_examples);
    read_int(j, "val_examples", cfg.val_examples);
    read_int(j, "payload_min", cfg.payload_min);
    read_int(j, "payload_max", cfg.payload_max);
    read_float(j, "learning_rate", cfg.learning_rate);
    read_float(j, "pretrain_learning_rate", cfg.pretrain_learning_rate);
    read_float(j, "weight_decay", cfg.weight_decay);
    read_float(j, "grad_clip", cfg.grad_clip);
    read_float(j, "warmup_fraction", cfg.warmup_fraction);
    read_int(j, "grad_accum", cfg.grad_accum);
    read_int(j, "batch_size", cfg.batch_size);
    read_int(j, "steps_per_task", cfg.steps_per_task);
    read_int(j, "pretrain_steps", cfg.pretrain_steps);
    read_float(j, "lambda_lock", cfg.lambda_lock);
    read_float(j, "lambda_sep", cfg.lambda_sep);
    read_float(j, "lambda_budget", cfg.lambda_budget);
    read_float(j, "margin", cfg.margin);
    read_int(j, "anchors_per_region", cfg.anchors_per_region);
    read_double(j, "region_quantile", cfg.region_quantile);
    read_string(j, "out_dir", cfg.out_dir);
    read_string(j, "checkpoint_dir", cfg.checkpoint_dir);
    normalize(cfg);
    return cfg;
}

Config load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_json(ss.str());
}

std::string config_to_json(const Config& cfg) {
    json j;
    j["mode"] = to_string(cfg.mode);
    j["seed"] = cfg.seed;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["rank"] = cfg.rank;
    j["num_bases"] = cfg.num_bases;
    j["top_k"] = cfg.top_k;
    j["alpha"] = cfg.alpha;
    j["target_modules"] = cfg.target_modules;
    j["coord_dim"] = cfg.coord_dim;
    j["field_hidden"] = cfg.field_hidden;
    j["share_layers"] = cfg.share_layers;
    j["freeze_dynamics_after_commit"] = cfg.freeze_dynamics_after_commit;
    j["train_examples"] = cfg.train_examples;
    j["val_examples"] = cfg.val_examples;
    j["payload_min"] = cfg.payload_min;
    j["payload_max"] = cfg.payload_max;
    j["learning_rate"] = cfg.learning_rate;
    j["pretrain_learning_rate"] = cfg.pretrain_learning_rate;
    j["weight_decay"] = cfg.weight_decay;
    j["grad_clip"] = cfg.grad_clip;
    j["warmup_fraction"] = cfg.warmup_fraction;
    j["grad_accum"] = cfg.grad_accum;
    j["batch_size"] = cfg.batch_size;
    j["steps_per_task"] = cfg.steps_per_task;
    j["pretrain_steps"] = cfg.pretrain_steps;
    j["lambda_lock"] = cfg.lambda_lock;
    j["lambda_sep"] = cfg.lambda_sep;
    j["lambda_budget"] = cfg.lambda_budget;
    j["margin"] = cfg.margin;
    j["anchors_per_region"] = cfg.anchors_per_region;
    j["region_quantile"] = cfg.region_quantile;
    j["out_dir"] = cfg.out_dir;
    j["checkpoint_dir"] = cfg.checkpoint_dir;
    return j.dump(2);
}

}  // namespace niwf
