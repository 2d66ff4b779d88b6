#pragma once

// Run configuration: "key = value" lines with dotted keys, '#' comments.
// A key may be abbreviated to any dotted suffix that names exactly one key
// ("sahr_q" for "model.sahr_q"). Unknown or ambiguous keys are errors.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/model.hpp"
#include "sahr/prune_plan.hpp"
#include "sahr/tasks.hpp"
#include "sahr/training.hpp"

namespace sahr {

struct RunConfig {
    std::string name = "run";
    std::string output_dir;  // empty: $SAHR_OUTPUT_ROOT/name, or runs/name
    std::uint64_t seed = 1;
    ModelConfig model;
    std::string prune_plan_path;
    TaskSpec task;
    TrainConfig train;

    // Model config with the task-owned widths filled in and any prune plan loaded.
    ModelConfig model_config() const {
        ModelConfig m = model;
        m.vocab_size = task.vocab_size;
        m.input_dim = task.input_dim;
        if (!prune_plan_path.empty()) {
            std::ifstream is(prune_plan_path);
            if (!is) throw std::invalid_argument("model.prune_plan: cannot open " + prune_plan_path);
            m.prune_plan = read_prune_plan(is);
        }
        return m;
    }

    TrainConfig train_config() const {
        TrainConfig t = train;
        t.seed = seed;
        return t;
    }

    std::string resolved_output_dir() const {
        if (!output_dir.empty()) return output_dir;
        const char* root = std::getenv("SAHR_OUTPUT_ROOT");
        return std::string(root && *root ? root : "runs") + "/" + name;
    }

    void validate() const {
        if (name.empty()) throw std::invalid_argument("name: must not be empty");
        task.validate();
        model_config().validate();
        train_config().validate();
    }
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T value{};
    const char* first = text.data();
    const char* last = first + text.size();
    if constexpr (std::is_floating_point_v<T>) {
        char* end = nullptr;
        value = std::strtod(first, &end);
        if (text.empty() || end != last) throw ConfigError(key + ": expected a number, got '" + text + "'");
    } else {
        const auto [ptr, ec] = std::from_chars(first, last, value);
        if (ec != std::errc() || ptr != last)
            throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
    }
    return value;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

struct ConfigKey {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

template <typename Field>
ConfigKey make_key(std::string name, Field field) {
    ConfigKey k;
    k.name = name;
    k.get = [field](const RunConfig& c) {
        using T = std::remove_cvref_t<decltype(field(const_cast<RunConfig&>(c)))>;
        const T& v = field(const_cast<RunConfig&>(c));
        if constexpr (std::is_floating_point_v<T>)
            return format_real(v);
        else if constexpr (std::is_same_v<T, std::string>)
            return v;
        else
            return std::to_string(v);
    };
    k.set = [field, name](RunConfig& c, const std::string& text) {
        auto& v = field(c);
        using T = std::remove_cvref_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::string>)
            v = text;
        else
            v = parse_number<T>(name, text);
    };
    return k;
}

}  // namespace detail

// Every recognised key, in snapshot order.
inline const std::vector<ConfigKey>& config_keys() {
    using detail::make_key;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        k.push_back(make_key("name", [](RunConfig& c) -> auto& { return c.name; }));
        k.push_back(make_key("output_dir", [](RunConfig& c) -> auto& { return c.output_dir; }));
        k.push_back(make_key("seed", [](RunConfig& c) -> auto& { return c.seed; }));

        k.push_back(make_key("model.enc_layers", [](RunConfig& c) -> auto& { return c.model.enc_layers; }));
        k.push_back(make_key("model.dec_layers", [](RunConfig& c) -> auto& { return c.model.dec_layers; }));
        k.push_back(make_key("model.heads", [](RunConfig& c) -> auto& { return c.model.heads; }));
        k.push_back(make_key("model.d_model", [](RunConfig& c) -> auto& { return c.model.d_model; }));
        k.push_back(make_key("model.d_k", [](RunConfig& c) -> auto& { return c.model.d_k; }));
        k.push_back(make_key("model.d_v", [](RunConfig& c) -> auto& { return c.model.d_v; }));
        k.push_back(make_key("model.d_ff", [](RunConfig& c) -> auto& { return c.model.d_ff; }));
        k.push_back(make_key("model.conv_kernel", [](RunConfig& c) -> auto& { return c.model.conv_kernel; }));
        ConfigKey block;
        block.name = "model.block_kind";
        block.get = [](const RunConfig& c) { return std::string(block_kind_name(c.model.block_kind)); };
        block.set = [](RunConfig& c, const std::string& v) {
            if (v == "transformer")
                c.model.block_kind = BlockKind::transformer;
            else if (v == "conformer")
                c.model.block_kind = BlockKind::conformer;
            else
                throw ConfigError("model.block_kind: expected transformer or conformer, got '" + v + "'");
        };
        k.push_back(block);
        k.push_back(make_key("model.dropout_rate", [](RunConfig& c) -> auto& { return c.model.dropout_rate; }));
        k.push_back(make_key("model.sahr_q", [](RunConfig& c) -> auto& { return c.model.sahr_q; }));
        k.push_back(make_key("model.q_encoder_self", [](RunConfig& c) -> auto& { return c.model.q_encoder_self; }));
        k.push_back(make_key("model.q_decoder_self", [](RunConfig& c) -> auto& { return c.model.q_decoder_self; }));
        k.push_back(make_key("model.q_decoder_inter", [](RunConfig& c) -> auto& { return c.model.q_decoder_inter; }));
        k.push_back(make_key("model.lambda_ctc", [](RunConfig& c) -> auto& { return c.model.lambda_ctc; }));
        k.push_back(make_key("model.prune_plan", [](RunConfig& c) -> auto& { return c.prune_plan_path; }));

        ConfigKey kind;
        kind.name = "task.kind";
        kind.get = [](const RunConfig& c) { return std::string(task_kind_name(c.task.kind)); };
        kind.set = [](RunConfig& c, const std::string& v) {
            try {
                c.task.kind = parse_task_kind(v);
            } catch (const std::invalid_argument&) {
                throw ConfigError("task.kind: expected copy, reverse or local_pattern, got '" + v + "'");
            }
        };
        k.push_back(kind);
        k.push_back(make_key("task.vocab_size", [](RunConfig& c) -> auto& { return c.task.vocab_size; }));
        k.push_back(make_key("task.min_len", [](RunConfig& c) -> auto& { return c.task.min_len; }));
        k.push_back(make_key("task.max_len", [](RunConfig& c) -> auto& { return c.task.max_len; }));
        k.push_back(make_key("task.input_dim", [](RunConfig& c) -> auto& { return c.task.input_dim; }));
        k.push_back(make_key("task.frames_per_token", [](RunConfig& c) -> auto& { return c.task.frames_per_token; }));
        k.push_back(make_key("task.noise_std", [](RunConfig& c) -> auto& { return c.task.noise_std; }));
        k.push_back(make_key("task.train_size", [](RunConfig& c) -> auto& { return c.task.train_size; }));
        k.push_back(make_key("task.dev_size", [](RunConfig& c) -> auto& { return c.task.dev_size; }));
        k.push_back(make_key("task.test_size", [](RunConfig& c) -> auto& { return c.task.test_size; }));
        k.push_back(make_key("task.seed", [](RunConfig& c) -> auto& { return c.task.seed; }));

        k.push_back(make_key("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
        k.push_back(make_key("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
        k.push_back(make_key("train.max_steps", [](RunConfig& c) -> auto& { return c.train.max_steps; }));
        k.push_back(make_key("train.warmup_steps", [](RunConfig& c) -> auto& { return c.train.warmup_steps; }));
        k.push_back(make_key("train.lr_scale", [](RunConfig& c) -> auto& { return c.train.lr_scale; }));
        k.push_back(make_key("train.label_smoothing", [](RunConfig& c) -> auto& { return c.train.label_smoothing; }));
        k.push_back(make_key("train.average_last", [](RunConfig& c) -> auto& { return c.train.average_last; }));
        k.push_back(make_key("train.stop_accuracy", [](RunConfig& c) -> auto& { return c.train.stop_accuracy; }));
        k.push_back(make_key("train.eval_every", [](RunConfig& c) -> auto& { return c.train.eval_every; }));
        k.push_back(make_key("train.adam_beta1", [](RunConfig& c) -> auto& { return c.train.adam.beta1; }));
        k.push_back(make_key("train.adam_beta2", [](RunConfig& c) -> auto& { return c.train.adam.beta2; }));
        k.push_back(make_key("train.adam_eps", [](RunConfig& c) -> auto& { return c.train.adam.eps; }));
        return k;
    }();
    return keys;
}

// Full key for name: an exact match, else the only key ending in "." + name.
inline const ConfigKey& resolve_key(const std::string& name) {
    const auto& keys = config_keys();
    for (const auto& k : keys)
        if (k.name == name) return k;
    std::vector<const ConfigKey*> matches;
    const std::string tail = "." + name;
    for (const auto& k : keys)
        if (k.name.size() > tail.size() && k.name.compare(k.name.size() - tail.size(), tail.size(), tail) == 0)
            matches.push_back(&k);
    if (matches.empty()) throw ConfigError("unknown key '" + name + "'");
    if (matches.size() > 1) {
        std::string list;
        for (const auto* m : matches) list += (list.empty() ? "" : ", ") + m->name;
        throw ConfigError("ambiguous key '" + name + "' (matches " + list + ")");
    }
    return *matches.front();
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    resolve_key(detail::trim(key)).set(cfg, detail::trim(value));
}

// Applies "key=value" text.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set_config_value(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

inline void read_config(std::istream& is, RunConfig& cfg, const std::string& source = "config") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        try {
            apply_override(cfg, line);
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    RunConfig cfg;
    read_config(is, cfg, path);
    return cfg;
}

// Every key with its current value; reading it back reproduces cfg exactly.
inline void write_config(std::ostream& os, const RunConfig& cfg, const std::vector<std::string>& overrides = {}) {
    for (const auto& o : overrides) os << "# override " << o << '\n';
    for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    for (const auto& k : config_keys())
        if (k.get(a) != k.get(b)) return false;
    return true;
}

}  // namespace sahr
