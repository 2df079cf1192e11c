#include "sem2/pipeline/config.hpp"

#include "sem2/core/error.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace sem2 {

using nlohmann::json;

Variant variant_from_string(const std::string& s) {
    if (s == "sem2") return Variant::sem2;
    if (s == "no_filter") return Variant::no_filter;
    if (s == "no_multisource") return Variant::no_multisource;
    throw UsageError("unknown variant '" + s + "' (expected sem2|no_filter|no_multisource)");
}

const char* to_string(Variant v) {
    switch (v) {
        case Variant::sem2: return "sem2";
        case Variant::no_filter: return "no_filter";
        case Variant::no_multisource: return "no_multisource";
    }
    return "unknown";
}

void RunConfig::finalize() {
    model.raster = env.raster;
    model.has_filter = variant != Variant::no_filter;
    replay.multisource = variant != Variant::no_multisource;
}

void RunConfig::validate() const {
    if (env.raster < 8) throw UsageError("config: env.raster must be >= 8");
    if (env.episode_cap < 1) throw UsageError("config: env.episode_cap must be >= 1");
    if (model.d_h < 1 || model.groups < 1 || model.classes < 1 || model.d_m < 1)
        throw UsageError("config: model dimensions must be positive");
    if (replay.batch_size < 1 || replay.sequence_length < 1)
        throw UsageError("config: replay batch dims must be positive");
    if (behavior.horizon < 1) throw UsageError("config: behavior.horizon must be >= 1");
    if (behavior.gamma < 0.0 || behavior.gamma > 1.0 || behavior.lambda < 0.0 ||
        behavior.lambda > 1.0)
        throw UsageError("config: gamma/lambda must lie in [0, 1]");
    if (behavior.eta < 0.0) throw UsageError("config: behavior.eta must be >= 0");
    if (schedule.total_env_steps < 1 || schedule.train_every < 1)
        throw UsageError("config: schedule must be positive");
}

namespace {

// read `key` if present, erase it from the working copy so leftovers can be
// reported as unknown keys
template <typename T>
void take(json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        out = it->get<T>();
    } catch (const std::exception& e) {
        throw UsageError(std::string("config key '") + key + "': " + e.what());
    }
    j.erase(it);
}

void reject_unknown(const json& j, const std::string& scope) {
    if (!j.empty())
        throw UsageError("config: unknown key '" + scope + "." + j.begin().key() + "'");
}

void parse_weather(json j, Weather& w) {
    std::vector<double> tint;
    take(j, "tint", tint);
    if (!tint.empty()) {
        if (tint.size() != 3) throw UsageError("config: weather.tint needs 3 entries");
        w.tint = {tint[0], tint[1], tint[2]};
    }
    take(j, "noise_std", w.noise_std);
    take(j, "blob_seed", w.blob_seed);
    take(j, "blob_count", w.blob_count);
    take(j, "blob_intensity", w.blob_intensity);
    reject_unknown(j, "weather");
}

} // namespace

Weather weather_from_json(const nlohmann::json& j) {
    Weather w;
    parse_weather(j, w);
    return w;
}

RunConfig run_config_from_json(const json& root, const std::vector<std::string>& overrides) {
    json j = root;

    // apply "a.b.c=value" overrides onto the json tree before parsing
    auto all = overrides;
    for (const auto& ov : overrides_from_env()) all.push_back(ov);
    for (const auto& ov : all) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw UsageError("override '" + ov + "' is not of the form key.path=value");
        const std::string path = ov.substr(0, eq);
        const std::string value = ov.substr(eq + 1);
        json* node = &j;
        std::stringstream ss(path);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) parts.push_back(part);
        if (parts.empty()) throw UsageError("override '" + ov + "' has an empty key path");
        for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (...) {
            parsed = value;  // bare strings allowed
        }
        (*node)[parts.back()] = parsed;
    }

    RunConfig cfg;
    std::string variant_name = "sem2";
    take(j, "variant", variant_name);
    cfg.variant = variant_from_string(variant_name);
    take(j, "seed", cfg.seed);

    if (j.contains("env")) {
        json e = j["env"];
        j.erase("env");
        take(e, "layout", cfg.env.layout);
        take(e, "layout_file", cfg.env.layout_file);
        take(e, "raster", cfg.env.raster);
        take(e, "view_extent", cfg.env.view_extent);
        take(e, "episode_cap", cfg.env.episode_cap);
        take(e, "cte_threshold", cfg.env.cte_threshold);
        take(e, "spawn_yaw_jitter", cfg.env.spawn_yaw_jitter);
        if (e.contains("weather")) {
            parse_weather(e["weather"], cfg.env.weather);
            e.erase("weather");
        }
        reject_unknown(e, "env");
    }
    if (j.contains("model")) {
        json m = j["model"];
        j.erase("model");
        take(m, "d_h", cfg.model.d_h);
        take(m, "groups", cfg.model.groups);
        take(m, "classes", cfg.model.classes);
        take(m, "d_m", cfg.model.d_m);
        take(m, "embed", cfg.model.embed);
        take(m, "hidden", cfg.model.hidden);
        take(m, "cnn_base", cfg.model.cnn_base);
        take(m, "beta", cfg.model.beta);
        take(m, "kl_balance", cfg.model.kl_balance);
        take(m, "kl_alpha", cfg.model.kl_alpha);
        take(m, "free_bits", cfg.model.free_bits);
        take(m, "lr", cfg.model.lr);
        take(m, "grad_clip", cfg.model.grad_clip);
        reject_unknown(m, "model");
    }
    if (j.contains("replay")) {
        json r = j["replay"];
        j.erase("replay");
        take(r, "common_capacity", cfg.replay.common_capacity);
        take(r, "corner_capacity", cfg.replay.corner_capacity);
        take(r, "batch_size", cfg.replay.batch_size);
        take(r, "sequence_length", cfg.replay.sequence_length);
        take(r, "dump_dir", cfg.replay.dump_dir);
        reject_unknown(r, "replay");
    }
    if (j.contains("behavior")) {
        json b = j["behavior"];
        j.erase("behavior");
        take(b, "horizon", cfg.behavior.horizon);
        take(b, "gamma", cfg.behavior.gamma);
        take(b, "lambda", cfg.behavior.lambda);
        take(b, "eta", cfg.behavior.eta);
        take(b, "actor_lr", cfg.behavior.actor_lr);
        take(b, "critic_lr", cfg.behavior.critic_lr);
        take(b, "grad_clip", cfg.behavior.grad_clip);
        take(b, "hidden", cfg.behavior.hidden);
        take(b, "log_std_min", cfg.behavior.log_std_min);
        take(b, "log_std_max", cfg.behavior.log_std_max);
        reject_unknown(b, "behavior");
    }
    if (j.contains("schedule")) {
        json s = j["schedule"];
        j.erase("schedule");
        take(s, "total_env_steps", cfg.schedule.total_env_steps);
        take(s, "train_every", cfg.schedule.train_every);
        take(s, "prefill_episodes", cfg.schedule.prefill_episodes);
        take(s, "eval_every", cfg.schedule.eval_every);
        take(s, "eval_episodes", cfg.schedule.eval_episodes);
        take(s, "checkpoint_every", cfg.schedule.checkpoint_every);
        take(s, "explore_sigma", cfg.schedule.explore_sigma);
        take(s, "explore_anneal_steps", cfg.schedule.explore_anneal_steps);
        take(s, "out_dir", cfg.schedule.out_dir);
        reject_unknown(s, "schedule");
    }
    reject_unknown(j, "");

    cfg.finalize();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw UsageError("config file " + path + ": " + e.what());
    }
    return run_config_from_json(j, overrides);
}

json run_config_to_json(const RunConfig& cfg) {
    json w = {{"tint", {cfg.env.weather.tint[0], cfg.env.weather.tint[1], cfg.env.weather.tint[2]}},
              {"noise_std", cfg.env.weather.noise_std},
              {"blob_seed", cfg.env.weather.blob_seed},
              {"blob_count", cfg.env.weather.blob_count},
              {"blob_intensity", cfg.env.weather.blob_intensity}};
    return json{
        {"variant", to_string(cfg.variant)},
        {"seed", cfg.seed},
        {"env",
         {{"layout", cfg.env.layout},
          {"layout_file", cfg.env.layout_file},
          {"raster", cfg.env.raster},
          {"view_extent", cfg.env.view_extent},
          {"episode_cap", cfg.env.episode_cap},
          {"cte_threshold", cfg.env.cte_threshold},
          {"spawn_yaw_jitter", cfg.env.spawn_yaw_jitter},
          {"weather", w}}},
        {"model",
         {{"d_h", cfg.model.d_h},
          {"groups", cfg.model.groups},
          {"classes", cfg.model.classes},
          {"d_m", cfg.model.d_m},
          {"embed", cfg.model.embed},
          {"hidden", cfg.model.hidden},
          {"cnn_base", cfg.model.cnn_base},
          {"beta", cfg.model.beta},
          {"kl_balance", cfg.model.kl_balance},
          {"kl_alpha", cfg.model.kl_alpha},
          {"free_bits", cfg.model.free_bits},
          {"lr", cfg.model.lr},
          {"grad_clip", cfg.model.grad_clip}}},
        {"replay",
         {{"common_capacity", cfg.replay.common_capacity},
          {"corner_capacity", cfg.replay.corner_capacity},
          {"batch_size", cfg.replay.batch_size},
          {"sequence_length", cfg.replay.sequence_length},
          {"dump_dir", cfg.replay.dump_dir}}},
        {"behavior",
         {{"horizon", cfg.behavior.horizon},
          {"gamma", cfg.behavior.gamma},
          {"lambda", cfg.behavior.lambda},
          {"eta", cfg.behavior.eta},
          {"actor_lr", cfg.behavior.actor_lr},
          {"critic_lr", cfg.behavior.critic_lr},
          {"grad_clip", cfg.behavior.grad_clip},
          {"hidden", cfg.behavior.hidden},
          {"log_std_min", cfg.behavior.log_std_min},
          {"log_std_max", cfg.behavior.log_std_max}}},
        {"schedule",
         {{"total_env_steps", cfg.schedule.total_env_steps},
          {"train_every", cfg.schedule.train_every},
          {"prefill_episodes", cfg.schedule.prefill_episodes},
          {"eval_every", cfg.schedule.eval_every},
          {"eval_episodes", cfg.schedule.eval_episodes},
          {"checkpoint_every", cfg.schedule.checkpoint_every},
          {"explore_sigma", cfg.schedule.explore_sigma},
          {"explore_anneal_steps", cfg.schedule.explore_anneal_steps},
          {"out_dir", cfg.schedule.out_dir}}},
    };
}

std::vector<std::string> overrides_from_env() {
    std::vector<std::string> out;
    const char* raw = std::getenv("SEM2_OVERRIDES");
    if (!raw) return out;
    std::string s(raw);
    std::string cur;
    for (char ch : s) {
        if (ch == ',' || ch == ';') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

} // namespace sem2
