#pragma once

#include "sem2/behavior/behavior.hpp"
#include "sem2/envsim/env.hpp"
#include "sem2/replay/replay.hpp"
#include "sem2/worldmodel/worldmodel.hpp"

#include <json.hpp>

#include <string>

namespace sem2 {

enum class Variant { sem2, no_filter, no_multisource };

Variant variant_from_string(const std::string& s);
const char* to_string(Variant v);

struct ScheduleConfig {
    int64_t total_env_steps = 10000;
    int train_every = 5;          // env steps per update round
    int prefill_episodes = 5;     // random-policy episodes before updates
    int64_t eval_every = 2000;    // env steps between evaluations
    int eval_episodes = 4;
    int64_t checkpoint_every = 0; // 0: only final/best
    double explore_sigma = 0.3;   // pre-squash exploration noise
    int64_t explore_anneal_steps = 8000;
    std::string out_dir = "runs/sem2";
};

struct RunConfig {
    Variant variant = Variant::sem2;
    uint64_t seed = 0;
    EnvConfig env;
    ModelConfig model;
    ReplayConfig replay;
    BehaviorConfig behavior;
    ScheduleConfig schedule;

    // applies variant wiring (filter/mask heads, corner buckets)
    void finalize();
    void validate() const;
};

// Config file is JSON; unknown keys are rejected, missing keys fall back to
// the defaults above. `overrides` entries look like "model.d_h=64" (also
// read from the SEM2_OVERRIDES environment variable, comma/semicolon
// separated).
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});
RunConfig run_config_from_json(const nlohmann::json& j,
                               const std::vector<std::string>& overrides = {});
nlohmann::json run_config_to_json(const RunConfig& cfg);

std::vector<std::string> overrides_from_env();

Weather weather_from_json(const nlohmann::json& j);

} // namespace sem2
