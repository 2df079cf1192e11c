#pragma once

#include "sem2/behavior/behavior.hpp"
#include "sem2/pipeline/config.hpp"
#include "sem2/worldmodel/worldmodel.hpp"

#include <memory>
#include <string>

namespace sem2 {

// Versioned binary container: config echo, parameter tensors, optimizer
// moments and the global step counter.
struct Checkpoint {
    RunConfig config;
    int64_t global_step = 0;
    std::unique_ptr<WorldModel> world_model;
    std::unique_ptr<ActorCritic> actor_critic;
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, int64_t global_step,
                     const WorldModel& wm, const ActorCritic& ac);

// Loading verifies the stored parameter shapes; with `expect` set, any
// model-relevant config mismatch is an error listing the offending keys.
Checkpoint load_checkpoint(const std::string& path, const RunConfig* expect = nullptr);

} // namespace sem2
