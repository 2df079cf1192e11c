#pragma once

#include "sem2/behavior/behavior.hpp"
#include "sem2/pipeline/checkpoint.hpp"
#include "sem2/pipeline/config.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace sem2 {

// Line-delimited JSON records with a fixed key order so identical runs
// produce byte-identical streams.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path);
    void write(const nlohmann::ordered_json& record);
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ofstream out_;
};

struct TrainResult {
    std::string final_checkpoint;
    std::string best_checkpoint;   // empty if no eval ran
    std::string metrics_path;
    int64_t global_step = 0;
    LossBreakdown first_loss;
    LossBreakdown last_loss;
    double best_eval_return = 0.0;
};

// collect -> model update -> behavior update loop with periodic evaluation
// and checkpointing. Deterministic given the config seed.
TrainResult train(const RunConfig& config);

struct EvalRow {
    std::string weather_name;
    Weather weather;
    double mean_return = 0.0;
    double ci95 = 0.0;
    std::vector<double> returns;
};

// Greedy-mode rollouts of a trained agent under one weather.
EvalRow evaluate_weather(const RunConfig& cfg, const WorldModel& wm, const ActorCritic& ac,
                         const Weather& weather, int episodes, uint64_t seed,
                         const std::string& frames_dir = "");

struct EvaluateResult {
    std::vector<EvalRow> rows;
};

EvaluateResult evaluate(const std::string& checkpoint_path, const std::string& weathers_path,
                        int episodes, uint64_t seed, const std::string& out_json = "",
                        const std::string& frames_dir = "");

struct InspectResult {
    int panels = 0;
    bool has_mask_head = true;
    double mask_pixel_accuracy = 0.0;  // 0 when no mask head
};

// Side-by-side panels (observation, ground-truth mask, reconstructed mask,
// reconstructed observation) per step of a dumped episode.
InspectResult inspect(const std::string& checkpoint_path, const std::string& episode_path,
                      const std::string& out_dir);

// Fraction of mask pixels whose binarized reconstruction matches the
// ground truth, averaged over the episode.
double mask_pixel_accuracy(const WorldModel& wm, const Episode& episode, Rng& rng);

// Renders PNG charts from a metrics stream; returns the files written.
std::vector<std::string> plot_metrics(const std::string& metrics_path,
                                      const std::string& out_dir);

} // namespace sem2
