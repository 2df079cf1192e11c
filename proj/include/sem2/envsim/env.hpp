#pragma once

#include "sem2/core/image.hpp"
#include "sem2/core/rng.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sem2 {

struct Vec2 {
    double x = 0.0, y = 0.0;
};

struct VehicleState {
    double x = 0.0;
    double y = 0.0;
    double yaw = 0.0;    // wrapped to (-pi, pi]
    double v_lon = 0.0;  // >= 0, m/s
};

struct Action {
    double throttle = 0.0;  // [-3, 3], maps to longitudinal accel
    double steer = 0.0;     // [-0.5, 0.5] rad

    Action clamped() const;
    bool finite() const;
};

struct ObstacleSpec {
    Vec2 position;
    double radius = 1.0;
    Vec2 velocity;
};

struct RoadLayout {
    std::string name;
    std::vector<Vec2> centerline;  // >= 2 waypoints
    double lane_half_width = 3.5;
    std::vector<Vec2> route;       // target path, defaults to centerline
    std::vector<ObstacleSpec> obstacles;

    void validate() const;
};

struct Weather {
    std::array<double, 3> tint{0.0, 0.0, 0.0};  // additive RGB offset
    double noise_std = 0.0;                      // intensity units
    uint64_t blob_seed = 0;                      // drifting bright blobs
    int blob_count = 0;
    double blob_intensity = 80.0;
};

enum class Termination { none = 0, out_lane = 1, collision = 2, timeout = 3 };

const char* to_string(Termination t);

struct RewardBreakdown {
    double r_collision = 0.0;  // {0, -1}
    double v_lon = 0.0;
    double r_fast = 0.0;       // {0, -1}
    double r_out = 0.0;        // {0, -1}
    double alpha = 0.0;        // applied steering angle, rad
    double r_lat = 0.0;        // -|alpha| * v_lon^2
    double r_cte = 0.0;        // -CTE
    double constant = -0.1;
    double total = 0.0;
};

struct StepResult {
    Image observation;
    Image mask;
    double reward = 0.0;
    RewardBreakdown breakdown;
    Termination termination = Termination::none;
};

struct StepEvents {
    bool collision = false;
    bool out_lane = false;
};

// Reward per the fixed linear combination; `action` must already be clamped.
RewardBreakdown compute_reward(const VehicleState& state, const Action& action,
                               const StepEvents& events, double cte);

// Minimum distance from point to the route polyline.
double cross_track_error(const VehicleState& state, const RoadLayout& layout);
double point_polyline_distance(const Vec2& p, const std::vector<Vec2>& poly);

double wrap_angle(double a);  // to (-pi, pi]

// Built-in layouts plus any loaded from a JSON config.
class LayoutRegistry {
public:
    LayoutRegistry();  // registers the built-ins
    void add(RoadLayout layout);
    void load_file(const std::string& path);  // JSON list of layouts
    const RoadLayout& get(const std::string& name) const;
    bool has(const std::string& name) const;
    std::vector<std::string> names() const;

private:
    std::map<std::string, RoadLayout> layouts_;
};

struct EnvConfig {
    int raster = 64;              // output H = W, power of two >= 8
    double view_extent = 32.0;    // metres across the rendered frame
    int episode_cap = 1000;
    double cte_threshold = 2.0;
    double dt = 0.1;
    double wheelbase = 2.5;
    double ego_radius = 1.0;
    double route_half_width = 0.75;
    double spawn_yaw_jitter = 0.0;  // radians, uniform about the route heading
    Weather weather;
    std::string layout = "loop";
    std::string layout_file;      // optional extra layouts
};

// Frozen world geometry handed to the renderers, so rendering is a pure
// function of (snapshot, weather).
struct WorldSnapshot {
    VehicleState ego;
    std::vector<ObstacleSpec> obstacles;
    const RoadLayout* layout = nullptr;
    int step_index = 0;
    uint64_t episode_seed = 0;
};

Image render_mask(const WorldSnapshot& snap, const EnvConfig& cfg);
Image render_observation(const WorldSnapshot& snap, const Weather& weather,
                         const EnvConfig& cfg);

// Deterministic top-down driving environment. One instance per caller.
class Env {
public:
    explicit Env(EnvConfig cfg);
    Env(EnvConfig cfg, LayoutRegistry registry);

    StepResult reset(uint64_t seed) { return reset(seed, cfg_.layout); }
    StepResult reset(uint64_t seed, const std::string& layout_id);
    StepResult step(const Action& action);

    void set_weather(const Weather& w) { cfg_.weather = w; }
    const Weather& weather() const { return cfg_.weather; }

    bool done() const { return last_termination_ != Termination::none; }
    const VehicleState& state() const { return ego_; }
    const RoadLayout& layout() const;
    double cte() const;
    int step_index() const { return step_index_; }
    WorldSnapshot snapshot() const;
    const EnvConfig& config() const { return cfg_; }
    const LayoutRegistry& registry() const { return registry_; }

private:
    EnvConfig cfg_;
    LayoutRegistry registry_;
    std::string layout_id_;
    VehicleState ego_;
    std::vector<ObstacleSpec> obstacles_;
    Termination last_termination_ = Termination::none;
    bool started_ = false;
    int step_index_ = 0;
    uint64_t episode_seed_ = 0;
};

} // namespace sem2
