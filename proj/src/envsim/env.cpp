#include "sem2/envsim/env.hpp"

#include "sem2/core/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace sem2 {

double wrap_angle(double a) {
    a = std::fmod(a, 2.0 * M_PI);
    if (a <= -M_PI) a += 2.0 * M_PI;
    if (a > M_PI) a -= 2.0 * M_PI;
    return a;
}

Action Action::clamped() const {
    Action a;
    a.throttle = std::clamp(throttle, -3.0, 3.0);
    a.steer = std::clamp(steer, -0.5, 0.5);
    return a;
}

bool Action::finite() const {
    return std::isfinite(throttle) && std::isfinite(steer);
}

const char* to_string(Termination t) {
    switch (t) {
        case Termination::none: return "none";
        case Termination::out_lane: return "out_lane";
        case Termination::collision: return "collision";
        case Termination::timeout: return "timeout";
    }
    return "unknown";
}

void RoadLayout::validate() const {
    if (centerline.size() < 2) throw UsageError("layout " + name + ": centerline needs >= 2 waypoints");
    if (lane_half_width <= 0.0) throw UsageError("layout " + name + ": lane_half_width must be > 0");
    if (route.size() < 2) throw UsageError("layout " + name + ": route needs >= 2 waypoints");
    for (const auto& o : obstacles)
        if (o.radius <= 0.0) throw UsageError("layout " + name + ": obstacle radius must be > 0");
}

RewardBreakdown compute_reward(const VehicleState& state, const Action& action,
                               const StepEvents& events, double cte) {
    RewardBreakdown b;
    b.r_collision = events.collision ? -1.0 : 0.0;
    b.v_lon = state.v_lon;
    b.r_fast = state.v_lon > 8.0 ? -1.0 : 0.0;
    b.r_out = events.out_lane ? -1.0 : 0.0;
    b.alpha = action.steer;
    b.r_lat = -std::abs(b.alpha) * state.v_lon * state.v_lon;
    b.r_cte = -cte;
    b.constant = -0.1;
    b.total = 200.0 * b.r_collision + b.v_lon + 10.0 * b.r_fast + b.r_out -
              5.0 * b.alpha * b.alpha + 0.2 * b.r_lat + 0.2 * b.r_cte + b.constant;
    return b;
}

static double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
    const double cx = a.x + t * dx, cy = a.y + t * dy;
    return std::hypot(p.x - cx, p.y - cy);
}

double point_polyline_distance(const Vec2& p, const std::vector<Vec2>& poly) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i + 1 < poly.size(); ++i)
        best = std::min(best, point_segment_distance(p, poly[i], poly[i + 1]));
    return best;
}

double cross_track_error(const VehicleState& state, const RoadLayout& layout) {
    return point_polyline_distance(Vec2{state.x, state.y}, layout.route);
}

// ---- layouts ----

static RoadLayout make_circle_layout(const std::string& name, double radius, int n,
                                     double lane_half) {
    RoadLayout l;
    l.name = name;
    l.lane_half_width = lane_half;
    for (int i = 0; i <= n; ++i) {
        const double a = 2.0 * M_PI * static_cast<double>(i) / n;
        l.centerline.push_back(Vec2{radius * std::cos(a), radius * std::sin(a)});
    }
    l.route = l.centerline;
    return l;
}

static RoadLayout make_straight_layout() {
    RoadLayout l;
    l.name = "straight";
    l.lane_half_width = 4.0;
    for (int i = 0; i <= 120; ++i)
        l.centerline.push_back(Vec2{static_cast<double>(i) * 5.0 - 10.0, 0.0});
    l.route = l.centerline;
    return l;
}

static RoadLayout make_loop_layout() {
    RoadLayout l = make_circle_layout("loop", 30.0, 72, 3.5);
    // two parked vehicles just off the driving line
    l.obstacles.push_back(ObstacleSpec{Vec2{0.0, 32.5}, 1.2, Vec2{}});
    l.obstacles.push_back(ObstacleSpec{Vec2{-32.5, 0.0}, 1.2, Vec2{}});
    return l;
}

static RoadLayout make_curvy_layout() {
    // closed loop with alternating curvature, so the correct steering angle
    // changes along the track and must be read from the road ahead
    RoadLayout l;
    l.name = "curvy";
    l.lane_half_width = 3.5;
    const int n = 96;
    for (int i = 0; i <= n; ++i) {
        const double a = 2.0 * M_PI * static_cast<double>(i) / n;
        const double r = 26.0 + 6.0 * std::sin(3.0 * a);
        l.centerline.push_back(Vec2{r * std::cos(a), r * std::sin(a)});
    }
    l.route = l.centerline;
    return l;
}

static RoadLayout make_corner_rich_layout() {
    // Tight loop lined with parked vehicles just beside the driving line:
    // a clean centerline pass clears them by ~0.6 m, so sloppy steering
    // collides and hard avoidance risks the out-lane threshold.
    RoadLayout l = make_circle_layout("corner_rich", 22.0, 64, 3.0);
    const double r = 22.0;
    for (int k = 0; k < 5; ++k) {
        const double a = 2.0 * M_PI * (0.13 + 0.2 * k);
        const double off = (k % 2 == 0) ? 2.4 : -2.4;
        l.obstacles.push_back(
            ObstacleSpec{Vec2{(r + off) * std::cos(a), (r + off) * std::sin(a)}, 0.8, Vec2{}});
    }
    // one slow vehicle crossing the lane
    l.obstacles.push_back(ObstacleSpec{Vec2{r, -14.0}, 0.9, Vec2{0.0, 0.25}});
    return l;
}

LayoutRegistry::LayoutRegistry() {
    add(make_straight_layout());
    add(make_loop_layout());
    add(make_curvy_layout());
    add(make_corner_rich_layout());
}

void LayoutRegistry::add(RoadLayout layout) {
    layout.validate();
    layouts_[layout.name] = std::move(layout);
}

void LayoutRegistry::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open layout file " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw UsageError("layout file " + path + ": " + e.what());
    }
    if (!j.is_array()) throw UsageError("layout file " + path + ": expected a JSON array");
    for (const auto& e : j) {
        RoadLayout l;
        l.name = e.at("name").get<std::string>();
        for (const auto& wp : e.at("centerline"))
            l.centerline.push_back(Vec2{wp.at(0).get<double>(), wp.at(1).get<double>()});
        l.lane_half_width = e.at("lane_half_width").get<double>();
        if (e.contains("route"))
            for (const auto& wp : e.at("route"))
                l.route.push_back(Vec2{wp.at(0).get<double>(), wp.at(1).get<double>()});
        else
            l.route = l.centerline;
        if (e.contains("obstacles"))
            for (const auto& o : e.at("obstacles")) {
                ObstacleSpec s;
                s.position = Vec2{o.at("position").at(0).get<double>(),
                                  o.at("position").at(1).get<double>()};
                s.radius = o.at("radius").get<double>();
                if (o.contains("velocity"))
                    s.velocity = Vec2{o.at("velocity").at(0).get<double>(),
                                      o.at("velocity").at(1).get<double>()};
                l.obstacles.push_back(s);
            }
        add(std::move(l));
    }
}

const RoadLayout& LayoutRegistry::get(const std::string& name) const {
    auto it = layouts_.find(name);
    if (it == layouts_.end()) throw UsageError("unknown layout '" + name + "'");
    return it->second;
}

bool LayoutRegistry::has(const std::string& name) const {
    return layouts_.count(name) > 0;
}

std::vector<std::string> LayoutRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : layouts_) out.push_back(k);
    return out;
}

// ---- rendering ----

namespace {

struct Frame {
    // ego-centric: heading points up; ego anchored at a fixed pixel pose
    double mpp;       // metres per pixel
    double cx;        // anchor column (pixels)
    double cy;        // anchor row (pixels)
    double hx, hy;    // world heading unit vector
    double rx, ry;    // world right unit vector
    Vec2 ego;

    Vec2 world_at(int row, int col) const {
        const double u = (static_cast<double>(col) + 0.5 - cx) * mpp;   // right
        const double v = (cy - static_cast<double>(row) - 0.5) * mpp;   // up
        return Vec2{ego.x + u * rx + v * hx, ego.y + u * ry + v * hy};
    }
};

Frame make_frame(const WorldSnapshot& snap, const EnvConfig& cfg) {
    Frame f;
    f.mpp = cfg.view_extent / static_cast<double>(cfg.raster);
    f.cx = static_cast<double>(cfg.raster) / 2.0;
    f.cy = std::round(0.7 * static_cast<double>(cfg.raster));
    f.hx = std::cos(snap.ego.yaw);
    f.hy = std::sin(snap.ego.yaw);
    f.rx = f.hy;
    f.ry = -f.hx;
    f.ego = Vec2{snap.ego.x, snap.ego.y};
    return f;
}

} // namespace

Image render_mask(const WorldSnapshot& snap, const EnvConfig& cfg) {
    if (!snap.layout) throw UsageError("render_mask: snapshot has no layout");
    const Frame f = make_frame(snap, cfg);
    const RoadLayout& l = *snap.layout;
    Image img(cfg.raster, cfg.raster, 3);
    for (int y = 0; y < cfg.raster; ++y) {
        for (int x = 0; x < cfg.raster; ++x) {
            const Vec2 p = f.world_at(y, x);
            if (point_polyline_distance(p, l.centerline) <= l.lane_half_width)
                img.at(y, x, 0) = 255;  // road
            if (point_polyline_distance(p, l.route) <= cfg.route_half_width)
                img.at(y, x, 1) = 255;  // route
            for (const auto& o : snap.obstacles) {
                const double d = std::hypot(p.x - o.position.x, p.y - o.position.y);
                if (d <= o.radius) {
                    img.at(y, x, 2) = 255;  // surrounding vehicles
                    break;
                }
            }
        }
    }
    // ego glyph at the fixed image-frame pose, drawn on all channels
    const double half_w = 0.9, front = 2.25, back = 1.25;
    for (int y = 0; y < cfg.raster; ++y) {
        for (int x = 0; x < cfg.raster; ++x) {
            const double u = (static_cast<double>(x) + 0.5 - f.cx) * f.mpp;
            const double v = (f.cy - static_cast<double>(y) - 0.5) * f.mpp;
            if (u >= -half_w && u <= half_w && v >= -back && v <= front) {
                img.at(y, x, 0) = 255;
                img.at(y, x, 1) = 255;
                img.at(y, x, 2) = 255;
            }
        }
    }
    return img;
}

Image render_observation(const WorldSnapshot& snap, const Weather& weather,
                         const EnvConfig& cfg) {
    const Image base = render_mask(snap, cfg);
    std::vector<double> px(base.px.begin(), base.px.end());
    const int n = cfg.raster;

    // drifting bright blobs, positions a pure function of (blob_seed, step)
    if (weather.blob_count > 0) {
        Rng blob_rng(hash_mix(weather.blob_seed, 0x626c6f62ULL));
        for (int k = 0; k < weather.blob_count; ++k) {
            const double x0 = blob_rng.uniform(0.0, n);
            const double y0 = blob_rng.uniform(0.0, n);
            const double vx = blob_rng.uniform(-0.8, 0.8);
            const double vy = blob_rng.uniform(-0.8, 0.8);
            const double radius = blob_rng.uniform(0.08, 0.2) * n;
            const double t = static_cast<double>(snap.step_index);
            double bx = std::fmod(x0 + vx * t, static_cast<double>(n));
            double by = std::fmod(y0 + vy * t, static_cast<double>(n));
            if (bx < 0) bx += n;
            if (by < 0) by += n;
            const int lo_y = std::max(0, static_cast<int>(by - radius) - 1);
            const int hi_y = std::min(n - 1, static_cast<int>(by + radius) + 1);
            const int lo_x = std::max(0, static_cast<int>(bx - radius) - 1);
            const int hi_x = std::min(n - 1, static_cast<int>(bx + radius) + 1);
            for (int y = lo_y; y <= hi_y; ++y)
                for (int x = lo_x; x <= hi_x; ++x) {
                    const double d = std::hypot(x + 0.5 - bx, y + 0.5 - by);
                    if (d <= radius)
                        for (int c = 0; c < 3; ++c)
                            px[(static_cast<size_t>(y) * n + x) * 3 + c] += weather.blob_intensity;
                }
        }
    }

    for (int c = 0; c < 3; ++c)
        if (weather.tint[c] != 0.0)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x)
                    px[(static_cast<size_t>(y) * n + x) * 3 + c] += weather.tint[c];

    if (weather.noise_std > 0.0) {
        Rng noise(hash_mix(snap.episode_seed, static_cast<uint64_t>(snap.step_index),
                           weather.blob_seed));
        for (auto& v : px) v += weather.noise_std * noise.normal();
    }

    Image out(n, n, 3);
    for (size_t i = 0; i < px.size(); ++i)
        out.px[i] = static_cast<uint8_t>(std::clamp(std::lround(px[i]), 0L, 255L));
    return out;
}

// ---- env ----

Env::Env(EnvConfig cfg) : Env(std::move(cfg), LayoutRegistry()) {}

Env::Env(EnvConfig cfg, LayoutRegistry registry)
    : cfg_(std::move(cfg)), registry_(std::move(registry)) {
    if (!cfg_.layout_file.empty()) registry_.load_file(cfg_.layout_file);
    const int r = cfg_.raster;
    if (r < 8 || (r & (r - 1)) != 0)
        throw UsageError("env raster must be a power of two >= 8, got " + std::to_string(r));
}

const RoadLayout& Env::layout() const {
    if (!started_) throw ProtocolError("layout(): reset the environment first");
    return registry_.get(layout_id_);
}

double Env::cte() const {
    return cross_track_error(ego_, layout());
}

WorldSnapshot Env::snapshot() const {
    WorldSnapshot s;
    s.ego = ego_;
    s.obstacles = obstacles_;
    s.layout = &layout();
    s.step_index = step_index_;
    s.episode_seed = episode_seed_;
    return s;
}

StepResult Env::reset(uint64_t seed, const std::string& layout_id) {
    const RoadLayout& l = registry_.get(layout_id);
    layout_id_ = layout_id;
    episode_seed_ = seed;
    step_index_ = 0;
    started_ = true;
    last_termination_ = Termination::none;

    // spawn at a seed-chosen arc-length along the route, facing forward
    Rng rng(hash_mix(seed, 0x7265736574ULL));
    double total = 0.0;
    for (size_t i = 0; i + 1 < l.route.size(); ++i)
        total += std::hypot(l.route[i + 1].x - l.route[i].x, l.route[i + 1].y - l.route[i].y);
    double s = rng.uniform(0.0, total);
    size_t seg = 0;
    for (; seg + 2 < l.route.size(); ++seg) {
        const double len = std::hypot(l.route[seg + 1].x - l.route[seg].x,
                                      l.route[seg + 1].y - l.route[seg].y);
        if (s <= len) break;
        s -= len;
    }
    const Vec2 a = l.route[seg], b = l.route[seg + 1];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const double t = len > 0.0 ? s / len : 0.0;
    ego_.x = a.x + t * (b.x - a.x);
    ego_.y = a.y + t * (b.y - a.y);
    double yaw = std::atan2(b.y - a.y, b.x - a.x);
    if (cfg_.spawn_yaw_jitter > 0.0)
        yaw += rng.uniform(-cfg_.spawn_yaw_jitter, cfg_.spawn_yaw_jitter);
    ego_.yaw = wrap_angle(yaw);
    ego_.v_lon = 0.0;

    obstacles_ = l.obstacles;

    StepResult r;
    r.mask = render_mask(snapshot(), cfg_);
    r.observation = render_observation(snapshot(), cfg_.weather, cfg_);
    r.reward = 0.0;
    r.breakdown = RewardBreakdown{};
    r.breakdown.total = 0.0;
    r.breakdown.constant = 0.0;
    r.termination = Termination::none;
    return r;
}

StepResult Env::step(const Action& action) {
    if (!started_) throw ProtocolError("step(): reset the environment first");
    if (last_termination_ != Termination::none)
        throw ProtocolError("step(): episode already terminated");
    if (!action.finite()) throw UsageError("step(): action must be finite");

    const Action a = action.clamped();
    const RoadLayout& l = registry_.get(layout_id_);

    // kinematic bicycle, forward Euler at dt
    ego_.v_lon = std::max(0.0, ego_.v_lon + a.throttle * cfg_.dt);
    ego_.x += ego_.v_lon * std::cos(ego_.yaw) * cfg_.dt;
    ego_.y += ego_.v_lon * std::sin(ego_.yaw) * cfg_.dt;
    ego_.yaw = wrap_angle(ego_.yaw + ego_.v_lon / cfg_.wheelbase * std::tan(a.steer) * cfg_.dt);

    for (auto& o : obstacles_) {
        o.position.x += o.velocity.x * cfg_.dt;
        o.position.y += o.velocity.y * cfg_.dt;
    }
    ++step_index_;

    const double cte = cross_track_error(ego_, l);
    StepEvents ev;
    ev.out_lane = cte > cfg_.cte_threshold;
    for (const auto& o : obstacles_) {
        const double d = std::hypot(ego_.x - o.position.x, ego_.y - o.position.y);
        if (d <= cfg_.ego_radius + o.radius) {
            ev.collision = true;
            break;
        }
    }

    // collision takes precedence over out-lane; timeout only if neither
    if (ev.collision)
        last_termination_ = Termination::collision;
    else if (ev.out_lane)
        last_termination_ = Termination::out_lane;
    else if (step_index_ >= cfg_.episode_cap)
        last_termination_ = Termination::timeout;

    StepResult r;
    r.breakdown = compute_reward(ego_, a, ev, cte);
    r.reward = r.breakdown.total;
    r.mask = render_mask(snapshot(), cfg_);
    r.observation = render_observation(snapshot(), cfg_.weather, cfg_);
    r.termination = last_termination_;
    return r;
}

} // namespace sem2
