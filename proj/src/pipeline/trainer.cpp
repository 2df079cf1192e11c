#include "sem2/core/error.hpp"
#include "sem2/pipeline/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace sem2 {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

MetricsWriter::MetricsWriter(const std::string& path) : path_(path), out_(path) {
    if (!out_) throw IoError("cannot open metrics file " + path);
}

void MetricsWriter::write(const ordered_json& record) {
    out_ << record.dump() << "\n";
    out_.flush();
    if (!out_) throw IoError("metrics write failed for " + path_);
}

namespace {

TransitionRecord make_record(const StepResult& sr, const Action& action, uint64_t episode_id,
                             uint32_t step_index) {
    TransitionRecord r;
    r.observation = sr.observation;
    r.mask = sr.mask;
    r.action = action;
    r.reward = sr.reward;
    r.termination = sr.termination;
    r.episode_id = episode_id;
    r.step_index = step_index;
    return r;
}

struct Collector {
    Episode episode;
    LatentState latent;
    uint64_t next_episode_id = 0;

    void begin(Env& env, const WorldModel& wm, uint64_t seed, Rng& zrng) {
        const StepResult sr = env.reset(seed);
        episode = Episode{};
        episode.id = next_episode_id++;
        episode.layout = env.config().layout;
        episode.seed = seed;
        episode.records.push_back(make_record(sr, Action{}, episode.id, 0));
        latent = wm.initial_state(1);
        Mat zero_action = Mat::Zero(1, 2);
        Mat obs(1, wm.config().obs_dim());
        obs.row(0) = image_to_planes(sr.observation);
        latent = wm.observe_step(latent, zero_action, obs, zrng).state;
    }

    void record_step(const WorldModel& wm, const Action& a, const StepResult& sr, Rng& zrng) {
        episode.records.push_back(make_record(
            sr, a, episode.id, static_cast<uint32_t>(episode.records.size())));
        Mat act(1, 2);
        act << a.throttle, a.steer;
        Mat obs(1, wm.config().obs_dim());
        obs.row(0) = image_to_planes(sr.observation);
        latent = wm.observe_step(latent, act, obs, zrng).state;
    }

    double episode_return() const {
        double r = 0.0;
        for (const auto& rec : episode.records) r += rec.reward;
        return r;
    }
};

void dump_episode_if_configured(const RunConfig& cfg, const Episode& e) {
    if (cfg.replay.dump_dir.empty()) return;
    fs::create_directories(cfg.replay.dump_dir);
    char name[64];
    std::snprintf(name, sizeof(name), "episode_%06llu.sem2ep",
                  static_cast<unsigned long long>(e.id));
    save_episode((fs::path(cfg.replay.dump_dir) / name).string(), e);
}

} // namespace

EvalRow evaluate_weather(const RunConfig& cfg, const WorldModel& wm, const ActorCritic& ac,
                         const Weather& weather, int episodes, uint64_t seed,
                         const std::string& frames_dir) {
    if (episodes < 1) throw UsageError("evaluate: episodes must be >= 1");
    EnvConfig env_cfg = cfg.env;
    env_cfg.weather = weather;
    Env env(env_cfg);
    Rng rng(hash_mix(seed, 0x6576616cULL));
    EvalRow row;
    row.weather = weather;
    for (int e = 0; e < episodes; ++e) {
        const uint64_t ep_seed = rng.next_u64();
        StepResult sr = env.reset(ep_seed);
        LatentState latent = wm.initial_state(1);
        Mat action = Mat::Zero(1, 2);
        Mat obs(1, wm.config().obs_dim());
        obs.row(0) = image_to_planes(sr.observation);
        latent = wm.observe_step(latent, action, obs, rng).state;
        double ret = 0.0;
        int step = 0;
        const bool dump_frames = !frames_dir.empty() && e == 0;
        if (dump_frames) {
            fs::create_directories(frames_dir);
            write_png((fs::path(frames_dir) / "obs_000000.png").string(), sr.observation);
            write_png((fs::path(frames_dir) / "mask_000000.png").string(), sr.mask);
        }
        while (!env.done()) {
            const Mat feat = wm.feature(latent);
            const Action a = ac.act(feat, rng, true);
            sr = env.step(a);
            ret += sr.reward;
            ++step;
            action(0, 0) = a.throttle;
            action(0, 1) = a.steer;
            obs.row(0) = image_to_planes(sr.observation);
            latent = wm.observe_step(latent, action, obs, rng).state;
            if (dump_frames) {
                char fn[64];
                std::snprintf(fn, sizeof(fn), "obs_%06d.png", step);
                write_png((fs::path(frames_dir) / fn).string(), sr.observation);
                std::snprintf(fn, sizeof(fn), "mask_%06d.png", step);
                write_png((fs::path(frames_dir) / fn).string(), sr.mask);
            }
        }
        row.returns.push_back(ret);
    }
    const double n = static_cast<double>(row.returns.size());
    double mean = 0.0;
    for (double r : row.returns) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : row.returns) var += (r - mean) * (r - mean);
    const double sd = n > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    row.mean_return = mean;
    row.ci95 = n > 1 ? 1.96 * sd / std::sqrt(n) : 0.0;
    return row;
}

TrainResult train(const RunConfig& config) {
    RunConfig cfg = config;
    cfg.finalize();
    cfg.validate();

    fs::create_directories(cfg.schedule.out_dir);
    {
        std::ofstream echo(fs::path(cfg.schedule.out_dir) / "config.json");
        echo << run_config_to_json(cfg).dump(2) << "\n";
    }
    MetricsWriter metrics((fs::path(cfg.schedule.out_dir) / "metrics.jsonl").string());

    Rng master(cfg.seed);
    Rng env_seeds = master.fork(1);
    Rng explore = master.fork(4);
    Rng sampler = master.fork(5);
    Rng zsample = master.fork(6);

    Env env(cfg.env);
    WorldModel wm(cfg.model, master.fork(2));
    ActorCritic ac(cfg.behavior, wm.feature_dim(), master.fork(3));
    MultiSourceBuffer buffer(cfg.replay);

    TrainResult result;
    result.metrics_path = metrics.path();
    result.best_eval_return = -std::numeric_limits<double>::infinity();

    int64_t global_step = 0;
    int64_t updates = 0;
    int64_t term_counts[4] = {0, 0, 0, 0};

    Collector col;

    auto finish_episode = [&]() {
        buffer.add_episode(col.episode);
        dump_episode_if_configured(cfg, col.episode);
        const Termination t = col.episode.final_termination();
        term_counts[static_cast<int>(t)]++;
        metrics.write(ordered_json{
            {"kind", "episode"},
            {"global_step", global_step},
            {"episode_id", col.episode.id},
            {"return", col.episode_return()},
            {"length", col.episode.records.size() - 1},
            {"termination", to_string(t)},
            {"terminations_out_lane", term_counts[1]},
            {"terminations_collision", term_counts[2]},
            {"terminations_timeout", term_counts[3]},
        });
    };

    const auto save = [&](const std::string& name) {
        const std::string path = (fs::path(cfg.schedule.out_dir) / name).string();
        save_checkpoint(path, cfg, global_step, wm, ac);
        return path;
    };

    try {
        // random-policy prefill
        for (int e = 0; e < cfg.schedule.prefill_episodes; ++e) {
            col.begin(env, wm, env_seeds.next_u64(), zsample);
            while (!env.done()) {
                Action a;
                a.throttle = explore.uniform(-0.5, 3.0);
                a.steer = explore.uniform(-0.5, 0.5);
                const StepResult sr = env.step(a);
                ++global_step;
                col.record_step(wm, a, sr, zsample);
            }
            finish_episode();
        }

        col.begin(env, wm, env_seeds.next_u64(), zsample);
        bool first_update = true;
        while (global_step < cfg.schedule.total_env_steps) {
            const double frac = cfg.schedule.explore_anneal_steps > 0
                                    ? std::max(0.0, 1.0 - static_cast<double>(global_step) /
                                                          static_cast<double>(
                                                              cfg.schedule.explore_anneal_steps))
                                    : 0.0;
            const double sigma = cfg.schedule.explore_sigma * frac;
            const Mat feat = wm.feature(col.latent);
            const Action a = ac.act(feat, explore, false, sigma);
            const StepResult sr = env.step(a);
            ++global_step;
            col.record_step(wm, a, sr, zsample);
            if (env.done()) {
                finish_episode();
                col.begin(env, wm, env_seeds.next_u64(), zsample);
            }

            if (global_step % cfg.schedule.train_every == 0 &&
                buffer.can_sample(cfg.replay.sequence_length)) {
                const SequenceBatch batch = buffer.sample_batch(sampler);
                const WorldModel::LossResult wres = wm.update(batch, zsample);
                const ActorCritic::UpdateStats bres = ac.update(wm, wres.posteriors, zsample);
                ++updates;
                if (first_update) {
                    result.first_loss = wres.breakdown;
                    first_update = false;
                }
                result.last_loss = wres.breakdown;
                const BufferStats bs = buffer.stats();
                metrics.write(ordered_json{
                    {"kind", "update"},
                    {"global_step", global_step},
                    {"update", updates},
                    {"loss_total", wres.breakdown.total},
                    {"image_nll", wres.breakdown.image_nll},
                    {"mask_nll", wres.breakdown.mask_nll},
                    {"reward_nll", wres.breakdown.reward_nll},
                    {"kl", wres.breakdown.kl},
                    {"beta", wres.breakdown.beta},
                    {"grad_norm", wres.grad_norm},
                    {"actor_loss", bres.actor_loss},
                    {"critic_loss", bres.critic_loss},
                    {"entropy", bres.entropy},
                    {"mean_value", bres.mean_value},
                    {"buffer_common", bs.common.transitions},
                    {"buffer_out_lane", bs.out_lane.transitions},
                    {"buffer_collision", bs.collision.transitions},
                });
            }

            if (cfg.schedule.eval_every > 0 && global_step % cfg.schedule.eval_every == 0) {
                const EvalRow row =
                    evaluate_weather(cfg, wm, ac, cfg.env.weather, cfg.schedule.eval_episodes,
                                     hash_mix(cfg.seed, static_cast<uint64_t>(global_step)));
                metrics.write(ordered_json{
                    {"kind", "eval"},
                    {"global_step", global_step},
                    {"mean_return", row.mean_return},
                    {"ci95", row.ci95},
                    {"episodes", row.returns.size()},
                });
                if (row.mean_return > result.best_eval_return) {
                    result.best_eval_return = row.mean_return;
                    result.best_checkpoint = save("checkpoint_best.sem2ckpt");
                }
            }

            if (cfg.schedule.checkpoint_every > 0 &&
                global_step % cfg.schedule.checkpoint_every == 0) {
                char name[64];
                std::snprintf(name, sizeof(name), "checkpoint_%09lld.sem2ckpt",
                              static_cast<long long>(global_step));
                save(name);
            }
        }

        // keep a truncated tail if it is long enough to train on
        if (col.episode.records.size() >= 2) buffer.add_episode(col.episode);
    } catch (const NumericError&) {
        save("checkpoint_diagnostic.sem2ckpt");
        throw;
    }

    result.final_checkpoint = save("checkpoint_final.sem2ckpt");
    result.global_step = global_step;
    return result;
}

EvaluateResult evaluate(const std::string& checkpoint_path, const std::string& weathers_path,
                        int episodes, uint64_t seed, const std::string& out_json,
                        const std::string& frames_dir) {
    Checkpoint ck = load_checkpoint(checkpoint_path);

    std::ifstream wf(weathers_path);
    if (!wf) throw UsageError("cannot open weathers file " + weathers_path);
    nlohmann::json wj;
    try {
        wf >> wj;
    } catch (const std::exception& e) {
        throw UsageError("weathers file " + weathers_path + ": " + e.what());
    }
    if (!wj.is_array() || wj.empty())
        throw UsageError("weathers file must be a non-empty JSON array");

    EvaluateResult res;
    int idx = 0;
    for (const auto& entry : wj) {
        nlohmann::json body = entry;
        std::string name = "weather_" + std::to_string(idx);
        if (body.contains("name")) {
            name = body["name"].get<std::string>();
            body.erase("name");
        }
        const Weather w = weather_from_json(body);
        EvalRow row = evaluate_weather(ck.config, *ck.world_model, *ck.actor_critic, w,
                                       episodes, seed,
                                       idx == 0 ? frames_dir : std::string());
        row.weather_name = name;
        res.rows.push_back(std::move(row));
        ++idx;
    }

    if (!out_json.empty()) {
        nlohmann::ordered_json out = nlohmann::ordered_json::array();
        for (const auto& r : res.rows)
            out.push_back({{"weather", r.weather_name},
                           {"mean_return", r.mean_return},
                           {"ci95", r.ci95},
                           {"returns", r.returns}});
        std::ofstream f(out_json);
        if (!f) throw IoError("cannot open " + out_json);
        f << out.dump(2) << "\n";
    }
    return res;
}

} // namespace sem2
