#include "sem2/sem2.h"

#include "sem2/core/error.hpp"
#include "sem2/envsim/env.hpp"
#include "sem2/pipeline/pipeline.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <optional>
#include <string>

namespace {

thread_local std::string g_last_error = "";

sem2_status fail(sem2_status code, const std::string& msg) {
    g_last_error = msg;
    return code;
}

template <typename Fn>
sem2_status guarded(Fn&& fn) {
    try {
        fn();
        return SEM2_OK;
    } catch (const sem2::UsageError& e) {
        return fail(SEM2_ERR_USAGE, e.what());
    } catch (const sem2::IoError& e) {
        return fail(SEM2_ERR_USAGE, e.what());
    } catch (const sem2::NumericError& e) {
        return fail(SEM2_ERR_NUMERIC, e.what());
    } catch (const sem2::ProtocolError& e) {
        return fail(SEM2_ERR_STATE, e.what());
    } catch (const std::exception& e) {
        return fail(SEM2_ERR_INTERNAL, e.what());
    }
}

} // namespace

struct sem2_env {
    sem2::Env env;
    std::optional<sem2::StepResult> last;

    explicit sem2_env(sem2::EnvConfig cfg) : env(std::move(cfg)) {}
};

extern "C" {

const char* sem2_version(void) {
    return "0.1.0";
}

const char* sem2_last_error(void) {
    return g_last_error.c_str();
}

sem2_status sem2_env_create(const char* config_json, sem2_env** out) {
    if (!out) return fail(SEM2_ERR_USAGE, "sem2_env_create: out must not be NULL");
    *out = nullptr;
    return guarded([&] {
        sem2::EnvConfig cfg;
        if (config_json && config_json[0] != '\0') {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(config_json);
            } catch (const std::exception& e) {
                throw sem2::UsageError(std::string("env config: ") + e.what());
            }
            nlohmann::json wrapped = {{"env", j}};
            const sem2::RunConfig rc = sem2::run_config_from_json(wrapped);
            cfg = rc.env;
        }
        *out = new sem2_env(std::move(cfg));
    });
}

void sem2_env_destroy(sem2_env* env) {
    delete env;
}

sem2_status sem2_env_reset(sem2_env* env, uint64_t seed, const char* layout_or_null) {
    if (!env) return fail(SEM2_ERR_USAGE, "sem2_env_reset: env must not be NULL");
    return guarded([&] {
        env->last = layout_or_null && layout_or_null[0] != '\0'
                        ? env->env.reset(seed, layout_or_null)
                        : env->env.reset(seed);
    });
}

sem2_status sem2_env_step(sem2_env* env, double throttle, double steer) {
    if (!env) return fail(SEM2_ERR_USAGE, "sem2_env_step: env must not be NULL");
    return guarded([&] {
        sem2::Action a;
        a.throttle = throttle;
        a.steer = steer;
        env->last = env->env.step(a);
    });
}

static sem2_status require_result(const sem2_env* env, const char* fn) {
    if (!env) return fail(SEM2_ERR_USAGE, std::string(fn) + ": env must not be NULL");
    if (!env->last) return fail(SEM2_ERR_STATE, std::string(fn) + ": reset the env first");
    return SEM2_OK;
}

sem2_status sem2_env_image_shape(const sem2_env* env, int* h, int* w, int* c) {
    const sem2_status s = require_result(env, "sem2_env_image_shape");
    if (s != SEM2_OK) return s;
    if (h) *h = env->last->observation.h;
    if (w) *w = env->last->observation.w;
    if (c) *c = env->last->observation.c;
    return SEM2_OK;
}

static sem2_status copy_image(const sem2::Image& img, uint8_t* buf, size_t len,
                              const char* fn) {
    if (!buf) return fail(SEM2_ERR_USAGE, std::string(fn) + ": buf must not be NULL");
    if (len < img.px.size())
        return fail(SEM2_ERR_USAGE, std::string(fn) + ": buffer too small, need " +
                                        std::to_string(img.px.size()) + " bytes");
    std::memcpy(buf, img.px.data(), img.px.size());
    return SEM2_OK;
}

sem2_status sem2_env_observation(const sem2_env* env, uint8_t* buf, size_t len) {
    const sem2_status s = require_result(env, "sem2_env_observation");
    if (s != SEM2_OK) return s;
    return copy_image(env->last->observation, buf, len, "sem2_env_observation");
}

sem2_status sem2_env_mask(const sem2_env* env, uint8_t* buf, size_t len) {
    const sem2_status s = require_result(env, "sem2_env_mask");
    if (s != SEM2_OK) return s;
    return copy_image(env->last->mask, buf, len, "sem2_env_mask");
}

sem2_status sem2_env_reward(const sem2_env* env, double* out) {
    const sem2_status s = require_result(env, "sem2_env_reward");
    if (s != SEM2_OK) return s;
    if (!out) return fail(SEM2_ERR_USAGE, "sem2_env_reward: out must not be NULL");
    *out = env->last->reward;
    return SEM2_OK;
}

sem2_status sem2_env_termination(const sem2_env* env, int* out) {
    const sem2_status s = require_result(env, "sem2_env_termination");
    if (s != SEM2_OK) return s;
    if (!out) return fail(SEM2_ERR_USAGE, "sem2_env_termination: out must not be NULL");
    *out = static_cast<int>(env->last->termination);
    return SEM2_OK;
}

sem2_status sem2_env_vehicle_state(const sem2_env* env, double state[4]) {
    const sem2_status s = require_result(env, "sem2_env_vehicle_state");
    if (s != SEM2_OK) return s;
    if (!state) return fail(SEM2_ERR_USAGE, "sem2_env_vehicle_state: state must not be NULL");
    const sem2::VehicleState& v = env->env.state();
    state[0] = v.x;
    state[1] = v.y;
    state[2] = v.yaw;
    state[3] = v.v_lon;
    return SEM2_OK;
}

sem2_status sem2_train(const char* config_path, const char* variant_or_null,
                       int64_t seed_or_negative, const char* overrides_or_null) {
    if (!config_path) return fail(SEM2_ERR_USAGE, "sem2_train: config_path must not be NULL");
    return guarded([&] {
        std::vector<std::string> overrides;
        if (overrides_or_null) {
            std::string cur;
            for (const char* p = overrides_or_null;; ++p) {
                if (*p == ',' || *p == ';' || *p == '\0') {
                    if (!cur.empty()) overrides.push_back(cur);
                    cur.clear();
                    if (*p == '\0') break;
                } else {
                    cur.push_back(*p);
                }
            }
        }
        sem2::RunConfig cfg = sem2::load_run_config(config_path, overrides);
        if (variant_or_null && variant_or_null[0] != '\0')
            cfg.variant = sem2::variant_from_string(variant_or_null);
        if (seed_or_negative >= 0) cfg.seed = static_cast<uint64_t>(seed_or_negative);
        cfg.finalize();
        const sem2::TrainResult res = sem2::train(cfg);
        std::printf("trained %lld env steps; final checkpoint: %s\n",
                    static_cast<long long>(res.global_step), res.final_checkpoint.c_str());
        std::printf("metrics: %s\n", res.metrics_path.c_str());
        if (!res.best_checkpoint.empty())
            std::printf("best eval checkpoint: %s (mean return %.3f)\n",
                        res.best_checkpoint.c_str(), res.best_eval_return);
    });
}

sem2_status sem2_evaluate(const char* checkpoint_path, const char* weathers_path,
                          int episodes, uint64_t seed, const char* out_json_or_null,
                          const char* frames_dir_or_null) {
    if (!checkpoint_path || !weathers_path)
        return fail(SEM2_ERR_USAGE, "sem2_evaluate: paths must not be NULL");
    return guarded([&] {
        const sem2::EvaluateResult res = sem2::evaluate(
            checkpoint_path, weathers_path, episodes, seed,
            out_json_or_null ? out_json_or_null : "",
            frames_dir_or_null ? frames_dir_or_null : "");
        std::printf("%-24s %12s %10s\n", "weather", "mean_return", "ci95");
        for (const auto& row : res.rows)
            std::printf("%-24s %12.3f %10.3f\n", row.weather_name.c_str(), row.mean_return,
                        row.ci95);
    });
}

sem2_status sem2_inspect(const char* checkpoint_path, const char* episode_path,
                         const char* out_dir) {
    if (!checkpoint_path || !episode_path || !out_dir)
        return fail(SEM2_ERR_USAGE, "sem2_inspect: paths must not be NULL");
    return guarded([&] {
        const sem2::InspectResult res = sem2::inspect(checkpoint_path, episode_path, out_dir);
        if (!res.has_mask_head)
            std::printf("note: no_filter checkpoint has no mask head; panels omit the "
                        "reconstructed-mask column\n");
        std::printf("wrote %d panels to %s\n", res.panels, out_dir);
        if (res.has_mask_head)
            std::printf("mask pixel accuracy: %.4f\n", res.mask_pixel_accuracy);
    });
}

sem2_status sem2_plot(const char* metrics_path, const char* out_dir) {
    if (!metrics_path || !out_dir)
        return fail(SEM2_ERR_USAGE, "sem2_plot: paths must not be NULL");
    return guarded([&] {
        const auto files = sem2::plot_metrics(metrics_path, out_dir);
        for (const auto& f : files) std::printf("wrote %s\n", f.c_str());
        if (files.empty()) std::printf("metrics stream had no plottable records\n");
    });
}

} // extern "C"
