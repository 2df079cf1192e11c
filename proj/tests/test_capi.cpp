// Exercises the shared library through its C surface only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sem2/sem2.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const char* kEnvJson = R"({"raster": 16, "view_extent": 24.0, "episode_cap": 50})";

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string sub(const std::string& s) const { return (path / s).string(); }
};

} // namespace

TEST_CASE("version and error strings are always available") {
    CHECK(sem2_version() != nullptr);
    CHECK(sem2_last_error() != nullptr);
}

TEST_CASE("env lifecycle through the C API") {
    sem2_env* env = nullptr;
    REQUIRE(sem2_env_create(kEnvJson, &env) == SEM2_OK);
    REQUIRE(env != nullptr);

    // stepping before reset is a state error
    CHECK(sem2_env_step(env, 1.0, 0.0) == SEM2_ERR_STATE);

    REQUIRE(sem2_env_reset(env, 0, "loop") == SEM2_OK);
    int h = 0, w = 0, c = 0;
    REQUIRE(sem2_env_image_shape(env, &h, &w, &c) == SEM2_OK);
    CHECK(h == 16);
    CHECK(w == 16);
    CHECK(c == 3);

    std::vector<uint8_t> obs(static_cast<size_t>(h) * w * c);
    std::vector<uint8_t> mask(obs.size());
    REQUIRE(sem2_env_observation(env, obs.data(), obs.size()) == SEM2_OK);
    REQUIRE(sem2_env_mask(env, mask.data(), mask.size()) == SEM2_OK);
    CHECK(obs == mask);  // identity weather

    CHECK(sem2_env_observation(env, obs.data(), 3) == SEM2_ERR_USAGE);

    double reward = 1.0;
    int term = -1;
    REQUIRE(sem2_env_reward(env, &reward) == SEM2_OK);
    REQUIRE(sem2_env_termination(env, &term) == SEM2_OK);
    CHECK(reward == 0.0);
    CHECK(term == SEM2_TERM_NONE);

    double state[4];
    REQUIRE(sem2_env_vehicle_state(env, state) == SEM2_OK);
    CHECK(state[3] == 0.0);  // starts at rest

    REQUIRE(sem2_env_step(env, 2.0, 0.1) == SEM2_OK);
    REQUIRE(sem2_env_vehicle_state(env, state) == SEM2_OK);
    CHECK(state[3] > 0.0);
    REQUIRE(sem2_env_reward(env, &reward) == SEM2_OK);
    CHECK(reward != 0.0);

    // run to termination; stepping past it is a state error
    for (int i = 0; i < 200; ++i) {
        if (sem2_env_step(env, 3.0, 0.3) != SEM2_OK) break;
        sem2_env_termination(env, &term);
        if (term != SEM2_TERM_NONE) break;
    }
    CHECK(term != SEM2_TERM_NONE);
    CHECK(sem2_env_step(env, 0.0, 0.0) == SEM2_ERR_STATE);
    CHECK(std::strlen(sem2_last_error()) > 0);

    sem2_env_destroy(env);
}

TEST_CASE("bad layouts and bad configs are usage errors") {
    sem2_env* env = nullptr;
    CHECK(sem2_env_create("{not json", &env) == SEM2_ERR_USAGE);
    CHECK(sem2_env_create(R"({"rsater": 16})", &env) == SEM2_ERR_USAGE);

    REQUIRE(sem2_env_create(kEnvJson, &env) == SEM2_OK);
    CHECK(sem2_env_reset(env, 0, "no_such_layout") == SEM2_ERR_USAGE);
    CHECK(std::string(sem2_last_error()).find("no_such_layout") != std::string::npos);
    sem2_env_destroy(env);

    CHECK(sem2_train(nullptr, nullptr, -1, nullptr) == SEM2_ERR_USAGE);
    CHECK(sem2_train("missing_config.json", nullptr, -1, nullptr) == SEM2_ERR_USAGE);
    CHECK(sem2_evaluate("missing.ckpt", "missing.json", 1, 0, nullptr, nullptr) ==
          SEM2_ERR_USAGE);
    CHECK(sem2_plot("missing.jsonl", "out") == SEM2_ERR_USAGE);
}

TEST_CASE("tiny end-to-end run through the C pipeline entry points") {
    TempDir dir("sem2_capi_e2e");
    const std::string config_path = dir.sub("config.json");
    {
        std::ofstream f(config_path);
        f << R"({
  "seed": 0,
  "env": {"raster": 8, "view_extent": 24.0, "episode_cap": 20, "layout": "loop"},
  "model": {"d_h": 8, "groups": 2, "classes": 3, "d_m": 6, "embed": 8, "hidden": 8,
             "cnn_base": 2, "lr": 1e-3},
  "replay": {"batch_size": 2, "sequence_length": 4, "dump_dir": ")"
          << dir.sub("episodes") << R"("},
  "behavior": {"horizon": 2, "hidden": 8},
  "schedule": {"total_env_steps": 60, "train_every": 10, "prefill_episodes": 1,
                "eval_every": 30, "eval_episodes": 1, "out_dir": ")"
          << dir.sub("run") << R"("}
})";
    }
    REQUIRE(sem2_train(config_path.c_str(), "sem2", 0, "model.beta=1.0") == SEM2_OK);
    const std::string ckpt = dir.sub("run") + "/checkpoint_final.sem2ckpt";
    REQUIRE(fs::exists(ckpt));

    const std::string weathers = dir.sub("weathers.json");
    {
        std::ofstream f(weathers);
        f << R"([{"name":"clear"},{"name":"noisy","noise_std":20,"blob_count":2,"blob_seed":3}])";
    }
    CHECK(sem2_evaluate(ckpt.c_str(), weathers.c_str(), 1, 5, dir.sub("eval.json").c_str(),
                        nullptr) == SEM2_OK);
    CHECK(fs::exists(dir.sub("eval.json")));

    std::string episode;
    for (const auto& e : fs::directory_iterator(dir.sub("episodes"))) {
        episode = e.path().string();
        break;
    }
    REQUIRE(!episode.empty());
    CHECK(sem2_inspect(ckpt.c_str(), episode.c_str(), dir.sub("panels").c_str()) == SEM2_OK);

    CHECK(sem2_plot((dir.sub("run") + "/metrics.jsonl").c_str(), dir.sub("plots").c_str()) ==
          SEM2_OK);
}
