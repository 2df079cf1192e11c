#include "sem2/pipeline/pipeline.hpp"

#include "sem2/core/error.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_helpers.hpp"

using namespace sem2;
namespace fs = std::filesystem;

namespace {

// a run small enough for CI but large enough to touch every code path
RunConfig smoke_config(const std::string& out_dir, Variant variant = Variant::sem2) {
    RunConfig cfg;
    cfg.variant = variant;
    cfg.seed = 0;
    cfg.env.raster = 8;
    cfg.env.view_extent = 24.0;
    cfg.env.episode_cap = 25;
    cfg.env.layout = "loop";
    cfg.model.d_h = 8;
    cfg.model.groups = 2;
    cfg.model.classes = 3;
    cfg.model.d_m = 6;
    cfg.model.embed = 8;
    cfg.model.hidden = 8;
    cfg.model.cnn_base = 2;
    cfg.model.lr = 1e-3;
    cfg.replay.batch_size = 3;
    cfg.replay.sequence_length = 5;
    cfg.behavior.horizon = 3;
    cfg.behavior.hidden = 8;
    cfg.behavior.actor_lr = 1e-4;
    cfg.behavior.critic_lr = 1e-4;
    cfg.schedule.total_env_steps = 160;
    cfg.schedule.train_every = 10;
    cfg.schedule.prefill_episodes = 2;
    cfg.schedule.eval_every = 80;
    cfg.schedule.eval_episodes = 2;
    cfg.schedule.explore_anneal_steps = 100;
    cfg.schedule.out_dir = out_dir;
    cfg.finalize();
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& s) const { return (path / s).string(); }
};

} // namespace

TEST_CASE("config parsing: defaults, overrides, env vars, unknown keys") {
    nlohmann::json j = {
        {"variant", "no_filter"},
        {"seed", 7},
        {"model", {{"d_h", 32}, {"groups", 4}}},
        {"schedule", {{"out_dir", "x"}}},
    };
    RunConfig cfg = run_config_from_json(j);
    CHECK(cfg.variant == Variant::no_filter);
    CHECK(cfg.seed == 7);
    CHECK(cfg.model.d_h == 32);
    CHECK(cfg.model.groups == 4);
    CHECK(cfg.model.classes == 16);  // untouched default
    CHECK(cfg.model.has_filter == false);
    CHECK(cfg.replay.multisource == true);

    // explicit overrides win over the file
    RunConfig ov = run_config_from_json(j, {"model.d_h=64", "behavior.gamma=0.9",
                                            "env.layout=straight"});
    CHECK(ov.model.d_h == 64);
    CHECK(ov.behavior.gamma == 0.9);
    CHECK(ov.env.layout == "straight");

    // environment variable overrides
    setenv("SEM2_OVERRIDES", "model.classes=5;seed=9", 1);
    RunConfig ev = run_config_from_json(j);
    unsetenv("SEM2_OVERRIDES");
    CHECK(ev.model.classes == 5);
    CHECK(ev.seed == 9);

    nlohmann::json bad = {{"modle", {{"d_h", 1}}}};
    CHECK_THROWS_AS(run_config_from_json(bad), UsageError);
    nlohmann::json bad2 = {{"model", {{"dh", 1}}}};
    CHECK_THROWS_AS(run_config_from_json(bad2), UsageError);
    CHECK_THROWS_AS(run_config_from_json(j, {"notanoverride"}), UsageError);
    CHECK_THROWS_AS(load_run_config("missing.json"), UsageError);

    // round trip through the echo form
    const RunConfig back = run_config_from_json(run_config_to_json(cfg));
    CHECK(back.model.d_h == cfg.model.d_h);
    CHECK(back.variant == cfg.variant);
}

TEST_CASE("variant strings parse and print") {
    CHECK(variant_from_string("sem2") == Variant::sem2);
    CHECK(variant_from_string("no_filter") == Variant::no_filter);
    CHECK(variant_from_string("no_multisource") == Variant::no_multisource);
    CHECK_THROWS_AS(variant_from_string("bogus"), UsageError);
    CHECK(std::string(to_string(Variant::no_multisource)) == "no_multisource");
}

TEST_CASE("train smoke: completes, writes metrics, checkpoint loads") {
    TempDir dir("sem2_test_train");
    RunConfig cfg = smoke_config(dir.sub("run"));
    cfg.replay.dump_dir = dir.sub("episodes");
    const TrainResult res = train(cfg);
    CHECK(res.global_step >= cfg.schedule.total_env_steps);
    CHECK(fs::exists(res.final_checkpoint));
    CHECK(fs::exists(res.metrics_path));
    CHECK(res.last_loss.total != 0.0);

    // metrics stream has update, episode and eval records
    std::ifstream mf(res.metrics_path);
    int updates = 0, episodes = 0, evals = 0;
    std::string line;
    while (std::getline(mf, line)) {
        const auto j = nlohmann::json::parse(line);
        const std::string kind = j.at("kind");
        if (kind == "update") {
            ++updates;
            CHECK(j.contains("loss_total"));
            CHECK(j.contains("buffer_common"));
        } else if (kind == "episode") {
            ++episodes;
            CHECK(j.contains("return"));
            CHECK(j.contains("termination"));
        } else if (kind == "eval") {
            ++evals;
            CHECK(j.contains("mean_return"));
            CHECK(j.contains("ci95"));
        }
    }
    CHECK(updates > 0);
    CHECK(episodes > 0);
    CHECK(evals > 0);

    // the dump directory holds one file per completed episode
    int dumps = 0;
    for (const auto& e : fs::directory_iterator(cfg.replay.dump_dir)) {
        ++dumps;
        const Episode ep = load_episode(e.path().string());
        CHECK(!ep.records.empty());
    }
    CHECK(dumps == episodes);

    const Checkpoint ck = load_checkpoint(res.final_checkpoint);
    CHECK(ck.global_step == res.global_step);
    CHECK(ck.config.model.d_h == cfg.model.d_h);
    CHECK(ck.world_model->params().all_finite());
}

TEST_CASE("metrics completeness: one update record per gradient step") {
    TempDir dir("sem2_test_complete");
    RunConfig cfg = smoke_config(dir.sub("run"));
    const TrainResult res = train(cfg);

    std::ifstream mf(res.metrics_path);
    std::string line;
    int64_t updates = 0, evals = 0, episodes_seen = 0;
    int64_t prefill_steps = 0;
    int64_t last_step = -1;
    int64_t last_counter = 0;
    while (std::getline(mf, line)) {
        const auto j = nlohmann::json::parse(line);
        const int64_t step = j.at("global_step");
        CHECK(step >= last_step);
        last_step = step;
        if (j.at("kind") == "update") {
            ++updates;
            // the per-record counter is consecutive: one record per step
            CHECK(j.at("update") == updates);
            last_counter = j.at("update");
        } else if (j.at("kind") == "eval") {
            ++evals;
        } else if (j.at("kind") == "episode") {
            if (episodes_seen < cfg.schedule.prefill_episodes)
                prefill_steps += j.at("length").get<int64_t>();
            ++episodes_seen;
        }
    }
    // update rounds fire every train_every env steps after the random
    // prefill (the buffer is samplable from the first prefill episode on)
    const int64_t expected = cfg.schedule.total_env_steps / cfg.schedule.train_every -
                             prefill_steps / cfg.schedule.train_every;
    CHECK(updates == expected);
    CHECK(last_counter == updates);
    CHECK(evals == cfg.schedule.total_env_steps / cfg.schedule.eval_every);
}

TEST_CASE("two identical runs produce byte-identical metrics") {
    TempDir dir("sem2_test_det");
    RunConfig a = smoke_config(dir.sub("a"));
    RunConfig b = smoke_config(dir.sub("b"));
    const TrainResult ra = train(a);
    const TrainResult rb = train(b);
    const std::string ma = slurp(ra.metrics_path);
    CHECK(!ma.empty());
    CHECK(ma == slurp(rb.metrics_path));

    RunConfig c = smoke_config(dir.sub("c"));
    c.seed = 1;
    const TrainResult rc = train(c);
    CHECK(ma != slurp(rc.metrics_path));
}

TEST_CASE("no_filter checkpoints carry no filter or mask parameters") {
    TempDir dir("sem2_test_nf");
    RunConfig cfg = smoke_config(dir.sub("run"), Variant::no_filter);
    const TrainResult res = train(cfg);
    const Checkpoint ck = load_checkpoint(res.final_checkpoint);
    CHECK(ck.config.variant == Variant::no_filter);
    for (int i = 0; i < ck.world_model->params().count(); ++i) {
        const std::string& name = ck.world_model->params().name(i);
        CHECK(name.find("filter") == std::string::npos);
        CHECK(name.find("mask") == std::string::npos);
    }
}

TEST_CASE("checkpoint round-trips parameters and rejects config mismatches") {
    TempDir dir("sem2_test_ckpt");
    RunConfig cfg = smoke_config(dir.sub("run"));
    Rng init(3);
    WorldModel wm(cfg.model, init.fork(1));
    ActorCritic ac(cfg.behavior, wm.feature_dim(), init.fork(2));
    const uint64_t wm_sum = wm.params().checksum();
    const uint64_t ac_sum = ac.params().checksum();

    const std::string path = dir.sub("test.sem2ckpt");
    save_checkpoint(path, cfg, 1234, wm, ac);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.global_step == 1234);
    CHECK(ck.world_model->params().checksum() == wm_sum);
    CHECK(ck.actor_critic->params().checksum() == ac_sum);

    RunConfig other = cfg;
    other.model.d_h = cfg.model.d_h * 2;
    other.model.groups = cfg.model.groups + 1;
    try {
        load_checkpoint(path, &other);
        FAIL("expected mismatch error");
    } catch (const UsageError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("model.d_h") != std::string::npos);
        CHECK(msg.find("model.groups") != std::string::npos);
    }
    CHECK_THROWS_AS(load_checkpoint(dir.sub("nope.sem2ckpt")), IoError);
}

TEST_CASE("evaluate: deterministic rows, identity weather, table output") {
    TempDir dir("sem2_test_eval");
    RunConfig cfg = smoke_config(dir.sub("run"));
    const TrainResult res = train(cfg);

    // two identical weather entries -> identical rows under one seed
    const std::string weathers = dir.sub("weathers.json");
    {
        std::ofstream f(weathers);
        f << R"([{"name":"clear"},{"name":"clear_again"},
                 {"name":"storm","tint":[40,-25,10],"noise_std":25,"blob_seed":9,
                  "blob_count":4,"blob_intensity":90}])";
    }
    const EvaluateResult ev =
        evaluate(res.final_checkpoint, weathers, 2, 11, dir.sub("eval.json"));
    REQUIRE(ev.rows.size() == 3);
    CHECK(ev.rows[0].mean_return == ev.rows[1].mean_return);
    CHECK(ev.rows[0].returns == ev.rows[1].returns);
    CHECK(ev.rows[0].weather_name == "clear");
    CHECK(fs::exists(dir.sub("eval.json")));

    // identity weather equals training-condition evaluation
    const Checkpoint ck = load_checkpoint(res.final_checkpoint);
    const EvalRow direct = evaluate_weather(ck.config, *ck.world_model, *ck.actor_critic,
                                            ck.config.env.weather, 2, 11);
    CHECK(direct.mean_return == ev.rows[0].mean_return);

    CHECK_THROWS_AS(evaluate(res.final_checkpoint, dir.sub("nope.json"), 2, 1, ""),
                    UsageError);

    // PNG frame dumps of the first episode behind the frames flag
    (void)evaluate(res.final_checkpoint, weathers, 1, 3, "", dir.sub("frames"));
    int frames = 0;
    for (const auto& e : fs::directory_iterator(dir.sub("frames"))) {
        (void)e;
        ++frames;
    }
    CHECK(frames >= 4);  // obs + mask per step, at least reset + one step
}

TEST_CASE("inspect writes one panel per step and reports accuracy") {
    TempDir dir("sem2_test_inspect");
    RunConfig cfg = smoke_config(dir.sub("run"));
    cfg.replay.dump_dir = dir.sub("episodes");
    const TrainResult res = train(cfg);

    // take the first dumped episode
    std::string episode_path;
    for (const auto& e : fs::directory_iterator(cfg.replay.dump_dir)) {
        episode_path = e.path().string();
        break;
    }
    REQUIRE(!episode_path.empty());
    const Episode ep = load_episode(episode_path);

    const InspectResult ir = inspect(res.final_checkpoint, episode_path, dir.sub("panels"));
    CHECK(ir.panels == static_cast<int>(ep.records.size()));
    CHECK(ir.has_mask_head);
    CHECK(ir.mask_pixel_accuracy > 0.0);
    int pngs = 0;
    for (const auto& e : fs::directory_iterator(dir.sub("panels"))) {
        ++pngs;
        // PNG signature
        std::ifstream f(e.path(), std::ios::binary);
        unsigned char sig[8];
        f.read(reinterpret_cast<char*>(sig), 8);
        CHECK(sig[1] == 'P');
        CHECK(sig[2] == 'N');
        CHECK(sig[3] == 'G');
    }
    CHECK(pngs == ir.panels);
}

TEST_CASE("inspect omits the mask column for no_filter checkpoints") {
    TempDir dir("sem2_test_inspect_nf");
    RunConfig cfg = smoke_config(dir.sub("run"), Variant::no_filter);
    cfg.replay.dump_dir = dir.sub("episodes");
    const TrainResult res = train(cfg);
    std::string episode_path;
    for (const auto& e : fs::directory_iterator(cfg.replay.dump_dir)) {
        episode_path = e.path().string();
        break;
    }
    const InspectResult ir = inspect(res.final_checkpoint, episode_path, dir.sub("panels"));
    CHECK(!ir.has_mask_head);
    CHECK(ir.mask_pixel_accuracy == 0.0);
    CHECK(ir.panels > 0);
}

TEST_CASE("plot renders charts from a metrics stream") {
    TempDir dir("sem2_test_plot");
    RunConfig cfg = smoke_config(dir.sub("run"));
    const TrainResult res = train(cfg);
    const auto files = plot_metrics(res.metrics_path, dir.sub("plots"));
    CHECK(files.size() >= 3);
    for (const auto& f : files) {
        CHECK(fs::exists(f));
        CHECK(fs::file_size(f) > 100);
    }
    CHECK_THROWS_AS(plot_metrics(dir.sub("missing.jsonl"), dir.sub("p2")), UsageError);
}

TEST_CASE("train aborts with a diagnostic checkpoint on non-finite loss") {
    TempDir dir("sem2_test_abort");
    RunConfig cfg = smoke_config(dir.sub("run"));
    cfg.model.lr = 1e9;  // guaranteed blow-up
    cfg.schedule.total_env_steps = 400;
    bool threw = false;
    try {
        train(cfg);
    } catch (const NumericError&) {
        threw = true;
    }
    if (threw) {
        CHECK(fs::exists(dir.path / "run" / "checkpoint_diagnostic.sem2ckpt"));
    } else {
        WARN("divergence did not trigger in this run");
    }
}
