// sem2 CLI: train / evaluate / inspect / plot, all through the C API.
#include <sem2/sem2.h>

#include <CLI11.hpp>

#include <cstdio>
#include <string>

namespace {

int status_to_exit(sem2_status s) {
    switch (s) {
        case SEM2_OK: return 0;
        case SEM2_ERR_NUMERIC: return 2;
        case SEM2_ERR_USAGE:
        case SEM2_ERR_STATE:
        case SEM2_ERR_INTERNAL: return 1;
    }
    return 1;
}

int finish(sem2_status s) {
    if (s != SEM2_OK) std::fprintf(stderr, "error: %s\n", sem2_last_error());
    return status_to_exit(s);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SEM2 semantic-masked recurrent world model trainer"};
    app.require_subcommand(1);

    std::string config_path, variant, overrides;
    long long seed = -1;
    auto* train = app.add_subcommand("train", "train an agent from a config file");
    train->add_option("--config", config_path, "JSON run config")->required();
    train->add_option("--seed", seed, "override the config seed");
    train->add_option("--variant", variant, "sem2|no_filter|no_multisource")
        ->check(CLI::IsMember({"sem2", "no_filter", "no_multisource"}));
    train->add_option("--set", overrides,
                      "comma separated key.path=value config overrides");

    std::string ckpt, weathers_path, eval_out, frames_dir;
    int episodes = 10;
    unsigned long long eval_seed = 0;
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint under weathers");
    evaluate->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    evaluate->add_option("--weathers", weathers_path, "JSON list of weathers")->required();
    evaluate->add_option("--episodes", episodes, "episodes per weather")->check(CLI::PositiveNumber);
    evaluate->add_option("--seed", eval_seed, "evaluation seed");
    evaluate->add_option("--out", eval_out, "also write results as JSON");
    evaluate->add_option("--frames", frames_dir, "dump PNG frames of the first episode");

    std::string ins_ckpt, episode_path, ins_out;
    auto* inspect = app.add_subcommand("inspect", "render reconstruction panels for an episode dump");
    inspect->add_option("--checkpoint", ins_ckpt, "checkpoint file")->required();
    inspect->add_option("--episode", episode_path, "episode dump file")->required();
    inspect->add_option("--out", ins_out, "output directory")->required();

    std::string metrics_path, plot_out;
    auto* plot = app.add_subcommand("plot", "render PNG charts from a metrics stream");
    plot->add_option("--metrics", metrics_path, "metrics.jsonl file")->required();
    plot->add_option("--out", plot_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (train->parsed())
        return finish(sem2_train(config_path.c_str(), variant.empty() ? nullptr : variant.c_str(),
                                 seed, overrides.empty() ? nullptr : overrides.c_str()));
    if (evaluate->parsed())
        return finish(sem2_evaluate(ckpt.c_str(), weathers_path.c_str(), episodes, eval_seed,
                                    eval_out.empty() ? nullptr : eval_out.c_str(),
                                    frames_dir.empty() ? nullptr : frames_dir.c_str()));
    if (inspect->parsed())
        return finish(sem2_inspect(ins_ckpt.c_str(), episode_path.c_str(), ins_out.c_str()));
    if (plot->parsed())
        return finish(sem2_plot(metrics_path.c_str(), plot_out.c_str()));
    return 1;
}
