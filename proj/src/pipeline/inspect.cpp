#include "sem2/core/error.hpp"
#include "sem2/pipeline/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <functional>

namespace sem2 {

namespace fs = std::filesystem;

namespace {

// Posterior unroll over a stored episode; yields the latent per record.
void unroll_episode(const WorldModel& wm, const Episode& episode, Rng& rng,
                    const std::function<void(size_t, const LatentState&)>& fn) {
    LatentState latent = wm.initial_state(1);
    Mat action(1, 2);
    Mat obs(1, wm.config().obs_dim());
    for (size_t i = 0; i < episode.records.size(); ++i) {
        const TransitionRecord& rec = episode.records[i];
        action(0, 0) = rec.action.throttle;
        action(0, 1) = rec.action.steer;
        obs.row(0) = image_to_planes(rec.observation);
        latent = wm.observe_step(latent, action, obs, rng).state;
        fn(i, latent);
    }
}

double binarized_accuracy(const Eigen::RowVectorXd& pred, const Image& target) {
    const Eigen::RowVectorXd truth = image_to_planes(target);
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < pred.size(); ++i)
        if ((pred[i] > 0.0) == (truth[i] > 0.0)) ++correct;
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

} // namespace

double mask_pixel_accuracy(const WorldModel& wm, const Episode& episode, Rng& rng) {
    if (!wm.config().has_filter)
        throw ProtocolError("mask_pixel_accuracy: model has no mask head");
    double acc = 0.0;
    unroll_episode(wm, episode, rng, [&](size_t i, const LatentState& latent) {
        const Mat s_m = wm.filter(latent);
        const Mat mean = wm.predict_mask(s_m);
        acc += binarized_accuracy(mean.row(0), episode.records[i].mask);
    });
    return acc / static_cast<double>(episode.records.size());
}

InspectResult inspect(const std::string& checkpoint_path, const std::string& episode_path,
                      const std::string& out_dir) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    const Episode episode = load_episode(episode_path);
    if (episode.records.empty()) throw UsageError("inspect: episode has no records");
    const int res = ck.config.env.raster;
    if (episode.records.front().observation.h != res ||
        episode.records.front().observation.w != res)
        throw UsageError("inspect: episode raster does not match the checkpoint config");
    fs::create_directories(out_dir);

    InspectResult result;
    result.has_mask_head = ck.config.model.has_filter;
    const WorldModel& wm = *ck.world_model;

    const int up = std::max(1, 64 / res);
    const int gap = 2;
    const int cols = result.has_mask_head ? 4 : 2;
    double acc = 0.0;

    Rng rng(hash_mix(episode.seed, 0x696e7370ULL));
    unroll_episode(wm, episode, rng, [&](size_t i, const LatentState& latent) {
        const TransitionRecord& rec = episode.records[i];
        std::vector<Image> panes;
        panes.push_back(upscale(rec.observation, up));
        if (result.has_mask_head) {
            panes.push_back(upscale(rec.mask, up));
            const Mat s_m = wm.filter(latent);
            const Mat mean = wm.predict_mask(s_m);
            acc += binarized_accuracy(mean.row(0), rec.mask);
            panes.push_back(upscale(planes_to_image(mean.row(0), res, res), up));
        }
        const Mat obs_mean = wm.predict_obs(latent);
        panes.push_back(upscale(planes_to_image(obs_mean.row(0), res, res), up));

        const int ph = panes[0].h;
        const int pw = panes[0].w;
        Image panel(ph, cols * pw + (cols - 1) * gap, 3, 32);
        for (int p = 0; p < cols; ++p)
            for (int y = 0; y < ph; ++y)
                for (int x = 0; x < pw; ++x)
                    for (int c = 0; c < 3; ++c)
                        panel.at(y, p * (pw + gap) + x, c) = panes[p].at(y, x, c);
        char name[64];
        std::snprintf(name, sizeof(name), "panel_%05zu.png", i);
        write_png((fs::path(out_dir) / name).string(), panel);
        ++result.panels;
    });

    if (result.has_mask_head)
        result.mask_pixel_accuracy = acc / static_cast<double>(episode.records.size());
    return result;
}

} // namespace sem2
