#pragma once

#include "sem2/core/ad.hpp"
#include "sem2/core/rng.hpp"
#include "sem2/envsim/env.hpp"
#include "sem2/replay/replay.hpp"

#include <functional>
#include <vector>

namespace sem2::test {

using ad::Mat;

inline Mat random_mat(int rows, int cols, Rng& rng, double scale = 1.0) {
    Mat m(rows, cols);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = scale * rng.normal();
    return m;
}

// Central finite differences of a scalar function w.r.t. one matrix input.
inline Mat finite_diff(const std::function<double(const Mat&)>& f, Mat x, double h = 1e-6) {
    Mat g(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const double orig = x(r, c);
            x(r, c) = orig + h;
            const double fp = f(x);
            x(r, c) = orig - h;
            const double fm = f(x);
            x(r, c) = orig;
            g(r, c) = (fp - fm) / (2.0 * h);
        }
    }
    return g;
}

inline double max_rel_error(const Mat& got, const Mat& want) {
    double worst = 0.0;
    for (Eigen::Index c = 0; c < got.cols(); ++c)
        for (Eigen::Index r = 0; r < got.rows(); ++r) {
            const double denom = std::max({std::abs(got(r, c)), std::abs(want(r, c)), 1e-8});
            worst = std::max(worst, std::abs(got(r, c) - want(r, c)) / denom);
        }
    return worst;
}

// A tiny synthetic episode: images get a per-step pattern so reconstruction
// targets differ across time.
inline Episode synthetic_episode(int length, int raster, Termination ending,
                                 uint64_t episode_id, uint64_t seed) {
    Rng rng(seed);
    Episode e;
    e.id = episode_id;
    e.layout = "synthetic";
    e.seed = seed;
    for (int i = 0; i < length; ++i) {
        TransitionRecord r;
        r.episode_id = episode_id;
        r.step_index = static_cast<uint32_t>(i);
        r.observation = Image(raster, raster, 3);
        r.mask = Image(raster, raster, 3);
        for (auto& v : r.observation.px) v = static_cast<uint8_t>(rng.uniform_int(256));
        for (int y = 0; y < raster; ++y)
            for (int x = 0; x < raster; ++x)
                r.mask.at(y, x, (i + y) % 3) = ((x + i) % raster) < raster / 2 ? 255 : 0;
        r.action.throttle = i == 0 ? 0.0 : rng.uniform(-3.0, 3.0);
        r.action.steer = i == 0 ? 0.0 : rng.uniform(-0.5, 0.5);
        r.reward = i == 0 ? 0.0 : rng.uniform(-1.0, 6.0);
        r.termination = (i + 1 == length) ? ending : Termination::none;
        e.records.push_back(std::move(r));
    }
    return e;
}

} // namespace sem2::test
