#include "sem2/behavior/behavior.hpp"

#include "sem2/core/error.hpp"

#include <doctest.h>

#include <cmath>

#include "test_helpers.hpp"

using namespace sem2;
using ad::Mat;
using test::finite_diff;
using test::max_rel_error;
using test::random_mat;

namespace {

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.raster = 8;
    cfg.d_h = 8;
    cfg.groups = 2;
    cfg.classes = 3;
    cfg.d_m = 6;
    cfg.embed = 8;
    cfg.hidden = 8;
    cfg.cnn_base = 2;
    return cfg;
}

BehaviorConfig tiny_behavior_config() {
    BehaviorConfig cfg;
    cfg.horizon = 4;
    cfg.hidden = 8;
    cfg.actor_lr = 1e-3;
    cfg.critic_lr = 1e-3;
    return cfg;
}

LatentState random_state(const ModelConfig& cfg, int B, Rng& rng) {
    LatentState s;
    s.h = random_mat(B, cfg.d_h, rng, 0.5);
    s.z = Mat::Zero(B, cfg.z_dim());
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < cfg.groups; ++g)
            s.z(b, g * cfg.classes + static_cast<int>(rng.uniform_int(cfg.classes))) = 1.0;
    return s;
}

// n-step return oracle: V^lambda as the weighted sum of n-step returns
// G_n = sum_{i<n} gamma^i r_i + gamma^n v_n starting at offset t
double nstep_oracle(const std::vector<double>& rewards, const std::vector<double>& values,
                    double gamma, double lambda, size_t t) {
    const size_t I = rewards.size();
    const size_t steps = I - t;  // horizons 1..steps available from t
    double acc = 0.0;
    for (size_t n = 1; n <= steps; ++n) {
        double g = 0.0;
        for (size_t i = 0; i < n; ++i) g += std::pow(gamma, static_cast<double>(i)) * rewards[t + i];
        g += std::pow(gamma, static_cast<double>(n)) * values[t + n];
        const double w = (n < steps) ? (1.0 - lambda) * std::pow(lambda, static_cast<double>(n - 1))
                                     : std::pow(lambda, static_cast<double>(n - 1));
        acc += w * g;
    }
    return acc;
}

} // namespace

TEST_CASE("td_lambda matches the worked one-step examples") {
    SUBCASE("single step collapses the recursion for any lambda") {
        for (double lam : {0.0, 0.3, 0.95, 1.0}) {
            const auto t = td_lambda(std::vector<double>{2.0}, {7.0, 10.0}, 0.9, lam);
            REQUIRE(t.size() == 1);
            CHECK(t[0] == doctest::Approx(2.0 + 0.9 * 10.0).epsilon(1e-12));
        }
    }
    SUBCASE("lambda 0 gives one-step targets") {
        const auto t = td_lambda(std::vector<double>{1.0, 1.0}, {0.0, 10.0, 20.0}, 0.99, 0.0);
        REQUIRE(t.size() == 2);
        CHECK(t[0] == doctest::Approx(10.9).epsilon(1e-12));
        CHECK(t[1] == doctest::Approx(20.8).epsilon(1e-12));
    }
}

TEST_CASE("td_lambda equals the brute-force n-step oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        const int I = 1 + static_cast<int>(rng.uniform_int(6));
        std::vector<double> rewards(I), values(I + 1);
        for (auto& r : rewards) r = rng.uniform(-2.0, 2.0);
        for (auto& v : values) v = rng.uniform(-3.0, 3.0);
        const double gamma = rng.uniform(0.0, 1.0);
        const double lambda = rng.uniform(0.0, 1.0);
        const auto targets = td_lambda(rewards, values, gamma, lambda);
        for (int t = 0; t < I; ++t) {
            const double want = nstep_oracle(rewards, values, gamma, lambda,
                                             static_cast<size_t>(t));
            REQUIRE(std::abs(targets[t] - want) < 1e-6);
        }
    }
}

TEST_CASE("td_lambda at lambda 1 is the discounted sum plus terminal value") {
    // symbolic check at I = 3
    const std::vector<double> r{1.0, 2.0, 3.0};
    const std::vector<double> v{9.0, 8.0, 7.0, 4.0};
    const double gamma = 0.9;
    const auto t = td_lambda(r, v, gamma, 1.0);
    const double want = r[0] + gamma * r[1] + gamma * gamma * r[2] +
                        gamma * gamma * gamma * v[3];
    CHECK(t[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("td_lambda validates its inputs") {
    CHECK_THROWS_AS(td_lambda(std::vector<double>{1.0}, {1.0}, 0.9, 0.5), UsageError);
    CHECK_THROWS_AS(td_lambda(std::vector<double>{1.0}, {1.0, 2.0}, 1.5, 0.5), UsageError);
    CHECK_THROWS_AS(td_lambda(std::vector<double>{}, {1.0}, 0.9, 0.5), UsageError);
}

TEST_CASE("imagine produces the documented lengths and in-bound actions") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(1));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(2));
    Rng rng(3);
    const LatentState start = random_state(mc, 5, rng);

    const ImaginedTrajectory traj = ac.imagine(wm, start, 4, rng);
    CHECK(traj.states.size() == 5);
    CHECK(traj.filtered.size() == 5);
    CHECK(traj.actions.size() == 4);
    CHECK(traj.rewards.size() == 4);
    CHECK(traj.values.size() == 5);
    CHECK(traj.discounts.size() == 4);
    for (const auto& a : traj.actions) {
        CHECK(a.col(0).cwiseAbs().maxCoeff() <= 3.0);
        CHECK(a.col(1).cwiseAbs().maxCoeff() <= 0.5);
    }
    for (const auto& f : traj.filtered) CHECK(f.cols() == mc.d_m);

    CHECK_THROWS_AS(ac.imagine(wm, start, 0, rng), UsageError);
}

TEST_CASE("imagine under a constant policy reduces to chained imagine_step") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(4));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(5));
    Rng rng(6);
    const LatentState start = random_state(mc, 2, rng);
    const Action constant{1.25, -0.2};

    Rng r1(9);
    const ImaginedTrajectory traj = ac.imagine(wm, start, 3, r1, SampleMode::stochastic,
                                               &constant);

    Rng r2(9);
    LatentState s = start;
    Mat act(2, 2);
    act.col(0).setConstant(constant.throttle);
    act.col(1).setConstant(constant.steer);
    for (int i = 0; i < 3; ++i) {
        const auto next = wm.imagine_step(s, act, r2);
        s = next.state;
        REQUIRE((traj.states[i + 1].h - s.h).norm() == 0.0);
        REQUIRE((traj.states[i + 1].z - s.z).norm() == 0.0);
    }
}

TEST_CASE("critic loss vanishes when the critic equals the targets") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(7));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(8));
    Rng rng(9);
    ImaginedTrajectory traj = ac.imagine(wm, random_state(mc, 3, rng), 4, rng);

    const auto targets = td_lambda(traj.rewards, traj.values, ac.config().gamma,
                                   ac.config().lambda);
    CHECK(ac.critic_loss_value(traj, targets) > 0.0);

    ImaginedTrajectory exact = traj;
    for (size_t i = 0; i + 1 < exact.values.size(); ++i) exact.values[i + 1] = targets[i];
    CHECK(ac.critic_loss_value(exact, targets) == 0.0);
}

TEST_CASE("critic targets are gradient-blocked") {
    // d/dtarget of 0.5*(v - sg(target))^2 must be exactly zero
    ad::Tape t;
    Rng rng(10);
    ad::Var v = t.leaf(random_mat(3, 1, rng), true);
    ad::Var target = t.leaf(random_mat(3, 1, rng), true);
    ad::Var err = ad::sub(t, v, ad::stop_grad(t, target));
    ad::Var loss = ad::scale(t, ad::mean_all(t, ad::square(t, err)), 0.5);
    t.backward(loss);
    CHECK(t.grad(target).cwiseAbs().maxCoeff() == 0.0);
    CHECK(t.grad(v).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("critic loss gradient matches finite differences") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(10));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(11));
    Rng srng(12);
    const LatentState starts = random_state(mc, 3, srng);

    Rng g0(55);
    const auto grads = ac.loss_gradients(wm, starts, g0, SampleMode::soft);

    // the stop-gradient treats the targets as constants, so the oracle is
    // the same trajectory with targets frozen at the unperturbed values
    Rng ir(55);
    const ImaginedTrajectory traj = ac.imagine(wm, starts, ac.config().horizon, ir,
                                               SampleMode::soft);
    const auto frozen = td_lambda(traj.rewards, traj.values, ac.config().gamma,
                                  ac.config().lambda);
    CHECK(ac.critic_loss_value(traj, frozen) ==
          doctest::Approx(grads.stats.critic_loss).epsilon(1e-9));

    auto critic_loss_of = [&]() {
        ImaginedTrajectory t = traj;
        for (size_t i = 0; i < t.filtered.size(); ++i) t.values[i] = ac.value(t.filtered[i]);
        return ac.critic_loss_value(t, frozen);
    };
    Rng pick(77);
    const auto& idx = ac.critic_indices();
    for (size_t k = 0; k < idx.size(); ++k) {
        Mat& value = ac.params().value(idx[k]);
        const int probes = std::min<int>(3, static_cast<int>(value.size()));
        for (int p = 0; p < probes; ++p) {
            const Eigen::Index flat = static_cast<Eigen::Index>(pick.uniform_int(value.size()));
            const double orig = value.data()[flat];
            const double h = 3e-5;
            value.data()[flat] = orig + h;
            const double fp = critic_loss_of();
            value.data()[flat] = orig - h;
            const double fm = critic_loss_of();
            value.data()[flat] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = grads.critic_from_critic_loss[k].data()[flat];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-5});
            REQUIRE(rel < 1e-4);
        }
    }
}

TEST_CASE("actor loss gradient matches finite differences and spares the world model") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(13));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(14));
    Rng srng(15);
    const LatentState starts = random_state(mc, 2, srng);

    Rng g0(66);
    const auto grads = ac.loss_gradients(wm, starts, g0, SampleMode::soft);
    CHECK(grads.wm_grad_abs_from_actor_loss == 0.0);

    auto actor_loss_of = [&]() {
        Rng r(66);
        return ac.compute_losses(wm, starts, r, SampleMode::soft).actor_loss;
    };
    Rng pick(88);
    const auto& idx = ac.actor_indices();
    for (size_t k = 0; k < idx.size(); ++k) {
        Mat& value = ac.params().value(idx[k]);
        const int probes = std::min<int>(3, static_cast<int>(value.size()));
        for (int p = 0; p < probes; ++p) {
            const Eigen::Index flat = static_cast<Eigen::Index>(pick.uniform_int(value.size()));
            const double orig = value.data()[flat];
            const double h = 3e-5;
            value.data()[flat] = orig + h;
            const double fp = actor_loss_of();
            value.data()[flat] = orig - h;
            const double fm = actor_loss_of();
            value.data()[flat] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = grads.actor_from_actor_loss[k].data()[flat];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-5});
            REQUIRE(rel < 1e-4);
        }
    }
}

TEST_CASE("actor loss is linear in eta through the entropy term") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(16));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(17));
    Rng rng(18);
    const ImaginedTrajectory traj = ac.imagine(wm, random_state(mc, 3, rng), 4, rng);
    const auto targets = td_lambda(traj.rewards, traj.values, ac.config().gamma,
                                   ac.config().lambda);

    const double l0 = ac.actor_loss_value(traj, targets, 0.0);
    const double l1 = ac.actor_loss_value(traj, targets, 0.1);
    const double l2 = ac.actor_loss_value(traj, targets, 0.2);
    // eta = 0 leaves pure return maximization
    double ret = 0.0;
    size_t n = 0;
    for (size_t i = 0; i + 1 < traj.rewards.size(); ++i) {
        ret += targets[i].sum();
        n += static_cast<size_t>(targets[i].rows());
    }
    CHECK(l0 == doctest::Approx(-ret / static_cast<double>(n)).epsilon(1e-9));
    // linear in eta: equal spacing, and the entropy contribution grows
    CHECK((l1 - l0) == doctest::Approx(l2 - l1).epsilon(1e-9));
}

TEST_CASE("behavior updates change only actor and critic parameters") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(19));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(20));
    Rng rng(21);
    const LatentState starts = random_state(mc, 4, rng);

    const uint64_t wm_sum_before = wm.params().checksum();
    const uint64_t ac_sum_before = ac.params().checksum();
    const auto stats = ac.update(wm, starts, rng);
    CHECK(std::isfinite(stats.actor_loss));
    CHECK(wm.params().checksum() == wm_sum_before);
    CHECK(ac.params().checksum() != ac_sum_before);
}

TEST_CASE("greedy action is deterministic, sampled action explores") {
    const ModelConfig mc = tiny_model_config();
    WorldModel wm(mc, Rng(22));
    ActorCritic ac(tiny_behavior_config(), wm.feature_dim(), Rng(23));
    Rng rng(24);
    const Mat feat = random_mat(1, wm.feature_dim(), rng);

    const Action g1 = ac.act(feat, rng, true);
    const Action g2 = ac.act(feat, rng, true);
    CHECK(g1.throttle == g2.throttle);
    CHECK(g1.steer == g2.steer);
    CHECK(std::abs(g1.throttle) <= 3.0);
    CHECK(std::abs(g1.steer) <= 0.5);

    const Action s1 = ac.act(feat, rng, false, 0.3);
    const Action s2 = ac.act(feat, rng, false, 0.3);
    CHECK(s1.throttle != s2.throttle);
}
