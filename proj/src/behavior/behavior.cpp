#include "sem2/behavior/behavior.hpp"

#include "sem2/core/error.hpp"

#include <cmath>

namespace sem2 {

using ad::Tape;
using ad::Var;

std::vector<Mat> td_lambda(const std::vector<Mat>& rewards, const std::vector<Mat>& values,
                           double gamma, double lambda) {
    if (values.size() != rewards.size() + 1)
        throw UsageError("td_lambda: need len(values) == len(rewards) + 1");
    if (rewards.empty()) throw UsageError("td_lambda: empty rewards");
    if (gamma < 0.0 || gamma > 1.0 || lambda < 0.0 || lambda > 1.0)
        throw UsageError("td_lambda: gamma and lambda must lie in [0, 1]");
    const size_t I = rewards.size();
    std::vector<Mat> targets(I);
    targets[I - 1] = rewards[I - 1] + gamma * values[I];
    for (size_t i = I - 1; i-- > 0;) {
        targets[i] =
            rewards[i] + gamma * ((1.0 - lambda) * values[i + 1] + lambda * targets[i + 1]);
    }
    return targets;
}

std::vector<double> td_lambda(const std::vector<double>& rewards,
                              const std::vector<double>& values, double gamma, double lambda) {
    std::vector<Mat> r(rewards.size()), v(values.size());
    for (size_t i = 0; i < rewards.size(); ++i) r[i] = Mat::Constant(1, 1, rewards[i]);
    for (size_t i = 0; i < values.size(); ++i) v[i] = Mat::Constant(1, 1, values[i]);
    auto t = td_lambda(r, v, gamma, lambda);
    std::vector<double> out(t.size());
    for (size_t i = 0; i < t.size(); ++i) out[i] = t[i](0, 0);
    return out;
}

ActorCritic::ActorCritic(BehaviorConfig cfg, int feature_dim, Rng init_rng)
    : cfg_(cfg), feature_dim_(feature_dim) {
    Rng rng = init_rng;
    const int before_actor = params_.count();
    actor_ = nn::Mlp(params_, "actor", {feature_dim, cfg_.hidden, cfg_.hidden, 4}, rng);
    const int before_critic = params_.count();
    critic_ = nn::Mlp(params_, "critic", {feature_dim, cfg_.hidden, cfg_.hidden, 1}, rng);
    for (int i = before_actor; i < before_critic; ++i) actor_idx_.push_back(i);
    for (int i = before_critic; i < params_.count(); ++i) critic_idx_.push_back(i);
    actor_adam_.lr = cfg_.actor_lr;
    actor_adam_.clip = cfg_.grad_clip;
    critic_adam_.lr = cfg_.critic_lr;
    critic_adam_.clip = cfg_.grad_clip;
}

namespace {
constexpr double kThrottleScale = 3.0;
constexpr double kSteerScale = 0.5;
}

ActorCritic::PolicySample ActorCritic::policy_sample(Tape& t, const nn::Binding& bind,
                                                     Var feature, Rng& rng) const {
    const Eigen::Index B = t.val(feature).rows();
    Var raw = actor_(bind, feature);
    Var mean = ad::slice_cols(t, raw, 0, 2);
    Var logstd_raw = ad::slice_cols(t, raw, 2, 2);
    // smooth clamp into [log_std_min, log_std_max]
    const double mid = 0.5 * (cfg_.log_std_max + cfg_.log_std_min);
    const double half = 0.5 * (cfg_.log_std_max - cfg_.log_std_min);
    Var logstd = ad::add_scalar(t, ad::scale(t, ad::tanh_(t, logstd_raw), half), mid);
    Var std = ad::exp_(t, logstd);

    Mat eps(B, 2);
    for (Eigen::Index r = 0; r < B; ++r)
        for (int c = 0; c < 2; ++c) eps(r, c) = rng.normal();
    Var u = ad::add(t, mean, ad::mul(t, std, t.leaf(eps, false)));

    Mat scale_rows(B, 2);
    scale_rows.col(0).setConstant(kThrottleScale);
    scale_rows.col(1).setConstant(kSteerScale);
    Var action = ad::mul(t, t.leaf(scale_rows, false), ad::tanh_(t, u));

    // single-sample entropy estimate, -log pi(a), with the squash correction
    // log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u))
    Mat ent_const(B, 2);
    for (Eigen::Index r = 0; r < B; ++r)
        for (int c = 0; c < 2; ++c)
            ent_const(r, c) = 0.5 * eps(r, c) * eps(r, c) + 0.5 * std::log(2.0 * M_PI) +
                              std::log(c == 0 ? kThrottleScale : kSteerScale);
    Var sp = ad::softplus(t, ad::scale(t, u, -2.0));
    Var corr = ad::scale(t, ad::add_scalar(t, ad::neg(t, ad::add(t, u, sp)), std::log(2.0)), 2.0);
    Var ent_dims = ad::add(t, ad::add(t, logstd, t.leaf(ent_const, false)), corr);
    PolicySample s;
    s.action = action;
    s.entropy = ad::sum_cols(t, ent_dims);
    return s;
}

Var ActorCritic::critic_head(const nn::Binding& bind, Var feature) const {
    return critic_(bind, feature);
}

Action ActorCritic::act(const Mat& feature, Rng& rng, bool greedy,
                        double presquash_noise_std) const {
    if (feature.rows() != 1 || feature.cols() != feature_dim_)
        throw UsageError("act: feature shape mismatch");
    Tape t;
    nn::Binding bind(t, const_cast<nn::ParamStore&>(params_), false);
    Var raw = actor_(bind, t.leaf(feature, false));
    const Mat& rv = t.val(raw);
    const double mid = 0.5 * (cfg_.log_std_max + cfg_.log_std_min);
    const double half = 0.5 * (cfg_.log_std_max - cfg_.log_std_min);
    Action a;
    double u[2];
    for (int c = 0; c < 2; ++c) {
        u[c] = rv(0, c);
        if (!greedy) {
            const double logstd = mid + half * std::tanh(rv(0, 2 + c));
            u[c] += std::exp(logstd) * rng.normal();
            if (presquash_noise_std > 0.0) u[c] += presquash_noise_std * rng.normal();
        }
    }
    a.throttle = kThrottleScale * std::tanh(u[0]);
    a.steer = kSteerScale * std::tanh(u[1]);
    return a;
}

Mat ActorCritic::value(const Mat& feature) const {
    Tape t;
    nn::Binding bind(t, const_cast<nn::ParamStore&>(params_), false);
    return t.val(critic_head(bind, t.leaf(feature, false)));
}

ImaginedTrajectory ActorCritic::imagine(const WorldModel& wm, const LatentState& start,
                                        int horizon, Rng& rng, SampleMode mode,
                                        const Action* constant_action) const {
    if (horizon < 1) throw UsageError("imagine: horizon must be >= 1");
    ImaginedTrajectory traj;
    traj.states.push_back(start);
    traj.filtered.push_back(wm.feature(start));
    for (int i = 0; i < horizon; ++i) {
        const Mat& feat = traj.filtered.back();
        Mat actions(feat.rows(), 2);
        for (Eigen::Index b = 0; b < feat.rows(); ++b) {
            const Action a = constant_action ? *constant_action : act(feat.row(b), rng, false);
            actions(b, 0) = a.throttle;
            actions(b, 1) = a.steer;
        }
        auto next = wm.imagine_step(traj.states.back(), actions, rng, mode);
        traj.states.push_back(next.state);
        traj.filtered.push_back(wm.feature(next.state));
        traj.actions.push_back(std::move(actions));
        traj.rewards.push_back(wm.predict_reward(traj.filtered.back()));
        traj.discounts.push_back(cfg_.gamma);
    }
    for (const auto& feat : traj.filtered) traj.values.push_back(value(feat));
    return traj;
}

double ActorCritic::critic_loss_value(const ImaginedTrajectory& traj,
                                      const std::vector<Mat>& targets) const {
    const size_t I = traj.rewards.size();
    if (targets.size() != I) throw UsageError("critic_loss: targets/rewards length mismatch");
    const size_t count = std::max<size_t>(1, I - 1);
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < count; ++i) {
        acc += 0.5 * (traj.values[i + 1] - targets[i]).array().square().sum();
        n += static_cast<size_t>(traj.values[i + 1].rows());
    }
    return acc / static_cast<double>(n);
}

double ActorCritic::actor_loss_value(const ImaginedTrajectory& traj,
                                     const std::vector<Mat>& targets, double eta) const {
    const size_t I = traj.rewards.size();
    if (targets.size() != I) throw UsageError("actor_loss: targets/rewards length mismatch");
    const size_t count = std::max<size_t>(1, I - 1);
    double ret = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < count; ++i) {
        ret += targets[i].sum();
        n += static_cast<size_t>(targets[i].rows());
    }
    ret /= static_cast<double>(n);

    // entropy estimated at the trajectory's stored actions
    const double mid = 0.5 * (cfg_.log_std_max + cfg_.log_std_min);
    const double half = 0.5 * (cfg_.log_std_max - cfg_.log_std_min);
    const size_t ent_lo = I > 1 ? 1 : 0;
    double ent = 0.0;
    size_t en = 0;
    for (size_t i = ent_lo; i < I; ++i) {
        Tape t;
        nn::Binding bind(t, const_cast<nn::ParamStore&>(params_), false);
        const Mat& raw = t.val(actor_(bind, t.leaf(traj.filtered[i], false)));
        const Mat& act_i = traj.actions[i];
        for (Eigen::Index b = 0; b < act_i.rows(); ++b) {
            for (int c = 0; c < 2; ++c) {
                const double scale = c == 0 ? kThrottleScale : kSteerScale;
                const double a01 = std::clamp(act_i(b, c) / scale, -1.0 + 1e-12, 1.0 - 1e-12);
                const double u = std::atanh(a01);
                const double logstd = mid + half * std::tanh(raw(b, 2 + c));
                const double sd = std::exp(logstd);
                const double zc = (u - raw(b, c)) / sd;
                const double log_n = -0.5 * zc * zc - logstd - 0.5 * std::log(2.0 * M_PI);
                // log(1-tanh^2(u)) = 2*(log2 - u - softplus(-2u))
                const double sp = std::max(-2.0 * u, 0.0) + std::log1p(std::exp(-std::abs(2.0 * u)));
                const double corr = std::log(scale) + 2.0 * (std::log(2.0) - u - sp);
                ent += -(log_n - corr);
                ++en;
            }
        }
    }
    ent /= static_cast<double>(en);
    return -ret - eta * ent;
}

ActorCritic::GraphLosses ActorCritic::build_losses(Tape& t, const WmGraph& g,
                                                   const nn::Binding& bind,
                                                   const LatentState& starts, Rng& rng,
                                                   SampleMode mode) const {
    const int I = cfg_.horizon;
    if (I < 1) throw UsageError("behavior: horizon must be >= 1");

    Var h = t.leaf(starts.h, false);
    Var z = t.leaf(starts.z, false);
    std::vector<Var> feats, rewards, values, entropies;
    feats.push_back(g.feature(h, z));
    for (int i = 0; i < I; ++i) {
        PolicySample ps = policy_sample(t, bind, feats.back(), rng);
        entropies.push_back(ps.entropy);
        h = g.recurrent(h, z, ps.action);
        Var prior = g.prior_logits(h);
        z = g.sample_z(prior, rng, mode);
        feats.push_back(g.feature(h, z));
        rewards.push_back(g.reward_mean(feats.back()));
    }
    for (const auto& f : feats) values.push_back(critic_head(bind, f));

    // recursive TD-lambda targets in-graph
    std::vector<Var> targets(I);
    targets[I - 1] = ad::add(t, rewards[I - 1], ad::scale(t, values[I], cfg_.gamma));
    for (int i = I - 2; i >= 0; --i) {
        Var boot = ad::add(t, ad::scale(t, values[i + 1], (1.0 - cfg_.lambda) * cfg_.gamma),
                           ad::scale(t, targets[i + 1], cfg_.lambda * cfg_.gamma));
        targets[i] = ad::add(t, rewards[i], boot);
    }

    const int count = std::max(1, I - 1);
    const int ent_lo = I > 1 ? 1 : 0;

    Var ret_sum, ent_sum;
    for (int i = 0; i < count; ++i) {
        Var m = ad::mean_all(t, targets[i]);
        ret_sum = ret_sum.valid() ? ad::add(t, ret_sum, m) : m;
    }
    for (int i = ent_lo; i < I; ++i) {
        Var m = ad::mean_all(t, entropies[i]);
        ent_sum = ent_sum.valid() ? ad::add(t, ent_sum, m) : m;
    }
    const double inv_count = 1.0 / static_cast<double>(count);
    const double inv_ent = 1.0 / static_cast<double>(I - ent_lo);
    Var actor_loss = ad::scale(t, ret_sum, -inv_count);
    actor_loss = ad::add(t, actor_loss, ad::scale(t, ent_sum, -cfg_.eta * inv_ent));

    Var crit_sum;
    for (int i = 0; i < count; ++i) {
        Var err = ad::sub(t, values[i + 1], ad::stop_grad(t, targets[i]));
        Var m = ad::mean_all(t, ad::square(t, err));
        crit_sum = crit_sum.valid() ? ad::add(t, crit_sum, m) : m;
    }
    Var critic_loss = ad::scale(t, crit_sum, 0.5 * inv_count);

    GraphLosses out;
    out.actor_loss = actor_loss;
    out.critic_loss = critic_loss;
    out.stats.actor_loss = t.scalar(actor_loss);
    out.stats.critic_loss = t.scalar(critic_loss);
    out.stats.entropy = t.scalar(ent_sum) * inv_ent;
    double mv = 0.0;
    for (int i = 0; i <= I; ++i) mv += t.val(values[i]).mean();
    out.stats.mean_value = mv / static_cast<double>(I + 1);
    if (!std::isfinite(out.stats.actor_loss) || !std::isfinite(out.stats.critic_loss))
        throw NumericError("behavior loss is non-finite");
    return out;
}

ActorCritic::UpdateStats ActorCritic::update(const WorldModel& wm, const LatentState& starts,
                                             Rng& rng, SampleMode mode) {
    Tape t;
    WmGraph g(t, wm, false);  // frozen world model
    nn::Binding bind(t, params_, true);
    const GraphLosses gl = build_losses(t, g, bind, starts, rng, mode);

    t.backward(gl.actor_loss);
    actor_adam_.step(params_, bind, actor_idx_);
    t.backward(gl.critic_loss);
    critic_adam_.step(params_, bind, critic_idx_);
    if (!params_.all_finite())
        throw NumericError("actor/critic parameters became non-finite after update");
    return gl.stats;
}

ActorCritic::UpdateStats ActorCritic::compute_losses(const WorldModel& wm,
                                                     const LatentState& starts, Rng& rng,
                                                     SampleMode mode) const {
    Tape t;
    WmGraph g(t, wm, false);
    nn::Binding bind(t, const_cast<nn::ParamStore&>(params_), false);
    return build_losses(t, g, bind, starts, rng, mode).stats;
}

ActorCritic::Gradients ActorCritic::loss_gradients(const WorldModel& wm,
                                                   const LatentState& starts, Rng& rng,
                                                   SampleMode mode) const {
    Tape t;
    WmGraph g(t, wm, false);
    nn::Binding bind(t, const_cast<nn::ParamStore&>(params_), true);
    const GraphLosses gl = build_losses(t, g, bind, starts, rng, mode);

    Gradients out;
    out.stats = gl.stats;
    t.backward(gl.actor_loss);
    for (int i : actor_idx_) out.actor_from_actor_loss.push_back(bind.grad(i));
    for (int i = 0; i < wm.params().count(); ++i)
        out.wm_grad_abs_from_actor_loss += g.bind.grad(i).cwiseAbs().sum();
    t.backward(gl.critic_loss);
    for (int i : critic_idx_) out.critic_from_critic_loss.push_back(bind.grad(i));
    return out;
}

} // namespace sem2
