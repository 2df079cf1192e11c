#pragma once

#include "sem2/core/nn.hpp"
#include "sem2/core/rng.hpp"
#include "sem2/worldmodel/worldmodel.hpp"

#include <vector>

namespace sem2 {

struct BehaviorConfig {
    int horizon = 4;       // imagined horizon I
    double gamma = 0.99;
    double lambda = 0.95;
    double eta = 1e-4;     // entropy regularizer weight
    double actor_lr = 1e-5;
    double critic_lr = 1e-5;
    double grad_clip = 100.0;
    int hidden = 256;
    double log_std_min = -5.0;
    double log_std_max = 1.0;
};

// Horizon-I imagined rollout; rewards[i] and values[i+1] are decoded from
// states[i+1], the state reached by actions[i].
struct ImaginedTrajectory {
    std::vector<LatentState> states;    // I+1
    std::vector<Mat> filtered;          // I+1 feature vectors
    std::vector<Mat> actions;           // I, (batch x 2) env-scaled
    std::vector<Mat> rewards;           // I, (batch x 1)
    std::vector<Mat> values;            // I+1, (batch x 1)
    std::vector<double> discounts;      // I, constant gamma
};

// Recursive TD-lambda targets; rewards has length I, values length I+1.
// targets[i] estimates the return attributed to states[i+1].
std::vector<Mat> td_lambda(const std::vector<Mat>& rewards, const std::vector<Mat>& values,
                           double gamma, double lambda);
std::vector<double> td_lambda(const std::vector<double>& rewards,
                              const std::vector<double>& values, double gamma, double lambda);

// Tanh-squashed diagonal Gaussian actor and scalar critic over the filtered
// feature; updates never touch the world model's parameters.
class ActorCritic {
public:
    ActorCritic(BehaviorConfig cfg, int feature_dim, Rng init_rng);

    // Greedy (distribution mode) or sampled action for one feature row.
    // `presquash_noise_std` adds exploration noise before the squash.
    Action act(const Mat& feature, Rng& rng, bool greedy,
               double presquash_noise_std = 0.0) const;

    // `constant_action` replaces the actor by a fixed policy (testing hook).
    ImaginedTrajectory imagine(const WorldModel& wm, const LatentState& start, int horizon,
                               Rng& rng, SampleMode mode = SampleMode::stochastic,
                               const Action* constant_action = nullptr) const;

    struct UpdateStats {
        double actor_loss = 0.0;
        double critic_loss = 0.0;
        double entropy = 0.0;
        double mean_value = 0.0;
    };
    // One actor step and one critic step from fresh imagined trajectories.
    UpdateStats update(const WorldModel& wm, const LatentState& starts, Rng& rng,
                       SampleMode mode = SampleMode::stochastic);

    // Loss values without updating (same graph as update()).
    UpdateStats compute_losses(const WorldModel& wm, const LatentState& starts, Rng& rng,
                               SampleMode mode = SampleMode::stochastic) const;

    struct Gradients {
        UpdateStats stats;
        std::vector<Mat> actor_from_actor_loss;    // parallel to actor_indices()
        std::vector<Mat> critic_from_critic_loss;  // parallel to critic_indices()
        double wm_grad_abs_from_actor_loss = 0.0;  // must be exactly 0
    };
    Gradients loss_gradients(const WorldModel& wm, const LatentState& starts, Rng& rng,
                             SampleMode mode = SampleMode::soft) const;

    // Plain losses on a fixed trajectory against precomputed targets
    // (no update); the value-level counterparts of the training losses.
    double critic_loss_value(const ImaginedTrajectory& traj,
                             const std::vector<Mat>& targets) const;
    double actor_loss_value(const ImaginedTrajectory& traj, const std::vector<Mat>& targets,
                            double eta) const;

    Mat value(const Mat& feature) const;  // (batch x 1)

    const BehaviorConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const std::vector<int>& actor_indices() const { return actor_idx_; }
    const std::vector<int>& critic_indices() const { return critic_idx_; }
    int64_t actor_opt_steps() const { return actor_adam_.step_count; }
    int64_t critic_opt_steps() const { return critic_adam_.step_count; }
    void set_opt_steps(int64_t actor_steps, int64_t critic_steps) {
        actor_adam_.step_count = actor_steps;
        critic_adam_.step_count = critic_steps;
    }

    // graph pieces shared by update() and the gradient tests
    struct PolicySample {
        ad::Var action;    // env-scaled, differentiable via reparameterization
        ad::Var entropy;   // (batch x 1) single-sample estimate
    };
    PolicySample policy_sample(ad::Tape& t, const nn::Binding& bind, ad::Var feature,
                               Rng& rng) const;
    ad::Var critic_head(const nn::Binding& bind, ad::Var feature) const;

private:
    struct GraphLosses {
        ad::Var actor_loss, critic_loss;
        UpdateStats stats;
    };
    GraphLosses build_losses(ad::Tape& t, const WmGraph& g, const nn::Binding& bind,
                             const LatentState& starts, Rng& rng, SampleMode mode) const;

    BehaviorConfig cfg_;
    int feature_dim_;
    nn::ParamStore params_;
    nn::Mlp actor_;
    nn::Mlp critic_;
    std::vector<int> actor_idx_, critic_idx_;
    nn::Adam actor_adam_, critic_adam_;
};

} // namespace sem2
