#pragma once

#include "sem2/core/ad.hpp"
#include "sem2/core/nn.hpp"
#include "sem2/core/rng.hpp"
#include "sem2/envsim/env.hpp"
#include "sem2/replay/replay.hpp"

#include <optional>
#include <string>
#include <vector>

namespace sem2 {

using ad::Mat;

struct ModelConfig {
    int raster = 64;
    int channels = 3;
    int d_h = 256;      // deterministic state width
    int groups = 16;    // categorical groups G
    int classes = 16;   // classes per group C
    int d_m = 256;      // filtered feature width
    int embed = 256;    // CNN embedding width
    int hidden = 256;   // MLP hidden width
    int cnn_base = 32;  // first conv channel count
    double beta = 1.0;
    bool kl_balance = false;  // DreamerV2-style balancing, off = plain KL
    double kl_alpha = 0.8;
    double free_bits = 0.0;   // per-group KL floor, 0 disables
    double lr = 3e-5;
    double grad_clip = 100.0;
    bool has_filter = true;   // false: baseline wiring, heads consume (h, z)

    int z_dim() const { return groups * classes; }
    int obs_dim() const { return channels * raster * raster; }
    int feature_dim() const { return has_filter ? d_m : d_h + z_dim(); }
};

enum class SampleMode { stochastic, soft };

// Paired deterministic/stochastic model state; z is the flattened one-hot
// (batch x groups*classes). All-zero z means "no sample yet".
struct LatentState {
    Mat h;
    Mat z;
    int batch() const { return static_cast<int>(h.rows()); }
};

struct StateDistribution {
    Mat logits;  // (batch x groups*classes)
    int groups = 0;
    int classes = 0;
};

struct LossBreakdown {
    double image_nll = 0.0;
    double mask_nll = 0.0;
    double reward_nll = 0.0;
    double kl = 0.0;
    double beta = 1.0;
    double total = 0.0;
};

// (normalized) image tensor conversions: planes are channel-major and
// scaled to [-0.5, 0.5].
Eigen::RowVectorXd image_to_planes(const Image& img);
Image planes_to_image(const Eigen::RowVectorXd& planes, int h, int w);

class WorldModel;

// Binds the model's parameters onto one tape and exposes the seven
// components as graph builders; `trainable=false` freezes the parameters
// so no gradient can accumulate into them (used by behavior learning).
struct WmGraph {
    WmGraph(ad::Tape& t, const WorldModel& wm, bool trainable);

    ad::Var recurrent(ad::Var h, ad::Var z, ad::Var a) const;  // f_phi
    ad::Var encode(ad::Var obs) const;                          // CNN embedding
    ad::Var posterior_logits(ad::Var h, ad::Var embed) const;   // q_phi
    ad::Var prior_logits(ad::Var h) const;                      // p_phi transition
    ad::Var filter(ad::Var h, ad::Var z) const;                 // S_phi
    ad::Var feature(ad::Var h, ad::Var z) const;                // policy/reward input
    ad::Var decode_mask(ad::Var s_m) const;                     // mask mean
    ad::Var decode_obs(ad::Var h, ad::Var z) const;             // observation mean
    ad::Var reward_mean(ad::Var feature) const;
    ad::Var sample_z(ad::Var logits, Rng& rng, SampleMode mode) const;

    ad::Tape& tape;
    const WorldModel& wm;
    nn::Binding bind;
};

// The seven-component recurrent world model with the semantic filter.
class WorldModel {
public:
    WorldModel(ModelConfig cfg, Rng init_rng);

    LatentState initial_state(int batch_size) const;

    struct ObserveResult {
        LatentState state;
        StateDistribution posterior;
        StateDistribution prior;
    };
    // Batched; obs rows are normalized channel-major planes.
    ObserveResult observe_step(const LatentState& prev, const Mat& prev_action,
                               const Mat& obs, Rng& rng,
                               SampleMode mode = SampleMode::stochastic) const;
    ObserveResult observe_step(const LatentState& prev, const Action& prev_action,
                               const Image& obs, Rng& rng,
                               SampleMode mode = SampleMode::stochastic) const;

    struct ImagineResult {
        LatentState state;
        StateDistribution prior;
    };
    ImagineResult imagine_step(const LatentState& prev, const Mat& action, Rng& rng,
                               SampleMode mode = SampleMode::stochastic) const;

    Mat filter(const LatentState& state) const;   // requires has_filter
    Mat feature(const LatentState& state) const;  // s_m, or concat(h,z) baseline
    Mat predict_mask(const Mat& s_m) const;       // normalized mean planes
    Mat predict_obs(const LatentState& state) const;
    Mat predict_reward(const Mat& feature) const;  // (batch x 1)

    struct LossResult {
        LossBreakdown breakdown;
        LatentState posteriors;  // B*L rows, detached
        double grad_norm = 0.0;
    };
    // Loss of one batch without updating parameters.
    LossResult loss(const SequenceBatch& batch, Rng& rng,
                    SampleMode mode = SampleMode::stochastic) const;
    // One optimizer step.
    LossResult update(const SequenceBatch& batch, Rng& rng,
                      SampleMode mode = SampleMode::stochastic);

    // Analytic gradients of the total loss w.r.t. every parameter, without
    // applying an update (gradient-check support).
    std::vector<Mat> loss_gradients(const SequenceBatch& batch, Rng& rng,
                                    SampleMode mode = SampleMode::soft) const;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    std::vector<int> param_indices() const;
    int feature_dim() const { return cfg_.feature_dim(); }
    int64_t opt_steps() const { return adam_.step_count; }
    void set_opt_steps(int64_t n) { adam_.step_count = n; }

    static Mat sample_onehot(const Mat& probs, int groups, int classes, Rng& rng);

    // Categorical KL with the configured balancing/free-bits handling;
    // returns a 1x1 scalar node (mean over rows, summed over groups).
    ad::Var kl_term(ad::Tape& t, ad::Var post_logits, ad::Var prior_logits) const;

private:
    friend struct WmGraph;

    LossResult build_loss(ad::Tape& t, WmGraph& g, const SequenceBatch& batch, Rng& rng,
                          SampleMode mode, ad::Var& total_out) const;

    ModelConfig cfg_;
    nn::ParamStore params_;
    nn::Adam adam_;

    nn::Linear pre_gru_;        // concat(z, a) -> hidden
    nn::GruCell gru_;           // recurrent model
    nn::ConvEncoder encoder_;   // representation model (CNN part)
    nn::Linear embed_fc_;
    nn::Mlp posterior_;         // (h, embed) -> logits
    nn::Mlp prior_;             // h -> logits
    nn::Mlp filter_;            // (h, z) -> s_m, two hidden layers
    nn::ConvDecoder obs_dec_;   // (h, z) -> observation mean
    nn::ConvDecoder mask_dec_;  // s_m -> mask mean
    nn::Mlp reward_;            // feature -> reward mean
};

} // namespace sem2
