#include "sem2/worldmodel/worldmodel.hpp"

#include "sem2/core/error.hpp"

#include <cmath>

namespace sem2 {

using ad::Tape;
using ad::Var;

Eigen::RowVectorXd image_to_planes(const Image& img) {
    Eigen::RowVectorXd out(static_cast<Eigen::Index>(img.c) * img.h * img.w);
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                out[(static_cast<Eigen::Index>(c) * img.h + y) * img.w + x] =
                    static_cast<double>(img.at(y, x, c)) / 255.0 - 0.5;
    return out;
}

Image planes_to_image(const Eigen::RowVectorXd& planes, int h, int w) {
    Image img(h, w, 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double v = (planes[(static_cast<Eigen::Index>(c) * h + y) * w + x] + 0.5) * 255.0;
                img.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
    return img;
}

WorldModel::WorldModel(ModelConfig cfg, Rng init_rng) : cfg_(cfg) {
    if (cfg_.d_h < 1 || cfg_.groups < 1 || cfg_.classes < 1 || cfg_.d_m < 1)
        throw UsageError("model dimensions must be positive");
    Rng rng = init_rng;
    const int zdim = cfg_.z_dim();
    pre_gru_ = nn::Linear(params_, "wm/pre_gru", zdim + 2, cfg_.hidden, rng);
    gru_ = nn::GruCell(params_, "wm/gru", cfg_.hidden, cfg_.d_h, rng);
    encoder_ = nn::ConvEncoder(params_, "wm/encoder", cfg_.channels, cfg_.raster,
                               cfg_.cnn_base, rng);
    embed_fc_ = nn::Linear(params_, "wm/embed", encoder_.out_dim(), cfg_.embed, rng);
    posterior_ = nn::Mlp(params_, "wm/posterior", {cfg_.d_h + cfg_.embed, cfg_.hidden, zdim}, rng);
    prior_ = nn::Mlp(params_, "wm/prior", {cfg_.d_h, cfg_.hidden, zdim}, rng);
    if (cfg_.has_filter) {
        filter_ = nn::Mlp(params_, "wm/filter",
                          {cfg_.d_h + zdim, cfg_.hidden, cfg_.hidden, cfg_.d_m}, rng);
        mask_dec_ = nn::ConvDecoder(params_, "wm/mask_dec", cfg_.d_m, cfg_.channels,
                                    cfg_.raster, cfg_.cnn_base, rng);
    }
    obs_dec_ = nn::ConvDecoder(params_, "wm/obs_dec", cfg_.d_h + zdim, cfg_.channels,
                               cfg_.raster, cfg_.cnn_base, rng);
    reward_ = nn::Mlp(params_, "wm/reward",
                      {cfg_.feature_dim(), cfg_.hidden, cfg_.hidden, 1}, rng);
    adam_.lr = cfg_.lr;
    adam_.clip = cfg_.grad_clip;
}

std::vector<int> WorldModel::param_indices() const {
    std::vector<int> idx(params_.count());
    for (int i = 0; i < params_.count(); ++i) idx[i] = i;
    return idx;
}

LatentState WorldModel::initial_state(int batch_size) const {
    if (batch_size < 1) throw UsageError("initial_state: batch_size must be >= 1");
    LatentState s;
    s.h = Mat::Zero(batch_size, cfg_.d_h);
    s.z = Mat::Zero(batch_size, cfg_.z_dim());
    return s;
}

// ---- graph builders ----

WmGraph::WmGraph(Tape& t, const WorldModel& w, bool trainable)
    : tape(t), wm(w), bind(t, const_cast<nn::ParamStore&>(w.params()), trainable) {}

Var WmGraph::recurrent(Var h, Var z, Var a) const {
    Var za = ad::concat_cols(tape, {z, a});
    Var x = ad::elu(tape, wm.pre_gru_(bind, za));
    return wm.gru_(bind, x, h);
}

Var WmGraph::encode(Var obs) const {
    Var features = wm.encoder_(bind, obs);
    return ad::elu(tape, wm.embed_fc_(bind, features));
}

Var WmGraph::posterior_logits(Var h, Var embed) const {
    return wm.posterior_(bind, ad::concat_cols(tape, {h, embed}));
}

Var WmGraph::prior_logits(Var h) const {
    return wm.prior_(bind, h);
}

Var WmGraph::filter(Var h, Var z) const {
    if (!wm.cfg_.has_filter) throw ProtocolError("filter: model built without a filter");
    return wm.filter_(bind, ad::concat_cols(tape, {h, z}));
}

Var WmGraph::feature(Var h, Var z) const {
    if (wm.cfg_.has_filter) return filter(h, z);
    return ad::concat_cols(tape, {h, z});
}

Var WmGraph::decode_mask(Var s_m) const {
    if (!wm.cfg_.has_filter) throw ProtocolError("decode_mask: model built without a mask head");
    return wm.mask_dec_(bind, s_m);
}

Var WmGraph::decode_obs(Var h, Var z) const {
    return wm.obs_dec_(bind, ad::concat_cols(tape, {h, z}));
}

Var WmGraph::reward_mean(Var feat) const {
    return wm.reward_(bind, feat);
}

Mat WorldModel::sample_onehot(const Mat& probs, int groups, int classes, Rng& rng) {
    Mat onehot = Mat::Zero(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        for (int g = 0; g < groups; ++g) {
            const double u = rng.uniform();
            double acc = 0.0;
            int pick = classes - 1;
            for (int c = 0; c < classes; ++c) {
                acc += probs(r, g * classes + c);
                if (u < acc) {
                    pick = c;
                    break;
                }
            }
            onehot(r, g * classes + pick) = 1.0;
        }
    }
    return onehot;
}

Var WmGraph::sample_z(Var logits, Rng& rng, SampleMode mode) const {
    const int G = wm.cfg_.groups, C = wm.cfg_.classes;
    Var probs = ad::softmax_groups(tape, logits, G, C);
    if (mode == SampleMode::soft) return probs;
    // straight-through: value is the one-hot, gradient follows the probs
    Mat onehot = WorldModel::sample_onehot(tape.val(probs), G, C, rng);
    Var delta = tape.leaf(onehot - tape.val(probs), false);
    return ad::add(tape, probs, delta);
}

// ---- value-level single steps ----

WorldModel::ObserveResult WorldModel::observe_step(const LatentState& prev,
                                                   const Mat& prev_action, const Mat& obs,
                                                   Rng& rng, SampleMode mode) const {
    if (prev.h.cols() != cfg_.d_h || prev.z.cols() != cfg_.z_dim())
        throw UsageError("observe_step: latent shape mismatch");
    if (prev_action.rows() != prev.h.rows() || prev_action.cols() != 2)
        throw UsageError("observe_step: action shape mismatch");
    if (obs.rows() != prev.h.rows() || obs.cols() != cfg_.obs_dim())
        throw UsageError("observe_step: observation shape mismatch");
    Tape t;
    WmGraph g(t, *this, false);
    Var h = g.recurrent(t.leaf(prev.h, false), t.leaf(prev.z, false),
                        t.leaf(prev_action, false));
    Var prior = g.prior_logits(h);
    Var embed = g.encode(t.leaf(obs, false));
    Var post = g.posterior_logits(h, embed);
    Var z = g.sample_z(post, rng, mode);
    ObserveResult r;
    r.state = LatentState{t.val(h), t.val(z)};
    r.posterior = StateDistribution{t.val(post), cfg_.groups, cfg_.classes};
    r.prior = StateDistribution{t.val(prior), cfg_.groups, cfg_.classes};
    return r;
}

WorldModel::ObserveResult WorldModel::observe_step(const LatentState& prev,
                                                   const Action& prev_action,
                                                   const Image& obs, Rng& rng,
                                                   SampleMode mode) const {
    Mat a(1, 2);
    a << prev_action.throttle, prev_action.steer;
    Mat o(1, cfg_.obs_dim());
    o.row(0) = image_to_planes(obs);
    return observe_step(prev, a, o, rng, mode);
}

WorldModel::ImagineResult WorldModel::imagine_step(const LatentState& prev, const Mat& action,
                                                   Rng& rng, SampleMode mode) const {
    if (prev.h.cols() != cfg_.d_h || prev.z.cols() != cfg_.z_dim())
        throw UsageError("imagine_step: latent shape mismatch");
    if (action.rows() != prev.h.rows() || action.cols() != 2)
        throw UsageError("imagine_step: action shape mismatch");
    Tape t;
    WmGraph g(t, *this, false);
    Var h = g.recurrent(t.leaf(prev.h, false), t.leaf(prev.z, false), t.leaf(action, false));
    Var prior = g.prior_logits(h);
    Var z = g.sample_z(prior, rng, mode);
    ImagineResult r;
    r.state = LatentState{t.val(h), t.val(z)};
    r.prior = StateDistribution{t.val(prior), cfg_.groups, cfg_.classes};
    return r;
}

Mat WorldModel::filter(const LatentState& state) const {
    Tape t;
    WmGraph g(t, *this, false);
    return t.val(g.filter(t.leaf(state.h, false), t.leaf(state.z, false)));
}

Mat WorldModel::feature(const LatentState& state) const {
    Tape t;
    WmGraph g(t, *this, false);
    return t.val(g.feature(t.leaf(state.h, false), t.leaf(state.z, false)));
}

Mat WorldModel::predict_mask(const Mat& s_m) const {
    Tape t;
    WmGraph g(t, *this, false);
    return t.val(g.decode_mask(t.leaf(s_m, false)));
}

Mat WorldModel::predict_obs(const LatentState& state) const {
    Tape t;
    WmGraph g(t, *this, false);
    return t.val(g.decode_obs(t.leaf(state.h, false), t.leaf(state.z, false)));
}

Mat WorldModel::predict_reward(const Mat& feature) const {
    Tape t;
    WmGraph g(t, *this, false);
    return t.val(g.reward_mean(t.leaf(feature, false)));
}

// ---- loss ----

Var WorldModel::kl_term(Tape& t, Var post_logits, Var prior_logits) const {
    const int G = cfg_.groups, C = cfg_.classes;
    auto kl_elems = [&](Var q_logits, Var p_logits) {
        Var lq = ad::log_softmax_groups(t, q_logits, G, C);
        Var lp = ad::log_softmax_groups(t, p_logits, G, C);
        Var q = ad::exp_(t, lq);
        return ad::mul(t, q, ad::sub(t, lq, lp));
    };
    auto reduce = [&](Var elems) {
        const double B = static_cast<double>(t.val(elems).rows());
        if (cfg_.free_bits > 0.0) {
            // per-group sums, clamped from below
            Mat sel = Mat::Zero(static_cast<Eigen::Index>(G) * C, G);
            for (int g = 0; g < G; ++g)
                for (int c = 0; c < C; ++c) sel(static_cast<Eigen::Index>(g) * C + c, g) = 1.0;
            Var groups = ad::matmul(t, elems, t.leaf(sel, false));
            Var clamped = ad::clamp_min(t, groups, cfg_.free_bits);
            return ad::scale(t, ad::sum_all(t, clamped), 1.0 / B);
        }
        return ad::scale(t, ad::sum_all(t, elems), 1.0 / B);
    };
    if (!cfg_.kl_balance) return reduce(kl_elems(post_logits, prior_logits));
    Var lhs = reduce(kl_elems(ad::stop_grad(t, post_logits), prior_logits));
    Var rhs = reduce(kl_elems(post_logits, ad::stop_grad(t, prior_logits)));
    return ad::add(t, ad::scale(t, lhs, cfg_.kl_alpha), ad::scale(t, rhs, 1.0 - cfg_.kl_alpha));
}

WorldModel::LossResult WorldModel::loss(const SequenceBatch& batch, Rng& rng,
                                        SampleMode mode) const {
    Tape t;
    WmGraph g(t, *this, false);
    Var total;
    return build_loss(t, g, batch, rng, mode, total);
}

WorldModel::LossResult WorldModel::update(const SequenceBatch& batch, Rng& rng,
                                          SampleMode mode) {
    Tape t;
    WmGraph g(t, *this, true);
    Var total;
    LossResult res = build_loss(t, g, batch, rng, mode, total);
    t.backward(total);
    res.grad_norm = adam_.step(params_, g.bind, param_indices());
    if (!params_.all_finite())
        throw NumericError("world model parameters became non-finite after update");
    return res;
}

std::vector<Mat> WorldModel::loss_gradients(const SequenceBatch& batch, Rng& rng,
                                            SampleMode mode) const {
    Tape t;
    WmGraph g(t, *this, true);
    Var total;
    (void)build_loss(t, g, batch, rng, mode, total);
    t.backward(total);
    std::vector<Mat> grads;
    grads.reserve(params_.count());
    for (int i = 0; i < params_.count(); ++i) grads.push_back(g.bind.grad(i));
    return grads;
}

WorldModel::LossResult WorldModel::build_loss(Tape& t, WmGraph& g, const SequenceBatch& batch,
                                              Rng& rng, SampleMode mode, Var& total_out) const {
    const int B = static_cast<int>(batch.sequences.size());
    if (B < 1) throw UsageError("loss: empty batch");
    const size_t L = batch.sequences.front().records.size();
    for (const auto& s : batch.sequences)
        if (s.records.size() != L) throw UsageError("loss: ragged sequence batch");
    if (L < 1) throw UsageError("loss: empty sequences");

    Var h = t.leaf(Mat::Zero(B, cfg_.d_h), false);
    Var z = t.leaf(Mat::Zero(B, cfg_.z_dim()), false);

    Var image_nll, mask_nll, reward_nll, kl;
    LatentState posts;
    posts.h = Mat(B * static_cast<int>(L), cfg_.d_h);
    posts.z = Mat(B * static_cast<int>(L), cfg_.z_dim());

    for (size_t step = 0; step < L; ++step) {
        Mat a(B, 2), r_target(B, 1);
        Mat o(B, cfg_.obs_dim()), m(B, cfg_.obs_dim());
        for (int b = 0; b < B; ++b) {
            const TransitionRecord& rec = batch.sequences[b].records[step];
            a(b, 0) = rec.action.throttle;
            a(b, 1) = rec.action.steer;
            r_target(b, 0) = rec.reward;
            o.row(b) = image_to_planes(rec.observation);
            m.row(b) = image_to_planes(rec.mask);
        }
        h = g.recurrent(h, z, t.leaf(a, false));
        Var prior = g.prior_logits(h);
        Var embed = g.encode(t.leaf(o, false));
        Var post = g.posterior_logits(h, embed);
        z = g.sample_z(post, rng, mode);

        Var obs_mean = g.decode_obs(h, z);
        Var inll = ad::gaussian_nll_mean(t, obs_mean, o);
        image_nll = image_nll.valid() ? ad::add(t, image_nll, inll) : inll;

        Var feat;
        if (cfg_.has_filter) {
            Var s_m = g.filter(h, z);
            Var mask_mean = g.decode_mask(s_m);
            Var mnll = ad::gaussian_nll_mean(t, mask_mean, m);
            mask_nll = mask_nll.valid() ? ad::add(t, mask_nll, mnll) : mnll;
            feat = s_m;
        } else {
            feat = g.feature(h, z);
        }
        Var rnll = ad::gaussian_nll_mean(t, g.reward_mean(feat), r_target);
        reward_nll = reward_nll.valid() ? ad::add(t, reward_nll, rnll) : rnll;

        Var klv = kl_term(t, post, prior);
        kl = kl.valid() ? ad::add(t, kl, klv) : klv;

        posts.h.middleRows(static_cast<int>(step) * B, B) = t.val(h);
        posts.z.middleRows(static_cast<int>(step) * B, B) = t.val(z);
    }

    Var total = ad::add(t, image_nll, reward_nll);
    if (mask_nll.valid()) total = ad::add(t, total, mask_nll);
    if (cfg_.beta != 0.0) total = ad::add(t, total, ad::scale(t, kl, cfg_.beta));
    total_out = total;

    LossResult res;
    res.breakdown.image_nll = t.scalar(image_nll);
    res.breakdown.mask_nll = mask_nll.valid() ? t.scalar(mask_nll) : 0.0;
    res.breakdown.reward_nll = t.scalar(reward_nll);
    res.breakdown.kl = t.scalar(kl);
    res.breakdown.beta = cfg_.beta;
    res.breakdown.total = t.scalar(total);
    res.posteriors = std::move(posts);

    auto check = [](double v, const char* name) {
        if (!std::isfinite(v))
            throw NumericError(std::string("world model loss is non-finite in component ") + name);
    };
    check(res.breakdown.image_nll, "image_nll");
    check(res.breakdown.mask_nll, "mask_nll");
    check(res.breakdown.reward_nll, "reward_nll");
    check(res.breakdown.kl, "kl");
    return res;
}

} // namespace sem2
