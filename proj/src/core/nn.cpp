#include "sem2/core/nn.hpp"

#include "sem2/core/error.hpp"

#include <cmath>

namespace sem2::nn {

int ParamStore::add(std::string name, Mat value) {
    // Adam moments are allocated on first use.
    params_.push_back(Entry{std::move(name), std::move(value), Mat(), Mat()});
    return static_cast<int>(params_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (int i = 0; i < count(); ++i)
        if (params_[i].name == name) return i;
    return -1;
}

uint64_t ParamStore::checksum() const {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& e : params_)
        mix(e.value.data(), sizeof(double) * static_cast<size_t>(e.value.size()));
    return h;
}

bool ParamStore::all_finite() const {
    for (const auto& e : params_)
        if (!e.value.allFinite()) return false;
    return true;
}

Mat glorot(int rows, int cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / (rows + cols));
    Mat m(rows, cols);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            m(r, c) = rng.uniform(-limit, limit);
    return m;
}

Mat conv_glorot(int rows, int cols, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Mat m(rows, cols);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            m(r, c) = rng.uniform(-limit, limit);
    return m;
}

Binding::Binding(Tape& tape, ParamStore& store, bool trainable) : tape_(&tape) {
    vars_.reserve(store.count());
    for (int i = 0; i < store.count(); ++i)
        vars_.push_back(tape.leaf(store.value(i), trainable));
}

Mat Binding::grad(int i) const {
    return tape_->grad(vars_[i]);
}

Linear::Linear(ParamStore& ps, const std::string& name, int in_, int out_, Rng& rng)
    : in(in_), out(out_) {
    w = ps.add(name + "/w", glorot(in_, out_, rng));
    b = ps.add(name + "/b", Mat::Zero(1, out_));
}

Var Linear::operator()(const Binding& p, Var x) const {
    return ad::add_rowvec(p.tape(), ad::matmul(p.tape(), x, p[w]), p[b]);
}

Mlp::Mlp(ParamStore& ps, const std::string& name, const std::vector<int>& dims, Rng& rng) {
    if (dims.size() < 2) throw UsageError("Mlp: need at least in/out dims");
    for (size_t i = 0; i + 1 < dims.size(); ++i)
        layers.emplace_back(ps, name + "/l" + std::to_string(i), dims[i], dims[i + 1], rng);
}

Var Mlp::operator()(const Binding& p, Var x) const {
    Var h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
        h = layers[i](p, h);
        if (i + 1 < layers.size()) h = ad::elu(p.tape(), h);
    }
    return h;
}

GruCell::GruCell(ParamStore& ps, const std::string& name, int input, int hidden_, Rng& rng)
    : reset(ps, name + "/reset", input + hidden_, hidden_, rng),
      update(ps, name + "/update", input + hidden_, hidden_, rng),
      cand(ps, name + "/cand", input + hidden_, hidden_, rng),
      hidden(hidden_) {}

Var GruCell::operator()(const Binding& p, Var x, Var h) const {
    Tape& t = p.tape();
    Var xh = ad::concat_cols(t, {x, h});
    Var r = ad::sigmoid(t, reset(p, xh));
    Var u = ad::sigmoid(t, update(p, xh));
    Var xrh = ad::concat_cols(t, {x, ad::mul(t, r, h)});
    Var c = ad::tanh_(t, cand(p, xrh));
    // h' = u*h + (1-u)*c
    Var keep = ad::mul(t, u, h);
    Var one_minus_u = ad::add_scalar(t, ad::neg(t, u), 1.0);
    return ad::add(t, keep, ad::mul(t, one_minus_u, c));
}

int res_levels(int res) {
    if (res < 8 || (res & (res - 1)) != 0)
        throw UsageError("image resolution must be a power of two >= 8, got " +
                         std::to_string(res));
    int levels = 0;
    while (res > 4) {
        res /= 2;
        ++levels;
    }
    return levels;
}

ConvEncoder::ConvEncoder(ParamStore& ps, const std::string& name, int channels, int res,
                         int base, Rng& rng) {
    const int levels = res_levels(res);
    int cin = channels;
    int spatial = res;
    for (int l = 0; l < levels; ++l) {
        const int cout = base << l;
        ad::ConvGeom g;
        g.cin = cin;
        g.hin = spatial;
        g.win = spatial;
        g.cout = cout;
        g.k = 4;
        g.stride = 2;
        g.pad = 1;
        geoms.push_back(g);
        const int fan_in = cin * g.k * g.k;
        const int fan_out = cout * g.k * g.k;
        ws.push_back(ps.add(name + "/w" + std::to_string(l),
                            conv_glorot(cout, cin * g.k * g.k, fan_in, fan_out, rng)));
        bs.push_back(ps.add(name + "/b" + std::to_string(l), Mat::Zero(1, cout)));
        cin = cout;
        spatial /= 2;
    }
    out = cin * spatial * spatial;
}

Var ConvEncoder::operator()(const Binding& p, Var img) const {
    Tape& t = p.tape();
    Var h = img;
    for (size_t l = 0; l < geoms.size(); ++l) {
        h = ad::conv2d(t, h, p[ws[l]], p[bs[l]], geoms[l]);
        h = ad::elu(t, h);
    }
    return h;
}

ConvDecoder::ConvDecoder(ParamStore& ps, const std::string& name, int in_dim, int channels,
                         int res, int base, Rng& rng) {
    const int levels = res_levels(res);
    c0 = base << (levels - 1);
    fc = Linear(ps, name + "/fc", in_dim, c0 * 4 * 4, rng);
    int cin = c0;
    int spatial = 4;
    for (int l = 0; l < levels; ++l) {
        const bool last = (l + 1 == levels);
        const int cout = last ? channels : (c0 >> (l + 1));
        ad::ConvGeom g;
        g.cin = cin;
        g.hin = spatial;
        g.win = spatial;
        g.cout = cout;
        g.k = 4;
        g.stride = 2;
        g.pad = 1;
        geoms.push_back(g);
        const int fan_in = cin * g.k * g.k;
        const int fan_out = cout * g.k * g.k;
        ws.push_back(ps.add(name + "/w" + std::to_string(l),
                            conv_glorot(cin, cout * g.k * g.k, fan_in, fan_out, rng)));
        bs.push_back(ps.add(name + "/b" + std::to_string(l), Mat::Zero(1, cout)));
        cin = cout;
        spatial *= 2;
    }
}

Var ConvDecoder::operator()(const Binding& p, Var x) const {
    Tape& t = p.tape();
    Var h = fc(p, x);
    for (size_t l = 0; l < geoms.size(); ++l) {
        h = ad::conv2d_transpose(t, h, p[ws[l]], p[bs[l]], geoms[l]);
        if (l + 1 < geoms.size()) h = ad::elu(t, h);
    }
    return h;
}

double Adam::step(ParamStore& ps, const Binding& bound, const std::vector<int>& indices) {
    std::vector<Mat> grads;
    grads.reserve(indices.size());
    double sq = 0.0;
    for (int i : indices) {
        grads.push_back(bound.grad(i));
        sq += grads.back().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    double scale = 1.0;
    if (clip > 0.0 && norm > clip) scale = clip / norm;
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t k = 0; k < indices.size(); ++k) {
        const int i = indices[k];
        Mat g = grads[k] * scale;
        Mat& m = ps.adam_m(i);
        Mat& v = ps.adam_v(i);
        if (m.size() == 0) m = Mat::Zero(g.rows(), g.cols());
        if (v.size() == 0) v = Mat::Zero(g.rows(), g.cols());
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
        Mat mhat = m / c1;
        Mat vhat = v / c2;
        ps.value(i).array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
    }
    return norm;
}

} // namespace sem2::nn
