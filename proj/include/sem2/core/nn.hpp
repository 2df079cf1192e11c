#pragma once

#include "sem2/core/ad.hpp"
#include "sem2/core/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sem2::nn {

using ad::Mat;
using ad::Tape;
using ad::Var;

// Named trainable tensors plus their Adam moments. Parameter identity is the
// index; names are for checkpoints and diagnostics.
class ParamStore {
public:
    int add(std::string name, Mat value);
    int find(const std::string& name) const;  // -1 if absent

    Mat& value(int i) { return params_[i].value; }
    const Mat& value(int i) const { return params_[i].value; }
    const std::string& name(int i) const { return params_[i].name; }
    int count() const { return static_cast<int>(params_.size()); }

    Mat& adam_m(int i) { return params_[i].m; }
    Mat& adam_v(int i) { return params_[i].v; }

    // FNV-1a over the raw bytes of every value tensor, in index order.
    uint64_t checksum() const;
    bool all_finite() const;

private:
    struct Entry {
        std::string name;
        Mat value, m, v;
    };
    std::vector<Entry> params_;
};

// Glorot-uniform initialisers.
Mat glorot(int rows, int cols, Rng& rng);
Mat conv_glorot(int rows, int cols, int fan_in, int fan_out, Rng& rng);

// Binds every parameter of a store onto one tape. `trainable=false` injects
// the values as constants so gradients never accumulate into them.
class Binding {
public:
    Binding(Tape& tape, ParamStore& store, bool trainable);
    Var operator[](int param_index) const { return vars_[param_index]; }
    // Gradient of the last backward pass w.r.t. parameter i.
    Mat grad(int i) const;
    Tape& tape() const { return *tape_; }

private:
    Tape* tape_;
    std::vector<Var> vars_;
};

// ---- layer builders (parameters registered at construction) ----

struct Linear {
    int w = -1, b = -1;
    int in = 0, out = 0;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);
    Var operator()(const Binding& p, Var x) const;
};

// Feed-forward stack with ELU between layers; the output layer is linear.
struct Mlp {
    std::vector<Linear> layers;
    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& name, const std::vector<int>& dims, Rng& rng);
    Var operator()(const Binding& p, Var x) const;
};

struct GruCell {
    Linear reset, update, cand;  // each maps concat(x, h) -> hidden
    int hidden = 0;
    GruCell() = default;
    GruCell(ParamStore& ps, const std::string& name, int input, int hidden, Rng& rng);
    Var operator()(const Binding& p, Var x, Var h) const;
};

// Strided conv encoder: halves the spatial size per level until 4x4, then
// flattens. Output width is reported by out_dim().
struct ConvEncoder {
    std::vector<int> ws, bs;
    std::vector<ad::ConvGeom> geoms;
    int out = 0;
    ConvEncoder() = default;
    ConvEncoder(ParamStore& ps, const std::string& name, int channels, int res,
                int base, Rng& rng);
    Var operator()(const Binding& p, Var img) const;
    int out_dim() const { return out; }
};

// Mirror of ConvEncoder: linear from the input feature to a 4x4 map, then
// transposed convs back to (channels, res, res).
struct ConvDecoder {
    Linear fc;
    std::vector<int> ws, bs;
    std::vector<ad::ConvGeom> geoms;
    int c0 = 0;
    ConvDecoder() = default;
    ConvDecoder(ParamStore& ps, const std::string& name, int in_dim, int channels,
                int res, int base, Rng& rng);
    Var operator()(const Binding& p, Var x) const;
};

// Adam with global gradient-norm clipping. Gradients are read from the
// binding after a backward pass; parameters touched by `indices` only.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip = 100.0;
    int64_t step_count = 0;

    // Returns the pre-clip global gradient norm.
    double step(ParamStore& ps, const Binding& bound, const std::vector<int>& indices);
};

int res_levels(int res);  // conv levels for a power-of-two resolution >= 8

} // namespace sem2::nn
