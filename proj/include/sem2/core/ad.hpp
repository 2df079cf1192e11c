#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace sem2::ad {

using Mat = Eigen::MatrixXd;

// Handle into a Tape. Rows are the batch dimension, columns are flattened
// features (images are channel-major: c*H*W + y*W + x).
struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
};

struct ConvGeom {
    int cin = 0, hin = 0, win = 0;
    int cout = 0, k = 0, stride = 1, pad = 0;
    int hout() const { return (hin + 2 * pad - k) / stride + 1; }
    int wout() const { return (win + 2 * pad - k) / stride + 1; }
    // transposed convolution output size for the same (k, stride, pad)
    int hout_t() const { return (hin - 1) * stride - 2 * pad + k; }
    int wout_t() const { return (win - 1) * stride - 2 * pad + k; }
};

// Reverse-mode tape. Each op appends a node holding its value and a
// backward closure; backward() walks nodes in reverse creation order.
class Tape {
public:
    Var leaf(Mat value, bool requires_grad);
    Var leaf(double value, bool requires_grad);

    const Mat& val(Var v) const { return nodes_[v.i].value; }
    double scalar(Var v) const { return nodes_[v.i].value(0, 0); }
    bool requires_grad(Var v) const { return nodes_[v.i].requires_grad; }

    // Runs a fresh backward pass from a 1x1 root. Grads from any previous
    // pass on this tape are discarded.
    void backward(Var root);

    // Gradient of the last backward() root w.r.t. v; zero matrix if v was
    // not reached.
    Mat grad(Var v) const;

    size_t size() const { return nodes_.size(); }

    // --- internal use by ops ---
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        std::function<void(Tape&, int self)> backward;
    };
    Var emit(Mat value, bool requires_grad, std::function<void(Tape&, int)> fn);
    Mat& grad_ref(int i);
    const Mat& grad_of(int i) const { return nodes_[i].grad; }
    bool grad_set(int i) const { return nodes_[i].grad.size() > 0; }

private:
    std::vector<Node> nodes_;
};

// ---- elementwise / shape ----
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var neg(Tape& t, Var a);
Var mul(Tape& t, Var a, Var b);                // hadamard
Var scale(Tape& t, Var a, double s);
Var add_scalar(Tape& t, Var a, double s);
Var add_rowvec(Tape& t, Var a, Var row);       // broadcast bias over rows
Var matmul(Tape& t, Var a, Var b);
Var concat_cols(Tape& t, const std::vector<Var>& vs);
Var slice_cols(Tape& t, Var a, int start, int n);
Var stop_grad(Tape& t, Var a);

// ---- nonlinearities ----
Var tanh_(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var elu(Tape& t, Var a);
Var exp_(Tape& t, Var a);
Var log_(Tape& t, Var a);
Var square(Tape& t, Var a);
Var softplus(Tape& t, Var a);
Var clamp_min(Tape& t, Var a, double lo);

// ---- reductions ----
Var sum_all(Tape& t, Var a);    // 1x1
Var mean_all(Tape& t, Var a);   // 1x1
Var sum_cols(Tape& t, Var a);   // (rows x 1), sums each row

// ---- grouped categorical utilities (logits laid out g*C + c) ----
Var softmax_groups(Tape& t, Var logits, int groups, int classes);
Var log_softmax_groups(Tape& t, Var logits, int groups, int classes);

// ---- convolution ----
Var conv2d(Tape& t, Var x, Var w, Var b, const ConvGeom& g);
// w is (cin x cout*k*k); output geometry from ConvGeom::hout_t/wout_t.
Var conv2d_transpose(Tape& t, Var x, Var w, Var b, const ConvGeom& g);

// Sum over all elements of 0.5*(pred-target)^2 + 0.5*log(2*pi), i.e. the
// negative log likelihood of a unit-variance diagonal Gaussian, divided
// by the batch size (rows).
Var gaussian_nll_mean(Tape& t, Var pred, const Mat& target);

} // namespace sem2::ad
