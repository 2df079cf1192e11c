#include "sem2/core/ad.hpp"

#include "sem2/core/error.hpp"

#include <cmath>

namespace sem2::ad {

Var Tape::leaf(Mat value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(double value, bool requires_grad) {
    Mat m(1, 1);
    m(0, 0) = value;
    return leaf(std::move(m), requires_grad);
}

Var Tape::emit(Mat value, bool requires_grad, std::function<void(Tape&, int)> fn) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad,
                          requires_grad ? std::move(fn) : nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad_ref(int i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::backward(Var root) {
    if (!root.valid()) throw ProtocolError("backward: invalid root");
    const Node& r = nodes_[root.i];
    if (r.value.rows() != 1 || r.value.cols() != 1)
        throw ProtocolError("backward: root must be a 1x1 scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(root.i)(0, 0) = 1.0;
    for (int i = root.i; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.backward) continue;
        if (n.grad.size() == 0) continue;  // not on a path to the root
        n.backward(*this, i);
    }
}

Mat Tape::grad(Var v) const {
    const Node& n = nodes_[v.i];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

static void check_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw UsageError(std::string(op) + ": shape mismatch");
}

Var add(Tape& t, Var a, Var b) {
    check_same_shape(t.val(a), t.val(b), "add");
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.emit(t.val(a) + t.val(b), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad_of(self);
        if (t.requires_grad(a)) t.grad_ref(a.i) += g;
        if (t.requires_grad(b)) t.grad_ref(b.i) += g;
    });
}

Var sub(Tape& t, Var a, Var b) {
    check_same_shape(t.val(a), t.val(b), "sub");
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.emit(t.val(a) - t.val(b), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad_of(self);
        if (t.requires_grad(a)) t.grad_ref(a.i) += g;
        if (t.requires_grad(b)) t.grad_ref(b.i) -= g;
    });
}

Var neg(Tape& t, Var a) {
    return t.emit(-t.val(a), t.requires_grad(a), [a](Tape& t, int self) {
        t.grad_ref(a.i) -= t.grad_of(self);
    });
}

Var mul(Tape& t, Var a, Var b) {
    check_same_shape(t.val(a), t.val(b), "mul");
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.emit(t.val(a).cwiseProduct(t.val(b)), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad_of(self);
        if (t.requires_grad(a)) t.grad_ref(a.i) += g.cwiseProduct(t.val(b));
        if (t.requires_grad(b)) t.grad_ref(b.i) += g.cwiseProduct(t.val(a));
    });
}

Var scale(Tape& t, Var a, double s) {
    return t.emit(t.val(a) * s, t.requires_grad(a), [a, s](Tape& t, int self) {
        t.grad_ref(a.i) += t.grad_of(self) * s;
    });
}

Var add_scalar(Tape& t, Var a, double s) {
    return t.emit(t.val(a).array() + s, t.requires_grad(a), [a](Tape& t, int self) {
        t.grad_ref(a.i) += t.grad_of(self);
    });
}

Var add_rowvec(Tape& t, Var a, Var row) {
    if (t.val(row).rows() != 1 || t.val(row).cols() != t.val(a).cols())
        throw UsageError("add_rowvec: bias shape mismatch");
    bool rg = t.requires_grad(a) || t.requires_grad(row);
    Mat out = t.val(a);
    out.rowwise() += t.val(row).row(0);
    return t.emit(std::move(out), rg, [a, row](Tape& t, int self) {
        const Mat& g = t.grad_of(self);
        if (t.requires_grad(a)) t.grad_ref(a.i) += g;
        if (t.requires_grad(row)) t.grad_ref(row.i) += g.colwise().sum();
    });
}

Var matmul(Tape& t, Var a, Var b) {
    if (t.val(a).cols() != t.val(b).rows()) throw UsageError("matmul: inner dim mismatch");
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.emit(t.val(a) * t.val(b), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad_of(self);
        if (t.requires_grad(a)) t.grad_ref(a.i) += g * t.val(b).transpose();
        if (t.requires_grad(b)) t.grad_ref(b.i) += t.val(a).transpose() * g;
    });
}

Var concat_cols(Tape& t, const std::vector<Var>& vs) {
    if (vs.empty()) throw UsageError("concat_cols: empty");
    const auto rows = t.val(vs[0]).rows();
    Eigen::Index cols = 0;
    bool rg = false;
    for (Var v : vs) {
        if (t.val(v).rows() != rows) throw UsageError("concat_cols: row mismatch");
        cols += t.val(v).cols();
        rg = rg || t.requires_grad(v);
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (Var v : vs) {
        out.middleCols(at, t.val(v).cols()) = t.val(v);
        at += t.val(v).cols();
    }
    return t.emit(std::move(out), rg, [vs](Tape& t, int self) {
        const Mat& g = t.grad_of(self);
        Eigen::Index at = 0;
        for (Var v : vs) {
            const auto n = t.val(v).cols();
            if (t.requires_grad(v)) t.grad_ref(v.i) += g.middleCols(at, n);
            at += n;
        }
    });
}

Var slice_cols(Tape& t, Var a, int start, int n) {
    if (start < 0 || n < 0 || start + n > t.val(a).cols())
        throw UsageError("slice_cols: out of range");
    return t.emit(t.val(a).middleCols(start, n), t.requires_grad(a),
                  [a, start, n](Tape& t, int self) {
                      t.grad_ref(a.i).middleCols(start, n) += t.grad_of(self);
                  });
}

Var stop_grad(Tape& t, Var a) {
    return t.leaf(t.val(a), false);
}

Var tanh_(Tape& t, Var a) {
    return t.emit(t.val(a).array().tanh(), t.requires_grad(a), [a](Tape& t, int self) {
        const Mat& y = t.val(Var{self});
        t.grad_ref(a.i).array() +=
            t.grad_of(self).array() * (1.0 - y.array().square());
    });
}

Var sigmoid(Tape& t, Var a) {
    Mat y = (0.5 * (t.val(a).array() * 0.5).tanh() + 0.5).matrix();
    return t.emit(std::move(y), t.requires_grad(a), [a](Tape& t, int self) {
        const auto y = t.val(Var{self}).array();
        t.grad_ref(a.i).array() += t.grad_of(self).array() * y * (1.0 - y);
    });
}

Var elu(Tape& t, Var a) {
    Mat y = t.val(a).unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
    return t.emit(std::move(y), t.requires_grad(a), [a](Tape& t, int self) {
        const auto y = t.val(Var{self}).array();
        const auto x = t.val(a).array();
        t.grad_ref(a.i).array() +=
            t.grad_of(self).array() * (x > 0.0).select(Eigen::ArrayXXd::Ones(x.rows(), x.cols()), y + 1.0);
    });
}

Var exp_(Tape& t, Var a) {
    return t.emit(t.val(a).array().exp(), t.requires_grad(a), [a](Tape& t, int self) {
        t.grad_ref(a.i).array() += t.grad_of(self).array() * t.val(Var{self}).array();
    });
}

Var log_(Tape& t, Var a) {
    return t.emit(t.val(a).array().log(), t.requires_grad(a), [a](Tape& t, int self) {
        t.grad_ref(a.i).array() += t.grad_of(self).array() / t.val(a).array();
    });
}

Var square(Tape& t, Var a) {
    return t.emit(t.val(a).array().square(), t.requires_grad(a), [a](Tape& t, int self) {
        t.grad_ref(a.i).array() += 2.0 * t.grad_of(self).array() * t.val(a).array();
    });
}

Var softplus(Tape& t, Var a) {
    // softplus(x) = max(x,0) + log1p(exp(-|x|)), stable for large |x|
    Mat y = t.val(a).unaryExpr([](double x) {
        return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    });
    return t.emit(std::move(y), t.requires_grad(a), [a](Tape& t, int self) {
        const auto x = t.val(a).array();
        t.grad_ref(a.i).array() +=
            t.grad_of(self).array() * (0.5 * (x * 0.5).tanh() + 0.5);
    });
}

Var clamp_min(Tape& t, Var a, double lo) {
    Mat y = t.val(a).cwiseMax(lo);
    return t.emit(std::move(y), t.requires_grad(a), [a, lo](Tape& t, int self) {
        const auto x = t.val(a).array();
        t.grad_ref(a.i).array() +=
            t.grad_of(self).array() * (x > lo).cast<double>();
    });
}

Var sum_all(Tape& t, Var a) {
    Mat y(1, 1);
    y(0, 0) = t.val(a).sum();
    return t.emit(std::move(y), t.requires_grad(a), [a](Tape& t, int self) {
        t.grad_ref(a.i).array() += t.grad_of(self)(0, 0);
    });
}

Var mean_all(Tape& t, Var a) {
    const double n = static_cast<double>(t.val(a).size());
    Mat y(1, 1);
    y(0, 0) = t.val(a).sum() / n;
    return t.emit(std::move(y), t.requires_grad(a), [a, n](Tape& t, int self) {
        t.grad_ref(a.i).array() += t.grad_of(self)(0, 0) / n;
    });
}

Var sum_cols(Tape& t, Var a) {
    Mat y = t.val(a).rowwise().sum();
    return t.emit(std::move(y), t.requires_grad(a), [a](Tape& t, int self) {
        const Mat& g = t.grad_of(self);
        t.grad_ref(a.i).colwise() += g.col(0);
    });
}

Var softmax_groups(Tape& t, Var logits, int groups, int classes) {
    const Mat& x = t.val(logits);
    if (x.cols() != static_cast<Eigen::Index>(groups) * classes)
        throw UsageError("softmax_groups: cols != groups*classes");
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (int g = 0; g < groups; ++g) {
            auto seg = x.row(r).segment(g * classes, classes);
            const double m = seg.maxCoeff();
            Eigen::ArrayXd e = (seg.array() - m).exp();
            y.row(r).segment(g * classes, classes) = (e / e.sum()).matrix();
        }
    }
    return t.emit(std::move(y), t.requires_grad(logits),
                  [logits, groups, classes](Tape& t, int self) {
                      const Mat& p = t.val(Var{self});
                      const Mat& g = t.grad_of(self);
                      Mat& out = t.grad_ref(logits.i);
                      for (Eigen::Index r = 0; r < p.rows(); ++r) {
                          for (int gi = 0; gi < groups; ++gi) {
                              auto ps = p.row(r).segment(gi * classes, classes).array();
                              auto gs = g.row(r).segment(gi * classes, classes).array();
                              const double dot = (ps * gs).sum();
                              out.row(r).segment(gi * classes, classes).array() +=
                                  ps * (gs - dot);
                          }
                      }
                  });
}

Var log_softmax_groups(Tape& t, Var logits, int groups, int classes) {
    const Mat& x = t.val(logits);
    if (x.cols() != static_cast<Eigen::Index>(groups) * classes)
        throw UsageError("log_softmax_groups: cols != groups*classes");
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (int g = 0; g < groups; ++g) {
            auto seg = x.row(r).segment(g * classes, classes);
            const double m = seg.maxCoeff();
            const double lse = m + std::log((seg.array() - m).exp().sum());
            y.row(r).segment(g * classes, classes) = seg.array() - lse;
        }
    }
    return t.emit(std::move(y), t.requires_grad(logits),
                  [logits, groups, classes](Tape& t, int self) {
                      const Mat& ly = t.val(Var{self});
                      const Mat& g = t.grad_of(self);
                      Mat& out = t.grad_ref(logits.i);
                      for (Eigen::Index r = 0; r < ly.rows(); ++r) {
                          for (int gi = 0; gi < groups; ++gi) {
                              auto ls = ly.row(r).segment(gi * classes, classes).array();
                              auto gs = g.row(r).segment(gi * classes, classes).array();
                              const double gsum = gs.sum();
                              out.row(r).segment(gi * classes, classes).array() +=
                                  gs - ls.exp() * gsum;
                          }
                      }
                  });
}

// ---- convolution helpers ----

// col is (cin*k*k x hout*wout) for the "position grid" (hout,wout) over the
// padded (hin,win) image.
static void im2col(const double* img, const ConvGeom& g, int hout, int wout, Mat& col) {
    col.resize(static_cast<Eigen::Index>(g.cin) * g.k * g.k,
               static_cast<Eigen::Index>(hout) * wout);
    for (int c = 0; c < g.cin; ++c) {
        const double* plane = img + static_cast<size_t>(c) * g.hin * g.win;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const Eigen::Index row =
                    (static_cast<Eigen::Index>(c) * g.k + ky) * g.k + kx;
                for (int oy = 0; oy < hout; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int ox = 0; ox < wout; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        double v = 0.0;
                        if (iy >= 0 && iy < g.hin && ix >= 0 && ix < g.win)
                            v = plane[static_cast<size_t>(iy) * g.win + ix];
                        col(row, static_cast<Eigen::Index>(oy) * wout + ox) = v;
                    }
                }
            }
        }
    }
}

static void col2im_add(const Mat& col, const ConvGeom& g, int hout, int wout, double* img) {
    for (int c = 0; c < g.cin; ++c) {
        double* plane = img + static_cast<size_t>(c) * g.hin * g.win;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const Eigen::Index row =
                    (static_cast<Eigen::Index>(c) * g.k + ky) * g.k + kx;
                for (int oy = 0; oy < hout; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.hin) continue;
                    for (int ox = 0; ox < wout; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.win) continue;
                        plane[static_cast<size_t>(iy) * g.win + ix] +=
                            col(row, static_cast<Eigen::Index>(oy) * wout + ox);
                    }
                }
            }
        }
    }
}

Var conv2d(Tape& t, Var x, Var w, Var b, const ConvGeom& g) {
    const Mat& xv = t.val(x);
    const Mat& wv = t.val(w);
    const int ho = g.hout(), wo = g.wout();
    if (xv.cols() != static_cast<Eigen::Index>(g.cin) * g.hin * g.win)
        throw UsageError("conv2d: input shape mismatch");
    if (wv.rows() != g.cout || wv.cols() != static_cast<Eigen::Index>(g.cin) * g.k * g.k)
        throw UsageError("conv2d: weight shape mismatch");
    const Eigen::Index B = xv.rows();
    Mat out(B, static_cast<Eigen::Index>(g.cout) * ho * wo);
    Mat col;
    for (Eigen::Index r = 0; r < B; ++r) {
        Eigen::RowVectorXd xr = xv.row(r);
        im2col(xr.data(), g, ho, wo, col);
        Mat y = wv * col;  // (cout x ho*wo)
        for (int c = 0; c < g.cout; ++c) {
            out.row(r).segment(static_cast<Eigen::Index>(c) * ho * wo, ho * wo) =
                y.row(c).array() + t.val(b)(0, c);
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    return t.emit(std::move(out), rg, [x, w, b, g, ho, wo](Tape& t, int self) {
        const Mat& grad = t.grad_of(self);
        const Mat& xv = t.val(x);
        const Mat& wv = t.val(w);
        const Eigen::Index B = xv.rows();
        Mat col;
        Mat gy(g.cout, static_cast<Eigen::Index>(ho) * wo);
        for (Eigen::Index r = 0; r < B; ++r) {
            for (int c = 0; c < g.cout; ++c)
                gy.row(c) = grad.row(r).segment(static_cast<Eigen::Index>(c) * ho * wo, ho * wo);
            if (t.requires_grad(w) || t.requires_grad(x)) {
                Eigen::RowVectorXd xr = xv.row(r);
                im2col(xr.data(), g, ho, wo, col);
            }
            if (t.requires_grad(w)) t.grad_ref(w.i) += gy * col.transpose();
            if (t.requires_grad(b)) {
                Mat& gb = t.grad_ref(b.i);
                for (int c = 0; c < g.cout; ++c) gb(0, c) += gy.row(c).sum();
            }
            if (t.requires_grad(x)) {
                Mat gcol = wv.transpose() * gy;
                Eigen::RowVectorXd gx = Eigen::RowVectorXd::Zero(xv.cols());
                col2im_add(gcol, g, ho, wo, gx.data());
                t.grad_ref(x.i).row(r) += gx;
            }
        }
    });
}

Var conv2d_transpose(Tape& t, Var x, Var w, Var b, const ConvGeom& g) {
    // g.cin is the input channel count, g.cout the output channel count.
    // The scatter geometry treats the *output* as the big image.
    const Mat& xv = t.val(x);
    const Mat& wv = t.val(w);
    const int ho = g.hout_t(), wo = g.wout_t();
    if (xv.cols() != static_cast<Eigen::Index>(g.cin) * g.hin * g.win)
        throw UsageError("conv2d_transpose: input shape mismatch");
    if (wv.rows() != g.cin || wv.cols() != static_cast<Eigen::Index>(g.cout) * g.k * g.k)
        throw UsageError("conv2d_transpose: weight shape mismatch");
    ConvGeom big;  // geometry of the equivalent forward conv big->small
    big.cin = g.cout;
    big.hin = ho;
    big.win = wo;
    big.cout = g.cin;
    big.k = g.k;
    big.stride = g.stride;
    big.pad = g.pad;
    const Eigen::Index B = xv.rows();
    Mat out(B, static_cast<Eigen::Index>(g.cout) * ho * wo);
    for (Eigen::Index r = 0; r < B; ++r) {
        Mat xmat(g.cin, static_cast<Eigen::Index>(g.hin) * g.win);
        for (int c = 0; c < g.cin; ++c)
            xmat.row(c) = xv.row(r).segment(static_cast<Eigen::Index>(c) * g.hin * g.win,
                                            static_cast<Eigen::Index>(g.hin) * g.win);
        Mat col = wv.transpose() * xmat;  // (cout*k*k x hin*win)
        Eigen::RowVectorXd y = Eigen::RowVectorXd::Zero(out.cols());
        col2im_add(col, big, g.hin, g.win, y.data());
        for (int c = 0; c < g.cout; ++c)
            y.segment(static_cast<Eigen::Index>(c) * ho * wo, ho * wo).array() += t.val(b)(0, c);
        out.row(r) = y;
    }
    bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    return t.emit(std::move(out), rg, [x, w, b, g, big, ho, wo](Tape& t, int self) {
        const Mat& grad = t.grad_of(self);
        const Mat& xv = t.val(x);
        const Mat& wv = t.val(w);
        const Eigen::Index B = xv.rows();
        Mat gcol;
        for (Eigen::Index r = 0; r < B; ++r) {
            Eigen::RowVectorXd gr = grad.row(r);
            im2col(gr.data(), big, g.hin, g.win, gcol);  // (cout*k*k x hin*win)
            if (t.requires_grad(b)) {
                Mat& gb = t.grad_ref(b.i);
                for (int c = 0; c < g.cout; ++c)
                    gb(0, c) += gr.segment(static_cast<Eigen::Index>(c) * ho * wo, ho * wo).sum();
            }
            if (t.requires_grad(w) || t.requires_grad(x)) {
                if (t.requires_grad(w)) {
                    Mat xmat(g.cin, static_cast<Eigen::Index>(g.hin) * g.win);
                    for (int c = 0; c < g.cin; ++c)
                        xmat.row(c) =
                            xv.row(r).segment(static_cast<Eigen::Index>(c) * g.hin * g.win,
                                              static_cast<Eigen::Index>(g.hin) * g.win);
                    t.grad_ref(w.i) += xmat * gcol.transpose();
                }
                if (t.requires_grad(x)) {
                    Mat gx = wv * gcol;  // (cin x hin*win)
                    Mat& dst = t.grad_ref(x.i);
                    for (int c = 0; c < g.cin; ++c)
                        dst.row(r).segment(static_cast<Eigen::Index>(c) * g.hin * g.win,
                                           static_cast<Eigen::Index>(g.hin) * g.win) += gx.row(c);
                }
            }
        }
    });
}

Var gaussian_nll_mean(Tape& t, Var pred, const Mat& target) {
    const Mat& p = t.val(pred);
    check_same_shape(p, target, "gaussian_nll_mean");
    const double B = static_cast<double>(p.rows());
    const double c = 0.5 * std::log(2.0 * M_PI) * static_cast<double>(p.cols());
    Mat y(1, 1);
    y(0, 0) = 0.5 * (p - target).array().square().sum() / B + c;
    return t.emit(std::move(y), t.requires_grad(pred), [pred, target, B](Tape& t, int self) {
        const double g = t.grad_of(self)(0, 0);
        t.grad_ref(pred.i) += (g / B) * (t.val(pred) - target);
    });
}

} // namespace sem2::ad
