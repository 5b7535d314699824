#include "canet/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "canet/error.hpp"

namespace canet::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
    }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

void im2col(const double* x, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* cols) {
    const int plane = out_h * out_w;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    double* dst = row + oy * out_w;
                    if (iy < 0 || iy >= height) {
                        std::fill(dst, dst + out_w, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(c) * height + iy) * width;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < width) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* x) {
    const int plane = out_h * out_w;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= height) continue;
                    double* dst = x + (static_cast<std::size_t>(c) * height + iy) * width;
                    const double* src = row + oy * out_w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Elementwise op whose derivative is a function of (input, output).
template <class Fn, class DFn>
Var pointwise(Graph& g, Var x, Fn fn, DFn dfn) {
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fn(xv[i]);
    return g.record(std::move(out), {x}, [x, dfn](Graph& gr, Var self) {
        const Tensor& xv = gr.value(x);
        const Tensor& yv = gr.value(self);
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * dfn(xv[i], yv[i]);
    });
}

}  // namespace

Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    require_rank(xv, 3, "conv2d input");
    require_rank(wv, 4, "conv2d weight");
    const int in_c = xv.channels(), height = xv.height(), width = xv.width();
    const int out_c = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != in_c || wv.dim(3) != k) {
        throw ShapeError("conv2d: weight " + shape_string(wv.shape()) + " incompatible with input " +
                         shape_string(xv.shape()));
    }
    if (g.value(b).size() != static_cast<std::size_t>(out_c)) throw ShapeError("conv2d: bias size mismatch");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const int out_h = (height + 2 * pad - k) / stride + 1;
    const int out_w = (width + 2 * pad - k) / stride + 1;
    if (out_h < 1 || out_w < 1) throw ShapeError("conv2d: input smaller than kernel");
    const int patch = in_c * k * k;
    const int plane = out_h * out_w;

    // A 1x1 stride-1 convolution reads the input directly as its column matrix.
    const bool direct = (k == 1 && stride == 1 && pad == 0);
    auto cols = std::make_shared<std::vector<double>>();
    if (!direct) {
        cols->resize(static_cast<std::size_t>(patch) * plane);
        im2col(xv.data(), in_c, height, width, k, stride, pad, out_h, out_w, cols->data());
    }
    const double* cols_ptr = direct ? xv.data() : cols->data();

    Tensor out = Tensor::chw(out_c, out_h, out_w);
    MatMap o(out.data(), out_c, plane);
    o.noalias() = ConstMatMap(wv.data(), out_c, patch) * ConstMatMap(cols_ptr, patch, plane);
    const Tensor& bv = g.value(b);
    for (int c = 0; c < out_c; ++c) o.row(c).array() += bv[static_cast<std::size_t>(c)];

    return g.record(std::move(out), {x, w, b},
                    [=](Graph& gr, Var self) {
                        const Tensor& gy = gr.grad(self);
                        ConstMatMap dout(gy.data(), out_c, plane);
                        const double* cp = direct ? gr.value(x).data() : cols->data();
                        if (gr.requires_grad(w)) {
                            MatMap dw(gr.grad(w).data(), out_c, patch);
                            dw.noalias() += dout * ConstMatMap(cp, patch, plane).transpose();
                        }
                        if (gr.requires_grad(b)) {
                            Tensor& db = gr.grad(b);
                            // Plain loop: a vectorized row sum would make the
                            // rounding depend on buffer alignment.
                            for (int c = 0; c < out_c; ++c) {
                                const double* row = gy.data() + static_cast<std::size_t>(c) * plane;
                                double acc = 0.0;
                                for (int i = 0; i < plane; ++i) acc += row[i];
                                db[static_cast<std::size_t>(c)] += acc;
                            }
                        }
                        if (gr.requires_grad(x)) {
                            ConstMatMap wm(gr.value(w).data(), out_c, patch);
                            Tensor& gx = gr.grad(x);
                            if (direct) {
                                MatMap(gx.data(), patch, plane).noalias() += wm.transpose() * dout;
                            } else {
                                std::vector<double> dcols(static_cast<std::size_t>(patch) * plane);
                                MatMap(dcols.data(), patch, plane).noalias() = wm.transpose() * dout;
                                col2im(dcols.data(), in_c, height, width, k, stride, pad, out_h, out_w, gx.data());
                            }
                        }
                    });
}

Var linear(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    require_rank(wv, 2, "linear weight");
    const int out_n = wv.dim(0), in_n = wv.dim(1);
    if (xv.size() != static_cast<std::size_t>(in_n)) {
        throw ShapeError("linear: input " + shape_string(xv.shape()) + " incompatible with weight " +
                         shape_string(wv.shape()));
    }
    if (g.value(b).size() != static_cast<std::size_t>(out_n)) throw ShapeError("linear: bias size mismatch");
    Tensor out({out_n});
    Eigen::Map<Eigen::VectorXd> y(out.data(), out_n);
    y.noalias() = ConstMatMap(wv.data(), out_n, in_n) * Eigen::Map<const Eigen::VectorXd>(xv.data(), in_n);
    y += Eigen::Map<const Eigen::VectorXd>(g.value(b).data(), out_n);
    return g.record(std::move(out), {x, w, b}, [=](Graph& gr, Var self) {
        Eigen::Map<const Eigen::VectorXd> gy(gr.grad(self).data(), out_n);
        if (gr.requires_grad(w)) {
            MatMap(gr.grad(w).data(), out_n, in_n).noalias() +=
                gy * Eigen::Map<const Eigen::VectorXd>(gr.value(x).data(), in_n).transpose();
        }
        if (gr.requires_grad(b)) Eigen::Map<Eigen::VectorXd>(gr.grad(b).data(), out_n) += gy;
        if (gr.requires_grad(x)) {
            Eigen::Map<Eigen::VectorXd>(gr.grad(x).data(), in_n).noalias() +=
                ConstMatMap(gr.value(w).data(), out_n, in_n).transpose() * gy;
        }
    });
}

Var relu(Graph& g, Var x) {
    return pointwise(
        g, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(Graph& g, Var x, double slope) {
    return pointwise(
        g, x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var sigmoid(Graph& g, Var x) {
    return pointwise(
        g, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var logit(Graph& g, Var x) {
    for (double v : g.value(x).values()) {
        if (!(v > 0.0 && v < 1.0)) throw ValidationError("logit input outside (0, 1)");
    }
    return pointwise(
        g, x, [](double v) { return std::log(v / (1.0 - v)); }, [](double v, double) { return 1.0 / (v * (1.0 - v)); });
}

Var clamp(Graph& g, Var x, double lo, double hi) {
    return pointwise(
        g, x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var add(Graph& g, Var a, Var b) {
    require_same(g.value(a), g.value(b), "add");
    Tensor out = g.value(a);
    const Tensor& bv = g.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        for (Var v : {a, b}) {
            if (!gr.requires_grad(v)) continue;
            Tensor& gv = gr.grad(v);
            for (std::size_t i = 0; i < gy.size(); ++i) gv[i] += gy[i];
        }
    });
}

Var sub(Graph& g, Var a, Var b) {
    require_same(g.value(a), g.value(b), "sub");
    Tensor out = g.value(a);
    const Tensor& bv = g.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad(a);
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad(b);
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
        }
    });
}

Var mul(Graph& g, Var a, Var b) {
    require_same(g.value(a), g.value(b), "mul");
    Tensor out = g.value(a);
    const Tensor& bv = g.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad(a);
            const Tensor& bv = gr.value(b);
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad(b);
            const Tensor& av = gr.value(a);
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
        }
    });
}

Var scale(Graph& g, Var x, double s) {
    Tensor out = g.value(x);
    for (auto& v : out.storage()) v *= s;
    return g.record(std::move(out), {x}, [x, s](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
    });
}

Var add_scalar(Graph& g, Var x, double s) {
    Tensor out = g.value(x);
    for (auto& v : out.storage()) v += s;
    return g.record(std::move(out), {x}, [x](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
}

Var concat(Graph& g, const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    std::vector<int> shape = g.value(xs[0]).shape();
    int lead = 0;
    for (Var v : xs) {
        const auto& s = g.value(v).shape();
        if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
            throw ShapeError("concat: incompatible shapes " + shape_string(shape) + " and " + shape_string(s));
        }
        lead += s[0];
    }
    shape[0] = lead;
    Tensor out(shape);
    std::size_t offset = 0;
    for (Var v : xs) {
        const Tensor& t = g.value(v);
        std::copy(t.data(), t.data() + t.size(), out.data() + offset);
        offset += t.size();
    }
    return g.record(std::move(out), xs, [xs](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        std::size_t offset = 0;
        for (Var v : xs) {
            const std::size_t n = gr.value(v).size();
            if (gr.requires_grad(v)) {
                Tensor& gv = gr.grad(v);
                for (std::size_t i = 0; i < n; ++i) gv[i] += gy[offset + i];
            }
            offset += n;
        }
    });
}

Var slice(Graph& g, Var x, int begin, int count) {
    const Tensor& xv = g.value(x);
    if (begin < 0 || count < 1 || begin + count > xv.dim(0)) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside leading axis of " + shape_string(xv.shape()));
    }
    std::vector<int> shape = xv.shape();
    shape[0] = count;
    const std::size_t stride = xv.size() / static_cast<std::size_t>(xv.dim(0));
    const std::size_t offset = stride * static_cast<std::size_t>(begin);
    Tensor out(shape);
    std::copy(xv.data() + offset, xv.data() + offset + out.size(), out.data());
    return g.record(std::move(out), {x}, [x, offset](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[offset + i] += gy[i];
    });
}

Var reshape(Graph& g, Var x, std::vector<int> shape) {
    Tensor out = g.value(x).reshaped(std::move(shape));
    return g.record(std::move(out), {x}, [x](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
}

Var crop(Graph& g, Var x, int top, int left, int h, int w) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 3, "crop");
    if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > xv.height() || left + w > xv.width()) {
        throw ShapeError("crop window outside " + shape_string(xv.shape()));
    }
    Tensor out = Tensor::chw(xv.channels(), h, w);
    for (int c = 0; c < xv.channels(); ++c)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(c, y, xx) = xv.at(c, top + y, left + xx);
    return g.record(std::move(out), {x}, [x, top, left](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int c = 0; c < gy.channels(); ++c)
            for (int y = 0; y < gy.height(); ++y)
                for (int xx = 0; xx < gy.width(); ++xx) gx.at(c, top + y, left + xx) += gy.at(c, y, xx);
    });
}

Var upsample_nearest(Graph& g, Var x, int factor) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 3, "upsample_nearest");
    const int c = xv.channels(), h = xv.height(), w = xv.width();
    Tensor out = Tensor::chw(c, h * factor, w * factor);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h * factor; ++y)
            for (int xx = 0; xx < w * factor; ++xx) out.at(ch, y, xx) = xv.at(ch, y / factor, xx / factor);
    return g.record(std::move(out), {x}, [x, factor](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int ch = 0; ch < gy.channels(); ++ch)
            for (int y = 0; y < gy.height(); ++y)
                for (int xx = 0; xx < gy.width(); ++xx) gx.at(ch, y / factor, xx / factor) += gy.at(ch, y, xx);
    });
}

Var avg_pool(Graph& g, Var x, int factor) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 3, "avg_pool");
    const int c = xv.channels(), h = xv.height() / factor, w = xv.width() / factor;
    if (h < 1 || w < 1) throw ShapeError("avg_pool: input smaller than pooling window");
    const double inv = 1.0 / (factor * factor);
    Tensor out = Tensor::chw(c, h, w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                double s = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) s += xv.at(ch, y * factor + dy, xx * factor + dx);
                out.at(ch, y, xx) = s * inv;
            }
    return g.record(std::move(out), {x}, [x, factor, inv](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int ch = 0; ch < gy.channels(); ++ch)
            for (int y = 0; y < gy.height(); ++y)
                for (int xx = 0; xx < gy.width(); ++xx)
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx)
                            gx.at(ch, y * factor + dy, xx * factor + dx) += gy.at(ch, y, xx) * inv;
    });
}

Var softmax(Graph& g, Var logits) {
    const Tensor& z = g.value(logits);
    Tensor out(z.shape());
    double m = *std::max_element(z.storage().begin(), z.storage().end());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (out[i] = std::exp(z[i] - m));
    for (auto& v : out.storage()) v /= s;
    return g.record(std::move(out), {logits}, [logits](Graph& gr, Var self) {
        const Tensor& p = gr.value(self);
        const Tensor& gy = gr.grad(self);
        double dot = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) dot += gy[i] * p[i];
        Tensor& gz = gr.grad(logits);
        for (std::size_t i = 0; i < p.size(); ++i) gz[i] += p[i] * (gy[i] - dot);
    });
}

Var cross_entropy(Graph& g, Var logits, int target) {
    const Tensor& z = g.value(logits);
    if (target < 0 || static_cast<std::size_t>(target) >= z.size()) throw ShapeError("cross_entropy: bad target");
    const double m = *std::max_element(z.storage().begin(), z.storage().end());
    double s = 0.0;
    for (double v : z.storage()) s += std::exp(v - m);
    const double lse = m + std::log(s);
    return g.record(scalar(lse - z[static_cast<std::size_t>(target)]), {logits},
                    [logits, target, lse](Graph& gr, Var self) {
                        const double gy = gr.grad(self)[0];
                        const Tensor& z = gr.value(logits);
                        Tensor& gz = gr.grad(logits);
                        for (std::size_t i = 0; i < z.size(); ++i) {
                            const double p = std::exp(z[i] - lse);
                            gz[i] += gy * (p - (static_cast<int>(i) == target ? 1.0 : 0.0));
                        }
                    });
}

Var sum(Graph& g, Var x) {
    double s = 0.0;
    for (double v : g.value(x).storage()) s += v;
    return g.record(scalar(s), {x}, [x](Graph& gr, Var self) {
        const double gy = gr.grad(self)[0];
        for (auto& v : gr.grad(x).storage()) v += gy;
    });
}

Var mean(Graph& g, Var x) {
    const double n = static_cast<double>(g.value(x).size());
    return scale(g, sum(g, x), 1.0 / n);
}

Var mean_squared_error(Graph& g, Var a, Var b) {
    require_same(g.value(a), g.value(b), "mean_squared_error");
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    return g.record(scalar(s / n), {a, b}, [a, b, n](Graph& gr, Var self) {
        const double gy = gr.grad(self)[0];
        const Tensor& av = gr.value(a);
        const Tensor& bv = gr.value(b);
        const double k = 2.0 * gy / n;
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad(a);
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad(b);
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
        }
    });
}

Var mean_abs_error(Graph& g, Var a, Var b) {
    require_same(g.value(a), g.value(b), "mean_abs_error");
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    return g.record(scalar(s / n), {a, b}, [a, b, n](Graph& gr, Var self) {
        const double gy = gr.grad(self)[0] / n;
        const Tensor& av = gr.value(a);
        const Tensor& bv = gr.value(b);
        auto sgn = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad(a);
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += gy * sgn(av[i] - bv[i]);
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad(b);
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= gy * sgn(av[i] - bv[i]);
        }
    });
}

Var l2_distance(Graph& g, Var a, Var b) {
    require_same(g.value(a), g.value(b), "l2_distance");
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double norm = std::sqrt(s);
    return g.record(scalar(norm), {a, b}, [a, b, norm](Graph& gr, Var self) {
        // Subgradient 0 at the origin.
        if (norm == 0.0) return;
        const double k = gr.grad(self)[0] / norm;
        const Tensor& av = gr.value(a);
        const Tensor& bv = gr.value(b);
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad(a);
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad(b);
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
        }
    });
}

Var image_gradient(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 3, "image_gradient");
    const int c = xv.channels(), h = xv.height(), w = xv.width();
    Tensor out = Tensor::chw(2 * c, h, w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                if (xx + 1 < w) out.at(ch, y, xx) = xv.at(ch, y, xx + 1) - xv.at(ch, y, xx);
                if (y + 1 < h) out.at(c + ch, y, xx) = xv.at(ch, y + 1, xx) - xv.at(ch, y, xx);
            }
    return g.record(std::move(out), {x}, [x, c, h, w](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    if (xx + 1 < w) {
                        const double d = gy.at(ch, y, xx);
                        gx.at(ch, y, xx + 1) += d;
                        gx.at(ch, y, xx) -= d;
                    }
                    if (y + 1 < h) {
                        const double d = gy.at(c + ch, y, xx);
                        gx.at(ch, y + 1, xx) += d;
                        gx.at(ch, y, xx) -= d;
                    }
                }
    });
}

Var cell_map(Graph& g, Var x, const CellMap& map) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 3, "cell_map");
    const int c = xv.channels();
    const int cells = xv.height() * xv.width();
    if (map.cells != cells || map.row_begin.size() != static_cast<std::size_t>(cells) + 1) {
        throw ShapeError("cell_map: map covers " + std::to_string(map.cells) + " cells, tensor has " +
                         std::to_string(cells));
    }
    auto plan = std::make_shared<const CellMap>(map);
    Tensor out(xv.shape());
    for (int ch = 0; ch < c; ++ch) {
        const double* src = xv.data() + static_cast<std::size_t>(ch) * cells;
        double* dst = out.data() + static_cast<std::size_t>(ch) * cells;
        for (int i = 0; i < cells; ++i) {
            double s = 0.0;
            for (int e = plan->row_begin[i]; e < plan->row_begin[i + 1]; ++e) s += plan->weight[e] * src[plan->source[e]];
            dst[i] = s;
        }
    }
    return g.record(std::move(out), {x}, [x, plan, c, cells](Graph& gr, Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int ch = 0; ch < c; ++ch) {
            const double* src = gy.data() + static_cast<std::size_t>(ch) * cells;
            double* dst = gx.data() + static_cast<std::size_t>(ch) * cells;
            for (int i = 0; i < cells; ++i)
                for (int e = plan->row_begin[i]; e < plan->row_begin[i + 1]; ++e)
                    dst[plan->source[e]] += plan->weight[e] * src[i];
        }
    });
}

}  // namespace canet::nn
