#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xfuse/params.hpp"
#include "xfuse/rng.hpp"
#include "xfuse/tensor.hpp"

namespace xfuse {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Numerically stable softmax over a plain vector; -inf entries are masked
// positions and map to exactly 0.  An all-masked input is a contract error.
inline std::vector<double> softmax_vec(const std::vector<double>& logits) {
    double mx = kNegInf;
    for (double x : logits) mx = std::max(mx, x);
    if (mx == kNegInf) throw std::runtime_error("softmax: degenerate attention row");
    double denom = 0.0;
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = (logits[i] == kNegInf) ? 0.0 : std::exp(logits[i] - mx);
        denom += out[i];
    }
    for (auto& x : out) x /= denom;
    return out;
}

// Reverse-mode tape over dense f64 tensors.  Nodes are appended in forward
// order; backward() replays them in reverse.  Frozen parameters enter as
// leaves with needs_grad=false, so no gradient work happens behind them.
class Graph {
  public:
    struct Node {
        Tensor val;
        Tensor grad;  // allocated lazily
        bool needs_grad = false;
        std::function<void(Graph&)> back;
        Param* sink = nullptr;
    };

    Tensor& val(int id) { return nodes_[static_cast<size_t>(id)].val; }
    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.v.empty(); }

    Tensor& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.v.empty()) n.grad = Tensor::zeros(n.val.shape);
        return n.grad;
    }

    int leaf(Tensor t, bool needs_grad = false) {
        Node n;
        n.val = std::move(t);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Leaf bound to a stored parameter; after backward() the node gradient is
    // flushed into the parameter's persistent grad buffer.
    int param(Param& p, bool trainable) {
        Node n;
        n.val = p.value;
        n.needs_grad = trainable;
        n.sink = trainable ? &p : nullptr;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // ---- elementwise ----

    int add(int a, int b) {
        check_same_shape(val(a), val(b), "add");
        Tensor out = val(a);
        const Tensor& bv = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += bv.v[i];
        return unary_binary(std::move(out), a, b, [a, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(a)) {
                Tensor& ga = g.grad_buf(a);
                for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += go.v[i];
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int64_t i = 0; i < go.numel(); ++i) gb.v[i] += go.v[i];
            }
        });
    }

    int sub(int a, int b) {
        check_same_shape(val(a), val(b), "sub");
        Tensor out = val(a);
        const Tensor& bv = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out.v[i] -= bv.v[i];
        return unary_binary(std::move(out), a, b, [a, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(a)) {
                Tensor& ga = g.grad_buf(a);
                for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += go.v[i];
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int64_t i = 0; i < go.numel(); ++i) gb.v[i] -= go.v[i];
            }
        });
    }

    int mul(int a, int b) {
        check_same_shape(val(a), val(b), "mul");
        Tensor out = val(a);
        const Tensor& bv = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out.v[i] *= bv.v[i];
        return unary_binary(std::move(out), a, b, [a, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(a)) {
                Tensor& ga = g.grad_buf(a);
                const Tensor& bv = g.val(b);
                for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += go.v[i] * bv.v[i];
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                const Tensor& av = g.val(a);
                for (int64_t i = 0; i < go.numel(); ++i) gb.v[i] += go.v[i] * av.v[i];
            }
        });
    }

    int scale(int a, double c) {
        Tensor out = val(a);
        for (auto& x : out.v) x *= c;
        return unary(std::move(out), a, [a, c](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += c * go.v[i];
        });
    }

    int addc(int a, double c) {
        Tensor out = val(a);
        for (auto& x : out.v) x += c;
        return unary(std::move(out), a, [a](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += go.v[i];
        });
    }

    // Identity forward, scaled backward; exists to inject known gradient
    // faults when exercising the finite-difference checker.
    int grad_scale(int a, double c) {
        Tensor out = val(a);
        return unary(std::move(out), a, [a, c](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += c * go.v[i];
        });
    }

    int square(int a) {
        Tensor out = val(a);
        for (auto& x : out.v) x *= x;
        return unary(std::move(out), a, [a](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            const Tensor& av = g.val(a);
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += 2.0 * av.v[i] * go.v[i];
        });
    }

    int tanh_op(int a) {
        Tensor out = val(a);
        for (auto& x : out.v) x = std::tanh(x);
        return unary(std::move(out), a, [a](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            const Tensor& ov = g.val(o);
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < go.numel(); ++i)
                ga.v[i] += (1.0 - ov.v[i] * ov.v[i]) * go.v[i];
        });
    }

    int gelu(int a) {
        static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
        static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
        Tensor out = val(a);
        for (auto& x : out.v) x = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
        return unary(std::move(out), a, [a](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            const Tensor& av = g.val(a);
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < go.numel(); ++i) {
                const double x = av.v[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ga.v[i] += (cdf + x * pdf) * go.v[i];
            }
        });
    }

    int silu(int a) {
        Tensor out = val(a);
        for (auto& x : out.v) x = x / (1.0 + std::exp(-x));
        return unary(std::move(out), a, [a](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            const Tensor& av = g.val(a);
            Tensor& ga = g.grad_buf(a);
            for (int64_t i = 0; i < go.numel(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-av.v[i]));
                ga.v[i] += s * (1.0 + av.v[i] * (1.0 - s)) * go.v[i];
            }
        });
    }

    // ---- matrix ops ----

    int matmul(int a, int b) {
        Tensor out = matmul_val(val(a), val(b));
        return unary_binary(std::move(out), a, b, [a, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(a)) {
                Tensor bt = transpose_val(g.val(b));
                mm_acc(go.data(), bt.data(), g.grad_buf(a).data(), go.rows(), go.cols(),
                       bt.cols());
            }
            if (g.needs(b)) {
                Tensor at = transpose_val(g.val(a));
                mm_acc(at.data(), go.data(), g.grad_buf(b).data(), at.rows(), at.cols(),
                       go.cols());
            }
        });
    }

    // A[n,d] x B[m,d]^T -> [n,m]
    int matmul_nt(int a, int b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (av.cols() != bv.cols())
            throw std::runtime_error("matmul_nt: inner dims differ");
        Tensor bt = transpose_val(bv);
        Tensor out({av.rows(), bv.rows()});
        mm_acc(av.data(), bt.data(), out.data(), av.rows(), av.cols(), bv.rows());
        return unary_binary(std::move(out), a, b, [a, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(a))
                mm_acc(go.data(), g.val(b).data(), g.grad_buf(a).data(), go.rows(),
                       go.cols(), g.val(b).cols());
            if (g.needs(b)) {
                Tensor gt = transpose_val(go);
                mm_acc(gt.data(), g.val(a).data(), g.grad_buf(b).data(), gt.rows(),
                       gt.cols(), g.val(a).cols());
            }
        });
    }

    // y = x[n,in] * W[in,out] (+ b[out])
    int linear(int x, int w, int b = -1) {
        Tensor out = matmul_val(val(x), val(w));
        if (b >= 0) {
            const Tensor& bv = val(b);
            if (bv.numel() != out.cols()) throw std::runtime_error("linear: bias size");
            for (int i = 0; i < out.rows(); ++i)
                for (int j = 0; j < out.cols(); ++j) out.at(i, j) += bv.v[static_cast<size_t>(j)];
        }
        bool ng = needs(x) || needs(w) || (b >= 0 && needs(b));
        return make_op(std::move(out), ng, [x, w, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(x)) {
                Tensor wt = transpose_val(g.val(w));
                mm_acc(go.data(), wt.data(), g.grad_buf(x).data(), go.rows(), go.cols(),
                       wt.cols());
            }
            if (g.needs(w)) {
                Tensor xt = transpose_val(g.val(x));
                mm_acc(xt.data(), go.data(), g.grad_buf(w).data(), xt.rows(), xt.cols(),
                       go.cols());
            }
            if (b >= 0 && g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int i = 0; i < go.rows(); ++i)
                    for (int j = 0; j < go.cols(); ++j) gb.v[static_cast<size_t>(j)] += go.at(i, j);
            }
        });
    }

    // x[n,d] + b[d] broadcast over rows.
    int add_row_bias(int x, int b) {
        Tensor out = val(x);
        const Tensor& bv = val(b);
        if (bv.numel() != out.cols()) throw std::runtime_error("add_row_bias: size");
        for (int i = 0; i < out.rows(); ++i)
            for (int j = 0; j < out.cols(); ++j) out.at(i, j) += bv.v[static_cast<size_t>(j)];
        return unary_binary(std::move(out), x, b, [x, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(x)) {
                Tensor& gx = g.grad_buf(x);
                for (int64_t i = 0; i < go.numel(); ++i) gx.v[i] += go.v[i];
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int i = 0; i < go.rows(); ++i)
                    for (int j = 0; j < go.cols(); ++j) gb.v[static_cast<size_t>(j)] += go.at(i, j);
            }
        });
    }

    // x[C,H,W] + b[C] broadcast over spatial dims.
    int add_ch_bias(int x, int b) {
        Tensor out = val(x);
        const Tensor& bv = val(b);
        if (out.rank() != 3 || bv.numel() != out.dim(0))
            throw std::runtime_error("add_ch_bias: shape");
        const int64_t hw = static_cast<int64_t>(out.dim(1)) * out.dim(2);
        for (int c = 0; c < out.dim(0); ++c)
            for (int64_t i = 0; i < hw; ++i) out.v[c * hw + i] += bv.v[static_cast<size_t>(c)];
        return unary_binary(std::move(out), x, b, [x, b, hw](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            if (g.needs(x)) {
                Tensor& gx = g.grad_buf(x);
                for (int64_t i = 0; i < go.numel(); ++i) gx.v[i] += go.v[i];
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                const int C = g.val(o).dim(0);
                for (int c = 0; c < C; ++c) {
                    double s = 0.0;
                    for (int64_t i = 0; i < hw; ++i) s += go.v[c * hw + i];
                    gb.v[static_cast<size_t>(c)] += s;
                }
            }
        });
    }

    // Row-wise layer norm with learned gain; beta optional (-1 -> none).
    int layer_norm(int x, int gamma, int beta, double eps = 1e-5) {
        const Tensor& xv = val(x);
        const int n = xv.rows(), d = xv.cols();
        if (val(gamma).numel() != d) throw std::runtime_error("layer_norm: gamma size");
        if (beta >= 0 && val(beta).numel() != d)
            throw std::runtime_error("layer_norm: beta size");
        Tensor out({n, d});
        auto xhat = std::make_shared<Tensor>(Tensor::zeros({n, d}));
        auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            double mu = 0.0;
            for (int j = 0; j < d; ++j) mu += xv.at(i, j);
            mu /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                const double c = xv.at(i, j) - mu;
                var += c * c;
            }
            var /= d;
            const double r = 1.0 / std::sqrt(var + eps);
            (*rstd)[static_cast<size_t>(i)] = r;
            for (int j = 0; j < d; ++j) {
                const double xh = (xv.at(i, j) - mu) * r;
                xhat->at(i, j) = xh;
                out.at(i, j) = xh * val(gamma).v[static_cast<size_t>(j)] +
                               (beta >= 0 ? val(beta).v[static_cast<size_t>(j)] : 0.0);
            }
        }
        bool ng = needs(x) || needs(gamma) || (beta >= 0 && needs(beta));
        return make_op(std::move(out), ng, [x, gamma, beta, xhat, rstd, n, d](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            const Tensor& gm = g.val(gamma);
            if (g.needs(gamma)) {
                Tensor& gg = g.grad_buf(gamma);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j)
                        gg.v[static_cast<size_t>(j)] += go.at(i, j) * xhat->at(i, j);
            }
            if (beta >= 0 && g.needs(beta)) {
                Tensor& gb = g.grad_buf(beta);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) gb.v[static_cast<size_t>(j)] += go.at(i, j);
            }
            if (g.needs(x)) {
                Tensor& gx = g.grad_buf(x);
                for (int i = 0; i < n; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = go.at(i, j) * gm.v[static_cast<size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * xhat->at(i, j);
                    }
                    m1 /= d;
                    m2 /= d;
                    const double r = (*rstd)[static_cast<size_t>(i)];
                    for (int j = 0; j < d; ++j) {
                        const double dxh = go.at(i, j) * gm.v[static_cast<size_t>(j)];
                        gx.at(i, j) += (dxh - m1 - xhat->at(i, j) * m2) * r;
                    }
                }
            }
        });
    }

    // Group norm over x[C,H,W] with per-channel affine.
    int group_norm(int x, int groups, int gamma, int beta, double eps = 1e-5) {
        const Tensor& xv = val(x);
        if (xv.rank() != 3) throw std::runtime_error("group_norm: rank");
        const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        if (C % groups != 0) throw std::runtime_error("group_norm: group division");
        const int cg = C / groups;
        const int64_t slab = static_cast<int64_t>(cg) * H * W;
        const int64_t hw = static_cast<int64_t>(H) * W;
        Tensor out(xv.shape);
        auto xhat = std::make_shared<Tensor>(Tensor::zeros(xv.shape));
        auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(groups));
        for (int gi = 0; gi < groups; ++gi) {
            const double* base = xv.data() + gi * slab;
            double mu = 0.0;
            for (int64_t i = 0; i < slab; ++i) mu += base[i];
            mu /= static_cast<double>(slab);
            double var = 0.0;
            for (int64_t i = 0; i < slab; ++i) {
                const double c = base[i] - mu;
                var += c * c;
            }
            var /= static_cast<double>(slab);
            const double r = 1.0 / std::sqrt(var + eps);
            (*rstd)[static_cast<size_t>(gi)] = r;
            for (int64_t i = 0; i < slab; ++i) xhat->v[gi * slab + i] = (base[i] - mu) * r;
        }
        for (int c = 0; c < C; ++c) {
            const double gmv = val(gamma).v[static_cast<size_t>(c)];
            const double btv = val(beta).v[static_cast<size_t>(c)];
            for (int64_t i = 0; i < hw; ++i)
                out.v[c * hw + i] = xhat->v[c * hw + i] * gmv + btv;
        }
        bool ng = needs(x) || needs(gamma) || needs(beta);
        return make_op(std::move(out), ng,
                    [x, gamma, beta, xhat, rstd, groups, C, hw, slab](Graph& g, int o) {
                        const Tensor& go = g.grad_buf(o);
                        if (g.needs(gamma)) {
                            Tensor& gg = g.grad_buf(gamma);
                            for (int c = 0; c < C; ++c) {
                                double s = 0.0;
                                for (int64_t i = 0; i < hw; ++i)
                                    s += go.v[c * hw + i] * xhat->v[c * hw + i];
                                gg.v[static_cast<size_t>(c)] += s;
                            }
                        }
                        if (g.needs(beta)) {
                            Tensor& gb = g.grad_buf(beta);
                            for (int c = 0; c < C; ++c) {
                                double s = 0.0;
                                for (int64_t i = 0; i < hw; ++i) s += go.v[c * hw + i];
                                gb.v[static_cast<size_t>(c)] += s;
                            }
                        }
                        if (g.needs(x)) {
                            Tensor& gx = g.grad_buf(x);
                            const Tensor& gm = g.val(gamma);
                            const int cg = C / groups;
                            for (int gi = 0; gi < groups; ++gi) {
                                double m1 = 0.0, m2 = 0.0;
                                for (int cc = 0; cc < cg; ++cc) {
                                    const int c = gi * cg + cc;
                                    const double gmv = gm.v[static_cast<size_t>(c)];
                                    for (int64_t i = 0; i < hw; ++i) {
                                        const double dxh = go.v[c * hw + i] * gmv;
                                        m1 += dxh;
                                        m2 += dxh * xhat->v[c * hw + i];
                                    }
                                }
                                m1 /= static_cast<double>(slab);
                                m2 /= static_cast<double>(slab);
                                const double r = (*rstd)[static_cast<size_t>(gi)];
                                for (int cc = 0; cc < cg; ++cc) {
                                    const int c = gi * cg + cc;
                                    const double gmv = gm.v[static_cast<size_t>(c)];
                                    for (int64_t i = 0; i < hw; ++i) {
                                        const double dxh = go.v[c * hw + i] * gmv;
                                        gx.v[c * hw + i] +=
                                            (dxh - m1 - xhat->v[c * hw + i] * m2) * r;
                                    }
                                }
                            }
                        }
                    });
    }

    // Row-wise softmax; -inf entries are masked and map to exact zeros.
    int softmax_rows(int x) {
        const Tensor& xv = val(x);
        const int n = xv.rows(), d = xv.cols();
        Tensor out({n, d});
        for (int i = 0; i < n; ++i) {
            std::vector<double> row(static_cast<size_t>(d));
            for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] = xv.at(i, j);
            auto p = softmax_vec(row);
            for (int j = 0; j < d; ++j) out.at(i, j) = p[static_cast<size_t>(j)];
        }
        return unary(std::move(out), x, [x, n, d](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            const Tensor& ov = g.val(o);
            Tensor& gx = g.grad_buf(x);
            for (int i = 0; i < n; ++i) {
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += go.at(i, j) * ov.at(i, j);
                for (int j = 0; j < d; ++j)
                    gx.at(i, j) += ov.at(i, j) * (go.at(i, j) - dot);
            }
        });
    }

    // Fused multi-head scaled-dot attention.
    //   q: [nq, heads*dh], k,v: [nk, heads*dh]
    // Scores get + log_lambda[j] on the key axis before softmax; causal
    // masking uses -inf logits so the bias composes additively with it.
    int attention(int q, int k, int v, int heads, bool causal,
                  const std::vector<double>* log_lambda = nullptr) {
        const Tensor& qv = val(q);
        const Tensor& kv = val(k);
        const Tensor& vv = val(v);
        const int nq = qv.rows(), nk = kv.rows(), dm = qv.cols();
        if (kv.cols() != dm || vv.cols() != dm || vv.rows() != nk)
            throw std::runtime_error("attention: shape mismatch");
        if (dm % heads != 0) throw std::runtime_error("attention: head division");
        if (causal && nq != nk) throw std::runtime_error("attention: causal needs square");
        if (log_lambda && static_cast<int>(log_lambda->size()) != nk)
            throw std::runtime_error("attention: lambda length mismatch");
        const int dh = dm / heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

        auto probs = std::make_shared<std::vector<Tensor>>();
        probs->reserve(static_cast<size_t>(heads));
        Tensor out({nq, dm});
        std::vector<double> lam;
        if (log_lambda) lam = *log_lambda;

        for (int h = 0; h < heads; ++h) {
            Tensor s({nq, nk});
            for (int i = 0; i < nq; ++i) {
                const double* qi = qv.data() + static_cast<size_t>(i) * dm + h * dh;
                for (int j = 0; j < nk; ++j) {
                    if (causal && j > i) {
                        s.at(i, j) = kNegInf;
                        continue;
                    }
                    const double* kj = kv.data() + static_cast<size_t>(j) * dm + h * dh;
                    double dot = 0.0;
                    for (int t = 0; t < dh; ++t) dot += qi[t] * kj[t];
                    double sv = dot * sc;
                    if (!lam.empty()) sv += lam[static_cast<size_t>(j)];
                    s.at(i, j) = sv;
                }
            }
            Tensor p({nq, nk});
            for (int i = 0; i < nq; ++i) {
                std::vector<double> row(static_cast<size_t>(nk));
                for (int j = 0; j < nk; ++j) row[static_cast<size_t>(j)] = s.at(i, j);
                auto pr = softmax_vec(row);
                for (int j = 0; j < nk; ++j) p.at(i, j) = pr[static_cast<size_t>(j)];
            }
            for (int i = 0; i < nq; ++i) {
                double* oi = out.data() + static_cast<size_t>(i) * dm + h * dh;
                for (int j = 0; j < nk; ++j) {
                    const double pij = p.at(i, j);
                    if (pij == 0.0) continue;
                    const double* vj = vv.data() + static_cast<size_t>(j) * dm + h * dh;
                    for (int t = 0; t < dh; ++t) oi[t] += pij * vj[t];
                }
            }
            probs->push_back(std::move(p));
        }

        bool ng = needs(q) || needs(k) || needs(v);
        return make_op(std::move(out), ng,
                    [q, k, v, heads, dh, dm, nq, nk, sc, probs](Graph& g, int o) {
                        const Tensor& go = g.grad_buf(o);
                        const Tensor& qv = g.val(q);
                        const Tensor& kv = g.val(k);
                        const Tensor& vv = g.val(v);
                        for (int h = 0; h < heads; ++h) {
                            const Tensor& p = (*probs)[static_cast<size_t>(h)];
                            // dP = dOh Vh^T ; dV += P^T dOh
                            Tensor dp({nq, nk});
                            for (int i = 0; i < nq; ++i) {
                                const double* goi =
                                    go.data() + static_cast<size_t>(i) * dm + h * dh;
                                for (int j = 0; j < nk; ++j) {
                                    const double* vj =
                                        vv.data() + static_cast<size_t>(j) * dm + h * dh;
                                    double dot = 0.0;
                                    for (int t = 0; t < dh; ++t) dot += goi[t] * vj[t];
                                    dp.at(i, j) = dot;
                                }
                            }
                            if (g.needs(v)) {
                                Tensor& gv = g.grad_buf(v);
                                for (int j = 0; j < nk; ++j) {
                                    double* gvj =
                                        gv.data() + static_cast<size_t>(j) * dm + h * dh;
                                    for (int i = 0; i < nq; ++i) {
                                        const double pij = p.at(i, j);
                                        if (pij == 0.0) continue;
                                        const double* goi =
                                            go.data() + static_cast<size_t>(i) * dm + h * dh;
                                        for (int t = 0; t < dh; ++t) gvj[t] += pij * goi[t];
                                    }
                                }
                            }
                            // dS = P o (dP - rowsum(dP o P))
                            Tensor ds({nq, nk});
                            for (int i = 0; i < nq; ++i) {
                                double dot = 0.0;
                                for (int j = 0; j < nk; ++j) dot += dp.at(i, j) * p.at(i, j);
                                for (int j = 0; j < nk; ++j)
                                    ds.at(i, j) = p.at(i, j) * (dp.at(i, j) - dot);
                            }
                            if (g.needs(q)) {
                                Tensor& gq = g.grad_buf(q);
                                for (int i = 0; i < nq; ++i) {
                                    double* gqi =
                                        gq.data() + static_cast<size_t>(i) * dm + h * dh;
                                    for (int j = 0; j < nk; ++j) {
                                        const double d = ds.at(i, j) * sc;
                                        if (d == 0.0) continue;
                                        const double* kj =
                                            kv.data() + static_cast<size_t>(j) * dm + h * dh;
                                        for (int t = 0; t < dh; ++t) gqi[t] += d * kj[t];
                                    }
                                }
                            }
                            if (g.needs(k)) {
                                Tensor& gk = g.grad_buf(k);
                                for (int j = 0; j < nk; ++j) {
                                    double* gkj =
                                        gk.data() + static_cast<size_t>(j) * dm + h * dh;
                                    for (int i = 0; i < nq; ++i) {
                                        const double d = ds.at(i, j) * sc;
                                        if (d == 0.0) continue;
                                        const double* qi =
                                            qv.data() + static_cast<size_t>(i) * dm + h * dh;
                                        for (int t = 0; t < dh; ++t) gkj[t] += d * qi[t];
                                    }
                                }
                            }
                        }
                    });
    }

    // Rotary position embedding applied per head to paired dims.
    // Row index is the sequence position; pure rotation, norm-preserving.
    int rope(int x, int heads, double base) {
        const Tensor& xv = val(x);
        const int dm = xv.cols();
        if (dm % heads != 0) throw std::runtime_error("rope: head division");
        const int dh = dm / heads;
        if (dh % 2 != 0) throw std::runtime_error("rope: head width must be even");
        Tensor out = xv;
        rope_apply(out, heads, dh, base, +1.0);
        return unary(std::move(out), x, [x, heads, dh, base](Graph& g, int o) {
            Tensor gi = g.grad_buf(o);  // copy; rotate in place by -angle
            rope_apply(gi, heads, dh, base, -1.0);
            Tensor& gx = g.grad_buf(x);
            for (int64_t i = 0; i < gi.numel(); ++i) gx.v[i] += gi.v[i];
        });
    }

    // conv over x[Cin,H,W] with w[Cout,Cin,kh,kw]; im2col + matmul.
    int conv2d(int x, int w, int b, int stride, int pad) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        if (xv.rank() != 3 || wv.rank() != 4) throw std::runtime_error("conv2d: rank");
        const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
        const int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
        if (wv.dim(1) != cin) throw std::runtime_error("conv2d: channel mismatch");
        const int ho = (h + 2 * pad - kh) / stride + 1;
        const int wo = (wd + 2 * pad - kw) / stride + 1;
        const int kdim = cin * kh * kw;
        const int64_t npos = static_cast<int64_t>(ho) * wo;

        auto im = std::make_shared<Tensor>(Tensor::zeros({kdim, static_cast<int>(npos)}));
        im2col(xv, kh, kw, stride, pad, ho, wo, *im);

        Tensor out({cout, ho, wo});
        mm_acc(wv.data(), im->data(), out.data(), cout, kdim, static_cast<int>(npos));
        if (b >= 0) {
            const Tensor& bv = val(b);
            if (bv.numel() != cout) throw std::runtime_error("conv2d: bias size");
            for (int c = 0; c < cout; ++c)
                for (int64_t i = 0; i < npos; ++i) out.v[c * npos + i] += bv.v[static_cast<size_t>(c)];
        }
        bool ng = needs(x) || needs(w) || (b >= 0 && needs(b));
        if (!ng) im.reset();
        return make_op(std::move(out), ng,
                    [x, w, b, im, cin, h, wd, cout, kh, kw, stride, pad, ho, wo, kdim,
                     npos](Graph& g, int o) {
                        const Tensor& go = g.grad_buf(o);
                        if (b >= 0 && g.needs(b)) {
                            Tensor& gb = g.grad_buf(b);
                            for (int c = 0; c < cout; ++c) {
                                double s = 0.0;
                                for (int64_t i = 0; i < npos; ++i) s += go.v[c * npos + i];
                                gb.v[static_cast<size_t>(c)] += s;
                            }
                        }
                        if (g.needs(w)) {
                            // dW[cout,kdim] += dOut[cout,npos] * im^T[npos,kdim]
                            Tensor imt({static_cast<int>(npos), kdim});
                            for (int r = 0; r < kdim; ++r)
                                for (int64_t cidx = 0; cidx < npos; ++cidx)
                                    imt.v[cidx * kdim + r] = im->v[static_cast<size_t>(r) * npos + cidx];
                            mm_acc(go.data(), imt.data(), g.grad_buf(w).data(), cout,
                                   static_cast<int>(npos), kdim);
                        }
                        if (g.needs(x)) {
                            // dIm[kdim,npos] = W^T[kdim,cout] * dOut[cout,npos]
                            const Tensor& wv = g.val(w);
                            Tensor wt({kdim, cout});
                            for (int c = 0; c < cout; ++c)
                                for (int r = 0; r < kdim; ++r)
                                    wt.v[static_cast<size_t>(r) * cout + c] =
                                        wv.v[static_cast<size_t>(c) * kdim + r];
                            Tensor dim_({kdim, static_cast<int>(npos)});
                            mm_acc(wt.data(), go.data(), dim_.data(), kdim, cout,
                                   static_cast<int>(npos));
                            col2im_acc(dim_, cin, h, wd, kh, kw, stride, pad, ho, wo,
                                       g.grad_buf(x));
                        }
                    });
    }

    int upsample2x(int x) {
        const Tensor& xv = val(x);
        if (xv.rank() != 3) throw std::runtime_error("upsample2x: rank");
        const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
        Tensor out({c, 2 * h, 2 * w});
        for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const double vv = xv.v[(static_cast<size_t>(ci) * h + i) * w + j];
                    const size_t base = (static_cast<size_t>(ci) * 2 * h + 2 * i) * 2 * w + 2 * j;
                    out.v[base] = vv;
                    out.v[base + 1] = vv;
                    out.v[base + 2 * w] = vv;
                    out.v[base + 2 * w + 1] = vv;
                }
        return unary(std::move(out), x, [x, c, h, w](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& gx = g.grad_buf(x);
            for (int ci = 0; ci < c; ++ci)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const size_t base =
                            (static_cast<size_t>(ci) * 2 * h + 2 * i) * 2 * w + 2 * j;
                        gx.v[(static_cast<size_t>(ci) * h + i) * w + j] +=
                            go.v[base] + go.v[base + 1] + go.v[base + 2 * w] +
                            go.v[base + 2 * w + 1];
                    }
        });
    }

    int concat_ch(int a, int b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) ||
            av.dim(2) != bv.dim(2))
            throw std::runtime_error("concat_ch: shape");
        Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
        std::copy(av.v.begin(), av.v.end(), out.v.begin());
        std::copy(bv.v.begin(), bv.v.end(), out.v.begin() + av.numel());
        return unary_binary(std::move(out), a, b, [a, b](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            const int64_t na = g.val(a).numel();
            if (g.needs(a)) {
                Tensor& ga = g.grad_buf(a);
                for (int64_t i = 0; i < na; ++i) ga.v[i] += go.v[i];
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int64_t i = 0; i < gb.numel(); ++i) gb.v[i] += go.v[na + i];
            }
        });
    }

    int concat_rows(const std::vector<int>& parts) {
        if (parts.empty()) throw std::runtime_error("concat_rows: empty");
        const int d = val(parts[0]).cols();
        int total = 0;
        bool ng = false;
        for (int p : parts) {
            if (val(p).cols() != d) throw std::runtime_error("concat_rows: width mismatch");
            total += val(p).rows();
            ng = ng || needs(p);
        }
        Tensor out({total, d});
        int64_t off = 0;
        for (int p : parts) {
            const Tensor& pv = val(p);
            std::copy(pv.v.begin(), pv.v.end(), out.v.begin() + off);
            off += pv.numel();
        }
        auto ps = std::make_shared<std::vector<int>>(parts);
        return make_op(std::move(out), ng, [ps](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            int64_t off = 0;
            for (int p : *ps) {
                const int64_t n = g.val(p).numel();
                if (g.needs(p)) {
                    Tensor& gp = g.grad_buf(p);
                    for (int64_t i = 0; i < n; ++i) gp.v[i] += go.v[off + i];
                }
                off += n;
            }
        });
    }

    int slice_rows(int x, int r0, int r1) {
        const Tensor& xv = val(x);
        if (r0 < 0 || r1 > xv.rows() || r0 >= r1)
            throw std::runtime_error("slice_rows: range");
        const int d = xv.cols();
        Tensor out({r1 - r0, d});
        std::copy(xv.v.begin() + static_cast<int64_t>(r0) * d,
                  xv.v.begin() + static_cast<int64_t>(r1) * d, out.v.begin());
        return unary(std::move(out), x, [x, r0, d](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& gx = g.grad_buf(x);
            for (int64_t i = 0; i < go.numel(); ++i)
                gx.v[static_cast<int64_t>(r0) * d + i] += go.v[i];
        });
    }

    // [H*W, C] <- x[C,H,W]; row r = spatial position (row-major), cols = channels.
    int chw_to_rows(int x) {
        const Tensor& xv = val(x);
        if (xv.rank() != 3) throw std::runtime_error("chw_to_rows: rank");
        const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
        const int64_t hw = static_cast<int64_t>(h) * w;
        Tensor out({static_cast<int>(hw), c});
        for (int ci = 0; ci < c; ++ci)
            for (int64_t p = 0; p < hw; ++p) out.v[p * c + ci] = xv.v[ci * hw + p];
        return unary(std::move(out), x, [x, c, hw](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& gx = g.grad_buf(x);
            for (int ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < hw; ++p) gx.v[ci * hw + p] += go.v[p * c + ci];
        });
    }

    // Same data, new shape; backward is a pass-through.
    int reshape(int x, std::vector<int> shape) {
        Tensor out(std::move(shape));
        if (out.numel() != val(x).numel())
            throw std::runtime_error("reshape: element count mismatch");
        out.v = val(x).v;
        return unary(std::move(out), x, [x](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& gx = g.grad_buf(x);
            for (int64_t i = 0; i < go.numel(); ++i) gx.v[i] += go.v[i];
        });
    }

    int rows_to_chw(int x, int h, int w) {
        const Tensor& xv = val(x);
        if (xv.rows() != h * w) throw std::runtime_error("rows_to_chw: rows != h*w");
        const int c = xv.cols();
        const int64_t hw = static_cast<int64_t>(h) * w;
        Tensor out({c, h, w});
        for (int ci = 0; ci < c; ++ci)
            for (int64_t p = 0; p < hw; ++p) out.v[ci * hw + p] = xv.v[p * c + ci];
        return unary(std::move(out), x, [x, c, hw](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& gx = g.grad_buf(x);
            for (int ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < hw; ++p) gx.v[p * c + ci] += go.v[ci * hw + p];
        });
    }

    // Row gather from an embedding table.
    int embed(int table, std::vector<int> ids) {
        const Tensor& tv = val(table);
        const int d = tv.cols();
        Tensor out({static_cast<int>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= tv.rows())
                throw std::runtime_error("embed: id out of range");
            std::copy(tv.v.begin() + static_cast<int64_t>(ids[i]) * d,
                      tv.v.begin() + static_cast<int64_t>(ids[i] + 1) * d,
                      out.v.begin() + static_cast<int64_t>(i) * d);
        }
        auto idp = std::make_shared<std::vector<int>>(std::move(ids));
        return make_op(std::move(out), needs(table), [table, idp, d](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& gt = g.grad_buf(table);
            for (size_t i = 0; i < idp->size(); ++i)
                for (int j = 0; j < d; ++j)
                    gt.v[static_cast<int64_t>((*idp)[i]) * d + j] +=
                        go.v[static_cast<int64_t>(i) * d + j];
        });
    }

    // ---- reductions / losses ----

    int sum_all(int a) {
        double s = 0.0;
        for (double x : val(a).v) s += x;
        return unary(Tensor::scalar(s), a, [a](Graph& g, int o) {
            const double go = g.grad_buf(o).v[0];
            Tensor& ga = g.grad_buf(a);
            for (auto& x : ga.v) x += go;
        });
    }

    int mean_all(int a) {
        const double n = static_cast<double>(val(a).numel());
        double s = 0.0;
        for (double x : val(a).v) s += x;
        return unary(Tensor::scalar(s / n), a, [a, n](Graph& g, int o) {
            const double go = g.grad_buf(o).v[0] / n;
            Tensor& ga = g.grad_buf(a);
            for (auto& x : ga.v) x += go;
        });
    }

    int mse(int a, int b) {
        check_same_shape(val(a), val(b), "mse");
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        const double n = static_cast<double>(av.numel());
        double s = 0.0;
        for (int64_t i = 0; i < av.numel(); ++i) {
            const double d = av.v[i] - bv.v[i];
            s += d * d;
        }
        return unary_binary(Tensor::scalar(s / n), a, b, [a, b, n](Graph& g, int o) {
            const double go = g.grad_buf(o).v[0] * 2.0 / n;
            const Tensor& av = g.val(a);
            const Tensor& bv = g.val(b);
            if (g.needs(a)) {
                Tensor& ga = g.grad_buf(a);
                for (int64_t i = 0; i < av.numel(); ++i)
                    ga.v[i] += go * (av.v[i] - bv.v[i]);
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int64_t i = 0; i < av.numel(); ++i)
                    gb.v[i] -= go * (av.v[i] - bv.v[i]);
            }
        });
    }

    // Mean token cross-entropy over rows with row weights (0 masks a row).
    int cross_entropy_mean(int logits, std::vector<int> targets,
                           std::vector<double> row_weights = {}) {
        const Tensor& lv = val(logits);
        const int n = lv.rows(), vdim = lv.cols();
        if (static_cast<int>(targets.size()) != n)
            throw std::runtime_error("cross_entropy: target count");
        if (row_weights.empty()) row_weights.assign(static_cast<size_t>(n), 1.0);
        double wsum = 0.0;
        for (double w : row_weights) wsum += w;
        if (wsum <= 0.0) throw std::runtime_error("cross_entropy: no active rows");
        double loss = 0.0;
        auto sm = std::make_shared<Tensor>(Tensor::zeros({n, vdim}));
        for (int i = 0; i < n; ++i) {
            double mx = kNegInf;
            for (int j = 0; j < vdim; ++j) mx = std::max(mx, lv.at(i, j));
            double denom = 0.0;
            for (int j = 0; j < vdim; ++j) denom += std::exp(lv.at(i, j) - mx);
            const double lse = mx + std::log(denom);
            for (int j = 0; j < vdim; ++j) sm->at(i, j) = std::exp(lv.at(i, j) - lse);
            loss += row_weights[static_cast<size_t>(i)] *
                    (lse - lv.at(i, targets[static_cast<size_t>(i)]));
        }
        auto tg = std::make_shared<std::vector<int>>(std::move(targets));
        auto rw = std::make_shared<std::vector<double>>(std::move(row_weights));
        return unary(Tensor::scalar(loss / wsum), logits,
                     [logits, sm, tg, rw, wsum, n, vdim](Graph& g, int o) {
                         const double go = g.grad_buf(o).v[0] / wsum;
                         Tensor& gl = g.grad_buf(logits);
                         for (int i = 0; i < n; ++i) {
                             const double w = (*rw)[static_cast<size_t>(i)] * go;
                             if (w == 0.0) continue;
                             for (int j = 0; j < vdim; ++j)
                                 gl.at(i, j) += w * sm->at(i, j);
                             gl.at(i, (*tg)[static_cast<size_t>(i)]) -= w;
                         }
                     });
    }

    int dot(int a, int b) {
        check_same_shape(val(a), val(b), "dot");
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        double s = 0.0;
        for (int64_t i = 0; i < av.numel(); ++i) s += av.v[i] * bv.v[i];
        return unary_binary(Tensor::scalar(s), a, b, [a, b](Graph& g, int o) {
            const double go = g.grad_buf(o).v[0];
            const Tensor& av = g.val(a);
            const Tensor& bv = g.val(b);
            if (g.needs(a)) {
                Tensor& ga = g.grad_buf(a);
                for (int64_t i = 0; i < av.numel(); ++i) ga.v[i] += go * bv.v[i];
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int64_t i = 0; i < av.numel(); ++i) gb.v[i] += go * av.v[i];
            }
        });
    }

    // cos(a, b); errors on (near-)zero norms.
    int cosine(int a, int b) {
        check_same_shape(val(a), val(b), "cosine");
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        double na = 0.0, nb = 0.0, d = 0.0;
        for (int64_t i = 0; i < av.numel(); ++i) {
            na += av.v[i] * av.v[i];
            nb += bv.v[i] * bv.v[i];
            d += av.v[i] * bv.v[i];
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        if (na < 1e-12 || nb < 1e-12)
            throw std::runtime_error("cosine: zero-norm embedding");
        const double c = d / (na * nb);
        return unary_binary(Tensor::scalar(c), a, b, [a, b, na, nb, c](Graph& g, int o) {
            const double go = g.grad_buf(o).v[0];
            const Tensor& av = g.val(a);
            const Tensor& bv = g.val(b);
            if (g.needs(a)) {
                Tensor& ga = g.grad_buf(a);
                for (int64_t i = 0; i < av.numel(); ++i)
                    ga.v[i] += go * (bv.v[i] / (na * nb) - c * av.v[i] / (na * na));
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int64_t i = 0; i < bv.numel(); ++i)
                    gb.v[i] += go * (av.v[i] / (na * nb) - c * bv.v[i] / (nb * nb));
            }
        });
    }

    int stack_scalars(const std::vector<int>& ids) {
        Tensor out({static_cast<int>(ids.size())});
        bool ng = false;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (val(ids[i]).numel() != 1)
                throw std::runtime_error("stack_scalars: non-scalar input");
            out.v[i] = val(ids[i]).v[0];
            ng = ng || needs(ids[i]);
        }
        auto ip = std::make_shared<std::vector<int>>(ids);
        return make_op(std::move(out), ng, [ip](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            for (size_t i = 0; i < ip->size(); ++i)
                if (g.needs((*ip)[i])) g.grad_buf((*ip)[i]).v[0] += go.v[i];
        });
    }

    // Inverted dropout; identity when p == 0.
    int dropout(int x, double p, RngStream& rng) {
        if (p <= 0.0) return x;
        if (p >= 1.0) throw std::runtime_error("dropout: rate must be < 1");
        const Tensor& xv = val(x);
        auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(xv.numel()));
        const double keep = 1.0 / (1.0 - p);
        Tensor out = xv;
        for (int64_t i = 0; i < xv.numel(); ++i) {
            const double m = rng.bernoulli(p) ? 0.0 : keep;
            (*mask)[static_cast<size_t>(i)] = m;
            out.v[i] *= m;
        }
        return unary(std::move(out), x, [x, mask](Graph& g, int o) {
            const Tensor& go = g.grad_buf(o);
            Tensor& gx = g.grad_buf(x);
            for (int64_t i = 0; i < go.numel(); ++i)
                gx.v[i] += go.v[i] * (*mask)[static_cast<size_t>(i)];
        });
    }

    // ---- backward ----

    void backward(int loss) {
        if (val(loss).numel() != 1)
            throw std::runtime_error("backward: loss must be a scalar");
        if (!std::isfinite(val(loss).v[0]))
            throw std::runtime_error("backward: non-finite loss");
        grad_buf(loss).v[0] = 1.0;
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || !n.back || n.grad.v.empty()) continue;
            n.back(*this);
        }
        for (auto& n : nodes_) {
            if (n.sink && !n.grad.v.empty()) {
                for (int64_t i = 0; i < n.grad.numel(); ++i)
                    n.sink->grad.v[i] += n.grad.v[i];
            }
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    static void rope_apply(Tensor& t, int heads, int dh, double base, double sign) {
        const int n = t.rows();
        const int half = dh / 2;
        for (int pos = 0; pos < n; ++pos) {
            for (int h = 0; h < heads; ++h) {
                double* row = t.data() + static_cast<size_t>(pos) * t.cols() + h * dh;
                for (int p = 0; p < half; ++p) {
                    const double theta =
                        std::pow(base, -2.0 * static_cast<double>(p) / dh);
                    const double ang = sign * pos * theta;
                    const double c = std::cos(ang), s = std::sin(ang);
                    const double a = row[2 * p], b2 = row[2 * p + 1];
                    row[2 * p] = a * c - b2 * s;
                    row[2 * p + 1] = a * s + b2 * c;
                }
            }
        }
    }

    static void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho,
                       int wo, Tensor& im) {
        const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
        const int64_t npos = static_cast<int64_t>(ho) * wo;
        for (int c = 0; c < cin; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const int row = (c * kh + ki) * kw + kj;
                    double* dst = im.data() + static_cast<size_t>(row) * npos;
                    for (int oi = 0; oi < ho; ++oi) {
                        const int si = oi * stride + ki - pad;
                        for (int oj = 0; oj < wo; ++oj) {
                            const int sj = oj * stride + kj - pad;
                            dst[static_cast<size_t>(oi) * wo + oj] =
                                (si >= 0 && si < h && sj >= 0 && sj < w)
                                    ? x.v[(static_cast<size_t>(c) * h + si) * w + sj]
                                    : 0.0;
                        }
                    }
                }
    }

    static void col2im_acc(const Tensor& dim_, int cin, int h, int w, int kh, int kw,
                           int stride, int pad, int ho, int wo, Tensor& dx) {
        const int64_t npos = static_cast<int64_t>(ho) * wo;
        for (int c = 0; c < cin; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const int row = (c * kh + ki) * kw + kj;
                    const double* src = dim_.data() + static_cast<size_t>(row) * npos;
                    for (int oi = 0; oi < ho; ++oi) {
                        const int si = oi * stride + ki - pad;
                        if (si < 0 || si >= h) continue;
                        for (int oj = 0; oj < wo; ++oj) {
                            const int sj = oj * stride + kj - pad;
                            if (sj < 0 || sj >= w) continue;
                            dx.v[(static_cast<size_t>(c) * h + si) * w + sj] +=
                                src[static_cast<size_t>(oi) * wo + oj];
                        }
                    }
                }
    }

    int make(Tensor out, bool needs_grad, std::function<void(Graph&)> back) {
        Node n;
        n.val = std::move(out);
        n.needs_grad = needs_grad;
        if (needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // As make(), but for closures taking (Graph&, out_id).
    template <typename F>
    int make_op(Tensor out, bool needs_grad, F&& f) {
        auto wrapped = wrap_out(std::forward<F>(f));
        return make(std::move(out), needs_grad, std::move(wrapped));
    }

    template <typename F>
    int unary(Tensor out, int a, F&& f) {
        const bool ng = needs(a);
        return make(std::move(out), ng, wrap_out(std::forward<F>(f)));
    }

    template <typename F>
    int unary_binary(Tensor out, int a, int b, F&& f) {
        const bool ng = needs(a) || needs(b);
        return make(std::move(out), ng, wrap_out(std::forward<F>(f)));
    }

    // Adapts a closure taking (Graph&, out_id) into the stored form; the out
    // id is simply the node being constructed (next index).
    template <typename F>
    std::function<void(Graph&)> wrap_out(F&& f) {
        const int out_id = static_cast<int>(nodes_.size());
        return [f = std::forward<F>(f), out_id](Graph& g) { f(g, out_id); };
    }

    std::vector<Node> nodes_;
};

}  // namespace xfuse
