#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "xfuse/graph.hpp"
#include "xfuse/optim.hpp"
#include "xfuse/rng.hpp"
#include "xfuse/tensor.hpp"

using xfuse::finite_difference_check;
using xfuse::Graph;
using xfuse::kNegInf;
using xfuse::RngStream;
using xfuse::softmax_vec;
using xfuse::Tensor;

namespace {

using Builder = std::function<int(Graph&, int)>;

// Projects any tensor node to a scalar with fixed random weights so every
// output coordinate influences the loss.
Builder project(const Builder& op, const Tensor& w) {
    return [op, w](Graph& g, int x) {
        int y = op(g, x);
        int wl = g.leaf(w);
        return g.sum_all(g.mul(y, wl));
    };
}

// Runs `trials` finite-difference checks of `make` (which builds op+point
// from a fresh stream) and asserts every one is under the tolerance.
void grad_property(const char* label, int trials,
                   const std::function<std::pair<Builder, Tensor>(RngStream&)>& make) {
    RngStream rng(20240801, label);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        auto [build, point] = make(rng);
        worst = std::max(worst, finite_difference_check(build, point, 1e-5));
    }
    EXPECT_LT(worst, 1e-4) << label;
}

Tensor randt(RngStream& rng, std::vector<int> shape) {
    return Tensor::randn(std::move(shape), rng);
}

}  // namespace

// ---- softmax oracle examples ----

TEST(Softmax, SymmetricPair) {
    auto p = softmax_vec({0.0, 0.0});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, ClosedFormTwoThirds) {
    auto p = softmax_vec({std::log(2.0), 0.0});
    EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-12);
}

TEST(Softmax, LargeLogitStability) {
    auto p = softmax_vec({1000.0, 0.0});
    EXPECT_NEAR(p[0], 1.0, 1e-12);
    EXPECT_NEAR(p[1], 0.0, 1e-12);
    EXPECT_TRUE(std::isfinite(p[0]));
}

TEST(Softmax, MaskedPositionsExactZero) {
    auto p = softmax_vec({1.0, kNegInf, 2.0, kNegInf});
    EXPECT_EQ(p[1], 0.0);
    EXPECT_EQ(p[3], 0.0);
    EXPECT_NEAR(p[0] + p[2], 1.0, 1e-12);
}

TEST(Softmax, AllMaskedRowThrows) {
    try {
        softmax_vec({kNegInf, kNegInf});
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("degenerate attention row"),
                  std::string::npos);
    }
}

TEST(Softmax, RowsSumToOneAndPermutationEquivariant) {
    RngStream rng(7, "sm");
    for (int t = 0; t < 200; ++t) {
        const int n = 2 + rng.bounded(6);
        std::vector<double> v(static_cast<size_t>(n));
        for (auto& x : v) x = rng.uniform(-30.0, 30.0);
        auto p = softmax_vec(v);
        double s = 0.0;
        for (double x : p) s += x;
        ASSERT_NEAR(s, 1.0, 1e-12);
        // rotate-by-one permutation
        std::vector<double> vr(v.begin() + 1, v.end());
        vr.push_back(v[0]);
        auto pr = softmax_vec(vr);
        for (int i = 0; i < n - 1; ++i)
            ASSERT_NEAR(pr[static_cast<size_t>(i)], p[static_cast<size_t>(i + 1)], 1e-12);
        ASSERT_NEAR(pr[static_cast<size_t>(n - 1)], p[0], 1e-12);
    }
}

// ---- backward oracle examples ----

TEST(Backward, SquareAtThree) {
    Graph g;
    int x = g.leaf(Tensor::scalar(3.0), true);
    int y = g.sum_all(g.square(x));
    g.backward(y);
    EXPECT_DOUBLE_EQ(g.grad_buf(x).v[0], 6.0);
}

TEST(Backward, SoftmaxFirstComponentGrad) {
    Graph g;
    int x = g.leaf(Tensor({1, 2}, {0.0, 0.0}), true);
    int p = g.softmax_rows(x);
    int pick = g.leaf(Tensor({1, 2}, {1.0, 0.0}));
    int y = g.sum_all(g.mul(p, pick));
    g.backward(y);
    EXPECT_NEAR(g.grad_buf(x).v[0], 0.25, 1e-12);
    EXPECT_NEAR(g.grad_buf(x).v[1], -0.25, 1e-12);
}

TEST(Backward, NonScalarLossThrows) {
    Graph g;
    int x = g.leaf(Tensor({2}, {1.0, 2.0}), true);
    int y = g.scale(x, 2.0);
    EXPECT_THROW(g.backward(y), std::runtime_error);
}

TEST(Backward, FrozenLeafGetsNoGradient) {
    Graph g;
    int x = g.leaf(Tensor({2}, {1.0, 2.0}), false);
    int w = g.leaf(Tensor({2}, {3.0, 4.0}), true);
    int y = g.sum_all(g.mul(x, w));
    g.backward(y);
    EXPECT_FALSE(g.has_grad(x));
    ASSERT_TRUE(g.has_grad(w));
    EXPECT_DOUBLE_EQ(g.grad_buf(w).v[0], 1.0);
    EXPECT_DOUBLE_EQ(g.grad_buf(w).v[1], 2.0);
}

TEST(Backward, ParamSinkAccumulatesAcrossGraphs) {
    xfuse::ParamStore store;
    xfuse::Param& p = store.add("w", xfuse::GroupKind::base, Tensor({2}, {1.0, 2.0}));
    for (int rep = 0; rep < 2; ++rep) {
        Graph g;
        int w = g.param(p, true);
        int y = g.sum_all(g.square(w));
        g.backward(y);
    }
    EXPECT_DOUBLE_EQ(p.grad.v[0], 4.0);  // 2*1 twice
    EXPECT_DOUBLE_EQ(p.grad.v[1], 8.0);
}

TEST(Backward, NonFiniteLossThrows) {
    Graph g;
    int x = g.leaf(Tensor::scalar(std::numeric_limits<double>::infinity()), true);
    int y = g.sum_all(x);
    EXPECT_THROW(g.backward(y), std::runtime_error);
}

// ---- finite-difference checker contract ----

TEST(Fdiff, SumOfSquaresNearExact) {
    Builder b = [](Graph& g, int x) { return g.sum_all(g.square(x)); };
    RngStream rng(1, "ss");
    double err = finite_difference_check(b, Tensor::randn({5}, rng), 1e-4);
    EXPECT_LT(err, 1e-6);
}

TEST(Fdiff, InjectedFaultDetected) {
    Builder b = [](Graph& g, int x) { return g.sum_all(g.square(g.grad_scale(x, 1.1))); };
    RngStream rng(2, "fault");
    double err = finite_difference_check(b, Tensor::randn({5}, rng), 1e-5);
    EXPECT_GT(err, 0.05);
    EXPECT_LT(err, 0.15);
}

TEST(Fdiff, StepRangeEnforced) {
    Builder b = [](Graph& g, int x) { return g.sum_all(x); };
    EXPECT_THROW(finite_difference_check(b, Tensor::scalar(1.0), 1e-8),
                 std::runtime_error);
    EXPECT_THROW(finite_difference_check(b, Tensor::scalar(1.0), 1e-2),
                 std::runtime_error);
}

TEST(Fdiff, NonFiniteOutputThrows) {
    Builder b = [](Graph& g, int x) {
        int y = g.leaf(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()));
        return g.sum_all(g.mul(x, y));
    };
    EXPECT_THROW(finite_difference_check(b, Tensor::scalar(1.0), 1e-5),
                 std::runtime_error);
}

// ---- per-primitive gradient property tests (>=100 points each family) ----

TEST(GradCheck, Elementwise) {
    grad_property("elementwise", 120, [](RngStream& rng) {
        const int n = 2 + rng.bounded(6);
        Tensor point = randt(rng, {n});
        Tensor w = randt(rng, {n});
        const int pick = rng.bounded(7);
        Builder op = [pick](Graph& g, int x) {
            switch (pick) {
                case 0: return g.square(x);
                case 1: return g.tanh_op(x);
                case 2: return g.gelu(x);
                case 3: return g.silu(x);
                case 4: return g.scale(x, 1.7);
                case 5: return g.addc(x, 0.3);
                default: return g.mul(x, g.scale(x, 0.5));
            }
        };
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, AddSubMulBetweenTensors) {
    grad_property("binary", 120, [](RngStream& rng) {
        const int n = 2 + rng.bounded(5);
        Tensor point = randt(rng, {n});
        Tensor other = randt(rng, {n});
        Tensor w = randt(rng, {n});
        const int pick = rng.bounded(4);
        Builder op = [pick, other](Graph& g, int x) {
            int o = g.leaf(other, true);
            switch (pick) {
                case 0: return g.add(x, o);
                case 1: return g.sub(x, o);
                case 2: return g.sub(o, x);
                default: return g.mul(x, o);
            }
        };
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, MatmulFamily) {
    grad_property("matmul", 120, [](RngStream& rng) {
        const int m = 1 + rng.bounded(4), k = 1 + rng.bounded(4), n = 1 + rng.bounded(4);
        const int which = rng.bounded(5);
        if (which == 0) {  // vary A in A*B
            Tensor b = randt(rng, {k, n});
            Tensor w = randt(rng, {m, n});
            Builder op = [b](Graph& g, int x) { return g.matmul(x, g.leaf(b, true)); };
            return std::make_pair(project(op, w), randt(rng, {m, k}));
        } else if (which == 1) {  // vary B in A*B
            Tensor a = randt(rng, {m, k});
            Tensor w = randt(rng, {m, n});
            Builder op = [a](Graph& g, int x) { return g.matmul(g.leaf(a, true), x); };
            return std::make_pair(project(op, w), randt(rng, {k, n}));
        } else if (which == 2) {  // vary A in A*B^T
            Tensor b = randt(rng, {n, k});
            Tensor w = randt(rng, {m, n});
            Builder op = [b](Graph& g, int x) { return g.matmul_nt(x, g.leaf(b, true)); };
            return std::make_pair(project(op, w), randt(rng, {m, k}));
        } else if (which == 3) {  // vary B in A*B^T
            Tensor a = randt(rng, {m, k});
            Tensor w = randt(rng, {m, n});
            Builder op = [a](Graph& g, int x) { return g.matmul_nt(g.leaf(a, true), x); };
            return std::make_pair(project(op, w), randt(rng, {n, k}));
        }
        // linear with bias, vary each input by sub-case
        Tensor xin = randt(rng, {m, k});
        Tensor wm = randt(rng, {k, n});
        Tensor bias = randt(rng, {n});
        Tensor w = randt(rng, {m, n});
        const int part = rng.bounded(3);
        Builder op = [xin, wm, bias, part](Graph& g, int x) {
            int xi = part == 0 ? x : g.leaf(xin, true);
            int wi = part == 1 ? x : g.leaf(wm, true);
            int bi = part == 2 ? x : g.leaf(bias, true);
            return g.linear(xi, wi, bi);
        };
        Tensor point = part == 0 ? xin : (part == 1 ? wm : bias);
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, BiasBroadcasts) {
    grad_property("bias", 120, [](RngStream& rng) {
        const int which = rng.bounded(4);
        if (which < 2) {
            const int n = 1 + rng.bounded(4), d = 1 + rng.bounded(5);
            Tensor xm = randt(rng, {n, d});
            Tensor bias = randt(rng, {d});
            Tensor w = randt(rng, {n, d});
            Builder op = [xm, bias, which](Graph& g, int x) {
                int xi = which == 0 ? x : g.leaf(xm, true);
                int bi = which == 1 ? x : g.leaf(bias, true);
                return g.add_row_bias(xi, bi);
            };
            return std::make_pair(project(op, w), which == 0 ? xm : bias);
        }
        const int c = 1 + rng.bounded(3), h = 1 + rng.bounded(3), wd = 1 + rng.bounded(3);
        Tensor xm = randt(rng, {c, h, wd});
        Tensor bias = randt(rng, {c});
        Tensor w = randt(rng, {c, h, wd});
        Builder op = [xm, bias, which](Graph& g, int x) {
            int xi = which == 2 ? x : g.leaf(xm, true);
            int bi = which == 3 ? x : g.leaf(bias, true);
            return g.add_ch_bias(xi, bi);
        };
        return std::make_pair(project(op, w), which == 2 ? xm : bias);
    });
}

TEST(GradCheck, Normalizations) {
    grad_property("norm", 120, [](RngStream& rng) {
        const bool group = rng.bounded(2) == 1;
        if (!group) {
            const int n = 1 + rng.bounded(3), d = 2 + rng.bounded(5);
            Tensor xm = randt(rng, {n, d});
            Tensor gamma = randt(rng, {d});
            Tensor beta = randt(rng, {d});
            Tensor w = randt(rng, {n, d});
            const int part = rng.bounded(3);
            Builder op = [xm, gamma, beta, part](Graph& g, int x) {
                int xi = part == 0 ? x : g.leaf(xm, true);
                int gi = part == 1 ? x : g.leaf(gamma, true);
                int bi = part == 2 ? x : g.leaf(beta, true);
                return g.layer_norm(xi, gi, bi);
            };
            Tensor point = part == 0 ? xm : (part == 1 ? gamma : beta);
            return std::make_pair(project(op, w), point);
        }
        const int groups = 1 + rng.bounded(2);
        const int c = groups * (1 + rng.bounded(2));
        const int h = 2, wd = 2;
        Tensor xm = randt(rng, {c, h, wd});
        Tensor gamma = randt(rng, {c});
        Tensor beta = randt(rng, {c});
        Tensor w = randt(rng, {c, h, wd});
        const int part = rng.bounded(3);
        Builder op = [xm, gamma, beta, part, groups](Graph& g, int x) {
            int xi = part == 0 ? x : g.leaf(xm, true);
            int gi = part == 1 ? x : g.leaf(gamma, true);
            int bi = part == 2 ? x : g.leaf(beta, true);
            return g.group_norm(xi, groups, gi, bi);
        };
        Tensor point = part == 0 ? xm : (part == 1 ? gamma : beta);
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, SoftmaxRows) {
    grad_property("softmax", 100, [](RngStream& rng) {
        const int n = 1 + rng.bounded(3), d = 2 + rng.bounded(5);
        Tensor point = randt(rng, {n, d});
        Tensor w = randt(rng, {n, d});
        Builder op = [](Graph& g, int x) { return g.softmax_rows(x); };
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, Attention) {
    grad_property("attention", 120, [](RngStream& rng) {
        const int heads = 1 + rng.bounded(2);
        const int dh = 2 * (1 + rng.bounded(2));
        const int dm = heads * dh;
        const int nq = 1 + rng.bounded(3);
        const bool causal = rng.bounded(2) == 1;
        const int nk = causal ? nq : 1 + rng.bounded(3);
        const bool with_lambda = rng.bounded(2) == 1;
        std::vector<double> loglam;
        if (with_lambda)
            for (int j = 0; j < nk; ++j) loglam.push_back(std::log(rng.uniform(0.2, 3.0)));
        Tensor q = randt(rng, {nq, dm});
        Tensor k = randt(rng, {nk, dm});
        Tensor v = randt(rng, {nk, dm});
        Tensor w = randt(rng, {nq, dm});
        const int part = rng.bounded(3);
        Builder op = [q, k, v, heads, causal, loglam, part](Graph& g, int x) {
            int qi = part == 0 ? x : g.leaf(q, true);
            int ki = part == 1 ? x : g.leaf(k, true);
            int vi = part == 2 ? x : g.leaf(v, true);
            const std::vector<double>* lp = loglam.empty() ? nullptr : &loglam;
            return g.attention(qi, ki, vi, heads, causal, lp);
        };
        Tensor point = part == 0 ? q : (part == 1 ? k : v);
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, Rope) {
    grad_property("rope", 100, [](RngStream& rng) {
        const int heads = 1 + rng.bounded(2);
        const int dh = 2 * (1 + rng.bounded(3));
        const int n = 1 + rng.bounded(5);
        Tensor point = randt(rng, {n, heads * dh});
        Tensor w = randt(rng, {n, heads * dh});
        Builder op = [heads](Graph& g, int x) { return g.rope(x, heads, 10000.0); };
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, Conv2dFamily) {
    grad_property("conv", 100, [](RngStream& rng) {
        const int cin = 1 + rng.bounded(2), cout = 1 + rng.bounded(2);
        const int ksz = 1 + 2 * rng.bounded(2);  // 1 or 3
        const int stride = 1 + rng.bounded(2);
        const int pad = ksz / 2;
        const int h = ksz + rng.bounded(3), wd = ksz + rng.bounded(3);
        Tensor xm = randt(rng, {cin, h, wd});
        Tensor wm = randt(rng, {cout, cin, ksz, ksz});
        Tensor bias = randt(rng, {cout});
        const int ho = (h + 2 * pad - ksz) / stride + 1;
        const int wo = (wd + 2 * pad - ksz) / stride + 1;
        Tensor w = randt(rng, {cout, ho, wo});
        const int part = rng.bounded(3);
        Builder op = [xm, wm, bias, part, stride, pad](Graph& g, int x) {
            int xi = part == 0 ? x : g.leaf(xm, true);
            int wi = part == 1 ? x : g.leaf(wm, true);
            int bi = part == 2 ? x : g.leaf(bias, true);
            return g.conv2d(xi, wi, bi, stride, pad);
        };
        Tensor point = part == 0 ? xm : (part == 1 ? wm : bias);
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, ShapePlumbing) {
    grad_property("plumbing", 120, [](RngStream& rng) {
        const int pick = rng.bounded(6);
        if (pick == 0) {
            const int c = 1 + rng.bounded(2), h = 1 + rng.bounded(3), wd = 1 + rng.bounded(3);
            Tensor point = randt(rng, {c, h, wd});
            Tensor w = randt(rng, {c, 2 * h, 2 * wd});
            Builder op = [](Graph& g, int x) { return g.upsample2x(x); };
            return std::make_pair(project(op, w), point);
        } else if (pick == 1) {
            const int h = 1 + rng.bounded(3), wd = 1 + rng.bounded(3);
            const int ca = 1 + rng.bounded(2), cb = 1 + rng.bounded(2);
            Tensor other = randt(rng, {cb, h, wd});
            Tensor point = randt(rng, {ca, h, wd});
            Tensor w = randt(rng, {ca + cb, h, wd});
            Builder op = [other](Graph& g, int x) {
                return g.concat_ch(x, g.leaf(other, true));
            };
            return std::make_pair(project(op, w), point);
        } else if (pick == 2) {
            const int d = 1 + rng.bounded(4);
            const int n1 = 1 + rng.bounded(3), n2 = 1 + rng.bounded(3);
            Tensor other = randt(rng, {n2, d});
            Tensor point = randt(rng, {n1, d});
            Tensor w = randt(rng, {n1 + n2, d});
            Builder op = [other](Graph& g, int x) {
                return g.concat_rows({x, g.leaf(other, true)});
            };
            return std::make_pair(project(op, w), point);
        } else if (pick == 3) {
            const int n = 3 + rng.bounded(3), d = 1 + rng.bounded(4);
            const int r0 = rng.bounded(n - 1);
            const int r1 = r0 + 1 + rng.bounded(n - r0 - 1);
            Tensor point = randt(rng, {n, d});
            Tensor w = randt(rng, {r1 - r0, d});
            Builder op = [r0, r1](Graph& g, int x) { return g.slice_rows(x, r0, r1); };
            return std::make_pair(project(op, w), point);
        } else if (pick == 4) {
            const int c = 1 + rng.bounded(3), h = 1 + rng.bounded(3), wd = 1 + rng.bounded(3);
            Tensor point = randt(rng, {c, h, wd});
            Tensor w = randt(rng, {h * wd, c});
            Builder op = [](Graph& g, int x) { return g.chw_to_rows(x); };
            return std::make_pair(project(op, w), point);
        }
        const int c = 1 + rng.bounded(3), h = 1 + rng.bounded(3), wd = 1 + rng.bounded(3);
        Tensor point = randt(rng, {h * wd, c});
        Tensor w = randt(rng, {c, h, wd});
        Builder op = [h, wd](Graph& g, int x) { return g.rows_to_chw(x, h, wd); };
        return std::make_pair(project(op, w), point);
    });
}

TEST(GradCheck, EmbedAndLosses) {
    grad_property("losses", 140, [](RngStream& rng) {
        const int pick = rng.bounded(7);
        if (pick == 0) {
            const int vocab = 3 + rng.bounded(4), d = 1 + rng.bounded(4);
            const int n = 1 + rng.bounded(4);
            std::vector<int> ids;
            for (int i = 0; i < n; ++i) ids.push_back(rng.bounded(vocab));
            Tensor point = randt(rng, {vocab, d});
            Tensor w = randt(rng, {n, d});
            Builder op = [ids](Graph& g, int x) { return g.embed(x, ids); };
            return std::make_pair(project(op, w), point);
        } else if (pick == 1) {
            const int n = 2 + rng.bounded(4);
            Tensor point = randt(rng, {n});
            Builder op = [](Graph& g, int x) { return g.mean_all(x); };
            return std::make_pair(op, point);
        } else if (pick == 2) {
            const int n = 2 + rng.bounded(4);
            Tensor other = randt(rng, {n});
            Tensor point = randt(rng, {n});
            const bool vary_first = rng.bounded(2) == 1;
            Builder op = [other, vary_first](Graph& g, int x) {
                int o = g.leaf(other, true);
                return vary_first ? g.mse(x, o) : g.mse(o, x);
            };
            return std::make_pair(op, point);
        } else if (pick == 3) {
            const int n = 1 + rng.bounded(3), vdim = 2 + rng.bounded(4);
            std::vector<int> tg;
            std::vector<double> rw;
            for (int i = 0; i < n; ++i) {
                tg.push_back(rng.bounded(vdim));
                rw.push_back(rng.bounded(4) == 0 ? 0.0 : 1.0);
            }
            bool any = false;
            for (double x : rw) any = any || x > 0.0;
            if (!any) rw[0] = 1.0;
            Tensor point = randt(rng, {n, vdim});
            Builder op = [tg, rw](Graph& g, int x) {
                return g.cross_entropy_mean(x, tg, rw);
            };
            return std::make_pair(op, point);
        } else if (pick == 4) {
            const int n = 4 + rng.bounded(4);
            Tensor other = randt(rng, {n});
            Tensor point = randt(rng, {n});
            Builder op = [other](Graph& g, int x) { return g.dot(x, g.leaf(other, true)); };
            return std::make_pair(op, point);
        } else if (pick == 5) {
            const int n = 6 + rng.bounded(4);
            Tensor other = randt(rng, {n});
            Tensor point = randt(rng, {n});
            const bool vary_first = rng.bounded(2) == 1;
            Builder op = [other, vary_first](Graph& g, int x) {
                int o = g.leaf(other, true);
                return vary_first ? g.cosine(x, o) : g.cosine(o, x);
            };
            return std::make_pair(op, point);
        }
        const int n = 2 + rng.bounded(3);
        Tensor point = randt(rng, {n, 1});
        Tensor w = randt(rng, {n});
        Builder op = [n, w](Graph& g, int x) {
            std::vector<int> parts;
            for (int i = 0; i < n; ++i)
                parts.push_back(g.sum_all(g.square(g.slice_rows(x, i, i + 1))));
            return g.sum_all(g.mul(g.stack_scalars(parts), g.leaf(w, false)));
        };
        return std::make_pair(op, point);
    });
}

TEST(GradCheck, DropoutWithFrozenMask) {
    grad_property("dropout", 100, [](RngStream& rng) {
        const int n = 4 + rng.bounded(6);
        const uint64_t mask_seed = rng.next_u64();
        Tensor point = randt(rng, {n});
        Tensor w = randt(rng, {n});
        Builder op = [mask_seed](Graph& g, int x) {
            RngStream mask_rng(mask_seed, "mask");
            return g.dropout(x, 0.3, mask_rng);
        };
        return std::make_pair(project(op, w), point);
    });
}

// ---- attention algebra (op level) ----

namespace {
// With v = identity and one head, the attention output rows are exactly the
// attention probability rows.
Tensor attn_probs(const Tensor& q, const Tensor& k, const std::vector<double>* loglam,
                  bool causal = false) {
    const int nk = k.rows();
    Graph g;
    Tensor eye = Tensor::zeros({nk, q.cols()});
    for (int i = 0; i < nk && i < q.cols(); ++i) eye.at(i, i) = 1.0;
    int qi = g.leaf(q), ki = g.leaf(k), vi = g.leaf(eye);
    int out = g.attention(qi, ki, vi, 1, causal, loglam);
    return g.val(out);
}
}  // namespace

TEST(Attention, UnitLambdaBitIdentical) {
    RngStream rng(31, "lam1");
    Tensor q = Tensor::randn({5, 4}, rng);
    Tensor k = Tensor::randn({5, 4}, rng);
    Tensor v = Tensor::randn({5, 4}, rng);
    std::vector<double> loglam(5, std::log(1.0));
    Graph g1, g2;
    int o1 = g1.attention(g1.leaf(q), g1.leaf(k), g1.leaf(v), 2, true, nullptr);
    int o2 = g2.attention(g2.leaf(q), g2.leaf(k), g2.leaf(v), 2, true, &loglam);
    const Tensor& a = g1.val(o1);
    const Tensor& b = g2.val(o2);
    for (int64_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.v[i], b.v[i]);
}

TEST(Attention, LambdaMatchesClosedForm) {
    RngStream rng(33, "lamcf");
    Tensor q = Tensor::randn({4, 4}, rng);
    Tensor k = Tensor::randn({4, 4}, rng);
    std::vector<double> lam = {0.5, 2.0, 1.0, 3.0};
    std::vector<double> loglam;
    for (double l : lam) loglam.push_back(std::log(l));
    Tensor p0 = attn_probs(q, k, nullptr);
    Tensor p1 = attn_probs(q, k, &loglam);
    for (int i = 0; i < 4; ++i) {
        double denom = 0.0;
        for (int j = 0; j < 4; ++j) denom += p0.at(i, j) * lam[static_cast<size_t>(j)];
        for (int j = 0; j < 4; ++j)
            ASSERT_NEAR(p1.at(i, j), p0.at(i, j) * lam[static_cast<size_t>(j)] / denom, 1e-12);
    }
}

TEST(Attention, LambdaRescaleInvariance) {
    RngStream rng(35, "scale");
    Tensor q = Tensor::randn({4, 4}, rng);
    Tensor k = Tensor::randn({4, 4}, rng);
    std::vector<double> l1, l2;
    for (int j = 0; j < 4; ++j) {
        double l = rng.uniform(0.3, 3.0);
        l1.push_back(std::log(l));
        l2.push_back(std::log(7.0 * l));
    }
    Tensor p1 = attn_probs(q, k, &l1);
    Tensor p2 = attn_probs(q, k, &l2);
    for (int64_t i = 0; i < p1.numel(); ++i) ASSERT_NEAR(p1.v[i], p2.v[i], 1e-12);
}

TEST(Attention, LambdaMonotonicity) {
    RngStream rng(37, "mono");
    Tensor q = Tensor::randn({4, 4}, rng);
    Tensor k = Tensor::randn({4, 4}, rng);
    std::vector<double> base(4, 0.0);
    for (double up : {1.5, 2.0, 4.0, 9.0}) {
        std::vector<double> boosted = base;
        boosted[2] = std::log(up);
        Tensor p0 = attn_probs(q, k, &base);
        Tensor p1 = attn_probs(q, k, &boosted);
        for (int i = 0; i < 4; ++i) ASSERT_GT(p1.at(i, 2), p0.at(i, 2));
    }
}

TEST(Attention, CausalHidesFuturePositions) {
    RngStream rng(39, "causal");
    Tensor q = Tensor::randn({6, 4}, rng);
    Tensor k = Tensor::randn({6, 4}, rng);
    Tensor v = Tensor::randn({6, 4}, rng);
    Graph g1;
    int o1 = g1.attention(g1.leaf(q), g1.leaf(k), g1.leaf(v), 2, true, nullptr);
    Tensor k2 = k, v2 = v;
    for (int j = 0; j < 4; ++j) {
        k2.at(4, j) += 10.0;
        v2.at(5, j) -= 3.0;
    }
    Graph g2;
    int o2 = g2.attention(g2.leaf(q), g2.leaf(k2), g2.leaf(v2), 2, true, nullptr);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            ASSERT_EQ(g1.val(o1).at(i, j), g2.val(o2).at(i, j));
}

// ---- rotary embedding properties ----

TEST(Rope, PreservesRowNorms) {
    RngStream rng(41, "rope");
    Tensor x = Tensor::randn({7, 8}, rng);
    Graph g;
    int y = g.rope(g.leaf(x), 2, 10000.0);
    for (int i = 0; i < 7; ++i) {
        double n0 = 0.0, n1 = 0.0;
        for (int j = 0; j < 8; ++j) {
            n0 += x.at(i, j) * x.at(i, j);
            n1 += g.val(y).at(i, j) * g.val(y).at(i, j);
        }
        ASSERT_NEAR(n0, n1, 1e-12);
    }
}

TEST(Rope, DotDependsOnlyOnOffset) {
    RngStream rng(43, "ropeoff");
    Tensor a = Tensor::randn({1, 8}, rng);
    Tensor b = Tensor::randn({1, 8}, rng);
    auto dot_at = [&](int pa, int pb) {
        Tensor x = Tensor::zeros({12, 8});
        for (int j = 0; j < 8; ++j) {
            x.at(pa, j) = a.v[static_cast<size_t>(j)];
            x.at(pb, j) = b.v[static_cast<size_t>(j)];
        }
        Graph g;
        int y = g.rope(g.leaf(x), 2, 10000.0);
        double d = 0.0;
        for (int j = 0; j < 8; ++j) d += g.val(y).at(pa, j) * g.val(y).at(pb, j);
        return d;
    };
    EXPECT_NEAR(dot_at(1, 3), dot_at(5, 7), 1e-10);
    EXPECT_NEAR(dot_at(0, 4), dot_at(6, 10), 1e-10);
}

// ---- dropout statistics ----

TEST(Dropout, ZeroRateIsIdentityNode) {
    Graph g;
    RngStream rng(45, "d0");
    int x = g.leaf(Tensor({3}, {1.0, 2.0, 3.0}), true);
    int y = g.dropout(x, 0.0, rng);
    EXPECT_EQ(x, y);
}

TEST(Dropout, DropFrequencyAndScaling) {
    Graph g;
    RngStream rng(47, "dstat");
    const int n = 20000;
    Tensor ones = Tensor::full({n}, 1.0);
    int x = g.leaf(ones, true);
    int y = g.dropout(x, 0.2, rng);
    int zeros = 0;
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double v = g.val(y).v[i];
        if (v == 0.0)
            ++zeros;
        else
            ASSERT_NEAR(v, 1.25, 1e-12);
        sum += v;
    }
    EXPECT_NEAR(static_cast<double>(zeros) / n, 0.2, 0.02);
    EXPECT_NEAR(sum / n, 1.0, 0.03);
}

TEST(Dropout, RateOneRejected) {
    Graph g;
    RngStream rng(49, "d1");
    int x = g.leaf(Tensor({2}, {1.0, 2.0}), true);
    EXPECT_THROW(g.dropout(x, 1.0, rng), std::runtime_error);
}

// ---- misc op contracts ----

TEST(Ops, CosineZeroNormThrows) {
    Graph g;
    int a = g.leaf(Tensor({2}, {0.0, 0.0}), true);
    int b = g.leaf(Tensor({2}, {1.0, 0.0}), true);
    try {
        g.cosine(a, b);
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("zero-norm"), std::string::npos);
    }
}

TEST(Ops, CosineKnownValue) {
    Graph g;
    int a = g.leaf(Tensor({2}, {1.0, 0.0}));
    int b = g.leaf(Tensor({2}, {1.0, 1.0}));
    int c = g.cosine(a, b);
    EXPECT_NEAR(g.val(c).v[0], 1.0 / std::sqrt(2.0), 1e-12);
}

TEST(Ops, CrossEntropyUniformLogits) {
    Graph g;
    int x = g.leaf(Tensor({2, 4}), true);
    int y = g.cross_entropy_mean(x, {0, 3});
    EXPECT_NEAR(g.val(y).v[0], std::log(4.0), 1e-12);
}

TEST(Ops, AttentionDegenerateRowThrows) {
    // a fully-masked row only arises with lambda = 0, which callers must
    // reject; here we force it via -inf bias to pin the error surface
    Graph g;
    RngStream rng(51, "deg");
    Tensor q = Tensor::randn({2, 4}, rng);
    Tensor k = Tensor::randn({2, 4}, rng);
    Tensor v = Tensor::randn({2, 4}, rng);
    std::vector<double> loglam = {kNegInf, kNegInf};
    EXPECT_THROW(
        g.attention(g.leaf(q), g.leaf(k), g.leaf(v), 1, false, &loglam),
        std::runtime_error);
}
