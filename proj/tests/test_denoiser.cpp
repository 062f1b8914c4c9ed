#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "xfuse/denoiser.hpp"
#include "xfuse/encoder.hpp"
#include "xfuse/vocab.hpp"

using namespace xfuse;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.side = 8;
    c.ch0 = 8;
    c.ch1 = 8;
    c.context_d = 8;
    c.t_embed = 8;
    c.xattn_heads = 2;
    c.gn_groups = 4;
    return c;
}

struct TinyDenoiser {
    ParamStore store;
    RngStream rng{11, "denoiser-test"};
    Denoiser dn{tiny_config(), store, rng};

    Tensor noise_image(uint64_t seed) {
        RngStream r(seed, "z");
        Tensor z({3, 8, 8});
        for (auto& x : z.v) x = r.normal();
        return z;
    }
    Tensor cond_rows(int n, uint64_t seed) {
        RngStream r(seed, "cond");
        Tensor c({n, 8});
        for (auto& x : c.v) x = r.normal();
        return c;
    }
    // move every parameter to a generic point; optionally keep the
    // cross-attention output projections at zero
    void perturb(bool keep_gate_closed) {
        RngStream r(99, "perturb");
        for (GroupKind k : {GroupKind::other, GroupKind::cross_attention})
            for (Param* p : store.group(k)) {
                if (keep_gate_closed && p->name.find(".o.w") != std::string::npos &&
                    p->kind == GroupKind::cross_attention)
                    continue;
                const bool gain = p->name.ends_with(".g");
                for (auto& v : p->value.v)
                    v = gain ? 0.9 + 0.2 * r.uniform() : 0.5 * (r.uniform() - 0.5);
            }
    }
};

TEST(DenoiserConfig, Validation) {
    EXPECT_NO_THROW(tiny_config().validate());
    DenoiserConfig c = tiny_config();
    c.side = 7;
    EXPECT_THROW(c.validate(), std::runtime_error);
    c = tiny_config();
    c.side = 2;
    EXPECT_THROW(c.validate(), std::runtime_error);
    c = tiny_config();
    c.ch0 = 6;  // not divisible by 4 norm groups
    EXPECT_THROW(c.validate(), std::runtime_error);
    c = tiny_config();
    c.context_d = 9;
    EXPECT_THROW(c.validate(), std::runtime_error);
    c = tiny_config();
    c.t_embed = 7;
    EXPECT_THROW(c.validate(), std::runtime_error);
}

TEST(Denoiser, OutputShapeMatchesInput) {
    TinyDenoiser t;
    const Tensor out = t.dn.denoise(t.noise_image(1), 0.5, t.cond_rows(5, 2));
    ASSERT_EQ(out.rank(), 3);
    EXPECT_EQ(out.dim(0), 3);
    EXPECT_EQ(out.dim(1), 8);
    EXPECT_EQ(out.dim(2), 8);
}

TEST(Denoiser, DeterministicGivenInputs) {
    TinyDenoiser t;
    t.perturb(false);
    const Tensor z = t.noise_image(3);
    const Tensor c = t.cond_rows(4, 4);
    const Tensor a = t.dn.denoise(z, 0.37, c);
    const Tensor b = t.dn.denoise(z, 0.37, c);
    ASSERT_EQ(a.v.size(), b.v.size());
    for (size_t i = 0; i < a.v.size(); ++i) EXPECT_EQ(a.v[i], b.v[i]);
}

TEST(Denoiser, ZeroInitOutputAndClosedGate) {
    TinyDenoiser t;
    // final projection starts at zero: a fresh model predicts zero noise
    const Tensor out = t.dn.denoise(t.noise_image(5), 0.9, t.cond_rows(6, 6));
    for (double v : out.v) EXPECT_EQ(v, 0.0);

    // with a live backbone but zero attention output projections, the
    // conditioning rows cannot reach the output
    t.perturb(true);
    const Tensor z = t.noise_image(7);
    const Tensor a = t.dn.denoise(z, 0.4, t.cond_rows(5, 8));
    const Tensor b = t.dn.denoise(z, 0.4, t.cond_rows(5, 9));
    double gap = 0;
    for (size_t i = 0; i < a.v.size(); ++i) gap = std::max(gap, std::abs(a.v[i] - b.v[i]));
    EXPECT_EQ(gap, 0.0);

    // opening the gate makes conditioning matter
    t.perturb(false);
    const Tensor a2 = t.dn.denoise(z, 0.4, t.cond_rows(5, 8));
    const Tensor b2 = t.dn.denoise(z, 0.4, t.cond_rows(5, 9));
    gap = 0;
    for (size_t i = 0; i < a2.v.size(); ++i)
        gap = std::max(gap, std::abs(a2.v[i] - b2.v[i]));
    EXPECT_GT(gap, 1e-8);
}

TEST(Denoiser, TimeAffectsEstimate) {
    TinyDenoiser t;
    t.perturb(false);
    const Tensor z = t.noise_image(10);
    const Tensor c = t.cond_rows(3, 11);
    const Tensor a = t.dn.denoise(z, 0.1, c);
    const Tensor b = t.dn.denoise(z, 0.9, c);
    double gap = 0;
    for (size_t i = 0; i < a.v.size(); ++i) gap = std::max(gap, std::abs(a.v[i] - b.v[i]));
    EXPECT_GT(gap, 1e-8);
}

TEST(Denoiser, Errors) {
    TinyDenoiser t;
    Tensor bad_z({3, 6, 6});
    EXPECT_THROW(t.dn.denoise(bad_z, 0.5, t.cond_rows(4, 1)), std::runtime_error);
    try {
        t.dn.denoise(t.noise_image(1), 0.5, t.cond_rows(4, 1));  // fine
        Tensor wide({4, 16});
        t.dn.denoise(t.noise_image(1), 0.5, wide);
        FAIL() << "expected width mismatch";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("16"), std::string::npos);
        EXPECT_NE(msg.find("8"), std::string::npos);
    }
    EXPECT_THROW(t.dn.denoise(t.noise_image(1), 1.5, t.cond_rows(4, 1)),
                 std::runtime_error);
    EXPECT_THROW(t.dn.denoise(t.noise_image(1), -0.1, t.cond_rows(4, 1)),
                 std::runtime_error);
}

// Attention pools the conditioning rows as a set: reordering the rows of a
// fixed matrix is invisible (up to accumulation order).  Reordering the
// words of a prompt is not, because the encoder bakes positions into c.
TEST(Denoiser, RowPermutationVersusPromptPermutation) {
    TinyDenoiser t;
    t.perturb(false);
    const Tensor z = t.noise_image(12);
    const Tensor c = t.cond_rows(6, 13);
    Tensor cp({6, 8});
    const int perm[6] = {4, 2, 0, 5, 1, 3};
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 8; ++j) cp.at(i, j) = c.at(perm[i], j);
    const Tensor a = t.dn.denoise(z, 0.6, c);
    const Tensor b = t.dn.denoise(z, 0.6, cp);
    for (size_t i = 0; i < a.v.size(); ++i) EXPECT_NEAR(a.v[i], b.v[i], 1e-12);

    // same multiset of words, different order, encoded: rows differ and so
    // does the estimate
    Vocabulary vocab = Vocabulary::standard();
    EncoderConfig ec;
    ec.layers = 1;
    ec.d_model = 8;
    ec.heads = 2;
    ec.vocab_size = vocab.size();
    ec.adapter_factor = 4;
    ec.grid = 2;
    ec.max_len = 16;
    ec.mlp_mult = 2;
    ec.prefix_c1 = 2;
    ec.prefix_c2 = 2;
    ec.prefix_dropout = 0.0;
    ParamStore es;
    RngStream er(21, "enc");
    Encoder enc(ec, es, er);
    const Tensor c1 =
        enc.encode(Prompt::text("red square and blue circle", "A", vocab),
                   EncoderMode::raw);
    const Tensor c2 =
        enc.encode(Prompt::text("blue circle and red square", "A", vocab),
                   EncoderMode::raw);
    const Tensor o1 = t.dn.denoise(z, 0.6, c1);
    const Tensor o2 = t.dn.denoise(z, 0.6, c2);
    double gap = 0;
    for (size_t i = 0; i < o1.v.size(); ++i)
        gap = std::max(gap, std::abs(o1.v[i] - o2.v[i]));
    EXPECT_GT(gap, 1e-8);
}

TEST(Denoiser, ParameterGroups) {
    TinyDenoiser t;
    const auto xa = t.store.group(GroupKind::cross_attention);
    EXPECT_EQ(xa.size(), 10u);  // two blocks, five tensors each
    for (const Param* p : xa) {
        EXPECT_EQ(p->name.rfind("dm.xa", 0), 0u) << p->name;
        if (p->name.find(".o.w") != std::string::npos) {
            for (double v : p->value.v) EXPECT_EQ(v, 0.0);
        }
    }
    bool saw_out = false;
    for (const Param* p : t.store.group(GroupKind::other)) {
        EXPECT_EQ(p->name.rfind("dm.", 0), 0u) << p->name;
        if (p->name == "dm.out.w") {
            saw_out = true;
            for (double v : p->value.v) EXPECT_EQ(v, 0.0);
        }
    }
    EXPECT_TRUE(saw_out);
}

// Central-difference check of the whole backbone + cross-attention at a
// generic parameter point.
TEST(Denoiser, FiniteDifferenceGradients) {
    TinyDenoiser t;
    t.perturb(false);
    t.store.set_trainable({GroupKind::other, GroupKind::cross_attention});
    const Tensor z = t.noise_image(30);
    const Tensor c = t.cond_rows(4, 31);

    auto loss_at = [&]() {
        Graph g;
        return g.val(g.mean_all(g.square(t.dn.build(g, g.leaf(z), 0.45, g.leaf(c)))))
            .v[0];
    };
    Graph g;
    const int loss = g.mean_all(g.square(t.dn.build(g, g.leaf(z), 0.45, g.leaf(c))));
    t.store.zero_grad();
    g.backward(loss);

    RngStream pick(41, "pick");
    const double step = 1e-4;
    double worst = 0;
    for (GroupKind k : {GroupKind::other, GroupKind::cross_attention})
        for (Param* p : t.store.group(k)) {
            for (int trial = 0; trial < 2; ++trial) {
                const int64_t i = pick.bounded(static_cast<int>(p->value.numel()));
                const double keep = p->value.v[static_cast<size_t>(i)];
                p->value.v[static_cast<size_t>(i)] = keep + step;
                const double up = loss_at();
                p->value.v[static_cast<size_t>(i)] = keep - step;
                const double dn_ = loss_at();
                p->value.v[static_cast<size_t>(i)] = keep;
                const double num = (up - dn_) / (2 * step);
                const double ana = p->grad.v[static_cast<size_t>(i)];
                const double rel = std::abs(ana - num) / (std::abs(ana) + 1e-8);
                worst = std::max(worst, rel);
                EXPECT_LT(rel, 1e-4) << p->name << "[" << i << "]";
            }
        }
    RecordProperty("worst_rel_err", std::to_string(worst));
}

}  // namespace
