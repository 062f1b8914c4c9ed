#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/graph.hpp"
#include "xfuse/params.hpp"
#include "xfuse/rng.hpp"

namespace xfuse {

struct DenoiserConfig {
    int side = 32;       // square input, two resolutions: side and side/2
    int ch0 = 16;        // channels at full resolution
    int ch1 = 32;        // channels at half resolution
    int context_d = 64;  // width of conditioning rows (= encoder d_model)
    int t_embed = 32;    // sinusoidal timestep embedding width
    int xattn_heads = 2;
    int gn_groups = 8;

    void validate() const {
        if (side < 4 || side % 2 != 0)
            throw std::runtime_error("denoiser config: side must be even and >= 4");
        if (ch0 < 1 || ch1 < 1) throw std::runtime_error("denoiser config: channels");
        if (ch0 % gn_groups != 0 || ch1 % gn_groups != 0)
            throw std::runtime_error("denoiser config: channels not divisible by norm groups");
        if (context_d % xattn_heads != 0)
            throw std::runtime_error("denoiser config: context width not divisible by heads");
        if (t_embed < 2 || t_embed % 2 != 0)
            throw std::runtime_error("denoiser config: t_embed must be even");
    }
};

// Noise-estimating backbone: conv in, residual block + cross-attention at
// full resolution, downsample, the same at half resolution, then upsample
// with a skip connection and project back to 3 channels.  Spatial positions
// attend to every conditioning row; attention output projections start at
// zero so a fresh model ignores its conditioning.
class Denoiser {
  public:
    Denoiser(const DenoiserConfig& cfg, ParamStore& store, RngStream& rng)
        : cfg_(cfg), store_(&store) {
        cfg_.validate();
        const int c0 = cfg_.ch0, c1 = cfg_.ch1, te = cfg_.t_embed;
        in_w_ = &conv("dm.in.w", {c0, 3, 3, 3}, rng);
        in_b_ = &zeros("dm.in.b", {c0});
        rb0_ = make_res("dm.rb0", c0, te, rng);
        xa0_ = make_xattn("dm.xa0", c0, rng);
        down_w_ = &conv("dm.down.w", {c1, c0, 3, 3}, rng);
        down_b_ = &zeros("dm.down.b", {c1});
        rb1_ = make_res("dm.rb1", c1, te, rng);
        xa1_ = make_xattn("dm.xa1", c1, rng);
        mid_ = make_res("dm.mid", c1, te, rng);
        up_w_ = &conv("dm.up.w", {c0, c1, 3, 3}, rng);
        up_b_ = &zeros("dm.up.b", {c0});
        fuse_w_ = &conv("dm.fuse.w", {c0, 2 * c0, 3, 3}, rng);
        fuse_b_ = &zeros("dm.fuse.b", {c0});
        rb2_ = make_res("dm.rb2", c0, te, rng);
        out_gn_g_ = &gains("dm.out.gn.g", c0);
        out_gn_b_ = &zeros("dm.out.gn.b", {c0});
        out_w_ = &store_->add("dm.out.w", GroupKind::other,
                              Tensor::zeros({3, c0, 3, 3}));
        out_b_ = &zeros("dm.out.b", {3});
    }

    const DenoiserConfig& config() const { return cfg_; }

    // eps estimate for z [3,side,side] at continuous time t, conditioned on
    // cond rows [n, context_d].
    int build(Graph& g, int z, double t, int cond) const {
        const Tensor& zv = g.val(z);
        if (zv.rank() != 3 || zv.dim(0) != 3 || zv.dim(1) != cfg_.side ||
            zv.dim(2) != cfg_.side)
            throw std::runtime_error("denoise: input must be [3," +
                                     std::to_string(cfg_.side) + "," +
                                     std::to_string(cfg_.side) + "]");
        const Tensor& cv = g.val(cond);
        if (cv.rank() != 2 || cv.cols() != cfg_.context_d)
            throw std::runtime_error(
                "denoise: conditioning width " + std::to_string(cv.cols()) +
                " does not match context width " + std::to_string(cfg_.context_d));
        if (!(t >= 0.0 && t <= 1.0))
            throw std::runtime_error("denoise: t outside [0,1]");

        const int temb = g.leaf(time_embedding(t));
        int x = g.conv2d(z, P(g, in_w_), P(g, in_b_), 1, 1);
        x = res_block(g, rb0_, x, temb);
        x = xattn_block(g, xa0_, x, cond);
        const int skip = x;
        x = g.conv2d(x, P(g, down_w_), P(g, down_b_), 2, 1);
        x = res_block(g, rb1_, x, temb);
        x = xattn_block(g, xa1_, x, cond);
        x = res_block(g, mid_, x, temb);
        x = g.conv2d(g.upsample2x(x), P(g, up_w_), P(g, up_b_), 1, 1);
        x = g.conv2d(g.concat_ch(x, skip), P(g, fuse_w_), P(g, fuse_b_), 1, 1);
        x = res_block(g, rb2_, x, temb);
        x = g.silu(g.group_norm(x, cfg_.gn_groups, P(g, out_gn_g_), P(g, out_gn_b_)));
        return g.conv2d(x, P(g, out_w_), P(g, out_b_), 1, 1);
    }

    Tensor denoise(const Tensor& z, double t, const Tensor& cond) const {
        Graph g;
        return g.val(build(g, g.leaf(z), t, g.leaf(cond)));
    }

  private:
    struct Res {
        Param *gn1_g, *gn1_b, *c1_w, *c1_b, *tp_w, *tp_b, *gn2_g, *gn2_b, *c2_w, *c2_b;
    };
    struct XAttn {
        Param *ln_g, *q_w, *k_w, *v_w, *o_w;
    };

    Res make_res(const std::string& p, int ch, int te, RngStream& rng) {
        Res r;
        r.gn1_g = &gains(p + ".gn1.g", ch);
        r.gn1_b = &zeros(p + ".gn1.b", {ch});
        r.c1_w = &conv(p + ".c1.w", {ch, ch, 3, 3}, rng);
        r.c1_b = &zeros(p + ".c1.b", {ch});
        r.tp_w = &dense(p + ".tp.w", {te, ch}, rng);
        r.tp_b = &zeros(p + ".tp.b", {ch});
        r.gn2_g = &gains(p + ".gn2.g", ch);
        r.gn2_b = &zeros(p + ".gn2.b", {ch});
        r.c2_w = &conv(p + ".c2.w", {ch, ch, 3, 3}, rng);
        r.c2_b = &zeros(p + ".c2.b", {ch});
        return r;
    }

    XAttn make_xattn(const std::string& p, int ch, RngStream& rng) {
        XAttn a;
        a.ln_g = &store_->add(p + ".ln.g", GroupKind::cross_attention,
                              Tensor::full({ch}, 1.0));
        const double s = 1.0 / std::sqrt(static_cast<double>(ch));
        a.q_w = &randn(p + ".q.w", GroupKind::cross_attention, {ch, cfg_.context_d}, s, rng);
        a.k_w = &randn(p + ".k.w", GroupKind::cross_attention,
                       {cfg_.context_d, cfg_.context_d},
                       1.0 / std::sqrt(static_cast<double>(cfg_.context_d)), rng);
        a.v_w = &randn(p + ".v.w", GroupKind::cross_attention,
                       {cfg_.context_d, cfg_.context_d},
                       1.0 / std::sqrt(static_cast<double>(cfg_.context_d)), rng);
        // zero output projection: conditioning is gated off at initialization
        a.o_w = &store_->add(p + ".o.w", GroupKind::cross_attention,
                             Tensor::zeros({cfg_.context_d, ch}));
        return a;
    }

    int res_block(Graph& g, const Res& r, int x, int temb) const {
        int h = g.silu(g.group_norm(x, cfg_.gn_groups, P(g, r.gn1_g), P(g, r.gn1_b)));
        h = g.conv2d(h, P(g, r.c1_w), P(g, r.c1_b), 1, 1);
        h = g.add_ch_bias(h, g.reshape(g.linear(temb, P(g, r.tp_w), P(g, r.tp_b)),
                                       {g.val(x).dim(0)}));
        h = g.silu(g.group_norm(h, cfg_.gn_groups, P(g, r.gn2_g), P(g, r.gn2_b)));
        h = g.conv2d(h, P(g, r.c2_w), P(g, r.c2_b), 1, 1);
        return g.add(x, h);
    }

    // spatial rows attend (non-causal) to every conditioning row
    int xattn_block(Graph& g, const XAttn& a, int x, int cond) const {
        const int h = g.val(x).dim(1), w = g.val(x).dim(2);
        int rows = g.chw_to_rows(x);  // [hw, ch]
        int nr = g.layer_norm(rows, P(g, a.ln_g), -1);
        const int q = g.linear(nr, P(g, a.q_w));
        const int k = g.linear(cond, P(g, a.k_w));
        const int v = g.linear(cond, P(g, a.v_w));
        const int att = g.attention(q, k, v, cfg_.xattn_heads, /*causal=*/false);
        rows = g.add(rows, g.linear(att, P(g, a.o_w)));
        return g.rows_to_chw(rows, h, w);
    }

    Tensor time_embedding(double t) const {
        const int half = cfg_.t_embed / 2;
        Tensor e({1, cfg_.t_embed});
        for (int k = 0; k < half; ++k) {
            const double freq =
                std::pow(1000.0, static_cast<double>(k) / std::max(1, half - 1));
            e.v[static_cast<size_t>(2 * k)] = std::sin(t * freq);
            e.v[static_cast<size_t>(2 * k + 1)] = std::cos(t * freq);
        }
        return e;
    }

    int P(Graph& g, const Param* p) const {
        return g.param(*const_cast<Param*>(p), store_->trainable(*p));
    }

    Param& conv(const std::string& name, std::vector<int> shape, RngStream& rng) {
        const double fan = static_cast<double>(shape[1]) * shape[2] * shape[3];
        return randn(name, GroupKind::other, std::move(shape), 1.0 / std::sqrt(fan), rng);
    }
    Param& dense(const std::string& name, std::vector<int> shape, RngStream& rng) {
        const double fan = static_cast<double>(shape[0]);
        return randn(name, GroupKind::other, std::move(shape), 1.0 / std::sqrt(fan), rng);
    }
    Param& randn(const std::string& name, GroupKind k, std::vector<int> shape,
                 double stdev, RngStream& rng) {
        Tensor t = Tensor::zeros(shape);
        for (auto& v : t.v) v = stdev * rng.normal();
        return store_->add(name, k, std::move(t));
    }
    Param& zeros(const std::string& name, std::vector<int> shape) {
        return store_->add(name, GroupKind::other, Tensor::zeros(std::move(shape)));
    }
    Param& gains(const std::string& name, int ch) {
        return store_->add(name, GroupKind::other, Tensor::full({ch}, 1.0));
    }

    DenoiserConfig cfg_;
    ParamStore* store_;
    Param *in_w_, *in_b_;
    Res rb0_, rb1_, mid_, rb2_;
    XAttn xa0_, xa1_;
    Param *down_w_, *down_b_, *up_w_, *up_b_, *fuse_w_, *fuse_b_;
    Param *out_gn_g_, *out_gn_b_, *out_w_, *out_b_;
};

}  // namespace xfuse
