#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/denoiser.hpp"
#include "xfuse/encoder.hpp"
#include "xfuse/optim.hpp"
#include "xfuse/prompt.hpp"
#include "xfuse/schedule.hpp"

namespace xfuse {

// Classifier-free guidance: eps_u + s_g (eps_c - eps_u).  Negative prompting
// is the same algebra with the unconditional estimate replaced by one
// conditioned on the negative prompt.
inline Tensor cfg_epsilon(const Tensor& eps_uncond, const Tensor& eps_cond,
                          double s_g) {
    if (!(s_g >= 0.0)) throw std::runtime_error("guidance: scale must be >= 0");
    check_same_shape(eps_uncond, eps_cond, "guidance");
    Tensor out(eps_uncond.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[i] = eps_uncond.v[i] + s_g * (eps_cond.v[i] - eps_uncond.v[i]);
    return out;
}

// Negative prompting: the unconditional estimate is replaced by one
// conditioned on the negative prompt; the guidance algebra is unchanged.
inline Tensor negative_prompt_epsilon(const Tensor& eps_neg, const Tensor& eps_cond,
                                      double s_g) {
    return cfg_epsilon(eps_neg, eps_cond, s_g);
}

struct SamplerConfig {
    int steps = 100;
    double guidance = 7.5;  // s_g, typically in (0, 20]
    uint64_t seed = 1;
    bool deterministic = false;  // ancestral update by default
    ScheduleKind schedule = ScheduleKind::cosine;

    void validate() const {
        if (steps < 1) throw std::runtime_error("sampler: steps must be >= 1");
        if (!(guidance >= 0.0)) throw std::runtime_error("sampler: guidance must be >= 0");
        if (guidance > 20.0)
            throw std::runtime_error("sampler: guidance above the supported range (0, 20]");
    }
};

// Iterative denoising from seeded Gaussian noise.  cond_p conditions the
// positive estimate; cond_base is the estimate it is guided away from (the
// encoded null prompt normally, a negative-prompt encoding otherwise).
// Returns an image in [0,1].
inline Tensor sample(const Denoiser& dn, const Tensor& cond_p, const Tensor& cond_base,
                     const SamplerConfig& cfg) {
    cfg.validate();
    const NoiseSchedule sch = NoiseSchedule::make(cfg.steps, cfg.schedule);
    RngStream rng(cfg.seed, "sample");
    const int side = dn.config().side;
    Tensor z({3, side, side});
    for (auto& x : z.v) x = rng.normal();

    Tensor xhat({3, side, side});
    for (int i = cfg.steps - 1; i >= 0; --i) {
        const double t = sch.t[static_cast<size_t>(i)];
        const double a = sch.alpha[static_cast<size_t>(i)];
        const double o = sch.omega[static_cast<size_t>(i)];
        const Tensor eps_base = dn.denoise(z, t, cond_base);
        const Tensor eps_cond = dn.denoise(z, t, cond_p);
        const Tensor eps = cfg_epsilon(eps_base, eps_cond, cfg.guidance);
        for (int64_t j = 0; j < z.numel(); ++j)
            xhat.v[j] = std::clamp((z.v[j] - o * eps.v[j]) / a, -1.0, 1.0);
        if (i == 0) break;
        const double ap = sch.alpha[static_cast<size_t>(i - 1)];
        const double op = sch.omega[static_cast<size_t>(i - 1)];
        if (cfg.deterministic) {
            for (int64_t j = 0; j < z.numel(); ++j)
                z.v[j] = ap * xhat.v[j] + op * eps.v[j];
        } else {
            // ancestral update: part of the posterior noise is resampled
            const double ratio = (op / std::max(o, 1e-12)) *
                                 std::sqrt(std::max(0.0, 1.0 - (a * a) / (ap * ap)));
            const double sigma = std::min(ratio, op);
            const double dir = std::sqrt(std::max(0.0, op * op - sigma * sigma));
            for (int64_t j = 0; j < z.numel(); ++j)
                z.v[j] = ap * xhat.v[j] + dir * eps.v[j] + sigma * rng.normal();
        }
    }
    Tensor img(xhat.shape);
    for (int64_t j = 0; j < img.numel(); ++j)
        img.v[j] = std::clamp(0.5 * (xhat.v[j] + 1.0), 0.0, 1.0);
    return img;
}

// ---- stage training ----

struct DiffusionItem {
    Tensor image;           // [3,side,side] in [0,1]
    std::string caption_a;  // language-A caption of the same scene
};

struct DiffusionTrainConfig {
    int steps = 500;
    int batch = 4;
    double lr = 2e-3;
    double p_image = 0.2;   // probability of conditioning on the image itself
    double p_uncond = 0.1;  // probability of dropping conditioning entirely
    int T = 100;
    ScheduleKind schedule = ScheduleKind::cosine;
    uint64_t seed = 1;
};

struct DiffusionTrainResult {
    std::vector<double> loss;  // mean batch loss per step
    // Loader instrumentation: modality draw counts (every item draws one
    // modality), plus how many items had conditioning replaced by null.
    int64_t text_cond = 0, image_cond = 0, null_replaced = 0;
};

struct ModalityDraw {
    bool use_image = false;
    bool drop = false;
};

// The per-item conditioning decision used by the training loader: image with
// probability p_image else caption, then null replacement with p_uncond.
inline ModalityDraw draw_modality(RngStream& rng, double p_image, double p_uncond) {
    ModalityDraw d;
    d.use_image = rng.bernoulli(p_image);
    d.drop = rng.bernoulli(p_uncond);
    return d;
}

namespace detail {
inline Tensor to_signed(const Tensor& img01) {
    Tensor out(img01.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] = 2.0 * img01.v[i] - 1.0;
    return out;
}
}  // namespace detail

// One diffusion training phase.  The conditioning encoder runs fully frozen
// in semantic+multimodal mode; `active` names the single trainable group
// (the backbone for unconditional pretraining, cross-attention for
// conditioning finetune).  Each item conditions on exactly one modality:
// its image with probability p_image, else its language-A caption; either
// may be replaced by the null prompt with probability p_uncond.
inline DiffusionTrainResult train_diffusion(
    Denoiser& dn, const Encoder& enc, const Vocabulary& vocab, ParamStore& store,
    const std::vector<DiffusionItem>& data, GroupKind active,
    const DiffusionTrainConfig& cfg) {
    if (data.empty()) throw std::runtime_error("train: empty dataset");
    if (cfg.steps < 0) throw std::runtime_error("train: negative step count");
    if (active != GroupKind::other && active != GroupKind::cross_attention)
        throw std::runtime_error("train: active group must be the denoiser backbone "
                                 "or cross-attention");
    const auto kinds = store.trainable_kinds();
    if (kinds.size() != 1 || kinds[0] != active)
        throw std::runtime_error("train: exactly the active group may be trainable");

    const NoiseSchedule sch = NoiseSchedule::make(cfg.T, cfg.schedule);
    const EncoderMode mode = EncoderMode::semantic_multimodal;
    const Tensor null_cond = enc.encode(Prompt::null_prompt(), mode);
    RngStream rng(cfg.seed, "diffusion-train");
    Adam opt({.lr = cfg.lr}, {active});
    DiffusionTrainResult res;

    for (int step = 0; step < cfg.steps; ++step) {
        Graph g;
        std::vector<int> losses;
        for (int b = 0; b < cfg.batch; ++b) {
            const DiffusionItem& item =
                data[static_cast<size_t>(rng.bounded(static_cast<int>(data.size())))];
            const ModalityDraw md = draw_modality(rng, cfg.p_image, cfg.p_uncond);
            ++(md.use_image ? res.image_cond : res.text_cond);

            Tensor cond;
            if (md.drop) {
                cond = null_cond;
                ++res.null_replaced;
            } else if (md.use_image) {
                Prompt p;
                PromptSegment seg;
                seg.kind = PromptSegment::Kind::image;
                seg.image = item.image;
                p.segments = {seg};
                cond = enc.encode(p, mode);
            } else {
                cond = enc.encode(Prompt::text(item.caption_a, "A", vocab), mode);
            }

            const int ti = rng.bounded(cfg.T);
            Tensor eps(item.image.shape);
            for (auto& x : eps.v) x = rng.normal();
            const Tensor z = q_sample(detail::to_signed(item.image), eps, sch, ti);
            try {
                const int pred =
                    dn.build(g, g.leaf(z), sch.t[static_cast<size_t>(ti)], g.leaf(cond));
                const int loss =
                    g.scale(g.mse(pred, g.leaf(eps)), sch.w[static_cast<size_t>(ti)]);
                if (!std::isfinite(g.val(loss).v[0]))
                    throw std::runtime_error("non-finite loss");
                losses.push_back(loss);
            } catch (const std::runtime_error& e) {
                const std::string what = e.what();
                if (what.find("non-finite") != std::string::npos ||
                    what.find("degenerate") != std::string::npos ||
                    what.find("nan") != std::string::npos)
                    throw std::runtime_error("train: non-finite loss at batch index " +
                                             std::to_string(b) + " (step " +
                                             std::to_string(step) + ": " + what + ")");
                throw;
            }
        }
        const int total = g.mean_all(g.stack_scalars(losses));
        store.zero_grad();
        g.backward(total);
        opt.step(store);
        res.loss.push_back(g.val(total).v[0]);
    }
    return res;
}

}  // namespace xfuse
