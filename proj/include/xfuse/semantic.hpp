#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/encoder.hpp"
#include "xfuse/graph.hpp"
#include "xfuse/hash.hpp"
#include "xfuse/optim.hpp"
#include "xfuse/prompt.hpp"
#include "xfuse/world.hpp"

namespace xfuse {

// Position-weighted pooling: w_i = i / sum_k k over 1-indexed rows, so later
// tokens (which have seen more causal context) weigh more.
inline std::vector<double> pool_weights(int n) {
    if (n < 1) throw std::runtime_error("pool: empty hidden states");
    const double denom = 0.5 * n * (n + 1);
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] = (i + 1) / denom;
    return w;
}

// Pooled sentence embedding as a graph node: [n,d] -> [1,d].
inline int build_pool(Graph& g, int h) {
    const auto w = pool_weights(g.val(h).rows());
    Tensor wt({1, static_cast<int>(w.size())});
    wt.v.assign(w.begin(), w.end());
    return g.matmul(g.leaf(std::move(wt)), h);
}

inline Tensor pool(const Tensor& h) {
    const auto w = pool_weights(h.rows());
    Tensor out({1, h.cols()});
    for (int i = 0; i < h.rows(); ++i)
        for (int j = 0; j < h.cols(); ++j) out.at(0, j) += w[static_cast<size_t>(i)] * h.at(i, j);
    return out;
}

inline double cosine_val(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "cosine");
    double na = 0.0, nb = 0.0, d = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        na += a.v[i] * a.v[i];
        nb += b.v[i] * b.v[i];
        d += a.v[i] * b.v[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < 1e-12 || nb < 1e-12)
        throw std::runtime_error("cosine: zero-norm embedding");
    return d / (na * nb);
}

struct SentenceEmbedding {
    Tensor vec;            // [1, d]
    uint64_t prompt_hash;  // provenance: token ids + encoder mode
    EncoderMode mode;
};

inline SentenceEmbedding embed_sentence(const Encoder& enc, const Prompt& p,
                                        EncoderMode mode) {
    uint64_t h = kFnvOffset;
    for (const auto& seg : p.segments)
        if (seg.kind == PromptSegment::Kind::text)
            h = fnv1a64(seg.ids.data(), seg.ids.size() * sizeof(int), h);
    h = fnv1a64(std::string_view(mode_name(mode)), h);
    return {pool(enc.encode(p, mode)), h, mode};
}

// InfoNCE over cosine scores: -log( e^{cos(a,p)/tau} / (e^{cos(a,p)/tau} +
// sum_n e^{cos(a,n)/tau}) ).  Index 0 of the stacked scores is the positive.
inline int build_contrastive(Graph& g, int anchor, int positive,
                             const std::vector<int>& negatives, double tau) {
    if (!(tau > 0.0))
        throw std::runtime_error("contrastive: temperature must be positive");
    if (negatives.empty())
        throw std::runtime_error("contrastive: at least one negative required");
    std::vector<int> scores;
    scores.push_back(g.scale(g.cosine(anchor, positive), 1.0 / tau));
    for (int n : negatives) scores.push_back(g.scale(g.cosine(anchor, n), 1.0 / tau));
    const int logits = g.reshape(g.stack_scalars(scores),
                                 {1, static_cast<int>(scores.size())});
    return g.cross_entropy_mean(logits, {0});
}

inline double contrastive_loss(const Tensor& anchor, const Tensor& positive,
                               const std::vector<Tensor>& negatives, double tau) {
    Graph g;
    const int a = g.leaf(anchor);
    std::vector<int> negs;
    for (const auto& n : negatives) negs.push_back(g.leaf(n));
    return g.val(build_contrastive(g, a, g.leaf(positive), negs, tau)).v[0];
}

// One tuning example: a premise, a cross-language restatement of the same
// scene, and a same-language caption of a minimally contradicting scene.
struct ContrastiveTriple {
    Prompt anchor, positive, hard_negative;
};

inline ContrastiveTriple make_triple(const world::Scene& scene, RngStream& rng,
                                     const Vocabulary& vocab) {
    const bool a_first = rng.bounded(2) == 0;
    const std::string lx = a_first ? "A" : "B";
    const std::string ly = a_first ? "B" : "A";
    ContrastiveTriple t;
    t.anchor = Prompt::text(world::caption(scene, lx), lx, vocab);
    t.positive = Prompt::text(world::caption(scene, ly), ly, vocab);
    t.hard_negative = Prompt::text(
        world::caption(world::contradict_scene(scene, rng), ly), ly, vocab);
    return t;
}

struct TuneConfig {
    int steps = 2000;
    int batch = 8;
    double tau = 0.05;
    double lr = 1e-3;
    uint64_t seed = 1;
};

struct TuneResult {
    std::vector<double> loss;  // mean batch loss per step
};

// Bias-only contrastive finetuning.  Anchors attract their cross-language
// entailment and repel the labeled contradiction plus in-batch positives of
// other scenes.  Requires exactly the bias group to be trainable.
inline TuneResult tune_biases(Encoder& enc,
                              const std::function<ContrastiveTriple(RngStream&)>& next,
                              const TuneConfig& cfg) {
    if (cfg.steps < 0) throw std::runtime_error("tune_biases: negative step count");
    if (cfg.batch < 2)
        throw std::runtime_error("tune_biases: batch must hold at least 2 triples");
    const auto kinds = enc.store().trainable_kinds();
    if (kinds.size() != 1 || kinds[0] != GroupKind::bias)
        throw std::runtime_error("tune_biases: exactly the bias group must be trainable");

    Adam opt({.lr = cfg.lr}, {GroupKind::bias});
    RngStream rng(cfg.seed, "semantic-tune");
    TuneResult res;
    for (int step = 0; step < cfg.steps; ++step) {
        try {
            Graph g;
            std::vector<int> anchors, positives, hards;
            for (int b = 0; b < cfg.batch; ++b) {
                const ContrastiveTriple t = next(rng);
                anchors.push_back(
                    build_pool(g, enc.build(g, t.anchor, EncoderMode::semantic)));
                positives.push_back(
                    build_pool(g, enc.build(g, t.positive, EncoderMode::semantic)));
                hards.push_back(
                    build_pool(g, enc.build(g, t.hard_negative, EncoderMode::semantic)));
            }
            std::vector<int> losses;
            for (int b = 0; b < cfg.batch; ++b) {
                std::vector<int> negs{hards[static_cast<size_t>(b)]};
                for (int j = 0; j < cfg.batch; ++j)
                    if (j != b) negs.push_back(positives[static_cast<size_t>(j)]);
                losses.push_back(build_contrastive(g, anchors[static_cast<size_t>(b)],
                                                   positives[static_cast<size_t>(b)],
                                                   negs, cfg.tau));
            }
            const int total = g.mean_all(g.stack_scalars(losses));
            const double lv = g.val(total).v[0];
            if (!std::isfinite(lv)) throw std::runtime_error("non-finite loss");
            enc.store().zero_grad();
            g.backward(total);
            opt.step(enc.store());
            res.loss.push_back(lv);
        } catch (const std::runtime_error& e) {
            const std::string what = e.what();
            // numeric breakdowns get the step index; config errors pass through
            if (what.find("diverged") != std::string::npos ||
                what.find("degenerate") != std::string::npos ||
                what.find("non-finite") != std::string::npos ||
                what.find("zero-norm") != std::string::npos)
                throw std::runtime_error("tune_biases: diverged at step " +
                                         std::to_string(step) + " (" + what + ")");
            throw;
        }
    }
    return res;
}

// Mean pooled-embedding cosine between language-A and language-B captions of
// the same scenes; the cross-lingual alignment score.
inline double mean_cross_lingual_cosine(const Encoder& enc, EncoderMode mode,
                                        int scenes, uint64_t seed,
                                        const Vocabulary& vocab) {
    if (scenes < 1) throw std::runtime_error("alignment: need at least one scene");
    RngStream rng(seed, "align-eval");
    double s = 0.0;
    for (int i = 0; i < scenes; ++i) {
        const world::Scene sc = world::gen_scene(rng);
        const Tensor ea =
            pool(enc.encode(Prompt::text(world::caption(sc, "A"), "A", vocab), mode));
        const Tensor eb =
            pool(enc.encode(Prompt::text(world::caption(sc, "B"), "B", vocab), mode));
        s += cosine_val(ea, eb);
    }
    return s / scenes;
}

}  // namespace xfuse
