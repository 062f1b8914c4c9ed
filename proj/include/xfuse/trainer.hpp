#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/encoder.hpp"
#include "xfuse/graph.hpp"
#include "xfuse/optim.hpp"
#include "xfuse/prompt.hpp"
#include "xfuse/rng.hpp"

namespace xfuse {

// ---- language-model pretraining (base group) ----

struct LmItem {
    std::vector<int> ids;  // without begin-of-sequence
    std::string lang;
};

inline LmItem lm_item(const std::string& text, const std::string& lang,
                      const Vocabulary& vocab) {
    return {vocab.tokenize(text, lang), lang};
}

struct LmTrainConfig {
    int steps = 1500;
    int batch = 16;
    double lr = 3e-4;
    uint64_t seed = 1;
};

struct LmTrainResult {
    std::vector<double> loss;  // mean batch loss per step
};

// Next-token cross-entropy for one sequence: rows of [bos, ids...] predict
// ids shifted by one.  Returns the graph node holding the mean loss.
inline int build_lm_loss(Graph& g, const Encoder& enc, const LmItem& item,
                         EncoderMode mode) {
    if (item.ids.empty()) throw std::runtime_error("lm: empty item");
    std::vector<int> in{Vocabulary::kBos};
    in.insert(in.end(), item.ids.begin(), item.ids.end());
    const int h = enc.build(g, Prompt::from_ids(in, item.lang), mode);
    const int ctx = g.slice_rows(h, 0, static_cast<int>(item.ids.size()));
    return g.cross_entropy_mean(enc.build_logits(g, ctx), item.ids);
}

// Autoregressive pretraining of the transformer base on captions from both
// grammars.  Requires exactly the base group to be trainable.
inline LmTrainResult train_lm(Encoder& enc, const std::vector<LmItem>& data,
                              const LmTrainConfig& cfg) {
    if (data.empty()) throw std::runtime_error("train: empty dataset");
    if (cfg.steps < 0) throw std::runtime_error("train: negative step count");
    if (cfg.batch < 1) throw std::runtime_error("train: batch must be >= 1");
    const auto kinds = enc.store().trainable_kinds();
    if (kinds.size() != 1 || kinds[0] != GroupKind::base)
        throw std::runtime_error("train: exactly the base group may be trainable");

    RngStream rng(cfg.seed, "lm-train");
    Adam opt({.lr = cfg.lr}, {GroupKind::base});
    LmTrainResult res;
    for (int step = 0; step < cfg.steps; ++step) {
        Graph g;
        std::vector<int> losses;
        for (int b = 0; b < cfg.batch; ++b) {
            const LmItem& item =
                data[static_cast<size_t>(rng.bounded(static_cast<int>(data.size())))];
            losses.push_back(build_lm_loss(g, enc, item, EncoderMode::raw));
        }
        const int total = g.mean_all(g.stack_scalars(losses));
        const double lv = g.val(total).v[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("train: non-finite loss at step " +
                                     std::to_string(step));
        enc.store().zero_grad();
        g.backward(total);
        opt.step(enc.store());
        res.loss.push_back(lv);
    }
    return res;
}

// Mean per-token perplexity of the captions under the current weights; the
// uniform baseline is vocab_size.
inline double lm_perplexity(const Encoder& enc, const std::vector<LmItem>& data,
                            EncoderMode mode = EncoderMode::raw) {
    if (data.empty()) throw std::runtime_error("perplexity: empty dataset");
    double nll = 0.0;
    int64_t tokens = 0;
    for (const auto& item : data) {
        Graph g;
        nll += g.val(build_lm_loss(g, enc, item, mode)).v[0] *
               static_cast<double>(item.ids.size());
        tokens += static_cast<int64_t>(item.ids.size());
    }
    return std::exp(nll / static_cast<double>(tokens));
}

// ---- multimodal adapter + image-prefix training ----

struct MultimodalItem {
    Tensor image;           // [3,side,side] in [0,1]
    std::vector<int> ids;   // language-A caption token ids
};

struct MultimodalTrainConfig {
    int steps = 1200;
    int batch = 8;
    double lr = 1e-3;
    uint64_t seed = 1;
};

struct MultimodalTrainResult {
    std::vector<double> loss;  // mean batch loss per step
};

// Captioning loss: the prompt is [image prefix][caption]; rows from the last
// prefix position onward predict the caption tokens.
inline int build_caption_loss(Graph& g, const Encoder& enc, const MultimodalItem& item,
                              bool train, RngStream* drop_rng) {
    if (item.ids.empty()) throw std::runtime_error("multimodal: empty caption");
    Prompt p;
    PromptSegment img;
    img.kind = PromptSegment::Kind::image;
    img.image = item.image;
    p.segments.push_back(img);
    PromptSegment txt;
    txt.ids = item.ids;
    txt.lang = "A";
    p.segments.push_back(txt);

    const int pre = enc.config().grid * enc.config().grid;
    const int h = enc.build(g, p, EncoderMode::multimodal, nullptr, train, drop_rng);
    const int ctx = g.slice_rows(h, pre - 1, pre - 1 + static_cast<int>(item.ids.size()));
    return g.cross_entropy_mean(enc.build_logits(g, ctx), item.ids);
}

// Trains the bottleneck adapters and the visual prefix on image-to-caption
// prediction over a frozen base; prefix dropout is active.  `next` draws one
// training item (the caller owns storage and sampling).
inline MultimodalTrainResult train_multimodal(
    Encoder& enc, const std::function<MultimodalItem(RngStream&)>& next,
    const MultimodalTrainConfig& cfg) {
    if (cfg.steps < 0) throw std::runtime_error("train: negative step count");
    if (cfg.batch < 1) throw std::runtime_error("train: batch must be >= 1");
    auto kinds = enc.store().trainable_kinds();
    std::sort(kinds.begin(), kinds.end());
    if (kinds != std::vector<GroupKind>{GroupKind::adapter, GroupKind::image_prefix})
        throw std::runtime_error(
            "train: exactly the adapter and image-prefix groups may be trainable");

    RngStream rng(cfg.seed, "multimodal-train");
    RngStream drop_rng(cfg.seed, "multimodal-drop");
    Adam opt({.lr = cfg.lr}, {GroupKind::adapter, GroupKind::image_prefix});
    MultimodalTrainResult res;
    for (int step = 0; step < cfg.steps; ++step) {
        Graph g;
        std::vector<int> losses;
        for (int b = 0; b < cfg.batch; ++b) {
            const MultimodalItem item = next(rng);
            losses.push_back(build_caption_loss(g, enc, item, true, &drop_rng));
        }
        const int total = g.mean_all(g.stack_scalars(losses));
        const double lv = g.val(total).v[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("train: non-finite loss at step " +
                                     std::to_string(step));
        enc.store().zero_grad();
        g.backward(total);
        opt.step(enc.store());
        res.loss.push_back(lv);
    }
    return res;
}

}  // namespace xfuse
