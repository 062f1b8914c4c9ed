#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/graph.hpp"
#include "xfuse/params.hpp"
#include "xfuse/prompt.hpp"
#include "xfuse/rng.hpp"

namespace xfuse {

struct EncoderConfig {
    int layers = 4;
    int d_model = 64;
    int heads = 4;
    int vocab_size = 0;
    int adapter_factor = 8;  // bottleneck = d_model / factor
    int grid = 4;            // image prefix is grid*grid rows
    int max_len = 128;
    int mlp_mult = 4;
    double rope_base = 10000.0;
    double prefix_dropout = 0.1;
    int prefix_c1 = 16;
    int prefix_c2 = 32;

    int head_dim() const { return d_model / heads; }
    int mlp_dim() const { return d_model * mlp_mult; }
    int bottleneck() const { return d_model / adapter_factor; }
    int image_side() const { return 8 * grid; }  // three stride-2 convs

    void validate() const {
        if (layers < 1) throw std::runtime_error("config: layers must be >= 1");
        if (vocab_size < 4) throw std::runtime_error("config: vocab_size too small");
        if (heads < 1 || d_model % heads != 0)
            throw std::runtime_error("config: d_model not divisible by heads");
        if (head_dim() % 2 != 0)
            throw std::runtime_error("config: head width must be even for rotary embedding");
        if (adapter_factor < 1 || d_model % adapter_factor != 0)
            throw std::runtime_error("config: d_model not divisible by adapter factor");
        if (grid < 1) throw std::runtime_error("config: grid must be >= 1");
        if (max_len < 1) throw std::runtime_error("config: max_len must be >= 1");
        if (prefix_dropout < 0.0 || prefix_dropout >= 1.0)
            throw std::runtime_error("config: prefix_dropout outside [0,1)");
    }
};

// Which add-on parameter groups participate in the forward pass.  The base
// transformer runs in every mode; adapters and semantic biases bolt on.
enum class EncoderMode { raw, multimodal, semantic, semantic_multimodal };

inline const char* mode_name(EncoderMode m) {
    switch (m) {
        case EncoderMode::raw: return "raw";
        case EncoderMode::multimodal: return "multimodal";
        case EncoderMode::semantic: return "semantic";
        case EncoderMode::semantic_multimodal: return "semantic+multimodal";
    }
    return "?";
}

inline EncoderMode mode_from_name(const std::string& s) {
    if (s == "raw") return EncoderMode::raw;
    if (s == "multimodal") return EncoderMode::multimodal;
    if (s == "semantic") return EncoderMode::semantic;
    if (s == "semantic+multimodal" || s == "semantic_multimodal")
        return EncoderMode::semantic_multimodal;
    throw std::runtime_error("unknown encoder mode '" + s + "'");
}

inline bool mode_uses_adapters(EncoderMode m) {
    return m == EncoderMode::multimodal || m == EncoderMode::semantic_multimodal;
}
inline bool mode_uses_biases(EncoderMode m) {
    return m == EncoderMode::semantic || m == EncoderMode::semantic_multimodal;
}

// Decoder-only causal transformer with rotary positions, a bias-free base,
// bottleneck adapters, bolt-on bias vectors, and a convolutional image
// prefix.  Parameters live in a ParamStore so staged training can freeze
// whole groups.
class Encoder {
  public:
    Encoder(const EncoderConfig& cfg, ParamStore& store, RngStream& rng)
        : cfg_(cfg), store_(&store) {
        cfg_.validate();
        const int d = cfg_.d_model, m = cfg_.mlp_dim(), bn = cfg_.bottleneck();
        emb_ = &reg("enc.emb", GroupKind::base, {cfg_.vocab_size, d}, 0.02, rng);
        layers_.resize(static_cast<size_t>(cfg_.layers));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "enc.L" + std::to_string(l) + ".";
            Layer& L = layers_[static_cast<size_t>(l)];
            L.ln1_g = &ones(p + "ln1.g", GroupKind::base, d);
            L.q_w = &reg(p + "q.w", GroupKind::base, {d, d}, 0.08, rng);
            L.k_w = &reg(p + "k.w", GroupKind::base, {d, d}, 0.08, rng);
            L.v_w = &reg(p + "v.w", GroupKind::base, {d, d}, 0.08, rng);
            L.o_w = &reg(p + "o.w", GroupKind::base, {d, d}, 0.08, rng);
            L.ln2_g = &ones(p + "ln2.g", GroupKind::base, d);
            L.fc1_w = &reg(p + "fc1.w", GroupKind::base, {d, m}, 0.08, rng);
            L.fc2_w = &reg(p + "fc2.w", GroupKind::base, {m, d}, 0.08, rng);
            L.aatt_down = &reg(p + "aatt.down.w", GroupKind::adapter, {d, bn}, 0.08, rng);
            L.aatt_up = &zeros(p + "aatt.up.w", GroupKind::adapter, {bn, d});
            L.amlp_down = &reg(p + "amlp.down.w", GroupKind::adapter, {d, bn}, 0.08, rng);
            L.amlp_up = &zeros(p + "amlp.up.w", GroupKind::adapter, {bn, d});
            L.b_q = &zeros(p + "b.q", GroupKind::bias, {d});
            L.b_k = &zeros(p + "b.k", GroupKind::bias, {d});
            L.b_v = &zeros(p + "b.v", GroupKind::bias, {d});
            L.b_o = &zeros(p + "b.o", GroupKind::bias, {d});
            L.b_fc1 = &zeros(p + "b.fc1", GroupKind::bias, {m});
            L.b_fc2 = &zeros(p + "b.fc2", GroupKind::bias, {d});
        }
        lnf_g_ = &ones("enc.lnf.g", GroupKind::base, d);
        head_w_ = &reg("enc.head.w", GroupKind::base, {d, cfg_.vocab_size}, 0.08, rng);
        const int c1 = cfg_.prefix_c1, c2 = cfg_.prefix_c2;
        c1_w_ = &conv("pfx.c1.w", {c1, 3, 3, 3}, rng);
        c1_b_ = &zeros("pfx.c1.b", GroupKind::image_prefix, {c1});
        c2_w_ = &conv("pfx.c2.w", {c2, c1, 3, 3}, rng);
        c2_b_ = &zeros("pfx.c2.b", GroupKind::image_prefix, {c2});
        c3_w_ = &conv("pfx.c3.w", {d, c2, 3, 3}, rng);
        c3_b_ = &zeros("pfx.c3.b", GroupKind::image_prefix, {d});
        pfx_ln_g_ = &ones("pfx.ln.g", GroupKind::image_prefix, d);
    }

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& store() { return *store_; }

    // Builds the full forward pass onto g and returns the node holding the
    // last-hidden-layer states H [rows, d_model].
    int build(Graph& g, const Prompt& prompt, EncoderMode mode,
              const std::vector<double>* lambda = nullptr, bool train = false,
              RngStream* drop_rng = nullptr) const {
        const int n = prompt.flat_len(cfg_.grid);
        if (n < 1) throw std::runtime_error("encode: empty prompt");
        if (n > cfg_.max_len)
            throw std::runtime_error("encode: prompt length " + std::to_string(n) +
                                     " exceeds maximum " + std::to_string(cfg_.max_len));
        const std::vector<double>* loglam = nullptr;
        std::vector<double> loglam_store;
        if (lambda) {
            if (static_cast<int>(lambda->size()) != n)
                throw std::runtime_error(
                    "encode: lambda length " + std::to_string(lambda->size()) +
                    " does not match prompt rows " + std::to_string(n));
            loglam_store.resize(lambda->size());
            for (size_t i = 0; i < lambda->size(); ++i) {
                if (!((*lambda)[i] > 0.0))
                    throw std::runtime_error("encode: lambda must be positive");
                loglam_store[i] = std::log((*lambda)[i]);
            }
            loglam = &loglam_store;
        }

        std::vector<int> parts;
        for (const auto& seg : prompt.segments) {
            if (seg.kind == PromptSegment::Kind::text) {
                for (int id : seg.ids)
                    if (id < 0 || id >= cfg_.vocab_size)
                        throw std::runtime_error("encode: token id out of range");
                parts.push_back(g.embed(P(g, emb_), seg.ids));
            } else {
                parts.push_back(prefix_rows(g, seg.image, train, drop_rng));
            }
        }
        int x = parts.size() == 1 ? parts[0] : g.concat_rows(parts);

        const bool ad = mode_uses_adapters(mode);
        const bool bi = mode_uses_biases(mode);
        for (const Layer& L : layers_) {
            int h = g.layer_norm(x, P(g, L.ln1_g), -1);
            int q = g.linear(h, P(g, L.q_w), bi ? P(g, L.b_q) : -1);
            int k = g.linear(h, P(g, L.k_w), bi ? P(g, L.b_k) : -1);
            int v = g.linear(h, P(g, L.v_w), bi ? P(g, L.b_v) : -1);
            q = g.rope(q, cfg_.heads, cfg_.rope_base);
            k = g.rope(k, cfg_.heads, cfg_.rope_base);
            int a = g.attention(q, k, v, cfg_.heads, /*causal=*/true, loglam);
            a = g.linear(a, P(g, L.o_w), bi ? P(g, L.b_o) : -1);
            if (ad) a = adapter(g, a, L.aatt_down, L.aatt_up);
            x = g.add(x, a);
            int h2 = g.layer_norm(x, P(g, L.ln2_g), -1);
            int mlp = g.linear(h2, P(g, L.fc1_w), bi ? P(g, L.b_fc1) : -1);
            mlp = g.gelu(mlp);
            mlp = g.linear(mlp, P(g, L.fc2_w), bi ? P(g, L.b_fc2) : -1);
            if (ad) mlp = adapter(g, mlp, L.amlp_down, L.amlp_up);
            x = g.add(x, mlp);
        }
        return g.layer_norm(x, P(g, lnf_g_), -1);
    }

    // Next-token logits over the vocabulary, one row per prompt row.
    int build_logits(Graph& g, int h) const { return g.matmul(h, P(g, head_w_)); }

    Tensor encode(const Prompt& prompt, EncoderMode mode,
                  const std::vector<double>* lambda = nullptr) const {
        Graph g;
        return g.val(build(g, prompt, mode, lambda));
    }

    Tensor logits(const Prompt& prompt, EncoderMode mode) const {
        Graph g;
        return g.val(build_logits(g, build(g, prompt, mode)));
    }

    // Visual prefix rows alone (eval mode), for inspection.
    Tensor prefix(const Tensor& img) const {
        Graph g;
        return g.val(prefix_rows(g, img, false, nullptr));
    }

  private:
    struct Layer {
        Param *ln1_g, *q_w, *k_w, *v_w, *o_w, *ln2_g, *fc1_w, *fc2_w;
        Param *aatt_down, *aatt_up, *amlp_down, *amlp_up;
        Param *b_q, *b_k, *b_v, *b_o, *b_fc1, *b_fc2;
    };

    // Strided conv stack: [3, 8g, 8g] -> [d, g, g] -> g*g normalized rows.
    int prefix_rows(Graph& g, const Tensor& img, bool train, RngStream* drop_rng) const {
        check_image(img, "encode");
        if (img.dim(1) != cfg_.image_side() || img.dim(2) != cfg_.image_side())
            throw std::runtime_error(
                "encode: image must be " + std::to_string(cfg_.image_side()) + "x" +
                std::to_string(cfg_.image_side()) + ", got " + std::to_string(img.dim(1)) +
                "x" + std::to_string(img.dim(2)));
        int x = g.leaf(img);
        x = g.gelu(g.conv2d(x, P(g, c1_w_), P(g, c1_b_), 2, 1));
        x = g.gelu(g.conv2d(x, P(g, c2_w_), P(g, c2_b_), 2, 1));
        x = g.conv2d(x, P(g, c3_w_), P(g, c3_b_), 2, 1);
        x = g.chw_to_rows(x);
        x = g.layer_norm(x, P(g, pfx_ln_g_), -1);
        if (train && cfg_.prefix_dropout > 0.0) {
            if (!drop_rng) throw std::runtime_error("encode: train mode requires rng");
            x = g.dropout(x, cfg_.prefix_dropout, *drop_rng);
        }
        return x;
    }

    int adapter(Graph& g, int h, const Param* down, const Param* up) const {
        int z = g.linear(g.gelu(g.linear(h, P(g, down))), P(g, up));
        return g.add(h, z);
    }

    int P(Graph& g, const Param* p) const {
        return g.param(*const_cast<Param*>(p), store_->trainable(*p));
    }

    Param& reg(const std::string& name, GroupKind k, std::vector<int> shape,
               double stdev, RngStream& rng) {
        Tensor t = Tensor::zeros(shape);
        for (auto& v : t.v) v = stdev * rng.normal();
        return store_->add(name, k, std::move(t));
    }
    Param& zeros(const std::string& name, GroupKind k, std::vector<int> shape) {
        return store_->add(name, k, Tensor::zeros(std::move(shape)));
    }
    Param& ones(const std::string& name, GroupKind k, int d) {
        return store_->add(name, k, Tensor::full({d}, 1.0));
    }
    Param& conv(const std::string& name, std::vector<int> shape, RngStream& rng) {
        const double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
        return reg(name, GroupKind::image_prefix, std::move(shape),
                   1.0 / std::sqrt(fan_in), rng);
    }

    EncoderConfig cfg_;
    ParamStore* store_;
    Param* emb_;
    std::vector<Layer> layers_;
    Param *lnf_g_, *head_w_;
    Param *c1_w_, *c1_b_, *c2_w_, *c2_b_, *c3_w_, *c3_b_, *pfx_ln_g_;
};

}  // namespace xfuse
