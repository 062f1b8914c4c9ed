#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "xfuse/config.hpp"
#include "xfuse/denoiser.hpp"
#include "xfuse/diffusion.hpp"
#include "xfuse/encoder.hpp"
#include "xfuse/eval.hpp"
#include "xfuse/image.hpp"
#include "xfuse/params.hpp"
#include "xfuse/prompt.hpp"
#include "xfuse/semantic.hpp"
#include "xfuse/trainer.hpp"
#include "xfuse/vocab.hpp"
#include "xfuse/world.hpp"

namespace xfuse::cli {

namespace fs = std::filesystem;

// Failures carry a machine-parseable category that cli_main prints on stderr:
// usage (bad invocation), config (invalid settings), data (bad inputs),
// state (stage ordering / lineage / reproduction), numeric (divergence),
// io (filesystem).
struct CliError : std::runtime_error {
    std::string category;
    CliError(std::string cat, const std::string& msg)
        : std::runtime_error(msg), category(std::move(cat)) {}
};

inline CliError classify(const std::runtime_error& e) {
    const std::string w = e.what();
    auto has = [&](const char* s) { return w.find(s) != std::string::npos; };
    if (has("non-finite") || has("diverged")) return CliError("numeric", w);
    if (has("cannot open") || has("cannot write") || has("write failed") ||
        has("cannot commit") || has("cannot create") || has("cannot rename"))
        return CliError("io", w);
    if (has("checkpoint:") || has("manifest") || has("unknown word") ||
        has("scene record") || has("constants"))
        return CliError("data", w);
    return CliError("config", w);
}

// ---- model assembly ----

struct ModelConfig {
    EncoderConfig enc;
    DenoiserConfig dm;
    uint64_t init_seed = 1;
    int vocab_size = 0;
};

// Reads model.* keys (falling back to desk-scale defaults) and forces the
// cross-attention context width to the encoder width.
inline ModelConfig model_config_from(const KvConfig& c, int vocab_size) {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.init_seed = static_cast<uint64_t>(c.int_or("model.seed", 1));
    m.enc.layers = static_cast<int>(c.int_or("model.enc.layers", 4));
    m.enc.d_model = static_cast<int>(c.int_or("model.enc.d", 64));
    m.enc.heads = static_cast<int>(c.int_or("model.enc.heads", 4));
    m.enc.vocab_size = vocab_size;
    m.enc.adapter_factor = static_cast<int>(c.int_or("model.enc.adapter_factor", 8));
    m.enc.grid = static_cast<int>(c.int_or("model.enc.grid", 4));
    m.enc.max_len = static_cast<int>(c.int_or("model.enc.max_len", 128));
    m.enc.mlp_mult = static_cast<int>(c.int_or("model.enc.mlp_mult", 4));
    m.enc.rope_base = c.real_or("model.enc.rope_base", 10000.0);
    m.enc.prefix_dropout = c.real_or("model.enc.prefix_dropout", 0.1);
    m.enc.prefix_c1 = static_cast<int>(c.int_or("model.enc.prefix_c1", 16));
    m.enc.prefix_c2 = static_cast<int>(c.int_or("model.enc.prefix_c2", 32));
    m.dm.side = static_cast<int>(c.int_or("model.dm.side", 32));
    m.dm.ch0 = static_cast<int>(c.int_or("model.dm.ch0", 16));
    m.dm.ch1 = static_cast<int>(c.int_or("model.dm.ch1", 32));
    m.dm.context_d = m.enc.d_model;
    m.dm.t_embed = static_cast<int>(c.int_or("model.dm.t_embed", 32));
    m.dm.xattn_heads = static_cast<int>(c.int_or("model.dm.xattn_heads", 2));
    m.dm.gn_groups = static_cast<int>(c.int_or("model.dm.gn_groups", 8));
    return m;
}

inline void stamp_model(KvConfig& c, const ModelConfig& m) {
    c.set("model.seed", static_cast<int64_t>(m.init_seed));
    c.set("model.enc.layers", m.enc.layers);
    c.set("model.enc.d", m.enc.d_model);
    c.set("model.enc.heads", m.enc.heads);
    c.set("model.enc.adapter_factor", m.enc.adapter_factor);
    c.set("model.enc.grid", m.enc.grid);
    c.set("model.enc.max_len", m.enc.max_len);
    c.set("model.enc.mlp_mult", m.enc.mlp_mult);
    c.set("model.enc.rope_base", m.enc.rope_base);
    c.set("model.enc.prefix_dropout", m.enc.prefix_dropout);
    c.set("model.enc.prefix_c1", m.enc.prefix_c1);
    c.set("model.enc.prefix_c2", m.enc.prefix_c2);
    c.set("model.dm.side", m.dm.side);
    c.set("model.dm.ch0", m.dm.ch0);
    c.set("model.dm.ch1", m.dm.ch1);
    c.set("model.dm.t_embed", m.dm.t_embed);
    c.set("model.dm.xattn_heads", m.dm.xattn_heads);
    c.set("model.dm.gn_groups", m.dm.gn_groups);
    c.set("model.vocab_size", m.vocab_size);
}

// Canonical hash of the architecture; stamped into checkpoints so lineage is
// verified against the model a command actually builds.
inline uint64_t model_hash(const ModelConfig& m) {
    KvConfig c;
    stamp_model(c, m);
    return c.hash();
}

struct Model {
    std::unique_ptr<ParamStore> store;
    std::unique_ptr<Encoder> enc;
    std::unique_ptr<Denoiser> dm;
    ModelConfig cfg;
    uint64_t hash = 0;
};

inline Model build_model(const ModelConfig& mc) {
    Model m;
    m.cfg = mc;
    m.hash = model_hash(mc);
    m.store = std::make_unique<ParamStore>();
    RngStream rng(mc.init_seed, "model-init");
    m.enc = std::make_unique<Encoder>(mc.enc, *m.store, rng);
    m.dm = std::make_unique<Denoiser>(mc.dm, *m.store, rng);
    return m;
}

// ---- stage graph ----

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"lm", "multimodal", "semantic",
                                                "diffusion"};
    return names;
}

inline void check_stage_name(const std::string& stage) {
    for (const auto& s : stage_names())
        if (s == stage) return;
    throw CliError("usage", "train: unknown stage '" + stage + "'");
}

// Permitted parent stages (Fig-style ordering: lm -> multimodal -> semantic
// -> diffusion; semantic biases may also be tuned straight on the lm
// checkpoint; diffusion normally requires the semantic stage).
inline void check_stage_parent(const std::string& stage, const std::string& parent,
                               bool allow_ablation) {
    auto ok = [&](std::initializer_list<const char*> allowed) {
        for (const char* a : allowed)
            if (parent == a) return true;
        return false;
    };
    if (stage == "lm")
        throw CliError("usage", "train: stage lm starts fresh and takes no parent");
    if (stage == "multimodal" && !ok({"lm"}))
        throw CliError("state", "train: stage multimodal requires an lm parent, got '" +
                                    parent + "'");
    if (stage == "semantic" && !ok({"lm", "multimodal"}))
        throw CliError("state",
                       "train: stage semantic requires an lm or multimodal parent, got '" +
                           parent + "'");
    if (stage == "diffusion" && !ok({"semantic"})) {
        if (allow_ablation && ok({"lm", "multimodal"})) return;
        throw CliError("state",
                       "train: stage diffusion requires a semantic parent (pass "
                       "--allow-ablation to bypass), got '" +
                           parent + "'");
    }
}

// ---- run records ----

inline constexpr const char* kRecordSuffix = ".run";

struct RecordBuilder {
    KvConfig rec;

    explicit RecordBuilder(const std::string& command) {
        rec.set("run.command", command);
        rec.set("run.constants_hash", hex64(world::constants_hash()));
    }
    void output(const std::string& path) {
        rec.set("output." + path, hex64(file_hash(path)));
    }
    void rollup(const std::string& name, uint64_t h) {
        rec.set("rollup." + name, hex64(h));
    }
    void write(const std::string& path) { atomic_write(path, rec.serialize()); }
};

// ---- small helpers ----

inline std::string join_path(const std::string& a, const std::string& b) {
    return (fs::path(a) / b).string();
}

// Manifests may move with their directory; fall back to resolving the file
// name against the manifest's own location.
inline std::string resolve_data_path(const std::string& manifest_dir,
                                     const std::string& path) {
    if (fs::exists(path)) return path;
    const std::string local = join_path(manifest_dir, fs::path(path).filename().string());
    if (fs::exists(local)) return local;
    throw CliError("data", "cannot find data file " + path);
}

inline void save_ppm_atomic(const Tensor& img, const std::string& path) {
    save_ppm(img, path + ".tmp");
    std::error_code ec;
    fs::rename(path + ".tmp", path, ec);
    if (ec) throw CliError("io", "cannot commit " + path);
}

inline void check_constants(const std::string& data_dir) {
    const std::string path = join_path(data_dir, "constants.txt");
    if (!fs::exists(path)) return;  // pre-constants datasets are their own risk
    if (slurp_file(path) != world::constants_text())
        throw CliError("data",
                       "constants drift: " + path +
                           " does not match this build's palette/grammar constants");
}

inline std::vector<double> text_weight_lambda(const Prompt& p, int grid, double w) {
    std::vector<double> lam;
    for (const auto& seg : p.segments) {
        const int n = seg.kind == PromptSegment::Kind::text
                          ? static_cast<int>(seg.ids.size())
                          : grid * grid;
        for (int i = 0; i < n; ++i)
            lam.push_back(seg.kind == PromptSegment::Kind::text ? w : 1.0);
    }
    return lam;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::vector<uint64_t> seed_list(uint64_t base, int count) {
    std::vector<uint64_t> s;
    for (int i = 0; i < count; ++i) s.push_back(base + static_cast<uint64_t>(i));
    return s;
}

inline std::string seeds_text(const std::vector<uint64_t>& seeds) {
    std::string out;
    for (size_t i = 0; i < seeds.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(seeds[i]);
    }
    return out;
}

// ---- MCC manifest ----

inline void write_mcc_manifest(const std::vector<world::MccInstance>& instances,
                               const std::string& path) {
    std::ostringstream os;
    os << "# shapes-world mcc constants_hash=" << hex64(world::constants_hash()) << "\n";
    for (const auto& m : instances)
        os << world::kPalette[m.color1].name_a << '\t'
           << world::kShapeA[static_cast<int>(m.shape1)] << '\t'
           << world::kPalette[m.color2].name_a << '\t'
           << world::kShapeA[static_cast<int>(m.shape2)] << '\n';
    atomic_write(path, os.str());
}

inline std::vector<world::MccInstance> load_mcc_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw CliError("io", "cannot open " + path);
    std::vector<world::MccInstance> out;
    std::string line;
    auto color_of = [&](const std::string& w) {
        for (int c = 0; c < world::kNumColors; ++c)
            if (w == world::kPalette[c].name_a) return c;
        throw CliError("data", "mcc manifest: unknown color '" + w + "' in " + path);
    };
    auto shape_of = [&](const std::string& w) {
        for (int s = 0; s < world::kNumShapes; ++s)
            if (w == world::kShapeA[s]) return static_cast<world::Shape>(s);
        throw CliError("data", "mcc manifest: unknown shape '" + w + "' in " + path);
    };
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::string cur;
        for (char c : line) {
            if (c == '\t') {
                cols.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        cols.push_back(cur);
        if (cols.size() != 4) throw CliError("data", "mcc manifest: bad row in " + path);
        out.push_back(world::make_mcc_instance(color_of(cols[0]), shape_of(cols[1]),
                                               color_of(cols[2]), shape_of(cols[3])));
    }
    return out;
}

// ---- checkpoint inspection helpers ----

// Per-group checksums straight off a checkpoint file, matching
// ParamStore::group_checksum (names in save order, which is name-sorted).
inline std::map<std::string, uint64_t> checkpoint_checksums(const std::string& path) {
    const std::string buf = xfuse::detail::slurp(path);
    xfuse::detail::Reader r(buf);
    r.need(4);
    if (buf.compare(0, 4, "XFCK") != 0)
        throw CliError("data", "checkpoint: bad magic in " + path);
    r.pos = 4;
    if (r.u32() != kCheckpointVersion)
        throw CliError("data", "checkpoint: unsupported version in " + path);
    r.u64();
    r.str();
    r.u64();
    const uint32_t groups = r.u32();
    std::map<std::string, uint64_t> out;
    for (uint32_t gi = 0; gi < groups; ++gi) {
        const uint8_t kind_raw = r.u8();
        if (kind_raw >= kNumGroupKinds)
            throw CliError("data", "checkpoint: bad group kind in " + path);
        r.u8();
        const uint32_t pc = r.u32();
        uint64_t h = kFnvOffset;
        for (uint32_t pi = 0; pi < pc; ++pi) {
            const std::string name = r.str();
            const uint32_t rank = r.u32();
            for (uint32_t d = 0; d < rank; ++d) r.u32();
            const uint64_t count = r.u64();
            r.need(count * 8);
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(buf.data() + r.pos, count * 8, h);
            r.pos += count * 8;
        }
        out[kind_name(static_cast<GroupKind>(kind_raw))] = h;
    }
    return out;
}

// ---- gen-data ----

struct GenDataArgs {
    std::string out;
    std::string config_path;
    int scenes = 5000;
    int eval_scenes = 200;
    int nli = 1500;
    int mcc = 250;
    uint64_t seed = 1;
};

inline int cmd_gen_data(const GenDataArgs& a) {
    if (a.out.empty()) throw CliError("usage", "gen-data: --out is required");
    if (a.scenes < 1) throw CliError("usage", "gen-data: scenes must be >= 1");
    if (a.eval_scenes < 1) throw CliError("usage", "gen-data: eval-scenes must be >= 1");
    if (a.nli < 1) throw CliError("usage", "gen-data: nli must be >= 1");
    if (a.mcc < 1) throw CliError("usage", "gen-data: mcc must be >= 1");

    std::error_code ec;
    fs::create_directories(a.out, ec);
    if (ec) throw CliError("io", "gen-data: cannot create " + a.out);

    atomic_write(join_path(a.out, "constants.txt"), world::constants_text());
    const Vocabulary vocab = Vocabulary::standard();
    vocab.save(join_path(a.out, "vocab.txt"));

    RngStream scenes_rng(a.seed, "gen-scenes");
    const auto rows = world::gen_dataset(a.scenes, scenes_rng, join_path(a.out, "scenes"));
    RngStream eval_rng(a.seed, "gen-eval");
    const auto eval_rows =
        world::gen_dataset(a.eval_scenes, eval_rng, join_path(a.out, "eval"));

    // NLI rows come grouped per scene: a cross-lingual entailment plus a
    // contradiction sharing the premise (the tuning objective wants both for
    // one anchor), and occasionally a neutral row (excluded from tuning).
    RngStream nli_rng(a.seed, "gen-nli");
    std::vector<world::NliPair> pairs;
    for (int i = 0; i < a.nli; ++i) {
        const world::Scene s = world::gen_scene(nli_rng);
        const bool a_first = nli_rng.bounded(2) == 0;
        const std::string lx = a_first ? "A" : "B";
        const std::string ly = a_first ? "B" : "A";
        world::NliPair ent;
        ent.premise = world::caption(s, lx);
        ent.premise_lang = lx;
        ent.hypothesis = world::caption(s, ly);
        ent.hypothesis_lang = ly;
        ent.label = world::NliLabel::entailment;
        world::NliPair con = ent;
        con.hypothesis = world::caption(world::contradict_scene(s, nli_rng), ly);
        con.label = world::NliLabel::contradiction;
        pairs.push_back(ent);
        pairs.push_back(con);
        if (nli_rng.bounded(3) == 0) {
            world::NliPair neu = ent;
            world::Scene other = world::gen_scene(nli_rng);
            while (world::multiset_of(other) == world::multiset_of(s))
                other = world::gen_scene(nli_rng);
            neu.hypothesis = world::caption(other, ly);
            neu.label = world::NliLabel::neutral;
            pairs.push_back(neu);
        }
    }
    world::write_nli_manifest(pairs, join_path(a.out, "nli.tsv"));

    RngStream mcc_rng(a.seed, "gen-mcc");
    std::vector<world::MccInstance> instances;
    for (int i = 0; i < a.mcc; ++i) instances.push_back(world::gen_mcc_instance(mcc_rng));
    write_mcc_manifest(instances, join_path(a.out, "mcc.tsv"));

    RecordBuilder rb("gen-data");
    rb.rec.set("gen.out", a.out);
    rb.rec.set("gen.scenes", a.scenes);
    rb.rec.set("gen.eval_scenes", a.eval_scenes);
    rb.rec.set("gen.nli", a.nli);
    rb.rec.set("gen.mcc", a.mcc);
    rb.rec.set("gen.seed", static_cast<int64_t>(a.seed));
    rb.output(join_path(a.out, "constants.txt"));
    rb.output(join_path(a.out, "vocab.txt"));
    rb.output(join_path(a.out, "scenes/manifest.tsv"));
    rb.output(join_path(a.out, "eval/manifest.tsv"));
    rb.output(join_path(a.out, "nli.tsv"));
    rb.output(join_path(a.out, "mcc.tsv"));
    uint64_t img_rollup = kFnvOffset;
    for (const auto& r : rows) {
        const uint64_t h = file_hash(r.image_path);
        img_rollup = fnv1a64(&h, sizeof(h), img_rollup);
    }
    for (const auto& r : eval_rows) {
        const uint64_t h = file_hash(r.image_path);
        img_rollup = fnv1a64(&h, sizeof(h), img_rollup);
    }
    rb.rollup("images", img_rollup);
    rb.write(join_path(a.out, "gen-data.run"));

    std::cout << "scenes " << rows.size() << "\n"
              << "eval_scenes " << eval_rows.size() << "\n"
              << "nli_rows " << pairs.size() << "\n"
              << "mcc_instances " << instances.size() << "\n"
              << "record " << join_path(a.out, "gen-data.run") << "\n";
    return 0;
}

// ---- train ----

struct TrainArgs {
    std::string stage, data, out, parent, config_path;
    bool allow_ablation = false;
    // -1 / NaN mark "not set on the command line"; config fills the rest.
    int64_t steps = -1, batch = -1;
    double lr = -1.0;
    int64_t seed = -1;
};

struct StageConfig {
    int steps, batch;
    double lr;
    uint64_t seed;
};

inline StageConfig resolve_stage(KvConfig& cfg, const TrainArgs& a,
                                 const std::string& key, int steps, int batch,
                                 double lr) {
    StageConfig s;
    s.steps = static_cast<int>(a.steps >= 0 ? a.steps : cfg.int_or(key + ".steps", steps));
    s.batch = static_cast<int>(a.batch >= 0 ? a.batch : cfg.int_or(key + ".batch", batch));
    s.lr = a.lr >= 0 ? a.lr : cfg.real_or(key + ".lr", lr);
    s.seed = static_cast<uint64_t>(a.seed >= 0 ? a.seed : cfg.int_or("train.seed", 1));
    cfg.set(key + ".steps", s.steps);
    cfg.set(key + ".batch", s.batch);
    cfg.set(key + ".lr", s.lr);
    cfg.set("train.seed", static_cast<int64_t>(s.seed));
    return s;
}

inline std::vector<DiffusionItem> load_diffusion_items(
    const std::vector<world::DatasetRow>& rows, const std::string& manifest_dir,
    int side) {
    std::vector<DiffusionItem> items;
    items.reserve(rows.size());
    for (const auto& r : rows) {
        DiffusionItem it;
        it.image = load_ppm(resolve_data_path(manifest_dir, r.image_path));
        if (it.image.dim(1) != side || it.image.dim(2) != side)
            throw CliError("data", "train: image " + r.image_path + " is not " +
                                       std::to_string(side) + "x" + std::to_string(side));
        it.caption_a = r.caption_a;
        items.push_back(std::move(it));
    }
    return items;
}

struct TripleRow {
    std::string premise, lx, positive, negative, ly;
};

// Groups manifest rows into (anchor, entailment, contradiction) triples by
// premise; neutral rows are excluded from tuning.
inline std::vector<TripleRow> nli_triples(const std::vector<world::NliPair>& pairs) {
    std::map<std::string, TripleRow> partial;
    std::vector<TripleRow> out;
    for (const auto& p : pairs) {
        if (p.label == world::NliLabel::neutral) continue;
        TripleRow& t = partial[p.premise];
        t.premise = p.premise;
        t.lx = p.premise_lang;
        t.ly = p.hypothesis_lang;
        if (p.label == world::NliLabel::entailment) t.positive = p.hypothesis;
        if (p.label == world::NliLabel::contradiction) t.negative = p.hypothesis;
        if (!t.positive.empty() && !t.negative.empty()) {
            out.push_back(t);
            partial.erase(p.premise);
        }
    }
    return out;
}

inline int cmd_train(const TrainArgs& a) {
    if (a.stage.empty()) throw CliError("usage", "train: --stage is required");
    check_stage_name(a.stage);
    if (a.data.empty()) throw CliError("usage", "train: --data is required");
    if (a.out.empty()) throw CliError("usage", "train: --out is required");
    if (a.stage == "lm" && !a.parent.empty())
        throw CliError("usage", "train: stage lm starts fresh and takes no parent");
    if (a.stage != "lm" && a.parent.empty())
        throw CliError("usage", "train: stage " + a.stage + " requires --parent");

    check_constants(a.data);
    const Vocabulary vocab = Vocabulary::load(join_path(a.data, "vocab.txt"));
    KvConfig cfg = a.config_path.empty() ? KvConfig() : KvConfig::load(a.config_path);
    if (cfg.has("constants_hash") && cfg.hex("constants_hash") != world::constants_hash())
        throw CliError("config", "config names a different constants file");
    Model model = build_model(model_config_from(cfg, vocab.size()));
    stamp_model(cfg, model.cfg);

    uint64_t parent_hash = 0;
    if (!a.parent.empty()) {
        CheckpointMeta meta;
        try {
            meta = load_checkpoint(*model.store, a.parent);
        } catch (const std::runtime_error& e) {
            throw classify(e);
        }
        if (meta.config_hash != model.hash)
            throw CliError("state",
                           "train: parent checkpoint was built for a different model "
                           "configuration (" +
                               hex64(meta.config_hash) + " vs " + hex64(model.hash) + ")");
        check_stage_parent(a.stage, meta.stage, a.allow_ablation);
        parent_hash = meta.content_hash;
    }

    std::error_code ec;
    fs::create_directories(a.out, ec);
    if (ec) throw CliError("io", "train: cannot create " + a.out);

    const auto before = model.store->all_checksums();
    const std::string scenes_dir = join_path(a.data, "scenes");
    std::ostringstream loss_tsv;
    loss_tsv << "# step\tloss\n";
    std::vector<std::string> stage_groups;

    auto run_guarded = [&](const std::function<void()>& body) {
        try {
            body();
        } catch (const std::runtime_error& e) {
            const std::string w = e.what();
            if (w.find("non-finite") != std::string::npos ||
                w.find("diverged") != std::string::npos) {
                const std::string rec = join_path(a.out, "ckpt-" + a.stage + "-recovery.xfck");
                save_checkpoint(*model.store, rec, model.hash, a.stage + "-recovery",
                                parent_hash);
                throw CliError("numeric",
                               w + "; last stable parameters saved to " + rec);
            }
            throw;
        }
    };

    if (a.stage == "lm") {
        const auto rows = world::load_manifest(join_path(scenes_dir, "manifest.tsv"));
        std::vector<LmItem> data;
        for (const auto& r : rows) {
            data.push_back(lm_item(r.caption_a, "A", vocab));
            data.push_back(lm_item(r.caption_b, "B", vocab));
        }
        const StageConfig sc = resolve_stage(cfg, a, "train.lm", 1500, 16, 3e-4);
        model.store->set_trainable({GroupKind::base});
        LmTrainConfig tc{sc.steps, sc.batch, sc.lr, sc.seed};
        run_guarded([&] {
            const auto res = train_lm(*model.enc, data, tc);
            for (size_t i = 0; i < res.loss.size(); ++i)
                loss_tsv << i << '\t' << format_double(res.loss[i]) << '\n';
        });
        stage_groups = {"base"};
    } else if (a.stage == "multimodal") {
        const auto rows = world::load_manifest(join_path(scenes_dir, "manifest.tsv"));
        if (rows.empty()) throw CliError("data", "train: empty scenes manifest");
        std::vector<std::vector<int>> ids;
        for (const auto& r : rows) ids.push_back(vocab.tokenize(r.caption_a, "A"));
        auto next = [&](RngStream& r) {
            const size_t i = static_cast<size_t>(r.bounded(static_cast<int>(rows.size())));
            MultimodalItem it;
            it.image = load_ppm(resolve_data_path(scenes_dir, rows[i].image_path));
            it.ids = ids[i];
            return it;
        };
        const StageConfig sc = resolve_stage(cfg, a, "train.multimodal", 1000, 8, 1e-3);
        model.store->set_trainable({GroupKind::adapter, GroupKind::image_prefix});
        MultimodalTrainConfig tc{sc.steps, sc.batch, sc.lr, sc.seed};
        run_guarded([&] {
            const auto res = train_multimodal(*model.enc, next, tc);
            for (size_t i = 0; i < res.loss.size(); ++i)
                loss_tsv << i << '\t' << format_double(res.loss[i]) << '\n';
        });
        stage_groups = {"adapter", "image-prefix"};
    } else if (a.stage == "semantic") {
        const auto pairs = world::load_nli_manifest(join_path(a.data, "nli.tsv"));
        const auto triples = nli_triples(pairs);
        if (triples.empty())
            throw CliError("data",
                           "train: nli manifest holds no premise with both an "
                           "entailment and a contradiction");
        const StageConfig sc = resolve_stage(cfg, a, "train.semantic", 600, 8, 1e-3);
        const double tau = cfg.real_or("train.semantic.tau", 0.05);
        cfg.set("train.semantic.tau", tau);
        auto next = [&](RngStream& r) {
            const TripleRow& t =
                triples[static_cast<size_t>(r.bounded(static_cast<int>(triples.size())))];
            ContrastiveTriple out;
            out.anchor = Prompt::text(t.premise, t.lx, vocab);
            out.positive = Prompt::text(t.positive, t.ly, vocab);
            out.hard_negative = Prompt::text(t.negative, t.ly, vocab);
            return out;
        };
        model.store->set_trainable({GroupKind::bias});
        TuneConfig tc;
        tc.steps = sc.steps;
        tc.batch = sc.batch;
        tc.lr = sc.lr;
        tc.tau = tau;
        tc.seed = sc.seed;
        run_guarded([&] {
            const auto res = tune_biases(*model.enc, next, tc);
            for (size_t i = 0; i < res.loss.size(); ++i)
                loss_tsv << i << '\t' << format_double(res.loss[i]) << '\n';
        });
        stage_groups = {"bias"};
    } else {  // diffusion
        const auto rows = world::load_manifest(join_path(scenes_dir, "manifest.tsv"));
        const auto items = load_diffusion_items(rows, scenes_dir, model.cfg.dm.side);
        DiffusionTrainConfig dc;
        dc.batch = static_cast<int>(a.batch >= 0 ? a.batch
                                                 : cfg.int_or("train.diffusion.batch", 4));
        dc.lr = a.lr >= 0 ? a.lr : cfg.real_or("train.diffusion.lr", 2e-3);
        dc.p_image = cfg.real_or("train.diffusion.p_image", 0.2);
        dc.p_uncond = cfg.real_or("train.diffusion.p_uncond", 0.1);
        dc.T = static_cast<int>(cfg.int_or("train.diffusion.T", 100));
        dc.schedule =
            schedule_from_name(cfg.str_or("train.diffusion.schedule", "cosine"));
        const uint64_t seed =
            static_cast<uint64_t>(a.seed >= 0 ? a.seed : cfg.int_or("train.seed", 1));
        const int backbone_steps = static_cast<int>(
            a.steps >= 0 ? a.steps : cfg.int_or("train.diffusion.backbone_steps", 2000));
        const int xattn_steps = static_cast<int>(
            a.steps >= 0 ? a.steps : cfg.int_or("train.diffusion.xattn_steps", 2000));
        cfg.set("train.diffusion.batch", dc.batch);
        cfg.set("train.diffusion.lr", dc.lr);
        cfg.set("train.diffusion.p_image", dc.p_image);
        cfg.set("train.diffusion.p_uncond", dc.p_uncond);
        cfg.set("train.diffusion.T", dc.T);
        cfg.set("train.diffusion.schedule", schedule_name(dc.schedule));
        cfg.set("train.diffusion.backbone_steps", backbone_steps);
        cfg.set("train.diffusion.xattn_steps", xattn_steps);
        cfg.set("train.seed", static_cast<int64_t>(seed));

        // Phase A teaches the backbone unconditional denoising (the gating
        // projection opens from zero); phase B trains only the
        // cross-attention blocks to use the conditioning.
        run_guarded([&] {
            dc.steps = backbone_steps;
            dc.seed = seed;
            model.store->set_trainable({GroupKind::other});
            const auto ra = train_diffusion(*model.dm, *model.enc, vocab, *model.store,
                                            items, GroupKind::other, dc);
            for (size_t i = 0; i < ra.loss.size(); ++i)
                loss_tsv << "backbone:" << i << '\t' << format_double(ra.loss[i]) << '\n';
            dc.steps = xattn_steps;
            dc.seed = seed + 1;
            model.store->set_trainable({GroupKind::cross_attention});
            const auto rx = train_diffusion(*model.dm, *model.enc, vocab, *model.store,
                                            items, GroupKind::cross_attention, dc);
            for (size_t i = 0; i < rx.loss.size(); ++i)
                loss_tsv << "xattn:" << i << '\t' << format_double(rx.loss[i]) << '\n';
        });
        stage_groups = {"other", "cross-attention"};
    }

    // Freezing contract: every group outside the stage's own set must be
    // bit-identical to its pre-training checksum.
    const auto after = model.store->all_checksums();
    for (const auto& [group, sum] : before) {
        const bool stage_owned =
            std::find(stage_groups.begin(), stage_groups.end(), group) !=
            stage_groups.end();
        if (!stage_owned && after.at(group) != sum)
            throw CliError("state", "train: frozen group '" + group +
                                        "' changed during stage " + a.stage);
    }

    const std::string tmp_ckpt = join_path(a.out, ".ckpt-" + a.stage + ".tmp");
    const uint64_t content =
        save_checkpoint(*model.store, tmp_ckpt, model.hash, a.stage, parent_hash);
    const std::string ckpt_path =
        join_path(a.out, "ckpt-" + a.stage + "-" + hex64(content) + ".xfck");
    fs::rename(tmp_ckpt, ckpt_path, ec);
    if (ec) throw CliError("io", "train: cannot commit " + ckpt_path);
    const std::string loss_path = join_path(a.out, "loss-" + a.stage + ".tsv");
    atomic_write(loss_path, loss_tsv.str());

    RecordBuilder rb("train");
    rb.rec.merge(cfg);
    rb.rec.set("train.stage", a.stage);
    rb.rec.set("train.data", a.data);
    rb.rec.set("train.out", a.out);
    rb.rec.set("train.allow_ablation", a.allow_ablation ? "true" : "false");
    if (!a.parent.empty()) {
        rb.rec.set("train.parent", a.parent);
        rb.rec.set("train.parent_hash", hex64(parent_hash));
    }
    for (const auto& [group, sum] : after) {
        rb.rec.set("checksum.before." + group, hex64(before.at(group)));
        rb.rec.set("checksum.after." + group, hex64(sum));
    }
    rb.output(ckpt_path);
    rb.output(loss_path);
    rb.write(ckpt_path + kRecordSuffix);

    std::cout << "stage " << a.stage << "\n"
              << "checkpoint " << ckpt_path << "\n"
              << "checkpoint_hash " << hex64(content) << "\n";
    for (const auto& [group, sum] : after)
        std::cout << "group " << group << " "
                  << (sum == before.at(group) ? "frozen" : "updated") << " "
                  << hex64(sum) << "\n";
    std::cout << "record " << ckpt_path << kRecordSuffix << "\n";
    return 0;
}

// ---- shared sampling plumbing ----

struct LoadedModel {
    Model model;
    CheckpointMeta meta;
};

inline LoadedModel load_model(const KvConfig& cfg, const std::string& ckpt_path,
                              int vocab_size) {
    LoadedModel lm{build_model(model_config_from(cfg, vocab_size)), {}};
    try {
        lm.meta = load_checkpoint(*lm.model.store, ckpt_path);
    } catch (const std::runtime_error& e) {
        throw classify(e);
    }
    if (lm.meta.config_hash != lm.model.hash)
        throw CliError("state", "checkpoint was built for a different model "
                                "configuration (" +
                                    hex64(lm.meta.config_hash) + " vs " +
                                    hex64(lm.model.hash) + ")");
    return lm;
}

struct SamplerArgs {
    int steps = 25;
    double guidance = 7.5;
    uint64_t seed = 1;
    bool deterministic = false;
    std::string schedule = "cosine";
};

inline SamplerConfig sampler_config(const SamplerArgs& s, uint64_t seed) {
    SamplerConfig c;
    c.steps = s.steps;
    c.guidance = s.guidance;
    c.seed = seed;
    c.deterministic = s.deterministic;
    c.schedule = schedule_from_name(s.schedule);
    return c;
}

inline void stamp_sampler(KvConfig& cfg, const SamplerArgs& s) {
    cfg.set("sampler.steps", s.steps);
    cfg.set("sampler.guidance", s.guidance);
    cfg.set("sampler.seed", static_cast<int64_t>(s.seed));
    cfg.set("sampler.deterministic", s.deterministic ? "true" : "false");
    cfg.set("sampler.schedule", s.schedule);
}

// One guided generation: positive conditioning from `prompt` (with optional
// text-weight lambda), base estimate from the negative prompt if present,
// else the null prompt.
inline Tensor generate(const Model& m, const Prompt& prompt, double text_weight,
                       const Prompt* neg, const SamplerConfig& scfg) {
    const EncoderMode mode = EncoderMode::semantic_multimodal;
    std::vector<double> lam;
    const std::vector<double>* lam_ptr = nullptr;
    if (text_weight != 1.0) {
        if (!(text_weight > 0.0))
            throw CliError("config", "text weight must be positive");
        lam = text_weight_lambda(prompt, m.cfg.enc.grid, text_weight);
        lam_ptr = &lam;
    }
    const Tensor cond = m.enc->encode(prompt, mode, lam_ptr);
    const Tensor base =
        m.enc->encode(neg ? *neg : Prompt::null_prompt(), mode);
    return sample(*m.dm, cond, base, scfg);
}

// ---- sample ----

struct SampleArgs {
    std::string ckpt, prompt, neg_prompt, out, config_path;
    SamplerArgs sampler;
    double text_weight = 1.0;
};

inline int cmd_sample(const SampleArgs& a) {
    if (a.ckpt.empty()) throw CliError("usage", "sample: --ckpt is required");
    if (a.prompt.empty()) throw CliError("usage", "sample: --prompt is required");
    if (a.out.empty()) throw CliError("usage", "sample: --out is required");

    const Vocabulary vocab = Vocabulary::standard();
    KvConfig cfg = a.config_path.empty() ? KvConfig() : KvConfig::load(a.config_path);
    LoadedModel lm = load_model(cfg, a.ckpt, vocab.size());
    stamp_model(cfg, lm.model.cfg);

    const Prompt prompt = parse_prompt_literal(a.prompt, vocab);
    Prompt neg;
    const bool has_neg = !a.neg_prompt.empty();
    if (has_neg) neg = parse_prompt_literal(a.neg_prompt, vocab);

    const SamplerConfig scfg = sampler_config(a.sampler, a.sampler.seed);
    const Tensor img =
        generate(lm.model, prompt, a.text_weight, has_neg ? &neg : nullptr, scfg);
    save_ppm_atomic(img, a.out);

    RecordBuilder rb("sample");
    rb.rec.merge(cfg);
    stamp_sampler(rb.rec, a.sampler);
    rb.rec.set("sample.ckpt", a.ckpt);
    rb.rec.set("sample.ckpt_hash", hex64(lm.meta.content_hash));
    rb.rec.set("sample.prompt", a.prompt);
    if (has_neg) rb.rec.set("sample.neg_prompt", a.neg_prompt);
    rb.rec.set("sample.text_weight", a.text_weight);
    rb.rec.set("sample.out", a.out);
    rb.output(a.out);
    rb.write(a.out + kRecordSuffix);

    std::cout << "image " << a.out << "\n"
              << "image_hash " << hex64(file_hash(a.out)) << "\n"
              << "record " << a.out << kRecordSuffix << "\n";
    return 0;
}

// ---- eval ----

struct EvalArgs {
    std::string kind, ckpt, data, out, config_path;
    std::string mode = "both";            // mcc
    std::string weights = "1,5,10,15,25"; // sweep
    int n = -1;
    int seeds = -1;
    double text_weight = 1.0;
    SamplerArgs sampler;
};

inline Prompt mcc_multimodal_prompt(const world::MccInstance& inst,
                                    const Vocabulary& vocab) {
    Prompt p;
    PromptSegment t1;
    t1.ids = vocab.tokenize(inst.text_part1, "A");
    t1.lang = "A";
    PromptSegment i1;
    i1.kind = PromptSegment::Kind::image;
    i1.image = world::render(inst.ref1);
    PromptSegment t2;
    t2.ids = vocab.tokenize(inst.text_part2, "A");
    t2.lang = "A";
    PromptSegment i2;
    i2.kind = PromptSegment::Kind::image;
    i2.image = world::render(inst.ref2);
    p.segments = {t1, i1, t2, i2};
    return p;
}

inline void report_composition(KvConfig& rep, const std::string& prefix,
                               const CompositionReport& r) {
    rep.set(prefix + ".count", static_cast<int64_t>(r.n));
    rep.set(prefix + ".failures", static_cast<int64_t>(r.failures));
    rep.set(prefix + ".zero", r.rate(r.zero));
    rep.set(prefix + ".one", r.rate(r.one));
    rep.set(prefix + ".one_color", r.rate(r.one_color));
    rep.set(prefix + ".two", r.rate(r.two));
    rep.set(prefix + ".two_color", r.rate(r.two_color));
}

inline std::vector<double> parse_weight_list(const std::string& csv) {
    std::vector<double> out;
    std::string cur;
    std::istringstream is(csv);
    while (std::getline(is, cur, ',')) {
        try {
            size_t pos = 0;
            const double w = std::stod(cur, &pos);
            if (pos != cur.size() || !(w > 0.0)) throw std::invalid_argument(cur);
            out.push_back(w);
        } catch (const std::exception&) {
            throw CliError("usage", "eval: bad weight '" + cur + "' in --weights");
        }
    }
    if (out.empty()) throw CliError("usage", "eval: --weights is empty");
    return out;
}

inline int cmd_eval(const EvalArgs& a) {
    static const std::vector<std::string> kinds{"alignment", "mcc", "variation", "ffd",
                                                "sweep"};
    if (std::find(kinds.begin(), kinds.end(), a.kind) == kinds.end())
        throw CliError("usage", "eval: unknown kind '" + a.kind + "'");
    if (a.ckpt.empty()) throw CliError("usage", "eval: --ckpt is required");
    if (a.data.empty()) throw CliError("usage", "eval: --data is required");
    if (a.out.empty()) throw CliError("usage", "eval: --out is required");

    check_constants(a.data);
    const Vocabulary vocab = Vocabulary::load(join_path(a.data, "vocab.txt"));
    KvConfig cfg = a.config_path.empty() ? KvConfig() : KvConfig::load(a.config_path);
    LoadedModel lm = load_model(cfg, a.ckpt, vocab.size());
    stamp_model(cfg, lm.model.cfg);
    const Model& model = lm.model;

    KvConfig rep;
    rep.set("report.kind", a.kind);
    rep.set("report.checkpoint_hash", hex64(lm.meta.content_hash));
    rep.set("report.config_hash", hex64(model.hash));
    rep.set("report.constants_hash", hex64(world::constants_hash()));
    stamp_sampler(rep, a.sampler);

    const std::string eval_dir = join_path(a.data, "eval");
    std::vector<std::string> extra_outputs;

    if (a.kind == "alignment") {
        const auto rows = world::load_manifest(join_path(eval_dir, "manifest.tsv"));
        const int n = a.n > 0 ? a.n : 100;
        if (static_cast<int>(rows.size()) < n)
            throw CliError("data", "eval: alignment needs " + std::to_string(n) +
                                       " rows, manifest has " +
                                       std::to_string(rows.size()));
        std::vector<PromptPair> prompts;
        for (int i = 0; i < n; ++i) {
            if (rows[static_cast<size_t>(i)].caption_b.empty())
                throw CliError("data",
                               "eval: alignment requires language-B captions in the "
                               "manifest; row " +
                                   std::to_string(i) + " has none");
            prompts.push_back({rows[static_cast<size_t>(i)].caption_a,
                               rows[static_cast<size_t>(i)].caption_b});
        }
        const AlignmentReport tuned =
            cosine_alignment(*model.enc, EncoderMode::semantic_multimodal, prompts, vocab);
        const AlignmentReport base =
            cosine_alignment(*model.enc, EncoderMode::multimodal, prompts, vocab);
        rep.set("alignment.n", n);
        rep.set("alignment.tuned_mean", tuned.mean);
        rep.set("alignment.tuned_stddev", tuned.stddev);
        rep.set("alignment.baseline_mean", base.mean);
        rep.set("alignment.baseline_stddev", base.stddev);
        rep.set("alignment.delta", tuned.mean - base.mean);
    } else if (a.kind == "mcc") {
        if (a.mode != "text" && a.mode != "multimodal" && a.mode != "both")
            throw CliError("usage", "eval: --mode must be text, multimodal, or both");
        const auto all = load_mcc_manifest(join_path(a.data, "mcc.tsv"));
        const int n = a.n > 0 ? a.n : 50;
        if (static_cast<int>(all.size()) < n)
            throw CliError("data", "eval: mcc needs " + std::to_string(n) +
                                       " instances, manifest has " +
                                       std::to_string(all.size()));
        const std::vector<world::MccInstance> instances(all.begin(), all.begin() + n);
        const auto seeds = seed_list(a.sampler.seed, a.seeds > 0 ? a.seeds : 10);
        rep.set("mcc.n", n);
        rep.set("mcc.seeds", seeds_text(seeds));
        rep.set("mcc.text_weight", a.text_weight);
        auto run_mode = [&](bool multimodal) {
            auto sampler = [&](const world::MccInstance& inst, uint64_t seed) {
                const Prompt p = multimodal
                                     ? mcc_multimodal_prompt(inst, vocab)
                                     : Prompt::text(inst.text_prompt, "A", vocab);
                return generate(model, p, multimodal ? a.text_weight : 1.0, nullptr,
                                sampler_config(a.sampler, seed));
            };
            return mcc_evaluate(instances, seeds, sampler);
        };
        if (a.mode == "text" || a.mode == "both")
            report_composition(rep, "mcc.text", run_mode(false));
        if (a.mode == "multimodal" || a.mode == "both")
            report_composition(rep, "mcc.multimodal", run_mode(true));
    } else if (a.kind == "variation") {
        const auto rows = world::load_manifest(join_path(eval_dir, "manifest.tsv"));
        const int n = a.n > 0 ? a.n : 20;
        const int per = a.seeds > 0 ? a.seeds : 16;
        if (static_cast<int>(rows.size()) < n)
            throw CliError("data", "eval: variation needs " + std::to_string(n) +
                                       " rows, manifest has " +
                                       std::to_string(rows.size()));
        const auto seeds = seed_list(a.sampler.seed, per);
        int64_t meaningful = 0, total = 0, matches = 0, copies = 0;
        for (int i = 0; i < n; ++i) {
            const auto& row = rows[static_cast<size_t>(i)];
            const Tensor input =
                load_ppm(resolve_data_path(eval_dir, row.image_path));
            const world::Scene scene = world::parse_scene_record(row.record);
            Prompt p;
            PromptSegment seg;
            seg.kind = PromptSegment::Kind::image;
            seg.image = input;
            seg.image_path = row.image_path;
            p.segments = {seg};
            auto sampler = [&](uint64_t seed) {
                return generate(model, p, 1.0, nullptr, sampler_config(a.sampler, seed));
            };
            const VariationReport r = variation_check(input, scene, seeds, sampler);
            meaningful += r.meaningful;
            total += static_cast<int64_t>(r.entries.size());
            for (const auto& e : r.entries) {
                matches += e.scene_match ? 1 : 0;
                copies += e.copy ? 1 : 0;
            }
        }
        rep.set("variation.inputs", n);
        rep.set("variation.seeds", seeds_text(seeds));
        rep.set("variation.total", total);
        rep.set("variation.meaningful", meaningful);
        rep.set("variation.rate",
                total == 0 ? 0.0 : static_cast<double>(meaningful) / total);
        rep.set("variation.scene_match_rate",
                total == 0 ? 0.0 : static_cast<double>(matches) / total);
        rep.set("variation.copy_rate",
                total == 0 ? 0.0 : static_cast<double>(copies) / total);
    } else if (a.kind == "ffd") {
        const auto rows = world::load_manifest(join_path(eval_dir, "manifest.tsv"));
        const int n = a.n > 0 ? a.n : 100;
        if (static_cast<int>(rows.size()) < n)
            throw CliError("data", "eval: ffd needs " + std::to_string(n) +
                                       " rows, manifest has " +
                                       std::to_string(rows.size()));
        std::vector<Tensor> real_feats, gen_feats;
        for (int i = 0; i < n; ++i) {
            const auto& row = rows[static_cast<size_t>(i)];
            const Tensor real = load_ppm(resolve_data_path(eval_dir, row.image_path));
            real_feats.push_back(prefix_features(*model.enc, real));
            const Tensor gen = generate(
                model, Prompt::text(row.caption_a, "A", vocab), 1.0, nullptr,
                sampler_config(a.sampler, a.sampler.seed + static_cast<uint64_t>(i)));
            gen_feats.push_back(prefix_features(*model.enc, gen));
        }
        const FrechetResult r = frechet_feature_distance(real_feats, gen_feats);
        rep.set("ffd.n", n);
        rep.set("ffd.value", r.value);
        rep.set("ffd.regularized", r.regularized ? "true" : "false");
    } else {  // sweep
        const auto all = load_mcc_manifest(join_path(a.data, "mcc.tsv"));
        const int n = a.n > 0 ? a.n : 4;
        const int per = a.seeds > 0 ? a.seeds : 4;
        if (static_cast<int>(all.size()) < n)
            throw CliError("data", "eval: sweep needs " + std::to_string(n) +
                                       " instances, manifest has " +
                                       std::to_string(all.size()));
        const std::vector<world::MccInstance> instances(all.begin(), all.begin() + n);
        const auto weights = parse_weight_list(a.weights);
        const auto seeds = seed_list(a.sampler.seed, per);
        const std::string grid_dir = a.out + ".d";
        std::error_code ec;
        fs::create_directories(grid_dir, ec);
        if (ec) throw CliError("io", "eval: cannot create " + grid_dir);
        rep.set("sweep.n", n);
        rep.set("sweep.seeds", seeds_text(seeds));
        rep.set("sweep.weights", a.weights);
        rep.set("sweep.grid_dir", grid_dir);
        for (const double w : weights) {
            CompositionReport agg;
            double attr_sum = 0;
            int64_t attr_n = 0;
            for (int i = 0; i < n; ++i) {
                const auto& inst = instances[static_cast<size_t>(i)];
                const Prompt p = mcc_multimodal_prompt(inst, vocab);
                for (const uint64_t seed : seeds) {
                    const Tensor img =
                        generate(model, p, w, nullptr, sampler_config(a.sampler, seed));
                    std::ostringstream name;
                    name << "sweep-w" << w << "-i" << i << "-s" << seed << ".ppm";
                    const std::string path = join_path(grid_dir, name.str());
                    save_ppm_atomic(img, path);
                    extra_outputs.push_back(path);
                    const CompositionRow row = composition_oracle(
                        img, {static_cast<int>(inst.shape1), inst.color1},
                        {static_cast<int>(inst.shape2), inst.color2});
                    agg.add(row);
                    attr_sum += row.two_color ? 1.0 : (row.one_color ? 0.5 : 0.0);
                    ++attr_n;
                }
            }
            std::ostringstream key;
            key << "sweep.w" << w;
            report_composition(rep, key.str(), agg);
            rep.set(key.str() + ".attr_fraction",
                    attr_n == 0 ? 0.0 : attr_sum / static_cast<double>(attr_n));
        }
    }

    atomic_write(a.out, rep.serialize());

    RecordBuilder rb("eval");
    rb.rec.merge(cfg);
    stamp_sampler(rb.rec, a.sampler);
    rb.rec.set("eval.kind", a.kind);
    rb.rec.set("eval.ckpt", a.ckpt);
    rb.rec.set("eval.ckpt_hash", hex64(lm.meta.content_hash));
    rb.rec.set("eval.data", a.data);
    rb.rec.set("eval.out", a.out);
    rb.rec.set("eval.mode", a.mode);
    rb.rec.set("eval.weights", a.weights);
    rb.rec.set("eval.n", a.n);
    rb.rec.set("eval.seeds", a.seeds);
    rb.rec.set("eval.text_weight", a.text_weight);
    rb.output(a.out);
    uint64_t rollup = kFnvOffset;
    for (const auto& p : extra_outputs) {
        const uint64_t h = file_hash(p);
        rollup = fnv1a64(&h, sizeof(h), rollup);
    }
    if (!extra_outputs.empty()) rb.rollup("sweep_images", rollup);
    rb.write(a.out + kRecordSuffix);

    std::cout << "report " << a.out << "\n"
              << "record " << a.out << kRecordSuffix << "\n";
    return 0;
}

// ---- inspect ----

struct InspectArgs {
    std::string ckpt;
};

inline int cmd_inspect(const InspectArgs& a) {
    if (a.ckpt.empty()) throw CliError("usage", "inspect: --ckpt is required");
    CheckpointMeta meta;
    try {
        meta = read_checkpoint_meta(a.ckpt);
    } catch (const std::runtime_error& e) {
        throw classify(e);
    }
    const auto sums = checkpoint_checksums(a.ckpt);
    std::cout << "checkpoint " << a.ckpt << "\n"
              << "stage " << meta.stage << "\n"
              << "config_hash " << hex64(meta.config_hash) << "\n"
              << "content_hash " << hex64(meta.content_hash) << "\n"
              << "parent_hash " << hex64(meta.parent_hash) << "\n";
    for (const auto& g : meta.groups)
        std::cout << "group " << kind_name(g.kind) << " params " << g.names.size()
                  << " scalars " << g.scalars << " checksum "
                  << hex64(sums.at(kind_name(g.kind))) << "\n";

    // Lineage: follow parent hashes through sibling checkpoint files.
    uint64_t parent = meta.parent_hash;
    std::string chain = meta.stage;
    const fs::path dir = fs::path(a.ckpt).parent_path();
    while (parent != 0) {
        bool found = false;
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(
                 dir.empty() ? fs::path(".") : dir, ec)) {
            if (entry.path().extension() != ".xfck") continue;
            CheckpointMeta pm;
            try {
                pm = read_checkpoint_meta(entry.path().string());
            } catch (const std::runtime_error&) {
                continue;
            }
            if (pm.content_hash == parent) {
                chain = pm.stage + " -> " + chain;
                parent = pm.parent_hash;
                found = true;
                break;
            }
        }
        if (!found) {
            chain = "(missing " + hex64(parent) + ") -> " + chain;
            break;
        }
    }
    std::cout << "lineage " << chain << "\n";
    return 0;
}

// ---- rerun ----

struct RerunArgs {
    std::string record;
};

inline int run_from_record(const KvConfig& rec);

inline int cmd_rerun(const RerunArgs& a) {
    if (a.record.empty()) throw CliError("usage", "rerun: --record is required");
    const KvConfig rec = KvConfig::load(a.record);
    if (!rec.has("run.command"))
        throw CliError("data", "rerun: " + a.record + " is not a run record");
    if (rec.hex("run.constants_hash") != world::constants_hash())
        throw CliError("state", "rerun: record was produced with different world "
                                "constants");
    const int code = run_from_record(rec);
    if (code != 0) return code;

    // Reproducibility check: every recorded artifact must hash identically.
    for (const auto& key : rec.keys_with_prefix("output.")) {
        const std::string path = key.substr(7);
        const uint64_t want = rec.hex(key);
        const uint64_t got = file_hash(path);
        if (want != got)
            throw CliError("state", "rerun: output " + path + " differs (" +
                                        hex64(want) + " vs " + hex64(got) + ")");
        std::cout << "reproduced " << path << "\n";
    }
    return 0;
}

// Re-executes a recorded command.  The record carries every resolved key, so
// no defaults apply here.
inline int run_from_record(const KvConfig& rec) {
    const std::string& cmd = rec.str("run.command");
    // Records carry the fully-resolved configuration; pass it through a
    // temporary file so the command takes the exact same path as a fresh run.
    const std::string tmp_cfg =
        (fs::temp_directory_path() / "xfuse-rerun-cfg.txt").string();
    atomic_write(tmp_cfg, rec.serialize());

    if (cmd == "gen-data") {
        GenDataArgs g;
        g.out = rec.str("gen.out");
        g.scenes = static_cast<int>(rec.integer("gen.scenes"));
        g.eval_scenes = static_cast<int>(rec.integer("gen.eval_scenes"));
        g.nli = static_cast<int>(rec.integer("gen.nli"));
        g.mcc = static_cast<int>(rec.integer("gen.mcc"));
        g.seed = static_cast<uint64_t>(rec.integer("gen.seed"));
        return cmd_gen_data(g);
    }
    if (cmd == "train") {
        TrainArgs t;
        t.stage = rec.str("train.stage");
        t.data = rec.str("train.data");
        t.out = rec.str("train.out");
        t.parent = rec.str_or("train.parent", "");
        t.allow_ablation = rec.flag_or("train.allow_ablation", false);
        t.config_path = tmp_cfg;
        return cmd_train(t);
    }
    if (cmd == "sample") {
        SampleArgs s;
        s.ckpt = rec.str("sample.ckpt");
        s.prompt = rec.str("sample.prompt");
        s.neg_prompt = rec.str_or("sample.neg_prompt", "");
        s.out = rec.str("sample.out");
        s.text_weight = rec.real("sample.text_weight");
        s.sampler.steps = static_cast<int>(rec.integer("sampler.steps"));
        s.sampler.guidance = rec.real("sampler.guidance");
        s.sampler.seed = static_cast<uint64_t>(rec.integer("sampler.seed"));
        s.sampler.deterministic = rec.flag_or("sampler.deterministic", false);
        s.sampler.schedule = rec.str("sampler.schedule");
        s.config_path = tmp_cfg;
        return cmd_sample(s);
    }
    if (cmd == "eval") {
        EvalArgs e;
        e.kind = rec.str("eval.kind");
        e.ckpt = rec.str("eval.ckpt");
        e.data = rec.str("eval.data");
        e.out = rec.str("eval.out");
        e.mode = rec.str("eval.mode");
        e.weights = rec.str("eval.weights");
        e.n = static_cast<int>(rec.integer("eval.n"));
        e.seeds = static_cast<int>(rec.integer("eval.seeds"));
        e.text_weight = rec.real("eval.text_weight");
        e.sampler.steps = static_cast<int>(rec.integer("sampler.steps"));
        e.sampler.guidance = rec.real("sampler.guidance");
        e.sampler.seed = static_cast<uint64_t>(rec.integer("sampler.seed"));
        e.sampler.deterministic = rec.flag_or("sampler.deterministic", false);
        e.sampler.schedule = rec.str("sampler.schedule");
        e.config_path = tmp_cfg;
        return cmd_eval(e);
    }
    throw CliError("data", "rerun: unknown recorded command '" + cmd + "'");
}

}  // namespace xfuse::cli

#include "CLI11.hpp"

namespace xfuse::cli {

inline void add_sampler_flags(CLI::App* sub, SamplerArgs& s) {
    sub->add_option("--steps", s.steps, "sampler walk length");
    sub->add_option("--guidance", s.guidance, "guidance scale");
    sub->add_option("--seed", s.seed, "sampler seed");
    sub->add_flag("--deterministic", s.deterministic, "drop the stochastic term");
    sub->add_option("--schedule", s.schedule, "noise schedule: cosine or linear-vp");
}

inline int cli_main(int argc, char** argv) {
    CLI::App app{"bilingual shapes world: frozen text encoder, multimodal adapters, "
                 "bias tuning, and a guided diffusion image generator"};
    app.require_subcommand(1);

    GenDataArgs g;
    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    gen->add_option("--out", g.out, "output directory");
    gen->add_option("--scenes", g.scenes, "training scenes");
    gen->add_option("--eval-scenes", g.eval_scenes, "held-out scenes");
    gen->add_option("--nli", g.nli, "premise count for the inference manifest");
    gen->add_option("--mcc", g.mcc, "composition instances");
    gen->add_option("--seed", g.seed, "generator seed");

    TrainArgs t;
    CLI::App* train = app.add_subcommand("train", "train one stage");
    train->add_option("--stage", t.stage, "lm | multimodal | semantic | diffusion");
    train->add_option("--data", t.data, "dataset directory from gen-data");
    train->add_option("--out", t.out, "checkpoint output directory");
    train->add_option("--parent", t.parent, "parent checkpoint path");
    train->add_option("--config", t.config_path, "key = value config file");
    train->add_flag("--allow-ablation", t.allow_ablation,
                    "let diffusion train on a parent without tuned biases");
    train->add_option("--steps", t.steps, "override stage step count");
    train->add_option("--batch", t.batch, "override stage batch size");
    train->add_option("--lr", t.lr, "override stage learning rate");
    train->add_option("--seed", t.seed, "override training seed");

    SampleArgs s;
    CLI::App* sample = app.add_subcommand("sample", "generate one image");
    sample->add_option("--ckpt", s.ckpt, "checkpoint path");
    sample->add_option("--prompt", s.prompt,
                       "prompt literal; <img:PATH> splices an image, trailing @A/@B "
                       "picks the language");
    sample->add_option("--neg-prompt", s.neg_prompt, "negative prompt literal");
    sample->add_option("--out", s.out, "output image (binary PPM)");
    sample->add_option("--config", s.config_path, "key = value config file");
    sample->add_option("--text-weight", s.text_weight,
                       "attention weight on text rows of the prompt");
    add_sampler_flags(sample, s.sampler);

    EvalArgs e;
    CLI::App* eval = app.add_subcommand("eval", "run an evaluation");
    eval->add_option("--kind", e.kind, "alignment | mcc | variation | ffd | sweep");
    eval->add_option("--ckpt", e.ckpt, "checkpoint path");
    eval->add_option("--data", e.data, "dataset directory from gen-data");
    eval->add_option("--out", e.out, "report path");
    eval->add_option("--config", e.config_path, "key = value config file");
    eval->add_option("--mode", e.mode, "mcc prompting: text | multimodal | both");
    eval->add_option("--weights", e.weights, "sweep text weights, comma separated");
    eval->add_option("--n", e.n, "instances / rows to evaluate");
    eval->add_option("--seeds", e.seeds, "samples per instance");
    eval->add_option("--text-weight", e.text_weight, "text weight for mcc multimodal");
    add_sampler_flags(eval, e.sampler);

    InspectArgs ins;
    CLI::App* inspect = app.add_subcommand("inspect", "describe a checkpoint");
    inspect->add_option("--ckpt", ins.ckpt, "checkpoint path");

    RerunArgs rr;
    CLI::App* rerun =
        app.add_subcommand("rerun", "re-execute a run record and verify its outputs");
    rerun->add_option("record", rr.record, "path to a .run record");

    try {
        app.parse(argc, argv);
        if (app.got_subcommand(gen)) return cmd_gen_data(g);
        if (app.got_subcommand(train)) return cmd_train(t);
        if (app.got_subcommand(sample)) return cmd_sample(s);
        if (app.got_subcommand(eval)) return cmd_eval(e);
        if (app.got_subcommand(inspect)) return cmd_inspect(ins);
        if (app.got_subcommand(rerun)) return cmd_rerun(rr);
    } catch (const CLI::ParseError& pe) {
        if (pe.get_exit_code() == 0) return app.exit(pe);
        std::cerr << "xfuse: error: category=usage: " << pe.what() << "\n";
        return 2;
    } catch (const CliError& ce) {
        std::cerr << "xfuse: error: category=" << ce.category << ": " << ce.what()
                  << "\n";
        return ce.category == "usage" ? 2 : 1;
    } catch (const std::runtime_error& re) {
        const CliError ce = classify(re);
        std::cerr << "xfuse: error: category=" << ce.category << ": " << ce.what()
                  << "\n";
        return 1;
    }
    return 0;
}

}  // namespace xfuse::cli
