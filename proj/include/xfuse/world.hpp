#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xfuse/hash.hpp"
#include "xfuse/image.hpp"
#include "xfuse/rng.hpp"
#include "xfuse/tensor.hpp"

namespace xfuse::world {

// ---- constants: palette and the two disjoint grammars ----

struct PaletteColor {
    const char* name_a;
    const char* name_b;
    double r, g, b;
};

// 8 maximally separated colors: the RGB cube corners.
inline constexpr PaletteColor kPalette[8] = {
    {"black", "nox", 0.0, 0.0, 0.0},   {"red", "ulva", 1.0, 0.0, 0.0},
    {"green", "vesh", 0.0, 1.0, 0.0},  {"blue", "zuri", 0.0, 0.0, 1.0},
    {"yellow", "amil", 1.0, 1.0, 0.0}, {"magenta", "pruk", 1.0, 0.0, 1.0},
    {"cyan", "tilo", 0.0, 1.0, 1.0},   {"white", "osel", 1.0, 1.0, 1.0},
};
inline constexpr int kNumColors = 8;

enum class Shape { square = 0, circle = 1, triangle = 2 };
inline constexpr int kNumShapes = 3;
inline constexpr const char* kShapeA[kNumShapes] = {"square", "circle", "triangle"};
inline constexpr const char* kShapeB[kNumShapes] = {"kwad", "rond", "trik"};

inline constexpr const char* kDetA = "a";
inline constexpr const char* kDetB = "po";
inline constexpr const char* kAndA = "and";
inline constexpr const char* kAndB = "ke";

inline constexpr int kCanvas = 32;
inline constexpr double kBackground = 0.5;  // neutral gray, all channels
inline constexpr int kMinSize = 6;

// Canonical text form of every constant the data depends on; its hash is
// stamped into manifests so drifting word lists or palette values are
// detectable.
inline std::string constants_text() {
    std::ostringstream os;
    os << "shapes-world-constants v1\n";
    os << "canvas " << kCanvas << " background " << kBackground << "\n";
    for (const auto& c : kPalette)
        os << "color " << c.name_a << " " << c.name_b << " " << c.r << " " << c.g
           << " " << c.b << "\n";
    for (int s = 0; s < kNumShapes; ++s)
        os << "shape " << kShapeA[s] << " " << kShapeB[s] << "\n";
    os << "det " << kDetA << " " << kDetB << "\n";
    os << "and " << kAndA << " " << kAndB << "\n";
    return os.str();
}

inline uint64_t constants_hash() {
    const std::string t = constants_text();
    return fnv1a64(t.data(), t.size());
}

// ---- scenes ----

struct SceneObject {
    Shape shape;
    int color;  // palette index
    int cx, cy; // pixel center
    int size;   // square side / circle diameter / triangle base+height
};

struct Scene {
    std::vector<SceneObject> objects;
    int side = kCanvas;
};

struct Box {
    int x0, y0, x1, y1;  // inclusive
};

inline Box bbox(const SceneObject& o) {
    const int x0 = o.cx - o.size / 2;
    const int y0 = o.cy - o.size / 2;
    return {x0, y0, x0 + o.size - 1, y0 + o.size - 1};
}

inline bool boxes_separated(const Box& a, const Box& b) {
    return (b.x0 - a.x1 >= 3) || (a.x0 - b.x1 >= 3) || (b.y0 - a.y1 >= 3) ||
           (a.y0 - b.y1 >= 3);
}

inline void validate_scene(const Scene& s) {
    for (const auto& o : s.objects) {
        if (o.size < kMinSize) throw std::runtime_error("scene: object size below minimum");
        if (o.color < 0 || o.color >= kNumColors)
            throw std::runtime_error("scene: color index out of palette");
        const Box b = bbox(o);
        if (b.x0 < 0 || b.y0 < 0 || b.x1 >= s.side || b.y1 >= s.side)
            throw std::runtime_error("scene: object not fully inside canvas");
    }
    for (size_t i = 0; i < s.objects.size(); ++i)
        for (size_t j = i + 1; j < s.objects.size(); ++j) {
            if (!boxes_separated(bbox(s.objects[i]), bbox(s.objects[j])))
                throw std::runtime_error("scene: objects overlap or touch");
            if (s.objects[i].shape == s.objects[j].shape &&
                s.objects[i].color == s.objects[j].color)
                throw std::runtime_error("scene: duplicate (shape,color) pair");
        }
}

// Hard-edged deterministic rasterizer: object pixels are exactly their
// palette color, background exactly kBackground.
inline Tensor render(const Scene& s) {
    validate_scene(s);
    const int n = s.side;
    const int64_t hw = static_cast<int64_t>(n) * n;
    Tensor img({3, n, n});
    std::fill(img.v.begin(), img.v.end(), kBackground);
    for (const auto& o : s.objects) {
        const auto& col = kPalette[o.color];
        const double rgb[3] = {col.r, col.g, col.b};
        const Box b = bbox(o);
        auto put = [&](int x, int y) {
            for (int c = 0; c < 3; ++c)
                img.v[c * hw + static_cast<int64_t>(y) * n + x] = rgb[c];
        };
        switch (o.shape) {
            case Shape::square:
                for (int y = b.y0; y <= b.y1; ++y)
                    for (int x = b.x0; x <= b.x1; ++x) put(x, y);
                break;
            case Shape::circle: {
                const double r = o.size / 2.0;
                const double r2 = r * r;
                for (int y = b.y0; y <= b.y1; ++y)
                    for (int x = b.x0; x <= b.x1; ++x) {
                        const double dx = x - o.cx, dy = y - o.cy;
                        if (dx * dx + dy * dy <= r2) put(x, y);
                    }
                break;
            }
            case Shape::triangle: {
                // apex at top center, base along the bottom of the box
                const int height = b.y1 - b.y0;
                for (int y = b.y0; y <= b.y1; ++y) {
                    const double t = height == 0 ? 1.0
                                                 : static_cast<double>(y - b.y0) / height;
                    const double hwid = t * (o.size - 1) / 2.0;
                    const int lo = static_cast<int>(std::ceil(o.cx - hwid));
                    const int hi = static_cast<int>(std::floor(o.cx + hwid));
                    for (int x = lo; x <= hi; ++x) put(x, y);
                }
                break;
            }
        }
    }
    return img;
}

// ---- captions ----

inline std::vector<std::string> caption_tokens_a(const Scene& s) {
    std::vector<std::string> toks;
    for (size_t i = 0; i < s.objects.size(); ++i) {
        if (i > 0) toks.push_back(kAndA);
        toks.push_back(kDetA);
        toks.push_back(kPalette[s.objects[i].color].name_a);
        toks.push_back(kShapeA[static_cast<int>(s.objects[i].shape)]);
    }
    return toks;
}

inline std::string a_to_b_token(const std::string& t) {
    if (t == kDetA) return kDetB;
    if (t == kAndA) return kAndB;
    for (const auto& c : kPalette)
        if (t == c.name_a) return c.name_b;
    for (int s = 0; s < kNumShapes; ++s)
        if (t == kShapeA[s]) return kShapeB[s];
    throw std::runtime_error("caption: no B lexicon entry for '" + t + "'");
}

inline std::string b_to_a_token(const std::string& t) {
    if (t == kDetB) return kDetA;
    if (t == kAndB) return kAndA;
    for (const auto& c : kPalette)
        if (t == c.name_b) return c.name_a;
    for (int s = 0; s < kNumShapes; ++s)
        if (t == kShapeB[s]) return kShapeA[s];
    throw std::runtime_error("caption: no A lexicon entry for '" + t + "'");
}

inline std::string join(const std::vector<std::string>& toks) {
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

inline std::vector<std::string> split_ws(const std::string& text) {
    std::vector<std::string> toks;
    std::istringstream is(text);
    std::string t;
    while (is >> t) toks.push_back(t);
    return toks;
}

// Language A reads determiner-color-shape; language B is the word-mapped
// mirror image (whole token sequence reversed), so constituent order is
// reversed and no surface token is shared.
inline std::string caption(const Scene& s, const std::string& lang) {
    if (s.objects.empty()) throw std::runtime_error("caption: empty scene");
    auto toks = caption_tokens_a(s);
    if (lang == "A") return join(toks);
    if (lang == "B") {
        std::vector<std::string> btoks;
        for (auto it = toks.rbegin(); it != toks.rend(); ++it)
            btoks.push_back(a_to_b_token(*it));
        return join(btoks);
    }
    throw std::runtime_error("caption: unsupported language '" + lang + "'");
}

using AttrPair = std::pair<int, int>;  // (shape index, color index)

inline std::vector<AttrPair> multiset_of(const Scene& s) {
    std::vector<AttrPair> m;
    for (const auto& o : s.objects)
        m.emplace_back(static_cast<int>(o.shape), o.color);
    std::sort(m.begin(), m.end());
    return m;
}

// Parses a caption back to its (shape,color) multiset; strict grammar.
inline std::vector<AttrPair> parse_caption(const std::string& text,
                                           const std::string& lang) {
    std::vector<std::string> toks = split_ws(text);
    if (lang == "B") {
        std::vector<std::string> atoks;
        for (auto it = toks.rbegin(); it != toks.rend(); ++it)
            atoks.push_back(b_to_a_token(*it));
        toks = std::move(atoks);
    } else if (lang != "A") {
        throw std::runtime_error("parse_caption: unsupported language '" + lang + "'");
    }
    std::vector<AttrPair> out;
    size_t i = 0;
    while (i < toks.size()) {
        if (!out.empty()) {
            if (toks[i] != kAndA) throw std::runtime_error("parse_caption: expected conjunction");
            ++i;
        }
        if (i >= toks.size() || toks[i] != kDetA)
            throw std::runtime_error("parse_caption: expected determiner");
        ++i;
        if (i >= toks.size()) throw std::runtime_error("parse_caption: expected color");
        int color = -1;
        for (int c = 0; c < kNumColors; ++c)
            if (toks[i] == kPalette[c].name_a) color = c;
        if (color < 0) throw std::runtime_error("parse_caption: unknown color '" + toks[i] + "'");
        ++i;
        if (i >= toks.size()) throw std::runtime_error("parse_caption: expected shape");
        int shape = -1;
        for (int s = 0; s < kNumShapes; ++s)
            if (toks[i] == kShapeA[s]) shape = s;
        if (shape < 0) throw std::runtime_error("parse_caption: unknown shape '" + toks[i] + "'");
        ++i;
        out.emplace_back(shape, color);
    }
    if (out.empty()) throw std::runtime_error("parse_caption: empty caption");
    std::sort(out.begin(), out.end());
    return out;
}

// ---- scene sampling ----

inline SceneObject sample_object(RngStream& rng) {
    SceneObject o;
    o.shape = static_cast<Shape>(rng.bounded(kNumShapes));
    o.color = rng.bounded(kNumColors);
    o.size = 8 + rng.bounded(7);  // 8..14, comfortably above the oracle floor
    const int x0 = rng.bounded(kCanvas - o.size + 1);
    const int y0 = rng.bounded(kCanvas - o.size + 1);
    o.cx = x0 + o.size / 2;
    o.cy = y0 + o.size / 2;
    return o;
}

inline Scene gen_scene(RngStream& rng, int count = 0) {
    if (count == 0) count = 1 + rng.bounded(3);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Scene s;
        bool ok = true;
        for (int i = 0; i < count && ok; ++i) {
            bool placed = false;
            for (int t = 0; t < 200 && !placed; ++t) {
                SceneObject o = sample_object(rng);
                bool clash = false;
                for (const auto& e : s.objects) {
                    if (!boxes_separated(bbox(e), bbox(o))) clash = true;
                    if (e.shape == o.shape && e.color == o.color) clash = true;
                }
                if (!clash) {
                    s.objects.push_back(o);
                    placed = true;
                }
            }
            ok = placed;
        }
        if (ok) {
            validate_scene(s);
            return s;
        }
    }
    throw std::runtime_error("gen_scene: placement failed");
}

// ---- NLI tuples ----

enum class NliLabel { entailment = 0, contradiction = 1, neutral = 2 };

inline const char* nli_label_name(NliLabel l) {
    switch (l) {
        case NliLabel::entailment: return "entailment";
        case NliLabel::contradiction: return "contradiction";
        case NliLabel::neutral: return "neutral";
    }
    return "?";
}

inline NliLabel nli_label_from(const std::string& s) {
    if (s == "entailment") return NliLabel::entailment;
    if (s == "contradiction") return NliLabel::contradiction;
    if (s == "neutral") return NliLabel::neutral;
    throw std::runtime_error("unknown NLI label: " + s);
}

struct NliPair {
    std::string premise, premise_lang;
    std::string hypothesis, hypothesis_lang;
    NliLabel label;
    Scene scene;  // premise scene, kept for tests; not serialized
};

// Premise and hypothesis always cross languages; contradiction flips exactly
// one attribute of one object, neutral describes an unrelated scene.
// Flips exactly one attribute (color or shape) of one object; the result
// describes a strictly contradictory scene.
inline Scene contradict_scene(const Scene& s, RngStream& rng) {
    Scene alt = s;
    auto& o = alt.objects[static_cast<size_t>(rng.bounded(
        static_cast<int>(alt.objects.size())))];
    if (rng.bounded(2) == 0) {
        int c = rng.bounded(kNumColors - 1);
        if (c >= o.color) ++c;
        o.color = c;
    } else {
        int sh = rng.bounded(kNumShapes - 1);
        if (sh >= static_cast<int>(o.shape)) ++sh;
        o.shape = static_cast<Shape>(sh);
    }
    return alt;
}

inline NliPair gen_nli_pair(RngStream& rng) {
    NliPair p;
    p.scene = gen_scene(rng);
    const bool a_first = rng.bounded(2) == 0;
    p.premise_lang = a_first ? "A" : "B";
    p.hypothesis_lang = a_first ? "B" : "A";
    p.premise = caption(p.scene, p.premise_lang);
    p.label = static_cast<NliLabel>(rng.bounded(3));
    switch (p.label) {
        case NliLabel::entailment:
            p.hypothesis = caption(p.scene, p.hypothesis_lang);
            break;
        case NliLabel::contradiction:
            p.hypothesis = caption(contradict_scene(p.scene, rng), p.hypothesis_lang);
            break;
        case NliLabel::neutral: {
            Scene other = gen_scene(rng);
            while (multiset_of(other) == multiset_of(p.scene)) other = gen_scene(rng);
            p.hypothesis = caption(other, p.hypothesis_lang);
            break;
        }
    }
    return p;
}

// ---- MCC-style conjunction benchmark ----

struct MccInstance {
    int color1, color2;
    Shape shape1, shape2;
    std::string text_prompt;              // "a COLOR1 SHAPE1 and a COLOR2 SHAPE2"
    std::string text_part1, text_part2;   // split at the reference-image insertion points
    Scene ref1, ref2;                     // single-object reference scenes
};

inline Scene single_object_scene(Shape shape, int color) {
    Scene s;
    s.objects.push_back({shape, color, kCanvas / 2, kCanvas / 2, 12});
    return s;
}

inline MccInstance make_mcc_instance(int color1, Shape shape1, int color2,
                                     Shape shape2) {
    if (color1 < 0 || color1 >= kNumColors || color2 < 0 || color2 >= kNumColors)
        throw std::runtime_error("mcc: color index out of range");
    if (color1 == color2 || shape1 == shape2)
        throw std::runtime_error("mcc: the two objects must differ in color and shape");
    MccInstance m;
    m.color1 = color1;
    m.color2 = color2;
    m.shape1 = shape1;
    m.shape2 = shape2;
    m.text_part1 = std::string(kDetA) + " " + kPalette[m.color1].name_a + " " +
                   kShapeA[static_cast<int>(m.shape1)];
    m.text_part2 = std::string(kAndA) + " " + kDetA + " " + kPalette[m.color2].name_a +
                   " " + kShapeA[static_cast<int>(m.shape2)];
    m.text_prompt = m.text_part1 + " " + m.text_part2;
    m.ref1 = single_object_scene(m.shape1, m.color1);
    m.ref2 = single_object_scene(m.shape2, m.color2);
    return m;
}

inline MccInstance gen_mcc_instance(RngStream& rng) {
    const int color1 = rng.bounded(kNumColors);
    int color2 = rng.bounded(kNumColors - 1);
    if (color2 >= color1) ++color2;
    const Shape shape1 = static_cast<Shape>(rng.bounded(kNumShapes));
    int s2 = rng.bounded(kNumShapes - 1);
    if (s2 >= static_cast<int>(shape1)) ++s2;
    return make_mcc_instance(color1, shape1, color2, static_cast<Shape>(s2));
}

// ---- scene records and manifests ----

inline std::string scene_record(const Scene& s) {
    std::ostringstream os;
    os << "side=" << s.side;
    for (const auto& o : s.objects)
        os << " obj=" << kShapeA[static_cast<int>(o.shape)] << ":"
           << kPalette[o.color].name_a << ":" << o.cx << ":" << o.cy << ":" << o.size;
    return os.str();
}

inline Scene parse_scene_record(const std::string& rec) {
    Scene s;
    for (const auto& tok : split_ws(rec)) {
        if (tok.rfind("side=", 0) == 0) {
            s.side = std::stoi(tok.substr(5));
        } else if (tok.rfind("obj=", 0) == 0) {
            std::string body = tok.substr(4);
            std::vector<std::string> parts;
            std::string cur;
            for (char c : body) {
                if (c == ':') {
                    parts.push_back(cur);
                    cur.clear();
                } else {
                    cur += c;
                }
            }
            parts.push_back(cur);
            if (parts.size() != 5) throw std::runtime_error("scene record: bad object");
            SceneObject o;
            int shape = -1;
            for (int i = 0; i < kNumShapes; ++i)
                if (parts[0] == kShapeA[i]) shape = i;
            int color = -1;
            for (int c = 0; c < kNumColors; ++c)
                if (parts[1] == kPalette[c].name_a) color = c;
            if (shape < 0 || color < 0) throw std::runtime_error("scene record: bad attrs");
            o.shape = static_cast<Shape>(shape);
            o.color = color;
            o.cx = std::stoi(parts[2]);
            o.cy = std::stoi(parts[3]);
            o.size = std::stoi(parts[4]);
            s.objects.push_back(o);
        } else {
            throw std::runtime_error("scene record: unknown field " + tok);
        }
    }
    return s;
}

struct DatasetRow {
    std::string image_path;
    std::string caption_a, caption_b;
    std::string record;
};

// Renders n scenes and writes images plus a tab-separated manifest; only
// the language-A captions feed image-generation training, B is held out
// for cross-lingual evaluation.
inline std::vector<DatasetRow> gen_dataset(int n, RngStream& rng,
                                           const std::string& dir) {
    if (n < 1) throw std::runtime_error("gen_dataset: n must be >= 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("gen_dataset: cannot create " + dir);
    std::vector<DatasetRow> rows;
    std::ostringstream manifest;
    manifest << "# shapes-world dataset constants_hash=" << hex64(constants_hash())
             << "\n";
    for (int i = 0; i < n; ++i) {
        Scene s = gen_scene(rng);
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.ppm", i);
        const std::string path = dir + "/" + name;
        save_ppm(render(s), path);
        DatasetRow row{path, caption(s, "A"), caption(s, "B"), scene_record(s)};
        manifest << row.image_path << '\t' << row.caption_a << '\t' << row.caption_b
                 << '\t' << row.record << '\n';
        rows.push_back(std::move(row));
    }
    // The manifest is the dataset's commit point: written whole via a
    // temporary and renamed into place, so a failed run leaves no partial
    // manifest behind.
    const std::string mpath = dir + "/manifest.tsv";
    {
        std::ofstream f(mpath + ".tmp", std::ios::trunc);
        if (!f) throw std::runtime_error("gen_dataset: cannot write " + mpath);
        f << manifest.str();
        f.flush();
        if (!f) throw std::runtime_error("gen_dataset: write failed for " + mpath);
    }
    fs::rename(mpath + ".tmp", mpath, ec);
    if (ec) throw std::runtime_error("gen_dataset: cannot commit " + mpath);
    return rows;
}

inline std::vector<DatasetRow> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
    std::vector<DatasetRow> rows;
    std::string line;
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
        if (cols.size() != 4)
            throw std::runtime_error("load_manifest: bad row in " + path);
        rows.push_back({cols[0], cols[1], cols[2], cols[3]});
    }
    return rows;
}

// NLI manifest: premise, premise-language, hypothesis, hypothesis-language,
// label, one record per line.
inline void write_nli_manifest(const std::vector<NliPair>& pairs,
                               const std::string& path) {
    {
        std::ofstream f(path + ".tmp", std::ios::trunc);
        if (!f) throw std::runtime_error("write_nli_manifest: cannot write " + path);
        f << "# shapes-world nli constants_hash=" << hex64(constants_hash()) << "\n";
        for (const auto& p : pairs)
            f << p.premise << '\t' << p.premise_lang << '\t' << p.hypothesis << '\t'
              << p.hypothesis_lang << '\t' << nli_label_name(p.label) << '\n';
        f.flush();
        if (!f) throw std::runtime_error("write_nli_manifest: write failed for " + path);
    }
    std::error_code ec;
    std::filesystem::rename(path + ".tmp", path, ec);
    if (ec) throw std::runtime_error("write_nli_manifest: cannot commit " + path);
}

inline std::vector<NliPair> load_nli_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_nli_manifest: cannot open " + path);
    std::vector<NliPair> pairs;
    std::string line;
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
        if (cols.size() != 5)
            throw std::runtime_error("load_nli_manifest: bad row in " + path);
        NliPair p;
        p.premise = cols[0];
        p.premise_lang = cols[1];
        p.hypothesis = cols[2];
        p.hypothesis_lang = cols[3];
        p.label = nli_label_from(cols[4]);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace xfuse::world
