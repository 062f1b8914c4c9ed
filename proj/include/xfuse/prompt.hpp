#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/image.hpp"
#include "xfuse/tensor.hpp"
#include "xfuse/vocab.hpp"

namespace xfuse {

// One run of a mixed-modality prompt: either a tokenized text span or a raw
// image raster destined for the visual prefix.
struct PromptSegment {
    enum class Kind { text, image };
    Kind kind = Kind::text;
    std::vector<int> ids;   // text
    std::string lang;       // text: "A" or "B" ("-" for reserved-only spans)
    Tensor image;           // image: [3, s, s] in [0, 1]
    std::string image_path; // image: provenance, kept for run records
};

struct Prompt {
    std::vector<PromptSegment> segments;

    bool has_image() const {
        for (const auto& s : segments)
            if (s.kind == PromptSegment::Kind::image) return true;
        return false;
    }

    // Row count after flattening: text contributes one row per token, each
    // image contributes g*g prefix rows.
    int flat_len(int g) const {
        int n = 0;
        for (const auto& s : segments)
            n += s.kind == PromptSegment::Kind::text ? static_cast<int>(s.ids.size())
                                                     : g * g;
        return n;
    }

    static Prompt text(const std::string& s, const std::string& lang,
                       const Vocabulary& vocab) {
        Prompt p;
        PromptSegment seg;
        seg.ids = vocab.tokenize(s, lang);
        seg.lang = lang;
        p.segments.push_back(seg);
        return p;
    }

    static Prompt from_ids(std::vector<int> ids, const std::string& lang) {
        Prompt p;
        PromptSegment seg;
        seg.ids = std::move(ids);
        seg.lang = lang;
        p.segments.push_back(seg);
        return p;
    }

    // Unconditional context: the single begin-of-sequence token.
    static Prompt null_prompt() { return from_ids({Vocabulary::kBos}, "-"); }
};

// Parses the CLI prompt literal: text runs interleaved with <img:PATH>
// placeholders, an optional trailing @A/@B language tag (default A), and
// optional inline <lang:A>/<lang:B> switches for mixed-language runs.
inline Prompt parse_prompt_literal(std::string literal, const Vocabulary& vocab) {
    std::string lang = "A";
    if (literal.size() >= 2 && literal[literal.size() - 2] == '@') {
        lang = literal.substr(literal.size() - 1);
        if (lang != "A" && lang != "B")
            throw std::runtime_error("prompt: unknown language tag '@" + lang + "'");
        literal.resize(literal.size() - 2);
    }
    Prompt p;
    std::string cur;
    auto flush_text = [&]() {
        if (world::split_ws(cur).empty()) {
            cur.clear();
            return;
        }
        PromptSegment seg;
        seg.ids = vocab.tokenize(cur, lang);
        seg.lang = lang;
        p.segments.push_back(seg);
        cur.clear();
    };
    size_t i = 0;
    while (i < literal.size()) {
        if (literal[i] == '<') {
            size_t close = literal.find('>', i);
            if (close == std::string::npos)
                throw std::runtime_error("prompt: unterminated '<' directive");
            std::string body = literal.substr(i + 1, close - i - 1);
            if (body.rfind("img:", 0) == 0) {
                flush_text();
                PromptSegment seg;
                seg.kind = PromptSegment::Kind::image;
                seg.image_path = body.substr(4);
                if (seg.image_path.empty())
                    throw std::runtime_error("prompt: empty image path");
                seg.image = load_ppm(seg.image_path);
                p.segments.push_back(seg);
            } else if (body.rfind("lang:", 0) == 0) {
                flush_text();
                lang = body.substr(5);
                if (lang != "A" && lang != "B")
                    throw std::runtime_error("prompt: unknown language '" + lang + "'");
            } else {
                throw std::runtime_error("prompt: unknown directive <" + body + ">");
            }
            i = close + 1;
        } else {
            cur += literal[i++];
        }
    }
    flush_text();
    if (p.segments.empty()) throw std::runtime_error("prompt: empty prompt literal");
    return p;
}

}  // namespace xfuse
