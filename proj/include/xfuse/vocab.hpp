#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "xfuse/world.hpp"

namespace xfuse {

// Word-level vocabulary over the two constructed languages plus reserved
// control tokens.  Content words of A and B occupy disjoint id ranges.
class Vocabulary {
  public:
    static constexpr int kBos = 0;
    static constexpr int kPad = 1;
    static constexpr int kNull = 2;  // reserved null-prompt marker

    struct Range {
        int lo, hi;  // [lo, hi)
    };

    // Builds the canonical vocabulary from the world constants.
    static Vocabulary standard() {
        Vocabulary v;
        v.push("<bos>");
        v.push("<pad>");
        v.push("<null>");
        v.a_.lo = v.size();
        v.push(world::kDetA);
        v.push(world::kAndA);
        for (const auto& c : world::kPalette) v.push(c.name_a);
        for (int s = 0; s < world::kNumShapes; ++s) v.push(world::kShapeA[s]);
        v.a_.hi = v.size();
        v.b_.lo = v.size();
        v.push(world::kDetB);
        v.push(world::kAndB);
        for (const auto& c : world::kPalette) v.push(c.name_b);
        for (int s = 0; s < world::kNumShapes; ++s) v.push(world::kShapeB[s]);
        v.b_.hi = v.size();
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int id(const std::string& tok) const {
        auto it = index_.find(tok);
        if (it == index_.end()) throw std::runtime_error("unknown token: " + tok);
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw std::runtime_error("token id out of range");
        return tokens_[static_cast<size_t>(id)];
    }

    Range range(const std::string& lang) const {
        if (lang == "A") return a_;
        if (lang == "B") return b_;
        throw std::runtime_error("unknown language '" + lang + "'");
    }

    bool in_language(int id, const std::string& lang) const {
        const Range r = range(lang);
        return id >= r.lo && id < r.hi;
    }

    // Strict word-level tokenizer; every word must belong to the given
    // language's content range.
    std::vector<int> tokenize(const std::string& text, const std::string& lang) const {
        const auto words = world::split_ws(text);
        if (words.empty()) throw std::runtime_error("tokenize: empty text");
        std::vector<int> ids;
        for (const auto& w : words) {
            auto it = index_.find(w);
            if (it == index_.end() || !in_language(it->second, lang))
                throw std::runtime_error("tokenize: unknown word '" + w +
                                         "' for language " + lang);
            ids.push_back(it->second);
        }
        return ids;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += token(ids[i]);
        }
        return out;
    }

    // One token per line, id = line number; sidecar manifest records the
    // language id ranges.
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw std::runtime_error("vocab: cannot write " + path);
        for (const auto& t : tokens_) f << t << '\n';
        std::ofstream m(path + ".ranges", std::ios::trunc);
        if (!m) throw std::runtime_error("vocab: cannot write " + path + ".ranges");
        m << "reserved 0 " << a_.lo << "\n";
        m << "A " << a_.lo << " " << a_.hi << "\n";
        m << "B " << b_.lo << " " << b_.hi << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("vocab: cannot open " + path);
        Vocabulary v;
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) v.push(line);
        std::ifstream m(path + ".ranges");
        if (!m) throw std::runtime_error("vocab: cannot open " + path + ".ranges");
        std::string tag;
        int lo, hi;
        while (m >> tag >> lo >> hi) {
            if (tag == "A") v.a_ = {lo, hi};
            if (tag == "B") v.b_ = {lo, hi};
        }
        return v;
    }

  private:
    void push(const std::string& t) {
        if (index_.count(t)) throw std::runtime_error("duplicate token: " + t);
        index_[t] = size();
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    Range a_{0, 0}, b_{0, 0};
};

}  // namespace xfuse
