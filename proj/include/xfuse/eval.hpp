#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xfuse/encoder.hpp"
#include "xfuse/semantic.hpp"
#include "xfuse/world.hpp"

namespace xfuse {

// ---- multi-scale structural similarity ----

// Canonical five-scale exponents; renormalized over the scales feasible at
// the input resolution (smaller side >= 8 px per scale).
inline constexpr double kMsssimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr int kMsssimMinSide = 8;
inline constexpr double kSsimK1 = 0.01, kSsimK2 = 0.03;
inline constexpr double kSsimSigma = 1.5;

namespace detail {

inline Tensor to_gray(const Tensor& img) {
    if (img.rank() == 2) return img;
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::runtime_error("ms_ssim: image must be [3,H,W] or [H,W]");
    const int h = img.dim(1), w = img.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor g({h, w});
    for (int64_t i = 0; i < hw; ++i)
        g.v[i] = 0.299 * img.v[i] + 0.587 * img.v[hw + i] + 0.114 * img.v[2 * hw + i];
    return g;
}

inline std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> k(static_cast<size_t>(n));
    const double c = (n - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// means of the contrast-structure map and of the full similarity map
// (luminance times contrast-structure) at one scale, using a valid
// (no padding) separable Gaussian window
inline std::pair<double, double> ssim_terms(const Tensor& a, const Tensor& b) {
    const int h = a.dim(0), w = a.dim(1);
    int win = std::min(11, std::min(h, w));
    if (win % 2 == 0) --win;
    const auto k = gaussian_window(win, kSsimSigma);
    const int oh = h - win + 1, ow = w - win + 1;

    auto blur = [&](const Tensor& x) {
        Tensor tmp({h, ow});
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < ow; ++j) {
                double s = 0;
                for (int t = 0; t < win; ++t) s += k[static_cast<size_t>(t)] * x.at(i, j + t);
                tmp.at(i, j) = s;
            }
        Tensor out({oh, ow});
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                double s = 0;
                for (int t = 0; t < win; ++t) s += k[static_cast<size_t>(t)] * tmp.at(i + t, j);
                out.at(i, j) = s;
            }
        return out;
    };
    auto mul = [](const Tensor& x, const Tensor& y) {
        Tensor out(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i) out.v[i] = x.v[i] * y.v[i];
        return out;
    };

    const Tensor mu_a = blur(a), mu_b = blur(b);
    const Tensor saa = blur(mul(a, a)), sbb = blur(mul(b, b)), sab = blur(mul(a, b));
    const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
    double cs = 0, full = 0;
    for (int64_t i = 0; i < mu_a.numel(); ++i) {
        const double ma = mu_a.v[i], mb = mu_b.v[i];
        const double va = saa.v[i] - ma * ma, vb = sbb.v[i] - mb * mb;
        const double vab = sab.v[i] - ma * mb;
        const double l = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        const double c = (2 * vab + c2) / (va + vb + c2);
        cs += c;
        full += l * c;
    }
    cs /= static_cast<double>(mu_a.numel());
    full /= static_cast<double>(mu_a.numel());
    return {std::max(cs, 0.0), std::max(full, 0.0)};
}

inline Tensor downsample2(const Tensor& x) {
    const int h = x.dim(0) / 2, w = x.dim(1) / 2;
    Tensor out({h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            out.at(i, j) = 0.25 * (x.at(2 * i, 2 * j) + x.at(2 * i, 2 * j + 1) +
                                   x.at(2 * i + 1, 2 * j) + x.at(2 * i + 1, 2 * j + 1));
    return out;
}

}  // namespace detail

inline double ms_ssim(const Tensor& a_img, const Tensor& b_img) {
    Tensor a = detail::to_gray(a_img), b = detail::to_gray(b_img);
    if (a.shape != b.shape) throw std::runtime_error("ms_ssim: dimension mismatch");

    int feasible = 0;
    for (int s = 0, side = std::min(a.dim(0), a.dim(1)); s < 5 && side >= kMsssimMinSide;
         ++s, side /= 2)
        ++feasible;
    if (feasible == 0)
        throw std::runtime_error("ms_ssim: image smaller than one feasible scale");

    double wsum = 0;
    for (int s = 0; s < feasible; ++s) wsum += kMsssimWeights[s];

    double score = 1.0;
    for (int s = 0; s < feasible; ++s) {
        const auto [cs, full] = detail::ssim_terms(a, b);
        const double w = kMsssimWeights[s] / wsum;
        // contrast-structure at the fine scales, the full similarity
        // (with luminance) only at the coarsest one
        score *= std::pow(s == feasible - 1 ? full : cs, w);
        if (s + 1 < feasible) {
            a = detail::downsample2(a);
            b = detail::downsample2(b);
        }
    }
    return score;
}

// ---- composition oracle ----

// Nearest-palette quantization, connected components, and shape
// classification by fill ratio plus widest-row position (the triangle apex
// puts its widest row at the bottom, a disc's near the middle).  Components
// below the pixel floor are ignored.
inline constexpr double kOracleColorTol = 0.25;
inline constexpr int kOracleMinPixels = 20;

inline std::vector<world::AttrPair> detect_objects(const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::runtime_error("oracle: image must be [3,H,W]");
    const int h = img.dim(1), w = img.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;

    std::vector<int> label(static_cast<size_t>(hw), -1);
    for (int64_t i = 0; i < hw; ++i) {
        const double r = img.v[i], g = img.v[hw + i], b = img.v[2 * hw + i];
        int best = -1;
        double bd = kOracleColorTol * kOracleColorTol;
        for (int c = 0; c < world::kNumColors; ++c) {
            const auto& p = world::kPalette[c];
            const double d = (r - p.r) * (r - p.r) + (g - p.g) * (g - p.g) +
                             (b - p.b) * (b - p.b);
            if (d <= bd) {
                bd = d;
                best = c;
            }
        }
        label[static_cast<size_t>(i)] = best;
    }

    std::vector<world::AttrPair> found;
    std::vector<bool> seen(static_cast<size_t>(hw), false);
    std::vector<int64_t> stack;
    for (int64_t start = 0; start < hw; ++start) {
        if (seen[static_cast<size_t>(start)] || label[static_cast<size_t>(start)] < 0)
            continue;
        const int color = label[static_cast<size_t>(start)];
        stack.assign(1, start);
        seen[static_cast<size_t>(start)] = true;
        std::vector<int64_t> pix;
        while (!stack.empty()) {
            const int64_t p = stack.back();
            stack.pop_back();
            pix.push_back(p);
            const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
            const int64_t nb[4] = {p - w, p + w, p - 1, p + 1};
            const bool ok[4] = {y > 0, y + 1 < h, x > 0, x + 1 < w};
            for (int d = 0; d < 4; ++d) {
                if (!ok[d]) continue;
                const auto q = static_cast<size_t>(nb[d]);
                if (!seen[q] && label[q] == color) {
                    seen[q] = true;
                    stack.push_back(nb[d]);
                }
            }
        }
        if (static_cast<int>(pix.size()) < kOracleMinPixels) continue;

        int x0 = w, x1 = -1, y0 = h, y1 = -1;
        for (const int64_t p : pix) {
            const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
        const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
        const double fill =
            static_cast<double>(pix.size()) / (static_cast<double>(bw) * bh);

        world::Shape shape;
        if (fill >= 0.9) {
            shape = world::Shape::square;
        } else {
            std::vector<int> width(static_cast<size_t>(bh), 0);
            for (const int64_t p : pix)
                ++width[static_cast<size_t>(static_cast<int>(p / w) - y0)];
            int widest = 0;
            for (int i = 0; i < bh; ++i)
                if (width[static_cast<size_t>(i)] >= width[static_cast<size_t>(widest)])
                    widest = i;
            const double rel = bh == 1 ? 0.0 : static_cast<double>(widest) / (bh - 1);
            shape = rel >= 0.85 ? world::Shape::triangle : world::Shape::circle;
        }
        found.emplace_back(static_cast<int>(shape), color);
    }
    std::sort(found.begin(), found.end());
    return found;
}

// One evaluation row for a two-object expectation, with the benchmark's
// monotone containment (two-correct implies two implies one).
struct CompositionRow {
    bool one = false;         // at least one expected object, by shape
    bool one_color = false;   // at least one expected object with its color
    bool two = false;         // both expected objects, by shape
    bool two_color = false;   // both with correct colors
};

inline CompositionRow composition_oracle(const Tensor& img, const world::AttrPair& want1,
                                         const world::AttrPair& want2) {
    const std::vector<world::AttrPair> got = detect_objects(img);
    auto matched = [&](bool with_color) {
        std::vector<bool> used(got.size(), false);
        int n = 0;
        for (const world::AttrPair& want : {want1, want2})
            for (size_t i = 0; i < got.size(); ++i) {
                if (used[i]) continue;
                const bool ok = with_color ? got[i] == want
                                           : got[i].first == want.first;
                if (ok) {
                    used[i] = true;
                    ++n;
                    break;
                }
            }
        return n;
    };
    // greedy matching is exact here: distinct wants compete for a candidate
    // only when they are equal in the matched attributes, where any
    // assignment is equivalent
    const int by_shape = matched(false);
    const int by_both = matched(true);
    CompositionRow row;
    row.one = by_shape >= 1;
    row.one_color = by_both >= 1;
    row.two = by_shape == 2;
    row.two_color = by_both == 2;
    return row;
}

struct CompositionReport {
    int64_t n = 0, failures = 0;
    int64_t zero = 0, one = 0, one_color = 0, two = 0, two_color = 0;

    void add(const CompositionRow& r) {
        ++n;
        zero += r.one ? 0 : 1;
        one += r.one ? 1 : 0;
        one_color += r.one_color ? 1 : 0;
        two += r.two ? 1 : 0;
        two_color += r.two_color ? 1 : 0;
    }
    double rate(int64_t c) const { return n == 0 ? 0.0 : static_cast<double>(c) / n; }
};

// Aggregates oracle rows over instances x seeds; the sampler is any callable
// mapping (instance, seed) to an image.  Sampler failures are counted and
// excluded from the rates.
inline CompositionReport mcc_evaluate(
    const std::vector<world::MccInstance>& instances, const std::vector<uint64_t>& seeds,
    const std::function<Tensor(const world::MccInstance&, uint64_t)>& sampler) {
    CompositionReport rep;
    for (const auto& inst : instances)
        for (const uint64_t seed : seeds) {
            Tensor img;
            try {
                img = sampler(inst, seed);
            } catch (const std::exception&) {
                ++rep.failures;
                continue;
            }
            rep.add(composition_oracle(
                img, {static_cast<int>(inst.shape1), inst.color1},
                {static_cast<int>(inst.shape2), inst.color2}));
        }
    return rep;
}

// ---- cross-lingual alignment ----

struct PromptPair {
    std::string text_a, text_b;  // the same sentence in both languages
};

struct AlignmentReport {
    std::vector<double> cosines;  // one per prompt pair
    double mean = 0, stddev = 0;
};

inline AlignmentReport cosine_alignment(const Encoder& enc, EncoderMode mode,
                                        const std::vector<PromptPair>& prompts,
                                        const Vocabulary& vocab) {
    if (prompts.empty()) throw std::runtime_error("alignment: no prompts");
    AlignmentReport rep;
    for (const auto& p : prompts) {
        if (p.text_a.empty() || p.text_b.empty())
            throw std::runtime_error("alignment: missing translation for prompt '" +
                                     (p.text_a.empty() ? p.text_b : p.text_a) + "'");
        const auto ea = embed_sentence(enc, Prompt::text(p.text_a, "A", vocab), mode);
        const auto eb = embed_sentence(enc, Prompt::text(p.text_b, "B", vocab), mode);
        rep.cosines.push_back(cosine_val(ea.vec, eb.vec));
    }
    for (const double c : rep.cosines) rep.mean += c;
    rep.mean /= static_cast<double>(rep.cosines.size());
    for (const double c : rep.cosines)
        rep.stddev += (c - rep.mean) * (c - rep.mean);
    rep.stddev = std::sqrt(rep.stddev / static_cast<double>(rep.cosines.size()));
    return rep;
}

// ---- feature-space Frechet distance ----

struct FrechetResult {
    double value = 0;
    bool regularized = false;  // a near-singular covariance got +1e-6 I
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
// eigenvalues and fills V with column eigenvectors.
inline std::vector<double> jacobi_eigen(Tensor s, Tensor& V) {
    const int n = s.dim(0);
    V = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) V.at(i, i) = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += s.at(p, q) * s.at(p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = s.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (s.at(q, q) - s.at(p, p)) / (2 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1.0 / std::sqrt(t * t + 1), sn = t * c;
                for (int k = 0; k < n; ++k) {
                    const double skp = s.at(k, p), skq = s.at(k, q);
                    s.at(k, p) = c * skp - sn * skq;
                    s.at(k, q) = sn * skp + c * skq;
                }
                for (int k = 0; k < n; ++k) {
                    const double spk = s.at(p, k), sqk = s.at(q, k);
                    s.at(p, k) = c * spk - sn * sqk;
                    s.at(q, k) = sn * spk + c * sqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = V.at(k, p), vkq = V.at(k, q);
                    V.at(k, p) = c * vkp - sn * vkq;
                    V.at(k, q) = sn * vkp + c * vkq;
                }
            }
    }
    std::vector<double> eig(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = s.at(i, i);
    return eig;
}

// V diag(f(eig)) V^T
inline Tensor eigen_rebuild(const Tensor& V, const std::vector<double>& eig,
                            const std::function<double(double)>& f) {
    const int n = V.dim(0);
    Tensor out = Tensor::zeros({n, n});
    for (int k = 0; k < n; ++k) {
        const double fk = f(eig[static_cast<size_t>(k)]);
        if (fk == 0.0) continue;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) out.at(i, j) += fk * V.at(i, k) * V.at(j, k);
    }
    return out;
}

inline Tensor matmul_sq(const Tensor& a, const Tensor& b) {
    const int n = a.dim(0);
    Tensor out = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < n; ++j) out.at(i, j) += aik * b.at(k, j);
        }
    return out;
}

}  // namespace detail

// Frechet distance between Gaussian fits of two feature sets:
// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^1/2), computed through the
// symmetric form (B Sb B)^1/2 with B = Sa^1/2 and eigenvalues clamped at 0.
inline FrechetResult frechet_feature_distance(const std::vector<Tensor>& feats_a,
                                              const std::vector<Tensor>& feats_b) {
    if (feats_a.size() < 2 || feats_b.size() < 2)
        throw std::runtime_error("frechet: need at least 2 feature vectors per set");
    const int d = static_cast<int>(feats_a[0].numel());
    auto fit = [&](const std::vector<Tensor>& feats, Tensor& mu, Tensor& sigma) {
        mu = Tensor::zeros({d});
        for (const Tensor& f : feats) {
            if (f.numel() != d) throw std::runtime_error("frechet: feature width mismatch");
            for (int i = 0; i < d; ++i) mu.v[static_cast<size_t>(i)] += f.v[static_cast<size_t>(i)];
        }
        for (auto& v : mu.v) v /= static_cast<double>(feats.size());
        sigma = Tensor::zeros({d, d});
        for (const Tensor& f : feats)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j)
                    sigma.at(i, j) += (f.v[static_cast<size_t>(i)] - mu.v[static_cast<size_t>(i)]) *
                                      (f.v[static_cast<size_t>(j)] - mu.v[static_cast<size_t>(j)]);
        for (auto& v : sigma.v) v /= static_cast<double>(feats.size()) - 1.0;
    };
    Tensor mu_a, sig_a, mu_b, sig_b;
    fit(feats_a, mu_a, sig_a);
    fit(feats_b, mu_b, sig_b);

    FrechetResult res;
    auto min_eig = [&](const Tensor& s) {
        Tensor V;
        const auto eig = detail::jacobi_eigen(s, V);
        return *std::min_element(eig.begin(), eig.end());
    };
    if (min_eig(sig_a) < 1e-9 || min_eig(sig_b) < 1e-9) {
        res.regularized = true;
        for (int i = 0; i < d; ++i) {
            sig_a.at(i, i) += 1e-6;
            sig_b.at(i, i) += 1e-6;
        }
    }

    double dist = 0;
    for (int i = 0; i < d; ++i) {
        const double dm = mu_a.v[static_cast<size_t>(i)] - mu_b.v[static_cast<size_t>(i)];
        dist += dm * dm;
        dist += sig_a.at(i, i) + sig_b.at(i, i);
    }
    Tensor Va;
    const auto eig_a = detail::jacobi_eigen(sig_a, Va);
    const Tensor root_a = detail::eigen_rebuild(
        Va, eig_a, [](double x) { return std::sqrt(std::max(x, 0.0)); });
    const Tensor inner = detail::matmul_sq(detail::matmul_sq(root_a, sig_b), root_a);
    Tensor Vi;
    const auto eig_i = detail::jacobi_eigen(inner, Vi);
    for (const double e : eig_i) dist -= 2.0 * std::sqrt(std::max(e, 0.0));
    res.value = std::max(dist, 0.0);
    return res;
}

// Pooled features of the encoder's visual prefix, the extractor behind the
// desk-scale Frechet metric.
inline Tensor prefix_features(const Encoder& enc, const Tensor& img) {
    const Tensor rows = enc.prefix(img);
    const int n = rows.rows(), d = rows.cols();
    Tensor out = Tensor::zeros({d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.v[static_cast<size_t>(j)] += rows.at(i, j);
    for (auto& v : out.v) v /= static_cast<double>(n);
    return out;
}

// ---- image-variation check ----

struct VariationEntry {
    uint64_t seed = 0;
    double msssim = 0;
    bool scene_match = false;
    bool copy = false;  // MS-SSIM >= 0.99: a trivial reproduction
};

struct VariationReport {
    std::vector<VariationEntry> entries;
    int64_t meaningful = 0;  // scene matched and not a copy

    double meaningful_rate() const {
        return entries.empty() ? 0.0
                               : static_cast<double>(meaningful) / entries.size();
    }
};

inline VariationReport variation_check(
    const Tensor& input, const world::Scene& scene, const std::vector<uint64_t>& seeds,
    const std::function<Tensor(uint64_t)>& sampler) {
    const std::vector<world::AttrPair> want = world::multiset_of(scene);
    VariationReport rep;
    for (const uint64_t seed : seeds) {
        const Tensor out = sampler(seed);
        VariationEntry e;
        e.seed = seed;
        e.msssim = ms_ssim(input, out);
        e.copy = e.msssim >= 0.99;
        e.scene_match = detect_objects(out) == want;
        if (e.scene_match && !e.copy) ++rep.meaningful;
        rep.entries.push_back(e);
    }
    return rep;
}

}  // namespace xfuse
