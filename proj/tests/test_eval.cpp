#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/eval.hpp"
#include "xfuse/world.hpp"

using namespace xfuse;
using namespace xfuse::world;

namespace {

Tensor random_image(int side, uint64_t seed) {
    RngStream r(seed, "img");
    Tensor t({3, side, side});
    for (auto& v : t.v) v = r.uniform();
    return t;
}

// Straightforward single-scale SSIM written independently of the library:
// explicit 2D Gaussian window, mean of the per-position similarity map.
double reference_ssim(const Tensor& a_img, const Tensor& b_img) {
    auto gray = [](const Tensor& img) {
        const int h = img.dim(1), w = img.dim(2);
        const int64_t hw = static_cast<int64_t>(h) * w;
        Tensor g({h, w});
        for (int64_t i = 0; i < hw; ++i)
            g.v[i] = 0.299 * img.v[i] + 0.587 * img.v[hw + i] + 0.114 * img.v[2 * hw + i];
        return g;
    };
    const Tensor a = gray(a_img), b = gray(b_img);
    const int h = a.dim(0), w = a.dim(1);
    int win = std::min(11, std::min(h, w));
    if (win % 2 == 0) --win;
    std::vector<double> k2(static_cast<size_t>(win) * win);
    const double c = (win - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
            k2[static_cast<size_t>(i * win + j)] = std::exp(-d2 / (2 * 1.5 * 1.5));
            sum += k2[static_cast<size_t>(i * win + j)];
        }
    for (auto& v : k2) v /= sum;

    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0;
    int count = 0;
    for (int y = 0; y + win <= h; ++y)
        for (int x = 0; x + win <= w; ++x) {
            double ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const double wij = k2[static_cast<size_t>(i * win + j)];
                    const double av = a.at(y + i, x + j), bv = b.at(y + i, x + j);
                    ma += wij * av;
                    mb += wij * bv;
                    aa += wij * av * av;
                    bb += wij * bv * bv;
                    ab += wij * av * bv;
                }
            const double va = aa - ma * ma, vb = bb - mb * mb, vab = ab - ma * mb;
            total += ((2 * ma * mb + c1) / (ma * ma + mb * mb + c1)) *
                     ((2 * vab + c2) / (va + vb + c2));
            ++count;
        }
    return total / count;
}

TEST(MsSsim, SelfSimilarityIsOne) {
    RngStream rng(1, "scenes");
    const Tensor img = render(gen_scene(rng, 2));
    EXPECT_NEAR(ms_ssim(img, img), 1.0, 1e-9);
    const Tensor noise = random_image(32, 2);
    EXPECT_NEAR(ms_ssim(noise, noise), 1.0, 1e-9);
}

TEST(MsSsim, InvertedBinaryImageScoresLow) {
    // block checkerboard, strictly 0/1 pixels
    Tensor img({3, 32, 32});
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                img.v[static_cast<size_t>((ch * 32 + y) * 32 + x)] =
                    ((y / 8 + x / 8) % 2 == 0) ? 1.0 : 0.0;
    Tensor inv(img.shape);
    for (int64_t i = 0; i < img.numel(); ++i) inv.v[i] = 1.0 - img.v[i];
    EXPECT_LT(ms_ssim(img, inv), 0.2);
}

TEST(MsSsim, SymmetricOnRandomPairs) {
    for (int i = 0; i < 100; ++i) {
        const Tensor a = random_image(i % 2 == 0 ? 32 : 16, 100 + i);
        const Tensor b = random_image(i % 2 == 0 ? 32 : 16, 200 + i);
        EXPECT_NEAR(ms_ssim(a, b), ms_ssim(b, a), 1e-12);
    }
}

TEST(MsSsim, ValuesStayInUnitInterval) {
    for (int i = 0; i < 20; ++i) {
        const double v = ms_ssim(random_image(32, 300 + i), random_image(32, 400 + i));
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(MsSsim, SingleFeasibleScaleEqualsPlainSsim) {
    // Correlated pairs keep plain SSIM positive, where the two metrics agree
    // exactly; independent noise can push SSIM negative, which the bounded
    // score maps to zero (checked below).
    for (int side : {8, 12, 15}) {
        const Tensor a = random_image(side, 500 + side);
        Tensor b = a;
        RngStream r(600 + static_cast<uint64_t>(side), "jitter");
        for (auto& v : b.v) v = std::clamp(v + 0.1 * (r.uniform() - 0.5), 0.0, 1.0);
        const double ref = reference_ssim(a, b);
        ASSERT_GT(ref, 0.0) << side;
        EXPECT_NEAR(ms_ssim(a, b), ref, 1e-12) << side;
    }
    // Negative plain SSIM clamps to the floor of the unit interval.
    const Tensor a = random_image(8, 508);
    const Tensor b = random_image(8, 608);
    ASSERT_LT(reference_ssim(a, b), 0.0);
    EXPECT_EQ(ms_ssim(a, b), 0.0);
}

TEST(MsSsim, Errors) {
    EXPECT_THROW(ms_ssim(random_image(32, 1), random_image(16, 2)), std::runtime_error);
    EXPECT_THROW(ms_ssim(random_image(7, 1), random_image(7, 2)), std::runtime_error);
}

// ---- composition oracle ----

TEST(Oracle, InvertsTheRendererOnGeneratedScenes) {
    RngStream rng(42, "oracle-soundness");
    for (int i = 0; i < 1000; ++i) {
        const Scene s = gen_scene(rng);
        EXPECT_EQ(detect_objects(render(s)), multiset_of(s)) << "scene " << i;
    }
}

TEST(Oracle, CompositionRowsOnConstructedScenes) {
    Scene s;
    s.objects.push_back({Shape::square, 1, 8, 8, 10});     // red square
    s.objects.push_back({Shape::circle, 3, 24, 24, 10});   // blue circle
    const AttrPair want1{static_cast<int>(Shape::square), 1};
    const AttrPair want2{static_cast<int>(Shape::circle), 3};

    const CompositionRow full = composition_oracle(render(s), want1, want2);
    EXPECT_TRUE(full.one && full.one_color && full.two && full.two_color);

    Scene flipped = s;
    flipped.objects[0].color = 4;  // wrong color, right shape
    const CompositionRow one_color = composition_oracle(render(flipped), want1, want2);
    EXPECT_TRUE(one_color.one);
    EXPECT_TRUE(one_color.one_color);
    EXPECT_TRUE(one_color.two);
    EXPECT_FALSE(one_color.two_color);

    Scene missing;
    missing.objects.push_back(s.objects[0]);
    const CompositionRow one_obj = composition_oracle(render(missing), want1, want2);
    EXPECT_TRUE(one_obj.one && one_obj.one_color);
    EXPECT_FALSE(one_obj.two || one_obj.two_color);

    Tensor gray({3, 32, 32});
    std::fill(gray.v.begin(), gray.v.end(), kBackground);
    const CompositionRow empty = composition_oracle(gray, want1, want2);
    EXPECT_FALSE(empty.one || empty.one_color || empty.two || empty.two_color);
}

TEST(Oracle, UniformNoiseYieldsZeroObjects) {
    int zero_rows = 0;
    for (int i = 0; i < 100; ++i)
        if (detect_objects(random_image(32, 1000 + i)).empty()) ++zero_rows;
    EXPECT_GE(zero_rows, 99);
}

Scene mcc_scene(const MccInstance& m) {
    Scene s;
    s.objects.push_back({m.shape1, m.color1, 8, 16, 10});
    s.objects.push_back({m.shape2, m.color2, 24, 16, 10});
    return s;
}

TEST(Oracle, MccEvaluateCalibration) {
    RngStream rng(5, "mcc");
    std::vector<MccInstance> instances;
    for (int i = 0; i < 10; ++i) instances.push_back(gen_mcc_instance(rng));
    const std::vector<uint64_t> seeds = {1, 2, 3};

    // a perfect generator scores 100% on the strictest column
    const CompositionReport perfect = mcc_evaluate(
        instances, seeds,
        [](const MccInstance& m, uint64_t) { return render(mcc_scene(m)); });
    EXPECT_EQ(perfect.n, 30);
    EXPECT_EQ(perfect.failures, 0);
    EXPECT_DOUBLE_EQ(perfect.rate(perfect.two_color), 1.0);
    EXPECT_DOUBLE_EQ(perfect.rate(perfect.one), 1.0);

    // failures are counted separately and excluded from the rates
    int calls = 0;
    const CompositionReport flaky = mcc_evaluate(
        instances, seeds, [&](const MccInstance& m, uint64_t) {
            if (++calls % 5 == 0) throw std::runtime_error("sampler exploded");
            return render(mcc_scene(m));
        });
    EXPECT_EQ(flaky.failures, 6);
    EXPECT_EQ(flaky.n, 24);
    EXPECT_DOUBLE_EQ(flaky.rate(flaky.two_color), 1.0);

    // containment of the five columns holds on arbitrary rows
    const CompositionReport noise = mcc_evaluate(
        instances, seeds,
        [](const MccInstance&, uint64_t seed) { return random_image(32, seed); });
    EXPECT_LE(noise.two_color, noise.two);
    EXPECT_LE(noise.two, noise.one);
    EXPECT_LE(noise.one_color, noise.one);
    EXPECT_EQ(noise.zero + noise.one, noise.n);
}

// ---- alignment report ----

TEST(Alignment, ReportArithmeticAndErrors) {
    Vocabulary vocab = Vocabulary::standard();
    EncoderConfig ec;
    ec.layers = 1;
    ec.d_model = 8;
    ec.heads = 2;
    ec.vocab_size = vocab.size();
    ec.adapter_factor = 4;
    ec.grid = 2;
    ec.max_len = 16;
    ec.mlp_mult = 2;
    ec.prefix_c1 = 2;
    ec.prefix_c2 = 2;
    ParamStore store;
    RngStream rng(9, "enc");
    Encoder enc(ec, store, rng);

    RngStream scenes(77, "scenes");
    std::vector<PromptPair> prompts;
    for (int i = 0; i < 5; ++i) {
        const Scene s = gen_scene(scenes, 1);
        prompts.push_back({caption(s, "A"), caption(s, "B")});
    }
    const AlignmentReport rep =
        cosine_alignment(enc, EncoderMode::semantic, prompts, vocab);
    ASSERT_EQ(rep.cosines.size(), 5u);
    double mean = 0;
    for (const double c : rep.cosines) {
        EXPECT_GE(c, -1.0);
        EXPECT_LE(c, 1.0);
        mean += c;
    }
    mean /= 5;
    EXPECT_NEAR(rep.mean, mean, 1e-12);
    double var = 0;
    for (const double c : rep.cosines) var += (c - mean) * (c - mean);
    EXPECT_NEAR(rep.stddev, std::sqrt(var / 5), 1e-12);

    try {
        cosine_alignment(enc, EncoderMode::semantic,
                         {{"a red square", ""}}, vocab);
        FAIL() << "expected missing translation error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("a red square"), std::string::npos);
    }
    EXPECT_THROW(cosine_alignment(enc, EncoderMode::semantic, {}, vocab),
                 std::runtime_error);
}

// ---- Frechet feature distance ----

std::vector<Tensor> feature_cloud(int n, int d, uint64_t seed, double shift = 0.0) {
    RngStream r(seed, "feat");
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) {
        Tensor f({d});
        for (auto& v : f.v) v = r.normal() + shift;
        out.push_back(std::move(f));
    }
    return out;
}

TEST(Frechet, IdenticalSetsScoreZero) {
    const auto a = feature_cloud(12, 4, 3);
    const FrechetResult r = frechet_feature_distance(a, a);
    EXPECT_NEAR(r.value, 0.0, 1e-6);
}

TEST(Frechet, PointMassClosedForm) {
    Tensor mu({3});
    mu.v = {0.2, -1.0, 0.7};
    Tensor shifted({3});
    shifted.v = {0.2 + 0.3, -1.0 - 0.4, 0.7 + 1.2};
    const std::vector<Tensor> a = {mu, mu};
    const std::vector<Tensor> b = {shifted, shifted};
    const FrechetResult r = frechet_feature_distance(a, b);
    EXPECT_TRUE(r.regularized);  // zero covariance needed the diagonal bump
    const double want = 0.3 * 0.3 + 0.4 * 0.4 + 1.2 * 1.2;
    EXPECT_NEAR(r.value, want, 1e-6);
}

TEST(Frechet, SymmetricAndNonnegative) {
    const auto a = feature_cloud(10, 4, 5);
    const auto b = feature_cloud(14, 4, 6, 0.8);
    const FrechetResult ab = frechet_feature_distance(a, b);
    const FrechetResult ba = frechet_feature_distance(b, a);
    EXPECT_NEAR(ab.value, ba.value, 1e-6);
    EXPECT_GE(ab.value, 0.0);
    EXPECT_GT(ab.value, 0.1);  // the shifted cloud is genuinely far
}

TEST(Frechet, Errors) {
    const auto a = feature_cloud(2, 3, 1);
    EXPECT_THROW(frechet_feature_distance(a, feature_cloud(1, 3, 2)),
                 std::runtime_error);
    EXPECT_THROW(frechet_feature_distance(a, feature_cloud(4, 5, 3)),
                 std::runtime_error);
}

// ---- variation check ----

TEST(Variation, CalibrationStubs) {
    RngStream rng(8, "var");
    const Scene s = gen_scene(rng, 2);
    const Tensor input = render(s);
    const std::vector<uint64_t> seeds = {10, 11, 12, 13};

    const VariationReport copies =
        variation_check(input, s, seeds, [&](uint64_t) { return input; });
    ASSERT_EQ(copies.entries.size(), 4u);
    for (const auto& e : copies.entries) {
        EXPECT_TRUE(e.copy);
        EXPECT_TRUE(e.scene_match);
        EXPECT_GE(e.msssim, 0.99);
    }
    EXPECT_EQ(copies.meaningful, 0);

    const VariationReport noise = variation_check(
        input, s, seeds, [&](uint64_t seed) { return random_image(32, seed); });
    for (const auto& e : noise.entries) EXPECT_FALSE(e.scene_match);
    EXPECT_EQ(noise.meaningful, 0);

    // same multiset elsewhere on the canvas: a meaningful variation
    Scene moved = s;
    for (size_t i = 0; i < moved.objects.size(); ++i) {
        auto& o = moved.objects[i];
        o.cx = 8 + static_cast<int>(i) * 14;
        o.cy = 22;
        o.size = 9;
    }
    validate_scene(moved);
    const Tensor moved_img = render(moved);
    const VariationReport vars =
        variation_check(input, s, seeds, [&](uint64_t) { return moved_img; });
    for (const auto& e : vars.entries) {
        EXPECT_TRUE(e.scene_match);
        EXPECT_FALSE(e.copy);
    }
    EXPECT_EQ(vars.meaningful, 4);
}

}  // namespace
