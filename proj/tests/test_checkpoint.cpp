#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

#include "xfuse/params.hpp"
#include "xfuse/rng.hpp"

using xfuse::GroupKind;
using xfuse::load_checkpoint;
using xfuse::ParamStore;
using xfuse::read_checkpoint_meta;
using xfuse::save_checkpoint;
using xfuse::Tensor;

namespace {

std::string tmppath(const std::string& name) {
    return std::string(::testing::TempDir()) + name;
}

void build_store(ParamStore& s, uint64_t seed) {
    xfuse::RngStream rng(seed, "ckpt");
    s.add("emb", GroupKind::base, Tensor::randn({6, 4}, rng));
    s.add("adapter.down", GroupKind::adapter, Tensor::randn({4, 2}, rng));
    s.add("bias.q", GroupKind::bias, Tensor::randn({4}, rng));
}

}  // namespace

TEST(Checkpoint, BitExactRoundTrip) {
    ParamStore a;
    build_store(a, 1);
    a.set_trainable({GroupKind::adapter});
    const std::string path = tmppath("rt.ckpt");
    const uint64_t h = save_checkpoint(a, path, 0xC0FFEE, "lm", 0);

    ParamStore b;
    build_store(b, 2);  // different values, same structure
    auto meta = load_checkpoint(b, path);
    EXPECT_EQ(meta.content_hash, h);
    EXPECT_EQ(meta.config_hash, 0xC0FFEEu);
    EXPECT_EQ(meta.stage, "lm");
    EXPECT_EQ(meta.parent_hash, 0u);
    for (const auto* p : a.all()) {
        const auto& q = b.get(p->name);
        for (int64_t i = 0; i < p->value.numel(); ++i)
            ASSERT_EQ(p->value.v[i], q.value.v[i]);
    }
    EXPECT_EQ(a.group_checksum(GroupKind::base), b.group_checksum(GroupKind::base));
}

TEST(Checkpoint, ContentHashNamesContent) {
    ParamStore a;
    build_store(a, 1);
    const std::string p1 = tmppath("h1.ckpt"), p2 = tmppath("h2.ckpt"),
                      p3 = tmppath("h3.ckpt");
    const uint64_t h1 = save_checkpoint(a, p1, 1, "lm", 0);
    // different stage/config metadata, identical params -> same content hash
    const uint64_t h2 = save_checkpoint(a, p2, 99, "multimodal", 123);
    EXPECT_EQ(h1, h2);
    a.get("emb").value.v[0] += 1e-9;
    const uint64_t h3 = save_checkpoint(a, p3, 1, "lm", 0);
    EXPECT_NE(h1, h3);
}

TEST(Checkpoint, BiasDeltaReferencesParent) {
    ParamStore a;
    build_store(a, 1);
    const std::string base = tmppath("base.ckpt"), delta = tmppath("delta.ckpt");
    const uint64_t parent = save_checkpoint(a, base, 7, "multimodal", 0);

    a.get("bias.q").value.v[0] = 42.0;
    std::vector<GroupKind> only = {GroupKind::bias};
    save_checkpoint(a, delta, 7, "semantic", parent, &only);

    auto meta = read_checkpoint_meta(delta);
    EXPECT_EQ(meta.parent_hash, parent);
    ASSERT_EQ(meta.groups.size(), 1u);
    EXPECT_EQ(meta.groups[0].kind, GroupKind::bias);
    ASSERT_EQ(meta.groups[0].names.size(), 1u);
    EXPECT_EQ(meta.groups[0].names[0], "bias.q");

    // partial load restores only the bias group
    ParamStore b;
    build_store(b, 3);
    const Tensor emb_before = b.get("emb").value;
    load_checkpoint(b, delta, /*partial=*/true);
    EXPECT_EQ(b.get("bias.q").value.v[0], 42.0);
    for (int64_t i = 0; i < emb_before.numel(); ++i)
        ASSERT_EQ(b.get("emb").value.v[i], emb_before.v[i]);
}

TEST(Checkpoint, FullLoadRequiresEveryParameter) {
    ParamStore a;
    build_store(a, 1);
    const std::string path = tmppath("partial.ckpt");
    std::vector<GroupKind> only = {GroupKind::bias};
    save_checkpoint(a, path, 1, "semantic", 0, &only);
    ParamStore b;
    build_store(b, 2);
    try {
        load_checkpoint(b, path, /*partial=*/false);
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("missing parameter"), std::string::npos);
    }
}

TEST(Checkpoint, UnknownParameterRejected) {
    ParamStore a;
    build_store(a, 1);
    const std::string path = tmppath("unknown.ckpt");
    save_checkpoint(a, path, 1, "lm", 0);
    ParamStore b;  // lacks the saved names entirely
    b.add("different", GroupKind::base, Tensor::scalar(0.0));
    try {
        load_checkpoint(b, path, true);
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("unknown parameter"), std::string::npos);
    }
}

TEST(Checkpoint, ShapeMismatchRejected) {
    ParamStore a;
    build_store(a, 1);
    const std::string path = tmppath("shape.ckpt");
    save_checkpoint(a, path, 1, "lm", 0);
    ParamStore b;
    xfuse::RngStream rng(5, "alt");
    b.add("emb", GroupKind::base, Tensor::randn({6, 5}, rng));  // wrong width
    b.add("adapter.down", GroupKind::adapter, Tensor::randn({4, 2}, rng));
    b.add("bias.q", GroupKind::bias, Tensor::randn({4}, rng));
    try {
        load_checkpoint(b, path);
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
    }
}

TEST(Checkpoint, CorruptionDetected) {
    ParamStore a;
    build_store(a, 1);
    const std::string path = tmppath("corrupt.ckpt");
    save_checkpoint(a, path, 1, "lm", 0);

    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    buf[buf.size() / 2] ^= 0x40;  // flip a bit inside the group section
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.close();

    ParamStore b;
    build_store(b, 2);
    try {
        load_checkpoint(b, path);
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        const std::string what = e.what();
        EXPECT_TRUE(what.find("hash mismatch") != std::string::npos ||
                    what.find("checkpoint:") != std::string::npos)
            << what;
    }
}

TEST(Checkpoint, BadMagicAndTruncation) {
    const std::string path = tmppath("magic.ckpt");
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "NOPE this is not a checkpoint";
    }
    ParamStore b;
    build_store(b, 1);
    try {
        load_checkpoint(b, path);
        FAIL() << "expected throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
    }

    // valid prefix, chopped off: truncation error
    ParamStore a;
    build_store(a, 1);
    const std::string full = tmppath("full.ckpt");
    save_checkpoint(a, full, 1, "lm", 0);
    std::ifstream in(full, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    buf.resize(buf.size() / 2);
    const std::string cut = tmppath("cut.ckpt");
    std::ofstream out(cut, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.close();
    EXPECT_THROW(load_checkpoint(b, cut), std::runtime_error);
}

TEST(ParamStore, DuplicateAndUnknownNames) {
    ParamStore s;
    s.add("x", GroupKind::base, Tensor::scalar(1.0));
    EXPECT_THROW(s.add("x", GroupKind::bias, Tensor::scalar(2.0)), std::runtime_error);
    EXPECT_THROW(s.get("y"), std::runtime_error);
    EXPECT_TRUE(s.has("x"));
    EXPECT_FALSE(s.has("y"));
}

TEST(ParamStore, ChecksumsPerGroup) {
    ParamStore s;
    build_store(s, 1);
    auto a = s.all_checksums();
    EXPECT_EQ(a.size(), 3u);
    const uint64_t bias_before = s.group_checksum(GroupKind::bias);
    s.get("bias.q").value.v[2] += 1.0;
    EXPECT_NE(s.group_checksum(GroupKind::bias), bias_before);
    EXPECT_EQ(s.group_checksum(GroupKind::base), a.at("base"));
}
