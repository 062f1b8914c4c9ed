#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "xfuse/hash.hpp"
#include "xfuse/tensor.hpp"

namespace xfuse {

enum class GroupKind : uint8_t {
    base = 0,
    adapter = 1,
    bias = 2,
    image_prefix = 3,
    cross_attention = 4,
    other = 5,
};

inline constexpr int kNumGroupKinds = 6;

inline const char* kind_name(GroupKind k) {
    switch (k) {
        case GroupKind::base: return "base";
        case GroupKind::adapter: return "adapter";
        case GroupKind::bias: return "bias";
        case GroupKind::image_prefix: return "image-prefix";
        case GroupKind::cross_attention: return "cross-attention";
        case GroupKind::other: return "other";
    }
    return "?";
}

inline GroupKind kind_from_name(const std::string& s) {
    for (int i = 0; i < kNumGroupKinds; ++i)
        if (s == kind_name(static_cast<GroupKind>(i))) return static_cast<GroupKind>(i);
    throw std::runtime_error("unknown parameter group kind: " + s);
}

// One named tensor with a persistent gradient buffer; belongs to exactly
// one group.
struct Param {
    std::string name;
    GroupKind kind;
    Tensor value;
    Tensor grad;

    Param(std::string n, GroupKind k, Tensor v)
        : name(std::move(n)), kind(k), value(std::move(v)),
          grad(Tensor::zeros(value.shape)) {}
};

// Owns all model parameters.  Addresses are stable (the tape holds Param*),
// and trainability is a per-group flag: frozen groups never receive updates.
class ParamStore {
  public:
    Param& add(const std::string& name, GroupKind kind, Tensor init) {
        if (index_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
        params_.push_back(std::make_unique<Param>(name, kind, std::move(init)));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Param& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return *params_[it->second];
    }
    const Param& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return *params_[it->second];
    }

    std::vector<Param*> all() {
        std::vector<Param*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }
    std::vector<const Param*> all() const {
        std::vector<const Param*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    // Name-sorted members of one group (deterministic serialization order).
    std::vector<const Param*> group(GroupKind k) const {
        std::vector<const Param*> out;
        for (auto& p : params_)
            if (p->kind == k) out.push_back(p.get());
        std::sort(out.begin(), out.end(),
                  [](const Param* a, const Param* b) { return a->name < b->name; });
        return out;
    }
    std::vector<Param*> group(GroupKind k) {
        std::vector<Param*> out;
        for (auto& p : params_)
            if (p->kind == k) out.push_back(p.get());
        std::sort(out.begin(), out.end(),
                  [](const Param* a, const Param* b) { return a->name < b->name; });
        return out;
    }

    void set_trainable(const std::vector<GroupKind>& kinds) {
        trainable_.clear();
        for (auto k : kinds) trainable_.insert(k);
    }
    bool trainable(GroupKind k) const { return trainable_.count(k) != 0; }
    bool trainable(const Param& p) const { return trainable(p.kind); }
    std::vector<GroupKind> trainable_kinds() const {
        return std::vector<GroupKind>(trainable_.begin(), trainable_.end());
    }

    void zero_grad() {
        for (auto& p : params_)
            std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
    }

    int64_t scalar_count(GroupKind k) const {
        int64_t n = 0;
        for (auto& p : params_)
            if (p->kind == k) n += p->value.numel();
        return n;
    }
    int64_t scalar_count() const {
        int64_t n = 0;
        for (auto& p : params_) n += p->value.numel();
        return n;
    }

    // Bit-level checksum of one group's values; the freezing contracts are
    // asserted by comparing these before/after training.
    uint64_t group_checksum(GroupKind k) const {
        uint64_t h = kFnvOffset;
        for (const Param* p : group(k)) {
            h = fnv1a64(p->name.data(), p->name.size(), h);
            h = fnv1a64(p->value.v.data(), p->value.v.size() * sizeof(double), h);
        }
        return h;
    }

    std::map<std::string, uint64_t> all_checksums() const {
        std::map<std::string, uint64_t> out;
        for (int i = 0; i < kNumGroupKinds; ++i) {
            const auto k = static_cast<GroupKind>(i);
            if (!group(k).empty()) out[kind_name(k)] = group_checksum(k);
        }
        return out;
    }

  private:
    std::vector<std::unique_ptr<Param>> params_;
    std::unordered_map<std::string, size_t> index_;
    std::set<GroupKind> trainable_;
};

// ---- checkpoint container ----
//
// Layout (all integers little-endian):
//   "XFCK" | u32 version | u64 config_hash | str stage | u64 parent_hash
//   | u32 group_count | group section | u64 content_hash
// group section, per group: u8 kind | u8 trainable | u32 param_count
//   then per param: str name | u32 rank | i32 dims[] | u64 count | f64 values[]
// content_hash = fnv1a64 over the group section bytes, so the address names
// exactly the parameter content.

namespace detail {

inline void put_u32(std::string& b, uint32_t x) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& b, uint64_t x) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& b, double x) {
    uint64_t u;
    std::memcpy(&u, &x, 8);
    put_u64(b, u);
}
inline void put_str(std::string& b, const std::string& s) {
    put_u32(b, static_cast<uint32_t>(s.size()));
    b.append(s);
}

struct Reader {
    const std::string& b;
    size_t pos = 0;
    explicit Reader(const std::string& buf) : b(buf) {}
    void need(size_t n) const {
        if (pos + n > b.size()) throw std::runtime_error("checkpoint: truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t x = 0;
        for (int i = 0; i < 4; ++i)
            x |= static_cast<uint32_t>(static_cast<uint8_t>(b[pos + i])) << (8 * i);
        pos += 4;
        return x;
    }
    uint64_t u64() {
        need(8);
        uint64_t x = 0;
        for (int i = 0; i < 8; ++i)
            x |= static_cast<uint64_t>(static_cast<uint8_t>(b[pos + i])) << (8 * i);
        pos += 8;
        return x;
    }
    double f64() {
        uint64_t u = u64();
        double d;
        std::memcpy(&d, &u, 8);
        return d;
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(b[pos++]);
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s = b.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

struct CheckpointMeta {
    uint32_t version = 0;
    uint64_t config_hash = 0;
    std::string stage;
    uint64_t parent_hash = 0;
    uint64_t content_hash = 0;
    struct GroupInfo {
        GroupKind kind;
        bool trainable;
        std::vector<std::string> names;
        int64_t scalars = 0;
    };
    std::vector<GroupInfo> groups;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// Writes the store (optionally a subset of groups, e.g. a bias-only delta)
// and returns the content hash.
inline uint64_t save_checkpoint(const ParamStore& store, const std::string& path,
                                uint64_t config_hash, const std::string& stage,
                                uint64_t parent_hash,
                                const std::vector<GroupKind>* only = nullptr) {
    std::string groups_buf;
    uint32_t group_count = 0;
    for (int ki = 0; ki < kNumGroupKinds; ++ki) {
        const auto k = static_cast<GroupKind>(ki);
        if (only && std::find(only->begin(), only->end(), k) == only->end()) continue;
        auto members = store.group(k);
        if (members.empty()) continue;
        ++group_count;
        groups_buf.push_back(static_cast<char>(ki));
        groups_buf.push_back(store.trainable(k) ? 1 : 0);
        detail::put_u32(groups_buf, static_cast<uint32_t>(members.size()));
        for (const Param* p : members) {
            detail::put_str(groups_buf, p->name);
            detail::put_u32(groups_buf, static_cast<uint32_t>(p->value.rank()));
            for (int d = 0; d < p->value.rank(); ++d)
                detail::put_u32(groups_buf, static_cast<uint32_t>(p->value.dim(d)));
            detail::put_u64(groups_buf, static_cast<uint64_t>(p->value.numel()));
            for (double v : p->value.v) detail::put_f64(groups_buf, v);
        }
    }
    const uint64_t content = fnv1a64(groups_buf.data(), groups_buf.size());

    std::string out;
    out.append("XFCK");
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, config_hash);
    detail::put_str(out, stage);
    detail::put_u64(out, parent_hash);
    detail::put_u32(out, group_count);
    out.append(groups_buf);
    detail::put_u64(out, content);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
    return content;
}

namespace detail {

inline std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

// Shared parse; `store` may be null (metadata only).  partial=true loads a
// delta: only the params present in the file are touched.
inline CheckpointMeta parse_checkpoint(const std::string& buf, ParamStore* store,
                                       bool partial) {
    detail::Reader r(buf);
    r.need(4);
    if (buf.compare(0, 4, "XFCK") != 0)
        throw std::runtime_error("checkpoint: bad magic");
    r.pos = 4;
    CheckpointMeta meta;
    meta.version = r.u32();
    if (meta.version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version");
    meta.config_hash = r.u64();
    meta.stage = r.str();
    meta.parent_hash = r.u64();
    const uint32_t group_count = r.u32();
    const size_t groups_begin = r.pos;

    std::set<std::string> seen;
    for (uint32_t gi = 0; gi < group_count; ++gi) {
        CheckpointMeta::GroupInfo info;
        const uint8_t kind_raw = r.u8();
        if (kind_raw >= kNumGroupKinds)
            throw std::runtime_error("checkpoint: bad group kind");
        info.kind = static_cast<GroupKind>(kind_raw);
        info.trainable = r.u8() != 0;
        const uint32_t pc = r.u32();
        for (uint32_t pi = 0; pi < pc; ++pi) {
            std::string name = r.str();
            const uint32_t rank = r.u32();
            std::vector<int> shape(rank);
            for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
            const uint64_t count = r.u64();
            if (static_cast<int64_t>(count) != numel_of(shape))
                throw std::runtime_error("checkpoint: shape/count mismatch for '" + name + "'");
            info.names.push_back(name);
            info.scalars += static_cast<int64_t>(count);
            seen.insert(name);
            if (store) {
                if (!store->has(name))
                    throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
                Param& p = store->get(name);
                if (p.value.shape != shape)
                    throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
                if (p.kind != info.kind)
                    throw std::runtime_error("checkpoint: group mismatch for '" + name + "'");
                for (uint64_t i = 0; i < count; ++i) p.value.v[i] = r.f64();
            } else {
                r.need(count * 8);
                r.pos += count * 8;
            }
        }
        meta.groups.push_back(std::move(info));
    }
    const size_t groups_end = r.pos;
    meta.content_hash = r.u64();
    const uint64_t actual =
        fnv1a64(buf.data() + groups_begin, groups_end - groups_begin);
    if (actual != meta.content_hash)
        throw std::runtime_error("checkpoint: content hash mismatch");

    if (store && !partial) {
        for (const Param* p : store->all())
            if (!seen.count(p->name))
                throw std::runtime_error("checkpoint: missing parameter '" + p->name + "'");
    }
    return meta;
}

}  // namespace detail

inline CheckpointMeta load_checkpoint(ParamStore& store, const std::string& path,
                                      bool partial = false) {
    const std::string buf = detail::slurp(path);
    return detail::parse_checkpoint(buf, &store, partial);
}

inline CheckpointMeta read_checkpoint_meta(const std::string& path) {
    const std::string buf = detail::slurp(path);
    return detail::parse_checkpoint(buf, nullptr, true);
}

}  // namespace xfuse
