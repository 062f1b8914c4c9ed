#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "xfuse/graph.hpp"
#include "xfuse/params.hpp"

namespace xfuse {

namespace detail {

// Contract guard shared by the optimizers: the group list must be trainable
// in the store, and non-finite gradients abort before any state mutates.
inline std::vector<Param*> optim_collect(ParamStore& store,
                                         const std::vector<GroupKind>& groups) {
    for (GroupKind k : groups)
        if (!store.trainable(k))
            throw std::runtime_error(std::string("frozen group included in optimizer step: ") +
                                     kind_name(k));
    std::vector<Param*> out;
    for (Param* p : store.all()) {
        bool in = false;
        for (GroupKind k : groups) in = in || (p->kind == k);
        if (!in) continue;
        for (double gv : p->grad.v)
            if (!std::isfinite(gv)) throw std::runtime_error("diverged");
        out.push_back(p);
    }
    return out;
}

}  // namespace detail

struct SgdConfig {
    double lr = 0.1;
};

class Sgd {
  public:
    Sgd(SgdConfig cfg, std::vector<GroupKind> groups)
        : cfg_(cfg), groups_(std::move(groups)) {}

    void step(ParamStore& store) {
        auto params = detail::optim_collect(store, groups_);
        for (Param* p : params)
            for (int64_t i = 0; i < p->value.numel(); ++i)
                p->value.v[i] -= cfg_.lr * p->grad.v[i];
        ++t_;
    }

    int64_t steps() const { return t_; }

  private:
    SgdConfig cfg_;
    std::vector<GroupKind> groups_;
    int64_t t_ = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
  public:
    Adam(AdamConfig cfg, std::vector<GroupKind> groups)
        : cfg_(cfg), groups_(std::move(groups)) {}

    void step(ParamStore& store) {
        auto params = detail::optim_collect(store, groups_);
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (Param* p : params) {
            Tensor& m = moment(m_, *p);
            Tensor& v = moment(v_, *p);
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                const double gv = p->grad.v[i];
                m.v[i] = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * gv;
                v.v[i] = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * gv * gv;
                const double mh = m.v[i] / bc1;
                const double vh = v.v[i] / bc2;
                p->value.v[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }

    int64_t steps() const { return t_; }

  private:
    Tensor& moment(std::unordered_map<std::string, Tensor>& m, const Param& p) {
        auto it = m.find(p.name);
        if (it == m.end())
            it = m.emplace(p.name, Tensor::zeros(p.value.shape)).first;
        return it->second;
    }

    AdamConfig cfg_;
    std::vector<GroupKind> groups_;
    int64_t t_ = 0;
    std::unordered_map<std::string, Tensor> m_, v_;
};

// ---- gradient verification oracles ----

// Central-difference check of a scalar op against the tape's gradient at a
// single leaf.  Returns max over coordinates of
//   |analytic - numeric| / (|analytic| + 1e-8).
inline double finite_difference_check(const std::function<int(Graph&, int)>& build,
                                      const Tensor& point, double step) {
    if (!(step >= 1e-7 && step <= 1e-3))
        throw std::runtime_error("finite_difference_check: step out of [1e-7, 1e-3]");
    Graph g;
    const int x = g.leaf(point, true);
    const int y = build(g, x);
    if (g.val(y).numel() != 1)
        throw std::runtime_error("finite_difference_check: op must be scalar-valued");
    if (!std::isfinite(g.val(y).v[0]))
        throw std::runtime_error("finite_difference_check: non-finite op output");
    g.backward(y);
    const Tensor analytic = g.grad_buf(x);

    auto eval = [&](const Tensor& p) {
        Graph g2;
        const int x2 = g2.leaf(p, false);
        const int y2 = build(g2, x2);
        const double f = g2.val(y2).v[0];
        if (!std::isfinite(f))
            throw std::runtime_error("finite_difference_check: non-finite op output");
        return f;
    };

    double max_rel = 0.0;
    Tensor p = point;
    for (int64_t i = 0; i < point.numel(); ++i) {
        const double save = p.v[i];
        p.v[i] = save + step;
        const double fp = eval(p);
        p.v[i] = save - step;
        const double fm = eval(p);
        p.v[i] = save;
        const double numeric = (fp - fm) / (2.0 * step);
        const double rel =
            std::abs(analytic.v[i] - numeric) / (std::abs(analytic.v[i]) + 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

// Same check, but sweeping every coordinate of the given stored parameters.
// loss_fn(true) must run forward+backward and leave gradients in the store;
// loss_fn(false) must run forward only.  Both must rebuild from current
// parameter values.
inline double finite_difference_check_store(ParamStore& store,
                                            const std::vector<std::string>& names,
                                            const std::function<double(bool)>& loss_fn,
                                            double step) {
    if (!(step >= 1e-7 && step <= 1e-3))
        throw std::runtime_error("finite_difference_check: step out of [1e-7, 1e-3]");
    store.zero_grad();
    const double f0 = loss_fn(true);
    if (!std::isfinite(f0))
        throw std::runtime_error("finite_difference_check: non-finite op output");
    std::unordered_map<std::string, Tensor> analytic;
    for (const auto& n : names) analytic.emplace(n, store.get(n).grad);

    double max_rel = 0.0;
    for (const auto& n : names) {
        Param& p = store.get(n);
        const Tensor& a = analytic.at(n);
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            const double save = p.value.v[i];
            p.value.v[i] = save + step;
            const double fp = loss_fn(false);
            p.value.v[i] = save - step;
            const double fm = loss_fn(false);
            p.value.v[i] = save;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("finite_difference_check: non-finite op output");
            const double numeric = (fp - fm) / (2.0 * step);
            const double rel =
                std::abs(a.v[i] - numeric) / (std::abs(a.v[i]) + 1e-8);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace xfuse
