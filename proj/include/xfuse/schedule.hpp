#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/tensor.hpp"

namespace xfuse {

enum class ScheduleKind { cosine, linear_vp };

inline const char* schedule_name(ScheduleKind k) {
    return k == ScheduleKind::cosine ? "cosine" : "linear-vp";
}

inline ScheduleKind schedule_from_name(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear-vp" || s == "linear_vp") return ScheduleKind::linear_vp;
    throw std::runtime_error("unknown schedule '" + s + "'");
}

// Variance-preserving discretization of continuous t in [0,1]: z_t =
// alpha_t x + omega_t eps with alpha^2 + omega^2 = 1.  The per-step loss
// weight defaults to 1 (plain eps-space MSE).
struct NoiseSchedule {
    ScheduleKind kind;
    int T = 0;
    std::vector<double> t;      // grid values in [0,1]
    std::vector<double> alpha;  // signal coefficient, non-increasing
    std::vector<double> omega;  // noise coefficient
    std::vector<double> w;      // loss weight

    static NoiseSchedule make(int T, ScheduleKind kind) {
        if (T < 2) throw std::runtime_error("schedule: T must be >= 2");
        NoiseSchedule s;
        s.kind = kind;
        s.T = T;
        s.t.resize(static_cast<size_t>(T));
        s.alpha.resize(static_cast<size_t>(T));
        s.omega.resize(static_cast<size_t>(T));
        s.w.assign(static_cast<size_t>(T), 1.0);
        for (int i = 0; i < T; ++i) {
            const double ti = static_cast<double>(i) / (T - 1);
            s.t[static_cast<size_t>(i)] = ti;
            double a;
            if (kind == ScheduleKind::cosine) {
                // squared-cosine signal with the usual small offset, renormalized
                // so alpha(0) = 1 exactly
                const double off = 0.008;
                a = std::cos((ti + off) / (1.0 + off) * M_PI / 2.0) /
                    std::cos(off / (1.0 + off) * M_PI / 2.0);
            } else {
                // VP SDE with linearly increasing beta(t); b1 chosen so the
                // terminal signal level sits below 1e-3
                const double b0 = 0.1, b1 = 30.0;
                const double integral = b0 * ti + 0.5 * (b1 - b0) * ti * ti;
                a = std::exp(-0.5 * integral);
            }
            // floor keeps the x-hat reconstruction (z - omega eps)/alpha total
            // at the noisiest step; x-hat is clipped downstream
            a = std::max(a, 5e-4);
            s.alpha[static_cast<size_t>(i)] = a;
            s.omega[static_cast<size_t>(i)] = std::sqrt(std::max(0.0, 1.0 - a * a));
        }
        return s;
    }
};

inline Tensor q_sample(const Tensor& x, const Tensor& eps, const NoiseSchedule& s,
                       int ti) {
    check_same_shape(x, eps, "q_sample");
    if (ti < 0 || ti >= s.T) throw std::runtime_error("q_sample: step out of range");
    const double a = s.alpha[static_cast<size_t>(ti)];
    const double o = s.omega[static_cast<size_t>(ti)];
    Tensor z(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) z.v[i] = a * x.v[i] + o * eps.v[i];
    return z;
}

}  // namespace xfuse
