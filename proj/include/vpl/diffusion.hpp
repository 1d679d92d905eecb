#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vpl/common.hpp"
#include "vpl/rng.hpp"

namespace vpl {

// Linear-beta noising process. alpha_bar[i] is the cumulative product; the
// forward marginal at index i is x_i = sqrt(ab_i) x0 + sqrt(1-ab_i) eps.
struct NoiseSchedule {
    int T = 1000;
    std::vector<double> beta, alpha_bar;

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
        VPL_CHECK(T >= 2 && beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
                  "NoiseSchedule: invalid range [%g, %g] over %d steps", beta_start, beta_end, T);
        NoiseSchedule s;
        s.T = T;
        s.beta.resize(static_cast<size_t>(T));
        s.alpha_bar.resize(static_cast<size_t>(T));
        double prod = 1.0;
        for (int i = 0; i < T; ++i) {
            s.beta[static_cast<size_t>(i)] =
                beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
            prod *= 1.0 - s.beta[static_cast<size_t>(i)];
            s.alpha_bar[static_cast<size_t>(i)] = prod;
        }
        VPL_CHECK(s.alpha_bar.back() > 0.0, "NoiseSchedule: alpha_bar underflow");
        return s;
    }

    double ab(int i) const {
        VPL_CHECK(i >= 0 && i < T, "NoiseSchedule: index %d outside [0,%d)", i, T);
        return alpha_bar[static_cast<size_t>(i)];
    }
};

inline void noise_to(const NoiseSchedule& s, int i, const double* x0, const double* eps,
                     double* out, size_t n) {
    const double sa = std::sqrt(s.ab(i));
    const double sb = std::sqrt(1.0 - s.ab(i));
    for (size_t k = 0; k < n; ++k) out[k] = sa * x0[k] + sb * eps[k];
}

// Classifier-free guidance: eps_u + scale * (eps_c - eps_u), in place on eps_c.
inline void cfg_combine(double scale, const double* eps_uncond, double* eps_cond, size_t n) {
    for (size_t k = 0; k < n; ++k)
        eps_cond[k] = eps_uncond[k] + scale * (eps_cond[k] - eps_uncond[k]);
}

struct SamplerConfig {
    int n_steps = 30;
    double cfg_scale = 2.0;
    std::vector<int> indices;  // strictly decreasing schedule indices, last == 0

    static SamplerConfig strided(const NoiseSchedule& s, int n_steps = 30, double cfg = 2.0) {
        VPL_CHECK(n_steps >= 1 && n_steps <= s.T, "SamplerConfig: %d steps for T=%d", n_steps,
                  s.T);
        SamplerConfig c;
        c.n_steps = n_steps;
        c.cfg_scale = cfg;
        c.indices.resize(static_cast<size_t>(n_steps));
        if (n_steps == 1) {
            c.indices[0] = 0;
        } else {
            for (int j = 0; j < n_steps; ++j)
                c.indices[static_cast<size_t>(j)] = static_cast<int>(std::lround(
                    static_cast<double>(n_steps - 1 - j) * (s.T - 1) / (n_steps - 1)));
        }
        c.validate(s);
        VPL_CHECK(c.indices.back() == 0, "SamplerConfig: strided schedule must end at index 0");
        return c;
    }

    void validate(const NoiseSchedule& s) const {
        VPL_CHECK(static_cast<int>(indices.size()) == n_steps,
                  "SamplerConfig: %zu indices for %d steps", indices.size(), n_steps);
        for (size_t j = 0; j < indices.size(); ++j) {
            VPL_CHECK(indices[j] >= 0 && indices[j] < s.T, "SamplerConfig: index %d outside T=%d",
                      indices[j], s.T);
            if (j > 0)
                VPL_CHECK(indices[j] < indices[j - 1],
                          "SamplerConfig: indices must strictly decrease (%d then %d)",
                          indices[j - 1], indices[j]);
        }
    }
};

// One ancestral update from schedule index i to i_next (i_next < 0 on the
// final step). The x0 estimate is clipped to [-1,1]; all modeled signals
// (pixels, normalized actions) live in that range.
inline void ancestral_step(const NoiseSchedule& s, int i, int i_next, const double* eps,
                           double* x, size_t n, Rng& rng) {
    const double ab_i = s.ab(i);
    const double sa_i = std::sqrt(ab_i);
    const double sb_i = std::sqrt(1.0 - ab_i);
    if (i_next < 0) {
        for (size_t k = 0; k < n; ++k)
            x[k] = std::clamp((x[k] - sb_i * eps[k]) / sa_i, -1.0, 1.0);
        return;
    }
    const double ab_n = s.ab(i_next);
    const double var = (1.0 - ab_n) / (1.0 - ab_i) * (1.0 - ab_i / ab_n);
    const double sigma = std::sqrt(std::max(var, 0.0));
    const double dir = std::sqrt(std::max(1.0 - ab_n - var, 0.0));
    const double sa_n = std::sqrt(ab_n);
    for (size_t k = 0; k < n; ++k) {
        const double x0_hat = std::clamp((x[k] - sb_i * eps[k]) / sa_i, -1.0, 1.0);
        x[k] = sa_n * x0_hat + dir * eps[k] + sigma * rng.gauss();
    }
}

// Full reverse loop over a flat state vector. eps_fn(x, i, j) returns the
// predicted noise at schedule index i (j is the position in the schedule).
inline std::vector<double> sample_loop(
    const NoiseSchedule& s, const SamplerConfig& cfg, size_t n, Rng& rng,
    const std::function<std::vector<double>(const std::vector<double>&, int, int)>& eps_fn) {
    cfg.validate(s);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.gauss();
    for (size_t j = 0; j < cfg.indices.size(); ++j) {
        const int i = cfg.indices[j];
        const int i_next = (j + 1 < cfg.indices.size()) ? cfg.indices[j + 1] : -1;
        std::vector<double> eps = eps_fn(x, i, static_cast<int>(j));
        VPL_CHECK(eps.size() == n, "sample_loop: eps size %zu for state size %zu", eps.size(), n);
        ancestral_step(s, i, i_next, eps.data(), x.data(), n, rng);
    }
    return x;
}

}  // namespace vpl
