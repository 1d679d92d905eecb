#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "vpl/common.hpp"
#include "vpl/rng.hpp"
#include "vpl/tensor.hpp"

namespace vpl {

// Ordered registry of trainable tensors. Order is creation order and defines
// the layout of optimizer state and checkpoints.
struct ParamSet {
    std::vector<Tensor> params;

    Tensor add(const std::string& name, Shape shape) {
        Tensor t(std::move(shape));
        t.set_requires_grad(true).set_name(name);
        params.push_back(t);
        return t;
    }
    void adopt(Tensor t) {
        t.set_requires_grad(true);
        VPL_CHECK(!t.name().empty(), "ParamSet::adopt: unnamed tensor");
        params.push_back(std::move(t));
    }
    Tensor* find(const std::string& name) {
        for (auto& p : params)
            if (p.name() == name) return &p;
        return nullptr;
    }
    void zero_grads() {
        for (auto& p : params) p.zero_grad();
    }
    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& p : params) n += p.numel();
        return n;
    }
};

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t param_hash(const ParamSet& ps) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : ps.params) {
        h = fnv1a64(p.name().data(), p.name().size(), h);
        h = fnv1a64(p.data().data(), p.data().size() * sizeof(double), h);
    }
    return h;
}

inline double global_grad_norm(ParamSet& ps) {
    double acc = 0.0;
    for (auto& p : ps.params)
        for (double g : p.grad()) acc += g * g;
    return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

inline void fill_gauss(Tensor& t, Rng& rng, double stddev) {
    for (auto& v : t.data()) v = rng.gauss() * stddev;
}

// He-style init for a layer with the given fan-in.
inline void init_fan_in(Tensor& t, Rng& rng, int fan_in, double gain = 2.0) {
    fill_gauss(t, rng, std::sqrt(gain / static_cast<double>(fan_in)));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::vector<std::vector<double>> m, v;

    void init(const ParamSet& ps) {
        t = 0;
        m.clear();
        v.clear();
        for (const auto& p : ps.params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
    }

    void step(ParamSet& ps) {
        VPL_CHECK(m.size() == ps.params.size(), "Adam::step: state holds %zu params, set has %zu",
                  m.size(), ps.params.size());
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t pi = 0; pi < ps.params.size(); ++pi) {
            Tensor& p = ps.params[pi];
            auto& grad = p.grad();
            if (!kern::all_finite(grad.size(), grad.data()))
                throw NumericError(detail::format("Adam::step: non-finite gradient in '%s'",
                                                  p.name().c_str()));
            auto& mp = m[pi];
            auto& vp = v[pi];
            auto& x = p.data();
            for (size_t i = 0; i < x.size(); ++i) {
                const double g = grad[i];
                mp[i] = beta1 * mp[i] + (1.0 - beta1) * g;
                vp[i] = beta2 * vp[i] + (1.0 - beta2) * g * g;
                x[i] -= lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + eps);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Gradient verification via central differences.
//
// value_fn evaluates the scalar objective at an arbitrary point (it must not
// record a graph); analytic_grad is the gradient claimed by the reverse pass
// at `point`. Error metric per coordinate:
//   |analytic - (f(x+h e_i) - f(x-h e_i)) / 2h|  /  max(1, |analytic|)
// ---------------------------------------------------------------------------

struct FdReport {
    double max_rel_err = 0.0;
    size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

inline FdReport finite_diff_check(const std::function<double(const std::vector<double>&)>& value_fn,
                                  const std::vector<double>& point,
                                  const std::vector<double>& analytic_grad, double h,
                                  const std::vector<size_t>* coords = nullptr) {
    VPL_CHECK(point.size() == analytic_grad.size(),
              "finite_diff_check: %zu coords, %zu analytic grads", point.size(),
              analytic_grad.size());
    FdReport rep;
    std::vector<double> x = point;
    auto probe = [&](size_t i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = value_fn(x);
        x[i] = orig - h;
        const double fm = value_fn(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError(detail::format(
                "finite_diff_check: objective non-finite at perturbed coordinate %zu", i));
        const double numeric = (fp - fm) / (2.0 * h);
        const double err =
            std::abs(analytic_grad[i] - numeric) / std::max(1.0, std::abs(analytic_grad[i]));
        if (err > rep.max_rel_err) {
            rep.max_rel_err = err;
            rep.worst_coord = i;
            rep.worst_analytic = analytic_grad[i];
            rep.worst_numeric = numeric;
        }
    };
    if (coords) {
        for (size_t i : coords[0]) {
            VPL_CHECK(i < point.size(), "finite_diff_check: coordinate %zu out of %zu", i,
                      point.size());
            probe(i);
        }
    } else {
        for (size_t i = 0; i < point.size(); ++i) probe(i);
    }
    return rep;
}

// Convenience wrapper for checking a subset of a ParamSet against a loss
// builder. The builder reconstructs the graph from current parameter values.
inline FdReport check_param_grads(ParamSet& ps, const std::function<Tensor()>& loss_builder,
                                  Rng& rng, size_t coords_per_param, double h = 1e-5) {
    ps.zero_grads();
    Tensor loss = loss_builder();
    backward(loss);

    FdReport rep;
    for (auto& p : ps.params) {
        std::vector<size_t> coords;
        const size_t n = p.numel();
        if (coords_per_param >= n) {
            for (size_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (size_t c = 0; c < coords_per_param; ++c)
                coords.push_back(static_cast<size_t>(rng.below(n)));
        }
        auto value_fn = [&](const std::vector<double>& x) {
            auto saved = p.data();
            p.data() = x;
            NoGradGuard ng;
            const double v = loss_builder().item();
            p.data() = saved;
            return v;
        };
        FdReport r = finite_diff_check(value_fn, p.data(), p.grad(), h, &coords);
        if (r.max_rel_err > rep.max_rel_err) {
            rep = r;
        }
    }
    return rep;
}

}  // namespace vpl
