#pragma once

#include <array>
#include <string>
#include <vector>

#include "videonet.hpp"

// Action denoiser conditioned per denoising step on the video net's feature
// taps, plus the encoder-only baseline conditioner. Gradients from action
// losses stop at the tap boundary: taps enter the adapter as detached
// constants, so video parameters never receive action gradients.
namespace vpl::act {

constexpr int kHorizon = data::kWindowActions;  // 32
constexpr int kDim = data::kActionDim;          // 3
constexpr int kHDim = 128;
constexpr int kStepFeat = 32;
constexpr int kCondDim = kStepFeat + kHDim;
constexpr int kCh1 = 64;
constexpr int kCh2 = 128;
constexpr int kTapProj = 32;
constexpr int kGroups = 8;
constexpr size_t kActSize = static_cast<size_t>(kHorizon) * kDim;

namespace detail_act {

using video::detail_video::Conv;
using video::detail_video::Norm;
using video::detail_video::make_norm;

inline void check_finite(const char* layer, const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw NumericError(detail::format("action policy: non-finite activations at %s", layer));
}

inline Conv make_conv1(ParamSet& ps, Rng& rng, const std::string& name, int out, int in, int k,
                       double gain_mul = 1.0) {
    Conv c;
    c.w = ps.add(name + ".w", {out, in, k});
    init_fan_in(c.w, rng, in * k);
    if (gain_mul != 1.0)
        for (auto& v : c.w.data()) v *= gain_mul;
    c.b = ps.add(name + ".b", {out});
    return c;
}

// Residual 1D conv block with FiLM modulation from the conditioning vector.
struct Res1D {
    Norm gn;
    Conv pre, conv, skip;
    Tensor fw, fb;
    bool reduce = false;
};

inline Res1D make_res1d(ParamSet& ps, Rng& rng, const std::string& name, int in, int out) {
    Res1D r;
    r.gn = make_norm(ps, name + ".gn", in);
    r.reduce = in != out;
    if (r.reduce) {
        r.pre = make_conv1(ps, rng, name + ".pre", out, in, 1);
        r.skip = make_conv1(ps, rng, name + ".skip", out, in, 1);
    }
    r.conv = make_conv1(ps, rng, name + ".conv", out, out, 3);
    r.fw = ps.add(name + ".fw", {2 * out, kCondDim});
    init_fan_in(r.fw, rng, kCondDim);
    for (auto& v : r.fw.data()) v *= 0.1;
    r.fb = ps.add(name + ".fb", {2 * out});
    return r;
}

inline Tensor res1d_fwd(const Res1D& bl, const Tensor& x, const Tensor& cond) {
    Tensor u = silu(group_norm(x, bl.gn.g, bl.gn.b, kGroups));
    if (bl.reduce) u = silu(conv1d(u, bl.pre.w, bl.pre.b, 1));
    u = conv1d(u, bl.conv.w, bl.conv.b, 1);
    const int C = u.dim(0);
    Tensor f = linear(cond, bl.fw, bl.fb);
    u = film(u, narrow(f, 0, 0, C), narrow(f, 0, C, C));
    Tensor res = bl.reduce ? conv1d(x, bl.skip.w, bl.skip.b, 1) : x;
    return add(res, u);
}

inline Tensor step_features(int i) {
    Tensor feat(Shape{kStepFeat});
    constexpr int half = kStepFeat / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        feat.data()[static_cast<size_t>(k)] = std::sin(i * freq);
        feat.data()[static_cast<size_t>(half + k)] = std::cos(i * freq);
    }
    return feat;
}

}  // namespace detail_act

// Per-tap conv + global average pool, concatenated and fused by a two-layer
// MLP into the 128-dim step conditioning vector. Works for any tap spatial
// size; only the channel layout is pinned at build time.
struct FeatureAdapter {
    std::array<video::detail_video::Conv, video::kNumTaps> convs;
    Tensor w1, b1, w2, b2;
    std::array<int, video::kNumTaps> tap_channels{};
};

inline FeatureAdapter make_adapter(ParamSet& ps, Rng& rng, const std::string& name) {
    FeatureAdapter a;
    for (int k = 0; k < video::kNumTaps; ++k) {
        a.tap_channels[static_cast<size_t>(k)] = video::tap_shapes()[static_cast<size_t>(k)][1];
        a.convs[static_cast<size_t>(k)] =
            video::detail_video::make_conv(ps, rng, name + ".tap" + std::to_string(k), kTapProj,
                                    a.tap_channels[static_cast<size_t>(k)], 3);
    }
    a.w1 = ps.add(name + ".w1", {kHDim, video::kNumTaps * kTapProj});
    init_fan_in(a.w1, rng, video::kNumTaps * kTapProj);
    a.b1 = ps.add(name + ".b1", {kHDim});
    a.w2 = ps.add(name + ".w2", {kHDim, kHDim});
    init_fan_in(a.w2, rng, kHDim);
    a.b2 = ps.add(name + ".b2", {kHDim});
    return a;
}

// Taps are detached before any computation, so backward from anything built
// on h leaves every video parameter's gradient untouched.
inline Tensor adapt(const FeatureAdapter& a, const std::array<Tensor, video::kNumTaps>& taps) {
    std::vector<Tensor> pooled;
    for (int k = 0; k < video::kNumTaps; ++k) {
        const Tensor& t = taps[static_cast<size_t>(k)];
        VPL_SHAPE_CHECK(t.rank() == 4, "adapt: tap %d rank %d", k, t.rank());
        if (t.dim(1) != a.tap_channels[static_cast<size_t>(k)])
            throw ConfigError(detail::format(
                "adapt: tap %d carries %d channels, adapter was built for %d (video checkpoint drift)",
                k, t.dim(1), a.tap_channels[static_cast<size_t>(k)]));
        Tensor x = detach(t);
        pooled.push_back(global_avg_pool(
            silu(conv2d(x, a.convs[static_cast<size_t>(k)].w, a.convs[static_cast<size_t>(k)].b, 1))));
    }
    Tensor h = linear(silu(linear(concat(pooled, 0), a.w1, a.b1)), a.w2, a.b2);
    detail_act::check_finite("adapter", h);
    return h;
}

// 1D U-Net over the 32-step horizon, channels 64 then 128, FiLM-conditioned
// on (step features of i || h).
struct ActionDenoiser {
    video::detail_video::Conv in_conv, down, up, out_conv;
    detail_act::Res1D b1, b2, mid, dec;
};

inline ActionDenoiser make_action_denoiser(ParamSet& ps, Rng& rng, const std::string& name) {
    using namespace detail_act;
    ActionDenoiser d;
    d.in_conv = make_conv1(ps, rng, name + ".in", kCh1, kDim, 3);
    d.b1 = make_res1d(ps, rng, name + ".b1", kCh1, kCh1);
    d.down = make_conv1(ps, rng, name + ".down", kCh2, kCh1, 3);
    d.b2 = make_res1d(ps, rng, name + ".b2", kCh2, kCh2);
    d.mid = make_res1d(ps, rng, name + ".mid", kCh2, kCh2);
    d.up.w = ps.add(name + ".up.w", {kCh2, kCh1, 4});
    init_fan_in(d.up.w, rng, kCh2 * 2);
    d.up.b = ps.add(name + ".up.b", {kCh1});
    d.dec = make_res1d(ps, rng, name + ".dec", 2 * kCh1, kCh1);
    d.out_conv = make_conv1(ps, rng, name + ".out", kDim, kCh1, 3, 0.05);
    return d;
}

inline Tensor predict_action_eps(const ActionDenoiser& d, const Tensor& a, int i, const Tensor& h) {
    using detail_act::res1d_fwd;
    using detail_act::check_finite;
    VPL_SHAPE_CHECK(a.shape() == Shape({kHorizon, kDim}), "predict_action_eps: actions %s",
                    shape_str(a.shape()).c_str());
    VPL_SHAPE_CHECK(h.shape() == Shape({kHDim}), "predict_action_eps: h %s",
                    shape_str(h.shape()).c_str());
    Tensor cond = concat({detail_act::step_features(i), h}, 0);
    Tensor c1 = res1d_fwd(d.b1, conv1d(transpose(a), d.in_conv.w, d.in_conv.b, 1), cond);
    check_finite("enc", c1);                                        // (64,32)
    Tensor c2 = res1d_fwd(d.b2, conv1d(c1, d.down.w, d.down.b, 2), cond);
    check_finite("down", c2);                                       // (128,16)
    Tensor m = res1d_fwd(d.mid, c2, cond);
    check_finite("mid", m);
    Tensor u = conv_transpose1d(m, d.up.w, d.up.b);                 // (64,32)
    Tensor dd = res1d_fwd(d.dec, concat({u, c1}, 0), cond);
    check_finite("dec", dd);
    Tensor eps = transpose(conv1d(dd, d.out_conv.w, d.out_conv.b, 1));
    check_finite("out", eps);
    return eps;                                                     // (32,3)
}

struct PolicyNet {
    ParamSet ps;
    NoiseSchedule sched = NoiseSchedule::linear();
    FeatureAdapter adapter;
    ActionDenoiser dn;

    static PolicyNet build(uint64_t seed) {
        PolicyNet p;
        Rng rng(seed, rng_stream::kInit);
        p.adapter = make_adapter(p.ps, rng, "adapter");
        p.dn = make_action_denoiser(p.ps, rng, "action");
        return p;
    }
};

// Training objective for one window at a matched noise level: the caller
// runs the video net at the same step index and hands over its taps.
inline Tensor action_window_loss(const PolicyNet& pn,
                                 const std::array<Tensor, video::kNumTaps>& taps,
                                 const data::TrainingWindow& w, int step_i,
                                 const std::vector<double>& eps) {
    VPL_SHAPE_CHECK(eps.size() == kActSize, "action_window_loss: eps size %zu", eps.size());
    std::vector<double> x0(kActSize);
    for (int t = 0; t < kHorizon; ++t)
        for (int c = 0; c < kDim; ++c)
            x0[static_cast<size_t>(t) * kDim + c] = w.actions[static_cast<size_t>(t)][static_cast<size_t>(c)];
    std::vector<double> xi(kActSize);
    noise_to(pn.sched, step_i, x0.data(), eps.data(), xi.data(), kActSize);
    Tensor h = adapt(pn.adapter, taps);
    Tensor pred = predict_action_eps(pn.dn, Tensor::from(Shape{kHorizon, kDim}, xi), step_i, h);
    return mse(pred, Tensor::from(Shape{kHorizon, kDim}, eps));
}

// Lockstep inference: one sampler loop drives both chains, and the action
// update at index i consumes the taps the video chain produced at that same
// i. `steps` records the shared index so the synchronization is checkable.
struct ActionSample {
    std::array<std::array<double, kDim>, kHorizon> actions;  // denormalized
    std::vector<int> steps;
    video::SampledVideo vid;
};

inline ActionSample sample_actions(const video::VideoDenoiser& vm, const PolicyNet& pn,
                                   const data::NormStats& stats,
                                   const std::array<sim::Image, 2>& cond, int task_row,
                                   const SamplerConfig& sc, Rng& rng,
                                   const video::FrameLayout& lo = video::FrameLayout::standard()) {
    sc.validate(vm.sched);
    VPL_CHECK(pn.sched.T == vm.sched.T, "sample_actions: schedule length %d vs %d", pn.sched.T,
              vm.sched.T);
    video::validate_layout(lo);
    NoGradGuard ng;
    const std::array<std::vector<double>, 2> c0 = {video::chw_signed(cond[0]),
                                                   video::chw_signed(cond[1])};
    ActionSample out;
    std::vector<double> xv(video::kSeqSize), xa(kActSize);
    for (auto& v : xv) v = rng.gauss();
    for (auto& v : xa) v = rng.gauss();
    for (size_t j = 0; j < sc.indices.size(); ++j) {
        const int i = sc.indices[j];
        const int i_next = (j + 1 < sc.indices.size()) ? sc.indices[j + 1] : -1;
        Tensor input = video::assemble_input(xv, c0, lo);
        video::VideoOut co = vm.forward(input, i, task_row, lo);
        std::vector<double> eps_v = co.eps.data();
        if (sc.cfg_scale != 1.0) {
            video::VideoOut un = vm.forward(input, i, video::kNullTaskRow, lo);
            cfg_combine(sc.cfg_scale, un.eps.data().data(), eps_v.data(), eps_v.size());
        }
        Tensor h = adapt(pn.adapter, co.taps);
        Tensor eps_a = predict_action_eps(pn.dn, Tensor::from(Shape{kHorizon, kDim}, xa), i, h);
        out.steps.push_back(i);
        out.vid.taps.push_back(co.taps);
        ancestral_step(vm.sched, i, i_next, eps_v.data(), xv.data(), video::kSeqSize, rng);
        ancestral_step(pn.sched, i, i_next, eps_a.data().data(), xa.data(), kActSize, rng);
    }
    out.vid.x = xv;
    for (int j = 0; j < video::kGroupLen; ++j) {
        out.vid.frames[static_cast<size_t>(lo.view[1])][static_cast<size_t>(j)] =
            video::hwc_unit(xv.data() + static_cast<size_t>(1 + j) * video::kFramePixels);
        out.vid.frames[static_cast<size_t>(lo.view[1 + video::kGroupLen])][static_cast<size_t>(j)] =
            video::hwc_unit(xv.data() + static_cast<size_t>(1 + video::kGroupLen + j) * video::kFramePixels);
    }
    for (int t = 0; t < kHorizon; ++t)
        for (int c = 0; c < kDim; ++c) {
            const double v = std::clamp(xa[static_cast<size_t>(t) * kDim + c], -1.0, 1.0);
            out.actions[static_cast<size_t>(t)][static_cast<size_t>(c)] = stats.denormalize1(c, v);
        }
    return out;
}

// Encoder-only conditioning for the horizonless baseline: a small CNN per
// view plus the task embedding, fused to the same 128-dim vector, so the
// action U-Net and sampler are shared unchanged.
struct BaselineConditioner {
    std::array<std::array<video::detail_video::Conv, 2>, data::kViews> convs;  // [view][layer]
    Tensor task_table;
    Tensor w1, b1, w2, b2;
};

struct BaselinePolicy {
    ParamSet ps;
    NoiseSchedule sched = NoiseSchedule::linear();
    BaselineConditioner enc;
    ActionDenoiser dn;

    static BaselinePolicy build(uint64_t seed) {
        BaselinePolicy b;
        Rng rng(seed, rng_stream::kInit);
        for (int v = 0; v < data::kViews; ++v) {
            const std::string pre = "baseline.view" + std::to_string(v);
            b.enc.convs[static_cast<size_t>(v)][0] = video::detail_video::make_conv(b.ps, rng, pre + ".c1", 16, 3, 3);
            b.enc.convs[static_cast<size_t>(v)][1] = video::detail_video::make_conv(b.ps, rng, pre + ".c2", 32, 16, 3);
        }
        b.enc.task_table = b.ps.add("baseline.task_table", {sim::kNumTasks, video::kTaskDim});
        fill_gauss(b.enc.task_table, rng, 0.5);
        b.enc.w1 = b.ps.add("baseline.w1", {kHDim, 64 + video::kTaskDim});
        init_fan_in(b.enc.w1, rng, 64 + video::kTaskDim);
        b.enc.b1 = b.ps.add("baseline.b1", {kHDim});
        b.enc.w2 = b.ps.add("baseline.w2", {kHDim, kHDim});
        init_fan_in(b.enc.w2, rng, kHDim);
        b.enc.b2 = b.ps.add("baseline.b2", {kHDim});
        b.dn = make_action_denoiser(b.ps, rng, "action");
        return b;
    }
};

inline Tensor baseline_condition(const BaselinePolicy& bp, const std::array<sim::Image, 2>& frames,
                                 int task_id) {
    VPL_CHECK(task_id >= 0 && task_id < sim::kNumTasks, "baseline_condition: task %d", task_id);
    std::vector<Tensor> parts;
    for (int v = 0; v < data::kViews; ++v) {
        Tensor x = Tensor::from(Shape{1, 3, video::kRes, video::kRes},
                                video::chw_signed(frames[static_cast<size_t>(v)]));
        const auto& cs = bp.enc.convs[static_cast<size_t>(v)];
        x = silu(conv2d(x, cs[0].w, cs[0].b, 2));
        x = silu(conv2d(x, cs[1].w, cs[1].b, 2));
        parts.push_back(global_avg_pool(x));
    }
    parts.push_back(embedding_row(bp.enc.task_table, task_id));
    Tensor h = linear(silu(linear(concat(parts, 0), bp.enc.w1, bp.enc.b1)), bp.enc.w2, bp.enc.b2);
    detail_act::check_finite("baseline encoder", h);
    return h;
}

inline Tensor baseline_window_loss(const BaselinePolicy& bp, const data::TrainingWindow& w,
                                   int task_id, int step_i, const std::vector<double>& eps) {
    VPL_SHAPE_CHECK(eps.size() == kActSize, "baseline_window_loss: eps size %zu", eps.size());
    std::vector<double> x0(kActSize);
    for (int t = 0; t < kHorizon; ++t)
        for (int c = 0; c < kDim; ++c)
            x0[static_cast<size_t>(t) * kDim + c] = w.actions[static_cast<size_t>(t)][static_cast<size_t>(c)];
    std::vector<double> xi(kActSize);
    noise_to(bp.sched, step_i, x0.data(), eps.data(), xi.data(), kActSize);
    Tensor h = baseline_condition(bp, w.cond, task_id);
    Tensor pred = predict_action_eps(bp.dn, Tensor::from(Shape{kHorizon, kDim}, xi), step_i, h);
    return mse(pred, Tensor::from(Shape{kHorizon, kDim}, eps));
}

inline std::array<std::array<double, kDim>, kHorizon> sample_baseline_actions(
    const BaselinePolicy& bp, const data::NormStats& stats, const std::array<sim::Image, 2>& frames,
    int task_id, const SamplerConfig& sc, Rng& rng) {
    NoGradGuard ng;
    Tensor h = baseline_condition(bp, frames, task_id);
    auto eps_fn = [&](const std::vector<double>& x, int i, int) {
        return predict_action_eps(bp.dn, Tensor::from(Shape{kHorizon, kDim}, x), i, h).data();
    };
    const std::vector<double> xa = sample_loop(bp.sched, sc, kActSize, rng, eps_fn);
    std::array<std::array<double, kDim>, kHorizon> out;
    for (int t = 0; t < kHorizon; ++t)
        for (int c = 0; c < kDim; ++c)
            out[static_cast<size_t>(t)][static_cast<size_t>(c)] =
                stats.denormalize1(c, std::clamp(xa[static_cast<size_t>(t) * kDim + c], -1.0, 1.0));
    return out;
}

// Policy checkpoints carry the normalization stats and the coupling mode so
// inference never guesses them.
inline Json action_meta() {
    Json tc = Json::array();
    for (const auto& s : video::tap_shapes()) tc.push_back(s[1]);
    return Json{{"h_dim", kHDim}, {"horizon", kHorizon}, {"action_dim", kDim}, {"tap_channels", tc}};
}

inline Checkpoint policy_checkpoint(const PolicyNet& pn, const data::NormStats& stats,
                                    const std::string& coupling = "matched") {
    Checkpoint ck;
    ck.meta["kind"] = "action_policy";
    ck.meta["layout"] = action_meta();
    ck.meta["coupling_mode"] = coupling;
    ck.meta["norm_stats"] = data::norm_stats_to_json(stats);
    ck.meta["schedule"] = Json{{"T", pn.sched.T},
                               {"beta_start", pn.sched.beta.front()},
                               {"beta_end", pn.sched.beta.back()}};
    pack_params(ck, pn.ps);
    return ck;
}

struct LoadedPolicy {
    PolicyNet net;
    data::NormStats stats;
    std::string coupling;
};

inline LoadedPolicy load_policy(const Checkpoint& ck) {
    if (!ck.meta.contains("kind") || ck.meta["kind"] != "action_policy")
        throw ConfigError("checkpoint does not hold an action policy");
    if (ck.meta["layout"] != action_meta())
        throw ConfigError("action checkpoint layout disagrees with this build: " +
                          ck.meta["layout"].dump());
    if (!ck.meta.contains("norm_stats"))
        throw MissingArtifactError("action checkpoint lacks normalization stats");
    LoadedPolicy lp;
    lp.net = PolicyNet::build(0);
    const auto& sc = ck.meta["schedule"];
    lp.net.sched = NoiseSchedule::linear(sc["T"].get<int>(), sc["beta_start"].get<double>(),
                                         sc["beta_end"].get<double>());
    unpack_params(ck, lp.net.ps);
    lp.stats = data::norm_stats_from_json(ck.meta["norm_stats"]);
    lp.coupling = ck.meta.value("coupling_mode", "matched");
    return lp;
}

inline LoadedPolicy load_policy(const std::filesystem::path& path) {
    return load_policy(load_checkpoint(path));
}

inline Checkpoint baseline_checkpoint(const BaselinePolicy& bp, const data::NormStats& stats) {
    Checkpoint ck;
    ck.meta["kind"] = "baseline_policy";
    ck.meta["layout"] = Json{{"h_dim", kHDim}, {"horizon", kHorizon}, {"action_dim", kDim}};
    ck.meta["norm_stats"] = data::norm_stats_to_json(stats);
    ck.meta["schedule"] = Json{{"T", bp.sched.T},
                               {"beta_start", bp.sched.beta.front()},
                               {"beta_end", bp.sched.beta.back()}};
    pack_params(ck, bp.ps);
    return ck;
}

struct LoadedBaseline {
    BaselinePolicy net;
    data::NormStats stats;
};

inline LoadedBaseline load_baseline(const Checkpoint& ck) {
    if (!ck.meta.contains("kind") || ck.meta["kind"] != "baseline_policy")
        throw ConfigError("checkpoint does not hold a baseline policy");
    if (!ck.meta.contains("norm_stats"))
        throw MissingArtifactError("baseline checkpoint lacks normalization stats");
    LoadedBaseline lb;
    lb.net = BaselinePolicy::build(0);
    const auto& sc = ck.meta["schedule"];
    lb.net.sched = NoiseSchedule::linear(sc["T"].get<int>(), sc["beta_start"].get<double>(),
                                         sc["beta_end"].get<double>());
    unpack_params(ck, lb.net.ps);
    lb.stats = data::norm_stats_from_json(ck.meta["norm_stats"]);
    return lb;
}

inline LoadedBaseline load_baseline(const std::filesystem::path& path) {
    return load_baseline(load_checkpoint(path));
}

}  // namespace vpl::act
