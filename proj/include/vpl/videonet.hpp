#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "dataio.hpp"
#include "diffusion.hpp"
#include "optim.hpp"
#include "tensor.hpp"

// Joint two-view video denoiser. A 17-frame sequence [pad, group1 x 8,
// group2 x 8] is denoised as one batch; each frame carries its own noisy
// channels plus its view's conditioning frame. Temporal mixing happens only
// inside a group (and the pad stays alone), with weights shared across
// groups, so swapping the two view groups permutes the outputs exactly.
namespace vpl::video {

constexpr int kGroupLen = data::kWindowFrames;              // 8
constexpr int kSeqFrames = 1 + data::kViews * kGroupLen;    // 17
constexpr int kRes = sim::kFrameSize;                       // 16
constexpr int kInChannels = 6;                              // noisy rgb + cond rgb
constexpr int kBaseCh = 32;
constexpr int kDeepCh = 64;
constexpr int kTaskDim = 32;
constexpr int kTimeFeat = 32;
constexpr int kTimeHidden = 64;
constexpr int kNullTaskRow = sim::kNumTasks;                // row 8 of the task table
constexpr int kNormGroups = 8;
constexpr int kNumTaps = 3;

constexpr size_t kFramePixels = static_cast<size_t>(3) * kRes * kRes;
constexpr size_t kSeqSize = static_cast<size_t>(kSeqFrames) * kFramePixels;

// Which camera view each of the 17 positions shows. Position 0 is the pad
// frame: a copy of group 1's conditioning frame, so it carries that group's
// view id. Positions 1-8 are group 1, positions 9-16 group 2.
struct FrameLayout {
    std::array<int, kSeqFrames> view{};

    static FrameLayout standard() {
        FrameLayout lo;
        lo.view[0] = 0;
        for (int j = 0; j < kGroupLen; ++j) {
            lo.view[1 + j] = 0;
            lo.view[1 + kGroupLen + j] = 1;
        }
        return lo;
    }

    // The standard layout with the two view groups exchanged.
    static FrameLayout swapped() {
        FrameLayout lo = standard();
        for (auto& v : lo.view) v = 1 - v;
        return lo;
    }
};

inline void validate_layout(const FrameLayout& lo) {
    for (int f = 0; f < kSeqFrames; ++f)
        if (lo.view[f] != 0 && lo.view[f] != 1)
            throw ConfigError(detail::format("frame layout: view %d at position %d", lo.view[f], f));
    for (int j = 1; j < kGroupLen; ++j) {
        if (lo.view[1 + j] != lo.view[1])
            throw ConfigError(detail::format("frame layout: group 1 changes view at position %d", 1 + j));
        if (lo.view[1 + kGroupLen + j] != lo.view[1 + kGroupLen])
            throw ConfigError(
                detail::format("frame layout: group 2 changes view at position %d", 1 + kGroupLen + j));
    }
    if (lo.view[1] == lo.view[1 + kGroupLen])
        throw ConfigError(
            detail::format("frame layout: both groups show view %d (position %d duplicates group 1)",
                           lo.view[1], 1 + kGroupLen));
    if (lo.view[0] != lo.view[1])
        throw ConfigError(detail::format(
            "frame layout: pad view %d at position 0 must match group 1's view %d", lo.view[0], lo.view[1]));
}

// Images are stored HWC in [0,1]; the denoiser works on CHW in [-1,1].
inline std::vector<double> chw_signed(const sim::Image& img) {
    VPL_CHECK(img.size() == kFramePixels, "chw_signed: image size %zu", img.size());
    std::vector<double> out(kFramePixels);
    for (int h = 0; h < kRes; ++h)
        for (int w = 0; w < kRes; ++w)
            for (int c = 0; c < 3; ++c)
                out[(static_cast<size_t>(c) * kRes + h) * kRes + w] =
                    2.0 * img[(static_cast<size_t>(h) * kRes + w) * 3 + c] - 1.0;
    return out;
}

inline sim::Image hwc_unit(const double* chw) {
    sim::Image img(kFramePixels);
    for (int h = 0; h < kRes; ++h)
        for (int w = 0; w < kRes; ++w)
            for (int c = 0; c < 3; ++c) {
                double v = 0.5 * (chw[(static_cast<size_t>(c) * kRes + h) * kRes + w] + 1.0);
                img[(static_cast<size_t>(h) * kRes + w) * 3 + c] = std::clamp(v, 0.0, 1.0);
            }
    return img;
}

// Stacks a noisy sequence with per-frame conditioning into the (17,6,16,16)
// network input. `cond` holds the two conditioning frames in signed CHW form,
// indexed by view id.
inline Tensor assemble_input(const std::vector<double>& noisy,
                             const std::array<std::vector<double>, 2>& cond,
                             const FrameLayout& lo) {
    validate_layout(lo);
    VPL_SHAPE_CHECK(noisy.size() == kSeqSize, "assemble_input: sequence size %zu, expected %zu",
                    noisy.size(), kSeqSize);
    for (int v = 0; v < 2; ++v)
        VPL_SHAPE_CHECK(cond[v].size() == kFramePixels, "assemble_input: cond %d size %zu", v,
                        cond[v].size());
    Tensor input(Shape{kSeqFrames, kInChannels, kRes, kRes});
    double* dst = input.data().data();
    for (int f = 0; f < kSeqFrames; ++f) {
        std::copy_n(noisy.data() + static_cast<size_t>(f) * kFramePixels, kFramePixels,
                    dst + static_cast<size_t>(f) * 2 * kFramePixels);
        const auto& cf = cond[static_cast<size_t>(lo.view[static_cast<size_t>(f)])];
        std::copy_n(cf.data(), kFramePixels,
                    dst + static_cast<size_t>(f) * 2 * kFramePixels + kFramePixels);
    }
    return input;
}

// The clean pixel target for a training window: pad copies group 1's
// conditioning frame, then each group holds its view's subsampled frames.
inline std::vector<double> window_x0(const data::TrainingWindow& w, const FrameLayout& lo) {
    validate_layout(lo);
    std::vector<double> x0(kSeqSize);
    auto put = [&](int f, const sim::Image& img) {
        std::vector<double> c = chw_signed(img);
        std::copy_n(c.data(), kFramePixels, x0.data() + static_cast<size_t>(f) * kFramePixels);
    };
    put(0, w.cond[static_cast<size_t>(lo.view[0])]);
    for (int j = 0; j < kGroupLen; ++j) {
        put(1 + j, w.targets[static_cast<size_t>(lo.view[1])][static_cast<size_t>(j)]);
        put(1 + kGroupLen + j,
            w.targets[static_cast<size_t>(lo.view[1 + kGroupLen])][static_cast<size_t>(j)]);
    }
    return x0;
}

namespace detail_video {

struct Conv {
    Tensor w, b;
};

struct Norm {
    Tensor g, b;
};

// Pre-activation residual conv block with a time-embedding channel bias.
// Wide inputs (skip concatenations) are first reduced by a 1x1 conv so the
// 3x3 always runs at the output width.
struct SpatialBlock {
    Norm gn;
    Conv pre, conv, skip;
    Tensor tw, tb;
    bool reduce = false;
};

// Depthwise width-3 conv along the frame axis, applied to each group's track
// separately (the pad is its own track) with shared weights.
struct TemporalBlock {
    Norm gn;
    Tensor w;
};

// Cross-attention from every spatial site to four tokens derived from the
// task embedding. The only place task identity enters past the stem.
struct CrossBlock {
    Norm gn;
    Tensor wq, wk, wv, wo;
};

struct Level {
    SpatialBlock sp;
    TemporalBlock tm;
    CrossBlock ca;
};

inline Conv make_conv(ParamSet& ps, Rng& rng, const std::string& name, int out, int in, int k,
                      double gain_mul = 1.0) {
    Conv c;
    c.w = ps.add(name + ".w", {out, in, k, k});
    init_fan_in(c.w, rng, in * k * k);
    if (gain_mul != 1.0)
        for (auto& v : c.w.data()) v *= gain_mul;
    c.b = ps.add(name + ".b", {out});
    return c;
}

inline Norm make_norm(ParamSet& ps, const std::string& name, int ch) {
    Norm n;
    n.g = ps.add(name + ".g", {ch});
    for (auto& v : n.g.data()) v = 1.0;
    n.b = ps.add(name + ".b", {ch});
    return n;
}

inline Tensor make_weight(ParamSet& ps, Rng& rng, const std::string& name, int out, int in,
                          double gain_mul = 1.0) {
    Tensor w = ps.add(name, {in, out});  // used as matmul(x, w)
    init_fan_in(w, rng, in);
    if (gain_mul != 1.0)
        for (auto& v : w.data()) v *= gain_mul;
    return w;
}

inline Level make_level(ParamSet& ps, Rng& rng, const std::string& name, int in, int out) {
    Level L;
    L.sp.gn = make_norm(ps, name + ".sp.gn", in);
    L.sp.reduce = in != out;
    if (L.sp.reduce) {
        L.sp.pre = make_conv(ps, rng, name + ".sp.pre", out, in, 1);
        L.sp.skip = make_conv(ps, rng, name + ".sp.skip", out, in, 1);
    }
    L.sp.conv = make_conv(ps, rng, name + ".sp.conv", out, out, 3);
    L.sp.tw = ps.add(name + ".sp.tw", {out, kTimeHidden});
    init_fan_in(L.sp.tw, rng, kTimeHidden);
    for (auto& v : L.sp.tw.data()) v *= 0.1;  // keep the time path alive but gentle
    L.sp.tb = ps.add(name + ".sp.tb", {out});
    L.tm.gn = make_norm(ps, name + ".tm.gn", out);
    L.tm.w = ps.add(name + ".tm.w", {out, 3});
    init_fan_in(L.tm.w, rng, 3);
    L.ca.gn = make_norm(ps, name + ".ca.gn", out);
    L.ca.wq = make_weight(ps, rng, name + ".ca.wq", out, out);
    L.ca.wk = make_weight(ps, rng, name + ".ca.wk", 4 * out, kTaskDim);
    L.ca.wv = make_weight(ps, rng, name + ".ca.wv", 4 * out, kTaskDim);
    L.ca.wo = make_weight(ps, rng, name + ".ca.wo", out, out, 0.1);
    return L;
}

inline void check_finite(const char* layer, const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw NumericError(detail::format("video denoiser: non-finite activations at %s", layer));
}

}  // namespace detail_video

// Epsilon prediction plus the three decoder-side feature taps (middle block,
// then each decoder stage), ordered coarse to fine.
struct VideoOut {
    Tensor eps;
    std::array<Tensor, kNumTaps> taps;
};

inline const std::array<Shape, kNumTaps>& tap_shapes() {
    static const std::array<Shape, kNumTaps> shapes = {
        Shape{kSeqFrames, kDeepCh, 4, 4},
        Shape{kSeqFrames, kDeepCh, 4, 4},
        Shape{kSeqFrames, kBaseCh, 8, 8},
    };
    return shapes;
}

struct VideoDenoiser {
    ParamSet ps;
    NoiseSchedule sched = NoiseSchedule::linear();

    Tensor task_table;           // (9,32); row 8 is the null row for dropped conditioning
    Tensor view_emb, tpos_emb;   // (2,32) per view id, (8,32) per in-group position
    Tensor time_w1, time_b1, time_w2, time_b2;
    detail_video::Conv stem, down, shortcut, fuse, out;
    detail_video::Norm head_gn;
    detail_video::Level enc1, enc2, mid, dec2, dec1;

    static VideoDenoiser build(uint64_t seed) {
        using namespace detail_video;
        VideoDenoiser m;
        Rng rng(seed, rng_stream::kInit);
        ParamSet& ps = m.ps;
        m.task_table = ps.add("task_table", {sim::kNumTasks + 1, kTaskDim});
        fill_gauss(m.task_table, rng, 0.5);
        m.view_emb = ps.add("view_emb", {2, kTimeFeat});
        fill_gauss(m.view_emb, rng, 0.1);
        m.tpos_emb = ps.add("tpos_emb", {kGroupLen, kTimeFeat});
        fill_gauss(m.tpos_emb, rng, 0.1);
        m.time_w1 = ps.add("time.w1", {kTimeHidden, kTimeFeat});
        init_fan_in(m.time_w1, rng, kTimeFeat);
        m.time_b1 = ps.add("time.b1", {kTimeHidden});
        m.time_w2 = ps.add("time.w2", {kTimeHidden, kTimeHidden});
        init_fan_in(m.time_w2, rng, kTimeHidden);
        m.time_b2 = ps.add("time.b2", {kTimeHidden});
        m.stem = make_conv(ps, rng, "stem", kBaseCh, kInChannels, 3);
        m.enc1 = make_level(ps, rng, "enc1", kBaseCh, kBaseCh);
        m.down = make_conv(ps, rng, "down", kDeepCh, kBaseCh, 3);
        m.enc2 = make_level(ps, rng, "enc2", kDeepCh, kDeepCh);
        m.mid = make_level(ps, rng, "mid", kDeepCh, kDeepCh);
        m.dec2 = make_level(ps, rng, "dec2", 2 * kDeepCh, kDeepCh);
        m.dec1 = make_level(ps, rng, "dec1", kDeepCh + kBaseCh, kBaseCh);
        m.shortcut = make_conv(ps, rng, "shortcut", 16, kInChannels, 3);
        m.head_gn = make_norm(ps, "head.gn", kBaseCh + 16);
        m.fuse = make_conv(ps, rng, "head.fuse", kBaseCh, kBaseCh + 16, 1);
        // Small but non-zero output init: keeps the start loss near 1 while
        // every parameter still sees gradient on the first batch.
        m.out = make_conv(ps, rng, "head.out", 3, kBaseCh, 3, 0.05);
        return m;
    }

    Tensor time_embed(int step_i) const {
        Tensor feat(Shape{kTimeFeat});
        constexpr int half = kTimeFeat / 2;
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            feat.data()[static_cast<size_t>(k)] = std::sin(step_i * freq);
            feat.data()[static_cast<size_t>(half + k)] = std::cos(step_i * freq);
        }
        return linear(silu(linear(feat, time_w1, time_b1)), time_w2, time_b2);
    }

    Tensor frame_bias(const FrameLayout& lo) const {
        std::vector<int> vrows(kSeqFrames), prows(kSeqFrames);
        for (int f = 0; f < kSeqFrames; ++f) vrows[static_cast<size_t>(f)] = lo.view[static_cast<size_t>(f)];
        prows[0] = 0;
        for (int j = 0; j < kGroupLen; ++j) {
            prows[static_cast<size_t>(1 + j)] = j;
            prows[static_cast<size_t>(1 + kGroupLen + j)] = j;
        }
        return add(embedding_rows(view_emb, vrows), embedding_rows(tpos_emb, prows));
    }

    Tensor spatial_fwd(const detail_video::SpatialBlock& bl, const Tensor& x,
                       const Tensor& temb) const {
        Tensor u = silu(group_norm(x, bl.gn.g, bl.gn.b, kNormGroups));
        if (bl.reduce) u = silu(conv2d(u, bl.pre.w, bl.pre.b, 1));
        u = conv2d(u, bl.conv.w, bl.conv.b, 1);
        u = bias_add_channel(u, linear(temb, bl.tw, bl.tb));
        Tensor res = bl.reduce ? conv2d(x, bl.skip.w, bl.skip.b, 1) : x;
        return add(res, u);
    }

    Tensor temporal_fwd(const detail_video::TemporalBlock& bl, const Tensor& x) const {
        Tensor u = silu(group_norm(x, bl.gn.g, bl.gn.b, kNormGroups));
        Tensor pad = temporal_dwconv(narrow(u, 0, 0, 1), bl.w);
        Tensor g1 = temporal_dwconv(narrow(u, 0, 1, kGroupLen), bl.w);
        Tensor g2 = temporal_dwconv(narrow(u, 0, 1 + kGroupLen, kGroupLen), bl.w);
        return add(x, concat({pad, g1, g2}, 0));
    }

    Tensor cross_fwd(const detail_video::CrossBlock& bl, const Tensor& x,
                     const Tensor& task_vec) const {
        Tensor u = group_norm(x, bl.gn.g, bl.gn.b, kNormGroups);
        Tensor toks = to_tokens(u);
        Tensor q = matmul(toks, bl.wq);
        const int C = x.dim(1);
        Tensor tk = reshape(task_vec, {1, kTaskDim});
        Tensor k = reshape(matmul(tk, bl.wk), {4, C});
        Tensor v = reshape(matmul(tk, bl.wv), {4, C});
        Tensor o = matmul(sdpa(q, k, v), bl.wo);
        return add(x, from_tokens(o, x.shape()));
    }

    Tensor level_fwd(const detail_video::Level& L, const Tensor& x, const Tensor& temb,
                     const Tensor& task_vec) const {
        return cross_fwd(L.ca, temporal_fwd(L.tm, spatial_fwd(L.sp, x, temb)), task_vec);
    }

    VideoOut forward(const Tensor& input, int step_i, int task_row, const FrameLayout& lo) const {
        using detail_video::check_finite;
        VPL_SHAPE_CHECK(input.shape() == Shape({kSeqFrames, kInChannels, kRes, kRes}),
                        "video forward: input %s", shape_str(input.shape()).c_str());
        VPL_CHECK(step_i >= 0 && step_i < sched.T, "video forward: step %d of %d", step_i, sched.T);
        VPL_CHECK(task_row >= 0 && task_row <= kNullTaskRow, "video forward: task row %d", task_row);
        validate_layout(lo);

        Tensor temb = time_embed(step_i);
        Tensor task_vec = embedding_row(task_table, task_row);

        Tensor h = conv2d(input, stem.w, stem.b, 2);            // (17,32,8,8)
        h = bias_add_per_sample(h, frame_bias(lo));
        check_finite("stem", h);
        Tensor s1 = level_fwd(enc1, h, temb, task_vec);         // (17,32,8,8)
        check_finite("enc1", s1);
        Tensor s2 = level_fwd(enc2, conv2d(s1, down.w, down.b, 2), temb, task_vec);  // (17,64,4,4)
        check_finite("enc2", s2);
        Tensor m = level_fwd(mid, s2, temb, task_vec);          // (17,64,4,4)
        check_finite("mid", m);
        Tensor d2 = level_fwd(dec2, concat({m, s2}, 1), temb, task_vec);  // (17,64,4,4)
        check_finite("dec2", d2);
        Tensor d1 = level_fwd(dec1, concat({nearest_upsample2d(d2), s1}, 1), temb, task_vec);
        check_finite("dec1", d1);                               // (17,32,8,8)
        Tensor u = concat({nearest_upsample2d(d1), silu(conv2d(input, shortcut.w, shortcut.b, 1))}, 1);
        u = silu(group_norm(u, head_gn.g, head_gn.b, kNormGroups));
        u = silu(conv2d(u, fuse.w, fuse.b, 1));
        VideoOut r;
        r.eps = conv2d(u, out.w, out.b, 1);                     // (17,3,16,16)
        check_finite("out", r.eps);
        r.taps = {m, d2, d1};
        return r;
    }
};

// One training forward at a given noise level: assembles the noisy input,
// predicts eps, and scores it on the sixteen real frames. The pad frame is
// sliced out of both sides, so its residual cannot reach the loss.
struct VideoTrainStep {
    Tensor loss;
    VideoOut out;
};

inline VideoTrainStep video_window_step(const VideoDenoiser& m, const data::TrainingWindow& w,
                                        int task_row, int step_i, const std::vector<double>& eps,
                                        const FrameLayout& lo = FrameLayout::standard()) {
    VPL_SHAPE_CHECK(eps.size() == kSeqSize, "video_window_step: eps size %zu", eps.size());
    const std::vector<double> x0 = window_x0(w, lo);
    std::vector<double> xi(kSeqSize);
    noise_to(m.sched, step_i, x0.data(), eps.data(), xi.data(), kSeqSize);
    const std::array<std::vector<double>, 2> cond = {chw_signed(w.cond[0]), chw_signed(w.cond[1])};
    VideoTrainStep r;
    r.out = m.forward(assemble_input(xi, cond, lo), step_i, task_row, lo);
    Tensor target = Tensor::from(Shape{kSeqFrames, 3, kRes, kRes}, eps);
    r.loss = mse(narrow(r.out.eps, 0, 1, kSeqFrames - 1), narrow(target, 0, 1, kSeqFrames - 1));
    return r;
}

// Ancestral sampling of the full two-view clip. Returns decoded frames per
// view id plus the conditional branch's feature taps from every denoising
// step, coarse to fine, for downstream action readout.
struct SampledVideo {
    std::array<std::array<sim::Image, kGroupLen>, data::kViews> frames;
    std::vector<std::array<Tensor, kNumTaps>> taps;  // one entry per sampler step
    std::vector<double> x;                           // final signed sequence
};

inline SampledVideo generate_video(const VideoDenoiser& m, const std::array<sim::Image, 2>& cond,
                                   int task_row, const SamplerConfig& sc, Rng& rng,
                                   const FrameLayout& lo = FrameLayout::standard()) {
    validate_layout(lo);
    NoGradGuard ng;
    const std::array<std::vector<double>, 2> c0 = {chw_signed(cond[0]), chw_signed(cond[1])};
    SampledVideo out;
    out.taps.reserve(sc.indices.size());
    auto eps_fn = [&](const std::vector<double>& x, int i, int) {
        Tensor input = assemble_input(x, c0, lo);
        VideoOut co = m.forward(input, i, task_row, lo);
        std::vector<double> eps = co.eps.data();
        if (sc.cfg_scale != 1.0) {
            VideoOut un = m.forward(input, i, kNullTaskRow, lo);
            cfg_combine(sc.cfg_scale, un.eps.data().data(), eps.data(), eps.size());
        }
        out.taps.push_back(co.taps);
        return eps;
    };
    out.x = sample_loop(m.sched, sc, kSeqSize, rng, eps_fn);
    for (int j = 0; j < kGroupLen; ++j) {
        out.frames[static_cast<size_t>(lo.view[1])][static_cast<size_t>(j)] =
            hwc_unit(out.x.data() + static_cast<size_t>(1 + j) * kFramePixels);
        out.frames[static_cast<size_t>(lo.view[1 + kGroupLen])][static_cast<size_t>(j)] =
            hwc_unit(out.x.data() + static_cast<size_t>(1 + kGroupLen + j) * kFramePixels);
    }
    return out;
}

inline Json layout_meta() {
    Json taps = Json::array();
    for (const auto& s : tap_shapes()) taps.push_back(s);
    return Json{{"frames", kSeqFrames},
                {"group_len", kGroupLen},
                {"views", data::kViews},
                {"channels", Json::array({kBaseCh, kDeepCh})},
                {"task_dim", kTaskDim},
                {"tap_shapes", taps}};
}

inline Checkpoint video_checkpoint(const VideoDenoiser& m) {
    Checkpoint ck;
    ck.meta["kind"] = "video_denoiser";
    ck.meta["layout"] = layout_meta();
    ck.meta["schedule"] = Json{{"T", m.sched.T},
                               {"beta_start", m.sched.beta.front()},
                               {"beta_end", m.sched.beta.back()}};
    pack_params(ck, m.ps);
    return ck;
}

inline VideoDenoiser load_video_denoiser(const Checkpoint& ck) {
    if (!ck.meta.contains("kind") || ck.meta["kind"] != "video_denoiser")
        throw ConfigError("checkpoint does not hold a video denoiser");
    if (ck.meta["layout"] != layout_meta())
        throw ConfigError("video checkpoint layout disagrees with this build: " +
                          ck.meta["layout"].dump());
    const auto& sc = ck.meta["schedule"];
    VideoDenoiser m = VideoDenoiser::build(0);
    m.sched = NoiseSchedule::linear(sc["T"].get<int>(), sc["beta_start"].get<double>(),
                                          sc["beta_end"].get<double>());
    unpack_params(ck, m.ps);
    return m;
}

inline VideoDenoiser load_video_denoiser(const std::filesystem::path& path) {
    return load_video_denoiser(load_checkpoint(path));
}

}  // namespace vpl::video
