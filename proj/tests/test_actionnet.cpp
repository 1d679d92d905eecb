#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <limits>

#include "test_util.hpp"
#include "vpl/actionnet.hpp"

using namespace vpl;
using namespace vpl::act;
using Catch::Matchers::ContainsSubstring;

namespace {

data::TrainingWindow synth_window(uint64_t seed) {
    Rng rng(seed, 77);
    data::TrainingWindow w;
    w.t0 = 0;
    w.horizon_steps = 32;
    auto img = [&]() {
        sim::Image im(video::kFramePixels);
        for (auto& p : im) p = rng.uniform();
        return im;
    };
    for (int v = 0; v < 2; ++v) {
        w.cond[static_cast<size_t>(v)] = img();
        for (int j = 0; j < video::kGroupLen; ++j)
            w.targets[static_cast<size_t>(v)][static_cast<size_t>(j)] = img();
    }
    for (auto& a : w.actions)
        for (auto& c : a) c = rng.uniform(-1.0, 1.0);
    return w;
}

std::vector<double> gauss_vec(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.gauss();
    return v;
}

// Taps from a grad-free video forward at the same noise level the action
// loss will train against.
std::array<Tensor, video::kNumTaps> taps_at(const video::VideoDenoiser& vm,
                                            const data::TrainingWindow& w, int task_row, int i,
                                            const std::vector<double>& eps) {
    NoGradGuard ng;
    return video::video_window_step(vm, w, task_row, i, eps).out.taps;
}

data::NormStats hand_stats() {
    data::NormStats st;
    st.lo = {-0.7, -0.6, 0.0};
    st.hi = {0.7, 0.6, 1.0};
    st.floored = {false, false, false};
    return st;
}

}  // namespace

TEST_CASE("the adapter fuses taps into a fixed-width vector for any spatial size") {
    PolicyNet pn = PolicyNet::build(11);
    std::array<Tensor, video::kNumTaps> zero_native = {
        Tensor(Shape{17, 64, 4, 4}), Tensor(Shape{17, 64, 4, 4}), Tensor(Shape{17, 32, 8, 8})};
    std::array<Tensor, video::kNumTaps> zero_wide = {
        Tensor(Shape{17, 64, 8, 8}), Tensor(Shape{17, 64, 16, 16}), Tensor(Shape{17, 32, 32, 32})};
    NoGradGuard ng;
    Tensor h0 = adapt(pn.adapter, zero_native);
    REQUIRE(h0.shape() == Shape({kHDim}));
    // zero taps reduce to the conv biases, so spatial extent cannot matter
    Tensor h1 = adapt(pn.adapter, zero_wide);
    REQUIRE(h0.data() == h1.data());

    Rng rng(12, 3);
    std::array<Tensor, video::kNumTaps> noisy = zero_native;
    noisy[0] = Tensor::from(Shape{17, 64, 4, 4}, gauss_vec(17 * 64 * 16, rng));
    Tensor h2 = adapt(pn.adapter, noisy);
    REQUIRE(h2.data() != h0.data());

    std::array<Tensor, video::kNumTaps> drifted = zero_native;
    drifted[1] = Tensor(Shape{17, 48, 4, 4});
    REQUIRE_THROWS_AS(adapt(pn.adapter, drifted), ConfigError);
    REQUIRE_THROWS_WITH(adapt(pn.adapter, drifted), ContainsSubstring("built for"));
}

TEST_CASE("action losses cannot reach video parameters") {
    video::VideoDenoiser vm = video::VideoDenoiser::build(21);
    PolicyNet pn = PolicyNet::build(22);
    const data::TrainingWindow w = synth_window(3);
    Rng rng(23, 5);
    const std::vector<double> eps_v = gauss_vec(video::kSeqSize, rng);
    const std::vector<double> eps_a = gauss_vec(kActSize, rng);

    // grad-mode video forward, so the taps carry a live graph into vm
    video::VideoTrainStep st = video::video_window_step(vm, w, 2, 500, eps_v);
    vm.ps.zero_grads();
    pn.ps.zero_grads();
    Tensor loss = action_window_loss(pn, st.out.taps, w, 500, eps_a);
    backward(loss);

    for (auto& p : pn.ps.params) {
        bool moved = false;
        for (double g : p.grad())
            if (g != 0.0) moved = true;
        INFO(p.name());
        REQUIRE(moved);
    }
    for (auto& p : vm.ps.params)
        for (double g : p.grad()) REQUIRE(g == 0.0);

    // the same taps do reach vm through the video loss, so the cut above
    // came from the adapter boundary and not from a dead graph
    backward(st.loss);
    bool video_moved = false;
    for (auto& p : vm.ps.params)
        for (double g : p.grad())
            if (g != 0.0) video_moved = true;
    REQUIRE(video_moved);
}

TEST_CASE("both policies start near unit loss and every parameter learns") {
    video::VideoDenoiser vm = video::VideoDenoiser::build(31);
    PolicyNet pn = PolicyNet::build(32);
    BaselinePolicy bp = BaselinePolicy::build(33);
    const data::TrainingWindow w = synth_window(6);
    Rng rng(34, 5);

    double acc_p = 0.0, acc_b = 0.0;
    const int reps = 4;
    for (int r = 0; r < reps; ++r) {
        const int i = static_cast<int>(rng.below(static_cast<uint64_t>(pn.sched.T)));
        const std::vector<double> eps_v = gauss_vec(video::kSeqSize, rng);
        const std::vector<double> eps_a = gauss_vec(kActSize, rng);
        auto taps = taps_at(vm, w, 1, i, eps_v);
        NoGradGuard ng;
        acc_p += action_window_loss(pn, taps, w, i, eps_a).item();
        acc_b += baseline_window_loss(bp, w, 1, i, eps_a).item();
    }
    REQUIRE(acc_p / reps > 0.8);
    REQUIRE(acc_p / reps < 1.2);
    REQUIRE(acc_b / reps > 0.8);
    REQUIRE(acc_b / reps < 1.2);

    const std::vector<double> eps_v = gauss_vec(video::kSeqSize, rng);
    const std::vector<double> eps_a = gauss_vec(kActSize, rng);
    auto taps = taps_at(vm, w, 1, 700, eps_v);
    pn.ps.zero_grads();
    backward(action_window_loss(pn, taps, w, 700, eps_a));
    for (auto& p : pn.ps.params) {
        bool moved = false;
        for (double g : p.grad())
            if (g != 0.0) moved = true;
        INFO(p.name());
        REQUIRE(moved);
    }
    bp.ps.zero_grads();
    backward(baseline_window_loss(bp, w, 1, 700, eps_a));
    for (auto& p : bp.ps.params) {
        bool moved = false;
        for (double g : p.grad())
            if (g != 0.0) moved = true;
        INFO(p.name());
        REQUIRE(moved);
    }
}

TEST_CASE("finite differences validate both action training gradients") {
    video::VideoDenoiser vm = video::VideoDenoiser::build(41);
    PolicyNet pn = PolicyNet::build(42);
    BaselinePolicy bp = BaselinePolicy::build(43);
    const data::TrainingWindow w = synth_window(8);
    Rng rng(44, 5);
    const std::vector<double> eps_v = gauss_vec(video::kSeqSize, rng);
    const std::vector<double> eps_a = gauss_vec(kActSize, rng);
    const auto taps = taps_at(vm, w, 0, 400, eps_v);

    Rng fd_rng(45, 6);
    FdReport rp = check_param_grads(
        pn.ps, [&] { return action_window_loss(pn, taps, w, 400, eps_a); }, fd_rng, 2, 1e-4);
    INFO(rp.max_rel_err);
    REQUIRE(rp.max_rel_err < 1e-4);

    FdReport rb = check_param_grads(
        bp.ps, [&] { return baseline_window_loss(bp, w, 3, 400, eps_a); }, fd_rng, 2, 1e-4);
    INFO(rb.max_rel_err);
    REQUIRE(rb.max_rel_err < 1e-4);
}

TEST_CASE("the conditioning vector steers the prediction") {
    PolicyNet pn = PolicyNet::build(51);
    Rng rng(52, 5);
    NoGradGuard ng;
    Tensor a = Tensor::from(Shape{kHorizon, kDim}, gauss_vec(kActSize, rng));
    Tensor ha = Tensor::from(Shape{kHDim}, gauss_vec(kHDim, rng));
    std::vector<double> bumped = ha.data();
    bumped[7] += 1.0;
    Tensor hb = Tensor::from(Shape{kHDim}, bumped);
    Tensor ea = predict_action_eps(pn.dn, a, 300, ha);
    Tensor eb = predict_action_eps(pn.dn, a, 300, hb);
    REQUIRE(ea.shape() == Shape({kHorizon, kDim}));
    REQUIRE(ea.data() != eb.data());
    // the denoising step index steers it as well
    Tensor ec = predict_action_eps(pn.dn, a, 301, ha);
    REQUIRE(ea.data() != ec.data());
}

TEST_CASE("non-finite activations abort with the offending layer name") {
    PolicyNet pn = PolicyNet::build(61);
    BaselinePolicy bp = BaselinePolicy::build(62);
    Rng rng(63, 5);
    NoGradGuard ng;
    Tensor a = Tensor::from(Shape{kHorizon, kDim}, gauss_vec(kActSize, rng));
    Tensor h = Tensor::from(Shape{kHDim}, gauss_vec(kHDim, rng));

    pn.ps.find("action.mid.conv.w")->data()[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(predict_action_eps(pn.dn, a, 100, h), NumericError);
    REQUIRE_THROWS_WITH(predict_action_eps(pn.dn, a, 100, h), ContainsSubstring("mid"));

    std::array<Tensor, video::kNumTaps> taps = {Tensor(Shape{17, 64, 4, 4}),
                                                Tensor(Shape{17, 64, 4, 4}),
                                                Tensor(Shape{17, 32, 8, 8})};
    pn.ps.find("adapter.w2")->data()[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_WITH(adapt(pn.adapter, taps), ContainsSubstring("adapter"));

    const data::TrainingWindow w = synth_window(9);
    bp.ps.find("baseline.w2")->data()[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_WITH(baseline_condition(bp, w.cond, 0), ContainsSubstring("baseline encoder"));
}

TEST_CASE("lockstep sampling stays synchronized and lands in the action range") {
    video::VideoDenoiser vm = video::VideoDenoiser::build(71);
    PolicyNet pn = PolicyNet::build(72);
    const data::NormStats stats = hand_stats();
    const data::TrainingWindow w = synth_window(10);
    SamplerConfig sc = SamplerConfig::strided(vm.sched, 6, 2.0);

    Rng r1(101, rng_stream::kSampler);
    ActionSample a = sample_actions(vm, pn, stats, w.cond, 4, sc, r1);
    Rng r2(101, rng_stream::kSampler);
    ActionSample b = sample_actions(vm, pn, stats, w.cond, 4, sc, r2);
    Rng r3(102, rng_stream::kSampler);
    ActionSample c = sample_actions(vm, pn, stats, w.cond, 4, sc, r3);

    REQUIRE(a.steps == sc.indices);
    REQUIRE(a.vid.taps.size() == sc.indices.size());
    REQUIRE(a.actions == b.actions);
    REQUIRE(a.vid.x == b.vid.x);
    REQUIRE(a.actions != c.actions);

    for (int t = 0; t < kHorizon; ++t)
        for (int d = 0; d < kDim; ++d) {
            REQUIRE(a.actions[static_cast<size_t>(t)][static_cast<size_t>(d)] >= stats.lo[d]);
            REQUIRE(a.actions[static_cast<size_t>(t)][static_cast<size_t>(d)] <= stats.hi[d]);
        }
    for (int v = 0; v < 2; ++v)
        for (const auto& img : a.vid.frames[static_cast<size_t>(v)])
            for (double p : img) {
                REQUIRE(p >= 0.0);
                REQUIRE(p <= 1.0);
            }
}

TEST_CASE("the baseline conditioner separates tasks and samples deterministically") {
    BaselinePolicy bp = BaselinePolicy::build(81);
    const data::TrainingWindow w = synth_window(12);
    NoGradGuard ng;
    Tensor h0 = baseline_condition(bp, w.cond, 0);
    Tensor h3 = baseline_condition(bp, w.cond, 3);
    REQUIRE(h0.shape() == Shape({kHDim}));
    REQUIRE(h0.data() != h3.data());
    REQUIRE_THROWS_AS(baseline_condition(bp, w.cond, 8), Error);

    const data::NormStats stats = hand_stats();
    SamplerConfig sc = SamplerConfig::strided(bp.sched, 6, 1.0);
    Rng r1(7, rng_stream::kSampler);
    auto s1 = sample_baseline_actions(bp, stats, w.cond, 2, sc, r1);
    Rng r2(7, rng_stream::kSampler);
    auto s2 = sample_baseline_actions(bp, stats, w.cond, 2, sc, r2);
    REQUIRE(s1 == s2);
    for (int t = 0; t < kHorizon; ++t)
        for (int d = 0; d < kDim; ++d) {
            REQUIRE(s1[static_cast<size_t>(t)][static_cast<size_t>(d)] >= stats.lo[d]);
            REQUIRE(s1[static_cast<size_t>(t)][static_cast<size_t>(d)] <= stats.hi[d]);
        }
}

TEST_CASE("checkpoints round-trip both policies and refuse incomplete files") {
    PolicyNet pn = PolicyNet::build(91);
    const data::NormStats stats = hand_stats();
    const auto dir = std::filesystem::path("tmp_actionnet");
    std::filesystem::create_directories(dir);

    save_checkpoint(dir / "policy.vpl", policy_checkpoint(pn, stats, "frozen_video"));
    LoadedPolicy lp = load_policy(dir / "policy.vpl");
    REQUIRE(lp.coupling == "frozen_video");
    REQUIRE(lp.net.sched.T == pn.sched.T);
    for (size_t pi = 0; pi < pn.ps.params.size(); ++pi) {
        const auto& orig = pn.ps.params[pi].data();
        const auto& got = lp.net.ps.params[pi].data();
        REQUIRE(lp.net.ps.params[pi].name() == pn.ps.params[pi].name());
        for (size_t i = 0; i < orig.size(); ++i) REQUIRE(got[i] == round_f32(orig[i]));
    }
    for (int d = 0; d < kDim; ++d) {
        REQUIRE(lp.stats.denormalize1(d, -1.0) == stats.denormalize1(d, -1.0));
        REQUIRE(lp.stats.denormalize1(d, 1.0) == stats.denormalize1(d, 1.0));
    }
    // second trip is exact, so loaded policies reproduce predictions bitwise
    save_checkpoint(dir / "policy.vpl", policy_checkpoint(lp.net, lp.stats, lp.coupling));
    LoadedPolicy lp2 = load_policy(dir / "policy.vpl");
    Rng rng(92, 5);
    NoGradGuard ng;
    Tensor a = Tensor::from(Shape{kHorizon, kDim}, gauss_vec(kActSize, rng));
    Tensor h = Tensor::from(Shape{kHDim}, gauss_vec(kHDim, rng));
    REQUIRE(predict_action_eps(lp.net.dn, a, 250, h).data() ==
            predict_action_eps(lp2.net.dn, a, 250, h).data());

    Checkpoint broken = policy_checkpoint(pn, stats);
    broken.meta["kind"] = "video_denoiser";
    REQUIRE_THROWS_AS(load_policy(broken), ConfigError);
    broken = policy_checkpoint(pn, stats);
    broken.meta.erase("norm_stats");
    REQUIRE_THROWS_AS(load_policy(broken), MissingArtifactError);
    broken = policy_checkpoint(pn, stats);
    broken.meta["layout"]["tap_channels"][2] = 16;
    REQUIRE_THROWS_WITH(load_policy(broken), ContainsSubstring("layout"));

    BaselinePolicy bp = BaselinePolicy::build(93);
    save_checkpoint(dir / "baseline.vpl", baseline_checkpoint(bp, stats));
    LoadedBaseline lb = load_baseline(dir / "baseline.vpl");
    for (size_t pi = 0; pi < bp.ps.params.size(); ++pi) {
        const auto& orig = bp.ps.params[pi].data();
        const auto& got = lb.net.ps.params[pi].data();
        for (size_t i = 0; i < orig.size(); ++i) REQUIRE(got[i] == round_f32(orig[i]));
    }
    Checkpoint bb = baseline_checkpoint(bp, stats);
    bb.meta.erase("norm_stats");
    REQUIRE_THROWS_AS(load_baseline(bb), MissingArtifactError);
}

TEST_CASE("a single demo window overfits to small action loss") {
    auto demo = data::collect_demo(sim::Task::pick_place_left, 41);
    REQUIRE(demo.has_value());
    data::NormStats stats = data::compute_norm_stats(std::vector<data::Demo>{*demo});
    const data::TrainingWindow w = data::sample_window(*demo, 2, 32, stats);

    video::VideoDenoiser vm = video::VideoDenoiser::build(43);
    PolicyNet pn = PolicyNet::build(44);
    Adam opt;
    opt.init(pn.ps);
    Rng rng(45, rng_stream::kInit);
    double tail = 0.0;
    int tail_n = 0;
    const int steps = 2000;
    for (int it = 0; it < steps; ++it) {
        opt.lr = 1e-4 + (2.5e-3 - 1e-4) * 0.5 * (1.0 + std::cos(3.14159265358979 * it / steps));
        const int i = static_cast<int>(rng.below(static_cast<uint64_t>(pn.sched.T)));
        std::vector<double> eps_v(video::kSeqSize);
        for (auto& v : eps_v) v = rng.gauss();
        std::vector<double> eps_a(kActSize);
        for (auto& v : eps_a) v = rng.gauss();
        auto taps = taps_at(vm, w, static_cast<int>(sim::Task::pick_place_left), i, eps_v);
        pn.ps.zero_grads();
        Tensor loss = action_window_loss(pn, taps, w, i, eps_a);
        backward(loss);
        opt.step(pn.ps);
        if (it >= steps - 50) {
            tail += loss.item();
            ++tail_n;
        }
    }
    REQUIRE(tail / tail_n < 0.05);
}
