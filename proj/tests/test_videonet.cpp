#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <limits>

#include "test_util.hpp"
#include "vpl/videonet.hpp"

using namespace vpl;
using namespace vpl::video;
using Catch::Matchers::ContainsSubstring;

namespace {

data::TrainingWindow synth_window(uint64_t seed) {
    Rng rng(seed, 77);
    data::TrainingWindow w;
    w.t0 = 0;
    w.horizon_steps = 32;
    auto img = [&]() {
        sim::Image im(kFramePixels);
        for (auto& p : im) p = rng.uniform();
        return im;
    };
    for (int v = 0; v < 2; ++v) {
        w.cond[static_cast<size_t>(v)] = img();
        for (int j = 0; j < kGroupLen; ++j) w.targets[static_cast<size_t>(v)][static_cast<size_t>(j)] = img();
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

}  // namespace

TEST_CASE("layout validation names the offending position") {
    FrameLayout lo = FrameLayout::standard();
    lo.view[5] = 2;
    REQUIRE_THROWS_WITH(validate_layout(lo), ContainsSubstring("position 5"));
    lo = FrameLayout::standard();
    lo.view[12] = 0;
    REQUIRE_THROWS_WITH(validate_layout(lo), ContainsSubstring("position 12"));
    lo = FrameLayout::standard();
    for (int j = 0; j < kGroupLen; ++j) lo.view[static_cast<size_t>(1 + kGroupLen + j)] = 0;
    REQUIRE_THROWS_WITH(validate_layout(lo), ContainsSubstring("position 9"));
    lo = FrameLayout::standard();
    lo.view[0] = 1;
    REQUIRE_THROWS_WITH(validate_layout(lo), ContainsSubstring("position 0"));
    REQUIRE_NOTHROW(validate_layout(FrameLayout::standard()));
    REQUIRE_NOTHROW(validate_layout(FrameLayout::swapped()));
}

TEST_CASE("a zero-noise static window makes noisy and conditioning channels agree") {
    data::TrainingWindow w = synth_window(4);
    w.horizon_steps = 0;
    for (int v = 0; v < 2; ++v)
        for (int j = 0; j < kGroupLen; ++j)
            w.targets[static_cast<size_t>(v)][static_cast<size_t>(j)] = w.cond[static_cast<size_t>(v)];
    const FrameLayout lo = FrameLayout::standard();
    const std::vector<double> x0 = window_x0(w, lo);
    const std::array<std::vector<double>, 2> cond = {chw_signed(w.cond[0]), chw_signed(w.cond[1])};
    Tensor input = assemble_input(x0, cond, lo);
    for (int f = 0; f < kSeqFrames; ++f) {
        const double* fr = input.data().data() + static_cast<size_t>(f) * 2 * kFramePixels;
        for (size_t i = 0; i < kFramePixels; ++i) REQUIRE(fr[i] == fr[kFramePixels + i]);
    }
}

TEST_CASE("pixel conversions round-trip and clamp to the unit range") {
    Rng rng(5, 0);
    sim::Image img(kFramePixels);
    for (auto& p : img) p = rng.uniform();
    std::vector<double> chw = chw_signed(img);
    sim::Image back = hwc_unit(chw.data());
    REQUIRE(test::max_abs_diff(back, img) < 1e-15);
    std::vector<double> wild(kFramePixels, 3.7);
    wild[0] = -9.0;
    sim::Image clamped = hwc_unit(wild.data());
    REQUIRE(clamped[0] == 0.0);
    for (size_t i = 1; i < clamped.size(); ++i) REQUIRE(clamped[i] == 1.0);
}

TEST_CASE("swapping the view groups permutes outputs exactly at init") {
    VideoDenoiser m = VideoDenoiser::build(7);
    Rng rng(8, 1);
    std::vector<double> noisy = gauss_vec(kSeqSize, rng);
    std::array<std::vector<double>, 2> cond;
    for (int v = 0; v < 2; ++v) cond[static_cast<size_t>(v)] = gauss_vec(kFramePixels, rng);

    std::vector<double> swapped(kSeqSize);
    std::copy_n(noisy.data(), kFramePixels, swapped.data());
    for (int j = 0; j < kGroupLen; ++j) {
        std::copy_n(noisy.data() + static_cast<size_t>(1 + kGroupLen + j) * kFramePixels, kFramePixels,
                    swapped.data() + static_cast<size_t>(1 + j) * kFramePixels);
        std::copy_n(noisy.data() + static_cast<size_t>(1 + j) * kFramePixels, kFramePixels,
                    swapped.data() + static_cast<size_t>(1 + kGroupLen + j) * kFramePixels);
    }
    NoGradGuard ng;
    VideoOut a = m.forward(assemble_input(noisy, cond, FrameLayout::standard()), 350, 2,
                           FrameLayout::standard());
    VideoOut b = m.forward(assemble_input(swapped, cond, FrameLayout::swapped()), 350, 2,
                           FrameLayout::swapped());
    for (int j = 0; j < kGroupLen; ++j) {
        const size_t fa = static_cast<size_t>(1 + j) * kFramePixels;
        const size_t fb = static_cast<size_t>(1 + kGroupLen + j) * kFramePixels;
        for (size_t i = 0; i < kFramePixels; ++i) {
            REQUIRE(a.eps.data()[fa + i] == b.eps.data()[fb + i]);
            REQUIRE(a.eps.data()[fb + i] == b.eps.data()[fa + i]);
        }
    }
    // taps permute the same way (coarsest tap: 64 channels at 4x4)
    const size_t tapf = static_cast<size_t>(kDeepCh) * 4 * 4;
    for (int j = 0; j < kGroupLen; ++j)
        for (size_t i = 0; i < tapf; ++i)
            REQUIRE(a.taps[0].data()[static_cast<size_t>(1 + j) * tapf + i] ==
                    b.taps[0].data()[static_cast<size_t>(1 + kGroupLen + j) * tapf + i]);
}

TEST_CASE("every parameter moves on the first batch") {
    VideoDenoiser m = VideoDenoiser::build(3);
    Rng rng(9, 2);
    m.ps.zero_grads();
    data::TrainingWindow w1 = synth_window(10), w2 = synth_window(11);
    Tensor l1 = video_window_step(m, w1, 2, 517, gauss_vec(kSeqSize, rng)).loss;
    Tensor l2 = video_window_step(m, w2, kNullTaskRow, 41, gauss_vec(kSeqSize, rng)).loss;
    backward(mul_scalar(add(l1, l2), 0.5));
    for (auto& p : m.ps.params) {
        double mx = 0.0;
        for (double g : p.grad()) mx = std::max(mx, std::abs(g));
        INFO("parameter " << p.name());
        REQUIRE(mx > 0.0);
    }
}

TEST_CASE("initial loss sits near one for unit noise") {
    VideoDenoiser m = VideoDenoiser::build(21);
    Rng rng(22, 3);
    NoGradGuard ng;
    double total = 0.0;
    for (int k = 0; k < 4; ++k) {
        auto st = video_window_step(m, synth_window(30 + static_cast<uint64_t>(k)), k % 2 ? 3 : kNullTaskRow,
                                    100 + 250 * k, gauss_vec(kSeqSize, rng));
        total += st.loss.item();
    }
    REQUIRE(total / 4.0 > 0.8);
    REQUIRE(total / 4.0 < 1.2);
}

TEST_CASE("finite differences validate the video training gradient") {
    VideoDenoiser m = VideoDenoiser::build(13);
    Rng eps_rng(14, 4);
    const data::TrainingWindow w = synth_window(15);
    const std::vector<double> eps = gauss_vec(kSeqSize, eps_rng);
    auto builder = [&]() { return video_window_step(m, w, 1, 333, eps).loss; };
    Rng coord_rng(16, 5);
    FdReport rep = check_param_grads(m.ps, builder, coord_rng, 2, 1e-4);
    INFO("worst coord " << rep.worst_coord << " analytic " << rep.worst_analytic << " numeric "
                        << rep.worst_numeric);
    REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("pad-frame noise cannot reach the loss or the gradients") {
    VideoDenoiser m = VideoDenoiser::build(17);
    Rng rng(18, 6);
    const data::TrainingWindow w = synth_window(19);
    std::vector<double> eps = gauss_vec(kSeqSize, rng);
    m.ps.zero_grads();
    Tensor l0 = video_window_step(m, w, 4, 611, eps).loss;
    backward(l0);
    std::vector<std::vector<double>> grads0;
    for (auto& p : m.ps.params) grads0.push_back(p.grad());

    for (size_t i = 0; i < kFramePixels; ++i) eps[i] += 3.0 + static_cast<double>(i % 5);
    m.ps.zero_grads();
    Tensor l1 = video_window_step(m, w, 4, 611, eps).loss;
    backward(l1);
    REQUIRE(l0.item() == l1.item());
    for (size_t pi = 0; pi < m.ps.params.size(); ++pi)
        REQUIRE(test::max_abs_diff(grads0[pi], m.ps.params[pi].grad()) == 0.0);
}

TEST_CASE("null and task conditioning produce different predictions") {
    VideoDenoiser m = VideoDenoiser::build(23);
    Rng rng(24, 7);
    std::vector<double> noisy = gauss_vec(kSeqSize, rng);
    std::array<std::vector<double>, 2> cond = {gauss_vec(kFramePixels, rng),
                                               gauss_vec(kFramePixels, rng)};
    NoGradGuard ng;
    Tensor input = assemble_input(noisy, cond, FrameLayout::standard());
    VideoOut with_task = m.forward(input, 200, 0, FrameLayout::standard());
    VideoOut with_null = m.forward(input, 200, kNullTaskRow, FrameLayout::standard());
    REQUIRE(test::max_abs_diff(with_task.eps.data(), with_null.eps.data()) > 0.0);
}

TEST_CASE("non-finite activations abort with the layer name") {
    VideoDenoiser m = VideoDenoiser::build(25);
    m.mid.sp.conv.w.data()[0] = std::numeric_limits<double>::quiet_NaN();
    Rng rng(26, 8);
    std::vector<double> noisy = gauss_vec(kSeqSize, rng);
    std::array<std::vector<double>, 2> cond = {gauss_vec(kFramePixels, rng),
                                               gauss_vec(kFramePixels, rng)};
    NoGradGuard ng;
    Tensor input = assemble_input(noisy, cond, FrameLayout::standard());
    REQUIRE_THROWS_AS(m.forward(input, 10, 1, FrameLayout::standard()), NumericError);
    REQUIRE_THROWS_WITH(m.forward(input, 10, 1, FrameLayout::standard()), ContainsSubstring("mid"));
}

TEST_CASE("sampling is bit-identical for a fixed seed and stays in range") {
    VideoDenoiser m = VideoDenoiser::build(11);
    sim::WorldState s = sim::reset(sim::Task::pick_place_left, 5, sim::Shift::none);
    const std::array<sim::Image, 2> cond = {sim::render(s, sim::View::scene),
                                            sim::render(s, sim::View::gripper)};
    const SamplerConfig sc = SamplerConfig::strided(m.sched, 6, 2.0);
    Rng r1(99, rng_stream::kSampler), r2(99, rng_stream::kSampler), r3(100, rng_stream::kSampler);
    SampledVideo a = generate_video(m, cond, 3, sc, r1);
    SampledVideo b = generate_video(m, cond, 3, sc, r2);
    SampledVideo c = generate_video(m, cond, 3, sc, r3);
    REQUIRE(a.x == b.x);
    REQUIRE(a.x != c.x);
    REQUIRE(a.taps.size() == 6);
    for (int k = 0; k < kNumTaps; ++k) REQUIRE(a.taps[0][static_cast<size_t>(k)].shape() == tap_shapes()[static_cast<size_t>(k)]);
    for (const auto& view : a.frames)
        for (const auto& fr : view)
            for (double p : fr) {
                REQUIRE(p >= 0.0);
                REQUIRE(p <= 1.0);
            }
}

TEST_CASE("checkpoints round-trip the denoiser at storage precision") {
    VideoDenoiser m = VideoDenoiser::build(29);
    const auto path = std::filesystem::path("tmp_videonet") / "denoiser.vpl";
    std::filesystem::create_directories(path.parent_path());
    save_checkpoint(path, video_checkpoint(m));
    VideoDenoiser r1 = load_video_denoiser(path);
    for (size_t pi = 0; pi < m.ps.params.size(); ++pi) {
        const auto& orig = m.ps.params[pi].data();
        const auto& got = r1.ps.params[pi].data();
        for (size_t i = 0; i < orig.size(); ++i) REQUIRE(got[i] == round_f32(orig[i]));
    }
    // a second trip is exact, so loaded models reproduce forwards bitwise
    save_checkpoint(path, video_checkpoint(r1));
    VideoDenoiser r2 = load_video_denoiser(path);
    Rng rng(31, 9);
    std::vector<double> noisy = gauss_vec(kSeqSize, rng);
    std::array<std::vector<double>, 2> cond = {gauss_vec(kFramePixels, rng),
                                               gauss_vec(kFramePixels, rng)};
    NoGradGuard ng;
    Tensor input = assemble_input(noisy, cond, FrameLayout::standard());
    VideoOut o1 = r1.forward(input, 77, 5, FrameLayout::standard());
    VideoOut o2 = r2.forward(input, 77, 5, FrameLayout::standard());
    REQUIRE(o1.eps.data() == o2.eps.data());

    Checkpoint broken = video_checkpoint(m);
    broken.meta["kind"] = "action_denoiser";
    REQUIRE_THROWS_AS(load_video_denoiser(broken), ConfigError);
    broken = video_checkpoint(m);
    broken.meta["layout"]["frames"] = 16;
    REQUIRE_THROWS_WITH(load_video_denoiser(broken), ContainsSubstring("layout"));
}

TEST_CASE("a single demo window overfits to small eps loss") {
    auto demo = data::collect_demo(sim::Task::pick_place_left, 41);
    REQUIRE(demo.has_value());
    data::NormStats stats = data::compute_norm_stats(std::vector<data::Demo>{*demo});
    const data::TrainingWindow w = data::sample_window(*demo, 2, 32, stats);

    VideoDenoiser m = VideoDenoiser::build(43);
    Adam opt;
    opt.lr = 2e-3;
    opt.init(m.ps);
    Rng rng(44, rng_stream::kInit);
    double tail = 0.0;
    int tail_n = 0;
    const int steps = 2000;
    for (int it = 0; it < steps; ++it) {
        const int i = static_cast<int>(rng.below(static_cast<uint64_t>(m.sched.T)));
        std::vector<double> eps(kSeqSize);
        for (auto& v : eps) v = rng.gauss();
        m.ps.zero_grads();
        Tensor loss = video_window_step(m, w, static_cast<int>(sim::Task::pick_place_left), i, eps).loss;
        backward(loss);
        opt.step(m.ps);
        if (it >= steps - 50) {
            tail += loss.item();
            ++tail_n;
        }
    }
    REQUIRE(tail / tail_n < 0.05);
}
