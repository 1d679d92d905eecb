#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "vpl/checkpoint.hpp"

using namespace vpl;

namespace {

std::filesystem::path tmp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("checkpoint round-trips values at 32-bit precision with order preserved") {
    Rng rng(1, 0);
    ParamSet ps;
    Tensor a = ps.add("layer1/w", {3, 4});
    fill_gauss(a, rng, 1.0);
    Tensor b = ps.add("layer1/b", {4});
    fill_gauss(b, rng, 1.0);

    Checkpoint ck;
    ck.meta["variant"] = "unit";
    ck.meta["nested"] = {{"lr", 1e-3}, {"steps", 42}};
    pack_params(ck, ps);

    auto path = tmp_file("vpl_roundtrip.ckpt");
    save_checkpoint(path, ck);
    Checkpoint back = load_checkpoint(path);

    REQUIRE(back.meta["variant"] == "unit");
    REQUIRE(back.meta["nested"]["steps"] == 42);
    REQUIRE(back.arrays.size() == 2);
    REQUIRE(back.arrays[0].name() == "layer1/w");
    REQUIRE(back.arrays[1].name() == "layer1/b");
    REQUIRE(back.arrays[0].shape() == Shape{3, 4});
    for (size_t i = 0; i < a.numel(); ++i)
        REQUIRE(back.arrays[0].data()[i] == round_f32(a.data()[i]));
    std::filesystem::remove(path);
}

TEST_CASE("saving a loaded checkpoint reproduces the file byte for byte") {
    Rng rng(2, 0);
    ParamSet ps;
    Tensor w = ps.add("w", {16});
    fill_gauss(w, rng, 0.7);
    Checkpoint ck;
    ck.meta["k"] = "v";
    pack_params(ck, ps);

    auto p1 = tmp_file("vpl_idem1.ckpt");
    auto p2 = tmp_file("vpl_idem2.ckpt");
    save_checkpoint(p1, ck);
    save_checkpoint(p2, load_checkpoint(p1));
    REQUIRE(file_bytes(p1) == file_bytes(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("corrupt or absent checkpoints are rejected with clear errors") {
    REQUIRE_THROWS_AS(load_checkpoint(tmp_file("vpl_nonexistent.ckpt")), MissingArtifactError);

    auto p = tmp_file("vpl_badmagic.ckpt");
    {
        std::ofstream f(p, std::ios::binary);
        f << "NOPE_this_is_not_a_checkpoint";
    }
    REQUIRE_THROWS_WITH(load_checkpoint(p), Catch::Matchers::ContainsSubstring("magic"));
    std::filesystem::remove(p);

    auto q = tmp_file("vpl_truncated.ckpt");
    {
        ParamSet ps;
        Tensor w = ps.add("w", {64});
        Checkpoint ck;
        pack_params(ck, ps);
        save_checkpoint(q, ck);
        std::filesystem::resize_file(q, std::filesystem::file_size(q) - 32);
    }
    REQUIRE_THROWS_WITH(load_checkpoint(q), Catch::Matchers::ContainsSubstring("truncated"));
    std::filesystem::remove(q);
}

TEST_CASE("unpacking into a mismatched parameter shape is rejected") {
    ParamSet src;
    src.add("w", {4, 4});
    Checkpoint ck;
    pack_params(ck, src);
    auto p = tmp_file("vpl_shape.ckpt");
    save_checkpoint(p, ck);

    ParamSet dst;
    dst.add("w", {2, 8});
    Checkpoint loaded = load_checkpoint(p);
    REQUIRE_THROWS_AS(unpack_params(loaded, dst), ShapeError);

    ParamSet missing;
    missing.add("other", {4, 4});
    REQUIRE_THROWS_WITH(unpack_params(loaded, missing),
                        Catch::Matchers::ContainsSubstring("other"));
    std::filesystem::remove(p);
}

TEST_CASE("optimizer state rides along and restores for exact resume") {
    Rng rng(3, 0);
    ParamSet ps;
    Tensor w = ps.add("w", {8});
    fill_gauss(w, rng, 1.0);
    Adam opt;
    opt.lr = 3e-3;
    opt.init(ps);
    for (int i = 0; i < 7; ++i) {
        ps.zero_grads();
        backward(mse(w, Tensor({8}, 0.25)));
        opt.step(ps);
    }

    Checkpoint ck;
    pack_params(ck, ps);
    pack_adam(ck, ps, opt);
    auto p = tmp_file("vpl_adam.ckpt");
    save_checkpoint(p, ck);

    ParamSet ps2;
    Tensor w2 = ps2.add("w", {8});
    Adam opt2;
    Checkpoint loaded = load_checkpoint(p);
    unpack_params(loaded, ps2);
    REQUIRE(unpack_adam(loaded, ps2, opt2));
    REQUIRE(opt2.t == 7);
    REQUIRE(opt2.lr == Catch::Approx(3e-3));
    for (size_t i = 0; i < 8; ++i) {
        REQUIRE(opt2.m[0][i] == round_f32(opt.m[0][i]));
        REQUIRE(opt2.v[0][i] == round_f32(opt.v[0][i]));
    }

    // resuming twice from the same file gives bitwise-identical trajectories,
    // and the resumed loss stays close to the uninterrupted run
    auto resume_run = [&]() {
        ParamSet rp;
        Tensor rw = rp.add("w", {8});
        Adam ro;
        Checkpoint c = load_checkpoint(p);
        unpack_params(c, rp);
        unpack_adam(c, rp, ro);
        double last = 0.0;
        for (int i = 0; i < 7; ++i) {
            rp.zero_grads();
            Tensor loss = mse(rw, Tensor({8}, 0.25));
            last = loss.item();
            backward(loss);
            ro.step(rp);
        }
        return std::make_pair(param_hash(rp), last);
    };
    auto [h1, l1] = resume_run();
    auto [h2, l2] = resume_run();
    REQUIRE(h1 == h2);
    REQUIRE(l1 == l2);

    double cont_last = 0.0;
    for (int i = 0; i < 7; ++i) {
        ps.zero_grads();
        Tensor loss = mse(w, Tensor({8}, 0.25));
        cont_last = loss.item();
        backward(loss);
        opt.step(ps);
    }
    REQUIRE(l1 == Catch::Approx(cont_last).margin(1e-6));
    std::filesystem::remove(p);
}
