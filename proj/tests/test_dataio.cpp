#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vpl/dataio.hpp"

using namespace vpl;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::path("tmp_dataio") / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Sorted relative paths plus raw bytes of every regular file under a root.
std::map<std::string, std::string> dir_contents(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    }
    return out;
}

// A demo with recognizable content: every pixel of frame t in view v equals
// 0.5 * v + 0.01 * t, action t is (-1 + 2t/T, 0.5, alternating grip).
data::Demo synthetic_demo(int T) {
    data::Demo d;
    d.task_id = 2;
    d.seed = 7;
    const size_t fpix = size_t(sim::kFrameSize) * sim::kFrameSize * 3;
    for (int v = 0; v < 2; ++v)
        for (int t = 0; t <= T; ++t)
            d.frames[v].push_back(sim::Image(fpix, 0.5 * v + 0.01 * t));
    for (int t = 0; t < T; ++t)
        d.actions.push_back({-1.0 + 2.0 * t / T, 0.5, t % 2 ? 1.0 : -1.0});
    return d;
}

data::NormStats identity_stats() {
    data::NormStats st;
    for (int k = 0; k < data::kActionDim; ++k) {
        st.lo[k] = -1.0;
        st.hi[k] = 1.0;
    }
    return st;
}

}  // namespace

TEST_CASE("collect_demo is deterministic and ends in success") {
    auto a = data::collect_demo(sim::Task::open_drawer, 42);
    auto b = data::collect_demo(sim::Task::open_drawer, 42);
    REQUIRE(a.has_value());
    REQUIRE(b.has_value());
    REQUIRE(a->steps() >= 1);
    REQUIRE(a->steps() <= sim::kEpisodeSteps);
    REQUIRE(a->frames[0].size() == size_t(a->steps()) + 1);
    REQUIRE(a->frames[1].size() == size_t(a->steps()) + 1);
    REQUIRE(a->steps() == b->steps());
    for (int t = 0; t < a->steps(); ++t) {
        REQUIRE(a->actions[t].dx == b->actions[t].dx);
        REQUIRE(a->actions[t].dy == b->actions[t].dy);
        REQUIRE(a->actions[t].grip == b->actions[t].grip);
    }
    for (int v = 0; v < 2; ++v)
        for (int t = 0; t <= a->steps(); ++t) REQUIRE(a->frames[v][t] == b->frames[v][t]);

    // replaying the stored actions reproduces the terminal success
    sim::WorldState s = sim::reset(sim::Task::open_drawer, 42, sim::Shift::none);
    for (const auto& act : a->actions) s = sim::step(s, act);
    REQUIRE(sim::success(s, sim::Task::open_drawer));
}

TEST_CASE("demo files round-trip at storage precision") {
    const fs::path dir = fresh_dir("roundtrip");
    auto d = data::collect_demo(sim::Task::push_to_zone, 5);
    REQUIRE(d.has_value());
    const fs::path p = dir / "demo.vpd";
    data::save_demo(p, *d);

    data::Demo r = data::load_demo(p);
    REQUIRE(r.task_id == d->task_id);
    REQUIRE(r.seed == d->seed);
    REQUIRE(r.steps() == d->steps());
    for (int t = 0; t < d->steps(); ++t) {
        REQUIRE(r.actions[t].dx == d->actions[t].dx);  // already stored at f32 precision
        REQUIRE(r.actions[t].dy == d->actions[t].dy);
        REQUIRE(r.actions[t].grip == d->actions[t].grip);
    }
    for (int v = 0; v < 2; ++v)
        for (int t = 0; t <= d->steps(); ++t)
            for (size_t i = 0; i < r.frames[v][t].size(); ++i)
                REQUIRE(r.frames[v][t][i] == round_f32(d->frames[v][t][i]));

    // save(load(x)) is byte-identical
    const fs::path p2 = dir / "demo2.vpd";
    data::save_demo(p2, r);
    REQUIRE(slurp(p) == slurp(p2));
}

TEST_CASE("demo loading rejects wrong or missing files") {
    const fs::path dir = fresh_dir("badfiles");
    REQUIRE_THROWS_AS(data::load_demo(dir / "nope.vpd"), MissingArtifactError);

    Checkpoint ck;
    ck.meta = Json{{"x", 1}};
    save_checkpoint(dir / "wrong.vpd", ck);  // VPL1 magic, not VPD1
    REQUIRE_THROWS_WITH(data::load_demo(dir / "wrong.vpd"),
                        Catch::Matchers::ContainsSubstring("bad magic"));
}

TEST_CASE("collection writes a consistent dataset and recollection is byte-identical") {
    const std::vector<sim::Task> tasks = {sim::Task::pick_place_left, sim::Task::open_drawer,
                                          sim::Task::press_button};
    const fs::path d1 = fresh_dir("set_a");
    const fs::path d2 = fresh_dir("set_b");
    Json m1 = data::collect_demos(d1, tasks, 3, 1234);
    Json m2 = data::collect_demos(d2, tasks, 3, 1234);

    REQUIRE(fs::exists(d1 / "manifest.json"));
    REQUIRE(fs::exists(d1 / "stats.json"));
    REQUIRE(m1 == m2);

    const auto c1 = dir_contents(d1);
    REQUIRE(c1 == dir_contents(d2));
    // 3 tasks x 3 demos + manifest + stats
    REQUIRE(c1.size() == 11);

    // manifest counts agree with the files on disk
    for (const auto& entry : m1["tasks"]) {
        const std::string name = entry["name"].get<std::string>();
        REQUIRE(entry["failures"].get<int>() == 0);
        size_t files = 0;
        for (const auto& e : fs::directory_iterator(d1 / "demos" / name)) {
            (void)e;
            ++files;
        }
        REQUIRE(entry["count"].get<size_t>() == files);
        REQUIRE(entry["seeds"].size() == files);
        REQUIRE(entry["gripper_x"].size() == 2);
        // every task reports a spawn range for its objects or its fixture
        const bool has_obj = entry["object_x"].size() == 2;
        const bool has_fix = entry["fixture_x"].size() == 2;
        REQUIRE((has_obj || has_fix));
        if (has_obj)
            REQUIRE(entry["object_x"][0].get<double>() <= entry["object_x"][1].get<double>());
    }
    REQUIRE(m1["palettes"]["train"].size() == 4);
    REQUIRE(m1["palettes"]["holdout"].size() == 4);
}

TEST_CASE("loaded datasets replay to success and index by task") {
    const fs::path dir = fresh_dir("load");
    const std::vector<sim::Task> tasks = {sim::Task::stack_block, sim::Task::close_drawer};
    data::collect_demos(dir, tasks, 2, 99);

    data::Dataset ds = data::load_dataset(dir);
    REQUIRE(ds.demos.size() == 4);
    REQUIRE(ds.by_task[int(sim::Task::stack_block)].size() == 2);
    REQUIRE(ds.by_task[int(sim::Task::close_drawer)].size() == 2);
    REQUIRE(ds.indices_for({int(sim::Task::close_drawer)}).size() == 2);
    REQUIRE_THROWS_AS(ds.indices_for({int(sim::Task::pick_place_left)}), Error);

    const size_t fpix = size_t(sim::kFrameSize) * sim::kFrameSize * 3;
    for (const data::Demo& d : ds.demos) {
        sim::WorldState s =
            sim::reset(sim::Task(d.task_id), d.seed, sim::Shift::none);
        // stored actions drive the sim to the exact stored observations
        for (int t = 0; t < d.steps(); ++t) {
            s = sim::step(s, d.actions[t]);
            const sim::Image scene = sim::render(s, sim::View::scene);
            const sim::Image grip = sim::render(s, sim::View::gripper);
            for (size_t i = 0; i < fpix; ++i) {
                REQUIRE(d.frames[0][t + 1][i] == round_f32(scene[i]));
                REQUIRE(d.frames[1][t + 1][i] == round_f32(grip[i]));
            }
        }
        REQUIRE(sim::success(s, sim::Task(d.task_id)));
    }
}

TEST_CASE("dataset loading validates manifest against disk") {
    const fs::path dir = fresh_dir("tamper");
    data::collect_demos(dir, {sim::Task::press_button}, 2, 7);

    Json m = Json::parse(slurp(dir / "manifest.json"));
    SECTION("count mismatch is rejected") {
        m["tasks"][0]["count"] = 3;
        std::ofstream(dir / "manifest.json") << m.dump(2);
        REQUIRE_THROWS_WITH(data::load_dataset(dir),
                            Catch::Matchers::ContainsSubstring("count disagrees"));
    }
    SECTION("missing demo file is reported as a missing artifact") {
        const auto seed = m["tasks"][0]["seeds"][0].get<uint64_t>();
        fs::remove(dir / "demos" / "press_button" / (std::to_string(seed) + ".vpd"));
        REQUIRE_THROWS_AS(data::load_dataset(dir), MissingArtifactError);
    }
    SECTION("missing manifest is reported as a missing artifact") {
        fs::remove(dir / "manifest.json");
        REQUIRE_THROWS_AS(data::load_dataset(dir), MissingArtifactError);
    }
}

TEST_CASE("excess failures abort collection naming the task") {
    const fs::path dir = fresh_dir("failures");
    int calls = 0;
    data::DemoCollector flaky = [&](sim::Task task, uint64_t seed) {
        ++calls;
        if (calls % 10 == 0) return std::optional<data::Demo>{};
        return data::collect_demo(task, seed);
    };
    // n = 50 tolerates 2 failures; the 3rd aborts
    REQUIRE_THROWS_WITH(
        data::collect_demos(dir, {sim::Task::pick_place_right}, 50, 10, flaky),
        Catch::Matchers::ContainsSubstring("pick_place_right") &&
            Catch::Matchers::ContainsSubstring("5%"));

    // a single failure among a small request is tolerated iff within 5%
    calls = 0;
    data::DemoCollector one_bad = [&](sim::Task task, uint64_t seed) {
        ++calls;
        if (calls == 1) return std::optional<data::Demo>{};
        return data::collect_demo(task, seed);
    };
    const fs::path dir2 = fresh_dir("failures2");
    REQUIRE_THROWS_WITH(data::collect_demos(dir2, {sim::Task::press_button}, 3, 10, one_bad),
                        Catch::Matchers::ContainsSubstring("press_button"));
    calls = 0;
    const fs::path dir3 = fresh_dir("failures3");
    Json m = data::collect_demos(dir3, {sim::Task::press_button}, 19, 10, one_bad);
    REQUIRE(m["tasks"][0]["failures"].get<int>() == 1);
    REQUIRE(m["tasks"][0]["count"].get<int>() == 19);
}

TEST_CASE("normalization maps dataset extremes exactly onto the unit interval") {
    const fs::path dir = fresh_dir("norm");
    data::collect_demos(dir, {sim::Task::pick_place_left, sim::Task::open_drawer}, 3, 55);
    data::Dataset ds = data::load_dataset(dir);

    for (int k = 0; k < data::kActionDim; ++k) {
        REQUIRE_FALSE(ds.stats.floored[k]);
        double max_abs = 0.0, max_rt = 0.0;
        for (const auto& d : ds.demos) {
            for (const auto& a : d.actions) {
                const double raw[3] = {a.dx, a.dy, a.grip};
                const double n = ds.stats.normalize1(k, raw[k]);
                REQUIRE(std::abs(n) <= 1.0);
                max_abs = std::max(max_abs, std::abs(n));
                max_rt = std::max(max_rt,
                                  std::abs(ds.stats.denormalize1(k, n) - raw[k]));
            }
        }
        REQUIRE(max_abs == 1.0);  // extremes land exactly on ±1
        REQUIRE(max_rt < 1e-12);
    }

    // stats JSON round-trips through disk
    data::NormStats st2 =
        data::norm_stats_from_json(Json::parse(slurp(dir / "stats.json")));
    for (int k = 0; k < data::kActionDim; ++k) {
        REQUIRE(st2.lo[k] == ds.stats.lo[k]);
        REQUIRE(st2.hi[k] == ds.stats.hi[k]);
        REQUIRE(st2.floored[k] == ds.stats.floored[k]);
    }
}

TEST_CASE("degenerate action dimensions floor the scale instead of dividing by zero") {
    data::Demo d = synthetic_demo(10);
    for (auto& a : d.actions) a.grip = 0.25;  // constant dim
    data::NormStats st = data::compute_norm_stats({d});
    REQUIRE(st.floored[2]);
    REQUIRE_FALSE(st.floored[0]);
    REQUIRE(st.scale(2) == 1e-6);
    REQUIRE(st.normalize1(2, 0.25) == 0.0);
    REQUIRE(st.denormalize1(2, st.normalize1(2, 0.25)) == 0.25);
}

TEST_CASE("windows align actions with the conditioning frame") {
    const int T = 40;
    data::Demo d = synthetic_demo(T);
    data::NormStats st = identity_stats();

    SECTION("full horizon, interior anchor") {
        data::TrainingWindow w = data::sample_window(d, 3, 32, st);
        for (int v = 0; v < 2; ++v) {
            REQUIRE(w.cond[v] == d.frames[v][3]);
            for (int j = 0; j < 8; ++j) REQUIRE(w.targets[v][j] == d.frames[v][3 + 4 * j]);
        }
        for (int i = 0; i < 32; ++i) {
            REQUIRE(w.actions[i][0] == d.actions[3 + i].dx);
            REQUIRE(w.actions[i][1] == d.actions[3 + i].dy);
            REQUIRE(w.actions[i][2] == d.actions[3 + i].grip);
        }
        // the first supervised action is the one taken from the conditioned state
        REQUIRE(w.actions[0][0] == d.actions[w.t0].dx);
    }

    SECTION("anchor near the end repeats terminal frame and action") {
        data::TrainingWindow w = data::sample_window(d, 38, 32, st);
        for (int v = 0; v < 2; ++v) {
            REQUIRE(w.targets[v][0] == d.frames[v][38]);
            for (int j = 1; j < 8; ++j) REQUIRE(w.targets[v][j] == d.frames[v][T]);
        }
        REQUIRE(w.actions[0][0] == d.actions[38].dx);
        REQUIRE(w.actions[1][0] == d.actions[39].dx);
        for (int i = 2; i < 32; ++i) REQUIRE(w.actions[i][0] == d.actions[T - 1].dx);
    }

    SECTION("16-step horizon pads the back half") {
        data::TrainingWindow w = data::sample_window(d, 0, 16, st);
        for (int v = 0; v < 2; ++v) {
            for (int j = 0; j < 4; ++j) REQUIRE(w.targets[v][j] == d.frames[v][4 * j]);
            for (int j = 4; j < 8; ++j) REQUIRE(w.targets[v][j] == d.frames[v][12]);
        }
    }

    SECTION("zero horizon repeats the conditioning frame everywhere") {
        data::TrainingWindow w = data::sample_window(d, 5, 0, st);
        for (int v = 0; v < 2; ++v)
            for (int j = 0; j < 8; ++j) REQUIRE(w.targets[v][j] == w.cond[v]);
        // actions still cover the true future
        REQUIRE(w.actions[0][0] == d.actions[5].dx);
        REQUIRE(w.actions[10][0] == d.actions[15].dx);
    }

    SECTION("invalid anchors and horizons are rejected") {
        REQUIRE_THROWS_AS(data::sample_window(d, -1, 32, st), ConfigError);
        REQUIRE_THROWS_AS(data::sample_window(d, 0, 7, st), ConfigError);
        REQUIRE_THROWS_AS(data::sample_window(d, T, 32, st), Error);
    }
}

TEST_CASE("uniform anchors cover every action index") {
    const int T = 40;
    data::Demo d = synthetic_demo(T);
    Rng rng(2024, rng_stream::kTrainWindow);
    std::vector<int> hits(T, 0);
    for (int i = 0; i < 4000; ++i) {
        const int t0 = data::draw_t0(rng, d);
        REQUIRE(t0 >= 0);
        REQUIRE(t0 < T);
        ++hits[t0];
    }
    for (int t = 0; t < T; ++t) {
        REQUIRE(hits[t] > 50);
        REQUIRE(hits[t] < 200);
    }
}

TEST_CASE("run config round-trips and rejects bad input") {
    const fs::path dir = fresh_dir("config");
    data::RunConfig c;
    c.video_steps = 1200;
    c.seed = 17;
    c.run_dir = "runs/x";
    data::save_config(dir / "run.json", c);
    data::RunConfig r = data::load_config(dir / "run.json");
    REQUIRE(data::config_to_json(r) == data::config_to_json(c));
    REQUIRE(data::config_hash(r) == data::config_hash(c));
    REQUIRE(data::config_hash(r) != data::config_hash(data::RunConfig{}));

    SECTION("defaults survive an empty object") {
        data::RunConfig d0 = data::config_from_json(Json::object());
        REQUIRE(data::config_to_json(d0) == data::config_to_json(data::RunConfig{}));
        REQUIRE(d0.video_steps == 20000);
        REQUIRE(d0.action_steps == 10000);
        REQUIRE(d0.sampler_steps == 30);
        REQUIRE(d0.cfg_scale == 2.0);
        REQUIRE(d0.eval_episodes == 50);
        REQUIRE(d0.exec_horizon == 16);
        REQUIRE(d0.max_eval_steps == 96);
        REQUIRE(d0.cond_dropout == 0.1);
    }
    SECTION("unknown keys are named in the error") {
        Json j = {{"video_stepz", 100}};
        REQUIRE_THROWS_WITH(data::config_from_json(j),
                            Catch::Matchers::ContainsSubstring("video_stepz"));
    }
    SECTION("invalid values are rejected") {
        REQUIRE_THROWS_AS(data::config_from_json(Json{{"schema", 2}}), ConfigError);
        REQUIRE_THROWS_AS(data::config_from_json(Json{{"horizon_steps", 8}}), ConfigError);
        REQUIRE_THROWS_AS(data::config_from_json(Json{{"video_batch", 0}}), ConfigError);
        REQUIRE_THROWS_AS(data::config_from_json(Json{{"cond_dropout", 1.5}}), ConfigError);
        REQUIRE_THROWS_AS(data::config_from_json(Json{{"exec_horizon", 33}}), ConfigError);
    }
    SECTION("missing config file is a missing artifact") {
        REQUIRE_THROWS_AS(data::load_config(dir / "absent.json"), MissingArtifactError);
    }
}
