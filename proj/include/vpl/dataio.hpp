#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vpl/checkpoint.hpp"
#include "vpl/common.hpp"
#include "vpl/gridsim.hpp"
#include "vpl/optim.hpp"
#include "vpl/rng.hpp"

namespace vpl::data {

inline constexpr int kActionDim = 3;
inline constexpr int kViews = 2;
inline constexpr int kWindowActions = 32;  // full-rate action horizon
inline constexpr int kWindowFrames = 8;    // subsampled frames per view
inline constexpr int kFrameStride = 4;     // demo steps between window frames

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

// One successful scripted episode. frames[view][t] covers t = 0..steps()
// inclusive (initial observation plus one per action), actions has steps()
// entries, and the final state satisfies the task predicate.
struct Demo {
    int task_id = 0;
    uint64_t seed = 0;
    std::array<std::vector<sim::Image>, kViews> frames;
    std::vector<sim::Action> actions;

    int steps() const { return static_cast<int>(actions.size()); }
};

// Runs the scripted controller from a fresh reset. Returns nothing if the
// task is not solved within the episode cap; callers decide whether a failure
// is tolerable. Controls are rounded to storage precision before stepping so
// that a saved demo replays bit-exactly from its stored actions.
inline std::optional<Demo> collect_demo(sim::Task task, uint64_t seed) {
    sim::WorldState s = sim::reset(task, seed, sim::Shift::none);
    Demo d;
    d.task_id = static_cast<int>(task);
    d.seed = seed;
    auto record = [&](const sim::WorldState& w) {
        d.frames[0].push_back(sim::render(w, sim::View::scene));
        d.frames[1].push_back(sim::render(w, sim::View::gripper));
    };
    record(s);
    for (int t = 0; t < sim::kEpisodeSteps; ++t) {
        const sim::ExpertDecision e = sim::expert_action(s);
        if (!e.feasible) return std::nullopt;
        sim::Action a;
        a.dx = round_f32(e.action.dx);
        a.dy = round_f32(e.action.dy);
        a.grip = round_f32(e.action.grip);
        s = sim::step(s, a);
        d.actions.push_back(a);
        record(s);
        if (sim::success(s, task)) return d;
    }
    return std::nullopt;
}

// On-disk layout per demo: the shared container format with magic "VPD1",
// frame tensors (T+1, H, W, 3) per view plus actions (T, 3), stored f32.
inline void save_demo(const std::filesystem::path& path, const Demo& d) {
    const int T = d.steps();
    VPL_CHECK(T >= 1 && T <= sim::kEpisodeSteps, "save_demo: bad step count %d", T);
    const int hw = sim::kFrameSize;
    const size_t fpix = static_cast<size_t>(hw) * hw * 3;

    Checkpoint ck;
    ck.meta = Json{{"task_id", d.task_id},
                   {"task", sim::task_name(static_cast<sim::Task>(d.task_id))},
                   {"seed", d.seed},
                   {"steps", T},
                   {"height", hw},
                   {"width", hw},
                   {"channels", 3}};
    static const char* view_names[kViews] = {"frames_scene", "frames_gripper"};
    for (int v = 0; v < kViews; ++v) {
        VPL_CHECK(d.frames[v].size() == static_cast<size_t>(T) + 1,
                  "save_demo: view %d has %zu frames for %d actions", v, d.frames[v].size(), T);
        std::vector<double> flat(static_cast<size_t>(T + 1) * fpix);
        for (int t = 0; t <= T; ++t) {
            VPL_CHECK(d.frames[v][t].size() == fpix, "save_demo: frame size mismatch");
            std::copy(d.frames[v][t].begin(), d.frames[v][t].end(),
                      flat.begin() + static_cast<size_t>(t) * fpix);
        }
        Tensor ft = Tensor::from({T + 1, hw, hw, 3}, std::move(flat));
        ft.set_name(view_names[v]);
        ck.arrays.push_back(std::move(ft));
    }
    std::vector<double> acts(static_cast<size_t>(T) * kActionDim);
    for (int t = 0; t < T; ++t) {
        acts[static_cast<size_t>(t) * 3 + 0] = d.actions[t].dx;
        acts[static_cast<size_t>(t) * 3 + 1] = d.actions[t].dy;
        acts[static_cast<size_t>(t) * 3 + 2] = d.actions[t].grip;
    }
    Tensor at = Tensor::from({T, kActionDim}, std::move(acts));
    at.set_name("actions");
    ck.arrays.push_back(std::move(at));
    save_checkpoint(path, ck, "VPD1");
}

inline Demo load_demo(const std::filesystem::path& path) {
    const Checkpoint ck = load_checkpoint(path, "VPD1");
    const std::string where = path.string();
    const int T = ck.meta.value("steps", 0);
    VPL_CHECK(T >= 1 && T <= sim::kEpisodeSteps, "'%s': bad step count %d", where.c_str(), T);
    const int hw = sim::kFrameSize;
    const size_t fpix = static_cast<size_t>(hw) * hw * 3;

    Demo d;
    d.task_id = ck.meta.value("task_id", -1);
    VPL_CHECK(d.task_id >= 0 && d.task_id < sim::kNumTasks, "'%s': bad task id %d", where.c_str(),
              d.task_id);
    d.seed = ck.meta.value("seed", uint64_t{0});

    static const char* view_names[kViews] = {"frames_scene", "frames_gripper"};
    for (int v = 0; v < kViews; ++v) {
        const Tensor ft = ck.require(view_names[v]);
        VPL_SHAPE_CHECK(ft.shape() == Shape({T + 1, hw, hw, 3}), "'%s': %s stored %s",
                        where.c_str(), view_names[v], shape_str(ft.shape()).c_str());
        d.frames[v].resize(T + 1);
        for (int t = 0; t <= T; ++t) {
            d.frames[v][t].assign(ft.data().begin() + static_cast<size_t>(t) * fpix,
                                  ft.data().begin() + static_cast<size_t>(t + 1) * fpix);
        }
    }
    const Tensor at = ck.require("actions");
    VPL_SHAPE_CHECK(at.shape() == Shape({T, kActionDim}), "'%s': actions stored %s", where.c_str(),
                    shape_str(at.shape()).c_str());
    d.actions.resize(T);
    for (int t = 0; t < T; ++t) {
        d.actions[t].dx = at.data()[static_cast<size_t>(t) * 3 + 0];
        d.actions[t].dy = at.data()[static_cast<size_t>(t) * 3 + 1];
        d.actions[t].grip = at.data()[static_cast<size_t>(t) * 3 + 2];
    }
    return d;
}

// ---------------------------------------------------------------------------
// Action normalization
// ---------------------------------------------------------------------------

// Per-dimension affine map onto [-1, 1] fit from dataset extremes. Normalizing
// with the extremes directly (rather than a precomputed mean/scale pair) keeps
// the dataset maximum at exactly 1.0 in floating point.
struct NormStats {
    std::array<double, kActionDim> lo{};
    std::array<double, kActionDim> hi{};
    std::array<bool, kActionDim> floored{};

    double mean(int d) const { return 0.5 * (lo[d] + hi[d]); }
    double scale(int d) const { return std::max(0.5 * (hi[d] - lo[d]), 1e-6); }

    double normalize1(int d, double x) const {
        if (floored[d]) return (x - mean(d)) / scale(d);
        return (x - lo[d]) / (hi[d] - lo[d]) * 2.0 - 1.0;
    }
    double denormalize1(int d, double y) const {
        if (floored[d]) return y * scale(d) + mean(d);
        return (y + 1.0) * 0.5 * (hi[d] - lo[d]) + lo[d];
    }
    std::array<double, kActionDim> normalize(const std::array<double, kActionDim>& a) const {
        std::array<double, kActionDim> r;
        for (int d = 0; d < kActionDim; ++d) r[d] = normalize1(d, a[d]);
        return r;
    }
    std::array<double, kActionDim> denormalize(const std::array<double, kActionDim>& a) const {
        std::array<double, kActionDim> r;
        for (int d = 0; d < kActionDim; ++d) r[d] = denormalize1(d, a[d]);
        return r;
    }
};

inline NormStats compute_norm_stats(const std::vector<Demo>& demos) {
    NormStats st;
    bool any = false;
    for (const auto& d : demos) {
        for (const auto& a : d.actions) {
            const double v[kActionDim] = {a.dx, a.dy, a.grip};
            for (int k = 0; k < kActionDim; ++k) {
                if (!any) {
                    st.lo[k] = st.hi[k] = v[k];
                } else {
                    st.lo[k] = std::min(st.lo[k], v[k]);
                    st.hi[k] = std::max(st.hi[k], v[k]);
                }
            }
            any = true;
        }
    }
    VPL_CHECK(any, "compute_norm_stats: empty dataset");
    for (int k = 0; k < kActionDim; ++k) {
        if (0.5 * (st.hi[k] - st.lo[k]) < 1e-6) {
            st.floored[k] = true;
            std::fprintf(stderr,
                         "warning: action dim %d has degenerate range [%g, %g]; "
                         "normalization scale floored at 1e-6\n",
                         k, st.lo[k], st.hi[k]);
        }
    }
    return st;
}

inline Json norm_stats_to_json(const NormStats& st) {
    Json j;
    j["action_lo"] = st.lo;
    j["action_hi"] = st.hi;
    Json mean = Json::array(), scale = Json::array(), floored = Json::array();
    for (int d = 0; d < kActionDim; ++d) {
        mean.push_back(st.mean(d));
        scale.push_back(st.scale(d));
        floored.push_back(st.floored[d]);
    }
    j["action_mean"] = std::move(mean);
    j["action_scale"] = std::move(scale);
    j["floored"] = std::move(floored);
    return j;
}

inline NormStats norm_stats_from_json(const Json& j) {
    NormStats st;
    VPL_CHECK(j.contains("action_lo") && j.contains("action_hi") && j.contains("floored"),
              "normalization stats: missing fields");
    st.lo = j["action_lo"].get<std::array<double, kActionDim>>();
    st.hi = j["action_hi"].get<std::array<double, kActionDim>>();
    st.floored = j["floored"].get<std::array<bool, kActionDim>>();
    return st;
}

// ---------------------------------------------------------------------------
// Dataset collection and loading
// ---------------------------------------------------------------------------

namespace detail_data {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path().empty() ? "."
                                                                   : path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    VPL_CHECK(f.good(), "cannot open '%s' for writing", path.string().c_str());
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    VPL_CHECK(f.good(), "write failed for '%s'", path.string().c_str());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good())
        throw MissingArtifactError(detail::format("file not found: '%s'", path.string().c_str()));
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

struct Range {
    double lo = 0.0, hi = 0.0;
    bool any = false;
    void add(double v) {
        lo = any ? std::min(lo, v) : v;
        hi = any ? std::max(hi, v) : v;
        any = true;
    }
    Json to_json() const { return any ? Json::array({lo, hi}) : Json::array(); }
};

inline Json palette_json(const std::array<sim::Rgb, 4>& p) {
    Json out = Json::array();
    for (const auto& c : p) out.push_back({c.r, c.g, c.b});
    return out;
}

}  // namespace detail_data

// Seeds are a pure function of (base seed, task, attempt index) so that
// recollection reproduces the dataset byte for byte.
inline uint64_t demo_seed(uint64_t base_seed, int task_id, int attempt) {
    return base_seed + 1000ull * static_cast<uint64_t>(task_id) + static_cast<uint64_t>(attempt);
}

using DemoCollector = std::function<std::optional<Demo>(sim::Task, uint64_t)>;

// Collects n successful demos per task under demos/<task>/<seed>.vpd and
// writes manifest.json + stats.json. Failed episodes are skipped; a task whose
// final failure rate would exceed 5% aborts collection by name. `collector`
// exists so tests can inject failures; production callers leave it empty.
inline Json collect_demos(const std::filesystem::path& dir, const std::vector<sim::Task>& tasks,
                          int n_per_task, uint64_t base_seed,
                          const DemoCollector& collector = {}) {
    VPL_CHECK(n_per_task > 0, "collect_demos: n_per_task must be positive");
    VPL_CHECK(!tasks.empty(), "collect_demos: no tasks given");
    const int max_failures = n_per_task / 19;  // largest f with f/(n+f) <= 0.05

    Json task_entries = Json::array();
    std::vector<Demo> all;
    for (sim::Task task : tasks) {
        const int tid = static_cast<int>(task);
        int kept = 0, failures = 0, attempt = 0;
        std::vector<uint64_t> seeds;
        int total_steps = 0;
        detail_data::Range ox, oy, fx, fy, gx, gy;
        while (kept < n_per_task) {
            const uint64_t seed = demo_seed(base_seed, tid, attempt++);
            std::optional<Demo> d = collector ? collector(task, seed) : collect_demo(task, seed);
            if (!d) {
                ++failures;
                std::fprintf(stderr, "warning: discarded failed episode (task %s, seed %llu)\n",
                             sim::task_name(task), static_cast<unsigned long long>(seed));
                if (failures > max_failures)
                    throw Error(detail::format(
                        "demo collection failure rate above 5%% for task '%s' "
                        "(%d failures against %d requested demos)",
                        sim::task_name(task), failures, n_per_task));
                continue;
            }
            const sim::WorldState s0 = sim::reset(task, seed, sim::Shift::none);
            for (const auto& o : s0.objects) {
                if (!sim::is_movable(o.kind)) continue;
                ox.add(o.x);
                oy.add(o.y);
            }
            if (task == sim::Task::open_drawer || task == sim::Task::close_drawer) {
                double hx, hy;
                sim::drawer_handle(s0, hx, hy);
                fx.add(hx);
                fy.add(hy);
            } else if (task == sim::Task::press_button) {
                fx.add(s0.button_x);
                fy.add(s0.button_y);
            }
            gx.add(s0.gripper.x);
            gy.add(s0.gripper.y);
            total_steps += d->steps();
            seeds.push_back(seed);
            save_demo(dir / "demos" / sim::task_name(task) /
                          (std::to_string(seed) + ".vpd"),
                      *d);
            all.push_back(std::move(*d));
            ++kept;
        }
        Json entry = sim::task_registry_json()[static_cast<size_t>(tid)];
        entry["count"] = kept;
        entry["failures"] = failures;
        entry["seeds"] = seeds;
        entry["mean_steps"] = static_cast<double>(total_steps) / kept;
        entry["object_x"] = ox.to_json();
        entry["object_y"] = oy.to_json();
        entry["fixture_x"] = fx.to_json();
        entry["fixture_y"] = fy.to_json();
        entry["gripper_x"] = gx.to_json();
        entry["gripper_y"] = gy.to_json();
        task_entries.push_back(std::move(entry));
    }

    Json manifest;
    manifest["format"] = 1;
    manifest["base_seed"] = base_seed;
    manifest["demos_per_task"] = n_per_task;
    manifest["episode_cap"] = sim::kEpisodeSteps;
    manifest["frame"] = Json{{"height", sim::kFrameSize},
                             {"width", sim::kFrameSize},
                             {"channels", 3},
                             {"views", Json::array({"scene", "gripper"})}};
    manifest["action_dim"] = kActionDim;
    manifest["palettes"] = Json{{"train", detail_data::palette_json(sim::train_palette())},
                                {"holdout", detail_data::palette_json(sim::holdout_palette())}};
    manifest["tasks"] = std::move(task_entries);
    detail_data::write_text(dir / "manifest.json", manifest.dump(2) + "\n");

    const NormStats st = compute_norm_stats(all);
    detail_data::write_text(dir / "stats.json", norm_stats_to_json(st).dump(2) + "\n");
    return manifest;
}

// In-memory dataset: every demo plus the normalization stats and manifest.
struct Dataset {
    Json manifest;
    NormStats stats;
    std::vector<Demo> demos;
    std::array<std::vector<int>, sim::kNumTasks> by_task;  // indices into demos

    std::vector<int> indices_for(const std::vector<int>& task_ids) const {
        std::vector<int> out;
        for (int t : task_ids) {
            VPL_CHECK(t >= 0 && t < sim::kNumTasks, "dataset: bad task id %d", t);
            out.insert(out.end(), by_task[t].begin(), by_task[t].end());
        }
        VPL_CHECK(!out.empty(), "dataset: no demos for requested tasks");
        return out;
    }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    {
        const std::string text = detail_data::read_text(dir / "manifest.json");
        ds.manifest = Json::parse(text, nullptr, false);
        VPL_CHECK(!ds.manifest.is_discarded(), "'%s': manifest is not valid JSON",
                  (dir / "manifest.json").string().c_str());
        VPL_CHECK(ds.manifest.value("format", 0) == 1, "'%s': unsupported manifest format",
                  (dir / "manifest.json").string().c_str());
    }
    ds.stats = norm_stats_from_json(Json::parse(detail_data::read_text(dir / "stats.json")));
    for (const auto& entry : ds.manifest["tasks"]) {
        const int tid = entry["id"].get<int>();
        const std::string name = entry["name"].get<std::string>();
        const auto seeds = entry["seeds"].get<std::vector<uint64_t>>();
        VPL_CHECK(entry["count"].get<int>() == static_cast<int>(seeds.size()),
                  "manifest: task '%s' count disagrees with its seed list", name.c_str());
        for (uint64_t seed : seeds) {
            Demo d = load_demo(dir / "demos" / name / (std::to_string(seed) + ".vpd"));
            VPL_CHECK(d.task_id == tid && d.seed == seed,
                      "demo file for task '%s' seed %llu holds mismatched metadata", name.c_str(),
                      static_cast<unsigned long long>(seed));
            ds.by_task[tid].push_back(static_cast<int>(ds.demos.size()));
            ds.demos.push_back(std::move(d));
        }
    }
    VPL_CHECK(!ds.demos.empty(), "dataset at '%s' holds no demos", dir.string().c_str());
    return ds;
}

// ---------------------------------------------------------------------------
// Training windows
// ---------------------------------------------------------------------------

// A supervision slice anchored at demo step t0. The conditioning frame per
// view is the observation at t0; the 8 target frames per view sit at
// t0 + 4j for j < horizon_steps/4, repeat-padded to 8 (horizon 0 therefore
// repeats the conditioning frame). Actions are the 32 full-rate normalized
// controls starting at t0, so the first action is the one taken from the
// conditioned state; both sequences repeat their last element past demo end.
struct TrainingWindow {
    int t0 = 0;
    int horizon_steps = 32;
    std::array<sim::Image, kViews> cond;
    std::array<std::array<sim::Image, kWindowFrames>, kViews> targets;
    std::array<std::array<double, kActionDim>, kWindowActions> actions;
};

inline bool valid_horizon(int horizon_steps) {
    return horizon_steps == 0 || horizon_steps == 16 || horizon_steps == 32;
}

inline TrainingWindow sample_window(const Demo& d, int t0, int horizon_steps,
                                    const NormStats& stats) {
    if (t0 < 0) throw ConfigError(detail::format("sample_window: negative t0 (%d)", t0));
    VPL_CHECK(t0 < d.steps(), "sample_window: t0 = %d out of range for a %d-step demo", t0,
              d.steps());
    if (!valid_horizon(horizon_steps))
        throw ConfigError(
            detail::format("sample_window: horizon_steps must be 0, 16, or 32 (got %d)",
                           horizon_steps));

    TrainingWindow w;
    w.t0 = t0;
    w.horizon_steps = horizon_steps;
    const int T = d.steps();
    const int nvalid = horizon_steps / kFrameStride;
    for (int v = 0; v < kViews; ++v) {
        w.cond[v] = d.frames[v][static_cast<size_t>(std::min(t0, T))];
        const sim::Image* last = &w.cond[v];
        for (int j = 0; j < kWindowFrames; ++j) {
            if (j < nvalid)
                last = &d.frames[v][static_cast<size_t>(std::min(t0 + kFrameStride * j, T))];
            w.targets[v][j] = *last;
        }
    }
    for (int i = 0; i < kWindowActions; ++i) {
        const sim::Action& a = d.actions[static_cast<size_t>(std::min(t0 + i, T - 1))];
        w.actions[i] = stats.normalize({a.dx, a.dy, a.grip});
    }
    return w;
}

// Uniform anchor choice over every action index, so repeated draws cover the
// whole demo.
inline int draw_t0(Rng& rng, const Demo& d) {
    return static_cast<int>(rng.below(static_cast<uint64_t>(d.steps())));
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

// Every knob a run can set, with defaults in one place. Budgets default to
// the full profile (video 20k steps batch 16, action 10k steps batch 32,
// sized for ≤ 60 minutes per stage on 8 cores); smaller machines pass a
// config that scales them down.
struct RunConfig {
    int schema = 1;
    std::string data_dir = "data";
    std::string run_dir = "runs/default";
    uint64_t seed = 1;
    int threads = 1;

    int demos_per_task = 50;
    int horizon_steps = 32;

    int video_steps = 20000;
    int video_batch = 16;
    double video_lr = 1e-3;
    int action_steps = 10000;
    int action_batch = 32;
    double action_lr = 1e-3;
    double cond_dropout = 0.1;

    int sampler_steps = 30;
    double cfg_scale = 2.0;

    int eval_episodes = 50;
    int exec_horizon = 16;
    int max_eval_steps = 96;
    uint64_t eval_seed_base = 900000;

    int log_every = 50;
    int checkpoint_every = 500;
};

inline Json config_to_json(const RunConfig& c) {
    Json j;
    j["schema"] = c.schema;
    j["data_dir"] = c.data_dir;
    j["run_dir"] = c.run_dir;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["demos_per_task"] = c.demos_per_task;
    j["horizon_steps"] = c.horizon_steps;
    j["video_steps"] = c.video_steps;
    j["video_batch"] = c.video_batch;
    j["video_lr"] = c.video_lr;
    j["action_steps"] = c.action_steps;
    j["action_batch"] = c.action_batch;
    j["action_lr"] = c.action_lr;
    j["cond_dropout"] = c.cond_dropout;
    j["sampler_steps"] = c.sampler_steps;
    j["cfg_scale"] = c.cfg_scale;
    j["eval_episodes"] = c.eval_episodes;
    j["exec_horizon"] = c.exec_horizon;
    j["max_eval_steps"] = c.max_eval_steps;
    j["eval_seed_base"] = c.eval_seed_base;
    j["log_every"] = c.log_every;
    j["checkpoint_every"] = c.checkpoint_every;
    return j;
}

inline RunConfig config_from_json(const Json& j) {
    static const std::set<std::string> known = {
        "schema",        "data_dir",     "run_dir",       "seed",           "threads",
        "demos_per_task", "horizon_steps", "video_steps",  "video_batch",    "video_lr",
        "action_steps",  "action_batch", "action_lr",     "cond_dropout",   "sampler_steps",
        "cfg_scale",     "eval_episodes", "exec_horizon", "max_eval_steps", "eval_seed_base",
        "log_every",     "checkpoint_every"};
    for (const auto& item : j.items())
        if (!known.count(item.key()))
            throw ConfigError(detail::format("config: unknown key '%s'", item.key().c_str()));

    RunConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    get("schema", c.schema);
    get("data_dir", c.data_dir);
    get("run_dir", c.run_dir);
    get("seed", c.seed);
    get("threads", c.threads);
    get("demos_per_task", c.demos_per_task);
    get("horizon_steps", c.horizon_steps);
    get("video_steps", c.video_steps);
    get("video_batch", c.video_batch);
    get("video_lr", c.video_lr);
    get("action_steps", c.action_steps);
    get("action_batch", c.action_batch);
    get("action_lr", c.action_lr);
    get("cond_dropout", c.cond_dropout);
    get("sampler_steps", c.sampler_steps);
    get("cfg_scale", c.cfg_scale);
    get("eval_episodes", c.eval_episodes);
    get("exec_horizon", c.exec_horizon);
    get("max_eval_steps", c.max_eval_steps);
    get("eval_seed_base", c.eval_seed_base);
    get("log_every", c.log_every);
    get("checkpoint_every", c.checkpoint_every);

    if (c.schema != 1) throw ConfigError(detail::format("config: unsupported schema %d", c.schema));
    if (!valid_horizon(c.horizon_steps))
        throw ConfigError(
            detail::format("config: horizon_steps must be 0, 16, or 32 (got %d)", c.horizon_steps));
    auto positive = [](const char* key, auto v) {
        if (v <= 0) throw ConfigError(detail::format("config: %s must be positive", key));
    };
    positive("threads", c.threads);
    positive("demos_per_task", c.demos_per_task);
    positive("video_steps", c.video_steps);
    positive("video_batch", c.video_batch);
    positive("video_lr", c.video_lr);
    positive("action_steps", c.action_steps);
    positive("action_batch", c.action_batch);
    positive("action_lr", c.action_lr);
    positive("sampler_steps", c.sampler_steps);
    positive("eval_episodes", c.eval_episodes);
    positive("exec_horizon", c.exec_horizon);
    positive("max_eval_steps", c.max_eval_steps);
    positive("log_every", c.log_every);
    positive("checkpoint_every", c.checkpoint_every);
    if (c.cond_dropout < 0.0 || c.cond_dropout > 1.0)
        throw ConfigError("config: cond_dropout must lie in [0, 1]");
    if (c.cfg_scale < 0.0) throw ConfigError("config: cfg_scale must be non-negative");
    if (c.exec_horizon > kWindowActions)
        throw ConfigError("config: exec_horizon cannot exceed the 32-step action horizon");
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    const std::string text = detail_data::read_text(path);
    Json j = Json::parse(text, nullptr, false);
    if (j.is_discarded())
        throw ConfigError(detail::format("config '%s' is not valid JSON", path.string().c_str()));
    return config_from_json(j);
}

inline void save_config(const std::filesystem::path& path, const RunConfig& c) {
    detail_data::write_text(path, config_to_json(c).dump(2) + "\n");
}

inline uint64_t config_hash(const RunConfig& c) {
    const std::string s = config_to_json(c).dump();
    return fnv1a64(s.data(), s.size());
}

}  // namespace vpl::data
