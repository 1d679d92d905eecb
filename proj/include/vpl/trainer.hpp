#pragma once

#include <chrono>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "actionnet.hpp"

// Training orchestration: the video stage, the three action couplings
// (frozen, joint with stop-gradient, frozen-generic), the encoder-only
// baseline, and the variant runner that strings stages together per seed.
// Every random draw is derived from (seed, stream, step), so an interrupted
// run resumes onto the same draw sequence and a re-run reproduces the same
// checkpoint bytes.
namespace vpl::train {

// ---------------------------------------------------------------------------
// Derived randomness, logging, content hashes
// ---------------------------------------------------------------------------

inline Rng step_rng(uint64_t seed, uint64_t stream, uint64_t step) {
    return Rng(seed + 0x9E3779B97F4A7C15ull * (step + 1), stream);
}

// Append-only JSON-lines log; one object per line.
struct TrainLogger {
    std::filesystem::path path;

    void append(const Json& j) const {
        std::ofstream f(path, std::ios::app);
        VPL_CHECK(f.good(), "cannot append to log '%s'", path.string().c_str());
        f << j.dump() << "\n";
    }
};

inline std::vector<Json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    VPL_CHECK(f.good(), "cannot read log '%s'", path.string().c_str());
    std::vector<Json> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        Json j = Json::parse(line, nullptr, false);
        VPL_CHECK(!j.is_discarded(), "log '%s' line %zu is not valid JSON", path.string().c_str(),
                  out.size() + 1);
        out.push_back(std::move(j));
    }
    return out;
}

inline uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    VPL_CHECK(f.good(), "cannot hash '%s'", path.string().c_str());
    uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
        h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
    return h;
}

inline std::string hex16(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Task splits
// ---------------------------------------------------------------------------

inline const std::vector<int>& all_task_ids() {
    static const std::vector<int> v = {0, 1, 2, 3, 4, 5, 6, 7};
    return v;
}

// Action-supervised half for the transfer experiment: one of each task
// family keeps its actions, the sibling is held out.
inline const std::vector<int>& half_task_ids() {
    static const std::vector<int> v = {
        static_cast<int>(sim::Task::pick_place_left), static_cast<int>(sim::Task::open_drawer),
        static_cast<int>(sim::Task::push_to_zone), static_cast<int>(sim::Task::upright_peg)};
    return v;
}

inline const std::vector<int>& held_out_task_ids() {
    static const std::vector<int> v = {
        static_cast<int>(sim::Task::pick_place_right), static_cast<int>(sim::Task::close_drawer),
        static_cast<int>(sim::Task::press_button), static_cast<int>(sim::Task::stack_block)};
    return v;
}

// ---------------------------------------------------------------------------
// Stage configurations
// ---------------------------------------------------------------------------
// A stage hash covers exactly the keys that shape the output bytes; logging
// cadence stays out so turning it up never invalidates a cached stage. The
// full struct (hash keys plus cadence) is snapshotted next to the artifacts.

struct VideoStageCfg {
    uint64_t seed = 1;
    int horizon = 32;
    int steps = 20000;
    int batch = 16;
    double lr = 1e-3;
    double cond_dropout = 0.1;
    std::vector<int> tasks = all_task_ids();
    bool generic = false;          // random-policy data, null conditioning only
    int generic_episodes = 16;     // rollouts per task when generic
    int log_every = 50;
    int ckpt_every = 500;

    static VideoStageCfg from_run(const data::RunConfig& rc, uint64_t seed, int horizon,
                                  bool generic) {
        VideoStageCfg c;
        c.seed = seed;
        c.horizon = horizon;
        c.steps = rc.video_steps;
        c.batch = rc.video_batch;
        c.lr = rc.video_lr;
        c.cond_dropout = rc.cond_dropout;
        c.generic = generic;
        c.log_every = rc.log_every;
        c.ckpt_every = rc.checkpoint_every;
        return c;
    }

    Json hash_json() const {
        return Json{{"stage", "video"},       {"seed", seed},
                    {"horizon", horizon},     {"steps", steps},
                    {"batch", batch},         {"lr", lr},
                    {"cond_dropout", cond_dropout}, {"tasks", tasks},
                    {"generic", generic},     {"generic_episodes", generic_episodes}};
    }
    uint64_t hash() const {
        const std::string s = hash_json().dump();
        return fnv1a64(s.data(), s.size());
    }
    Json to_json() const {
        Json j = hash_json();
        j["log_every"] = log_every;
        j["ckpt_every"] = ckpt_every;
        return j;
    }
};

struct ActionStageCfg {
    uint64_t seed = 1;
    int horizon = 32;
    int steps = 10000;
    int batch = 32;
    double lr = 1e-3;
    std::string decay = "cosine";  // "cosine" (floor lr/25) or "none"
    std::string mode = "frozen_video";  // frozen_video | joint | no_tune
    std::vector<int> tasks = all_task_ids();
    double w_video = 1.0, w_action = 1.0;  // joint only
    double cond_dropout = 0.1;             // joint video loss only
    uint64_t video_input = 0;              // content hash of the video checkpoint
    int log_every = 50;
    int ckpt_every = 500;

    static ActionStageCfg from_run(const data::RunConfig& rc, uint64_t seed, int horizon,
                                   const std::string& mode, const std::vector<int>& tasks,
                                   uint64_t video_input) {
        ActionStageCfg c;
        c.seed = seed;
        c.horizon = horizon;
        c.steps = rc.action_steps;
        c.batch = rc.action_batch;
        c.lr = rc.action_lr;
        c.mode = mode;
        c.tasks = tasks;
        c.cond_dropout = rc.cond_dropout;
        c.video_input = video_input;
        c.log_every = rc.log_every;
        c.ckpt_every = rc.checkpoint_every;
        return c;
    }

    Json hash_json() const {
        return Json{{"stage", "action"},   {"seed", seed},       {"horizon", horizon},
                    {"steps", steps},      {"batch", batch},     {"lr", lr},
                    {"decay", decay},      {"mode", mode},       {"tasks", tasks},
                    {"w_video", w_video},  {"w_action", w_action},
                    {"cond_dropout", cond_dropout}, {"video_input", hex16(video_input)}};
    }
    uint64_t hash() const {
        const std::string s = hash_json().dump();
        return fnv1a64(s.data(), s.size());
    }
    Json to_json() const {
        Json j = hash_json();
        j["log_every"] = log_every;
        j["ckpt_every"] = ckpt_every;
        return j;
    }
};

struct BaselineStageCfg {
    uint64_t seed = 1;
    int steps = 10000;
    int batch = 32;
    double lr = 1e-3;
    std::string decay = "cosine";
    std::vector<int> tasks = all_task_ids();
    int log_every = 50;
    int ckpt_every = 500;

    static BaselineStageCfg from_run(const data::RunConfig& rc, uint64_t seed,
                                     const std::vector<int>& tasks) {
        BaselineStageCfg c;
        c.seed = seed;
        c.steps = rc.action_steps;
        c.batch = rc.action_batch;
        c.lr = rc.action_lr;
        c.tasks = tasks;
        c.log_every = rc.log_every;
        c.ckpt_every = rc.checkpoint_every;
        return c;
    }

    Json hash_json() const {
        return Json{{"stage", "baseline"}, {"seed", seed}, {"steps", steps}, {"batch", batch},
                    {"lr", lr},            {"decay", decay}, {"tasks", tasks}};
    }
    uint64_t hash() const {
        const std::string s = hash_json().dump();
        return fnv1a64(s.data(), s.size());
    }
    Json to_json() const {
        Json j = hash_json();
        j["log_every"] = log_every;
        j["ckpt_every"] = ckpt_every;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Stage plumbing: snapshots, resume state, results
// ---------------------------------------------------------------------------

struct StageResult {
    std::filesystem::path dir;
    std::filesystem::path model;  // video.vpl, policy.vpl, or baseline.vpl
    double init_loss = 0.0;
    double smooth = 0.0;  // EMA of the batch loss, factor 0.98
    int steps_done = 0;
    uint64_t config_hash = 0;
    bool reused = false;
    bool complete = false;  // the final model file exists
    Json meta;
};

namespace detail_train {

constexpr int kHashCheckEvery = 200;
constexpr double kEmaKeep = 0.98;

inline double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

// A stage directory is keyed by its config hash; hitting the same directory
// with a different config means the hash scheme broke, not the caller.
inline bool claim_stage_dir(const std::filesystem::path& dir, const Json& snapshot,
                            const std::string& model_name, bool force) {
    const auto cfg_path = dir / "config.json";
    if (std::filesystem::exists(cfg_path)) {
        const Json prev = Json::parse(data::detail_data::read_text(cfg_path));
        if (prev != snapshot)
            throw ConfigError(
                detail::format("stage directory '%s' already holds a different config",
                               dir.string().c_str()));
        if (!force && std::filesystem::exists(dir / model_name)) return true;
    }
    std::filesystem::create_directories(dir);
    data::detail_data::write_text(cfg_path, snapshot.dump(2) + "\n");
    if (force) {
        std::filesystem::remove(dir / model_name);
        std::filesystem::remove(dir / "state.vpl");
    }
    return false;
}

struct TrainState {
    int step = 0;
    double ema = 0.0;
    double init_loss = 0.0;
    bool found = false;
};

inline void save_state(const std::filesystem::path& path, const std::string& stage,
                       uint64_t cfg_hash, int step, double ema, double init_loss,
                       const std::vector<const ParamSet*>& sets,
                       const std::vector<const Adam*>& opts) {
    Checkpoint ck;
    ck.meta["kind"] = "train_state";
    ck.meta["stage"] = stage;
    ck.meta["config"] = hex16(cfg_hash);
    ck.meta["step"] = step;
    ck.meta["ema"] = ema;
    ck.meta["init_loss"] = init_loss;
    for (size_t i = 0; i < sets.size(); ++i) {
        pack_params(ck, *sets[i]);
        pack_adam(ck, *sets[i], *opts[i]);
    }
    save_checkpoint(path, ck);
}

inline TrainState load_state(const std::filesystem::path& path, const std::string& stage,
                             uint64_t cfg_hash, const std::vector<ParamSet*>& sets,
                             const std::vector<Adam*>& opts) {
    TrainState st;
    if (!std::filesystem::exists(path)) return st;
    Checkpoint ck = load_checkpoint(path);
    VPL_CHECK(ck.meta.value("kind", "") == "train_state", "'%s' is not a training state file",
              path.string().c_str());
    if (ck.meta.value("stage", "") != stage || ck.meta.value("config", "") != hex16(cfg_hash))
        throw ConfigError(detail::format(
            "training state at '%s' was written by a different config", path.string().c_str()));
    for (size_t i = 0; i < sets.size(); ++i) {
        unpack_params(ck, *sets[i]);
        VPL_CHECK(unpack_adam(ck, *sets[i], *opts[i]),
                  "training state at '%s' lacks optimizer moments", path.string().c_str());
    }
    st.step = ck.meta["step"].get<int>();
    st.ema = ck.meta["ema"].get<double>();
    st.init_loss = ck.meta["init_loss"].get<double>();
    st.found = true;
    return st;
}

inline const data::Demo& draw_demo(const data::Dataset& ds, const std::vector<int>& pool,
                                   Rng& rng) {
    VPL_CHECK(!pool.empty(), "no demonstrations available for the configured task subset");
    return ds.demos[static_cast<size_t>(pool[rng.below(pool.size())])];
}

inline double cosine_lr(double base, const std::string& decay, int step, int total) {
    if (decay == "none") return base;
    VPL_CHECK(decay == "cosine", "unknown lr decay '%s'", decay.c_str());
    const double floor = base / 25.0;
    return floor + (base - floor) * 0.5 * (1.0 + std::cos(3.14159265358979 * step / total));
}

inline void check_loss_finite(double v, const char* stage) {
    if (!std::isfinite(v))
        throw NumericError(
            detail::format("%s training loss became non-finite; aborting (the last "
                           "saved checkpoint is intact)",
                           stage));
}

}  // namespace detail_train

// ---------------------------------------------------------------------------
// Video training
// ---------------------------------------------------------------------------

// A rollout under uniformly random controls: scene variety without task
// structure, the stand-in for generic video pretraining data.
inline data::Demo random_rollout(sim::Task task, uint64_t seed) {
    Rng rng(seed, rng_stream::kDemoCollect);
    sim::WorldState s = sim::reset(task, seed, sim::Shift::none);
    data::Demo d;
    d.task_id = static_cast<int>(task);
    d.seed = seed;
    auto record = [&](const sim::WorldState& w) {
        d.frames[0].push_back(sim::render(w, sim::View::scene));
        d.frames[1].push_back(sim::render(w, sim::View::gripper));
    };
    record(s);
    for (int t = 0; t < sim::kEpisodeSteps; ++t) {
        sim::Action a;
        a.dx = round_f32(rng.uniform(-1.0, 1.0));
        a.dy = round_f32(rng.uniform(-1.0, 1.0));
        a.grip = round_f32(rng.uniform(-1.0, 1.0));
        s = sim::step(s, a);
        d.actions.push_back(a);
        record(s);
    }
    return d;
}

inline std::vector<data::Demo> generic_rollouts(const VideoStageCfg& cfg) {
    std::vector<data::Demo> out;
    for (int tid = 0; tid < sim::kNumTasks; ++tid)
        for (int e = 0; e < cfg.generic_episodes; ++e)
            out.push_back(random_rollout(static_cast<sim::Task>(tid),
                                         data::demo_seed(cfg.seed ^ 0x67656e7663ull, tid, e)));
    return out;
}

// Minimizes the masked eps loss over dataset windows with 0.1 condition
// dropout; generic mode swaps in random-policy rollouts and trains only the
// null conditioning row. Resumable: state.vpl carries params, optimizer
// moments, and the step counter, and all draws are step-derived.
inline StageResult train_video(const data::Dataset& ds, const VideoStageCfg& cfg,
                               const std::filesystem::path& dir, int max_steps_this_run = 0,
                               bool force = false) {
    using namespace detail_train;
    StageResult res;
    res.dir = dir;
    res.model = dir / "video.vpl";
    res.config_hash = cfg.hash();
    if (claim_stage_dir(dir, cfg.to_json(), "video.vpl", force)) {
        res.reused = true;
        res.complete = true;
        res.meta = load_checkpoint(res.model).meta;
        return res;
    }

    video::VideoDenoiser m = video::VideoDenoiser::build(cfg.seed);
    Adam opt;
    opt.lr = cfg.lr;
    opt.init(m.ps);

    // Generic pretraining may not touch the task rows; keep the init copy to
    // prove it.
    std::vector<double> task_rows_at_init;
    if (cfg.generic)
        task_rows_at_init.assign(m.task_table.data().begin(),
                                 m.task_table.data().begin() + sim::kNumTasks * video::kTaskDim);

    std::vector<data::Demo> generic;
    std::vector<int> pool;
    if (cfg.generic) {
        generic = generic_rollouts(cfg);
        for (size_t i = 0; i < generic.size(); ++i) pool.push_back(static_cast<int>(i));
    } else {
        pool = ds.indices_for(cfg.tasks);
    }
    const data::NormStats& stats = ds.stats;  // actions are unused by this loss

    TrainState st = load_state(dir / "state.vpl", "video", cfg.hash(), {&m.ps}, {&opt});
    TrainLogger log{dir / "log.jsonl"};
    const double t_start = now_ms();
    double ema = st.ema, init_loss = st.init_loss;
    int k = st.step;
    const int stop = max_steps_this_run > 0 ? std::min(cfg.steps, k + max_steps_this_run)
                                            : cfg.steps;

    auto save_progress = [&](int step) {
        save_state(dir / "state.vpl", "video", cfg.hash(), step, ema, init_loss, {&m.ps}, {&opt});
    };
    auto save_model = [&]() {
        Checkpoint ck = video::video_checkpoint(m);
        ck.meta["train"] = cfg.to_json();
        ck.meta["config"] = hex16(cfg.hash());
        save_checkpoint(res.model, ck);
    };

    for (; k < stop; ++k) {
        Rng wrng = step_rng(cfg.seed, rng_stream::kTrainWindow, static_cast<uint64_t>(k));
        Rng nrng = step_rng(cfg.seed, rng_stream::kTrainNoise, static_cast<uint64_t>(k));
        Rng drng = step_rng(cfg.seed, rng_stream::kCondDropout, static_cast<uint64_t>(k));
        m.ps.zero_grads();
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const data::Demo& d = cfg.generic ? generic[static_cast<size_t>(
                                                    pool[wrng.below(pool.size())])]
                                              : draw_demo(ds, pool, wrng);
            const int t0 = data::draw_t0(wrng, d);
            const data::TrainingWindow w = data::sample_window(d, t0, cfg.horizon, stats);
            const int i = static_cast<int>(nrng.below(static_cast<uint64_t>(m.sched.T)));
            std::vector<double> eps(video::kSeqSize);
            for (auto& v : eps) v = nrng.gauss();
            const int row = (cfg.generic || drng.uniform() < cfg.cond_dropout)
                                ? video::kNullTaskRow
                                : d.task_id;
            Tensor loss = video::video_window_step(m, w, row, i, eps).loss;
            batch_loss += loss.item();
            backward(mul_scalar(loss, 1.0 / cfg.batch));
        }
        batch_loss /= cfg.batch;
        check_loss_finite(batch_loss, "video");
        opt.step(m.ps);
        if (k == 0) init_loss = batch_loss;
        ema = k == 0 ? batch_loss : kEmaKeep * ema + (1.0 - kEmaKeep) * batch_loss;
        if (k % cfg.log_every == 0 || k + 1 == stop)
            log.append(Json{{"step", k},
                            {"loss", batch_loss},
                            {"smooth", ema},
                            {"wall_ms", now_ms() - t_start},
                            {"seed", cfg.seed},
                            {"config", hex16(cfg.hash())}});
        if ((k + 1) % cfg.ckpt_every == 0 && k + 1 < stop) save_progress(k + 1);
    }

    if (cfg.generic) {
        for (int i = 0; i < sim::kNumTasks * video::kTaskDim; ++i)
            VPL_CHECK(m.task_table.data()[static_cast<size_t>(i)] ==
                          task_rows_at_init[static_cast<size_t>(i)],
                      "generic pretraining modified a task embedding row");
    }
    save_progress(k);
    if (k == cfg.steps) {
        save_model();
        res.complete = true;
    }
    res.init_loss = init_loss;
    res.smooth = ema;
    res.steps_done = k;
    res.meta = Json{{"generic", cfg.generic}};
    return res;
}

// An untrained video checkpoint: the starting point the joint coupling
// finetunes from, materialized so every action stage loads its video net the
// same way.
inline std::filesystem::path ensure_video_init(const std::filesystem::path& run_dir,
                                               uint64_t seed, int horizon) {
    const Json key = {{"stage", "video_init"}, {"seed", seed}, {"horizon", horizon}};
    const std::string s = key.dump();
    const auto dir = run_dir / "stages" / ("video_init-" + hex16(fnv1a64(s.data(), s.size())));
    const auto path = dir / "video.vpl";
    if (detail_train::claim_stage_dir(dir, key, "video.vpl", false)) return path;
    video::VideoDenoiser m = video::VideoDenoiser::build(seed);
    Checkpoint ck = video::video_checkpoint(m);
    ck.meta["train"] = Json{{"stage", "video_init"}, {"seed", seed}, {"horizon", horizon},
                            {"steps", 0}};
    save_checkpoint(path, ck);
    return path;
}

// ---------------------------------------------------------------------------
// Action training
// ---------------------------------------------------------------------------

// Trains the policy on top of a video checkpoint. frozen_video and no_tune
// never write to the video net (enforced by parameter hashes every 200
// steps); joint optimizes both losses with the action gradients stopped at
// the taps. Every loss term runs at a matched noise level: the window's
// ground-truth video is noised to the same step index the action chain
// trains against.
inline StageResult train_action(const data::Dataset& ds,
                                const std::filesystem::path& video_ckpt,
                                const ActionStageCfg& cfg, const std::filesystem::path& dir,
                                int max_steps_this_run = 0, bool force = false) {
    using namespace detail_train;
    VPL_CHECK(cfg.mode == "frozen_video" || cfg.mode == "joint" || cfg.mode == "no_tune",
              "train_action: unknown mode '%s'", cfg.mode.c_str());
    const bool joint = cfg.mode == "joint";

    StageResult res;
    res.dir = dir;
    res.model = dir / "policy.vpl";
    res.config_hash = cfg.hash();
    if (claim_stage_dir(dir, cfg.to_json(), "policy.vpl", force)) {
        res.reused = true;
        res.complete = true;
        res.meta = load_checkpoint(res.model).meta;
        return res;
    }

    Checkpoint vck = load_checkpoint(video_ckpt);
    if (!vck.meta.contains("train") || !vck.meta["train"].contains("horizon"))
        throw ConfigError(detail::format(
            "video checkpoint '%s' does not record its training horizon", video_ckpt.string().c_str()));
    const int vh = vck.meta["train"]["horizon"].get<int>();
    if (vh != cfg.horizon)
        throw ConfigError(detail::format(
            "video checkpoint horizon %d is incompatible with the action stage horizon %d", vh,
            cfg.horizon));
    video::VideoDenoiser vm = video::load_video_denoiser(vck);
    act::PolicyNet pn = act::PolicyNet::build(cfg.seed);

    Adam aopt;
    aopt.lr = cfg.lr;
    aopt.init(pn.ps);
    Adam vopt;
    vopt.lr = cfg.lr;
    if (joint) vopt.init(vm.ps);

    const uint64_t video_hash_before = param_hash(vm.ps);
    auto frozen_check = [&]() {
        if (!joint)
            VPL_CHECK(param_hash(vm.ps) == video_hash_before,
                      "frozen video parameters changed during action training");
    };

    const std::vector<int> pool = ds.indices_for(cfg.tasks);
    const std::set<int> allowed(cfg.tasks.begin(), cfg.tasks.end());
    std::set<int> tasks_seen;

    std::vector<ParamSet*> sets = {&pn.ps};
    std::vector<Adam*> opts = {&aopt};
    if (joint) {
        sets.push_back(&vm.ps);
        opts.push_back(&vopt);
    }
    TrainState st = load_state(dir / "state.vpl", "action", cfg.hash(),
                               sets, opts);
    TrainLogger log{dir / "log.jsonl"};
    const double t_start = now_ms();
    double ema = st.ema, init_loss = st.init_loss;
    int k = st.step;
    const int stop = max_steps_this_run > 0 ? std::min(cfg.steps, k + max_steps_this_run)
                                            : cfg.steps;

    auto save_progress = [&](int step) {
        std::vector<const ParamSet*> cs(sets.begin(), sets.end());
        std::vector<const Adam*> co(opts.begin(), opts.end());
        save_state(dir / "state.vpl", "action", cfg.hash(), step, ema, init_loss, cs, co);
    };
    auto save_model = [&]() {
        Checkpoint pck = act::policy_checkpoint(pn, ds.stats, cfg.mode);
        pck.meta["train"] = cfg.to_json();
        pck.meta["config"] = hex16(cfg.hash());
        save_checkpoint(res.model, pck);
        if (joint) {
            Checkpoint tuned = video::video_checkpoint(vm);
            tuned.meta["train"] = vck.meta["train"];
            tuned.meta["train"]["joint_tuned_by"] = hex16(cfg.hash());
            save_checkpoint(dir / "video.vpl", tuned);
        }
    };

    for (; k < stop; ++k) {
        Rng wrng = step_rng(cfg.seed, rng_stream::kTrainWindow, static_cast<uint64_t>(k));
        Rng nrng = step_rng(cfg.seed, rng_stream::kTrainNoise, static_cast<uint64_t>(k));
        Rng drng = step_rng(cfg.seed, rng_stream::kCondDropout, static_cast<uint64_t>(k));
        const double lr_k = cosine_lr(cfg.lr, cfg.decay, k, cfg.steps);
        aopt.lr = lr_k;
        vopt.lr = lr_k;
        pn.ps.zero_grads();
        if (joint) vm.ps.zero_grads();
        double batch_loss = 0.0, batch_video = 0.0, batch_action = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const data::Demo& d = draw_demo(ds, pool, wrng);
            VPL_CHECK(allowed.count(d.task_id) != 0,
                      "action batch drew task %d outside the configured subset", d.task_id);
            tasks_seen.insert(d.task_id);
            const int t0 = data::draw_t0(wrng, d);
            const data::TrainingWindow w = data::sample_window(d, t0, cfg.horizon, ds.stats);
            const int i = static_cast<int>(nrng.below(static_cast<uint64_t>(vm.sched.T)));
            std::vector<double> eps_v(video::kSeqSize), eps_a(act::kActSize);
            for (auto& v : eps_v) v = nrng.gauss();
            for (auto& v : eps_a) v = nrng.gauss();
            if (joint) {
                const int row = drng.uniform() < cfg.cond_dropout ? video::kNullTaskRow
                                                                  : d.task_id;
                video::VideoTrainStep vs = video::video_window_step(vm, w, row, i, eps_v);
                Tensor la = act::action_window_loss(pn, vs.out.taps, w, i, eps_a);
                batch_video += vs.loss.item();
                batch_action += la.item();
                Tensor total = add(mul_scalar(vs.loss, cfg.w_video), mul_scalar(la, cfg.w_action));
                batch_loss += total.item();
                backward(mul_scalar(total, 1.0 / cfg.batch));
            } else {
                std::array<Tensor, video::kNumTaps> taps;
                {
                    NoGradGuard ng;
                    taps = video::video_window_step(vm, w, d.task_id, i, eps_v).out.taps;
                }
                Tensor la = act::action_window_loss(pn, taps, w, i, eps_a);
                batch_action += la.item();
                batch_loss += la.item();
                backward(mul_scalar(la, 1.0 / cfg.batch));
            }
        }
        batch_loss /= cfg.batch;
        batch_video /= cfg.batch;
        batch_action /= cfg.batch;
        check_loss_finite(batch_loss, "action");
        aopt.step(pn.ps);
        if (joint) vopt.step(vm.ps);
        if (k == 0) init_loss = batch_loss;
        ema = k == 0 ? batch_loss : kEmaKeep * ema + (1.0 - kEmaKeep) * batch_loss;
        if (k % cfg.log_every == 0 || k + 1 == stop) {
            Json line{{"step", k},           {"loss", batch_loss},
                      {"smooth", ema},       {"wall_ms", now_ms() - t_start},
                      {"seed", cfg.seed},    {"config", hex16(cfg.hash())},
                      {"action_loss", batch_action}};
            if (joint) line["video_loss"] = batch_video;
            log.append(line);
        }
        if ((k + 1) % kHashCheckEvery == 0) frozen_check();
        if ((k + 1) % cfg.ckpt_every == 0 && k + 1 < stop) save_progress(k + 1);
    }

    frozen_check();
    save_progress(k);
    if (k == cfg.steps) {
        save_model();
        res.complete = true;
    }
    res.init_loss = init_loss;
    res.smooth = ema;
    res.steps_done = k;
    res.meta = Json{{"mode", cfg.mode},
                    {"tasks_seen", std::vector<int>(tasks_seen.begin(), tasks_seen.end())},
                    {"loss_weights", Json::array({cfg.w_video, cfg.w_action})},
                    {"video_hash_before", hex16(video_hash_before)},
                    {"video_hash_after", hex16(param_hash(vm.ps))}};
    return res;
}

// ---------------------------------------------------------------------------
// Baseline training
// ---------------------------------------------------------------------------

inline StageResult train_baseline(const data::Dataset& ds, const BaselineStageCfg& cfg,
                                  const std::filesystem::path& dir, int max_steps_this_run = 0,
                                  bool force = false) {
    using namespace detail_train;
    StageResult res;
    res.dir = dir;
    res.model = dir / "baseline.vpl";
    res.config_hash = cfg.hash();
    if (claim_stage_dir(dir, cfg.to_json(), "baseline.vpl", force)) {
        res.reused = true;
        res.complete = true;
        res.meta = load_checkpoint(res.model).meta;
        return res;
    }

    act::BaselinePolicy bp = act::BaselinePolicy::build(cfg.seed);
    Adam opt;
    opt.lr = cfg.lr;
    opt.init(bp.ps);
    const std::vector<int> pool = ds.indices_for(cfg.tasks);

    TrainState st = load_state(dir / "state.vpl", "baseline", cfg.hash(), {&bp.ps}, {&opt});
    TrainLogger log{dir / "log.jsonl"};
    const double t_start = now_ms();
    double ema = st.ema, init_loss = st.init_loss;
    int k = st.step;
    const int stop = max_steps_this_run > 0 ? std::min(cfg.steps, k + max_steps_this_run)
                                            : cfg.steps;

    auto save_progress = [&](int step) {
        save_state(dir / "state.vpl", "baseline", cfg.hash(), step, ema, init_loss, {&bp.ps},
                   {&opt});
    };
    auto save_model = [&]() {
        Checkpoint ck = act::baseline_checkpoint(bp, ds.stats);
        ck.meta["train"] = cfg.to_json();
        ck.meta["config"] = hex16(cfg.hash());
        save_checkpoint(res.model, ck);
    };

    for (; k < stop; ++k) {
        Rng wrng = step_rng(cfg.seed, rng_stream::kTrainWindow, static_cast<uint64_t>(k));
        Rng nrng = step_rng(cfg.seed, rng_stream::kTrainNoise, static_cast<uint64_t>(k));
        opt.lr = cosine_lr(cfg.lr, cfg.decay, k, cfg.steps);
        bp.ps.zero_grads();
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const data::Demo& d = draw_demo(ds, pool, wrng);
            const int t0 = data::draw_t0(wrng, d);
            const data::TrainingWindow w = data::sample_window(d, t0, 32, ds.stats);
            const int i = static_cast<int>(nrng.below(static_cast<uint64_t>(bp.sched.T)));
            std::vector<double> eps_a(act::kActSize);
            for (auto& v : eps_a) v = nrng.gauss();
            Tensor loss = act::baseline_window_loss(bp, w, d.task_id, i, eps_a);
            batch_loss += loss.item();
            backward(mul_scalar(loss, 1.0 / cfg.batch));
        }
        batch_loss /= cfg.batch;
        check_loss_finite(batch_loss, "baseline");
        opt.step(bp.ps);
        if (k == 0) init_loss = batch_loss;
        ema = k == 0 ? batch_loss : kEmaKeep * ema + (1.0 - kEmaKeep) * batch_loss;
        if (k % cfg.log_every == 0 || k + 1 == stop)
            log.append(Json{{"step", k},
                            {"loss", batch_loss},
                            {"smooth", ema},
                            {"wall_ms", now_ms() - t_start},
                            {"seed", cfg.seed},
                            {"config", hex16(cfg.hash())}});
        if ((k + 1) % cfg.ckpt_every == 0 && k + 1 < stop) save_progress(k + 1);
    }
    save_progress(k);
    if (k == cfg.steps) {
        save_model();
        res.complete = true;
    }
    res.init_loss = init_loss;
    res.smooth = ema;
    res.steps_done = k;
    res.meta = Json{{"tasks", cfg.tasks}};
    return res;
}

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

struct VariantSpec {
    std::string name;
    int horizon = 32;
    bool generic_video = false;   // stage 1 is random-policy pretraining
    bool fresh_video_init = false;  // joint coupling starts from an untrained net
    std::string mode = "frozen_video";
    bool baseline_only = false;
    std::vector<int> action_tasks = all_task_ids();
    double w_video = 1.0, w_action = 1.0;

    static const std::vector<std::string>& names() {
        static const std::vector<std::string> v = {"two_stage",  "joint",      "no_video_tuning",
                                                   "horizon_0",  "horizon_16", "horizon_32",
                                                   "half_tasks", "dp_baseline"};
        return v;
    }

    static VariantSpec named(const std::string& n) {
        VariantSpec v;
        v.name = n;
        if (n == "two_stage" || n == "horizon_32") return v;
        if (n == "joint") {
            v.mode = "joint";
            v.fresh_video_init = true;
            return v;
        }
        if (n == "no_video_tuning") {
            v.generic_video = true;
            v.mode = "no_tune";
            return v;
        }
        if (n == "horizon_0") {
            v.horizon = 0;
            return v;
        }
        if (n == "horizon_16") {
            v.horizon = 16;
            return v;
        }
        if (n == "half_tasks") {
            v.action_tasks = half_task_ids();
            return v;
        }
        if (n == "dp_baseline") {
            v.baseline_only = true;
            v.action_tasks = half_task_ids();
            return v;
        }
        throw ConfigError(detail::format("unknown variant '%s'", n.c_str()));
    }

    Json to_json() const {
        return Json{{"name", name},
                    {"horizon", horizon},
                    {"generic_video", generic_video},
                    {"fresh_video_init", fresh_video_init},
                    {"mode", mode},
                    {"baseline_only", baseline_only},
                    {"action_tasks", action_tasks},
                    {"held_out_tasks", held_out_task_ids()},
                    {"loss_weights", Json::array({w_video, w_action})}};
    }
};

inline Json load_registry(const std::filesystem::path& run_dir) {
    const auto path = run_dir / "registry.json";
    if (!std::filesystem::exists(path)) return Json{{"variants", Json::object()}};
    return Json::parse(data::detail_data::read_text(path));
}

inline void save_registry(const std::filesystem::path& run_dir, const Json& reg) {
    data::detail_data::write_text(run_dir / "registry.json", reg.dump(2) + "\n");
}

// Runs the variant's stage plan for every seed. Stages land under
// stages/<kind>-<confighash>/, so identical stages across variants (the
// two_stage video net reused by horizon_32 and half_tasks) train once. A
// failing stage marks that (variant, seed) failed and the loop moves on.
inline Json run_variant(const std::string& name, const data::Dataset& ds,
                        const data::RunConfig& rc, const std::vector<uint64_t>& seeds,
                        bool force = false) {
    const VariantSpec v = VariantSpec::named(name);
    const std::filesystem::path run(rc.run_dir);
    std::filesystem::create_directories(run / "stages");

    auto stage_dir = [&](const std::string& kind, uint64_t hash) {
        return run / "stages" / (kind + "-" + hex16(hash));
    };
    auto result_json = [](const StageResult& r) {
        return Json{{"dir", r.dir.string()},      {"model", r.model.string()},
                    {"config", hex16(r.config_hash)}, {"reused", r.reused},
                    {"init_loss", r.init_loss},   {"smooth", r.smooth},
                    {"steps_done", r.steps_done}};
    };

    Json entry;
    entry["spec"] = v.to_json();
    entry["seeds"] = Json::object();
    for (uint64_t seed : seeds) {
        Json rec;
        rec["ok"] = false;
        try {
            if (v.baseline_only) {
                BaselineStageCfg bc = BaselineStageCfg::from_run(rc, seed, v.action_tasks);
                StageResult br = train_baseline(ds, bc, stage_dir("baseline", bc.hash()), 0, force);
                rec["baseline"] = result_json(br);
                rec["policy"] = br.model.string();
            } else {
                std::filesystem::path video_ck;
                if (v.fresh_video_init) {
                    video_ck = ensure_video_init(run, seed, v.horizon);
                } else {
                    VideoStageCfg vc = VideoStageCfg::from_run(rc, seed, v.horizon,
                                                               v.generic_video);
                    StageResult vr = train_video(ds, vc, stage_dir("video", vc.hash()), 0, force);
                    rec["video_stage"] = result_json(vr);
                    video_ck = vr.model;
                }
                ActionStageCfg ac = ActionStageCfg::from_run(rc, seed, v.horizon, v.mode,
                                                             v.action_tasks,
                                                             file_hash(video_ck));
                ac.w_video = v.w_video;
                ac.w_action = v.w_action;
                StageResult ar = train_action(ds, video_ck, ac, stage_dir("action", ac.hash()), 0,
                                              force);
                rec["action_stage"] = result_json(ar);
                rec["policy"] = ar.model.string();
                rec["video"] = (v.mode == "joint" ? (ar.dir / "video.vpl") : video_ck).string();
            }
            rec["ok"] = true;
        } catch (const Error& e) {
            rec["error"] = e.what();
        }
        entry["seeds"][std::to_string(seed)] = rec;
    }

    Json reg = load_registry(run);
    reg["variants"][name] = entry;
    save_registry(run, reg);
    return entry;
}

}  // namespace vpl::train
