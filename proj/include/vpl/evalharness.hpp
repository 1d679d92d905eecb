#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "trainer.hpp"

// Closed-loop evaluation: receding-horizon rollouts from pixels, success
// tables over disjoint held-out seed blocks, and byte-deterministic reports
// (JSON, CSV, SVG). Policies enter as planners: a function from the two
// current view images to a 32-action plan, so the harness never sees
// privileged state.
namespace vpl::evals {

// ---------------------------------------------------------------------------
// Planners
// ---------------------------------------------------------------------------

using Plan = std::array<sim::Action, act::kHorizon>;
using Planner = std::function<Plan(const std::array<sim::Image, 2>& obs, int wall_step)>;
// One planner per episode; the factory gets the episode's task and seed so
// sampling noise is reproducible per episode regardless of execution order.
using PlannerFactory = std::function<Planner(int task_id, uint64_t seed)>;

inline Plan to_plan(const std::array<std::array<double, act::kDim>, act::kHorizon>& a) {
    Plan out;
    for (int t = 0; t < act::kHorizon; ++t) out[t] = {a[t][0], a[t][1], a[t][2]};
    return out;
}

// A policy checkpoint plus whatever it needs to plan; shared_ptr members so
// the factory's closures keep the models alive.
struct LoadedPlanner {
    std::shared_ptr<act::LoadedPolicy> policy;      // lockstep video+action
    std::shared_ptr<video::VideoDenoiser> vm;
    std::shared_ptr<act::LoadedBaseline> baseline;  // encoder-only
    SamplerConfig sc;

    PlannerFactory factory() const {
        const SamplerConfig s = sc;
        if (baseline) {
            auto b = baseline;
            return [b, s](int task, uint64_t seed) {
                auto rng = std::make_shared<Rng>(seed, rng_stream::kEval);
                return Planner([b, s, task, rng](const std::array<sim::Image, 2>& obs, int) {
                    return to_plan(
                        act::sample_baseline_actions(b->net, b->stats, obs, task, s, *rng));
                });
            };
        }
        VPL_CHECK(policy && vm, "planner holds neither a lockstep policy nor a baseline");
        auto p = policy;
        auto v = vm;
        return [p, v, s](int task, uint64_t seed) {
            auto rng = std::make_shared<Rng>(seed, rng_stream::kEval);
            return Planner([p, v, s, task, rng](const std::array<sim::Image, 2>& obs, int) {
                return to_plan(
                    act::sample_actions(*v, p->net, p->stats, obs, task, s, *rng).actions);
            });
        };
    }
};

inline LoadedPlanner load_planner(const std::filesystem::path& policy_path,
                                  const std::filesystem::path& video_path, int sampler_steps,
                                  double cfg_scale) {
    Checkpoint ck = load_checkpoint(policy_path);
    const std::string kind = ck.meta.value("kind", "");
    LoadedPlanner lp;
    if (kind == "baseline_policy") {
        lp.baseline = std::make_shared<act::LoadedBaseline>(act::load_baseline(ck));
        lp.sc = SamplerConfig::strided(lp.baseline->net.sched, sampler_steps, cfg_scale);
    } else if (kind == "action_policy") {
        if (video_path.empty())
            throw MissingArtifactError(detail::format(
                "policy '%s' plans through a video model; none was given",
                policy_path.string().c_str()));
        lp.policy = std::make_shared<act::LoadedPolicy>(act::load_policy(ck));
        lp.vm = std::make_shared<video::VideoDenoiser>(video::load_video_denoiser(video_path));
        lp.sc = SamplerConfig::strided(lp.vm->sched, sampler_steps, cfg_scale);
    } else {
        throw ConfigError(detail::format("'%s' does not hold a policy checkpoint",
                                         policy_path.string().c_str()));
    }
    return lp;
}

// A pixels-in oracle for harness tests: it mirrors the deterministic
// environment from (task, seed, shift) and its own returned actions, so it
// can consult the scripted expert without the harness leaking state.
inline PlannerFactory expert_twin_factory(sim::Shift shift) {
    return [shift](int task, uint64_t seed) {
        struct Twin {
            sim::WorldState cur;
            std::vector<sim::Action> last_plan;
            int planned_at = 0;
        };
        auto tw = std::make_shared<Twin>();
        tw->cur = sim::reset(static_cast<sim::Task>(task), seed, shift);
        return Planner([tw](const std::array<sim::Image, 2>&, int wall_step) {
            const int executed = wall_step - tw->planned_at;
            VPL_CHECK(executed >= 0 && executed <= static_cast<int>(tw->last_plan.size()),
                      "twin planner lost sync at wall step %d", wall_step);
            for (int j = 0; j < executed; ++j) tw->cur = sim::step(tw->cur, tw->last_plan[j]);
            tw->planned_at = wall_step;
            tw->last_plan.clear();
            Plan out;
            sim::WorldState s = tw->cur;
            for (int t = 0; t < act::kHorizon; ++t) {
                out[t] = sim::expert_action(s).action;
                s = sim::step(s, out[t]);
                tw->last_plan.push_back(out[t]);
            }
            return out;
        });
    };
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct RolloutCfg {
    int exec_horizon = 16;  // actions executed per plan before re-planning
    int max_steps = 96;
};

struct EpisodeResult {
    int task_id = 0;
    uint64_t seed = 0;
    sim::Shift shift = sim::Shift::none;
    bool success = false;
    int steps = 0;  // environment steps consumed
    int plans = 0;  // planner invocations
    bool error = false;
    std::string error_msg;
};

// Receding-horizon control: observe, plan a full horizon, execute the first
// exec_horizon actions, repeat. Stops at success or the step cap. A planner
// throw (a diverged sampler, a missing artifact) fails the episode and is
// recorded, never propagated.
inline EpisodeResult rollout(const Planner& plan, sim::Task task, uint64_t seed,
                             sim::Shift shift, const RolloutCfg& rc = {}) {
    VPL_CHECK(rc.exec_horizon >= 1 && rc.exec_horizon <= act::kHorizon,
              "rollout: exec_horizon %d outside [1,%d]", rc.exec_horizon, act::kHorizon);
    VPL_CHECK(rc.max_steps >= 1, "rollout: max_steps must be positive");
    EpisodeResult ep;
    ep.task_id = static_cast<int>(task);
    ep.seed = seed;
    ep.shift = shift;
    sim::WorldState s = sim::reset(task, seed, shift);
    try {
        while (ep.steps < rc.max_steps && !ep.success) {
            const std::array<sim::Image, 2> obs = {sim::render(s, sim::View::scene),
                                                   sim::render(s, sim::View::gripper)};
            const Plan actions = plan(obs, ep.steps);
            ++ep.plans;
            for (int j = 0; j < rc.exec_horizon && ep.steps < rc.max_steps && !ep.success; ++j) {
                s = sim::step(s, actions[static_cast<size_t>(j)]);
                ++ep.steps;
                ep.success = sim::success(s, task);
            }
        }
    } catch (const Error& e) {
        ep.error = true;
        ep.error_msg = e.what();
        ep.success = false;
    }
    return ep;
}

// ---------------------------------------------------------------------------
// Suites and tables
// ---------------------------------------------------------------------------

constexpr uint64_t kSeedBlock = 10000;

// Episode seeds live in per-task blocks far above any demo seed, so held-out
// initial states never coincide with training data.
inline uint64_t episode_seed(uint64_t seed_base, int task_id, int episode) {
    VPL_CHECK(episode >= 0 && episode < static_cast<int>(kSeedBlock),
              "episode index %d exceeds the seed block", episode);
    return seed_base + kSeedBlock * static_cast<uint64_t>(task_id) +
           static_cast<uint64_t>(episode);
}

struct EvalConfig {
    std::vector<int> tasks = train::all_task_ids();
    int episodes = 50;
    uint64_t seed_base = 900000;
    sim::Shift shift = sim::Shift::none;
    RolloutCfg roll;
    int sampler_steps = 30;
    double cfg_scale = 2.0;

    static EvalConfig from_run(const data::RunConfig& rc) {
        EvalConfig c;
        c.episodes = rc.eval_episodes;
        c.seed_base = rc.eval_seed_base;
        c.roll.exec_horizon = rc.exec_horizon;
        c.roll.max_steps = rc.max_eval_steps;
        c.sampler_steps = rc.sampler_steps;
        c.cfg_scale = rc.cfg_scale;
        return c;
    }

    Json to_json() const {
        return Json{{"tasks", tasks},
                    {"episodes", episodes},
                    {"seed_base", seed_base},
                    {"shift", sim::shift_name(shift)},
                    {"exec_horizon", roll.exec_horizon},
                    {"max_steps", roll.max_steps},
                    {"sampler_steps", sampler_steps},
                    {"cfg_scale", cfg_scale}};
    }
    uint64_t hash() const {
        const std::string s = to_json().dump();
        return fnv1a64(s.data(), s.size());
    }
};

// Runs every configured episode; failures count as unsuccessful episodes and
// the suite finishes regardless. extra_meta is stored verbatim (policy path,
// checkpoint hash) for provenance.
inline Json eval_suite(const PlannerFactory& factory, const EvalConfig& cfg,
                       const Json& extra_meta = Json::object()) {
    VPL_CHECK(cfg.episodes >= 1, "eval_suite: episodes must be positive");
    Json table;
    table["kind"] = "eval_table";
    table["config"] = cfg.to_json();
    table["config_hash"] = train::hex16(cfg.hash());
    table["meta"] = extra_meta;
    table["tasks"] = Json::array();
    int all_succ = 0, all_count = 0, all_err = 0;
    for (int tid : cfg.tasks) {
        VPL_CHECK(tid >= 0 && tid < sim::kNumTasks, "eval_suite: bad task id %d", tid);
        Json rows = Json::array();
        int succ = 0, errs = 0;
        for (int e = 0; e < cfg.episodes; ++e) {
            const uint64_t seed = episode_seed(cfg.seed_base, tid, e);
            Planner plan = factory(tid, seed);
            EpisodeResult ep = rollout(plan, static_cast<sim::Task>(tid), seed, cfg.shift,
                                       cfg.roll);
            Json row{{"seed", seed},
                     {"success", ep.success},
                     {"steps", ep.steps},
                     {"plans", ep.plans}};
            if (ep.error) row["error"] = ep.error_msg;
            rows.push_back(std::move(row));
            succ += ep.success ? 1 : 0;
            errs += ep.error ? 1 : 0;
        }
        table["tasks"].push_back(Json{{"id", tid},
                                      {"name", sim::task_name(static_cast<sim::Task>(tid))},
                                      {"episodes", std::move(rows)},
                                      {"successes", succ},
                                      {"count", cfg.episodes},
                                      {"rate", double(succ) / cfg.episodes},
                                      {"errors", errs}});
        all_succ += succ;
        all_count += cfg.episodes;
        all_err += errs;
    }
    table["overall"] = Json{{"successes", all_succ},
                            {"count", all_count},
                            {"rate", double(all_succ) / all_count},
                            {"errors", all_err}};
    return table;
}

inline Json eval_suite(const LoadedPlanner& lp, const EvalConfig& cfg,
                       const Json& extra_meta = Json::object()) {
    return eval_suite(lp.factory(), cfg, extra_meta);
}

// Recomputes every aggregate from the episode records; a table whose stored
// rates disagree with its own rows is corrupt.
inline void verify_table(const Json& table) {
    VPL_CHECK(table.value("kind", "") == "eval_table", "not an evaluation table");
    const std::string want = table.at("config_hash").get<std::string>();
    Json cfg = table.at("config");
    const std::string s = cfg.dump();
    VPL_CHECK(train::hex16(fnv1a64(s.data(), s.size())) == want,
              "evaluation table config hash does not match its config");
    int all_succ = 0, all_count = 0, all_err = 0;
    for (const Json& t : table.at("tasks")) {
        int succ = 0, errs = 0;
        for (const Json& row : t.at("episodes")) {
            succ += row.at("success").get<bool>() ? 1 : 0;
            errs += row.contains("error") ? 1 : 0;
        }
        const int count = static_cast<int>(t.at("episodes").size());
        VPL_CHECK(t.at("successes").get<int>() == succ && t.at("count").get<int>() == count &&
                      t.at("errors").get<int>() == errs &&
                      t.at("rate").get<double>() == double(succ) / count,
                  "evaluation table aggregates disagree with task %d episode records",
                  t.at("id").get<int>());
        all_succ += succ;
        all_count += count;
        all_err += errs;
    }
    const Json& ov = table.at("overall");
    VPL_CHECK(ov.at("successes").get<int>() == all_succ &&
                  ov.at("count").get<int>() == all_count &&
                  ov.at("errors").get<int>() == all_err &&
                  ov.at("rate").get<double>() == double(all_succ) / all_count,
              "evaluation table overall aggregates disagree with its tasks");
}

inline void save_table(const std::filesystem::path& path, const Json& table) {
    verify_table(table);
    data::detail_data::write_text(path, table.dump(2) + "\n");
}

inline Json load_table(const std::filesystem::path& path) {
    Json table = Json::parse(data::detail_data::read_text(path));
    verify_table(table);
    return table;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ReportInput {
    std::string name;
    std::vector<Json> tables;  // one per training seed; empty means missing
};

namespace detail_eval {

struct Pooled {
    int successes = 0, count = 0, errors = 0;
    double rate() const { return count ? double(successes) / count : 0.0; }
};

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

// Success-rate line chart over the horizon sweep; segments are drawn only
// between adjacent present points, so a missing table leaves a visible gap.
inline std::string horizon_svg(const std::vector<std::pair<int, std::optional<double>>>& pts) {
    const double W = 480, H = 320, ml = 56, mr = 24, mt = 24, mb = 44;
    auto x_of = [&](int h) { return ml + (W - ml - mr) * (h / 32.0); };
    auto y_of = [&](double r) { return mt + (H - mt - mb) * (1.0 - r); };
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" "
         "viewBox=\"0 0 480 320\" font-family=\"monospace\" font-size=\"12\">\n";
    s += "<rect width=\"480\" height=\"320\" fill=\"white\"/>\n";
    for (int g = 0; g <= 4; ++g) {
        const double r = g / 4.0;
        s += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(y_of(r)) + "\" x2=\"" + fmt(W - mr) +
             "\" y2=\"" + fmt(y_of(r)) + "\" stroke=\"#ddd\"/>\n";
        s += "<text x=\"" + fmt(ml - 8) + "\" y=\"" + fmt(y_of(r) + 4) +
             "\" text-anchor=\"end\">" + fmt(r) + "</text>\n";
    }
    for (const auto& [h, r] : pts) {
        s += "<text x=\"" + fmt(x_of(h)) + "\" y=\"" + fmt(H - mb + 20) +
             "\" text-anchor=\"middle\">" + std::to_string(h) + "</text>\n";
        if (!r)
            s += "<text x=\"" + fmt(x_of(h)) + "\" y=\"" + fmt(y_of(0.5)) +
                 "\" text-anchor=\"middle\" fill=\"#c00\">missing</text>\n";
    }
    s += "<text x=\"" + fmt((ml + W - mr) / 2) + "\" y=\"" + fmt(H - 8) +
         "\" text-anchor=\"middle\">prediction horizon (actions)</text>\n";
    for (size_t i = 0; i + 1 < pts.size(); ++i)
        if (pts[i].second && pts[i + 1].second)
            s += "<line x1=\"" + fmt(x_of(pts[i].first)) + "\" y1=\"" +
                 fmt(y_of(*pts[i].second)) + "\" x2=\"" + fmt(x_of(pts[i + 1].first)) +
                 "\" y2=\"" + fmt(y_of(*pts[i + 1].second)) +
                 "\" stroke=\"#06c\" stroke-width=\"2\"/>\n";
    for (const auto& [h, r] : pts)
        if (r)
            s += "<circle cx=\"" + fmt(x_of(h)) + "\" cy=\"" + fmt(y_of(*r)) +
                 "\" r=\"4\" fill=\"#06c\"/>\n";
    s += "</svg>\n";
    return s;
}

inline std::string bars_svg(const std::vector<std::pair<std::string, double>>& bars) {
    const double W = 560, H = 320, ml = 56, mr = 16, mt = 24, mb = 96;
    const double span = W - ml - mr;
    const double bw = bars.empty() ? 0.0 : span / bars.size();
    auto y_of = [&](double r) { return mt + (H - mt - mb) * (1.0 - r); };
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"560\" height=\"320\" "
         "viewBox=\"0 0 560 320\" font-family=\"monospace\" font-size=\"11\">\n";
    s += "<rect width=\"560\" height=\"320\" fill=\"white\"/>\n";
    for (int g = 0; g <= 4; ++g) {
        const double r = g / 4.0;
        s += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(y_of(r)) + "\" x2=\"" + fmt(W - mr) +
             "\" y2=\"" + fmt(y_of(r)) + "\" stroke=\"#ddd\"/>\n";
        s += "<text x=\"" + fmt(ml - 8) + "\" y=\"" + fmt(y_of(r) + 4) +
             "\" text-anchor=\"end\">" + fmt(r) + "</text>\n";
    }
    for (size_t i = 0; i < bars.size(); ++i) {
        const double x = ml + bw * i + bw * 0.15;
        s += "<rect x=\"" + fmt(x) + "\" y=\"" + fmt(y_of(bars[i].second)) + "\" width=\"" +
             fmt(bw * 0.7) + "\" height=\"" + fmt(y_of(0.0) - y_of(bars[i].second)) +
             "\" fill=\"#06c\"/>\n";
        s += "<text x=\"" + fmt(x + bw * 0.35) + "\" y=\"" + fmt(H - mb + 14) +
             "\" text-anchor=\"end\" transform=\"rotate(-35 " + fmt(x + bw * 0.35) + " " +
             fmt(H - mb + 14) + ")\">" + bars[i].first + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

}  // namespace detail_eval

// Aggregates per-variant tables (pooled over seeds), writes report.json,
// report.csv, and the figures, and returns the summary. Missing variants are
// reported as gaps, not errors; the caller decides whether gaps are fatal.
inline Json make_report(const std::vector<ReportInput>& inputs,
                        const std::filesystem::path& out_dir) {
    using detail_eval::Pooled;
    std::filesystem::create_directories(out_dir / "figures");

    std::map<std::string, const ReportInput*> by_name;
    for (const ReportInput& in : inputs) {
        VPL_CHECK(by_name.emplace(in.name, &in).second, "report: duplicate variant '%s'",
                  in.name.c_str());
    }

    Json summary;
    summary["kind"] = "eval_report";
    summary["variants"] = Json::object();
    std::vector<std::string> missing;
    std::string csv = "variant,task,count,successes,rate,status\n";

    for (const auto& [name, in] : by_name) {
        if (in->tables.empty()) {
            missing.push_back(name);
            summary["variants"][name] = Json{{"status", "missing"}};
            csv += name + ",overall,0,0,,missing\n";
            continue;
        }
        std::string chash;
        Pooled overall;
        std::map<int, Pooled> per_task;
        std::map<int, std::string> task_names;
        for (const Json& t : in->tables) {
            verify_table(t);
            const std::string h = t.at("config_hash").get<std::string>();
            if (chash.empty()) chash = h;
            VPL_CHECK(h == chash, "report: variant '%s' mixes evaluation configs",
                      name.c_str());
            for (const Json& task : t.at("tasks")) {
                Pooled& p = per_task[task.at("id").get<int>()];
                p.successes += task.at("successes").get<int>();
                p.count += task.at("count").get<int>();
                p.errors += task.at("errors").get<int>();
                task_names[task.at("id").get<int>()] = task.at("name").get<std::string>();
            }
            overall.successes += t.at("overall").at("successes").get<int>();
            overall.count += t.at("overall").at("count").get<int>();
            overall.errors += t.at("overall").at("errors").get<int>();
        }
        Json vj;
        vj["status"] = "ok";
        vj["seeds"] = in->tables.size();
        vj["config_hash"] = chash;
        vj["shift"] = in->tables[0].at("config").at("shift");
        vj["overall"] = Json{{"count", overall.count},
                             {"successes", overall.successes},
                             {"rate", overall.rate()},
                             {"errors", overall.errors}};
        vj["per_task"] = Json::object();
        csv += name + ",overall," + std::to_string(overall.count) + "," +
               std::to_string(overall.successes) + "," + detail_eval::fmt(overall.rate()) +
               ",ok\n";
        for (const auto& [tid, p] : per_task) {
            vj["per_task"][std::to_string(tid)] =
                Json{{"name", task_names[tid]},
                     {"count", p.count},
                     {"successes", p.successes},
                     {"rate", p.rate()},
                     {"errors", p.errors}};
            csv += name + "," + task_names[tid] + "," + std::to_string(p.count) + "," +
                   std::to_string(p.successes) + "," + detail_eval::fmt(p.rate()) + ",ok\n";
        }
        summary["variants"][name] = std::move(vj);
    }
    summary["missing"] = missing;

    Json horizon = Json::object();
    std::vector<std::pair<int, std::optional<double>>> pts;
    for (const auto& [h, vn] : std::vector<std::pair<int, std::string>>{
             {0, "horizon_0"}, {16, "horizon_16"}, {32, "horizon_32"}}) {
        std::optional<double> r;
        const Json& vs = summary["variants"];
        if (vs.contains(vn) && vs[vn]["status"] == "ok")
            r = vs[vn]["overall"]["rate"].get<double>();
        horizon[std::to_string(h)] = r ? Json(*r) : Json(nullptr);
        pts.emplace_back(h, r);
    }
    summary["horizon"] = horizon;

    std::vector<std::pair<std::string, double>> bars;
    for (const auto& [name, vj] : summary["variants"].items())
        if (vj["status"] == "ok") bars.emplace_back(name, vj["overall"]["rate"].get<double>());

    data::detail_data::write_text(out_dir / "report.json", summary.dump(2) + "\n");
    data::detail_data::write_text(out_dir / "report.csv", csv);
    data::detail_data::write_text(out_dir / "figures" / "horizon.svg",
                                  detail_eval::horizon_svg(pts));
    data::detail_data::write_text(out_dir / "figures" / "variants.svg",
                                  detail_eval::bars_svg(bars));
    return summary;
}

}  // namespace vpl::evals
