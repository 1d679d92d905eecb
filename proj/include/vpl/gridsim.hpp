#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vpl/common.hpp"
#include "vpl/rng.hpp"

namespace vpl::sim {

// ---------------------------------------------------------------------------
// Workspace conventions: unit square, x to the right, y downward (render row
// order). Distances are Euclidean; motion limits apply per component.
// ---------------------------------------------------------------------------

constexpr double kMaxDelta = 0.05;      // per-component position change per step
constexpr double kGraspRadius = 0.04;   // jaw-close attach distance
constexpr double kPushRadius = 0.045;   // closed-jaw shove distance
constexpr double kHandleRadius = 0.05;  // drawer drag engage distance
constexpr double kButtonRadius = 0.05;
constexpr double kDrawerTravel = 0.16;  // handle y distance from closed to open
constexpr double kJawRate = 0.5;
constexpr double kWorkMargin = 0.02;
constexpr int kFrameSize = 16;
constexpr int kEpisodeSteps = 48;

struct Rgb {
    double r, g, b;
};

// Training palette for movable objects; the held-out palette is disjoint and
// only appears under the unseen_appearance shift.
inline const std::array<Rgb, 4>& train_palette() {
    static const std::array<Rgb, 4> p{{{0.85, 0.15, 0.15},
                                       {0.15, 0.25, 0.85},
                                       {0.90, 0.80, 0.10},
                                       {0.10, 0.70, 0.20}}};
    return p;
}
inline const std::array<Rgb, 4>& holdout_palette() {
    static const std::array<Rgb, 4> p{{{0.60, 0.10, 0.70},
                                       {0.10, 0.80, 0.80},
                                       {0.95, 0.55, 0.05},
                                       {0.95, 0.40, 0.65}}};
    return p;
}
inline Rgb background_color(int id) {
    return id == 0 ? Rgb{0.42, 0.40, 0.38} : Rgb{0.20, 0.32, 0.30};
}
inline Rgb object_color(int palette_id) {
    // ids 0..3 training palette, 4..7 held-out
    return palette_id < 4 ? train_palette()[static_cast<size_t>(palette_id)]
                          : holdout_palette()[static_cast<size_t>(palette_id - 4)];
}

enum class Task {
    pick_place_left = 0,
    pick_place_right = 1,
    open_drawer = 2,
    close_drawer = 3,
    press_button = 4,
    push_to_zone = 5,
    stack_block = 6,
    upright_peg = 7,
};
constexpr int kNumTasks = 8;

enum class Shift { none = 0, position = 1, appearance = 2, background = 3 };

inline const char* task_name(Task t) {
    static const char* names[] = {"pick_place_left", "pick_place_right", "open_drawer",
                                  "close_drawer",    "press_button",     "push_to_zone",
                                  "stack_block",     "upright_peg"};
    return names[static_cast<int>(t)];
}
inline Task task_from_name(const std::string& s) {
    for (int i = 0; i < kNumTasks; ++i)
        if (s == task_name(static_cast<Task>(i))) return static_cast<Task>(i);
    throw ConfigError(detail::format("unknown task '%s'", s.c_str()));
}
inline const char* shift_name(Shift s) {
    static const char* names[] = {"none", "position_shift", "unseen_appearance",
                                  "background_shift"};
    return names[static_cast<int>(s)];
}
inline Shift shift_from_name(const std::string& s) {
    for (int i = 0; i < 4; ++i)
        if (s == shift_name(static_cast<Shift>(i))) return static_cast<Shift>(i);
    throw ConfigError(detail::format("unknown shift '%s'", s.c_str()));
}

struct Box {
    double x0, y0, x1, y1;
    bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
    Box shrunk(double m) const { return {x0 + m, y0 + m, x1 - m, y1 - m}; }
};

struct TaskSpec {
    Task id;
    std::string prompt;
    double open_threshold = 0.5;    // open_drawer success: extension above this
    double close_threshold = 0.15;  // close_drawer success: extension below this
    double stack_tol = 0.035;
    std::array<bool, 4> shift_allowed;  // indexed by Shift
};

inline const TaskSpec& task_spec(Task t) {
    static const std::array<TaskSpec, 8> table = [] {
        std::array<TaskSpec, 8> a{};
        auto mk = [](Task id, const char* prompt, bool appearance) {
            TaskSpec s;
            s.id = id;
            s.prompt = prompt;
            s.shift_allowed = {true, true, appearance, true};
            return s;
        };
        a[0] = mk(Task::pick_place_left, "pick up the block and place it in the left bay", true);
        a[1] = mk(Task::pick_place_right, "pick up the block and place it in the right bay", true);
        a[2] = mk(Task::open_drawer, "grab the drawer handle and pull the drawer open", false);
        a[3] = mk(Task::close_drawer, "grab the drawer handle and push the drawer shut", false);
        a[4] = mk(Task::press_button, "move to the button and press it", false);
        a[5] = mk(Task::push_to_zone, "push the block into the floor zone", true);
        a[6] = mk(Task::stack_block, "stack the small block on top of the base block", true);
        a[7] = mk(Task::upright_peg, "carry the peg to the stand and set it upright", true);
        return a;
    }();
    return table[static_cast<size_t>(static_cast<int>(t))];
}

// Fixed task geometry (zones never move; fixtures jitter only at reset).
inline Box zone_left() { return {0.03, 0.40, 0.21, 0.62}; }
inline Box zone_right() { return {0.79, 0.40, 0.97, 0.62}; }
inline Box zone_push() { return {0.40, 0.78, 0.60, 0.95}; }
inline Box zone_stand() { return {0.18, 0.72, 0.32, 0.86}; }

enum class ObjKind { block, peg, zone };

struct ObjectState {
    int id;
    ObjKind kind;
    int color;  // palette id for block/peg; zone tint id for zones
    double x, y;
    bool upright = false;
    Box zone_box{0, 0, 0, 0};  // only for kind == zone
};

struct Gripper {
    double x = 0.5, y = 0.85;
    double jaw = 0.0;  // 0 open, 1 closed
    int held = -1;     // object id or -1
    bool closed() const { return jaw >= 0.5; }
};

struct WorldState {
    Task task = Task::pick_place_left;
    Shift shift = Shift::none;
    uint64_t seed = 0;
    Gripper gripper;
    std::vector<ObjectState> objects;
    double drawer_ext = 0.0;
    double drawer_x = 0.60;  // cabinet left edge
    bool button_pressed = false;
    double button_x = 0.16, button_y = 0.14;
    int background = 0;
};

inline double dist(double ax, double ay, double bx, double by) {
    return std::hypot(ax - bx, ay - by);
}

// Drawer geometry derived from state.
inline Box drawer_cabinet(const WorldState& s) { return {s.drawer_x, 0.04, s.drawer_x + 0.32, 0.20}; }
inline Box drawer_front(const WorldState& s) {
    const double y = 0.20 + kDrawerTravel * s.drawer_ext;
    return {s.drawer_x + 0.02, y, s.drawer_x + 0.30, y + 0.05};
}
inline void drawer_handle(const WorldState& s, double& hx, double& hy) {
    const Box f = drawer_front(s);
    hx = f.cx();
    hy = f.cy();
}

inline const ObjectState* find_object(const WorldState& s, int id) {
    for (const auto& o : s.objects)
        if (o.id == id) return &o;
    return nullptr;
}

// ---------------------------------------------------------------------------
// Success predicates (pure, state only)
// ---------------------------------------------------------------------------

inline bool success(const WorldState& s, Task task) {
    const TaskSpec& spec = task_spec(task);
    auto released_in = [&](const Box& z) {
        for (const auto& o : s.objects)
            if (o.kind == ObjKind::block && s.gripper.held != o.id && z.contains(o.x, o.y))
                return true;
        return false;
    };
    switch (task) {
        case Task::pick_place_left: return released_in(zone_left());
        case Task::pick_place_right: return released_in(zone_right());
        case Task::open_drawer: return s.drawer_ext > spec.open_threshold;
        case Task::close_drawer: return s.drawer_ext < spec.close_threshold;
        case Task::press_button: return s.button_pressed;
        case Task::push_to_zone: return released_in(zone_push());
        case Task::stack_block: {
            const ObjectState* base = find_object(s, 0);
            const ObjectState* top = find_object(s, 1);
            if (!base || !top || s.gripper.held == top->id) return false;
            return std::abs(top->x - base->x) < spec.stack_tol &&
                   std::abs(top->y - base->y) < spec.stack_tol;
        }
        case Task::upright_peg: {
            for (const auto& o : s.objects)
                if (o.kind == ObjKind::peg) return o.upright && s.gripper.held != o.id;
            return false;
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// Reset
// ---------------------------------------------------------------------------

namespace detail_sim {

inline double jitter(Rng& r, double lo, double hi) { return r.uniform(lo, hi); }

// Sample inside `train`, or, under position shift, displaced outside it by a
// 0.10-0.16 offset that stays within the workspace and outside `avoid`.
inline void sample_pos(Rng& r, const Box& train, bool shifted, const Box* avoid, double& x,
                       double& y) {
    x = jitter(r, train.x0, train.x1);
    y = jitter(r, train.y0, train.y1);
    if (!shifted) return;
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double ang = r.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double mag = r.uniform(0.10, 0.16);
        const double nx = x + mag * std::cos(ang);
        const double ny = y + mag * std::sin(ang);
        if (nx < 0.06 || nx > 0.94 || ny < 0.06 || ny > 0.94) continue;
        if (train.contains(nx, ny)) continue;
        if (avoid && avoid->shrunk(-0.04).contains(nx, ny)) continue;
        x = nx;
        y = ny;
        return;
    }
    throw Error("reset: could not place a shifted object");
}

}  // namespace detail_sim

inline WorldState reset(Task task, uint64_t seed, Shift shift) {
    const TaskSpec& spec = task_spec(task);
    if (!spec.shift_allowed[static_cast<size_t>(static_cast<int>(shift))])
        throw ConfigError(detail::format("task '%s' does not support shift '%s'",
                                         task_name(task), shift_name(shift)));
    Rng r(seed, (rng_stream::kEnvReset << 16) |
                    (static_cast<uint64_t>(task) << 4) | static_cast<uint64_t>(shift));
    const bool pos_shift = shift == Shift::position;
    const bool app_shift = shift == Shift::appearance;

    WorldState s;
    s.task = task;
    s.shift = shift;
    s.seed = seed;
    s.background = shift == Shift::background ? 1 : 0;

    // fixtures
    if (task == Task::open_drawer || task == Task::close_drawer) {
        s.drawer_x = pos_shift ? detail_sim::jitter(r, 0.34, 0.50)
                               : detail_sim::jitter(r, 0.56, 0.64);
    } else {
        s.drawer_x = detail_sim::jitter(r, 0.56, 0.64);
    }
    if (task == Task::press_button && pos_shift) {
        s.button_x = detail_sim::jitter(r, 0.26, 0.52);
        s.button_y = detail_sim::jitter(r, 0.24, 0.44);
    } else {
        s.button_x = detail_sim::jitter(r, 0.12, 0.20);
        s.button_y = detail_sim::jitter(r, 0.10, 0.18);
    }
    s.drawer_ext = task == Task::close_drawer ? detail_sim::jitter(r, 0.75, 0.95) : 0.0;

    s.gripper.x = detail_sim::jitter(r, 0.35, 0.65);
    s.gripper.y = detail_sim::jitter(r, 0.78, 0.92);

    auto pick_color = [&](int exclude = -1) {
        int c;
        do {
            c = static_cast<int>(r.below(4)) + (app_shift ? 4 : 0);
        } while (c == exclude);
        return c;
    };
    auto add_zone = [&](const Box& z, int tint) {
        ObjectState o;
        o.id = static_cast<int>(s.objects.size());
        o.kind = ObjKind::zone;
        o.color = tint;
        o.x = z.cx();
        o.y = z.cy();
        o.zone_box = z;
        s.objects.push_back(o);
    };
    auto add_movable = [&](ObjKind kind, const Box& train_box, const Box* avoid) {
        ObjectState o;
        o.id = static_cast<int>(s.objects.size());
        o.kind = kind;
        o.color = pick_color();
        detail_sim::sample_pos(r, train_box, pos_shift, avoid, o.x, o.y);
        s.objects.push_back(o);
    };

    switch (task) {
        case Task::pick_place_left: {
            const Box z = zone_left();
            add_zone(z, 0);
            add_movable(ObjKind::block, {0.45, 0.35, 0.70, 0.60}, &z);
            break;
        }
        case Task::pick_place_right: {
            const Box z = zone_right();
            add_zone(z, 1);
            add_movable(ObjKind::block, {0.30, 0.35, 0.55, 0.60}, &z);
            break;
        }
        case Task::open_drawer:
        case Task::close_drawer:
        case Task::press_button:
            break;
        case Task::push_to_zone: {
            const Box z = zone_push();
            add_zone(z, 2);
            add_movable(ObjKind::block, {0.38, 0.35, 0.62, 0.55}, &z);
            break;
        }
        case Task::stack_block: {
            ObjectState base;
            base.id = 0;
            base.kind = ObjKind::block;
            base.color = pick_color();
            detail_sim::sample_pos(r, {0.28, 0.40, 0.46, 0.60}, pos_shift, nullptr, base.x,
                                   base.y);
            s.objects.push_back(base);
            ObjectState top;
            top.id = 1;
            top.kind = ObjKind::block;
            top.color = pick_color(base.color);
            for (int attempt = 0; attempt < 100; ++attempt) {
                detail_sim::sample_pos(r, {0.54, 0.40, 0.72, 0.60}, pos_shift, nullptr, top.x,
                                       top.y);
                if (dist(top.x, top.y, base.x, base.y) > 0.12) break;
            }
            s.objects.push_back(top);
            break;
        }
        case Task::upright_peg: {
            const Box z = zone_stand();
            add_zone(z, 3);
            add_movable(ObjKind::peg, {0.45, 0.30, 0.70, 0.55}, &z);
            break;
        }
    }

    VPL_CHECK(!success(s, task), "reset: initial state already satisfies '%s'",
              task_name(task));
    return s;
}

// ---------------------------------------------------------------------------
// Action and step
// ---------------------------------------------------------------------------

struct Action {
    double dx = 0.0, dy = 0.0, grip = -1.0;  // all in [-1,1]; grip > 0 closes
};

inline bool is_movable(ObjKind k) { return k == ObjKind::block || k == ObjKind::peg; }

inline WorldState step(const WorldState& prev, const Action& action) {
    WorldState s = prev;
    const double ax = std::clamp(action.dx, -1.0, 1.0) * kMaxDelta;
    const double ay = std::clamp(action.dy, -1.0, 1.0) * kMaxDelta;
    const bool close_cmd = std::clamp(action.grip, -1.0, 1.0) > 0.0;

    const bool was_closed = s.gripper.closed();
    const double hx0 = s.gripper.x, hy0 = s.gripper.y;

    // drawer drag uses pre-move proximity so the handle tracks the hand
    double handle_x, handle_y;
    drawer_handle(s, handle_x, handle_y);
    const bool dragging =
        was_closed && s.gripper.held < 0 && dist(hx0, hy0, handle_x, handle_y) < kHandleRadius;

    s.gripper.x = std::clamp(s.gripper.x + ax, kWorkMargin, 1.0 - kWorkMargin);
    s.gripper.y = std::clamp(s.gripper.y + ay, kWorkMargin, 1.0 - kWorkMargin);
    const double moved_x = s.gripper.x - hx0, moved_y = s.gripper.y - hy0;

    const double target = close_cmd ? 1.0 : 0.0;
    s.gripper.jaw += std::clamp(target - s.gripper.jaw, -kJawRate, kJawRate);
    const bool now_closed = s.gripper.closed();

    if (!was_closed && now_closed && s.gripper.held < 0) {
        // attach the nearest movable object within reach
        int best = -1;
        double best_d = kGraspRadius;
        for (const auto& o : s.objects) {
            if (!is_movable(o.kind)) continue;
            const double d = dist(s.gripper.x, s.gripper.y, o.x, o.y);
            if (d < best_d) {
                best_d = d;
                best = o.id;
            }
        }
        s.gripper.held = best;
    } else if (was_closed && !now_closed && s.gripper.held >= 0) {
        for (auto& o : s.objects) {
            if (o.id != s.gripper.held) continue;
            if (o.kind == ObjKind::peg && zone_stand().contains(o.x, o.y)) o.upright = true;
        }
        s.gripper.held = -1;
    }

    for (auto& o : s.objects) {
        if (o.id == s.gripper.held) {
            o.x = s.gripper.x;
            o.y = s.gripper.y;
        }
    }

    // closed empty jaw shoves blocks it contacts
    if (now_closed && s.gripper.held < 0) {
        for (auto& o : s.objects) {
            if (!is_movable(o.kind)) continue;
            if (dist(s.gripper.x, s.gripper.y, o.x, o.y) < kPushRadius) {
                o.x = std::clamp(o.x + moved_x, kWorkMargin, 1.0 - kWorkMargin);
                o.y = std::clamp(o.y + moved_y, kWorkMargin, 1.0 - kWorkMargin);
            }
        }
    }

    if (dragging) s.drawer_ext = std::clamp(s.drawer_ext + moved_y / kDrawerTravel, 0.0, 1.0);

    if (dist(s.gripper.x, s.gripper.y, s.button_x, s.button_y) < kButtonRadius + 0.02)
        s.button_pressed = true;

    return s;
}

// ---------------------------------------------------------------------------
// Rendering: anti-aliased flat sprites, painter order, pure in the state.
// ---------------------------------------------------------------------------

using Image = std::vector<double>;  // H*W*3, row-major, values in [0,1]

namespace detail_sim {

struct Sprite {
    bool disc = false;
    double x0, y0, x1, y1;  // rect bounds, or bounding box for discs
    double cx, cy, r;
    Rgb color;
};

inline Sprite rect(double x0, double y0, double x1, double y1, Rgb c) {
    Sprite s;
    s.x0 = x0;
    s.y0 = y0;
    s.x1 = x1;
    s.y1 = y1;
    s.color = c;
    return s;
}
inline Sprite rect_at(double cx, double cy, double w, double h, Rgb c) {
    return rect(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, c);
}
inline Sprite disc(double cx, double cy, double r, Rgb c) {
    Sprite s;
    s.disc = true;
    s.cx = cx;
    s.cy = cy;
    s.r = r;
    s.x0 = cx - r;
    s.y0 = cy - r;
    s.x1 = cx + r;
    s.y1 = cy + r;
    s.color = c;
    return s;
}

inline Rgb zone_tint(int id) {
    static const Rgb tints[] = {{0.72, 0.72, 0.90},
                                {0.90, 0.72, 0.72},
                                {0.70, 0.88, 0.70},
                                {0.86, 0.86, 0.58}};
    return tints[id & 3];
}

inline std::vector<Sprite> collect_sprites(const WorldState& s) {
    std::vector<Sprite> out;
    for (const auto& o : s.objects)
        if (o.kind == ObjKind::zone)
            out.push_back(rect(o.zone_box.x0, o.zone_box.y0, o.zone_box.x1, o.zone_box.y1,
                               zone_tint(o.color)));
    const Box cab = drawer_cabinet(s);
    out.push_back(rect(cab.x0, cab.y0, cab.x1, cab.y1, {0.48, 0.33, 0.20}));
    const Box front = drawer_front(s);
    out.push_back(rect(front.x0, front.y0, front.x1, front.y1, {0.66, 0.48, 0.30}));
    double hx, hy;
    drawer_handle(s, hx, hy);
    out.push_back(rect_at(hx, hy, 0.07, 0.018, {0.92, 0.92, 0.92}));
    out.push_back(disc(s.button_x, s.button_y, kButtonRadius,
                       s.button_pressed ? Rgb{0.15, 0.85, 0.25} : Rgb{0.90, 0.12, 0.12}));
    for (const auto& o : s.objects) {
        if (o.kind == ObjKind::block) {
            out.push_back(rect_at(o.x, o.y, 0.09, 0.09, object_color(o.color)));
        } else if (o.kind == ObjKind::peg) {
            if (o.upright)
                out.push_back(rect_at(o.x, o.y, 0.045, 0.115, object_color(o.color)));
            else
                out.push_back(rect_at(o.x, o.y, 0.115, 0.045, object_color(o.color)));
        }
    }
    const Rgb jaw_color =
        s.gripper.closed() ? Rgb{0.82, 0.84, 0.90} : Rgb{0.25, 0.27, 0.33};
    out.push_back(rect_at(s.gripper.x, s.gripper.y, 0.065, 0.065, jaw_color));
    return out;
}

inline double rect_coverage(const Sprite& sp, double px0, double py0, double px1, double py1) {
    const double ox = std::max(0.0, std::min(sp.x1, px1) - std::max(sp.x0, px0));
    const double oy = std::max(0.0, std::min(sp.y1, py1) - std::max(sp.y0, py0));
    return (ox * oy) / ((px1 - px0) * (py1 - py0));
}

inline double disc_coverage(const Sprite& sp, double px0, double py0, double px1, double py1) {
    // 4x4 deterministic subsampling
    int hit = 0;
    const double dx = (px1 - px0) / 4.0, dy = (py1 - py0) / 4.0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            const double sx = px0 + (i + 0.5) * dx;
            const double sy = py0 + (j + 0.5) * dy;
            if (dist(sx, sy, sp.cx, sp.cy) <= sp.r) ++hit;
        }
    return hit / 16.0;
}

}  // namespace detail_sim

inline Image render_scene(const WorldState& s, int res) {
    const Rgb bg = background_color(s.background);
    Image img(static_cast<size_t>(res) * res * 3);
    const auto sprites = detail_sim::collect_sprites(s);
    const double px = 1.0 / res;
    for (int row = 0; row < res; ++row) {
        for (int col = 0; col < res; ++col) {
            double r = bg.r, g = bg.g, b = bg.b;
            const double x0 = col * px, y0 = row * px, x1 = x0 + px, y1 = y0 + px;
            for (const auto& sp : sprites) {
                if (sp.x1 <= x0 || sp.x0 >= x1 || sp.y1 <= y0 || sp.y0 >= y1) continue;
                const double a = sp.disc ? detail_sim::disc_coverage(sp, x0, y0, x1, y1)
                                         : detail_sim::rect_coverage(sp, x0, y0, x1, y1);
                r += a * (sp.color.r - r);
                g += a * (sp.color.g - g);
                b += a * (sp.color.b - b);
            }
            const size_t at = (static_cast<size_t>(row) * res + col) * 3;
            img[at] = std::clamp(r, 0.0, 1.0);
            img[at + 1] = std::clamp(g, 0.0, 1.0);
            img[at + 2] = std::clamp(b, 0.0, 1.0);
        }
    }
    return img;
}

enum class View { scene = 0, gripper = 1 };

// Crop origin (in 32x32 pixels) of the 2x-zoom gripper window.
inline void gripper_crop_origin(const WorldState& s, int& left, int& top) {
    left = std::clamp(static_cast<int>(std::lround(s.gripper.x * 32)) - 8, 0, 16);
    top = std::clamp(static_cast<int>(std::lround(s.gripper.y * 32)) - 8, 0, 16);
}

inline Image render(const WorldState& s, View view) {
    if (view == View::scene) return render_scene(s, kFrameSize);
    const Image big = render_scene(s, 2 * kFrameSize);
    int left, top;
    gripper_crop_origin(s, left, top);
    Image out(static_cast<size_t>(kFrameSize) * kFrameSize * 3);
    for (int row = 0; row < kFrameSize; ++row)
        for (int col = 0; col < kFrameSize; ++col)
            for (int c = 0; c < 3; ++c)
                out[(static_cast<size_t>(row) * kFrameSize + col) * 3 + c] =
                    big[(static_cast<size_t>(row + top) * 32 + (col + left)) * 3 + c];
    return out;
}

// ---------------------------------------------------------------------------
// Scripted experts: pure functions of the state, waypoint style.
// ---------------------------------------------------------------------------

struct ExpertDecision {
    Action action;
    bool feasible = true;
};

namespace detail_sim {

inline Action move_to(const WorldState& s, double tx, double ty, double grip) {
    double dx = (tx - s.gripper.x) / kMaxDelta;
    double dy = (ty - s.gripper.y) / kMaxDelta;
    // scale long moves so the direction is preserved (max component hits 1)
    const double m = std::max(std::abs(dx), std::abs(dy));
    if (m > 1.0) {
        dx /= m;
        dy /= m;
    }
    return Action{dx, dy, grip};
}

inline bool near(const WorldState& s, double tx, double ty, double tol = 0.012) {
    return dist(s.gripper.x, s.gripper.y, tx, ty) <= tol;
}

// grasp-carry-release plan shared by pick/place, stack, and peg tasks
inline Action fetch_and_place(const WorldState& s, const ObjectState& obj, double tx, double ty) {
    if (s.gripper.held == obj.id) {
        if (near(s, tx, ty)) return Action{0.0, 0.0, -1.0};  // release
        return move_to(s, tx, ty, 1.0);
    }
    if (near(s, obj.x, obj.y, 0.015)) {
        if (!s.gripper.closed()) return Action{0.0, 0.0, 1.0};  // close on it
        return Action{0.0, 0.0, 1.0};
    }
    return move_to(s, obj.x, obj.y, -1.0);  // approach with open jaw
}

}  // namespace detail_sim

inline ExpertDecision expert_action(const WorldState& s) {
    using namespace detail_sim;
    if (success(s, s.task)) return {Action{0.0, 0.0, -1.0}, true};

    switch (s.task) {
        case Task::pick_place_left:
        case Task::pick_place_right:
        case Task::push_to_zone:
        case Task::stack_block:
        case Task::upright_peg:
            break;
        case Task::open_drawer:
        case Task::close_drawer: {
            double hx, hy;
            drawer_handle(s, hx, hy);
            if (!near(s, hx, hy, 0.02)) {
                if (s.gripper.closed() && s.gripper.held < 0)
                    return {move_to(s, hx, hy, -1.0), true};  // reopen, then approach
                return {move_to(s, hx, hy, -1.0), true};
            }
            if (!s.gripper.closed()) return {Action{0.0, 0.0, 1.0}, true};
            const double dir = s.task == Task::open_drawer ? 1.0 : -1.0;
            return {Action{0.0, dir, 1.0}, true};
        }
        case Task::press_button:
            return {move_to(s, s.button_x, s.button_y, -1.0), true};
    }

    if (s.task == Task::pick_place_left || s.task == Task::pick_place_right ||
        s.task == Task::stack_block || s.task == Task::upright_peg) {
        const ObjectState* obj = nullptr;
        double tx = 0.0, ty = 0.0;
        if (s.task == Task::stack_block) {
            obj = find_object(s, 1);
            const ObjectState* base = find_object(s, 0);
            VPL_CHECK(obj && base, "expert: stack objects missing");
            tx = base->x;
            ty = base->y;
        } else {
            for (const auto& o : s.objects)
                if (is_movable(o.kind)) obj = &o;
            VPL_CHECK(obj != nullptr, "expert: movable object missing");
            const Box z = s.task == Task::pick_place_left
                              ? zone_left()
                              : (s.task == Task::pick_place_right ? zone_right() : zone_stand());
            tx = z.cx();
            ty = z.cy();
        }
        return {fetch_and_place(s, *obj, tx, ty), true};
    }

    // push_to_zone: close the jaw, slip behind the block, drive it in
    const ObjectState* blk = nullptr;
    for (const auto& o : s.objects)
        if (o.kind == ObjKind::block) blk = &o;
    VPL_CHECK(blk != nullptr, "expert: push block missing");
    const Box z = zone_push();
    if (!s.gripper.closed()) return {Action{0.0, 0.0, 1.0}, true};
    const double d_block = dist(s.gripper.x, s.gripper.y, blk->x, blk->y);
    if (d_block <= 0.055) {
        // shoving range: steer so the block lands on the zone center
        const double tx = z.cx() - (blk->x - s.gripper.x);
        const double ty = z.cy() - (blk->y - s.gripper.y);
        return {move_to(s, tx, ty, 1.0), true};
    }
    double ux = blk->x - z.cx(), uy = blk->y - z.cy();
    const double un = std::hypot(ux, uy);
    if (un < 1e-9) {
        ux = 0.0;
        uy = -1.0;
    } else {
        ux /= un;
        uy /= un;
    }
    // orbit the block until roughly behind it, then step in to the contact point
    const double gx = s.gripper.x, gy = s.gripper.y;
    const double ang_g = std::atan2(gy - blk->y, gx - blk->x);
    const double ang_u = std::atan2(uy, ux);
    double delta = ang_u - ang_g;
    const double pi = 3.14159265358979323846;
    while (delta > pi) delta -= 2 * pi;
    while (delta < -pi) delta += 2 * pi;
    if (std::abs(delta) < 0.35) {
        // behind the block: close in at full speed until shoving range engages
        return {move_to(s, blk->x, blk->y, 1.0), true};
    }
    const double ang_w = ang_g + std::clamp(delta, -0.6, 0.6);
    const double wx = std::clamp(blk->x + 0.10 * std::cos(ang_w), 0.04, 0.96);
    const double wy = std::clamp(blk->y + 0.10 * std::sin(ang_w), 0.04, 0.96);
    return {move_to(s, wx, wy, 1.0), true};
}

// ---------------------------------------------------------------------------
// Task registry export
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json task_registry_json() {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (int i = 0; i < kNumTasks; ++i) {
        const Task t = static_cast<Task>(i);
        const TaskSpec& sp = task_spec(t);
        nlohmann::ordered_json j;
        j["id"] = i;
        j["name"] = task_name(t);
        j["prompt"] = sp.prompt;
        j["thresholds"] = {{"open_extension", sp.open_threshold},
                           {"close_extension", sp.close_threshold},
                           {"stack_tolerance", sp.stack_tol}};
        nlohmann::ordered_json shifts = nlohmann::ordered_json::array();
        for (int k = 0; k < 4; ++k)
            if (sp.shift_allowed[static_cast<size_t>(k)]) shifts.push_back(shift_name(static_cast<Shift>(k)));
        j["shifts"] = shifts;
        out.push_back(j);
    }
    return out;
}

}  // namespace vpl::sim
