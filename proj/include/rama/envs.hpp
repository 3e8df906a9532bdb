#pragma once

// Desk-scale partially observable control tasks.
//
//  Loco: a damped point mass on a line. Variants form a difficulty ladder:
//        stand (stay near the origin), walk (move right at >= 0.5), run (>= 1.5).
//  Push: a 2-D arena [-1,1]^2 with an agent that shoves a disc toward a goal given
//        by the task parameters.
//
// Observations are either 16x16x1 rasters in [0,1] or a small state vector.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rama/errors.hpp"
#include "rama/rng.hpp"

namespace rama {

enum class Family { Loco, Push };
enum class ObsMode { Pixels, Vector };

inline std::string to_string(Family f) { return f == Family::Loco ? "Loco" : "Push"; }
inline std::string to_string(ObsMode m) { return m == ObsMode::Pixels ? "pixels" : "vector"; }

inline Family parse_family(std::string_view s) {
  if (s == "Loco" || s == "loco") return Family::Loco;
  if (s == "Push" || s == "push") return Family::Push;
  throw ConfigError("unknown task family '" + std::string(s) + "'");
}

inline ObsMode parse_obs_mode(std::string_view s) {
  if (s == "pixels") return ObsMode::Pixels;
  if (s == "vector") return ObsMode::Vector;
  throw ConfigError("unknown observation mode '" + std::string(s) + "' (expected pixels|vector)");
}

/// Shortest decimal text that parses back to the identical double.
inline std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline double parse_real(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("not a real number: '" + std::string(s) + "'");
  return v;
}

/// Identifies one reward function. Text form: "Loco/stand", "Push/goal@0.5,-0.25".
struct TaskId {
  Family family = Family::Loco;
  std::string variant = "stand";
  std::vector<double> params;

  bool operator==(const TaskId&) const = default;
  std::partial_ordering operator<=>(const TaskId&) const = default;

  std::string str() const {
    std::string s = to_string(family) + "/" + variant;
    if (!params.empty()) {
      s += "@";
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (i) s += ",";
        s += format_real(params[i]);
      }
    }
    return s;
  }

  static TaskId parse(std::string_view text) {
    const auto slash = text.find('/');
    if (slash == std::string_view::npos) throw ConfigError("task '" + std::string(text) + "' lacks family/variant");
    TaskId t;
    t.family = parse_family(text.substr(0, slash));
    auto rest = text.substr(slash + 1);
    const auto at = rest.find('@');
    t.variant = std::string(rest.substr(0, at));
    if (t.variant.empty()) throw ConfigError("task '" + std::string(text) + "' has empty variant");
    if (at != std::string_view::npos) {
      auto list = rest.substr(at + 1);
      while (!list.empty()) {
        const auto comma = list.find(',');
        t.params.push_back(parse_real(list.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        list = list.substr(comma + 1);
      }
    }
    return t;
  }
};

struct ObsSpec {
  ObsMode mode = ObsMode::Vector;
  int height = 1;
  int width = 1;
  int channels = 1;
  int dim = 0;  // flattened size

  bool operator==(const ObsSpec&) const = default;
  int size() const { return dim; }

  static ObsSpec pixels(int h, int w, int c) { return {ObsMode::Pixels, h, w, c, h * w * c}; }
  static ObsSpec vector(int d) { return {ObsMode::Vector, 1, 1, 1, d}; }
};

/// Flattened observation; CHW order for rasters.
using Observation = std::vector<float>;

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool done = false;
  int step_index = 0;
};

struct LocoState {
  double position = 0.0;
  double velocity = 0.0;
};

struct PushState {
  std::array<double, 2> agent{};
  std::array<double, 2> object{};
};

inline constexpr int kEpisodeLength = 100;
inline constexpr int kImageSize = 16;
inline constexpr double kArenaHalf = 1.0;
inline constexpr double kWalkSpeed = 0.5;
inline constexpr double kRunSpeed = 1.5;
inline constexpr double kPushContact = 0.15;

class Environment {
 public:
  Environment(TaskId task, std::uint64_t seed, ObsMode mode) : task_(std::move(task)), mode_(mode), rng_(seed, 0xE17) {
    if (task_.family == Family::Loco) {
      if (task_.variant != "stand" && task_.variant != "walk" && task_.variant != "run")
        throw ConfigError("unknown Loco variant '" + task_.variant + "' (expected stand|walk|run)");
      if (!task_.params.empty()) throw ConfigError("Loco tasks take no parameters");
    } else {
      if (task_.variant != "goal") throw ConfigError("unknown Push variant '" + task_.variant + "' (expected goal)");
      if (task_.params.size() != 2) throw ConfigError("Push/goal needs exactly 2 parameters (goal x, y)");
      for (double g : task_.params)
        if (!std::isfinite(g) || std::abs(g) > kArenaHalf) throw ConfigError("Push goal outside the arena");
      goal_ = {task_.params[0], task_.params[1]};
    }
  }

  const TaskId& task() const { return task_; }
  ObsMode obs_mode() const { return mode_; }
  int action_dim() const { return task_.family == Family::Loco ? 1 : 2; }
  int episode_length() const { return kEpisodeLength; }
  int step_index() const { return step_; }
  bool done() const { return step_ >= kEpisodeLength; }

  ObsSpec obs_spec() const {
    if (mode_ == ObsMode::Pixels) return ObsSpec::pixels(kImageSize, kImageSize, 1);
    return ObsSpec::vector(task_.family == Family::Loco ? 2 : 6);
  }

  Observation reset() {
    step_ = 0;
    if (task_.family == Family::Loco) {
      loco_ = {rng_.uniform(-0.1, 0.1), 0.0};
    } else {
      do {
        push_.agent = {rng_.uniform(-0.8, 0.8), rng_.uniform(-0.8, 0.8)};
        push_.object = {rng_.uniform(-0.5, 0.5), rng_.uniform(-0.5, 0.5)};
      } while (distance(push_.agent, push_.object) < 0.3);
    }
    return observe();
  }

  StepResult step(std::span<const double> action) {
    if (done()) throw UsageError("step() on a finished episode; call reset()");
    if (static_cast<int>(action.size()) != action_dim())
      throw UsageError("action has " + std::to_string(action.size()) + " components, expected " +
                       std::to_string(action_dim()));
    double reward = 0.0;
    if (task_.family == Family::Loco) {
      const double a = std::clamp(action[0], -1.0, 1.0);
      loco_.velocity += 0.1 * a - 0.02 * loco_.velocity;
      loco_.position += 0.1 * loco_.velocity;
      reward = loco_reward();
    } else {
      const double before = distance(push_.object, goal_);
      for (int i = 0; i < 2; ++i)
        push_.agent[i] = std::clamp(push_.agent[i] + 0.1 * std::clamp(action[i], -1.0, 1.0), -kArenaHalf, kArenaHalf);
      resolve_contact({std::clamp(action[0], -1.0, 1.0), std::clamp(action[1], -1.0, 1.0)});
      reward = before - distance(push_.object, goal_);
    }
    ++step_;
    return {observe(), reward, done(), step_};
  }

  StepResult step(const std::vector<double>& action) { return step(std::span<const double>(action)); }

  Observation observe() const { return mode_ == ObsMode::Pixels ? render() : state_vector(); }

  /// Privileged reference controller used as a performance yardstick.
  std::vector<double> scripted_action() const {
    if (task_.family == Family::Loco) {
      if (task_.variant == "stand") return {loco_.position + 3.0 * loco_.velocity > 0.0 ? -1.0 : 1.0};
      return {1.0};
    }
    // Push: go behind the object (opposite the goal), then push through it.
    const auto& o = push_.object;
    const auto& a = push_.agent;
    std::array<double, 2> to_goal{goal_[0] - o[0], goal_[1] - o[1]};
    const double dist_goal = std::hypot(to_goal[0], to_goal[1]);
    if (dist_goal < 1e-3) return {0.0, 0.0};
    to_goal = {to_goal[0] / dist_goal, to_goal[1] / dist_goal};
    const std::array<double, 2> behind{o[0] - 0.1 * to_goal[0], o[1] - 0.1 * to_goal[1]};
    const std::array<double, 2> rel{a[0] - o[0], a[1] - o[1]};
    const double along = rel[0] * to_goal[0] + rel[1] * to_goal[1];
    std::array<double, 2> target = behind;
    if (along > -0.05) {
      // On the goal side: swing around the object at a safe lateral offset.
      const double side = (rel[0] * -to_goal[1] + rel[1] * to_goal[0]) >= 0.0 ? 1.0 : -1.0;
      target = {o[0] - 0.25 * to_goal[0] + side * 0.25 * -to_goal[1], o[1] - 0.25 * to_goal[1] + side * 0.25 * to_goal[0]};
    } else if (distance(a, behind) < 0.06) {
      target = {goal_[0], goal_[1]};
    }
    std::array<double, 2> dir{target[0] - a[0], target[1] - a[1]};
    const double norm = std::hypot(dir[0], dir[1]);
    if (norm < 1e-9) return {0.0, 0.0};
    const double speed = std::min(1.0, norm / 0.1);
    return {speed * dir[0] / norm, speed * dir[1] / norm};
  }

  LocoState loco_state() const { return loco_; }
  void set_loco_state(LocoState s) { loco_ = s; }
  PushState push_state() const { return push_; }
  void set_push_state(PushState s) { push_ = s; }
  std::array<double, 2> goal() const { return goal_; }

  /// Raster coordinates (row, col) of an arena point in Push images.
  static std::pair<int, int> arena_to_pixel(double x, double y) {
    auto map = [](double v) { return std::clamp(static_cast<int>((v + kArenaHalf) / (2 * kArenaHalf) * kImageSize), 0, kImageSize - 1); };
    return {map(y), map(x)};
  }

 private:
  static double distance(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    return std::hypot(a[0] - b[0], a[1] - b[1]);
  }

  double loco_reward() const {
    if (task_.variant == "stand") return 1.0 - std::min(1.0, std::abs(loco_.position));
    const double target = task_.variant == "walk" ? kWalkSpeed : kRunSpeed;
    return std::min(1.0, std::max(0.0, loco_.velocity) / target);
  }

  void resolve_contact(const std::array<double, 2>& push_dir) {
    std::array<double, 2> rel{push_.object[0] - push_.agent[0], push_.object[1] - push_.agent[1]};
    double d = std::hypot(rel[0], rel[1]);
    if (d >= kPushContact) return;
    if (d < 1e-9) {
      const double n = std::hypot(push_dir[0], push_dir[1]);
      rel = n > 1e-9 ? std::array<double, 2>{push_dir[0] / n, push_dir[1] / n} : std::array<double, 2>{1.0, 0.0};
      d = 1.0;
    }
    for (int i = 0; i < 2; ++i)
      push_.object[i] = std::clamp(push_.agent[i] + kPushContact * rel[i] / d, -kArenaHalf, kArenaHalf);
  }

  Observation state_vector() const {
    if (task_.family == Family::Loco)
      return {static_cast<float>(loco_.position), static_cast<float>(loco_.velocity)};
    return {static_cast<float>(push_.agent[0]),  static_cast<float>(push_.agent[1]),
            static_cast<float>(push_.object[0]), static_cast<float>(push_.object[1]),
            static_cast<float>(goal_[0]),        static_cast<float>(goal_[1])};
  }

  // Bilinear-ish blob: intensity falls off linearly over `radius` pixels.
  static void blob(Observation& img, double row, double col, double radius, float intensity, int row_lo, int row_hi) {
    for (int r = row_lo; r < row_hi; ++r)
      for (int c = 0; c < kImageSize; ++c) {
        const double d = std::hypot(r + 0.5 - row, c + 0.5 - col);
        const float v = static_cast<float>(intensity * std::max(0.0, 1.0 - d / radius));
        float& px = img[static_cast<std::size_t>(r * kImageSize + c)];
        px = std::max(px, v);
      }
  }

  Observation render() const {
    Observation img(static_cast<std::size_t>(kImageSize * kImageSize), 0.0f);
    if (task_.family == Family::Loco) {
      // Top half: the mass, position mapped from [-2, 2]. Bottom half: ground stripes
      // that scroll with position so that travel stays visible off-screen.
      const double col = std::clamp((loco_.position + 2.0) / 4.0 * kImageSize, 0.0, double(kImageSize));
      blob(img, 4.0, col, 2.5, 1.0f, 0, kImageSize / 2);
      constexpr double kPi = 3.14159265358979323846;
      for (int r = kImageSize / 2; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c) {
          const double phase = 2.0 * kPi * ((c + 0.5) - loco_.position * 4.0) / 4.0;
          img[static_cast<std::size_t>(r * kImageSize + c)] = static_cast<float>(0.5 + 0.5 * std::cos(phase));
        }
      return img;
    }
    auto to_px = [](double v) { return (v + kArenaHalf) / (2 * kArenaHalf) * kImageSize; };
    blob(img, to_px(goal_[1]), to_px(goal_[0]), 1.5, 0.3f, 0, kImageSize);
    blob(img, to_px(push_.object[1]), to_px(push_.object[0]), 1.8, 0.6f, 0, kImageSize);
    blob(img, to_px(push_.agent[1]), to_px(push_.agent[0]), 1.2, 1.0f, 0, kImageSize);
    return img;
  }

  TaskId task_;
  ObsMode mode_;
  Rng rng_;
  int step_ = kEpisodeLength;
  LocoState loco_;
  PushState push_;
  std::array<double, 2> goal_{};
};

inline Environment make_env(const TaskId& task, std::uint64_t seed, ObsMode mode = ObsMode::Vector) {
  return Environment(task, seed, mode);
}

/// Return of one episode driven by the privileged reference controller.
inline double scripted_return(const TaskId& task, std::uint64_t seed) {
  Environment env(task, seed, ObsMode::Vector);
  env.reset();
  double total = 0.0;
  while (!env.done()) total += env.step(env.scripted_action()).reward;
  return total;
}

}  // namespace rama
