#pragma once

// Flat key = value experiment configuration.
//
//   # comment
//   trainer.batch = 50
//   trainer.tasks = Loco/stand;Loco/walk
//
// `objective` is accepted as a short alias for addressing.objective.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rama/addressing.hpp"
#include "rama/envs.hpp"
#include "rama/errors.hpp"

namespace rama {

struct RamaConfig {
  // env
  ObsMode obs_mode = ObsMode::Vector;
  std::uint64_t env_seed = 0;

  // world model
  int deter = 64;
  int stoch = 16;
  int world_hidden = 128;
  double world_lr = 6e-4;
  double grad_clip = 100.0;
  double min_std = 1e-4;
  double free_nats = 3.0;
  double kl_scale = 1.0;

  // actor-critic
  int horizon = 15;
  int agent_hidden = 128;
  double actor_lr = 8e-5;
  double critic_lr = 8e-5;
  double explore_std = 0.3;
  double gamma = 0.99;
  double lambda = 0.95;

  // addressing
  Objective objective = Objective::None;
  int m = 50;
  double address_lr = 1e-3;
  bool detach_query = true;
  int refresh_period = 100;
  int embed_dim = 64;
  int address_hidden = 128;
  bool exact = false;

  // trainer
  int n = 50;
  int L = 50;
  int C = 100;
  int K = 1000;
  int S = 1;
  double p = 0.5;
  double beta = 0.5;
  bool train_world_on_addressed = true;
  std::int64_t env_steps = 30000;
  std::vector<TaskId> tasks{TaskId{Family::Loco, "stand", {}}};
  std::vector<double> filter_thresholds;  // one per task, or empty for no filtering
  std::string prior_buffer;               // directory of an initial multitask buffer
  int checkpoint_every = 0;               // episodes; 0 = only at task end
  double stop_return = 0.0;               // >0: end a task once the trailing mean reaches it
  int stop_window = 20;
  std::uint64_t seed = 0;

  bool operator==(const RamaConfig&) const = default;

  int current_count() const { return static_cast<int>(std::llround(beta * n)); }
  double filter_threshold(std::size_t task) const {
    return filter_thresholds.empty() ? -INFINITY : filter_thresholds.at(task);
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

inline long long parse_int(const std::string& v) {
  long long out = 0;
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError("expected an integer, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& v) {
  try {
    return parse_real(v);
  } catch (const Error&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

inline int to_int(long long v) {
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("integer out of range");
  return static_cast<int>(v);
}

struct Field {
  std::function<std::string(const RamaConfig&)> get;
  std::function<void(RamaConfig&, const std::string&)> set;
};

template <class M>
Field int_field(M RamaConfig::*member) {
  return {[member](const RamaConfig& c) { return std::to_string(c.*member); },
          [member](RamaConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<M, int>)
              c.*member = to_int(parse_int(v));
            else if constexpr (std::is_same_v<M, std::uint64_t>)
              c.*member = parse_uint(v);
            else
              c.*member = static_cast<M>(parse_int(v));
          }};
}

inline Field real_field(double RamaConfig::*member) {
  return {[member](const RamaConfig& c) { return format_real(c.*member); },
          [member](RamaConfig& c, const std::string& v) { c.*member = parse_double(v); }};
}

inline Field bool_field(bool RamaConfig::*member) {
  return {[member](const RamaConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member](RamaConfig& c, const std::string& v) { c.*member = parse_bool(v); }};
}

// Ordered: emit() writes keys in this order.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("env.obs_mode", Field{[](const RamaConfig& c) { return to_string(c.obs_mode); },
                                         [](RamaConfig& c, const std::string& v) {
                                           try {
                                             c.obs_mode = parse_obs_mode(v);
                                           } catch (const ConfigError&) {
                                             throw;
                                           } catch (const Error& e) {
                                             throw ConfigError(e.what());
                                           }
                                         }});
    t.emplace_back("env.seed", int_field(&RamaConfig::env_seed));
    // env.family / env.variant / env.params address the first task; trainer.tasks
    // (emitted later) replaces the whole list.
    t.emplace_back("env.family", Field{[](const RamaConfig& c) { return to_string(c.tasks.at(0).family); },
                                       [](RamaConfig& c, const std::string& v) {
                                         if (c.tasks.empty()) c.tasks.emplace_back();
                                         c.tasks[0].family = parse_family(v);
                                       }});
    t.emplace_back("env.variant", Field{[](const RamaConfig& c) { return c.tasks.at(0).variant; },
                                        [](RamaConfig& c, const std::string& v) {
                                          if (c.tasks.empty()) c.tasks.emplace_back();
                                          if (v.empty()) throw ConfigError("empty variant");
                                          c.tasks[0].variant = v;
                                        }});
    t.emplace_back("env.params", Field{[](const RamaConfig& c) {
                                         std::string s;
                                         for (std::size_t i = 0; i < c.tasks.at(0).params.size(); ++i)
                                           s += (i ? "," : "") + format_real(c.tasks[0].params[i]);
                                         return s;
                                       },
                                       [](RamaConfig& c, const std::string& v) {
                                         if (c.tasks.empty()) c.tasks.emplace_back();
                                         c.tasks[0].params.clear();
                                         for (const auto& item : split(v, ','))
                                           c.tasks[0].params.push_back(parse_double(item));
                                       }});
    t.emplace_back("world.deter", int_field(&RamaConfig::deter));
    t.emplace_back("world.stoch", int_field(&RamaConfig::stoch));
    t.emplace_back("world.hidden", int_field(&RamaConfig::world_hidden));
    t.emplace_back("world.lr", real_field(&RamaConfig::world_lr));
    t.emplace_back("world.grad_clip", real_field(&RamaConfig::grad_clip));
    t.emplace_back("world.min_std", real_field(&RamaConfig::min_std));
    t.emplace_back("kl.free_nats", real_field(&RamaConfig::free_nats));
    t.emplace_back("kl.scale", real_field(&RamaConfig::kl_scale));
    t.emplace_back("agent.horizon", int_field(&RamaConfig::horizon));
    t.emplace_back("agent.hidden", int_field(&RamaConfig::agent_hidden));
    t.emplace_back("agent.actor_lr", real_field(&RamaConfig::actor_lr));
    t.emplace_back("agent.critic_lr", real_field(&RamaConfig::critic_lr));
    t.emplace_back("agent.explore_std", real_field(&RamaConfig::explore_std));
    t.emplace_back("agent.gamma", real_field(&RamaConfig::gamma));
    t.emplace_back("agent.lambda", real_field(&RamaConfig::lambda));
    t.emplace_back("addressing.objective",
                   Field{[](const RamaConfig& c) { return to_string(c.objective); },
                         [](RamaConfig& c, const std::string& v) { c.objective = parse_objective(v); }});
    t.emplace_back("addressing.m", int_field(&RamaConfig::m));
    t.emplace_back("addressing.lr", real_field(&RamaConfig::address_lr));
    t.emplace_back("addressing.detach_query", bool_field(&RamaConfig::detach_query));
    t.emplace_back("addressing.refresh_period", int_field(&RamaConfig::refresh_period));
    t.emplace_back("addressing.embed_dim", int_field(&RamaConfig::embed_dim));
    t.emplace_back("addressing.hidden", int_field(&RamaConfig::address_hidden));
    t.emplace_back("addressing.exact", bool_field(&RamaConfig::exact));
    t.emplace_back("trainer.batch", int_field(&RamaConfig::n));
    t.emplace_back("trainer.seq_len", int_field(&RamaConfig::L));
    t.emplace_back("trainer.collect_interval", int_field(&RamaConfig::C));
    t.emplace_back("trainer.prior_cap", int_field(&RamaConfig::K));
    t.emplace_back("trainer.seed_episodes", int_field(&RamaConfig::S));
    t.emplace_back("trainer.p", real_field(&RamaConfig::p));
    t.emplace_back("trainer.beta", real_field(&RamaConfig::beta));
    t.emplace_back("trainer.train_world_on_addressed", bool_field(&RamaConfig::train_world_on_addressed));
    t.emplace_back("trainer.env_steps", int_field(&RamaConfig::env_steps));
    t.emplace_back("trainer.tasks", Field{[](const RamaConfig& c) {
                                            std::string s;
                                            for (std::size_t i = 0; i < c.tasks.size(); ++i)
                                              s += (i ? ";" : "") + c.tasks[i].str();
                                            return s;
                                          },
                                          [](RamaConfig& c, const std::string& v) {
                                            c.tasks.clear();
                                            for (const auto& item : split(v, ';')) {
                                              try {
                                                c.tasks.push_back(TaskId::parse(item));
                                              } catch (const ConfigError&) {
                                                throw;
                                              } catch (const Error& e) {
                                                throw ConfigError(e.what());
                                              }
                                            }
                                          }});
    t.emplace_back("trainer.filter_thresholds", Field{[](const RamaConfig& c) {
                                                        std::string s;
                                                        for (std::size_t i = 0; i < c.filter_thresholds.size(); ++i)
                                                          s += (i ? ";" : "") + format_real(c.filter_thresholds[i]);
                                                        return s;
                                                      },
                                                      [](RamaConfig& c, const std::string& v) {
                                                        c.filter_thresholds.clear();
                                                        for (const auto& item : split(v, ';'))
                                                          c.filter_thresholds.push_back(parse_double(item));
                                                      }});
    t.emplace_back("trainer.prior_buffer", Field{[](const RamaConfig& c) { return c.prior_buffer; },
                                                 [](RamaConfig& c, const std::string& v) { c.prior_buffer = v; }});
    t.emplace_back("trainer.checkpoint_every", int_field(&RamaConfig::checkpoint_every));
    t.emplace_back("trainer.stop_return", real_field(&RamaConfig::stop_return));
    t.emplace_back("trainer.stop_window", int_field(&RamaConfig::stop_window));
    t.emplace_back("trainer.seed", int_field(&RamaConfig::seed));
    return t;
  }();
  return table;
}

inline const Field* find_field(const std::string& key) {
  const std::string k = key == "objective" ? "addressing.objective" : key;
  for (const auto& [name, f] : fields())
    if (name == k) return &f;
  return nullptr;
}

}  // namespace config_detail

/// Throws ConfigError naming the first offending key.
inline void validate(const RamaConfig& c) {
  auto unit = [](const char* key, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(key) + " must lie in [0,1], got " + format_real(v));
  };
  auto positive = [](const char* key, long long v) {
    if (v < 1) throw ConfigError(std::string(key) + " must be >= 1, got " + std::to_string(v));
  };
  auto finite_pos = [](const char* key, double v) {
    if (!(std::isfinite(v) && v > 0)) throw ConfigError(std::string(key) + " must be a positive number");
  };
  unit("trainer.p", c.p);
  unit("trainer.beta", c.beta);
  unit("agent.lambda", c.lambda);
  unit("agent.gamma", c.gamma);
  positive("trainer.batch", c.n);
  positive("addressing.m", c.m);
  positive("trainer.seq_len", c.L);
  positive("trainer.collect_interval", c.C);
  positive("trainer.prior_cap", c.K);
  positive("agent.horizon", c.horizon);
  positive("trainer.seed_episodes", c.S);
  positive("addressing.refresh_period", c.refresh_period);
  positive("world.deter", c.deter);
  positive("world.stoch", c.stoch);
  positive("world.hidden", c.world_hidden);
  positive("agent.hidden", c.agent_hidden);
  positive("addressing.embed_dim", c.embed_dim);
  positive("addressing.hidden", c.address_hidden);
  positive("trainer.env_steps", c.env_steps);
  positive("trainer.stop_window", c.stop_window);
  finite_pos("world.lr", c.world_lr);
  finite_pos("agent.actor_lr", c.actor_lr);
  finite_pos("agent.critic_lr", c.critic_lr);
  finite_pos("addressing.lr", c.address_lr);
  finite_pos("world.min_std", c.min_std);
  if (!(c.free_nats >= 0)) throw ConfigError("kl.free_nats must be >= 0");
  if (!(c.kl_scale >= 0)) throw ConfigError("kl.scale must be >= 0");
  if (!(c.explore_std >= 0)) throw ConfigError("agent.explore_std must be >= 0");
  if (c.checkpoint_every < 0) throw ConfigError("trainer.checkpoint_every must be >= 0");
  const double bn = c.beta * c.n;
  if (std::abs(bn - std::round(bn)) > 1e-9)
    throw ConfigError("trainer.beta * trainer.batch must be an integer, got " + format_real(bn));
  if (c.L > kEpisodeLength) throw ConfigError("trainer.seq_len exceeds the episode length " + std::to_string(kEpisodeLength));
  if (c.tasks.empty()) throw ConfigError("trainer.tasks must name at least one task");
  if (!c.filter_thresholds.empty() && c.filter_thresholds.size() != c.tasks.size())
    throw ConfigError("trainer.filter_thresholds needs one value per task");
  for (const auto& t : c.tasks) (void)make_env(t, 0, c.obs_mode);  // validates family/variant/params
  if (c.tasks.size() > 1)
    for (const auto& t : c.tasks)
      if (t.family != c.tasks.front().family) throw ConfigError("all tasks of one run must share a family");
}

/// Applies one `key = value` assignment.
inline void set_key(RamaConfig& c, const std::string& key, const std::string& value) {
  const auto* f = config_detail::find_field(config_detail::trim(key));
  if (!f) throw ConfigError("unknown key '" + config_detail::trim(key) + "'");
  try {
    f->set(c, config_detail::trim(value));
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + config_detail::trim(key) + "': " + e.what());
  }
}

/// Applies a `key=value` override string.
inline void apply_override(RamaConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_key(c, assignment.substr(0, eq), assignment.substr(eq + 1));
}

/// Parses config text on top of the defaults (not validated).
inline RamaConfig parse_config(const std::string& text, const std::string& source = "config") {
  RamaConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (config_detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set_key(c, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

inline RamaConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

/// Every key, one per line, in a fixed order. parse_config(emit_config(c)) == c.
inline std::string emit_config(const RamaConfig& c) {
  std::string out;
  for (const auto& [name, f] : config_detail::fields()) out += name + " = " + f.get(c) + "\n";
  return out;
}

inline WorldModelConfig world_config(const RamaConfig& c, int action_dim, const ObsSpec& obs) {
  WorldModelConfig w;
  w.action_dim = action_dim;
  w.obs = obs;
  w.deter = c.deter;
  w.stoch = c.stoch;
  w.hidden = c.world_hidden;
  w.min_std = c.min_std;
  w.free_nats = c.free_nats;
  w.kl_scale = c.kl_scale;
  return w;
}

inline AgentConfig agent_config(const RamaConfig& c, int action_dim) {
  AgentConfig a;
  a.action_dim = action_dim;
  a.feature_dim = c.deter + c.stoch;
  a.hidden = c.agent_hidden;
  a.horizon = c.horizon;
  a.gamma = c.gamma;
  a.lambda = c.lambda;
  a.actor_lr = c.actor_lr;
  a.critic_lr = c.critic_lr;
  a.grad_clip = c.grad_clip;
  a.explore_std = c.explore_std;
  return a;
}

inline AddressingConfig addressing_config(const RamaConfig& c, int action_dim, const ObsSpec& obs) {
  AddressingConfig a;
  a.objective = c.objective;
  a.action_dim = action_dim;
  a.obs = obs;
  a.embed_dim = c.embed_dim;
  a.hidden = c.address_hidden;
  a.lr = c.address_lr;
  a.grad_clip = c.grad_clip;
  a.detach_query = c.detach_query;
  a.exact = c.exact;
  return a;
}

}  // namespace rama
