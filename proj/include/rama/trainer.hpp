#pragma once

// Training orchestration: the lifelong task sequence, and per task the
// interleaving of addressing updates, world-model/agent updates on merged
// batches, and episode collection.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rama/addressing.hpp"
#include "rama/checkpoint.hpp"
#include "rama/config.hpp"
#include "rama/episode_store.hpp"

namespace rama {

/// A training run stopped on an error; what() carries the trainer state.
class RunAborted : public Error {
 public:
  RunAborted(const std::string& state, const std::string& cause)
      : Error("training aborted: " + cause + "\n" + state), cause_(cause) {}
  const std::string& cause() const { return cause_; }

 private:
  std::string cause_;
};

struct EpisodeRecord {
  std::int64_t episode_idx = 0;
  std::int64_t env_steps = 0;
  double episode_return = 0.0;
  double wall_ms = 0.0;
};

struct TrainRecord {
  std::int64_t train_step = 0;
  double world_loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double reward_nll = 0.0;
  double addr_loss = 0.0;
  double addr_entropy = 0.0;
  double addr_selected = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  bool merged = false;
};

struct RunMetrics {
  TaskId task;
  std::vector<EpisodeRecord> episodes;
  std::vector<TrainRecord> train;

  double mean_return() const {
    if (episodes.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : episodes) s += e.episode_return;
    return s / static_cast<double>(episodes.size());
  }

  /// Mean of the last `window` episode returns (fewer if not available).
  double trailing_mean(std::size_t window) const {
    if (episodes.empty()) return 0.0;
    const std::size_t k = std::min(window, episodes.size());
    double s = 0.0;
    for (std::size_t i = episodes.size() - k; i < episodes.size(); ++i) s += episodes[i].episode_return;
    return s / static_cast<double>(k);
  }
};

struct TrainingBatch {
  std::vector<Chunk> chunks;
  std::vector<bool> reward_mask;
  std::vector<bool> loss_mask;  // empty when every chunk trains the world model
  bool merged = false;
};

/// Deterministic half of batch construction: for alpha = 0 the current chunks as
/// they are; for alpha = 1 the first beta*n current chunks followed by (1-beta)*n
/// addressed chunks. reward_mask[i] = (task of chunk i == current task).
inline TrainingBatch compose_training_batch(const std::vector<Chunk>& x, const std::vector<Chunk>& addressed,
                                            const TaskId& current, bool alpha, double beta,
                                            bool train_world_on_addressed) {
  const auto n = static_cast<int>(x.size());
  if (n < 1) throw UsageError("training batch needs at least one current chunk");
  const double bn = beta * n;
  if (std::abs(bn - std::round(bn)) > 1e-9) throw ConfigError("beta * n must be an integer");
  const int keep = static_cast<int>(std::llround(bn));
  TrainingBatch b;
  b.merged = alpha;
  if (!alpha) {
    b.chunks = x;
  } else {
    if (static_cast<int>(addressed.size()) < n - keep) throw UsageError("too few addressed chunks for the merged batch");
    b.chunks.assign(x.begin(), x.begin() + keep);
    b.chunks.insert(b.chunks.end(), addressed.begin(), addressed.begin() + (n - keep));
    if (!train_world_on_addressed) {
      b.loss_mask.assign(static_cast<std::size_t>(n), true);
      for (int i = keep; i < n; ++i) b.loss_mask[static_cast<std::size_t>(i)] = false;
    }
  }
  for (const auto& c : b.chunks) b.reward_mask.push_back(c.task() == current);
  return b;
}

/// Draws alpha ~ Bernoulli(p), then composes the batch.
inline TrainingBatch build_training_batch(const std::vector<Chunk>& x, const std::vector<Chunk>& addressed,
                                          const TaskId& current, double p, double beta,
                                          bool train_world_on_addressed, Rng& rng) {
  const bool alpha = rng.bernoulli(p);
  return compose_training_batch(x, addressed, current, alpha, beta, train_world_on_addressed);
}

/// Runs one full-length episode. With `ac == nullptr` actions are uniform in [-1, 1].
template <class T>
Episode collect_episode(Environment& env, const WorldModel<T>* world, const ActorCritic<T>* ac, double explore_std,
                        std::int64_t id, Rng& rng, bool greedy = false) {
  const int A = env.action_dim();
  EpisodeRecorder rec(env.task(), env.obs_spec(), A);
  Observation obs = env.reset();
  LatentState<T> carry;
  Matrix<T> prev = Matrix<T>::Zero(1, A);
  if (ac) carry = world->initial_state(1);
  std::vector<double> action(static_cast<std::size_t>(A));
  while (!env.done()) {
    if (ac) {
      Matrix<T> o(1, static_cast<Eigen::Index>(obs.size()));
      for (std::size_t k = 0; k < obs.size(); ++k) o(0, static_cast<Eigen::Index>(k)) = static_cast<T>(obs[k]);
      auto [a, next] = ac->act(*world, carry, prev, o, explore_std, rng, greedy);
      carry = std::move(next);
      prev = a;
      for (int k = 0; k < A; ++k) action[static_cast<std::size_t>(k)] = static_cast<double>(a(0, k));
    } else {
      for (auto& a : action) a = rng.uniform(-1.0, 1.0);
    }
    const StepResult r = env.step(action);
    rec.record(action, r.observation, r.reward);
    obs = r.observation;
  }
  return rec.finish(id);
}

/// Mean return of `episodes` greedy episodes.
template <class T>
double evaluate(const WorldModel<T>& world, const ActorCritic<T>& ac, const TaskId& task, ObsMode mode, int episodes,
                std::uint64_t seed) {
  if (episodes < 1) throw UsageError("evaluation needs at least one episode");
  Environment env(task, seed, mode);
  Rng rng(seed, 0xE7A1);
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) total += collect_episode<T>(env, &world, &ac, 0.0, e, rng, true).episode_return;
  return total / episodes;
}

/// Optional side effects of a run.
struct TrainerHooks {
  std::filesystem::path out_dir;  // empty: write nothing
  /// Called after every collected episode; return false to end the current task.
  std::function<bool(std::size_t task_index, const RunMetrics&)> on_episode;
  /// Called after every train step.
  std::function<void(std::size_t task_index, const TrainRecord&)> on_train_step;
};

namespace stream {
inline constexpr std::uint64_t kEnv = 1, kData = 2, kWorld = 3, kAddr = 4, kMerge = 5, kCollect = 6, kPrior = 7,
                               kInit = 8;
}

/// The trainer. With kAddressing = false every addressing branch is compiled out.
template <bool kAddressing>
class BasicTrainer {
 public:
  using T = float;

  explicit BasicTrainer(RamaConfig cfg, TrainerHooks hooks = {}) : cfg_(std::move(cfg)), hooks_(std::move(hooks)) {
    validate(cfg_);
    const Environment probe(cfg_.tasks.front(), 0, cfg_.obs_mode);
    action_dim_ = probe.action_dim();
    obs_spec_ = probe.obs_spec();
    if constexpr (kAddressing) {
      net_ = std::make_unique<AddressingNet<T>>(addressing_config(cfg_, action_dim_, obs_spec_), seed_for(stream::kInit, 0xADD, 0));
      addr_opt_ = std::make_unique<AddressingTrainer<T>>(*net_);
    }
    if (!cfg_.prior_buffer.empty()) global_ = load_buffer(cfg_.prior_buffer);
  }

  /// Multitask buffer before any task of this run (or restored state).
  MultitaskBuffer& global_buffer() { return global_; }
  const MultitaskBuffer& working_buffer() const { return buffer_; }
  const RamaConfig& config() const { return cfg_; }

  WorldModel<T>& world() { return *world_; }
  ActorCritic<T>& agent() { return *ac_; }
  AddressingNet<T>* addressing() {
    if constexpr (kAddressing) return net_.get();
    return nullptr;
  }

  /// Runs every configured task in order, starting at `first_task`.
  std::vector<RunMetrics> run() {
    std::vector<RunMetrics> all;
    for (std::size_t k = first_task_; k < cfg_.tasks.size(); ++k) all.push_back(run_task(k));
    return all;
  }

  /// Restores models and counters from a checkpoint; `buffer_dir` holds every episode
  /// collected so far (including the interrupted task's).
  void resume(const Checkpoint& ck, const std::filesystem::path& buffer_dir) {
    const std::size_t k = static_cast<std::size_t>(ck.meta_or("task_index", 0));
    if (k >= cfg_.tasks.size()) throw DataError("checkpoint task index beyond the configured tasks");
    const std::int64_t first_id = ck.meta_or("task_first_id", 0);
    MultitaskBuffer all = load_buffer(buffer_dir);
    MultitaskBuffer before, during;
    for (const auto& [id, ep] : all.episodes()) (id < first_id ? before : during).append(ep);
    global_ = std::move(before);
    resume_ = ResumeState{ck, std::move(during)};
    first_task_ = k;
  }

  /// One task: re-initialized world model and agent, persistent addressing model.
  RunMetrics run_task(std::size_t k) {
    const TaskId task = cfg_.tasks.at(k);
    RunMetrics metrics;
    metrics.task = task;
    std::optional<ResumeState> resumed;
    if (resume_ && first_task_ == k) resumed = std::exchange(resume_, std::nullopt);
    const std::int64_t start_episodes = resumed ? resumed->ck.meta_or("episodes", 0) : 0;

    // Per-purpose random streams.
    data_rng_ = Rng(seed_for(stream::kData, k, start_episodes), 0);
    world_rng_ = Rng(seed_for(stream::kWorld, k, start_episodes), 0);
    addr_rng_ = Rng(seed_for(stream::kAddr, k, start_episodes), 0);
    merge_rng_ = Rng(seed_for(stream::kMerge, k, start_episodes), 0);
    Rng collect_rng(seed_for(stream::kCollect, k, start_episodes), 0);
    Rng prior_rng(seed_for(stream::kPrior, k, 0), 0);

    // Prior experience for this task.
    buffer_ = global_.filter_by_return(cfg_.filter_threshold(k)).subsample_to(static_cast<std::size_t>(cfg_.K), prior_rng);
    first_id_ = global_.next_id();
    next_id_ = first_id_;

    world_ = std::make_unique<WorldModel<T>>(world_config(cfg_, action_dim_, obs_spec_), seed_for(stream::kInit, k, 1));
    ac_ = std::make_unique<ActorCritic<T>>(agent_config(cfg_, action_dim_), seed_for(stream::kInit, k, 2));
    world_opt_ = std::make_unique<WorldTrainer<T>>(*world_, nn::AdamOptions{cfg_.world_lr, 0.9, 0.999, 1e-8, cfg_.grad_clip});
    ac_opt_ = std::make_unique<ActorCriticTrainer<T>>(*world_, *ac_);
    if constexpr (kAddressing) D_.reset();

    Environment env(task, cfg_.env_seed ^ seed_for(stream::kEnv, k, start_episodes), cfg_.obs_mode);
    std::int64_t env_steps = 0, train_steps = 0;
    std::vector<std::shared_ptr<const Episode>> collected;

    CsvSinks sinks = open_sinks(k, resumed.has_value());
    if (resumed) {
      resumed->ck.restore(world_->parameters());
      resumed->ck.restore(ac_->actor_parameters());
      resumed->ck.restore(ac_->value_parameters());
      if constexpr (kAddressing) resumed->ck.restore(net_->parameters());
      env_steps = resumed->ck.meta_or("env_steps", 0);
      train_steps = resumed->ck.meta_or("train_steps", 0);
      first_id_ = resumed->ck.meta_or("task_first_id", first_id_);
      for (const auto& [id, ep] : resumed->during.episodes()) {
        buffer_.append(ep);
        collected.push_back(ep);
        next_id_ = std::max(next_id_, id + 1);
      }
    }

    const auto t0 = std::chrono::steady_clock::now();
    std::int64_t episodes = start_episodes;
    auto add_episode = [&](Episode ep) {
      auto sp = std::make_shared<const Episode>(std::move(ep));
      buffer_.append(sp);
      collected.push_back(sp);
      env_steps += sp->length();
      EpisodeRecord rec{episodes++, env_steps, sp->episode_return,
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
      metrics.episodes.push_back(rec);
      if (sinks.episodes) *sinks.episodes << rec.episode_idx << ',' << rec.env_steps << ',' << format_real(rec.episode_return)
                                          << ',' << format_real(rec.wall_ms) << '\n' << std::flush;
    };
    auto state = [&](const std::string& where) {
      std::string s = "  task " + task.str() + " (index " + std::to_string(k) + ")\n  phase " + where +
                      "\n  env_steps " + std::to_string(env_steps) + "\n  train_steps " + std::to_string(train_steps) +
                      "\n  buffer episodes " + std::to_string(buffer_.size());
      if (!metrics.train.empty()) {
        const auto& r = metrics.train.back();
        s += "\n  last losses: world " + format_real(r.world_loss) + " recon " + format_real(r.recon) + " kl " +
             format_real(r.kl) + " reward " + format_real(r.reward_nll) + " addr " + format_real(r.addr_loss);
      }
      return s;
    };

    bool stop = false;
    try {
      if (!resumed) {
        for (int s = 0; s < cfg_.S && env_steps < cfg_.env_steps; ++s) {
          add_episode(collect_episode<T>(env, nullptr, nullptr, 0.0, next_id_++, collect_rng));
          stop = !episode_hook(k, metrics) || stop;
        }
      }
      while (!stop && env_steps < cfg_.env_steps) {
        for (int c = 0; c < cfg_.C; ++c) {
          if constexpr (kAddressing) {
            if (uses_matrix() && (!D_ || train_steps % cfg_.refresh_period == 0))
              D_ = refresh_embedding_matrix(*net_, buffer_, cfg_.L, train_steps);
          }
          TrainRecord rec = train_step(task);
          rec.train_step = train_steps++;
          metrics.train.push_back(rec);
          if (sinks.train)
            *sinks.train << rec.train_step << ',' << format_real(rec.world_loss) << ',' << format_real(rec.recon) << ','
                         << format_real(rec.kl) << ',' << format_real(rec.reward_nll) << ','
                         << format_real(rec.addr_loss) << ',' << format_real(rec.addr_entropy) << '\n';
          if (hooks_.on_train_step) hooks_.on_train_step(k, rec);
        }
        if (sinks.train) sinks.train->flush();
        add_episode(collect_episode<T>(env, world_.get(), ac_.get(), cfg_.explore_std, next_id_++, collect_rng));
        if (!episode_hook(k, metrics)) stop = true;
        if (cfg_.stop_return > 0 &&
            metrics.trailing_mean(static_cast<std::size_t>(cfg_.stop_window)) >= cfg_.stop_return &&
            static_cast<int>(metrics.episodes.size()) >= cfg_.stop_window)
          stop = true;
        if (cfg_.checkpoint_every > 0 && episodes % cfg_.checkpoint_every == 0)
          write_checkpoint(k, env_steps, episodes, train_steps, collected);
      }
    } catch (const RunAborted&) {
      throw;
    } catch (const Error& e) {
      throw RunAborted(state("training"), e.what());
    }
    write_checkpoint(k, env_steps, episodes, train_steps, collected);

    for (const auto& ep : collected)
      if (!global_.contains(ep->id)) global_.append(ep);
    return metrics;
  }

  /// One addressing step (if enabled) followed by one world-model and agent step.
  TrainRecord train_step(const TaskId& task) {
    TrainRecord rec;
    const std::vector<Chunk> x = buffer_.sample_current_chunks(task, cfg_.n, cfg_.L, data_rng_);
    std::vector<Chunk> addressed;
    bool alpha = false;
    if constexpr (kAddressing) {
      if (cfg_.objective != Objective::None) {
        const auto xa = buffer_.sample_current_chunks(task, cfg_.n, cfg_.L, addr_rng_);
        const auto Ma = buffer_.sample_multitask_chunks(cfg_.m, cfg_.L, addr_rng_);
        const AddressingReport r = addr_opt_->step(xa, Ma, *world_, ac_.get(), addr_rng_);
        rec.addr_loss = r.loss;
        rec.addr_entropy = r.entropy;
        rec.addr_selected = r.selected_reward;
      }
      alpha = merge_rng_.bernoulli(cfg_.p);
      if (alpha) {
        const int keep = cfg_.current_count();
        const std::vector<Chunk> queries(x.begin() + keep, x.end());
        if (cfg_.objective == Objective::None) {
          addressed = buffer_.sample_multitask_chunks(static_cast<int>(queries.size()), cfg_.L, merge_rng_);
        } else {
          for (const auto& ref : address_with_matrix(*net_, queries, *D_, merge_rng_))
            addressed.push_back(buffer_.resolve(ref, cfg_.L));
        }
      }
    }
    const TrainingBatch batch =
        compose_training_batch(x, addressed, task, alpha, cfg_.beta, cfg_.train_world_on_addressed);
    rec.merged = batch.merged;
    const auto seq = SequenceBatch<T>::from_chunks(batch.chunks);
    const auto res = world_opt_->step(seq, batch.reward_mask, world_rng_, batch.loss_mask.empty() ? nullptr : &batch.loss_mask);
    rec.world_loss = res.report.total;
    rec.recon = res.report.reconstruction;
    rec.kl = res.report.kl_raw;
    rec.reward_nll = res.report.reward_nll;
    const ActorCriticReport ac = ac_opt_->step(stack_states(res.states), world_rng_);
    rec.actor_loss = ac.actor_loss;
    rec.critic_loss = ac.critic_loss;
    return rec;
  }

  /// Current models and counters as a checkpoint.
  Checkpoint snapshot(std::size_t task_index, std::int64_t env_steps, std::int64_t episodes,
                      std::int64_t train_steps) const {
    Checkpoint ck;
    ck.config_text = emit_config(cfg_);
    ck.meta["task_index"] = static_cast<std::int64_t>(task_index);
    ck.meta["env_steps"] = env_steps;
    ck.meta["episodes"] = episodes;
    ck.meta["train_steps"] = train_steps;
    ck.meta["task_first_id"] = first_id_;
    ck.store(world_->parameters());
    ck.store(ac_->actor_parameters());
    ck.store(ac_->value_parameters());
    if constexpr (kAddressing) ck.store(net_->parameters());
    return ck;
  }

 private:
  struct ResumeState {
    Checkpoint ck;
    MultitaskBuffer during;
  };

  struct CsvSinks {
    std::unique_ptr<std::ofstream> episodes, train;
  };

  std::uint64_t seed_for(std::uint64_t purpose, std::uint64_t task, std::int64_t extra) const {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(task),
                      static_cast<std::uint32_t>(extra)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
  }

  bool uses_matrix() const {
    if constexpr (kAddressing) return cfg_.objective != Objective::None && cfg_.p > 0;
    return false;
  }

  bool episode_hook(std::size_t k, const RunMetrics& m) { return !hooks_.on_episode || hooks_.on_episode(k, m); }

  CsvSinks open_sinks(std::size_t k, bool append) const {
    CsvSinks s;
    if (hooks_.out_dir.empty()) return s;
    std::filesystem::create_directories(hooks_.out_dir);
    const auto mode = append ? std::ios::app : std::ios::trunc;
    const auto ep_path = hooks_.out_dir / ("episodes_" + std::to_string(k) + ".csv");
    const auto tr_path = hooks_.out_dir / ("train_" + std::to_string(k) + ".csv");
    s.episodes = std::make_unique<std::ofstream>(ep_path, std::ios::out | mode);
    s.train = std::make_unique<std::ofstream>(tr_path, std::ios::out | mode);
    if (!*s.episodes || !*s.train) throw Error("cannot write metrics under " + hooks_.out_dir.string());
    if (!append) {
      *s.episodes << "episode_idx,env_steps,return,wall_ms\n";
      *s.train << "train_step,world_loss,recon,kl,reward_nll,addr_loss,addr_entropy\n";
    }
    return s;
  }

  void write_checkpoint(std::size_t k, std::int64_t env_steps, std::int64_t episodes, std::int64_t train_steps,
                        const std::vector<std::shared_ptr<const Episode>>& collected) const {
    if (hooks_.out_dir.empty()) return;
    MultitaskBuffer all = global_;
    for (const auto& ep : collected)
      if (!all.contains(ep->id)) all.append(ep);
    save_buffer(all, hooks_.out_dir / "buffer", true);
    save_checkpoint(snapshot(k, env_steps, episodes, train_steps), hooks_.out_dir / "checkpoint.bin");
  }

  RamaConfig cfg_;
  TrainerHooks hooks_;
  int action_dim_ = 1;
  ObsSpec obs_spec_;

  MultitaskBuffer global_;  // experience of finished tasks (plus any preloaded buffer)
  MultitaskBuffer buffer_;  // working buffer of the current task: prior slice + own episodes
  std::int64_t first_id_ = 0, next_id_ = 0;

  std::unique_ptr<WorldModel<T>> world_;
  std::unique_ptr<ActorCritic<T>> ac_;
  std::unique_ptr<WorldTrainer<T>> world_opt_;
  std::unique_ptr<ActorCriticTrainer<T>> ac_opt_;

  struct Empty {};
  [[no_unique_address]] std::conditional_t<kAddressing, std::unique_ptr<AddressingNet<T>>, Empty> net_{};
  [[no_unique_address]] std::conditional_t<kAddressing, std::unique_ptr<AddressingTrainer<T>>, Empty> addr_opt_{};
  [[no_unique_address]] std::conditional_t<kAddressing, std::optional<EmbeddingMatrix<T>>, Empty> D_{};

  Rng data_rng_{0, 0}, world_rng_{0, 0}, addr_rng_{0, 0}, merge_rng_{0, 0};
  std::size_t first_task_ = 0;
  std::optional<ResumeState> resume_;
};

using Trainer = BasicTrainer<true>;
using PlainTrainer = BasicTrainer<false>;

}  // namespace rama
