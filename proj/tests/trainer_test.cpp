#include <gtest/gtest.h>

#include <unistd.h>

#include <numeric>

#include "criteria.hpp"
#include "rama/report.hpp"

using namespace rama;
namespace fs = std::filesystem;
using criteria::kStand;
using criteria::kWalk;
using criteria::small_config;

namespace {

std::vector<Chunk> chunks_of(const TaskId& task, int count, std::uint64_t seed) {
  std::vector<Chunk> out;
  for (int i = 0; i < count; ++i)
    out.push_back(Chunk{std::make_shared<const Episode>(rama::testing::rollout_episode(i, task, seed + static_cast<std::uint64_t>(i))),
                        10 * i, 8});
  return out;
}

RamaConfig quick(std::uint64_t seed, Objective o = Objective::RRAMa) {
  RamaConfig c = small_config(seed);
  c.objective = o;
  c.n = 4;
  c.L = 8;
  c.m = 4;
  c.C = 3;
  c.refresh_period = 2;
  c.world_hidden = 16;
  c.agent_hidden = 16;
  c.deter = 8;
  c.stoch = 4;
  c.address_hidden = 8;
  c.embed_dim = 8;
  c.horizon = 3;
  c.env_steps = 3 * kEpisodeLength;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rama_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double checksum(const Matrix<float>& m) { return static_cast<double>(m.cast<double>().sum()); }

}  // namespace

TEST(ComposeBatch, NoMergeKeepsCurrentChunks) {
  const auto x = chunks_of(kStand, 4, 1);
  const auto b = compose_training_batch(x, {}, kStand, false, 0.5, true);
  EXPECT_FALSE(b.merged);
  ASSERT_EQ(b.chunks.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(b.chunks[i].episode, x[i].episode);
  EXPECT_EQ(b.reward_mask, std::vector<bool>(4, true));
  EXPECT_TRUE(b.loss_mask.empty());
}

TEST(ComposeBatch, MergeReplacesTheTailAndMasksForeignRewards) {
  const auto x = chunks_of(kStand, 4, 2);
  const auto foreign = chunks_of(kWalk, 4, 3);
  const auto b = compose_training_batch(x, foreign, kStand, true, 0.5, true);
  EXPECT_TRUE(b.merged);
  ASSERT_EQ(b.chunks.size(), 4u);
  EXPECT_EQ(b.chunks[0].episode, x[0].episode);
  EXPECT_EQ(b.chunks[1].episode, x[1].episode);
  EXPECT_EQ(b.chunks[2].episode, foreign[0].episode);
  EXPECT_EQ(b.reward_mask, (std::vector<bool>{true, true, false, false}));

  const auto same = compose_training_batch(x, chunks_of(kStand, 2, 4), kStand, true, 0.5, true);
  EXPECT_EQ(same.reward_mask, std::vector<bool>(4, true));

  const auto frozen = compose_training_batch(x, foreign, kStand, true, 0.5, false);
  EXPECT_EQ(frozen.loss_mask, (std::vector<bool>{true, true, false, false}));
}

TEST(ComposeBatch, BetaEdgesAndErrors) {
  const auto x = chunks_of(kStand, 4, 5);
  const auto foreign = chunks_of(kWalk, 4, 6);
  EXPECT_EQ(compose_training_batch(x, foreign, kStand, true, 1.0, true).reward_mask, std::vector<bool>(4, true));
  EXPECT_EQ(compose_training_batch(x, foreign, kStand, true, 0.0, true).reward_mask, std::vector<bool>(4, false));
  EXPECT_THROW(compose_training_batch(x, foreign, kStand, true, 0.3, true), ConfigError);
  EXPECT_THROW(compose_training_batch(x, {foreign[0]}, kStand, true, 0.5, true), UsageError);
  EXPECT_THROW(compose_training_batch({}, foreign, kStand, false, 0.5, true), UsageError);
}

TEST(ComposeBatch, MergeProbability) {
  const auto x = chunks_of(kStand, 2, 7);
  const auto a = chunks_of(kWalk, 1, 8);
  Rng rng(9, 0);
  for (int i = 0; i < 100; ++i) {
    EXPECT_FALSE(build_training_batch(x, a, kStand, 0.0, 0.5, true, rng).merged);
    EXPECT_TRUE(build_training_batch(x, a, kStand, 1.0, 0.5, true, rng).merged);
  }
  int merged = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) merged += build_training_batch(x, a, kStand, 0.3, 0.5, true, rng).merged;
  EXPECT_NEAR(merged, 0.3 * n, 3 * std::sqrt(n * 0.3 * 0.7));
}

TEST(Trainer, NoAddressingMatchesTheAddressingFreeBuild) {
  const auto r = criteria::baseline_reduction();
  EXPECT_EQ(r.steps, 50u);
  EXPECT_EQ(r.mismatches, 0u);
}

TEST(Trainer, RewardMaskIsExact) {
  const auto r = criteria::reward_mask_exactness();
  EXPECT_EQ(r.all_foreign_max_grad, 0.0);
  EXPECT_EQ(r.foreign_target_sensitivity, 0.0);
  EXPECT_LT(r.removal_difference, 1e-4);
}

TEST(Trainer, IdenticalSeedsIdenticalRuns) {
  auto run = [](std::uint64_t seed) {
    Trainer t(quick(seed));
    return t.run().front();
  };
  const auto a = run(1), b = run(1), c = run(2);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].world_loss, b.train[i].world_loss);
    EXPECT_EQ(a.train[i].addr_loss, b.train[i].addr_loss);
    EXPECT_EQ(a.train[i].merged, b.train[i].merged);
  }
  for (std::size_t i = 0; i < a.episodes.size(); ++i) EXPECT_EQ(a.episodes[i].episode_return, b.episodes[i].episode_return);
  EXPECT_NE(a.train.front().world_loss, c.train.front().world_loss);
}

TEST(Trainer, EveryObjectiveTrains) {
  for (Objective o : {Objective::VRAMa, Objective::RRAMa, Objective::RbRAMa, Objective::None}) {
    RamaConfig c = quick(3, o);
    c.p = 1.0;
    Trainer t(c);
    const auto m = t.run().front();
    ASSERT_FALSE(m.train.empty()) << to_string(o);
    for (const auto& r : m.train) {
      EXPECT_TRUE(std::isfinite(r.world_loss)) << to_string(o);
      EXPECT_TRUE(r.merged);
      if (o != Objective::None) EXPECT_TRUE(std::isfinite(r.addr_loss));
      if (o == Objective::None) EXPECT_EQ(r.addr_loss, 0.0);
    }
  }
}

TEST(Trainer, EnvStepAccountingAndStop) {
  RamaConfig c = quick(4);
  c.env_steps = 4 * kEpisodeLength;
  Trainer t(c);
  const auto m = t.run().front();
  ASSERT_EQ(m.episodes.size(), 4u);
  for (std::size_t i = 0; i < m.episodes.size(); ++i) {
    EXPECT_EQ(m.episodes[i].episode_idx, static_cast<std::int64_t>(i));
    EXPECT_EQ(m.episodes[i].env_steps, static_cast<std::int64_t>(i + 1) * kEpisodeLength);
  }
  EXPECT_EQ(m.train.size(), 3u * static_cast<std::size_t>(c.C));

  TrainerHooks hooks;
  hooks.on_episode = [](std::size_t, const RunMetrics& r) { return r.episodes.size() < 2; };
  Trainer early(c, hooks);
  EXPECT_EQ(early.run().front().episodes.size(), 2u);
}

TEST(Trainer, PriorCapAndFilter) {
  const fs::path dir = scratch("prior");
  criteria::write_scripted_buffer(dir / "buf", 30, kStand, 5);
  RamaConfig c = quick(5);
  c.env_steps = kEpisodeLength;
  c.prior_buffer = (dir / "buf").string();
  c.K = 10;
  Trainer capped(c);
  capped.run();
  EXPECT_EQ(capped.working_buffer().size(), 11u);
  EXPECT_EQ(capped.global_buffer().size(), 31u);

  c.filter_thresholds = {1e9};
  Trainer filtered(c);
  filtered.run();
  EXPECT_EQ(filtered.working_buffer().size(), 1u);
  fs::remove_all(dir);
}

TEST(Trainer, LifelongTasksKeepAddressingAndResetAgent) {
  RamaConfig c = quick(6);
  c.tasks = {kStand, kWalk};
  c.env_steps = 2 * kEpisodeLength;
  std::vector<double> phi_at_episode;
  std::vector<std::size_t> task_at_episode;
  Trainer* self = nullptr;
  TrainerHooks hooks;
  hooks.on_episode = [&](std::size_t k, const RunMetrics&) {
    phi_at_episode.push_back(checksum(self->addressing()->parameters().flatten()));
    task_at_episode.push_back(k);
    return true;
  };
  Trainer t(c, hooks);
  self = &t;
  const double phi0 = checksum(t.addressing()->parameters().flatten());
  const auto all = t.run();
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].task, kStand);
  EXPECT_EQ(all[1].task, kWalk);
  EXPECT_EQ(all[1].episodes.front().env_steps, kEpisodeLength);
  EXPECT_EQ(all[1].episodes.back().env_steps, 2 * kEpisodeLength);
  ASSERT_EQ(task_at_episode, (std::vector<std::size_t>{0, 0, 1, 1}));
  EXPECT_NE(phi_at_episode[1], phi0);
  EXPECT_EQ(phi_at_episode[2], phi_at_episode[1]);  // seed episode of the second task: no training yet

  EXPECT_EQ(t.global_buffer().size(), 4u);
  EXPECT_EQ(t.global_buffer().count(kStand), 2u);
  EXPECT_EQ(t.global_buffer().count(kWalk), 2u);
  // The second task's working buffer holds the first task's episodes as prior experience.
  EXPECT_EQ(t.working_buffer().size(), 4u);

  // The world model of the second task starts from a fresh initialization.
  RamaConfig only_walk = c;
  only_walk.tasks = {kWalk};
  Trainer probe(only_walk);
  probe.run_task(0);
  EXPECT_NE(checksum(probe.world().parameters().flatten()), checksum(t.world().parameters().flatten()));
}

TEST(Trainer, WritesMetricCsvs) {
  const fs::path dir = scratch("csv");
  RamaConfig c = quick(7);
  c.env_steps = 2 * kEpisodeLength;
  TrainerHooks hooks;
  hooks.out_dir = dir;
  Trainer t(c, hooks);
  t.run();
  const Curve curve = read_episode_csv(dir / "episodes_0.csv");
  EXPECT_EQ(curve.x, (std::vector<double>{100, 200}));
  std::ifstream train(dir / "train_0.csv");
  std::string line;
  int lines = 0;
  while (std::getline(train, line)) ++lines;
  EXPECT_EQ(lines, 1 + c.C);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(dir / "buffer"));
  fs::remove_all(dir);
}

TEST(Trainer, ResumeContinuesCounters) {
  const fs::path dir = scratch("resume");
  RamaConfig c = quick(8);
  c.env_steps = 2 * kEpisodeLength;
  {
    TrainerHooks hooks;
    hooks.out_dir = dir;
    Trainer t(c, hooks);
    t.run();
  }
  const Checkpoint ck = load_checkpoint(dir / "checkpoint.bin");
  EXPECT_EQ(ck.meta_or("env_steps", -1), 2 * kEpisodeLength);
  RamaConfig more = c;
  more.env_steps = 3 * kEpisodeLength;
  Trainer resumed(more);
  resumed.resume(ck, dir / "buffer");
  const auto m = resumed.run().front();
  ASSERT_EQ(m.episodes.size(), 1u);
  EXPECT_EQ(m.episodes.front().env_steps, 3 * kEpisodeLength);
  EXPECT_EQ(m.episodes.front().episode_idx, 2);
  fs::remove_all(dir);
}

TEST(Trainer, InvalidConfigRejected) {
  RamaConfig c = quick(9);
  c.beta = 0.3;
  EXPECT_THROW(Trainer{c}, ConfigError);
}

TEST(Evaluate, GreedyAndBounded) {
  RamaConfig c = quick(10);
  c.env_steps = kEpisodeLength;
  Trainer t(c);
  t.run();
  const double a = evaluate(t.world(), t.agent(), kStand, ObsMode::Vector, 2, 3);
  EXPECT_EQ(a, evaluate(t.world(), t.agent(), kStand, ObsMode::Vector, 2, 3));
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, 100.0);
  EXPECT_THROW(evaluate(t.world(), t.agent(), kStand, ObsMode::Vector, 0, 3), UsageError);
}
