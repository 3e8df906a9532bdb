#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rama/episode_store.hpp"
#include "test_support.hpp"

using namespace rama;
using rama::testing::make_episode;
using rama::testing::rollout_episode;

namespace fs = std::filesystem;

namespace {

const TaskId kA{Family::Loco, "stand", {}};
const TaskId kB{Family::Loco, "walk", {}};

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rama_store_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool bit_equal(const Episode& a, const Episode& b) {
  auto same = [](const auto& x, const auto& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) == 0;
  };
  return a.id == b.id && a.task == b.task && a.obs_spec == b.obs_spec && same(a.actions, b.actions) &&
         same(a.observations, b.observations) && same(a.rewards, b.rewards) && a.episode_return == b.episode_return;
}

// 3-sigma binomial band.
void expect_binomial(double count, double n, double p) {
  EXPECT_NEAR(count, n * p, 3.0 * std::sqrt(n * p * (1 - p)));
}

}  // namespace

TEST(EpisodeStore, AppendThenFetch) {
  MultitaskBuffer b;
  const Episode ep = rollout_episode(4, kA, 1);
  b.append(ep);
  EXPECT_TRUE(bit_equal(*b.get(4), ep));
  EXPECT_EQ(b.count(kA), 1u);
  b.append(rollout_episode(5, kB, 2));
  EXPECT_EQ(b.tasks().size(), 2u);
  EXPECT_THROW(b.get(99), DataError);
}

TEST(EpisodeStore, RecorderReturnIsRewardSum) {
  const Episode ep = rollout_episode(0, kA, 3);
  EXPECT_EQ(ep.length(), kEpisodeLength);
  EXPECT_EQ(ep.episode_return, Episode::sum_rewards(ep.rewards));
}

TEST(EpisodeStore, RejectsInconsistentEpisodes) {
  MultitaskBuffer b;
  b.append(make_episode(0, kA, 20, 1, 2, 0.5));
  EXPECT_THROW(b.append(make_episode(1, kB, 20, 2, 2, 0.5)), DataError);  // action dim for family
  EXPECT_THROW(b.append(make_episode(0, kA, 20, 1, 2, 0.5)), DataError);  // duplicate id
  Episode bad = make_episode(2, kA, 20, 1, 2, 0.5);
  bad.episode_return += 1.0;
  EXPECT_THROW(b.append(bad), DataError);
  Episode nan = make_episode(3, kA, 20, 1, 2, 0.5);
  nan.rewards(3) = NAN;
  EXPECT_THROW(b.append(nan), DataError);
}

TEST(EpisodeStore, ChunksAreContiguousSlices) {
  MultitaskBuffer b;
  b.append(rollout_episode(0, kA, 1));
  b.append(rollout_episode(1, kB, 2));
  Rng rng(0, 0);
  for (const Chunk& c : b.sample_current_chunks(kA, 200, 17, rng)) {
    EXPECT_EQ(c.task(), kA);
    EXPECT_EQ(c.length, 17);
    ASSERT_LE(c.start + 17, c.episode->length());
    EXPECT_EQ(c.observations(), c.episode->observations.middleRows(c.start, 17));
    EXPECT_EQ(c.rewards(), c.episode->rewards.segment(c.start, 17));
  }
}

TEST(EpisodeStore, SingleEpisodeOfLengthLHasStartZero) {
  MultitaskBuffer b;
  b.append(make_episode(0, kA, 12, 1, 2, 1.0));
  Rng rng(1, 0);
  for (const Chunk& c : b.sample_current_chunks(kA, 50, 12, rng)) EXPECT_EQ(c.start, 0);
}

TEST(EpisodeStore, EpisodeChoiceIsUniform) {
  MultitaskBuffer b;
  b.append(make_episode(0, kA, 30, 1, 2, 1.0));
  b.append(make_episode(1, kA, 60, 1, 2, 1.0));
  Rng rng(2, 0);
  const int n = 10000;
  int first = 0;
  for (const Chunk& c : b.sample_current_chunks(kA, n, 10, rng)) first += c.source_episode() == 0;
  expect_binomial(first, n, 0.5);
}

TEST(EpisodeStore, MultitaskDrawsCoverTasksEvenly) {
  MultitaskBuffer b;
  for (int i = 0; i < 3; ++i) b.append(make_episode(i, kA, 30, 1, 2, 1.0));
  for (int i = 3; i < 6; ++i) b.append(make_episode(i, kB, 30, 1, 2, 1.0));
  Rng rng(3, 0);
  const int n = 10000;
  int a = 0;
  for (const Chunk& c : b.sample_multitask_chunks(n, 10, rng)) a += c.task() == kA;
  expect_binomial(a, n, 0.5);
  EXPECT_TRUE(b.sample_multitask_chunks(0, 10, rng).empty());
}

TEST(EpisodeStore, SingleTaskBufferTagsEveryChunk) {
  MultitaskBuffer b;
  b.append(make_episode(0, kB, 30, 1, 2, 1.0));
  Rng rng(4, 0);
  for (const Chunk& c : b.sample_multitask_chunks(20, 10, rng)) EXPECT_EQ(c.task(), kB);
}

TEST(EpisodeStore, EmptySourceErrors) {
  MultitaskBuffer b;
  Rng rng(5, 0);
  EXPECT_THROW(b.sample_multitask_chunks(1, 10, rng), EmptySourceError);
  b.append(make_episode(0, kA, 30, 1, 2, 1.0));
  EXPECT_THROW(b.sample_current_chunks(kB, 1, 10, rng), EmptySourceError);
  EXPECT_THROW(b.sample_current_chunks(kA, 1, 31, rng), EmptySourceError);
}

TEST(EpisodeStore, FilterByReturn) {
  MultitaskBuffer b;
  b.append(make_episode(0, kA, 10, 1, 2, 1.0));
  b.append(make_episode(1, kA, 10, 1, 2, 2.0));
  b.append(make_episode(2, kA, 10, 1, 2, 3.0));
  const auto kept = b.filter_by_return(15.0);
  EXPECT_EQ(kept.size(), 2u);
  EXPECT_FALSE(kept.contains(0));
  EXPECT_EQ(b.filter_by_return(-1e300).size(), 3u);
  EXPECT_EQ(b.filter_by_return(1000.0).size(), 0u);
  EXPECT_EQ(b.size(), 3u);
}

TEST(EpisodeStore, SubsampleTo) {
  MultitaskBuffer b;
  b.append(make_episode(0, kA, 10, 1, 2, 1.0));
  b.append(make_episode(1, kA, 10, 1, 2, 1.0));
  Rng rng(6, 0);
  EXPECT_EQ(b.subsample_to(5, rng).size(), 2u);
  EXPECT_EQ(b.subsample_to(0, rng).size(), 0u);
  const int n = 10000;
  int zero = 0;
  for (int i = 0; i < n; ++i) zero += b.subsample_to(1, rng).contains(0);
  expect_binomial(zero, n, 0.5);
  EXPECT_EQ(b.size(), 2u);
}

TEST(EpisodeStore, StrideChunking) {
  MultitaskBuffer b;
  b.append(make_episode(0, kA, 100, 1, 2, 1.0));
  b.append(make_episode(1, kA, 100, 1, 2, 1.0));
  EXPECT_EQ(b.stride_chunks(50).size(), 4u);
  EXPECT_EQ(b.stride_chunks(30).size(), 6u);
  const Chunk c = b.resolve({1, 50}, 50);
  EXPECT_EQ(c.source_episode(), 1);
  EXPECT_THROW(b.resolve({1, 60}, 50), UsageError);
}

TEST(EpisodePersistence, BufferRoundTripIsBitExact) {
  MultitaskBuffer b;
  b.append(rollout_episode(0, kA, 1));
  b.append(rollout_episode(1, kB, 2));
  b.append(rollout_episode(7, kA, 3, ObsMode::Vector, true));
  const fs::path dir = temp_dir("roundtrip");
  save_buffer(b, dir);
  const MultitaskBuffer back = load_buffer(dir);
  ASSERT_EQ(back.size(), 3u);
  for (const auto& [id, ep] : b.episodes()) EXPECT_TRUE(bit_equal(*ep, *back.get(id)));
  fs::remove_all(dir);
}

TEST(EpisodePersistence, PixelEpisodeRoundTrip) {
  const Episode ep = rollout_episode(3, TaskId{Family::Push, "goal", {0.5, -0.5}}, 4, ObsMode::Pixels);
  EXPECT_TRUE(bit_equal(decode_episode(encode_episode(ep)), ep));
}

TEST(EpisodePersistence, TruncatedFileIsFormatErrorWithOffset) {
  const std::string bytes = encode_episode(rollout_episode(0, kA, 1));
  const std::string cut = bytes.substr(0, bytes.size() - 10);
  try {
    decode_episode(cut);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 0u);
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
  EXPECT_THROW(decode_episode(bytes + "x"), FormatError);
  EXPECT_THROW(decode_episode("garbage\n"), FormatError);
}

TEST(EpisodePersistence, UnknownVersionIsVersionError) {
  std::string bytes = encode_episode(make_episode(0, kA, 5, 1, 2, 1.0));
  bytes.replace(bytes.find("RAMA-EPISODE 1"), 14, "RAMA-EPISODE 9");
  EXPECT_THROW(decode_episode(bytes), VersionError);
}

TEST(EpisodePersistence, CorruptHeaderReportsOffset) {
  std::string bytes = encode_episode(make_episode(0, kA, 5, 1, 2, 1.0));
  const auto at = bytes.find("length");
  bytes.replace(at, 6, "lenxth");
  try {
    decode_episode(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), at);
  }
}
