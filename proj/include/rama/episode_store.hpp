#pragma once

// Task-tagged episode storage with chunk sampling and on-disk persistence.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rama/envs.hpp"
#include "rama/errors.hpp"
#include "rama/rng.hpp"

namespace rama {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Step {
  std::vector<float> action;
  Observation observation;
  float reward = 0.0f;
};

/// One recorded episode. Row t holds the action applied at step t, the observation
/// it produced and the reward received for it.
struct Episode {
  std::int64_t id = -1;
  TaskId task;
  ObsSpec obs_spec;
  RowMatrixF actions;       // T x action_dim
  RowMatrixF observations;  // T x obs_dim
  Eigen::VectorXf rewards;  // T
  double episode_return = 0.0;

  int length() const { return static_cast<int>(rewards.size()); }
  int action_dim() const { return static_cast<int>(actions.cols()); }
  int obs_dim() const { return static_cast<int>(observations.cols()); }

  Step step(int t) const {
    Step s;
    s.action.assign(actions.row(t).data(), actions.row(t).data() + actions.cols());
    s.observation.assign(observations.row(t).data(), observations.row(t).data() + observations.cols());
    s.reward = rewards(t);
    return s;
  }

  static double sum_rewards(const Eigen::VectorXf& r) {
    double total = 0.0;
    for (Eigen::Index t = 0; t < r.size(); ++t) total += static_cast<double>(r(t));
    return total;
  }

  void finalize() { episode_return = sum_rewards(rewards); }
};

/// Incrementally assembles an Episode while an environment is stepped.
class EpisodeRecorder {
 public:
  EpisodeRecorder(TaskId task, ObsSpec spec, int action_dim) : task_(std::move(task)), spec_(spec), action_dim_(action_dim) {}

  void record(std::span<const double> action, const Observation& obs, double reward) {
    actions_.insert(actions_.end(), action.begin(), action.end());
    obs_.insert(obs_.end(), obs.begin(), obs.end());
    rewards_.push_back(static_cast<float>(reward));
  }

  Episode finish(std::int64_t id) const {
    Episode ep;
    ep.id = id;
    ep.task = task_;
    ep.obs_spec = spec_;
    const auto T = static_cast<Eigen::Index>(rewards_.size());
    ep.actions.resize(T, action_dim_);
    ep.observations.resize(T, spec_.dim);
    ep.rewards.resize(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (int a = 0; a < action_dim_; ++a) ep.actions(t, a) = static_cast<float>(actions_[t * action_dim_ + a]);
      for (int o = 0; o < spec_.dim; ++o) ep.observations(t, o) = obs_[t * spec_.dim + o];
      ep.rewards(t) = rewards_[t];
    }
    ep.finalize();
    return ep;
  }

 private:
  TaskId task_;
  ObsSpec spec_;
  int action_dim_;
  std::vector<double> actions_;
  std::vector<float> obs_;
  std::vector<float> rewards_;
};

/// Contiguous slice [start, start + length) of a stored episode.
struct Chunk {
  std::shared_ptr<const Episode> episode;
  int start = 0;
  int length = 0;

  std::int64_t source_episode() const { return episode->id; }
  const TaskId& task() const { return episode->task; }
  auto actions() const { return episode->actions.middleRows(start, length); }
  auto observations() const { return episode->observations.middleRows(start, length); }
  auto rewards() const { return episode->rewards.segment(start, length); }
};

/// (episode id, start) reference used by the embedding matrix.
struct ChunkRef {
  std::int64_t episode = -1;
  int start = 0;
  bool operator==(const ChunkRef&) const = default;
  auto operator<=>(const ChunkRef&) const = default;
};

class MultitaskBuffer {
 public:
  MultitaskBuffer() = default;

  void append(Episode ep) { append(std::make_shared<const Episode>(std::move(ep))); }

  void append(std::shared_ptr<const Episode> ep) {
    const Episode& e = *ep;
    if (e.id < 0) throw DataError("episode id must be non-negative");
    if (episodes_.count(e.id)) throw DataError("duplicate episode id " + std::to_string(e.id));
    if (e.actions.rows() != e.rewards.size() || e.observations.rows() != e.rewards.size())
      throw DataError("episode " + std::to_string(e.id) + " has inconsistent step counts");
    if (e.observations.cols() != e.obs_spec.dim)
      throw DataError("episode " + std::to_string(e.id) + " observation width disagrees with its shape");
    if (!e.rewards.allFinite()) throw DataError("episode " + std::to_string(e.id) + " has non-finite rewards");
    if (e.episode_return != Episode::sum_rewards(e.rewards))
      throw DataError("episode " + std::to_string(e.id) + " return differs from its reward sum");
    auto shape = shapes_.find(e.task.family);
    if (shape != shapes_.end()) {
      if (shape->second.first != e.action_dim())
        throw DataError("action dimension " + std::to_string(e.action_dim()) + " does not match buffer's " +
                        std::to_string(shape->second.first) + " for family " + to_string(e.task.family));
      if (!(shape->second.second == e.obs_spec))
        throw DataError("observation shape does not match buffer's for family " + to_string(e.task.family));
    } else {
      shapes_.emplace(e.task.family, std::make_pair(e.action_dim(), e.obs_spec));
    }
    episodes_.emplace(e.id, ep);
    by_task_[e.task].push_back(e.id);
  }

  std::size_t size() const { return episodes_.size(); }
  bool empty() const { return episodes_.empty(); }
  bool contains(std::int64_t id) const { return episodes_.count(id) != 0; }

  std::shared_ptr<const Episode> get(std::int64_t id) const {
    auto it = episodes_.find(id);
    if (it == episodes_.end()) throw DataError("no episode with id " + std::to_string(id));
    return it->second;
  }

  const std::map<std::int64_t, std::shared_ptr<const Episode>>& episodes() const { return episodes_; }

  std::vector<TaskId> tasks() const {
    std::vector<TaskId> out;
    for (const auto& [t, _] : by_task_) out.push_back(t);
    return out;
  }

  std::vector<std::int64_t> ids_for(const TaskId& task) const {
    auto it = by_task_.find(task);
    return it == by_task_.end() ? std::vector<std::int64_t>{} : it->second;
  }

  std::size_t count(const TaskId& task) const { return ids_for(task).size(); }

  std::int64_t next_id() const { return episodes_.empty() ? 0 : episodes_.rbegin()->first + 1; }

  /// Chunks from episodes tagged `task`: uniform episode, then uniform start.
  std::vector<Chunk> sample_current_chunks(const TaskId& task, int count, int length, Rng& rng) const {
    std::vector<std::shared_ptr<const Episode>> pool;
    for (std::int64_t id : ids_for(task))
      if (episodes_.at(id)->length() >= length) pool.push_back(episodes_.at(id));
    if (pool.empty() && count > 0)
      throw EmptySourceError("no episode of task " + task.str() + " with length >= " + std::to_string(length));
    return draw(pool, count, length, rng);
  }

  /// Chunks from all stored episodes regardless of task.
  std::vector<Chunk> sample_multitask_chunks(int count, int length, Rng& rng) const {
    std::vector<std::shared_ptr<const Episode>> pool;
    for (const auto& [_, ep] : episodes_)
      if (ep->length() >= length) pool.push_back(ep);
    if (pool.empty() && count > 0)
      throw EmptySourceError("buffer holds no episode with length >= " + std::to_string(length));
    return draw(pool, count, length, rng);
  }

  /// Episodes whose return is at least `threshold`. The source is untouched.
  MultitaskBuffer filter_by_return(double threshold) const {
    MultitaskBuffer out;
    for (const auto& [_, ep] : episodes_)
      if (ep->episode_return >= threshold) out.append(ep);
    return out;
  }

  /// Uniformly chosen subset of K episodes (or a copy when already small enough).
  MultitaskBuffer subsample_to(std::size_t K, Rng& rng) const {
    if (K >= episodes_.size()) return *this;
    std::vector<std::int64_t> ids;
    for (const auto& [id, _] : episodes_) ids.push_back(id);
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < K; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(ids.size() - i)));
      std::swap(ids[i], ids[j]);
    }
    std::sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(K));
    MultitaskBuffer out;
    for (std::size_t i = 0; i < K; ++i) out.append(episodes_.at(ids[i]));
    return out;
  }

  /// Adds every episode of `other` not already present (by id).
  void merge(const MultitaskBuffer& other) {
    for (const auto& [id, ep] : other.episodes_)
      if (!contains(id)) append(ep);
  }

  /// Deterministic chunking: windows at 0, L, 2L, ...; a trailing partial window is dropped.
  std::vector<ChunkRef> stride_chunks(int length) const {
    std::vector<ChunkRef> out;
    for (const auto& [id, ep] : episodes_)
      for (int s = 0; s + length <= ep->length(); s += length) out.push_back({id, s});
    return out;
  }

  Chunk resolve(const ChunkRef& ref, int length) const {
    auto ep = get(ref.episode);
    if (ref.start < 0 || ref.start + length > ep->length()) throw UsageError("chunk reference out of range");
    return {ep, ref.start, length};
  }

 private:
  static std::vector<Chunk> draw(const std::vector<std::shared_ptr<const Episode>>& pool, int count, int length, Rng& rng) {
    std::vector<Chunk> out;
    out.reserve(static_cast<std::size_t>(std::max(count, 0)));
    for (int i = 0; i < count; ++i) {
      const auto& ep = pool[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(pool.size())))];
      const int start = static_cast<int>(rng.uniform_int(ep->length() - length + 1));
      out.push_back({ep, start, length});
    }
    return out;
  }

  std::map<std::int64_t, std::shared_ptr<const Episode>> episodes_;
  std::map<TaskId, std::vector<std::int64_t>> by_task_;
  std::map<Family, std::pair<int, ObsSpec>> shapes_;
};

// ---------------------------------------------------------------- persistence
//
// Episode file: text header terminated by a line "end", then three little-endian
// float32 sections (actions T*A, observations T*O, rewards T), row-major.
//
//   RAMA-EPISODE 1
//   id 7
//   task Loco/stand
//   length 100
//   action_dim 1
//   obs_mode vector
//   obs_shape 1 1 2
//   episode_return 93.51
//   end
//
// A buffer directory holds one such file per episode plus manifest.txt:
//
//   RAMA-MANIFEST 1
//   count 2
//   7 episode_7.bin Loco/stand
//   8 episode_8.bin Loco/walk

inline constexpr int kEpisodeFormatVersion = 1;
inline constexpr int kManifestFormatVersion = 1;

namespace io {

inline void put_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

/// Line-oriented cursor over a byte buffer that tracks offsets for diagnostics.
class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }

  std::string line() {
    const auto nl = bytes_.find('\n', pos_);
    if (nl == std::string::npos) throw FormatError("unterminated header line", pos_);
    std::string out = bytes_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return out;
  }

  /// Reads "key value..." and returns the value part.
  std::string field(const std::string& key) {
    const auto at = pos_;
    const std::string l = line();
    if (l.rfind(key + " ", 0) != 0) throw FormatError("expected header field '" + key + "', found '" + l + "'", at);
    return l.substr(key.size() + 1);
  }

  long long integer(const std::string& key) {
    const auto at = pos_;
    const std::string v = field(key);
    try {
      std::size_t used = 0;
      const long long n = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw FormatError("field '" + key + "' is not an integer: '" + v + "'", at);
    }
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace io

inline std::string encode_episode(const Episode& ep) {
  std::string out;
  out += "RAMA-EPISODE " + std::to_string(kEpisodeFormatVersion) + "\n";
  out += "id " + std::to_string(ep.id) + "\n";
  out += "task " + ep.task.str() + "\n";
  out += "length " + std::to_string(ep.length()) + "\n";
  out += "action_dim " + std::to_string(ep.action_dim()) + "\n";
  out += "obs_mode " + to_string(ep.obs_spec.mode) + "\n";
  out += "obs_shape " + std::to_string(ep.obs_spec.height) + " " + std::to_string(ep.obs_spec.width) + " " +
         std::to_string(ep.obs_spec.mode == ObsMode::Pixels ? ep.obs_spec.channels : ep.obs_spec.dim) + "\n";
  out += "episode_return " + format_real(ep.episode_return) + "\n";
  out += "end\n";
  for (Eigen::Index i = 0; i < ep.actions.size(); ++i) io::put_f32(out, ep.actions.data()[i]);
  for (Eigen::Index i = 0; i < ep.observations.size(); ++i) io::put_f32(out, ep.observations.data()[i]);
  for (Eigen::Index i = 0; i < ep.rewards.size(); ++i) io::put_f32(out, ep.rewards(i));
  return out;
}

inline Episode decode_episode(const std::string& bytes) {
  io::HeaderReader rd(bytes);
  const std::string magic = rd.line();
  const auto words = io::split_ws(magic);
  if (words.size() != 2 || words[0] != "RAMA-EPISODE") throw FormatError("not an episode file (bad magic)", 0);
  if (words[1] != std::to_string(kEpisodeFormatVersion))
    throw VersionError("unsupported episode format version '" + words[1] + "'", 0);
  Episode ep;
  ep.id = rd.integer("id");
  {
    const auto at = rd.offset();
    try {
      ep.task = TaskId::parse(rd.field("task"));
    } catch (const ConfigError& e) {
      throw FormatError(std::string("bad task tag: ") + e.what(), at);
    }
  }
  const auto length = rd.integer("length");
  const auto action_dim = rd.integer("action_dim");
  const auto mode_at = rd.offset();
  ObsMode mode;
  try {
    mode = parse_obs_mode(rd.field("obs_mode"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), mode_at);
  }
  const auto shape_at = rd.offset();
  const auto dims = io::split_ws(rd.field("obs_shape"));
  if (dims.size() != 3) throw FormatError("obs_shape needs three integers", shape_at);
  int d[3];
  for (int i = 0; i < 3; ++i) {
    try {
      d[i] = std::stoi(dims[i]);
    } catch (const std::exception&) {
      throw FormatError("obs_shape entry is not an integer", shape_at);
    }
  }
  ep.obs_spec = mode == ObsMode::Pixels ? ObsSpec::pixels(d[0], d[1], d[2]) : ObsSpec::vector(d[2]);
  const auto ret_at = rd.offset();
  double declared_return;
  try {
    declared_return = parse_real(rd.field("episode_return"));
  } catch (const ConfigError&) {
    throw FormatError("episode_return is not a number", ret_at);
  }
  const auto end_at = rd.offset();
  if (rd.line() != "end") throw FormatError("expected 'end' after header", end_at);
  if (length < 0 || action_dim < 0 || ep.obs_spec.dim < 0) throw FormatError("negative dimensions in header", end_at);

  std::size_t pos = rd.offset();
  auto section = [&](const char* name, std::size_t count, float* dst) {
    const std::size_t need = count * 4;
    if (bytes.size() - pos < need)
      throw FormatError(std::string("truncated ") + name + " section: expected " + std::to_string(need) + " bytes, found " +
                            std::to_string(bytes.size() - pos),
                        pos);
    for (std::size_t i = 0; i < count; ++i) dst[i] = io::get_f32(bytes.data() + pos + 4 * i);
    pos += need;
  };
  ep.actions.resize(length, action_dim);
  ep.observations.resize(length, ep.obs_spec.dim);
  ep.rewards.resize(length);
  section("actions", static_cast<std::size_t>(ep.actions.size()), ep.actions.data());
  section("observations", static_cast<std::size_t>(ep.observations.size()), ep.observations.data());
  section("rewards", static_cast<std::size_t>(ep.rewards.size()), ep.rewards.data());
  if (pos != bytes.size()) throw FormatError("trailing bytes after rewards section", pos);
  ep.finalize();
  if (ep.episode_return != declared_return) throw FormatError("episode_return does not match reward section", ret_at);
  return ep;
}

inline void save_episode(const Episode& ep, const std::filesystem::path& file) { io::write_file(file, encode_episode(ep)); }

inline Episode load_episode(const std::filesystem::path& file) { return decode_episode(io::read_file(file)); }

struct ManifestEntry {
  std::int64_t id = -1;
  std::string file;
  std::string task;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  const std::string bytes = io::read_file(dir / "manifest.txt");
  io::HeaderReader rd(bytes);
  const auto words = io::split_ws(rd.line());
  if (words.size() != 2 || words[0] != "RAMA-MANIFEST") throw FormatError("not a buffer manifest (bad magic)", 0);
  if (words[1] != std::to_string(kManifestFormatVersion))
    throw VersionError("unsupported manifest version '" + words[1] + "'", 0);
  const auto count = rd.integer("count");
  std::vector<ManifestEntry> out;
  for (long long i = 0; i < count; ++i) {
    const auto at = rd.offset();
    const auto w = io::split_ws(rd.line());
    if (w.size() != 3) throw FormatError("manifest entry needs 'id file task'", at);
    try {
      out.push_back({std::stoll(w[0]), w[1], w[2]});
    } catch (const std::exception&) {
      throw FormatError("manifest id is not an integer", at);
    }
  }
  return out;
}

/// Writes one file per episode plus the manifest. Episodes are immutable, so with
/// `skip_existing` files already present are not rewritten.
inline void save_buffer(const MultitaskBuffer& buffer, const std::filesystem::path& dir, bool skip_existing = false) {
  std::filesystem::create_directories(dir);
  std::string manifest = "RAMA-MANIFEST " + std::to_string(kManifestFormatVersion) + "\n";
  manifest += "count " + std::to_string(buffer.size()) + "\n";
  for (const auto& [id, ep] : buffer.episodes()) {
    const std::string name = "episode_" + std::to_string(id) + ".bin";
    if (!skip_existing || !std::filesystem::exists(dir / name)) save_episode(*ep, dir / name);
    manifest += std::to_string(id) + " " + name + " " + ep->task.str() + "\n";
  }
  io::write_file(dir / "manifest.txt", manifest);
}

inline MultitaskBuffer load_buffer(const std::filesystem::path& dir) {
  MultitaskBuffer out;
  for (const auto& entry : read_manifest(dir)) {
    Episode ep;
    try {
      ep = load_episode(dir / entry.file);
    } catch (const FormatError& e) {
      throw FormatError(entry.file + ": " + e.message(), e.offset());
    }
    if (ep.id != entry.id || ep.task.str() != entry.task)
      throw DataError("manifest entry for " + entry.file + " disagrees with the file header");
    out.append(std::move(ep));
  }
  return out;
}

}  // namespace rama
