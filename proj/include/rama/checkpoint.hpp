#pragma once

// Model checkpoints: config echo, run counters and named float32 tensors.
//
//   RAMACKPT 1
//   config <byte count>
//   <config text>
//   meta <key> <integer>        (repeated)
//   tensors <count>
//   tensor <name> <rows> <cols>
//   <rows*cols little-endian float32, row-major>
//   ...

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rama/episode_store.hpp"
#include "rama/nn.hpp"

namespace rama {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::string config_text;
  std::map<std::string, std::int64_t> meta;
  std::vector<std::pair<std::string, Eigen::MatrixXf>> tensors;

  std::int64_t meta_or(const std::string& key, std::int64_t fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }

  const Eigen::MatrixXf* find(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return &m;
    return nullptr;
  }

  template <class T>
  void store(const nn::ParameterStore<T>& params) {
    for (const auto& [name, var] : params.entries()) tensors.emplace_back(name, var.value().template cast<float>());
  }

  /// Copies every tensor of `params` from the checkpoint; missing names and shape
  /// mismatches are DataErrors.
  template <class T>
  void restore(nn::ParameterStore<T>& params) const {
    for (auto& [name, var] : params.entries()) {
      const Eigen::MatrixXf* m = find(name);
      if (!m) throw DataError("checkpoint lacks tensor '" + name + "'");
      if (m->rows() != var.rows() || m->cols() != var.cols())
        throw DataError("checkpoint tensor '" + name + "' has shape " + std::to_string(m->rows()) + "x" +
                        std::to_string(m->cols()) + ", model expects " + std::to_string(var.rows()) + "x" +
                        std::to_string(var.cols()));
      Var<T> v = var;
      v.mutable_value() = m->template cast<T>();
    }
  }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "RAMACKPT " + std::to_string(kCheckpointFormatVersion) + "\n";
  out += "config " + std::to_string(ck.config_text.size()) + "\n" + ck.config_text;
  for (const auto& [k, v] : ck.meta) {
    if (k.empty() || k.find_first_of(" \n") != std::string::npos) throw UsageError("bad checkpoint meta key '" + k + "'");
    out += "meta " + k + " " + std::to_string(v) + "\n";
  }
  out += "tensors " + std::to_string(ck.tensors.size()) + "\n";
  for (const auto& [name, m] : ck.tensors) {
    if (name.empty() || name.find_first_of(" \n") != std::string::npos)
      throw UsageError("bad tensor name '" + name + "'");
    out += "tensor " + name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) io::put_f32(out, m(i, j));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  io::HeaderReader rd(bytes);
  const auto magic = io::split_ws(rd.line());
  if (magic.size() != 2 || magic[0] != "RAMACKPT") throw FormatError("not a checkpoint file (bad magic)", 0);
  if (magic[1] != std::to_string(kCheckpointFormatVersion))
    throw VersionError("unsupported checkpoint format version '" + magic[1] + "'", 0);
  Checkpoint ck;
  const auto cfg_at = rd.offset();
  const auto cfg_size = rd.integer("config");
  const std::size_t cfg_pos = rd.offset();
  if (cfg_size < 0 || bytes.size() - cfg_pos < static_cast<std::size_t>(cfg_size))
    throw FormatError("truncated config echo", cfg_at);
  ck.config_text = bytes.substr(cfg_pos, static_cast<std::size_t>(cfg_size));

  // Continue line parsing after the config block.
  const std::string rest = bytes.substr(cfg_pos + static_cast<std::size_t>(cfg_size));
  const std::size_t base = cfg_pos + static_cast<std::size_t>(cfg_size);
  io::HeaderReader body(rest);
  long long count = -1;
  for (;;) {
    const auto at = base + body.offset();
    const std::string l = body.line();
    const auto w = io::split_ws(l);
    const bool is_meta = w.size() == 3 && w[0] == "meta";
    const bool is_count = w.size() == 2 && w[0] == "tensors";
    if (!is_meta && !is_count) throw FormatError("unexpected checkpoint line '" + l + "'", at);
    long long v = 0;
    try {
      std::size_t used = 0;
      v = std::stoll(w.back(), &used);
      if (used != w.back().size()) throw std::invalid_argument(w.back());
    } catch (const std::exception&) {
      throw FormatError("'" + w[0] + "' value is not an integer", at);
    }
    if (is_meta) {
      ck.meta[w[1]] = v;
      continue;
    }
    if (v < 0) throw FormatError("negative tensor count", at);
    count = v;
    break;
  }
  {
    std::size_t pos = body.offset();
    for (long long k = 0; k < count; ++k) {
      const auto nl2 = rest.find('\n', pos);
      if (nl2 == std::string::npos) throw FormatError("truncated tensor header", base + pos);
      const auto h = io::split_ws(rest.substr(pos, nl2 - pos));
      long long r = -1, c = -1;
      try {
        if (h.size() != 4 || h[0] != "tensor") throw std::invalid_argument("header");
        r = std::stoll(h[2]);
        c = std::stoll(h[3]);
      } catch (const std::exception&) {
        throw FormatError("malformed tensor header", base + pos);
      }
      if (r < 0 || c < 0) throw FormatError("negative tensor shape", base + pos);
      pos = nl2 + 1;
      const std::size_t need = static_cast<std::size_t>(r * c) * 4;
      if (rest.size() - pos < need)
        throw FormatError("truncated tensor '" + h[1] + "': expected " + std::to_string(need) + " bytes", base + pos);
      Eigen::MatrixXf m(r, c);
      for (long long i = 0; i < r; ++i)
        for (long long j = 0; j < c; ++j) m(i, j) = io::get_f32(rest.data() + pos + 4 * (i * c + j));
      pos += need;
      ck.tensors.emplace_back(h[1], std::move(m));
    }
    if (pos != rest.size()) throw FormatError("trailing bytes after last tensor", base + pos);
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& file) {
  // Write-then-rename so a crash never leaves a half-written checkpoint behind.
  const auto tmp = file.string() + ".tmp";
  io::write_file(tmp, encode_checkpoint(ck));
  std::filesystem::rename(tmp, file);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& file) {
  return decode_checkpoint(io::read_file(file));
}

}  // namespace rama
