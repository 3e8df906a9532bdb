#pragma once

// Metric CSV reading, SVG return curves and buffer summaries.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rama/episode_store.hpp"

namespace rama {

struct Curve {
  std::string label;
  std::vector<double> x;  // env steps
  std::vector<double> y;  // episode return
};

/// Reads an episodes CSV (episode_idx, env_steps, return, wall_ms). Malformed rows
/// raise DataError naming the file and line.
inline Curve read_episode_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  Curve c;
  c.label = path.parent_path().filename().string();
  if (c.label.empty() || c.label == ".") c.label = path.stem().string();
  else c.label += "/" + path.stem().string();
  std::string line;
  int lineno = 0;
  int col_steps = -1, col_ret = -1;
  std::size_t ncols = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (col_ret < 0) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i] == "env_steps") col_steps = static_cast<int>(i);
        if (cells[i] == "return") col_ret = static_cast<int>(i);
      }
      if (col_steps < 0 || col_ret < 0)
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": header lacks env_steps/return columns");
      ncols = cells.size();
      continue;
    }
    if (cells.size() != ncols)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(ncols) +
                      " fields, found " + std::to_string(cells.size()));
    try {
      c.x.push_back(parse_real(cells[static_cast<std::size_t>(col_steps)]));
      c.y.push_back(parse_real(cells[static_cast<std::size_t>(col_ret)]));
    } catch (const Error&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": non-numeric field");
    }
  }
  if (col_ret < 0) throw DataError(path.string() + ": empty file");
  return c;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

/// Return curves overlaid in one SVG, with a legend.
inline std::string render_svg(const std::vector<Curve>& curves, const std::string& title = "episode return") {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const double W = 720, H = 420, left = 60, right = 180, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.x.size(); ++i) {
      if (!any) {
        x0 = x1 = c.x[i];
        y0 = y1 = c.y[i];
        any = true;
      }
      x0 = std::min(x0, c.x[i]);
      x1 = std::max(x1, c.x[i]);
      y0 = std::min(y0, c.y[i]);
      y1 = std::max(y1, c.y[i]);
    }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"24\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = y0 + (y1 - y0) * k / 4.0, xv = x0 + (x1 - x0) * k / 4.0;
    o << "<text x=\"" << left - 6 << "\" y=\"" << sy(yv) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
      << format_real(std::round(yv * 10) / 10) << "</text>\n";
    o << "<text x=\"" << sx(xv) << "\" y=\"" << top + ph + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
      << format_real(std::round(xv)) << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" font-size=\"12\" text-anchor=\"middle\">env steps</text>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const char* color = palette[c % (sizeof(palette) / sizeof(palette[0]))];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < curves[c].x.size(); ++i) o << sx(curves[c].x[i]) << ',' << sy(curves[c].y[i]) << ' ';
    o << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(c);
    o << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly - 4
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly << "\" font-size=\"11\">" << xml_escape(curves[c].label)
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

struct BufferSummary {
  std::size_t episodes = 0;
  std::map<std::string, std::size_t> per_task;
  std::vector<double> returns;
  std::vector<std::pair<std::string, std::string>> unreadable;  // file, reason
};

/// Reads a buffer directory tolerantly: unreadable episode files are listed, not fatal.
inline BufferSummary summarize_buffer(const std::filesystem::path& dir) {
  BufferSummary s;
  for (const auto& entry : read_manifest(dir)) {
    try {
      const Episode ep = load_episode(dir / entry.file);
      if (ep.id != entry.id || ep.task.str() != entry.task)
        throw DataError("header disagrees with the manifest entry");
      ++s.episodes;
      ++s.per_task[ep.task.str()];
      s.returns.push_back(ep.episode_return);
    } catch (const Error& e) {
      s.unreadable.emplace_back(entry.file, e.what());
    }
  }
  return s;
}

inline std::string format_summary(const BufferSummary& s, int bins = 10) {
  std::ostringstream o;
  o << s.episodes << " episodes\n";
  for (const auto& [task, count] : s.per_task) o << "  " << task << ": " << count << "\n";
  if (!s.returns.empty()) {
    const auto [lo_it, hi_it] = std::minmax_element(s.returns.begin(), s.returns.end());
    const double lo = *lo_it, hi = *hi_it;
    const double width = hi > lo ? (hi - lo) / bins : 1.0;
    std::vector<std::size_t> hist(static_cast<std::size_t>(bins), 0);
    for (double r : s.returns) {
      auto b = static_cast<std::size_t>(hi > lo ? std::floor((r - lo) / width) : 0);
      hist[std::min(b, hist.size() - 1)]++;
    }
    o << "return histogram\n";
    for (int b = 0; b < bins; ++b) {
      char line[96];
      std::snprintf(line, sizeof(line), "  [%9.2f, %9.2f%c %5zu ", lo + b * width, lo + (b + 1) * width,
                    b + 1 == bins ? ']' : ')', hist[static_cast<std::size_t>(b)]);
      o << line << std::string(std::min<std::size_t>(hist[static_cast<std::size_t>(b)], 60), '#') << "\n";
    }
  }
  if (!s.unreadable.empty()) {
    o << "unreadable\n";
    for (const auto& [file, why] : s.unreadable) o << "  " << file << ": " << why << "\n";
  }
  return o.str();
}

}  // namespace rama
