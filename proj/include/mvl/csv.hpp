#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "mvl/error.hpp"
#include "mvl/metrics.hpp"

// Plain comma-separated files without quoting: the predictions table and the
// rater score table.

namespace mvl {

inline constexpr const char* kPredictionsHeader =
    "study_id,pred_rca,pred_lca,pred_total,pred_nonzero,gt_rca,gt_lca,gt_total";

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (s.empty() || res.ec != std::errc() || res.ptr != end) throw ValidationError(where + ": not a number: \"" + s + "\"");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Reads non-empty lines, stripping a trailing carriage return.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline std::string prediction_row(const metrics::PredictionRecord& r) {
  if (r.study_id.find(',') != std::string::npos) throw ValidationError("study id contains a comma: " + r.study_id);
  return r.study_id + "," + format_double(r.pred_rca) + "," + format_double(r.pred_lca) + "," +
         format_double(r.pred_total) + "," + (r.pred_nonzero ? "1" : "0") + "," + format_double(r.gt_rca) + "," +
         format_double(r.gt_lca) + "," + format_double(r.gt_total);
}

inline void write_predictions_csv(const std::filesystem::path& path, const std::vector<metrics::PredictionRecord>& recs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << kPredictionsHeader << "\n";
  for (const auto& r : recs) out << prediction_row(r) << "\n";
  if (!out) throw RuntimeError("failed writing " + path.string());
}

inline std::vector<metrics::PredictionRecord> read_predictions_csv(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines.front() != kPredictionsHeader) {
    throw SchemaError(path.string() + ": predictions header must be exactly " + kPredictionsHeader);
  }
  std::vector<metrics::PredictionRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = path.filename().string() + ":" + std::to_string(i + 1);
    const auto c = split_csv_line(lines[i]);
    if (c.size() != 8) throw ValidationError(where + ": expected 8 columns, got " + std::to_string(c.size()));
    if (c[4] != "0" && c[4] != "1") throw ValidationError(where + ": pred_nonzero must be 0 or 1");
    metrics::PredictionRecord r;
    r.study_id = c[0];
    r.pred_rca = parse_double(c[1], where);
    r.pred_lca = parse_double(c[2], where);
    r.pred_total = parse_double(c[3], where);
    r.pred_nonzero = c[4] == "1";
    r.gt_rca = parse_double(c[5], where);
    r.gt_lca = parse_double(c[6], where);
    r.gt_total = parse_double(c[7], where);
    out.push_back(r);
  }
  return out;
}

/// Rater table: header `study_id,<rater>,<rater>...`, one row per study.
/// Every rater must score every study; empty cells are reported by id.
inline std::vector<metrics::Rater> read_rater_csv(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw SchemaError(path.string() + ": empty rater table");
  const auto header = split_csv_line(lines.front());
  if (header.empty() || header.front() != "study_id") throw SchemaError(path.string() + ": first column must be study_id");
  if (header.size() < 3) throw ValidationError("agreement needs at least two rater columns");
  std::vector<metrics::Rater> raters;
  std::set<std::string> names;
  for (std::size_t k = 1; k < header.size(); ++k) {
    if (header[k].empty() || !names.insert(header[k]).second) {
      throw SchemaError(path.string() + ": rater names must be unique and non-empty");
    }
    raters.push_back({header[k], {}});
  }
  std::map<std::string, std::vector<std::string>> missing;  // rater -> study ids
  std::set<std::string> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = path.filename().string() + ":" + std::to_string(i + 1);
    auto c = split_csv_line(lines[i]);
    if (c.size() > header.size()) throw ValidationError(where + ": too many columns");
    c.resize(header.size());
    if (c[0].empty()) throw ValidationError(where + ": empty study_id");
    if (!seen.insert(c[0]).second) throw ValidationError(where + ": duplicate study_id " + c[0]);
    for (std::size_t k = 1; k < header.size(); ++k) {
      if (c[k].empty()) {
        missing[header[k]].push_back(c[0]);
        continue;
      }
      raters[k - 1].scores.push_back(parse_double(c[k], where));
    }
  }
  if (!missing.empty()) {
    std::string msg = "raters do not share all study ids:";
    for (const auto& [name, ids] : missing) {
      msg += " " + name + " missing";
      for (const auto& id : ids) msg += " " + id;
      msg += ";";
    }
    throw ValidationError(msg);
  }
  return raters;
}

}  // namespace mvl
