#pragma once

#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moeserve/util/io.hpp"

namespace moeserve {

// A rendered table; the same cells serialize to markdown or CSV so both
// formats carry identical numbers.
struct ReportTable {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string to_md() const {
    std::ostringstream out;
    out << "## " << title << "\n\n|";
    for (const auto& c : columns) out << ' ' << c << " |";
    out << "\n|";
    for (size_t i = 0; i < columns.size(); ++i) out << "---|";
    out << "\n";
    for (const auto& r : rows) {
      out << "|";
      for (const auto& cell : r) out << ' ' << cell << " |";
      out << "\n";
    }
    out << "\n";
    return out.str();
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "# " << title << "\n";
    for (size_t i = 0; i < columns.size(); ++i)
      out << columns[i] << (i + 1 < columns.size() ? "," : "\n");
    for (const auto& r : rows)
      for (size_t i = 0; i < r.size(); ++i) out << r[i] << (i + 1 < r.size() ? "," : "\n");
    out << "\n";
    return out.str();
  }
};

struct RunDigest {
  std::string dir;
  nlohmann::json summary;
  std::map<std::string, std::pair<double, double>> role_avg;  // role -> (cpu, rss)
};

inline std::optional<RunDigest> load_run_dir(const std::string& dir, std::string* err) {
  RunDigest d;
  d.dir = dir;
  auto content = read_file(dir + "/summary.json");
  if (!content) {
    *err = "cannot read " + dir + "/summary.json";
    return std::nullopt;
  }
  d.summary = nlohmann::json::parse(*content, nullptr, false);
  if (d.summary.is_discarded() || !d.summary.is_object()) {
    *err = "corrupt summary: " + dir + "/summary.json";
    return std::nullopt;
  }
  if (auto samples = read_file(dir + "/samples.csv")) {
    std::istringstream in(*samples);
    std::string line;
    std::map<std::string, std::pair<double, double>> sums;
    std::map<std::string, int> counts;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string ts, role, pid, cpu, rss;
      if (!std::getline(ls, ts, ',') || !std::getline(ls, role, ',') ||
          !std::getline(ls, pid, ',') || !std::getline(ls, cpu, ',') ||
          !std::getline(ls, rss, ','))
        continue;
      try {
        sums[role].first += std::stod(cpu);
        sums[role].second += std::stod(rss);
        counts[role]++;
      } catch (...) {
      }
    }
    for (auto& [role, sum] : sums) {
      int n = counts[role];
      if (n > 0) d.role_avg[role] = {sum.first / n, sum.second / n};
    }
  }
  return d;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

// Builds the comparison tables for a set of run directories. Adds a
// block-size table when the inputs span more than one size.
inline std::vector<ReportTable> build_report(const std::vector<RunDigest>& runs) {
  std::vector<ReportTable> tables;

  ReportTable cmp;
  cmp.title = "Strategy comparison";
  cmp.columns = {"run",         "strategy",     "tenants",       "requests",
                 "block size",  "failed",       "mean latency ms", "total param bytes",
                 "per-tenant param bytes", "invocations", "cold starts", "ok"};
  for (const auto& d : runs) {
    const auto& s = d.summary;
    cmp.rows.push_back({
        d.dir,
        s.value("strategy", std::string("?")),
        std::to_string(s["workload"].value("tenants", 0)),
        std::to_string(s["workload"].value("requests", 0)),
        std::to_string(s["config"].value("block_size", 0)),
        std::to_string(s["requests"].value("failed", 0)),
        fmt_double(s["latency_ms"].value("mean", 0.0)),
        std::to_string(s["residency"].value("total_param_bytes", uint64_t{0})),
        fmt_double(s["residency"].value("per_tenant_param_bytes", 0.0)),
        std::to_string(s["counters"].value("invocations", uint64_t{0})),
        std::to_string(s["counters"].value("cold_starts", uint64_t{0})),
        s.value("ok", false) ? "yes" : "no",
    });
  }
  tables.push_back(std::move(cmp));

  ReportTable roles;
  roles.title = "Per-role resource averages";
  roles.columns = {"run", "role", "avg cpu %", "avg rss bytes"};
  for (const auto& d : runs)
    for (const auto& [role, avg] : d.role_avg)
      roles.rows.push_back({d.dir, role, fmt_double(avg.first), fmt_double(avg.second)});
  tables.push_back(std::move(roles));

  std::map<int, const RunDigest*> by_block;
  for (const auto& d : runs)
    by_block[d.summary["config"].value("block_size", 0)] = &d;
  if (by_block.size() > 1) {
    ReportTable sweep;
    sweep.title = "Block-size sweep";
    size_t layers = 0;
    for (const auto& [b, d] : by_block)
      if (d->summary.contains("counters"))
        layers = std::max(layers, d->summary["counters"]["per_layer_invocations"].size());
    sweep.columns = {"block size", "total invocations"};
    for (size_t l = 0; l < layers; ++l)
      sweep.columns.push_back("layer " + std::to_string(l));
    for (const auto& [b, d] : by_block) {
      std::vector<std::string> row = {
          std::to_string(b),
          std::to_string(d->summary["counters"].value("invocations", uint64_t{0}))};
      const auto& per_layer = d->summary["counters"]["per_layer_invocations"];
      for (size_t l = 0; l < layers; ++l)
        row.push_back(l < per_layer.size() ? per_layer[l].dump() : "0");
      sweep.rows.push_back(std::move(row));
    }
    tables.push_back(std::move(sweep));
  }
  return tables;
}

inline std::string render_report(const std::vector<ReportTable>& tables,
                                 const std::string& format) {
  std::ostringstream out;
  for (const auto& t : tables) out << (format == "csv" ? t.to_csv() : t.to_md());
  return out.str();
}

}  // namespace moeserve
