#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "moeserve/harness/runner.hpp"

namespace moeserve {

struct SweepOptions {
  HarnessOptions base;     // strategy/window applied as given; out_dir ignored
  std::vector<int> sizes;
  std::string out_dir;
};

struct SweepResult {
  bool ok = false;
  nlohmann::ordered_json json;
};

// One run per block size with an identical workload; per-B run directories
// plus joined comparison tables (sweep.csv, sweep.md, sweep.json).
inline SweepResult run_sweep(const SweepOptions& opts) {
  SweepResult result;
  result.ok = true;
  mkdir(opts.out_dir.c_str(), 0755);

  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (int b : opts.sizes) {
    HarnessOptions ho = opts.base;
    ho.rc.block_size = b;
    ho.out_dir = opts.out_dir + "/B" + std::to_string(b);
    RunSummary rs = run_harness(ho);
    if (!rs.ok) result.ok = false;

    nlohmann::ordered_json entry;
    entry["block_size"] = b;
    entry["ok"] = rs.ok;
    entry["dir"] = ho.out_dir;
    entry["per_layer_invocations"] =
        rs.json.contains("counters") ? rs.json["counters"]["per_layer_invocations"]
                                     : nlohmann::ordered_json::array();
    entry["total_invocations"] =
        rs.json.contains("counters") ? rs.json["counters"]["invocations"]
                                     : nlohmann::ordered_json(0);
    // per-function resident bytes of one replica, the per-block granularity cost
    nlohmann::ordered_json block_bytes = nlohmann::ordered_json::object();
    if (rs.json.contains("warm_functions")) {
      block_bytes = rs.json["warm_functions"];
    }
    entry["block_resident_bytes"] = std::move(block_bytes);
    runs.push_back(std::move(entry));
  }

  result.json["strategy"] = strategy_name(opts.base.strategy);
  result.json["sizes"] = opts.sizes;
  result.json["runs"] = runs;

  {
    std::ofstream csv(opts.out_dir + "/sweep.csv");
    csv << "block_size,layer,invocations\n";
    for (const auto& r : runs) {
      int b = r["block_size"].get<int>();
      const auto& per_layer = r["per_layer_invocations"];
      for (size_t l = 0; l < per_layer.size(); ++l)
        csv << b << ',' << l << ',' << per_layer[l] << '\n';
    }
  }
  {
    std::ofstream md(opts.out_dir + "/sweep.md");
    md << "# Block-size sweep (" << strategy_name(opts.base.strategy) << ")\n\n";
    md << "| block size | total invocations |";
    int layers = opts.base.rc.model.num_layers;
    for (int l = 0; l < layers; ++l) md << " layer " << l << " |";
    md << " ok |\n|---|---|";
    for (int l = 0; l < layers; ++l) md << "---|";
    md << "---|\n";
    for (const auto& r : runs) {
      md << "| " << r["block_size"] << " | " << r["total_invocations"] << " |";
      for (const auto& v : r["per_layer_invocations"]) md << " " << v << " |";
      md << " " << (r["ok"].get<bool>() ? "yes" : "no") << " |\n";
    }
  }
  write_file(opts.out_dir + "/sweep.json", result.json.dump(2) + "\n");
  return result;
}

}  // namespace moeserve
