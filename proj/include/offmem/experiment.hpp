#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "offmem/graph.hpp"

namespace offmem::bench {

struct ExperimentSpec {
  std::uint64_t seed = 1;
  std::uint32_t repetitions = 1;
  std::string mode = "offload";     // direct | offload
  std::string cache_mode = "off";   // off | static | dynamic | static+dynamic

  // links
  double intra_bandwidth = 12.6e9;
  double intra_latency = 2e-6;
  double net_bandwidth = 6.3e9;
  double net_latency = 5e-6;

  // host agent
  std::uint32_t chunk_size = 64 * 1024;
  double buffer_fraction = 1.0 / 3.0;  // of the graph footprint
  std::uint64_t buffer_chunks = 0;     // 0 = derive from fraction
  double load_threshold = 0.9;
  double low_water = 0.8;
  std::uint32_t qp_count = 4;

  // proxy
  bool aggregation = true;
  std::uint32_t max_batch = 32;
  std::uint32_t pipeline_depth = 256;
  std::uint64_t dpu_memory = 1ull << 30;
  std::uint64_t cache_bytes = 64ull << 20;
  std::uint32_t entry_bytes = 1u << 20;
  std::uint32_t prefetch_degree = 1;
  std::uint32_t hit_window = 1024;
  double hysteresis = 0.05;
  std::vector<std::string> static_regions = {"vertex"};

  // application
  std::string app = "bfs";  // bfs | pagerank | components | radii | bc
  std::uint32_t pr_iters = 10;
  double damping = 0.85;
  std::uint64_t source = 0;
  std::uint32_t radii_sources = 64;
  std::uint32_t threads = 0;  // 0 = hardware
  bool corun_bfs = false;     // second client running bfs on the same graph

  // graph
  std::string generator = "uniform";  // uniform | rmat | file
  std::uint64_t n = 10000;
  std::uint64_t m = 100000;
  std::uint64_t graph_seed = 7;
  std::string edge_list;
  std::string csr_cache;  // binary csr file; loaded when present, written otherwise

  std::string work_dir;  // scratch location; defaults to a temp directory

  static ExperimentSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void apply_override(const std::string& dotted_key, const std::string& value);
  void validate() const;
};

nlohmann::json run_experiment(const ExperimentSpec& spec);

// first report is the baseline; metrics of the others are expressed relative to it
nlohmann::json compare_reports(const std::vector<nlohmann::json>& reports);
std::string render_comparison(const nlohmann::json& cmp, const std::string& format);

}  // namespace offmem::bench
