#include "offmem/experiment.hpp"

#include <chrono>
#include <filesystem>
#include <sstream>
#include <thread>

#include "offmem/algorithms.hpp"
#include "offmem/dpu_agent.hpp"
#include "offmem/memory_agent.hpp"

namespace offmem::bench {

using nlohmann::json;

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::uint64_t digest_words(const std::vector<std::uint64_t>& v) {
  Bytes b(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); i++) put_u64le(b.data() + i * 8, v[i]);
  return fnv1a64(b);
}

std::uint64_t digest_doubles(const std::vector<double>& v) {
  Bytes b(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); i++) {
    std::uint64_t bits;
    std::memcpy(&bits, &v[i], 8);
    put_u64le(b.data() + i * 8, bits);
  }
  return fnv1a64(b);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  ExperimentSpec s;
  read_field(j, "seed", s.seed);
  read_field(j, "repetitions", s.repetitions);
  read_field(j, "mode", s.mode);
  read_field(j, "cache_mode", s.cache_mode);
  if (j.contains("links")) {
    const json& l = j.at("links");
    if (l.contains("intra")) {
      read_field(l.at("intra"), "bandwidth", s.intra_bandwidth);
      read_field(l.at("intra"), "latency", s.intra_latency);
    }
    if (l.contains("net")) {
      read_field(l.at("net"), "bandwidth", s.net_bandwidth);
      read_field(l.at("net"), "latency", s.net_latency);
    }
  }
  if (j.contains("host")) {
    const json& h = j.at("host");
    read_field(h, "chunk_size_bytes", s.chunk_size);
    read_field(h, "buffer_fraction", s.buffer_fraction);
    read_field(h, "buffer_chunks", s.buffer_chunks);
    read_field(h, "load_threshold", s.load_threshold);
    read_field(h, "low_water", s.low_water);
    read_field(h, "qp_count", s.qp_count);
  }
  if (j.contains("dpu")) {
    const json& d = j.at("dpu");
    read_field(d, "aggregation", s.aggregation);
    read_field(d, "max_batch", s.max_batch);
    read_field(d, "pipeline_depth", s.pipeline_depth);
    read_field(d, "dpu_memory", s.dpu_memory);
    read_field(d, "cache_bytes", s.cache_bytes);
    read_field(d, "entry_bytes", s.entry_bytes);
    read_field(d, "prefetch_degree", s.prefetch_degree);
    read_field(d, "hit_window", s.hit_window);
    read_field(d, "hysteresis", s.hysteresis);
    read_field(d, "static_regions", s.static_regions);
  }
  if (j.contains("app")) {
    const json& a = j.at("app");
    read_field(a, "name", s.app);
    read_field(a, "pr_iters", s.pr_iters);
    read_field(a, "damping", s.damping);
    read_field(a, "source", s.source);
    read_field(a, "radii_sources", s.radii_sources);
    read_field(a, "threads", s.threads);
    read_field(a, "corun_bfs", s.corun_bfs);
  }
  if (j.contains("graph")) {
    const json& g = j.at("graph");
    read_field(g, "generator", s.generator);
    read_field(g, "n", s.n);
    read_field(g, "m", s.m);
    read_field(g, "seed", s.graph_seed);
    read_field(g, "edge_list", s.edge_list);
    read_field(g, "csr_cache", s.csr_cache);
  }
  read_field(j, "work_dir", s.work_dir);
  s.validate();
  return s;
}

json ExperimentSpec::to_json() const {
  json j;
  j["seed"] = seed;
  j["repetitions"] = repetitions;
  j["mode"] = mode;
  j["cache_mode"] = cache_mode;
  j["links"] = {{"intra", {{"bandwidth", intra_bandwidth}, {"latency", intra_latency}}},
                {"net", {{"bandwidth", net_bandwidth}, {"latency", net_latency}}}};
  j["host"] = {{"chunk_size_bytes", chunk_size},     {"buffer_fraction", buffer_fraction},
               {"buffer_chunks", buffer_chunks}, {"load_threshold", load_threshold},
               {"low_water", low_water},       {"qp_count", qp_count}};
  j["dpu"] = {{"aggregation", aggregation},
              {"max_batch", max_batch},
              {"pipeline_depth", pipeline_depth},
              {"dpu_memory", dpu_memory},
              {"cache_bytes", cache_bytes},
              {"entry_bytes", entry_bytes},
              {"prefetch_degree", prefetch_degree},
              {"hit_window", hit_window},
              {"hysteresis", hysteresis},
              {"static_regions", static_regions}};
  j["app"] = {{"name", app},           {"pr_iters", pr_iters},
              {"damping", damping},    {"source", source},
              {"radii_sources", radii_sources}, {"threads", threads},
              {"corun_bfs", corun_bfs}};
  j["graph"] = {{"generator", generator},
                {"n", n},
                {"m", m},
                {"seed", graph_seed},
                {"edge_list", edge_list},
                {"csr_cache", csr_cache}};
  if (!work_dir.empty()) j["work_dir"] = work_dir;
  return j;
}

void ExperimentSpec::apply_override(const std::string& dotted_key, const std::string& value) {
  json j = to_json();
  json* node = &j;
  std::string key = dotted_key;
  std::size_t dot;
  while ((dot = key.find('.')) != std::string::npos) {
    node = &(*node)[key.substr(0, dot)];
    key = key.substr(dot + 1);
  }
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;  // plain string
  (*node)[key] = parsed;
  *this = from_json(j);
}

void ExperimentSpec::validate() const {
  if (mode != "direct" && mode != "offload")
    raise(Errc::config_error, "mode must be direct or offload");
  if (cache_mode != "off" && cache_mode != "static" && cache_mode != "dynamic" &&
      cache_mode != "static+dynamic")
    raise(Errc::config_error, "unknown cache_mode " + cache_mode);
  if (cache_mode != "off" && mode != "offload")
    raise(Errc::config_error, "caching requires offload mode");
  if (generator != "uniform" && generator != "rmat" && generator != "file")
    raise(Errc::config_error, "unknown generator " + generator);
  if (app != "bfs" && app != "pagerank" && app != "components" && app != "radii" && app != "bc")
    raise(Errc::config_error, "unknown app " + app);
  for (auto& r : static_regions)
    if (r != "vertex" && r != "edge")
      raise(Errc::config_error, "static region role must be vertex or edge");
}

namespace {

graph::CsrGraph make_graph(const ExperimentSpec& s) {
  if (!s.csr_cache.empty() && std::filesystem::exists(s.csr_cache))
    return graph::load_csr(s.csr_cache);
  graph::CsrGraph g;
  if (s.generator == "uniform")
    g = graph::generate_uniform(s.n, s.m, s.graph_seed);
  else if (s.generator == "rmat")
    g = graph::generate_rmat(s.n, s.m, s.graph_seed);
  else
    g = graph::load_edge_list(s.edge_list);
  if (!s.csr_cache.empty()) graph::save_csr(g, s.csr_cache);
  return g;
}

struct AppResult {
  std::string digest;
  json details;
};

template <class View>
AppResult run_app(const std::string& name, const View& view, const ExperimentSpec& s) {
  AppResult out;
  if (name == "bfs") {
    auto r = graph::bfs(view, s.source, s.threads);
    out.digest = hex64(fnv1a64(Bytes{}, digest_words(r.level) ^ digest_words(r.parent)));
    std::uint64_t reached = 0;
    for (auto l : r.level)
      if (l != graph::kUnreached) reached++;
    out.details = {{"reached", reached}};
  } else if (name == "pagerank") {
    auto r = graph::pagerank(view, s.damping, s.pr_iters, s.threads);
    out.digest = hex64(digest_doubles(r));
    double sum = 0;
    for (double x : r) sum += x;
    out.details = {{"rank_sum", sum}};
  } else if (name == "components") {
    auto r = graph::components(view, s.threads);
    out.digest = hex64(digest_words(r));
    std::uint64_t roots = 0;
    for (std::uint64_t v = 0; v < r.size(); v++)
      if (r[v] == v) roots++;
    out.details = {{"components", roots}};
  } else if (name == "radii") {
    auto r = graph::radii(view, s.radii_sources, s.seed, s.threads);
    out.digest = hex64(digest_words(r));
    std::uint64_t mx = 0;
    for (auto x : r) mx = std::max(mx, x);
    out.details = {{"max_estimate", mx}};
  } else {
    auto r = graph::betweenness(view, s.source, s.threads);
    out.digest = hex64(digest_doubles(r));
  }
  return out;
}

json counters_to_json(const CounterSnapshot& snap) {
  json j;
  for (const char* name : {"intra", "net"}) {
    const LinkCounters& c = snap.link(name);
    json link;
    link["bytes_on_demand"] = c.bytes_on_demand;
    link["bytes_background"] = c.bytes_background;
    link["bytes_total"] = c.total_bytes();
    link["messages"] = c.messages;
    link["batches"] = c.batches;
    link["modeled_time_sec"] = c.modeled_time_sec;
    j[name] = link;
  }
  return j;
}

json host_stats_to_json(const HostStats& h) {
  return json{{"read_requests", h.read_requests},
              {"direct_reads", h.direct_reads},
              {"static_reads", h.static_reads},
              {"bypass_reads", h.bypass_reads},
              {"buffer_hits", h.buffer_hits},
              {"buffer_misses", h.buffer_misses},
              {"coalesced_misses", h.coalesced_misses},
              {"writebacks", h.writebacks},
              {"proactive_triggers", h.proactive_triggers},
              {"proactive_evictions", h.proactive_evictions}};
}

json run_once(const ExperimentSpec& spec) {
  namespace fs = std::filesystem;
  std::string work = spec.work_dir;
  if (work.empty())
    work = (fs::temp_directory_path() / ("offmem-bench-" + std::to_string(::getpid()))).string();
  fs::create_directories(work);

  FabricConfig fc;
  fc.intra = LinkProfile{spec.intra_bandwidth, spec.intra_latency, "intra"};
  fc.net = LinkProfile{spec.net_bandwidth, spec.net_latency, "net"};
  InProcFabric fabric(fc);

  Endpoint& mem_ep = fabric.create_endpoint(Site::mem, "memd");
  MemoryAgent memd(mem_ep, MemoryAgentConfig{256ull << 30, work});
  memd.start();

  bool offload = spec.mode == "offload";
  bool want_dynamic = spec.cache_mode == "dynamic" || spec.cache_mode == "static+dynamic";
  bool want_static = spec.cache_mode == "static" || spec.cache_mode == "static+dynamic";

  std::unique_ptr<DpuAgent> dpud;
  if (offload) {
    Endpoint& host_side = fabric.create_endpoint(Site::dpu, "dpud-host");
    Endpoint& net_side = fabric.create_endpoint(Site::dpu, "dpud-net");
    Endpoint& pf_side = fabric.create_endpoint(Site::dpu, "dpud-prefetch");
    DpuConfig dc;
    dc.aggregation = spec.aggregation;
    dc.max_batch = spec.max_batch;
    dc.pipeline_depth = spec.pipeline_depth;
    dc.dpu_memory = spec.dpu_memory;
    dc.dynamic_cache = want_dynamic;
    dc.cache = CacheTableConfig{spec.cache_bytes, spec.entry_bytes, spec.seed};
    dc.prefetch_degree = spec.prefetch_degree;
    dc.hit_window = spec.hit_window;
    dc.hysteresis = spec.hysteresis;
    dc.required_rate = required_hit_rate(spec.net_bandwidth, spec.intra_bandwidth);
    dpud = std::make_unique<DpuAgent>(host_side, net_side, pf_side, mem_ep.id(), dc);
    dpud->start();
  }

  graph::CsrGraph csr = make_graph(spec);
  std::uint64_t footprint = (csr.n + 1) * 16 + std::max<std::uint64_t>(csr.m, 1) * 16;
  std::uint64_t buffer_chunks = spec.buffer_chunks;
  if (buffer_chunks == 0) {
    buffer_chunks = std::uint64_t(std::max<double>(
        4.0, std::ceil(spec.buffer_fraction * double(footprint) / double(spec.chunk_size))));
  }

  HostConfig hc;
  hc.mode = offload ? AccessMode::offload : AccessMode::direct;
  hc.chunk_size = spec.chunk_size;
  hc.buffer_chunks = buffer_chunks;
  hc.load_threshold = spec.load_threshold;
  hc.low_water = spec.low_water;
  hc.qp_count = spec.qp_count;

  EndpointId peer = offload ? dpud->host_endpoint_id() : mem_ep.id();
  unsigned n_clients = spec.corun_bfs ? 2 : 1;
  std::vector<Endpoint*> client_eps;
  std::vector<std::unique_ptr<HostSession>> sessions;
  std::vector<graph::FamGraph> graphs;
  for (unsigned i = 0; i < n_clients; i++) {
    Endpoint& ep = fabric.create_endpoint(Site::host, "client" + std::to_string(i));
    client_eps.push_back(&ep);
    sessions.push_back(std::make_unique<HostSession>(ep, peer, hc, mem_ep.id()));
    graphs.push_back(graph::upload_graph_via_files(*sessions.back(), csr, work,
                                                   "g" + std::to_string(spec.graph_seed)));
  }

  fabric.reset_counters();
  auto t0 = std::chrono::steady_clock::now();

  if (want_static) {
    for (auto& role : spec.static_regions) {
      std::vector<const FamHandle*> handles;
      if (role == "vertex")
        handles = {&graphs[0].offsets, &graphs[0].in_offsets};
      else
        handles = {&graphs[0].edges, &graphs[0].in_edges};
      for (auto* h : handles) dpud->static_load(h->region_id, 0, h->chunk_count());
    }
    // routes are pushed asynchronously; wait until every session has them
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    for (auto& s : sessions) {
      for (auto& role : spec.static_regions) {
        const graph::FamGraph& g = graphs[0];
        std::vector<std::uint16_t> ids =
            role == "vertex"
                ? std::vector<std::uint16_t>{g.offsets.region_id, g.in_offsets.region_id}
                : std::vector<std::uint16_t>{g.edges.region_id, g.in_edges.region_id};
        for (auto id : ids)
          while (!s->has_static_route(id)) {
            if (std::chrono::steady_clock::now() > deadline)
              raise(Errc::remote_error, "static route push timed out");
            std::this_thread::sleep_for(std::chrono::microseconds(200));
          }
      }
    }
  }

  AppResult app_result;
  AppResult corun_result;
  {
    std::thread corun;
    if (spec.corun_bfs) {
      corun = std::thread([&] {
        graph::FamView v(*sessions[1], graphs[1]);
        ExperimentSpec bg = spec;
        bg.app = "bfs";
        corun_result = run_app("bfs", v, bg);
      });
    }
    graph::FamView v(*sessions[0], graphs[0]);
    app_result = run_app(spec.app, v, spec);
    if (corun.joinable()) corun.join();
  }

  for (auto& s : sessions) s->flush();
  if (dpud) dpud->quiesce();
  auto t1 = std::chrono::steady_clock::now();

  CounterSnapshot snap = fabric.counters();

  json run;
  run["wall_time_sec"] = std::chrono::duration<double>(t1 - t0).count();
  run["links"] = counters_to_json(snap);
  double mt = 0;
  json mts;
  for (const char* name : {"intra", "net"}) {
    mts[name] = snap.link(name).modeled_time_sec;
    mt += snap.link(name).modeled_time_sec;
  }
  mts["total"] = mt;
  run["modeled_time_sec"] = mts;

  json clients = json::object();
  for (auto* ep : client_eps) {
    json per;
    for (const char* name : {"intra", "net"}) {
      const LinkCounters& c = snap.link(name);
      auto it = c.client_bytes.find(ep->id());
      per[std::string(name) + "_bytes"] = it == c.client_bytes.end() ? 0 : it->second;
    }
    clients[std::to_string(ep->id())] = per;
  }
  run["clients"] = clients;

  json hosts = json::array();
  for (auto& s : sessions) hosts.push_back(host_stats_to_json(s->stats()));
  run["hosts"] = hosts;

  if (dpud) {
    DpuStats d = dpud->stats();
    run["cache"] = {{"hits", d.cache_hits},
                    {"misses", d.cache_misses},
                    {"prefetch_fills", d.prefetch_fills},
                    {"prefetch_fill_bytes", d.prefetch_fill_bytes},
                    {"window_hit_rate", d.window_hit_rate},
                    {"dynamic_enabled", d.dynamic_enabled},
                    {"disabled_at_lookup", d.disabled_at_lookup}};
    run["proxy"] = {{"requests", d.requests},
                    {"responses", d.responses},
                    {"batches_formed", d.batches_formed},
                    {"forwarded_reads", d.forwarded_reads},
                    {"server_writes", d.server_writes},
                    {"coalesced_writes", d.coalesced_writes},
                    {"error_responses", d.error_responses},
                    {"payload_copies", d.payload_copies}};
  }

  json outputs;
  outputs["app"] = app_result.digest;
  if (!app_result.details.is_null()) outputs["app_details"] = app_result.details;
  if (spec.corun_bfs) outputs["corun"] = corun_result.digest;
  run["outputs"] = outputs;

  for (std::size_t i = 0; i < sessions.size(); i++) graph::free_graph(*sessions[i], graphs[i]);
  for (auto& s : sessions) s->close();
  if (dpud) dpud->shutdown();
  memd.stop();
  return run;
}

}  // namespace

json run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  json report;
  report["schema_version"] = 1;
  report["spec"] = spec.to_json();
  json runs = json::array();
  for (std::uint32_t r = 0; r < std::max<std::uint32_t>(1, spec.repetitions); r++)
    runs.push_back(run_once(spec));
  report["runs"] = runs;
  return report;
}

// ---- comparisons ----

namespace {

double metric(const json& report, const std::string& name) {
  const json& run = report.at("runs").at(0);
  if (name == "net_bytes_total") return run.at("links").at("net").value("bytes_total", 0.0);
  if (name == "net_bytes_on_demand")
    return run.at("links").at("net").value("bytes_on_demand", 0.0);
  if (name == "intra_bytes_total") return run.at("links").at("intra").value("bytes_total", 0.0);
  if (name == "modeled_time_sec") return run.at("modeled_time_sec").value("total", 0.0);
  if (name == "wall_time_sec") return run.value("wall_time_sec", 0.0);
  if (name == "hit_rate") {
    if (!run.contains("cache")) return 0.0;
    return run.at("cache").value("window_hit_rate", 0.0);
  }
  return 0.0;
}

}  // namespace

json compare_reports(const std::vector<json>& reports) {
  if (reports.size() < 2) raise(Errc::invalid_argument, "need at least two reports");
  const json& base_spec = reports[0].at("spec");
  for (auto& r : reports) {
    const json& s = r.at("spec");
    if (s.at("app") != base_spec.at("app") || s.at("graph") != base_spec.at("graph"))
      raise(Errc::invalid_argument, "reports compare different applications or graphs");
  }
  static const char* metrics[] = {"net_bytes_total", "net_bytes_on_demand", "intra_bytes_total",
                                  "modeled_time_sec", "wall_time_sec", "hit_rate"};
  json rows = json::array();
  for (auto* name : metrics) {
    double base = metric(reports[0], name);
    json values = json::array();
    json ratios = json::array();
    json reductions = json::array();
    for (auto& r : reports) {
      double v = metric(r, name);
      values.push_back(v);
      ratios.push_back(base == 0.0 ? (v == 0.0 ? 1.0 : 0.0) : v / base);
      reductions.push_back(base == 0.0 ? 0.0 : 1.0 - v / base);
    }
    rows.push_back(
        {{"metric", name}, {"values", values}, {"ratio", ratios}, {"reduction", reductions}});
  }
  json out;
  out["app"] = base_spec.at("app").at("name");
  out["reports"] = reports.size();
  out["modes"] = json::array();
  for (auto& r : reports)
    out["modes"].push_back(std::string(r.at("spec").at("mode").get<std::string>()) + "/" +
                           std::string(r.at("spec").at("cache_mode").get<std::string>()));
  out["rows"] = rows;
  return out;
}

std::string render_comparison(const json& cmp, const std::string& format) {
  std::ostringstream os;
  const json& rows = cmp.at("rows");
  if (format == "csv") {
    os << "metric";
    for (auto& m : cmp.at("modes")) os << "," << m.get<std::string>();
    os << "\n";
    for (auto& row : rows) {
      os << row.at("metric").get<std::string>();
      for (auto& v : row.at("values")) os << "," << v.get<double>();
      os << "\n";
      os << row.at("metric").get<std::string>() << "_ratio";
      for (auto& v : row.at("ratio")) os << "," << v.get<double>();
      os << "\n";
    }
    return os.str();
  }
  os << "comparison of " << cmp.at("reports").get<std::size_t>() << " reports ("
     << cmp.at("app").get<std::string>() << ")\n";
  for (auto& row : rows) {
    os << "  " << row.at("metric").get<std::string>() << ":";
    auto& vals = row.at("values");
    auto& ratios = row.at("ratio");
    for (std::size_t i = 0; i < vals.size(); i++) {
      os << " " << vals[i].get<double>();
      if (i > 0) os << " (x" << ratios[i].get<double>() << ")";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace offmem::bench
