#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "offmem/experiment.hpp"
#include "offmem/fabric_tcp.hpp"
#include "offmem/host_agent.hpp"

using nlohmann::json;

namespace {

// exercise a running memd (and optionally dpud) over the tcp backend
int run_probe(const std::string& dpu_addr, const std::string& mem_addr) {
  using namespace offmem;
  TcpFabric fabric;
  bool offload = !dpu_addr.empty();
  Endpoint& ep = offload ? fabric.connect(Site::host, dpu_addr, Site::dpu)
                         : fabric.connect(Site::host, mem_addr, Site::mem);
  EndpointId peer = fabric.peer_id(ep);
  std::optional<EndpointId> mem_peer;
  if (offload && !mem_addr.empty())
    mem_peer = fabric.add_peer(ep, mem_addr, Site::mem);

  HostConfig hc;
  hc.mode = offload ? AccessMode::offload : AccessMode::direct;
  hc.chunk_size = 64 * 1024;
  hc.buffer_chunks = 8;
  HostSession s(ep, peer, hc, mem_peer);
  FamHandle h = s.fam_alloc(4 << 20, std::nullopt, true);

  SplitMix64 rng(1);
  Bytes oracle(4 << 20, 0);
  for (int op = 0; op < 200; op++) {
    std::uint64_t off = rng.next_below(oracle.size() - 128 * 1024);
    std::uint64_t len = 1 + rng.next_below(128 * 1024);
    if (op % 3 == 0) {
      Bytes data(len);
      for (auto& b : data) b = std::uint8_t(rng.next());
      s.fam_write(h, off, data);
      std::copy(data.begin(), data.end(), oracle.begin() + off);
    } else {
      Bytes got = s.fam_read(h, off, len);
      if (got != Bytes(oracle.begin() + off, oracle.begin() + off + len)) {
        std::cerr << "probe: data mismatch at offset " << off << "\n";
        return 1;
      }
    }
  }
  s.flush();
  s.fam_free(h);
  s.close();
  auto net = fabric.counters().link(offload ? "intra" : "net");
  std::cout << "probe ok: 200 ops verified, "
            << (offload ? "offload" : "direct") << " mode, "
            << net.total_bytes() << " bytes on the first hop\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"disaggregated-memory benchmark driver"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run one experiment and write a report");
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_path = "report.json";
  run->add_option("--config", config_path, "experiment config (json)");
  run->add_option("--set", overrides, "override a config key, e.g. --set app.name=pagerank");
  run->add_option("--out", out_path, "report output path");

  auto* probe = app.add_subcommand("probe", "verify a running deployment over tcp");
  std::string probe_dpu, probe_mem;
  probe->add_option("--dpu", probe_dpu, "proxy address host:port (omit for direct mode)");
  probe->add_option("--mem", probe_mem, "memory agent address host:port");

  auto* cmp = app.add_subcommand("compare", "compare two or more reports");
  std::vector<std::string> report_paths;
  std::string format = "text";
  cmp->add_option("reports", report_paths, "report files; the first is the baseline")
      ->expected(-2);
  cmp->add_option("--format", format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}));
  std::string cmp_out;
  cmp->add_option("--out", cmp_out, "also write the comparison as json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (probe->parsed()) {
      if (probe_mem.empty() && probe_dpu.empty()) {
        std::cerr << "probe needs --mem (direct) or --dpu plus --mem (offload)\n";
        return 2;
      }
      return run_probe(probe_dpu, probe_mem);
    }
    if (run->parsed()) {
      offmem::bench::ExperimentSpec spec;
      if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) {
          std::cerr << "cannot open " << config_path << "\n";
          return 2;
        }
        spec = offmem::bench::ExperimentSpec::from_json(json::parse(f));
      }
      for (auto& kv : overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) {
          std::cerr << "--set expects key=value, got " << kv << "\n";
          return 2;
        }
        spec.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
      }
      json report = offmem::bench::run_experiment(spec);
      std::ofstream out(out_path);
      out << report.dump(2) << "\n";
      const json& r0 = report["runs"][0];
      std::cout << "app=" << spec.app << " mode=" << spec.mode << "/" << spec.cache_mode
                << " wall=" << r0["wall_time_sec"].get<double>() << "s"
                << " net_bytes=" << r0["links"]["net"].value("bytes_total", 0ull)
                << " intra_bytes=" << r0["links"]["intra"].value("bytes_total", 0ull) << "\n"
                << "report written to " << out_path << "\n";
      return 0;
    }
    std::vector<json> reports;
    for (auto& p : report_paths) {
      std::ifstream f(p);
      if (!f) {
        std::cerr << "cannot open " << p << "\n";
        return 2;
      }
      reports.push_back(json::parse(f));
    }
    json c = offmem::bench::compare_reports(reports);
    std::cout << offmem::bench::render_comparison(c, format);
    if (!cmp_out.empty()) {
      std::ofstream out(cmp_out);
      out << c.dump(2) << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
