#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "offmem/dpu_agent.hpp"
#include "offmem/fabric_tcp.hpp"

// Standalone proxy daemon: hosts connect to --listen, data is forwarded to
// the memory agent at --mem.

namespace {
volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"proxy agent"};
  std::string listen = "127.0.0.1:7471";
  std::string mem = "127.0.0.1:7470";
  bool dynamic_cache = false;
  bool no_aggregation = false;
  std::uint64_t dpu_memory = 1ull << 30;
  std::uint64_t cache_bytes = (1ull << 30) - (256ull * 64 * 1024);
  std::uint32_t entry_bytes = 1u << 20;
  std::uint32_t prefetch_degree = 1;
  double required_rate = 0.5;
  app.add_option("--listen", listen, "bind address for host agents");
  app.add_option("--mem", mem, "memory agent address");
  app.add_flag("--dynamic", dynamic_cache, "enable dynamic caching");
  app.add_flag("--no-aggregation", no_aggregation, "disable task aggregation");
  app.add_option("--dpu-memory", dpu_memory, "memory budget in bytes");
  app.add_option("--cache-bytes", cache_bytes, "cache store size in bytes");
  app.add_option("--entry-bytes", entry_bytes, "cache entry size in bytes");
  app.add_option("--prefetch-degree", prefetch_degree, "groups prefetched ahead");
  app.add_option("--required-rate", required_rate, "hit rate threshold for adaptive control");
  CLI11_PARSE(app, argc, argv);

  try {
    offmem::TcpFabric fabric;
    offmem::Endpoint& host_side = fabric.listen(offmem::Site::dpu, listen);
    offmem::Endpoint& net_side = fabric.connect(offmem::Site::dpu, mem, offmem::Site::mem);
    offmem::Endpoint& pf_side = fabric.connect(offmem::Site::dpu, mem, offmem::Site::mem);
    offmem::DpuConfig cfg;
    cfg.aggregation = !no_aggregation;
    cfg.dynamic_cache = dynamic_cache;
    cfg.dpu_memory = dpu_memory;
    cfg.cache = offmem::CacheTableConfig{cache_bytes, entry_bytes, 1};
    cfg.prefetch_degree = prefetch_degree;
    cfg.required_rate = required_rate;
    offmem::DpuAgent agent(host_side, net_side, pf_side, fabric.peer_id(net_side), cfg);
    agent.start();
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "dpud listening on " << listen << " (port " << fabric.bound_port(host_side)
              << "), memory agent at " << mem << "\n";
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    agent.shutdown();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "dpud: " << e.what() << "\n";
    return 1;
  }
}
