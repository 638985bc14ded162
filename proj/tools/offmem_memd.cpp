#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "offmem/fabric_tcp.hpp"
#include "offmem/memory_agent.hpp"

// Standalone memory-node daemon over the TCP fabric backend.

namespace {
volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"memory-node agent"};
  std::string listen = "127.0.0.1:7470";
  std::uint64_t capacity = 256ull << 30;
  std::string data_dir;
  app.add_option("--listen", listen, "bind address host:port");
  app.add_option("--capacity", capacity, "logical capacity in bytes");
  app.add_option("--data-dir", data_dir, "directory for file-backed regions");
  CLI11_PARSE(app, argc, argv);

  try {
    offmem::TcpFabric fabric;
    offmem::Endpoint& ep = fabric.listen(offmem::Site::mem, listen);
    offmem::MemoryAgent agent(ep, {capacity, data_dir});
    agent.start();
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "memd listening on " << listen << " (port " << fabric.bound_port(ep) << ")\n";
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    agent.stop();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "memd: " << e.what() << "\n";
    return 1;
  }
}
