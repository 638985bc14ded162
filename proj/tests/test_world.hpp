#pragma once

// Shared in-process test rig: one memory agent, an optional proxy, and
// client endpoints on demand.

#include <filesystem>
#include <memory>

#include "offmem/dpu_agent.hpp"
#include "offmem/host_agent.hpp"
#include "offmem/memory_agent.hpp"

namespace offmem::testing {

struct World {
  explicit World(FabricConfig fc = {}, bool with_dpu = false, DpuConfig dc = {},
                 MemoryAgentConfig mc = {})
      : fabric(fc) {
    mem_ep = &fabric.create_endpoint(Site::mem, "memd");
    memd = std::make_unique<MemoryAgent>(*mem_ep, mc);
    memd->start();
    if (with_dpu) {
      dpu_host_ep = &fabric.create_endpoint(Site::dpu, "dpud-host");
      dpu_net_ep = &fabric.create_endpoint(Site::dpu, "dpud-net");
      dpu_pf_ep = &fabric.create_endpoint(Site::dpu, "dpud-prefetch");
      dpud = std::make_unique<DpuAgent>(*dpu_host_ep, *dpu_net_ep, *dpu_pf_ep, mem_ep->id(), dc);
      dpud->start();
    }
  }

  ~World() {
    sessions.clear();
    if (dpud) dpud->shutdown();
    memd->stop();
  }

  Endpoint& client_endpoint(const std::string& name = "client") {
    return fabric.create_endpoint(Site::host, name);
  }

  HostSession& session(HostConfig hc) {
    Endpoint& ep = client_endpoint("client" + std::to_string(sessions.size()));
    if (hc.mode == AccessMode::offload && !dpud)
      throw std::logic_error("offload session without a proxy");
    EndpointId peer = hc.mode == AccessMode::offload ? dpud->host_endpoint_id() : mem_ep->id();
    sessions.push_back(std::make_unique<HostSession>(ep, peer, hc, mem_ep->id()));
    return *sessions.back();
  }

  InProcFabric fabric;
  Endpoint* mem_ep = nullptr;
  Endpoint* dpu_host_ep = nullptr;
  Endpoint* dpu_net_ep = nullptr;
  Endpoint* dpu_pf_ep = nullptr;
  std::unique_ptr<MemoryAgent> memd;
  std::unique_ptr<DpuAgent> dpud;
  std::vector<std::unique_ptr<HostSession>> sessions;
};

inline std::string temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("offmem-test-" + tag);
  std::filesystem::create_directories(p);
  return p.string();
}

inline Bytes pattern_bytes(std::uint64_t seed, std::size_t n) {
  SplitMix64 rng(seed);
  Bytes b(n);
  for (auto& x : b) x = std::uint8_t(rng.next());
  return b;
}

}  // namespace offmem::testing
