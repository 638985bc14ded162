#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include "offmem/fabric.hpp"
#include "offmem/protocol.hpp"

namespace offmem {

struct MemoryAgentConfig {
  std::uint64_t capacity_bytes = 256ull << 30;  // logical; backing materializes lazily
  std::string data_dir;                         // base for relative file names
};

struct RegionInfo {
  std::uint16_t region_id = 0;
  Rkey rkey = 0;
  std::uint64_t length = 0;
  std::uint32_t chunk_size = 0;
  std::optional<std::uint32_t> writer;  // client id holding the writable mapping
  std::uint32_t attach_count = 0;
  std::optional<std::string> file_key;
};

// Memory-node service. The data plane is passive: one-sided reads and writes
// land directly on the registered regions. This agent only reserves and frees
// memory and preloads file contents; the service loop handles the control RPCs.
class MemoryAgent {
 public:
  MemoryAgent(Endpoint& ep, MemoryAgentConfig cfg = {});
  ~MemoryAgent();

  void start();
  void stop();

  EndpointId endpoint_id() const { return ep_.id(); }

  struct AllocResult {
    std::uint16_t region_id = 0;
    Rkey rkey = 0;
    bool attached = false;  // joined an existing file-backed region
  };
  AllocResult alloc_region(std::uint64_t length, const std::optional<std::string>& file,
                           bool writable, std::uint32_t client_id, EndpointId requester,
                           std::uint32_t chunk_size);
  bool free_region(std::uint16_t region_id, std::uint32_t client_id);  // true once destroyed

  // data-plane semantics, used directly by in-process callers and tests;
  // a read is a bounds check plus a copy out of the backing store
  Bytes serve_read(std::uint16_t region_id, std::uint64_t chunk_index, std::uint32_t size) const;
  void serve_write(std::uint16_t region_id, std::uint64_t chunk_index, ByteSpan data,
                   std::uint32_t client_id);

  void add_trusted_forwarder(EndpointId ep);

  std::uint64_t capacity_used() const;
  std::optional<RegionInfo> region_info(std::uint16_t region_id) const;
  Bytes region_snapshot(std::uint16_t region_id) const;

 private:
  void service_loop();
  void handle_control(const Message& msg);
  void apply_writer_permissions_locked(std::uint16_t region_id);

  Endpoint& ep_;
  MemoryAgentConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::uint16_t, RegionInfo> regions_;
  std::map<std::string, std::uint16_t> by_file_;
  std::map<std::uint16_t, EndpointId> first_requester_;
  std::set<EndpointId> trusted_;
  std::uint64_t used_ = 0;
  std::uint16_t next_region_ = 1;
  std::thread service_;
  bool running_ = false;
};

}  // namespace offmem
