#pragma once

#include <condition_variable>
#include <list>
#include <optional>
#include <thread>
#include <unordered_map>

#include "offmem/fabric.hpp"
#include "offmem/protocol.hpp"

namespace offmem {

enum class AccessMode : std::uint8_t { direct = 0, offload = 1 };

struct HostConfig {
  AccessMode mode = AccessMode::offload;
  std::uint32_t chunk_size = 64 * 1024;
  std::uint64_t buffer_chunks = 1024;
  double load_threshold = 0.9;  // >= 1.0 degenerates to evict-on-full
  double low_water = 0.8;
  std::uint32_t qp_count = 4;  // submission lanes; parallelism knob only
};

struct FamHandle {
  std::uint16_t region_id = 0;
  std::uint64_t length = 0;
  bool writable = false;
  std::uint32_t chunk_size = 0;
  Rkey rkey = 0;
  bool valid() const { return region_id != 0; }
  std::uint64_t chunk_count() const { return (length + chunk_size - 1) / chunk_size; }
};

struct HostStats {
  std::uint64_t read_requests = 0;  // two-sided requests toward the proxy
  std::uint64_t direct_reads = 0;   // one-sided fetches from the memory node
  std::uint64_t static_reads = 0;   // one-sided fetches from the proxy cache
  std::uint64_t bypass_reads = 0;   // static-mode misses routed around the proxy
  std::uint64_t buffer_hits = 0;
  std::uint64_t buffer_misses = 0;
  std::uint64_t coalesced_misses = 0;  // waited on another thread's fetch
  std::uint64_t writebacks = 0;
  std::uint64_t proactive_triggers = 0;
  std::uint64_t proactive_evictions = 0;
};

// Client-side runtime: allocations plus an interposed read/write path over a
// unified chunk buffer shared by every FAM-backed object.
class HostSession {
 public:
  // `peer` is the proxy endpoint in offload mode, the memory agent in direct
  // mode. `mem_peer` enables the static-mode bypass route in offload mode.
  HostSession(Endpoint& ep, EndpointId peer, HostConfig cfg,
              std::optional<EndpointId> mem_peer = std::nullopt);
  ~HostSession();

  FamHandle fam_alloc(std::uint64_t length, std::optional<std::string> file, bool writable);
  void fam_free(FamHandle& h);

  void fam_read(const FamHandle& h, std::uint64_t offset, std::span<std::uint8_t> out);
  Bytes fam_read(const FamHandle& h, std::uint64_t offset, std::uint64_t len);
  void fam_write(const FamHandle& h, std::uint64_t offset, ByteSpan data);

  // write back all dirty chunks and wait until they are durable
  void flush();
  void close();

  std::uint32_t client_id() const { return ep_.id(); }
  AccessMode mode() const { return cfg_.mode; }
  HostStats stats() const;
  std::uint64_t resident_chunks() const;
  bool has_static_route(std::uint16_t region_id) const;

 private:
  struct ChunkKey {
    std::uint16_t region;
    std::uint64_t index;
    bool operator==(const ChunkKey&) const = default;
  };
  struct ChunkKeyHash {
    std::size_t operator()(const ChunkKey& k) const {
      return std::hash<std::uint64_t>()((std::uint64_t(k.region) << 48) ^ k.index);
    }
  };
  struct BufferEntry {
    Bytes data;
    bool dirty = false;
    bool filling = false;
    bool failed = false;
    Errc err = Errc::ok;
    std::uint32_t waiters = 0;
    std::list<ChunkKey>::iterator lru_it;
  };
  struct RegionMeta {
    std::uint64_t length = 0;
    std::uint32_t chunk_size = 0;
    Rkey rkey = 0;
    bool writable = false;
  };
  struct StaticRoute {
    std::uint64_t covered_begin = 0;
    std::uint64_t covered_end = 0;
    std::uint64_t store_offset = 0;
    Rkey cache_rkey = 0;
  };
  using EntryMap = std::unordered_map<ChunkKey, BufferEntry, ChunkKeyHash>;

  protocol::ControlMessage control_rpc(const protocol::ControlMessage& req);
  void receiver_loop();
  void evictor_loop();

  std::uint32_t chunk_bytes(const ChunkKey& key) const;
  // returns a ready entry; lk is held on return
  EntryMap::iterator ensure_resident(std::unique_lock<std::mutex>& lk, const ChunkKey& key,
                                     bool fetch_contents);
  void evict_one(std::unique_lock<std::mutex>& lk);  // evicts the lru victim
  void write_back(const ChunkKey& key, Bytes data);  // called unlocked
  void touch(BufferEntry& e, const ChunkKey& key);
  void unmark_wb_pending(const ChunkKey& key);
  void maybe_trigger_proactive();

  Endpoint& ep_;
  EndpointId peer_;
  std::optional<EndpointId> mem_peer_;
  HostConfig cfg_;

  mutable std::mutex mu_;
  std::condition_variable cv_;        // entry state changes
  std::condition_variable evict_cv_;  // proactive evictor wakeups
  EntryMap entries_;
  std::list<ChunkKey> lru_;  // front = most recent
  // chunks whose write-back has been detached but not yet handed to the
  // transport; a fetch of such a chunk must not overtake the write-back
  std::unordered_map<ChunkKey, std::uint32_t, ChunkKeyHash> wb_pending_;
  std::unordered_map<std::uint16_t, RegionMeta> regions_;
  std::unordered_map<std::uint16_t, StaticRoute> static_routes_;
  HostStats stats_;
  bool closing_ = false;

  // offload-mode response plumbing
  std::thread receiver_;
  std::thread evictor_;
  std::mutex ctrl_call_mu_;
  std::optional<protocol::ControlMessage> ctrl_reply_;
  std::optional<Errc> ctrl_err_;
  std::condition_variable ctrl_cv_;
  std::uint64_t outstanding_writebacks_ = 0;
  std::condition_variable flush_cv_;
};

}  // namespace offmem
