#pragma once

#include <deque>
#include <map>
#include <memory>
#include <set>
#include <thread>
#include <unordered_map>

#include "offmem/dpu_cache.hpp"
#include "offmem/fabric.hpp"
#include "offmem/protocol.hpp"

namespace offmem {

struct DpuConfig {
  bool aggregation = true;
  std::uint32_t max_batch = 32;
  std::uint32_t pipeline_depth = 256;
  std::uint64_t dpu_memory = 1ull << 30;
  // staging reserve keeps cache + in-flight buffers inside dpu_memory
  std::uint64_t staging_bytes_per_slot = 64 * 1024;

  bool dynamic_cache = false;
  CacheTableConfig cache{(1ull << 30) - (256ull * 64 * 1024), 1u << 20, 1};
  std::uint32_t prefetch_degree = 1;
  std::uint32_t hit_window = 1024;
  double hysteresis = 0.05;
  double required_rate = 0.5;  // B_net / B_intra for the adaptive control
};

struct DpuClientStats {
  std::uint64_t requests = 0;
  std::uint64_t responses = 0;
};

struct DpuStats {
  std::uint64_t requests = 0;
  std::uint64_t read_requests = 0;
  std::uint64_t write_requests = 0;
  std::uint64_t responses = 0;
  std::uint64_t write_acks = 0;
  std::uint64_t error_responses = 0;
  std::uint64_t batches_formed = 0;
  std::uint64_t forwarded_reads = 0;
  std::uint64_t server_writes = 0;
  std::uint64_t coalesced_writes = 0;  // requests merged into wider server writes
  std::uint64_t payload_copies = 0;    // forward-path data copies; stays zero
  std::uint64_t parked_on_write = 0;
  std::uint64_t parked_on_fill = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::uint64_t prefetch_fills = 0;
  std::uint64_t prefetch_fill_bytes = 0;
  bool dynamic_enabled = false;
  std::uint64_t disabled_at_lookup = 0;  // 0 = never disabled
  double window_hit_rate = 0.0;
  std::map<std::uint32_t, DpuClientStats> per_client;
};

// Proxy service: consumes host requests from the shared receive queue,
// aggregates them into task batches, forwards through a two-stage pipeline,
// and stages responses back to the requesting client.
class DpuAgent {
 public:
  DpuAgent(Endpoint& host_side, Endpoint& net_side, Endpoint& prefetch_side, EndpointId memd,
           DpuConfig cfg);
  ~DpuAgent();

  void start();
  void shutdown();
  // wait until the service is idle: no queued requests, no in-flight server
  // ops, no pending fills or write-backs
  void quiesce();

  // test hook: gate stage A after its blocking receive so callers can queue
  // a burst that will be drained as one task batch
  void pause_intake();
  void resume_intake();

  void static_load(std::uint16_t region_id, std::uint64_t first_chunk, std::uint64_t n_chunks);

  EndpointId host_endpoint_id() const { return host_ep_.id(); }
  Rkey cache_store_rkey() const { return table_.store_rkey(); }
  DpuStats stats() const;

 private:
  struct DirEntry {
    Rkey rkey = 0;
    std::uint64_t length = 0;
    std::uint32_t chunk_size = 0;
    std::optional<std::uint32_t> writer;
  };
  struct ReadCtx {
    std::uint32_t client = 0;
    std::uint16_t region = 0;
    std::uint64_t page = 0;
    std::uint32_t size = 0;
    std::uint64_t byte_begin = 0;
  };
  struct PendingWrite {
    std::uint16_t region = 0;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    Bytes data;
    std::vector<std::pair<std::uint32_t, std::uint64_t>> acks;  // client, page
    std::vector<ReadCtx> parked_reads;
    std::vector<std::shared_ptr<PendingWrite>> parked_writes;
    bool posted = false;
  };
  struct FillState {
    bool fetching = false;
    bool poisoned = false;
    std::vector<ReadCtx> parked;
  };
  struct InFlight {
    bool is_write = false;
    ReadCtx read;
    std::shared_ptr<PendingWrite> write;
  };

  void stage_a_loop();
  void stage_b_loop();
  void prefetch_loop();

  void handle_control(const Message& msg);
  void process_read(const Message& msg, std::vector<OneSidedOp>* batch,
                    std::vector<OpMeta>* metas);
  void process_write(const Message& msg, std::vector<std::shared_ptr<PendingWrite>>* staged);
  // returns true if the op was posted; false if parked or served from cache.
  // from_intake marks stage-A work subject to pipeline back-pressure
  bool dispatch_read(ReadCtx ctx, std::vector<OneSidedOp>* batch, std::vector<OpMeta>* metas,
                     bool from_intake = false);
  void dispatch_write(std::shared_ptr<PendingWrite> pw, std::vector<OneSidedOp>* batch,
                      std::vector<OpMeta>* metas, bool from_intake = false);
  std::uint64_t register_inflight_locked(std::unique_lock<std::mutex>& lk, InFlight inf,
                                         bool bypass_capacity);
  void serve_from_slot(const ReadCtx& ctx, std::uint32_t slot, std::uint64_t group_begin);
  void respond_data(const ReadCtx& ctx, Bytes data);
  void respond_error(std::uint32_t client, std::uint16_t region, std::uint64_t page, Errc code);
  void complete_write(std::uint64_t tag);
  void complete_read(std::uint64_t tag, Bytes data);
  std::uint64_t group_key(std::uint16_t region, std::uint64_t group) const {
    return (std::uint64_t(region) << 48) | group;
  }

  Endpoint& host_ep_;
  Endpoint& net_ep_;
  Endpoint& prefetch_ep_;
  EndpointId memd_;
  DpuConfig cfg_;

  CacheTable table_;
  RecentList recent_;
  HitRateMonitor monitor_;
  AdaptiveController controller_;

  mutable std::mutex st_mu_;
  std::condition_variable st_cv_;
  std::unordered_map<std::uint16_t, DirEntry> directory_;
  std::vector<std::shared_ptr<PendingWrite>> pending_writes_;
  std::unordered_map<std::uint64_t, FillState> fills_;
  std::deque<std::uint64_t> fill_queue_;
  std::unordered_map<std::uint64_t, InFlight> inflight_;
  std::map<std::uint16_t, protocol::StaticCacheInfo> static_infos_;
  std::set<std::uint32_t> clients_;
  std::vector<ReadCtx> orphaned_;
  DpuStats stats_;
  std::uint64_t next_tag_ = 1;
  bool closing_ = false;
  bool intake_paused_ = false;
  std::atomic<bool> stage_a_busy_{false};

  std::mutex prefetch_io_mu_;  // serializes users of prefetch_ep_
  std::atomic<bool> stop_{false};
  std::thread stage_a_;
  std::thread stage_b_;
  std::thread prefetcher_;
  bool running_ = false;
};

}  // namespace offmem
