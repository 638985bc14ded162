#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <optional>
#include <thread>
#include <unordered_map>
#include <vector>

#include "offmem/fabric.hpp"
#include "offmem/protocol.hpp"

namespace offmem {

// ---- analytical model for cache selection ----

// Required hit rate for dynamic caching to pay off: B_net / B_intra, clamped
// to [0, 1]. At equal bandwidths the requirement is 1.0 and caching can never win.
double required_hit_rate(double b_net, double b_intra);

struct CacheModel {
  std::uint64_t chunk_bytes = 0;  // s
  double b_net = 0;
  double b_intra = 0;
  double hit_rate = 0;  // h in [0,1]
};

double baseline_fetch_time(const CacheModel& m);  // s / B_net
double expected_fetch_time(const CacheModel& m);  // s/B_intra + (1-h) * s/B_net
bool dynamic_cache_beneficial(const CacheModel& m);

// ---- access history ring ----

class RecentList {
 public:
  static constexpr std::size_t kCapacity = 128;

  void push(std::uint64_t id);
  // blocks until entries newer than *cursor exist (or stop); returns them
  // oldest-first and advances *cursor
  std::vector<std::uint64_t> wait_new(std::uint64_t* cursor, const std::atomic<bool>& stop);
  std::vector<std::uint64_t> snapshot() const;  // last min(128, pushes), oldest-first
  std::uint64_t pushes() const;
  void wake_all();

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::array<std::uint64_t, kCapacity> ring_{};
  std::uint64_t seq_ = 0;
};

// ---- refcount-pinned slot store with random eviction ----

struct CacheTableConfig {
  std::uint64_t cache_bytes = 1ull << 30;
  std::uint32_t entry_bytes = 1u << 20;
  std::uint64_t rng_seed = 1;
};

class CacheTable {
 public:
  // the store is a registered region on `owner` so clients can read it one-sided
  CacheTable(Endpoint& owner, CacheTableConfig cfg);
  ~CacheTable();

  std::uint32_t slot_count() const { return slot_count_; }
  std::uint32_t entry_bytes() const { return cfg_.entry_bytes; }
  Rkey store_rkey() const { return store_.rkey; }
  std::uint32_t dynamic_slots() const;

  struct Pin {
    std::uint32_t slot = 0;
  };
  // refcount++ on hit; a pinned slot is never evicted or refilled
  std::optional<Pin> pin(std::uint64_t key);
  void release(std::uint32_t slot);
  Bytes read(std::uint32_t slot, std::uint64_t offset, std::uint64_t len) const;

  // fill protocol: take a slot (evicting an unpinned victim at random if
  // needed), copy data in, then publish under `key`
  std::optional<std::uint32_t> allocate_slot();
  void install(std::uint32_t slot, std::uint64_t key, ByteSpan data);
  void free_slot(std::uint32_t slot);

  bool contains(std::uint64_t key) const;
  bool invalidate(std::uint64_t key);  // future lookups miss; slot recycles at refcount 0

  // static side: contiguous slots pinned for good; returns first slot index
  std::uint32_t reserve_static(std::uint32_t n_slots);
  void install_static(std::uint32_t slot, ByteSpan data);

  std::uint64_t evictions() const;
  std::uint64_t resident_entries() const;

 private:
  struct Slot {
    std::uint64_t key = 0;
    std::uint32_t refcount = 0;
    bool valid = false;
    bool zombie = false;  // invalidated while pinned
    bool in_use = false;  // taken by a fill in progress
    bool is_static = false;
  };

  Endpoint& owner_;
  CacheTableConfig cfg_;
  std::uint32_t slot_count_ = 0;
  RemoteRef store_;
  mutable std::mutex mu_;
  std::vector<Slot> slots_;
  std::unordered_map<std::uint64_t, std::uint32_t> index_;
  std::deque<std::uint32_t> free_;
  std::uint32_t static_watermark_;  // slots >= watermark are static
  SplitMix64 rng_;
  std::uint64_t evictions_ = 0;
};

// ---- hit-rate monitor and adaptive control ----

class HitRateMonitor {
 public:
  explicit HitRateMonitor(std::uint32_t window) : window_(window ? window : 1) {}
  void record(bool hit);
  bool window_filled() const;
  double rate() const;  // over the last min(window, samples) lookups
  std::uint64_t hits() const { return total_hits_; }
  std::uint64_t misses() const { return total_misses_; }

 private:
  mutable std::mutex mu_;
  std::uint32_t window_;
  std::deque<bool> ring_;
  std::uint64_t window_hits_ = 0;
  std::uint64_t total_hits_ = 0;
  std::uint64_t total_misses_ = 0;
};

// Disable below threshold - hysteresis, re-enable above threshold + hysteresis;
// no flapping inside the band.
class AdaptiveController {
 public:
  AdaptiveController(double required_rate, double hysteresis)
      : required_(required_rate), hysteresis_(hysteresis) {}
  bool update(double windowed_rate);  // returns enabled state after the update
  bool enabled() const { return enabled_; }
  void force(bool enabled) { enabled_ = enabled; }

 private:
  double required_;
  double hysteresis_;
  bool enabled_ = true;
};

}  // namespace offmem
