#include "offmem/dpu_cache.hpp"

#include <algorithm>

namespace offmem {

double required_hit_rate(double b_net, double b_intra) {
  if (b_net <= 0 || b_intra <= 0) raise(Errc::invalid_argument, "bandwidths must be positive");
  return std::min(1.0, b_net / b_intra);
}

double baseline_fetch_time(const CacheModel& m) {
  if (m.b_net <= 0) raise(Errc::invalid_argument, "b_net must be positive");
  return double(m.chunk_bytes) / m.b_net;
}

double expected_fetch_time(const CacheModel& m) {
  if (m.b_net <= 0 || m.b_intra <= 0) raise(Errc::invalid_argument, "bandwidths must be positive");
  if (m.hit_rate < 0 || m.hit_rate > 1) raise(Errc::invalid_argument, "hit rate outside [0,1]");
  double s = double(m.chunk_bytes);
  return s / m.b_intra + (1.0 - m.hit_rate) * s / m.b_net;
}

bool dynamic_cache_beneficial(const CacheModel& m) {
  return m.hit_rate > required_hit_rate(m.b_net, m.b_intra);
}

// ---- RecentList ----

void RecentList::push(std::uint64_t id) {
  {
    std::lock_guard<std::mutex> g(mu_);
    ring_[seq_ % kCapacity] = id;  // overwrites the oldest once full
    seq_++;
  }
  cv_.notify_all();
}

std::vector<std::uint64_t> RecentList::wait_new(std::uint64_t* cursor,
                                                const std::atomic<bool>& stop) {
  std::unique_lock<std::mutex> lk(mu_);
  cv_.wait(lk, [&] { return stop.load() || seq_ > *cursor; });
  std::vector<std::uint64_t> out;
  if (seq_ <= *cursor) return out;  // woken for shutdown
  // a slow consumer can only observe the survivors still in the ring
  std::uint64_t from = std::max(*cursor, seq_ >= kCapacity ? seq_ - kCapacity : 0);
  out.reserve(std::size_t(seq_ - from));
  for (std::uint64_t s = from; s < seq_; s++) out.push_back(ring_[s % kCapacity]);
  *cursor = seq_;
  return out;
}

std::vector<std::uint64_t> RecentList::snapshot() const {
  std::lock_guard<std::mutex> g(mu_);
  std::uint64_t n = std::min<std::uint64_t>(seq_, kCapacity);
  std::vector<std::uint64_t> out;
  out.reserve(std::size_t(n));
  for (std::uint64_t s = seq_ - n; s < seq_; s++) out.push_back(ring_[s % kCapacity]);
  return out;
}

std::uint64_t RecentList::pushes() const {
  std::lock_guard<std::mutex> g(mu_);
  return seq_;
}

void RecentList::wake_all() { cv_.notify_all(); }

// ---- CacheTable ----

CacheTable::CacheTable(Endpoint& owner, CacheTableConfig cfg)
    : owner_(owner), cfg_(cfg), rng_(cfg.rng_seed) {
  if (cfg_.entry_bytes == 0) raise(Errc::config_error, "entry_bytes must be positive");
  if (cfg_.cache_bytes < cfg_.entry_bytes)
    raise(Errc::config_error, "cache_bytes below one entry");
  slot_count_ = std::uint32_t(cfg_.cache_bytes / cfg_.entry_bytes);
  store_ = owner_.register_region(std::uint64_t(slot_count_) * cfg_.entry_bytes);
  slots_.resize(slot_count_);
  for (std::uint32_t i = 0; i < slot_count_; i++) free_.push_back(i);
  static_watermark_ = slot_count_;
}

CacheTable::~CacheTable() {
  try {
    owner_.unregister_region(store_.rkey);
  } catch (...) {
  }
}

std::uint32_t CacheTable::dynamic_slots() const {
  std::lock_guard<std::mutex> g(mu_);
  return static_watermark_;
}

std::optional<CacheTable::Pin> CacheTable::pin(std::uint64_t key) {
  std::lock_guard<std::mutex> g(mu_);
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  Slot& s = slots_[it->second];
  if (!s.valid) return std::nullopt;
  s.refcount++;
  return Pin{it->second};
}

void CacheTable::release(std::uint32_t slot) {
  std::lock_guard<std::mutex> g(mu_);
  Slot& s = slots_[slot];
  if (s.refcount == 0) raise(Errc::invalid_argument, "release of unpinned slot");
  s.refcount--;
  if (s.refcount == 0 && s.zombie) {
    s.zombie = false;
    s.valid = false;
    if (!s.is_static) free_.push_back(slot);
  }
}

Bytes CacheTable::read(std::uint32_t slot, std::uint64_t offset, std::uint64_t len) const {
  return owner_.local_read(store_.rkey, std::uint64_t(slot) * cfg_.entry_bytes + offset, len);
}

std::optional<std::uint32_t> CacheTable::allocate_slot() {
  std::lock_guard<std::mutex> g(mu_);
  if (!free_.empty()) {
    std::uint32_t slot = free_.front();
    free_.pop_front();
    slots_[slot].in_use = true;
    return slot;
  }
  // random eviction among unpinned resident entries
  std::vector<std::uint32_t> candidates;
  for (std::uint32_t i = 0; i < static_watermark_; i++) {
    const Slot& s = slots_[i];
    if (s.valid && !s.zombie && s.refcount == 0 && !s.in_use) candidates.push_back(i);
  }
  if (candidates.empty()) return std::nullopt;
  std::uint32_t slot = candidates[rng_.next_below(candidates.size())];
  Slot& s = slots_[slot];
  index_.erase(s.key);
  s.valid = false;
  s.in_use = true;
  evictions_++;
  return slot;
}

void CacheTable::install(std::uint32_t slot, std::uint64_t key, ByteSpan data) {
  if (data.size() > cfg_.entry_bytes) raise(Errc::invalid_argument, "entry data too large");
  // the slot is private to the filler until published below
  owner_.local_write(store_.rkey, std::uint64_t(slot) * cfg_.entry_bytes, data);
  std::lock_guard<std::mutex> g(mu_);
  Slot& s = slots_[slot];
  auto old = index_.find(key);
  if (old != index_.end()) {
    // lost a publish race; drop this copy
    s.in_use = false;
    free_.push_back(slot);
    return;
  }
  s.key = key;
  s.valid = true;
  s.in_use = false;
  s.zombie = false;
  index_[key] = slot;
}

void CacheTable::free_slot(std::uint32_t slot) {
  std::lock_guard<std::mutex> g(mu_);
  Slot& s = slots_[slot];
  s.in_use = false;
  s.valid = false;
  free_.push_back(slot);
}

bool CacheTable::contains(std::uint64_t key) const {
  std::lock_guard<std::mutex> g(mu_);
  auto it = index_.find(key);
  return it != index_.end() && slots_[it->second].valid;
}

bool CacheTable::invalidate(std::uint64_t key) {
  std::lock_guard<std::mutex> g(mu_);
  auto it = index_.find(key);
  if (it == index_.end()) return false;
  std::uint32_t slot = it->second;
  index_.erase(it);
  Slot& s = slots_[slot];
  if (s.refcount > 0) {
    s.zombie = true;  // recycled once the pins drain
  } else {
    s.valid = false;
    if (!s.is_static) free_.push_back(slot);
  }
  return true;
}

std::uint32_t CacheTable::reserve_static(std::uint32_t n_slots) {
  std::lock_guard<std::mutex> g(mu_);
  if (n_slots == 0) raise(Errc::invalid_argument, "empty static reservation");
  // static slots carve a contiguous range off the top of the store
  std::uint32_t base = static_watermark_ - std::min(static_watermark_, n_slots);
  if (static_watermark_ < n_slots)
    raise(Errc::budget_exceeded, "static reservation exceeds cache store");
  for (std::uint32_t i = base; i < static_watermark_; i++) {
    Slot& s = slots_[i];
    if (s.valid || s.refcount > 0 || s.in_use) raise(Errc::budget_exceeded, "slot busy");
  }
  // pull reserved slots out of the dynamic free pool
  free_.erase(std::remove_if(free_.begin(), free_.end(),
                             [&](std::uint32_t x) { return x >= base; }),
              free_.end());
  for (std::uint32_t i = base; i < static_watermark_; i++) slots_[i].is_static = true;
  static_watermark_ = base;
  return base;
}

void CacheTable::install_static(std::uint32_t slot, ByteSpan data) {
  if (data.size() > cfg_.entry_bytes) raise(Errc::invalid_argument, "entry data too large");
  owner_.local_write(store_.rkey, std::uint64_t(slot) * cfg_.entry_bytes, data);
  std::lock_guard<std::mutex> g(mu_);
  Slot& s = slots_[slot];
  if (!s.is_static) raise(Errc::invalid_argument, "slot is not static");
  s.valid = true;
  s.refcount = 1;  // pinned for good
}

std::uint64_t CacheTable::evictions() const {
  std::lock_guard<std::mutex> g(mu_);
  return evictions_;
}

std::uint64_t CacheTable::resident_entries() const {
  std::lock_guard<std::mutex> g(mu_);
  return index_.size();
}

// ---- HitRateMonitor ----

void HitRateMonitor::record(bool hit) {
  std::lock_guard<std::mutex> g(mu_);
  ring_.push_back(hit);
  if (hit) {
    window_hits_++;
    total_hits_++;
  } else {
    total_misses_++;
  }
  if (ring_.size() > window_) {
    if (ring_.front()) window_hits_--;
    ring_.pop_front();
  }
}

bool HitRateMonitor::window_filled() const {
  std::lock_guard<std::mutex> g(mu_);
  return ring_.size() >= window_;
}

double HitRateMonitor::rate() const {
  std::lock_guard<std::mutex> g(mu_);
  if (ring_.empty()) return 0.0;
  return double(window_hits_) / double(ring_.size());
}

// ---- AdaptiveController ----

bool AdaptiveController::update(double windowed_rate) {
  if (enabled_) {
    if (windowed_rate < required_ - hysteresis_) enabled_ = false;
  } else {
    if (windowed_rate > required_ + hysteresis_) enabled_ = true;
  }
  return enabled_;
}

}  // namespace offmem
