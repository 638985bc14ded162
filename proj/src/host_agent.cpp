#include "offmem/host_agent.hpp"

#include <algorithm>
#include <cmath>

namespace offmem {

namespace proto = protocol;

HostSession::HostSession(Endpoint& ep, EndpointId peer, HostConfig cfg,
                         std::optional<EndpointId> mem_peer)
    : ep_(ep), peer_(peer), mem_peer_(mem_peer), cfg_(cfg) {
  if (cfg_.chunk_size == 0) raise(Errc::config_error, "chunk_size must be positive");
  if (cfg_.buffer_chunks == 0) raise(Errc::config_error, "buffer_chunks must be positive");
  if (cfg_.load_threshold <= 0) raise(Errc::config_error, "load_threshold must be positive");
  if (cfg_.low_water < 0 || cfg_.low_water > cfg_.load_threshold)
    raise(Errc::config_error, "low_water must lie below load_threshold");
  if (cfg_.qp_count == 0) raise(Errc::config_error, "qp_count must be positive");
  if (cfg_.mode == AccessMode::direct) mem_peer_ = peer_;

  receiver_ = std::thread([this] { receiver_loop(); });
  auto reply = control_rpc(proto::Setup{1, client_id()});
  if (!std::holds_alternative<proto::SetupAck>(reply))
    raise(Errc::remote_error, "unexpected setup reply");
  if (cfg_.load_threshold < 1.0) evictor_ = std::thread([this] { evictor_loop(); });
}

HostSession::~HostSession() {
  try {
    close();
  } catch (...) {
  }
}

std::uint32_t HostSession::chunk_bytes(const ChunkKey& key) const {
  const RegionMeta& m = regions_.at(key.region);
  std::uint64_t begin = key.index * std::uint64_t(m.chunk_size);
  return std::uint32_t(std::min<std::uint64_t>(m.chunk_size, m.length - begin));
}

void HostSession::touch(BufferEntry& e, const ChunkKey& key) {
  lru_.erase(e.lru_it);
  lru_.push_front(key);
  e.lru_it = lru_.begin();
}

// caller holds mu_
void HostSession::unmark_wb_pending(const ChunkKey& key) {
  auto it = wb_pending_.find(key);
  if (it != wb_pending_.end() && --it->second == 0) wb_pending_.erase(it);
  cv_.notify_all();
}

// ---- control plane ----

proto::ControlMessage HostSession::control_rpc(const proto::ControlMessage& req) {
  std::lock_guard<std::mutex> call(ctrl_call_mu_);
  {
    std::lock_guard<std::mutex> g(mu_);
    ctrl_reply_.reset();
    ctrl_err_.reset();
  }
  ep_.send(peer_, proto::kImmControl, proto::encode_control(req),
           OpMeta{TrafficClass::on_demand, client_id()});
  std::unique_lock<std::mutex> lk(mu_);
  ctrl_cv_.wait(lk, [&] { return ctrl_reply_ || ctrl_err_ || closing_; });
  if (ctrl_err_) raise(*ctrl_err_, "control rpc rejected");
  if (!ctrl_reply_) raise(Errc::shutdown, "session closed during control rpc");
  proto::ControlMessage out = std::move(*ctrl_reply_);
  ctrl_reply_.reset();
  return out;
}

FamHandle HostSession::fam_alloc(std::uint64_t length, std::optional<std::string> file,
                                 bool writable) {
  if (length == 0) raise(Errc::invalid_argument, "zero-length allocation");
  auto reply = control_rpc(
      proto::AllocRegion{length, cfg_.chunk_size, writable, client_id(), std::move(file)});
  auto* ack = std::get_if<proto::AllocAck>(&reply);
  if (!ack) raise(Errc::remote_error, "unexpected alloc reply");
  FamHandle h;
  h.region_id = ack->region_id;
  h.length = length;
  h.writable = writable;
  h.chunk_size = cfg_.chunk_size;
  h.rkey = ack->rkey;
  std::lock_guard<std::mutex> g(mu_);
  regions_[h.region_id] = RegionMeta{length, cfg_.chunk_size, ack->rkey, writable};
  return h;
}

void HostSession::fam_free(FamHandle& h) {
  if (!h.valid()) raise(Errc::invalid_argument, "free of invalid handle");
  // make the region durable, then drop its residency
  flush();
  {
    std::lock_guard<std::mutex> g(mu_);
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (it->first.region != h.region_id || it->second.filling) {
        ++it;
        continue;
      }
      lru_.erase(it->second.lru_it);
      it = entries_.erase(it);
    }
  }
  auto reply = control_rpc(proto::FreeRegion{h.region_id, client_id()});
  if (!std::holds_alternative<proto::FreeAck>(reply))
    raise(Errc::remote_error, "unexpected free reply");
  std::lock_guard<std::mutex> g(mu_);
  regions_.erase(h.region_id);
  static_routes_.erase(h.region_id);
  h = FamHandle{};
}

// ---- receiver ----

void HostSession::receiver_loop() {
  while (auto msg = ep_.recv()) {
    switch (msg->immediate) {
      case proto::kImmReadResp: {
        proto::ReadResponse r;
        try {
          r = proto::decode_read_resp(std::move(msg->payload));
        } catch (const Error&) {
          OFFMEM_LOG_WARN("dropping malformed read response");
          continue;
        }
        std::lock_guard<std::mutex> g(mu_);
        auto it = entries_.find(ChunkKey{r.region_id, r.page_offset});
        if (it != entries_.end() && it->second.filling) {
          it->second.data = std::move(r.data);
          it->second.filling = false;
          cv_.notify_all();
        }
        break;
      }
      case proto::kImmWriteAck: {
        std::lock_guard<std::mutex> g(mu_);
        if (outstanding_writebacks_ > 0) outstanding_writebacks_--;
        flush_cv_.notify_all();
        break;
      }
      case proto::kImmError: {
        proto::ErrorResponse e;
        try {
          e = proto::decode_error(msg->payload);
        } catch (const Error&) {
          continue;
        }
        std::lock_guard<std::mutex> g(mu_);
        auto it = entries_.find(ChunkKey{e.region_id, e.page_offset});
        if (it != entries_.end() && it->second.filling) {
          it->second.failed = true;
          it->second.err = e.code;
          it->second.filling = false;
          cv_.notify_all();
        } else {
          ctrl_err_ = e.code;
          ctrl_cv_.notify_all();
        }
        break;
      }
      case proto::kImmControl: {
        proto::ControlMessage cm;
        try {
          cm = proto::decode_control(msg->payload);
        } catch (const Error&) {
          continue;
        }
        std::lock_guard<std::mutex> g(mu_);
        if (auto* info = std::get_if<proto::StaticCacheInfo>(&cm)) {
          static_routes_[info->region_id] =
              StaticRoute{info->covered_begin, info->covered_end, info->store_offset,
                          info->cache_rkey};
        } else {
          ctrl_reply_ = std::move(cm);
          ctrl_cv_.notify_all();
        }
        break;
      }
      default:
        OFFMEM_LOG_WARN("host session ignoring immediate %u", msg->immediate);
    }
  }
}

// ---- buffer core ----

void HostSession::evict_one(std::unique_lock<std::mutex>& lk) {
  for (;;) {
    bool blocked = false;
    for (auto rit = lru_.rbegin(); rit != lru_.rend(); ++rit) {
      auto it = entries_.find(*rit);
      if (it->second.filling) continue;
      if (it->second.dirty && wb_pending_.count(it->first)) {
        // an older write-back of this chunk is still leaving; starting a
        // second one could let the generations land out of order
        blocked = true;
        continue;
      }
      ChunkKey key = it->first;
      bool dirty = it->second.dirty;
      Bytes payload = std::move(it->second.data);
      lru_.erase(it->second.lru_it);
      entries_.erase(it);
      if (dirty) {
        stats_.writebacks++;
        wb_pending_[key]++;
        lk.unlock();
        try {
          write_back(key, std::move(payload));
        } catch (...) {
          lk.lock();
          unmark_wb_pending(key);
          throw;
        }
        lk.lock();
        unmark_wb_pending(key);
      }
      return;
    }
    // every candidate is mid-fill or mid-write-back; wait for one to settle
    (void)blocked;
    cv_.wait(lk);
  }
}

void HostSession::write_back(const ChunkKey& key, Bytes data) {
  RegionMeta meta;
  {
    std::lock_guard<std::mutex> g(mu_);
    meta = regions_.at(key.region);
  }
  OpMeta op{TrafficClass::on_demand, client_id()};
  if (cfg_.mode == AccessMode::direct) {
    // synchronous: data is durable at the memory node before this returns
    ep_.write_remote(RemoteRef{*mem_peer_, meta.rkey}, key.index * meta.chunk_size, data, op);
    return;
  }
  {
    std::lock_guard<std::mutex> g(mu_);
    outstanding_writebacks_++;
  }
  // fire-and-forget toward the proxy; the ack only settles the flush barrier
  ep_.send(peer_, proto::kImmWrite,
           proto::encode_write(proto::WriteRequest{key.region, key.index, std::move(data)}), op);
}

void HostSession::maybe_trigger_proactive() {
  if (cfg_.load_threshold >= 1.0) return;
  std::uint64_t trigger =
      std::uint64_t(std::ceil(cfg_.load_threshold * double(cfg_.buffer_chunks)));
  if (entries_.size() >= trigger) evict_cv_.notify_one();
}

void HostSession::evictor_loop() {
  const std::uint64_t trigger =
      std::uint64_t(std::ceil(cfg_.load_threshold * double(cfg_.buffer_chunks)));
  const std::uint64_t low =
      std::uint64_t(std::floor(cfg_.low_water * double(cfg_.buffer_chunks)));
  std::unique_lock<std::mutex> lk(mu_);
  while (!closing_) {
    evict_cv_.wait(lk, [&] { return closing_ || entries_.size() >= trigger; });
    if (closing_) break;
    stats_.proactive_triggers++;
    while (!closing_ && entries_.size() > low) {
      evict_one(lk);
      stats_.proactive_evictions++;
    }
  }
}

HostSession::EntryMap::iterator HostSession::ensure_resident(std::unique_lock<std::mutex>& lk,
                                                             const ChunkKey& key,
                                                             bool fetch_contents) {
  if (!regions_.count(key.region))
    raise(Errc::unknown_region, "access through a freed or foreign handle");
  for (;;) {
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      BufferEntry& e = it->second;
      if (e.filling) {
        stats_.coalesced_misses++;
        e.waiters++;
        cv_.wait(lk, [&] {
          auto f = entries_.find(key);
          return f == entries_.end() || !f->second.filling;
        });
        auto f = entries_.find(key);
        if (f == entries_.end()) continue;  // fetch failed and was reaped; retry
        f->second.waiters--;
        if (f->second.failed) {
          Errc c = f->second.err;
          if (f->second.waiters == 0) {
            lru_.erase(f->second.lru_it);
            entries_.erase(f);
          }
          cv_.notify_all();
          throw Error(c, "chunk fetch failed");
        }
        touch(f->second, key);
        return f;
      }
      if (e.failed) {
        Errc c = e.err;
        if (e.waiters == 0) {
          lru_.erase(e.lru_it);
          entries_.erase(it);
        }
        throw Error(c, "chunk fetch failed");
      }
      touch(e, key);
      stats_.buffer_hits++;
      return it;
    }

    if (wb_pending_.count(key)) {
      // our own write-back of these bytes is still in flight; fetching now
      // could overtake it and resurrect stale data
      cv_.wait(lk, [&] { return wb_pending_.count(key) == 0; });
      continue;
    }

    if (entries_.size() >= cfg_.buffer_chunks) {
      evict_one(lk);  // may drop the lock; re-check everything
      continue;
    }

    auto [nit, inserted] = entries_.emplace(key, BufferEntry{});
    lru_.push_front(key);
    nit->second.lru_it = lru_.begin();

    if (!fetch_contents) {
      nit->second.data.assign(chunk_bytes(key), 0);
      maybe_trigger_proactive();
      return nit;
    }

    stats_.buffer_misses++;
    nit->second.filling = true;

    // route decision happens under the lock; the transfer happens outside it
    enum class Route { proxy, static_cache, bypass, direct } route = Route::direct;
    RegionMeta meta = regions_.at(key.region);
    std::uint32_t size = chunk_bytes(key);
    std::uint64_t byte_begin = key.index * std::uint64_t(meta.chunk_size);
    StaticRoute sroute{};
    if (cfg_.mode == AccessMode::offload) {
      route = Route::proxy;
      auto sit = static_routes_.find(key.region);
      if (sit != static_routes_.end()) {
        if (byte_begin >= sit->second.covered_begin &&
            byte_begin + size <= sit->second.covered_end) {
          route = Route::static_cache;
          sroute = sit->second;
        } else if (mem_peer_) {
          route = Route::bypass;
        }
      }
    }

    OpMeta op{TrafficClass::on_demand, client_id()};
    if (route == Route::proxy) {
      proto::ReadRequest req{key.region, key.index, byte_begin, size, 0};
      Bytes wire = proto::encode_read(req);
      stats_.read_requests++;
      lk.unlock();
      ep_.send(peer_, proto::kImmRead, std::move(wire), op);
      lk.lock();
      auto fit = entries_.find(key);
      if (fit == entries_.end()) continue;
      fit->second.waiters++;
      cv_.wait(lk, [&] {
        auto f = entries_.find(key);
        return f == entries_.end() || !f->second.filling || closing_;
      });
      auto f = entries_.find(key);
      if (f == entries_.end()) continue;
      f->second.waiters--;
      if (f->second.filling) {  // closing
        if (f->second.waiters == 0) {
          lru_.erase(f->second.lru_it);
          entries_.erase(f);
        }
        raise(Errc::shutdown, "session closed during fetch");
      }
      if (f->second.failed) {
        Errc c = f->second.err;
        if (f->second.waiters == 0) {
          lru_.erase(f->second.lru_it);
          entries_.erase(f);
        }
        cv_.notify_all();
        throw Error(c, "chunk fetch failed");
      }
      maybe_trigger_proactive();
      return f;
    }

    lk.unlock();
    Bytes data;
    Errc fail = Errc::ok;
    try {
      switch (route) {
        case Route::static_cache:
          data = ep_.read_remote(RemoteRef{peer_, sroute.cache_rkey},
                                 sroute.store_offset + (byte_begin - sroute.covered_begin), size,
                                 op);
          break;
        case Route::bypass:
          data = ep_.read_remote(RemoteRef{*mem_peer_, meta.rkey}, byte_begin, size, op);
          break;
        default:
          data = ep_.read_remote(RemoteRef{*mem_peer_, meta.rkey}, byte_begin, size, op);
          break;
      }
    } catch (const Error& e) {
      fail = e.code();
    }
    lk.lock();
    auto f = entries_.find(key);
    if (f == entries_.end()) continue;
    BufferEntry& e = f->second;
    if (fail != Errc::ok) {
      e.failed = true;
      e.filling = false;
      e.err = fail;
      cv_.notify_all();
      if (e.waiters == 0) {
        lru_.erase(e.lru_it);
        entries_.erase(f);
      }
      throw Error(fail, "chunk fetch failed");
    }
    switch (route) {
      case Route::static_cache: stats_.static_reads++; break;
      case Route::bypass: stats_.bypass_reads++; break;
      default: stats_.direct_reads++; break;
    }
    e.data = std::move(data);
    e.filling = false;
    cv_.notify_all();
    maybe_trigger_proactive();
    return f;
  }
}

void HostSession::fam_read(const FamHandle& h, std::uint64_t offset,
                           std::span<std::uint8_t> out) {
  if (!h.valid()) raise(Errc::invalid_argument, "read through invalid handle");
  if (offset > h.length || out.size() > h.length - offset)
    raise(Errc::out_of_bounds, "read beyond object end");
  if (out.empty()) return;
  std::uint64_t cs = h.chunk_size;
  std::uint64_t first = offset / cs;
  std::uint64_t last = (offset + out.size() - 1) / cs;
  std::size_t done = 0;
  std::unique_lock<std::mutex> lk(mu_);
  for (std::uint64_t c = first; c <= last; c++) {
    auto it = ensure_resident(lk, ChunkKey{h.region_id, c}, true);
    std::uint64_t chunk_begin = c * cs;
    std::uint64_t from = std::max(offset, chunk_begin) - chunk_begin;
    std::size_t n = std::min<std::uint64_t>(out.size() - done, chunk_bytes({h.region_id, c}) - from);
    std::memcpy(out.data() + done, it->second.data.data() + from, n);
    done += n;
  }
}

Bytes HostSession::fam_read(const FamHandle& h, std::uint64_t offset, std::uint64_t len) {
  Bytes out(len);
  fam_read(h, offset, std::span<std::uint8_t>(out));
  return out;
}

void HostSession::fam_write(const FamHandle& h, std::uint64_t offset, ByteSpan data) {
  if (!h.valid()) raise(Errc::invalid_argument, "write through invalid handle");
  if (!h.writable) raise(Errc::coherence, "write through read-only handle");
  if (offset > h.length || data.size() > h.length - offset)
    raise(Errc::out_of_bounds, "write beyond object end");
  if (data.empty()) return;
  std::uint64_t cs = h.chunk_size;
  std::uint64_t first = offset / cs;
  std::uint64_t last = (offset + data.size() - 1) / cs;
  std::size_t done = 0;
  std::unique_lock<std::mutex> lk(mu_);
  for (std::uint64_t c = first; c <= last; c++) {
    ChunkKey key{h.region_id, c};
    std::uint64_t chunk_begin = c * cs;
    std::uint32_t clen = chunk_bytes(key);
    std::uint64_t from = std::max(offset, chunk_begin) - chunk_begin;
    std::size_t n = std::min<std::uint64_t>(data.size() - done, std::uint64_t(clen) - from);
    bool full_cover = (from == 0 && n == clen);
    // a fully covered chunk never needs its old contents
    auto it = ensure_resident(lk, key, !full_cover);
    if (it->second.data.size() != clen) it->second.data.resize(clen, 0);
    std::memcpy(it->second.data.data() + from, data.data() + done, n);
    it->second.dirty = true;
    done += n;
  }
}

void HostSession::flush() {
  // one chunk at a time: the wb_pending token keeps a single write-back in
  // flight per chunk, so generations reach the memory node in order even
  // when flushes race evictions of re-dirtied entries
  std::unique_lock<std::mutex> lk(mu_);
  for (;;) {
    ChunkKey key{};
    Bytes payload;
    bool found = false;
    bool blocked = false;
    for (auto& [k, e] : entries_) {
      if (!e.dirty || e.filling) continue;
      if (wb_pending_.count(k)) {
        blocked = true;
        continue;
      }
      key = k;
      payload = e.data;  // snapshot; entry stays resident
      e.dirty = false;
      found = true;
      break;
    }
    if (!found) {
      if (!blocked || closing_) break;
      cv_.wait(lk);  // an in-flight write-back holds the token; retry after
      continue;
    }
    stats_.writebacks++;
    wb_pending_[key]++;
    lk.unlock();
    try {
      write_back(key, std::move(payload));
    } catch (...) {
      lk.lock();
      unmark_wb_pending(key);
      throw;
    }
    lk.lock();
    unmark_wb_pending(key);
  }
  if (cfg_.mode == AccessMode::offload)
    flush_cv_.wait(lk, [&] { return outstanding_writebacks_ == 0 || closing_; });
}

void HostSession::close() {
  {
    std::lock_guard<std::mutex> g(mu_);
    if (closing_) return;
  }
  flush();
  {
    std::lock_guard<std::mutex> g(mu_);
    closing_ = true;
  }
  cv_.notify_all();
  evict_cv_.notify_all();
  ctrl_cv_.notify_all();
  flush_cv_.notify_all();
  ep_.close();
  if (receiver_.joinable()) receiver_.join();
  if (evictor_.joinable()) evictor_.join();
}

HostStats HostSession::stats() const {
  std::lock_guard<std::mutex> g(mu_);
  return stats_;
}

std::uint64_t HostSession::resident_chunks() const {
  std::lock_guard<std::mutex> g(mu_);
  return entries_.size();
}

bool HostSession::has_static_route(std::uint16_t region_id) const {
  std::lock_guard<std::mutex> g(mu_);
  return static_routes_.count(region_id) != 0;
}

}  // namespace offmem
