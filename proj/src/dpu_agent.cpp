#include "offmem/dpu_agent.hpp"

#include <algorithm>
#include <chrono>

namespace offmem {

namespace proto = protocol;

DpuAgent::DpuAgent(Endpoint& host_side, Endpoint& net_side, Endpoint& prefetch_side,
                   EndpointId memd, DpuConfig cfg)
    : host_ep_(host_side),
      net_ep_(net_side),
      prefetch_ep_(prefetch_side),
      memd_(memd),
      cfg_(cfg),
      table_(host_side, cfg.cache),
      monitor_(cfg.hit_window),
      controller_(cfg.required_rate, cfg.hysteresis) {
  if (cfg_.max_batch == 0) raise(Errc::config_error, "max_batch must be positive");
  if (cfg_.pipeline_depth == 0) raise(Errc::config_error, "pipeline_depth must be positive");
  std::uint64_t store = std::uint64_t(table_.slot_count()) * table_.entry_bytes();
  std::uint64_t staging = std::uint64_t(cfg_.pipeline_depth) * cfg_.staging_bytes_per_slot;
  if (store + staging > cfg_.dpu_memory)
    raise(Errc::budget_exceeded, "cache store plus staging exceeds dpu_memory");
  stats_.dynamic_enabled = cfg_.dynamic_cache;
}

DpuAgent::~DpuAgent() {
  try {
    shutdown();
  } catch (...) {
  }
}

void DpuAgent::start() {
  if (running_) return;
  // announce ourselves to the memory agent as a trusted forwarder
  net_ep_.send(memd_, proto::kImmControl,
               proto::encode_control(proto::Setup{2, net_ep_.id()}), OpMeta{});
  auto reply = net_ep_.recv();
  if (!reply || reply->immediate != proto::kImmControl)
    raise(Errc::remote_error, "no setup ack from memory agent");
  if (!std::holds_alternative<proto::SetupAck>(proto::decode_control(reply->payload)))
    raise(Errc::remote_error, "unexpected setup reply");
  running_ = true;
  stage_a_ = std::thread([this] { stage_a_loop(); });
  stage_b_ = std::thread([this] { stage_b_loop(); });
  prefetcher_ = std::thread([this] { prefetch_loop(); });
}

void DpuAgent::shutdown() {
  if (!running_) return;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    closing_ = true;
  }
  st_cv_.notify_all();
  host_ep_.close();
  if (stage_a_.joinable()) stage_a_.join();
  {
    std::unique_lock<std::mutex> lk(st_mu_);
    st_cv_.wait_for(lk, std::chrono::seconds(5), [&] { return inflight_.empty(); });
  }
  net_ep_.close();
  if (stage_b_.joinable()) stage_b_.join();
  stop_ = true;
  recent_.wake_all();
  prefetch_ep_.close();
  if (prefetcher_.joinable()) prefetcher_.join();

  // cleanly reject anything still parked
  std::vector<ReadCtx> orphans;
  std::vector<std::tuple<std::uint32_t, std::uint16_t, std::uint64_t>> orphan_acks;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    for (auto& [key, fill] : fills_)
      for (auto& ctx : fill.parked) orphans.push_back(ctx);
    fills_.clear();
    for (auto& pw : pending_writes_) {
      for (auto& ctx : pw->parked_reads) orphans.push_back(ctx);
      if (!pw->posted)
        for (auto& [client, page] : pw->acks) orphan_acks.emplace_back(client, pw->region, page);
    }
    pending_writes_.clear();
  }
  for (auto& ctx : orphans) respond_error(ctx.client, ctx.region, ctx.page, Errc::shutdown);
  for (auto& [client, region, page] : orphan_acks)
    respond_error(client, region, page, Errc::shutdown);
  running_ = false;
}

void DpuAgent::quiesce() {
  int settled = 0;
  while (settled < 3) {
    bool idle;
    {
      std::lock_guard<std::mutex> g(st_mu_);
      idle = host_ep_.pending_messages() == 0 && !stage_a_busy_ && inflight_.empty() &&
             pending_writes_.empty() && fills_.empty() && fill_queue_.empty();
    }
    settled = idle ? settled + 1 : 0;
    std::this_thread::sleep_for(std::chrono::microseconds(300));
  }
}

DpuStats DpuAgent::stats() const {
  std::lock_guard<std::mutex> g(st_mu_);
  DpuStats s = stats_;
  s.dynamic_enabled = cfg_.dynamic_cache && controller_.enabled();
  s.window_hit_rate = monitor_.rate();
  return s;
}

// ---- responses ----

void DpuAgent::respond_data(const ReadCtx& ctx, Bytes data) {
  host_ep_.send(ctx.client, proto::kImmReadResp,
                proto::encode_read_resp(ctx.region, ctx.page, std::move(data)),
                OpMeta{TrafficClass::on_demand, ctx.client});
  std::lock_guard<std::mutex> g(st_mu_);
  stats_.responses++;
  stats_.per_client[ctx.client].responses++;
}

void DpuAgent::respond_error(std::uint32_t client, std::uint16_t region, std::uint64_t page,
                             Errc code) {
  host_ep_.send(client, proto::kImmError, proto::encode_error({region, page, code}),
                OpMeta{TrafficClass::on_demand, client});
  std::lock_guard<std::mutex> g(st_mu_);
  stats_.error_responses++;
  stats_.per_client[client].responses++;
}

void DpuAgent::serve_from_slot(const ReadCtx& ctx, std::uint32_t slot,
                               std::uint64_t group_begin) {
  Bytes data = table_.read(slot, ctx.byte_begin - group_begin, ctx.size);
  respond_data(ctx, std::move(data));
}

// ---- stage A ----

void DpuAgent::pause_intake() {
  std::lock_guard<std::mutex> g(st_mu_);
  intake_paused_ = true;
}

void DpuAgent::resume_intake() {
  {
    std::lock_guard<std::mutex> g(st_mu_);
    intake_paused_ = false;
  }
  st_cv_.notify_all();
}

void DpuAgent::stage_a_loop() {
  while (auto first = host_ep_.recv()) {
    stage_a_busy_ = true;  // holds a message, so the service is not idle
    {
      std::unique_lock<std::mutex> lk(st_mu_);
      st_cv_.wait(lk, [&] { return !intake_paused_ || closing_; });
    }
    std::vector<Message> batch;
    batch.push_back(std::move(*first));
    if (cfg_.aggregation) {
      while (batch.size() < cfg_.max_batch) {
        auto m = host_ep_.try_recv();
        if (!m) break;
        batch.push_back(std::move(*m));
      }
    }
    {
      std::lock_guard<std::mutex> g(st_mu_);
      stats_.batches_formed++;
    }

    std::vector<OneSidedOp> ops;
    std::vector<OpMeta> metas;
    std::vector<std::shared_ptr<PendingWrite>> staged;
    for (auto& msg : batch) {
      try {
        switch (msg.immediate) {
          case proto::kImmControl:
            handle_control(msg);
            break;
          case proto::kImmRead:
            process_read(msg, cfg_.aggregation ? &ops : nullptr,
                         cfg_.aggregation ? &metas : nullptr);
            break;
          case proto::kImmWrite:
            process_write(msg, &staged);
            break;
          default:
            respond_error(msg.sender, 0, 0, Errc::decode_error);
        }
      } catch (const Error& e) {
        respond_error(msg.sender, 0, 0, e.code());
      }
    }

    // coalesce adjacent write-backs staged by this batch into wider writes
    if (staged.size() > 1) {
      std::stable_sort(staged.begin(), staged.end(),
                       [](const auto& a, const auto& b) {
                         return a->region != b->region ? a->region < b->region
                                                       : a->begin < b->begin;
                       });
      std::vector<std::shared_ptr<PendingWrite>> merged;
      {
        std::lock_guard<std::mutex> g(st_mu_);
        for (auto& pw : staged) {
          if (!merged.empty() && merged.back()->region == pw->region &&
              merged.back()->end == pw->begin) {
            auto& dst = merged.back();
            dst->data.insert(dst->data.end(), pw->data.begin(), pw->data.end());
            dst->end = pw->end;
            for (auto& a : pw->acks) dst->acks.push_back(a);
            for (auto& r : pw->parked_reads) dst->parked_reads.push_back(r);
            for (auto& w : pw->parked_writes) dst->parked_writes.push_back(w);
            pending_writes_.erase(
                std::remove(pending_writes_.begin(), pending_writes_.end(), pw),
                pending_writes_.end());
            stats_.coalesced_writes++;
          } else {
            merged.push_back(pw);
          }
        }
      }
      staged = std::move(merged);
    }
    for (auto& pw : staged)
      dispatch_write(pw, cfg_.aggregation ? &ops : nullptr, cfg_.aggregation ? &metas : nullptr,
                     true);

    if (!ops.empty()) {
      OpMeta meta = metas.empty() ? OpMeta{} : metas.front();
      if (ops.size() > 1) {
        net_ep_.post_batch(std::move(ops), meta);
      } else {
        net_ep_.post(std::move(ops.front()), meta);
      }
    }
    stage_a_busy_ = false;
  }
}

void DpuAgent::handle_control(const Message& msg) {
  auto cm = proto::decode_control(msg.payload);
  if (auto* setup = std::get_if<proto::Setup>(&cm)) {
    (void)setup;
    std::vector<proto::StaticCacheInfo> infos;
    {
      std::lock_guard<std::mutex> g(st_mu_);
      clients_.insert(msg.sender);
      for (auto& [id, info] : static_infos_) infos.push_back(info);
    }
    host_ep_.send(msg.sender, proto::kImmControl, proto::encode_control(proto::SetupAck{}),
                  OpMeta{TrafficClass::on_demand, msg.sender});
    for (auto& info : infos)
      host_ep_.send(msg.sender, proto::kImmControl, proto::encode_control(info),
                    OpMeta{TrafficClass::on_demand, msg.sender});
    return;
  }

  // alloc/free RPCs are forwarded to the memory agent; the reply is snooped
  // to keep the region directory current, then relayed to the client
  OpMeta meta{TrafficClass::on_demand, msg.sender};
  net_ep_.send(memd_, proto::kImmControl, msg.payload, meta);
  auto reply = net_ep_.recv();
  if (!reply) raise(Errc::shutdown, "net endpoint closed during control rpc");
  if (reply->immediate == proto::kImmError) {
    host_ep_.send(msg.sender, proto::kImmError, std::move(reply->payload), meta);
    std::lock_guard<std::mutex> g(st_mu_);
    stats_.error_responses++;
    stats_.per_client[msg.sender].responses++;
    return;
  }
  auto reply_cm = proto::decode_control(reply->payload);

  if (auto* alloc = std::get_if<proto::AllocRegion>(&cm)) {
    if (auto* ack = std::get_if<proto::AllocAck>(&reply_cm)) {
      std::lock_guard<std::mutex> g(st_mu_);
      DirEntry& d = directory_[ack->region_id];
      d.rkey = ack->rkey;
      d.length = alloc->length;
      d.chunk_size = alloc->chunk_size;
      if (alloc->writable) d.writer = alloc->client_id;
    }
  } else if (auto* free = std::get_if<proto::FreeRegion>(&cm)) {
    if (auto* fack = std::get_if<proto::FreeAck>(&reply_cm)) {
      std::lock_guard<std::mutex> g(st_mu_);
      auto dit = directory_.find(free->region_id);
      if (dit != directory_.end()) {
        if (fack->destroyed) {
          std::uint64_t groups =
              (dit->second.length + table_.entry_bytes() - 1) / table_.entry_bytes();
          for (std::uint64_t gi = 0; gi < groups; gi++) {
            std::uint64_t key = group_key(free->region_id, gi);
            table_.invalidate(key);
            auto fit = fills_.find(key);
            if (fit != fills_.end()) fit->second.poisoned = true;
          }
          directory_.erase(dit);
          static_infos_.erase(free->region_id);
        } else if (dit->second.writer && *dit->second.writer == free->client_id) {
          dit->second.writer.reset();
        }
      }
    }
  }

  host_ep_.send(msg.sender, proto::kImmControl, std::move(reply->payload), meta);
  if (std::holds_alternative<proto::AllocRegion>(cm)) {
    if (auto* ack = std::get_if<proto::AllocAck>(&reply_cm)) {
      std::lock_guard<std::mutex> g(st_mu_);
      auto sit = static_infos_.find(ack->region_id);
      if (sit != static_infos_.end())
        host_ep_.send(msg.sender, proto::kImmControl, proto::encode_control(sit->second), meta);
    }
  }
}

std::uint64_t DpuAgent::register_inflight_locked(std::unique_lock<std::mutex>& lk, InFlight inf,
                                                 bool bypass_capacity) {
  // back-pressure throttles stage A's intake only; re-dispatched parked work
  // was admitted once already and must not wait on the thread draining it
  if (!bypass_capacity)
    st_cv_.wait(lk, [&] { return closing_ || inflight_.size() < cfg_.pipeline_depth; });
  if (closing_) raise(Errc::shutdown, "proxy shutting down");
  std::uint64_t tag = next_tag_++;
  inflight_.emplace(tag, std::move(inf));
  return tag;
}

void DpuAgent::process_read(const Message& msg, std::vector<OneSidedOp>* batch,
                            std::vector<OpMeta>* metas) {
  proto::ReadRequest req;
  try {
    req = proto::decode_read(msg.payload);
  } catch (const Error& e) {
    respond_error(msg.sender, 0, 0, e.code());
    return;
  }
  DirEntry dir;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    stats_.requests++;
    stats_.read_requests++;
    stats_.per_client[msg.sender].requests++;
    auto it = directory_.find(req.region_id);
    if (it == directory_.end()) {
      dir.chunk_size = 0;
    } else {
      dir = it->second;
    }
  }
  if (dir.chunk_size == 0) {
    respond_error(msg.sender, req.region_id, req.page_offset, Errc::unknown_region);
    return;
  }
  try {
    proto::validate_extent(req.page_offset, req.size, dir.length, dir.chunk_size);
  } catch (const Error& e) {
    respond_error(msg.sender, req.region_id, req.page_offset, e.code());
    return;
  }
  ReadCtx ctx{msg.sender, req.region_id, req.page_offset, req.size,
              req.page_offset * dir.chunk_size};
  dispatch_read(ctx, batch, metas, true);
}

bool DpuAgent::dispatch_read(ReadCtx ctx, std::vector<OneSidedOp>* batch,
                             std::vector<OpMeta>* metas, bool from_intake) {
  std::unique_lock<std::mutex> lk(st_mu_);

  // order after any write-back that touches the same bytes
  for (auto& pw : pending_writes_) {
    if (pw->region == ctx.region && pw->begin < ctx.byte_begin + ctx.size &&
        ctx.byte_begin < pw->end) {
      pw->parked_reads.push_back(ctx);
      stats_.parked_on_write++;
      return false;
    }
  }

  auto dit = directory_.find(ctx.region);
  if (dit == directory_.end()) {
    // region freed while this read was parked
    lk.unlock();
    respond_error(ctx.client, ctx.region, ctx.page, Errc::unknown_region);
    return false;
  }
  DirEntry dir = dit->second;

  if (cfg_.dynamic_cache && controller_.enabled() && !static_infos_.count(ctx.region)) {
    std::uint32_t eb = table_.entry_bytes();
    std::uint64_t group = ctx.byte_begin / eb;
    if ((ctx.byte_begin % eb) + ctx.size <= eb) {
      std::uint64_t key = group_key(ctx.region, group);
      std::uint64_t page_id = group_key(ctx.region, ctx.page);
      // every access schedules the enclosing and following groups; only
      // groups absent from both the table and the fill pipeline are queued
      auto mark_adjacent = [&] {
        std::uint64_t group_count = (dir.length + eb - 1) / eb;
        for (std::uint64_t g = group; g <= group + cfg_.prefetch_degree && g < group_count;
             g++) {
          std::uint64_t k = group_key(ctx.region, g);
          if (!table_.contains(k) && !fills_.count(k)) {
            fills_.emplace(k, FillState{});
            fill_queue_.push_back(k);
          }
        }
      };
      auto adaptive = [&] {
        if (monitor_.window_filled()) {
          bool was = controller_.enabled();
          bool now = controller_.update(monitor_.rate());
          if (was && !now) {
            stats_.disabled_at_lookup = stats_.cache_hits + stats_.cache_misses;
            OFFMEM_LOG_INFO("dynamic cache disabled at hit rate %.3f", monitor_.rate());
          }
        }
      };
      if (auto pin = table_.pin(key)) {
        monitor_.record(true);
        stats_.cache_hits++;
        mark_adjacent();
        recent_.push(page_id);
        adaptive();
        lk.unlock();
        serve_from_slot(ctx, pin->slot, group * eb);
        table_.release(pin->slot);
        return false;
      }
      auto fit = fills_.find(key);
      if (fit != fills_.end()) {
        // fill already under way; served from the cache once it lands
        fit->second.parked.push_back(ctx);
        monitor_.record(true);
        stats_.cache_hits++;
        stats_.parked_on_fill++;
        mark_adjacent();
        recent_.push(page_id);
        adaptive();
        return false;
      }
      monitor_.record(false);
      stats_.cache_misses++;
      mark_adjacent();
      recent_.push(page_id);
      adaptive();
    }
  }

  std::uint64_t tag;
  try {
    tag = register_inflight_locked(lk, InFlight{false, ctx, nullptr}, !from_intake);
  } catch (const Error& e) {
    if (lk.owns_lock()) lk.unlock();
    respond_error(ctx.client, ctx.region, ctx.page, e.code());
    return false;
  }
  stats_.forwarded_reads++;
  OneSidedOp op;
  op.is_write = false;
  op.target = RemoteRef{memd_, dir.rkey};
  op.offset = ctx.byte_begin;
  op.length = ctx.size;
  op.tag = tag;
  OpMeta meta{TrafficClass::on_demand, ctx.client};
  lk.unlock();
  if (batch) {
    batch->push_back(std::move(op));
    metas->push_back(meta);
  } else {
    net_ep_.post(std::move(op), meta);
  }
  return true;
}

void DpuAgent::process_write(const Message& msg,
                             std::vector<std::shared_ptr<PendingWrite>>* staged) {
  proto::WriteRequest req;
  try {
    req = proto::decode_write(msg.payload);
  } catch (const Error& e) {
    respond_error(msg.sender, 0, 0, e.code());
    return;
  }
  DirEntry dir;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    stats_.requests++;
    stats_.write_requests++;
    stats_.per_client[msg.sender].requests++;
    auto it = directory_.find(req.region_id);
    dir = it == directory_.end() ? DirEntry{} : it->second;
  }
  if (dir.chunk_size == 0) {
    respond_error(msg.sender, req.region_id, req.page_offset, Errc::unknown_region);
    return;
  }
  if (!dir.writer || *dir.writer != msg.sender) {
    respond_error(msg.sender, req.region_id, req.page_offset, Errc::coherence);
    return;
  }
  try {
    proto::validate_extent(req.page_offset, req.data.size(), dir.length, dir.chunk_size);
  } catch (const Error& e) {
    respond_error(msg.sender, req.region_id, req.page_offset, e.code());
    return;
  }

  auto pw = std::make_shared<PendingWrite>();
  pw->region = req.region_id;
  pw->begin = req.page_offset * dir.chunk_size;
  pw->end = pw->begin + req.data.size();
  pw->data = std::move(req.data);
  pw->acks.emplace_back(msg.sender, req.page_offset);

  std::lock_guard<std::mutex> g(st_mu_);
  // fresher bytes are on their way; matching cache entries must not serve
  std::uint32_t eb = table_.entry_bytes();
  for (std::uint64_t gi = pw->begin / eb; gi <= (pw->end - 1) / eb; gi++) {
    std::uint64_t key = group_key(pw->region, gi);
    table_.invalidate(key);
    auto fit = fills_.find(key);
    if (fit != fills_.end()) fit->second.poisoned = true;
  }
  pending_writes_.push_back(pw);
  staged->push_back(pw);
}

void DpuAgent::dispatch_write(std::shared_ptr<PendingWrite> pw, std::vector<OneSidedOp>* batch,
                              std::vector<OpMeta>* metas, bool from_intake) {
  std::unique_lock<std::mutex> lk(st_mu_);
  for (auto& other : pending_writes_) {
    if (other == pw) break;  // only writes ordered before this one
    if (other->region == pw->region && other->begin < pw->end && pw->begin < other->end) {
      other->parked_writes.push_back(pw);
      return;
    }
  }
  auto dit = directory_.find(pw->region);
  if (dit == directory_.end()) {
    pending_writes_.erase(std::remove(pending_writes_.begin(), pending_writes_.end(), pw),
                          pending_writes_.end());
    auto acks = pw->acks;
    lk.unlock();
    for (auto& [client, page] : acks) respond_error(client, pw->region, page, Errc::unknown_region);
    return;
  }
  Rkey rkey = dit->second.rkey;
  std::uint64_t tag;
  try {
    tag = register_inflight_locked(lk, InFlight{true, {}, pw}, !from_intake);
  } catch (const Error& e) {
    pending_writes_.erase(std::remove(pending_writes_.begin(), pending_writes_.end(), pw),
                          pending_writes_.end());
    auto acks = pw->acks;
    lk.unlock();
    for (auto& [client, page] : acks) respond_error(client, pw->region, page, e.code());
    return;
  }
  pw->posted = true;
  stats_.server_writes++;
  OneSidedOp op;
  op.is_write = true;
  op.target = RemoteRef{memd_, rkey};
  op.offset = pw->begin;
  op.data = std::move(pw->data);
  op.tag = tag;
  OpMeta meta{TrafficClass::on_demand, pw->acks.front().first};
  lk.unlock();
  if (batch) {
    batch->push_back(std::move(op));
    metas->push_back(meta);
  } else {
    net_ep_.post(std::move(op), meta);
  }
}

// ---- stage B ----

void DpuAgent::stage_b_loop() {
  while (auto c = net_ep_.poll()) {
    if (c->is_write)
      complete_write(c->tag);
    else
      complete_read(c->tag, std::move(c->data));
  }
}

void DpuAgent::complete_read(std::uint64_t tag, Bytes data) {
  ReadCtx ctx;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    auto it = inflight_.find(tag);
    if (it == inflight_.end()) return;
    ctx = it->second.read;
    inflight_.erase(it);
  }
  st_cv_.notify_all();
  // the staged server buffer becomes the response payload untouched
  respond_data(ctx, std::move(data));
}

void DpuAgent::complete_write(std::uint64_t tag) {
  std::shared_ptr<PendingWrite> pw;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    auto it = inflight_.find(tag);
    if (it == inflight_.end()) return;
    pw = it->second.write;
    inflight_.erase(it);
    pending_writes_.erase(std::remove(pending_writes_.begin(), pending_writes_.end(), pw),
                          pending_writes_.end());
    stats_.write_acks += pw->acks.size();
    // a fill scheduled after the intake-time invalidation may have fetched
    // pre-write bytes; kill anything it installed or is about to install
    std::uint32_t eb = table_.entry_bytes();
    for (std::uint64_t gi = pw->begin / eb; gi <= (pw->end - 1) / eb; gi++) {
      std::uint64_t key = group_key(pw->region, gi);
      table_.invalidate(key);
      auto fit = fills_.find(key);
      if (fit != fills_.end()) fit->second.poisoned = true;
    }
  }
  st_cv_.notify_all();
  for (auto& [client, page] : pw->acks) {
    host_ep_.send(client, proto::kImmWriteAck,
                  proto::encode_write_ack({pw->region, page}),
                  OpMeta{TrafficClass::on_demand, client});
    std::lock_guard<std::mutex> g(st_mu_);
    stats_.per_client[client].responses++;
  }
  // writes first: a parked read that followed one of them must see its bytes
  for (auto& w : pw->parked_writes) dispatch_write(w, nullptr, nullptr);
  for (auto& r : pw->parked_reads) dispatch_read(r, nullptr, nullptr);
}

// ---- prefetcher ----

void DpuAgent::prefetch_loop() {
  std::uint64_t cursor = 0;
  while (!stop_) {
    recent_.wait_new(&cursor, stop_);
    if (stop_) break;
    bool progress = true;
    while (progress && !stop_) {
      progress = false;
      struct Job {
        std::uint64_t key;
        std::uint32_t slot;
        std::uint64_t begin;
        std::uint64_t len;
      };
      std::vector<Job> jobs;
      std::vector<OneSidedOp> ops;
      Rkey rkey = 0;
      bool requeued = false;
      {
        std::lock_guard<std::mutex> g(st_mu_);
        std::size_t scan = fill_queue_.size();
        while (scan-- > 0 && jobs.size() < 8) {
          std::uint64_t key = fill_queue_.front();
          fill_queue_.pop_front();
          auto it = fills_.find(key);
          if (it == fills_.end()) continue;
          if (it->second.fetching) continue;
          bool keep = controller_.enabled() || !it->second.parked.empty();
          if (!keep) {
            fills_.erase(it);
            continue;
          }
          std::uint16_t region = std::uint16_t(key >> 48);
          std::uint64_t group = key & ((1ull << 48) - 1);
          auto dit = directory_.find(region);
          if (dit == directory_.end()) {
            auto parked = std::move(it->second.parked);
            fills_.erase(it);
            for (auto& ctx : parked)
              // region vanished; answered below without the lock
              orphaned_.push_back(ctx);
            continue;
          }
          std::uint64_t eb = table_.entry_bytes();
          std::uint64_t begin = group * eb;
          std::uint64_t len = std::min<std::uint64_t>(eb, dit->second.length - begin);
          auto slot = table_.allocate_slot();
          if (!slot) {  // everything pinned right now; retry shortly
            fill_queue_.push_back(key);
            requeued = true;
            break;
          }
          it->second.fetching = true;
          // jobs in one pass share the region's memory node by construction
          if (!jobs.empty() && dit->second.rkey != rkey) {
            // different rkey cannot share a batch target; push back for later
            table_.free_slot(*slot);
            it->second.fetching = false;
            fill_queue_.push_back(key);
            requeued = true;
            continue;
          }
          rkey = dit->second.rkey;
          OneSidedOp op;
          op.target = RemoteRef{memd_, rkey};
          op.offset = begin;
          op.length = len;
          jobs.push_back(Job{key, *slot, begin, len});
          ops.push_back(std::move(op));
        }
      }
      std::vector<ReadCtx> orphans;
      {
        std::lock_guard<std::mutex> g(st_mu_);
        orphans.swap(orphaned_);
      }
      for (auto& ctx : orphans) respond_error(ctx.client, ctx.region, ctx.page, Errc::unknown_region);

      if (jobs.empty()) {
        if (requeued) std::this_thread::sleep_for(std::chrono::microseconds(100));
        break;
      }
      progress = true;

      std::vector<Bytes> datas;
      try {
        std::lock_guard<std::mutex> io(prefetch_io_mu_);
        datas = prefetch_ep_.read_batch_sync(std::move(ops),
                                             OpMeta{TrafficClass::background, 0});
      } catch (const Error&) {
        // fetch failed (shutdown or region torn down); unwind the jobs
        for (auto& j : jobs) {
          std::vector<ReadCtx> parked;
          {
            std::lock_guard<std::mutex> g(st_mu_);
            auto it = fills_.find(j.key);
            if (it != fills_.end()) {
              parked = std::move(it->second.parked);
              fills_.erase(it);
            }
          }
          table_.free_slot(j.slot);
          for (auto& ctx : parked) dispatch_read(ctx, nullptr, nullptr);
        }
        continue;
      }

      for (std::size_t i = 0; i < jobs.size(); i++) {
        Job& j = jobs[i];
        table_.install(j.slot, j.key, datas[i]);
        std::vector<ReadCtx> parked;
        bool poisoned;
        {
          std::lock_guard<std::mutex> g(st_mu_);
          auto it = fills_.find(j.key);
          poisoned = it == fills_.end() || it->second.poisoned;
          if (it != fills_.end()) {
            parked = std::move(it->second.parked);
            fills_.erase(it);
          }
          if (!poisoned) {
            stats_.prefetch_fills++;
            stats_.prefetch_fill_bytes += datas[i].size();
          }
        }
        if (poisoned) {
          table_.invalidate(j.key);
          for (auto& ctx : parked) dispatch_read(ctx, nullptr, nullptr);
          continue;
        }
        for (auto& ctx : parked) {
          if (auto pin = table_.pin(j.key)) {
            serve_from_slot(ctx, pin->slot, j.begin);
            table_.release(pin->slot);
          } else {
            dispatch_read(ctx, nullptr, nullptr);  // invalidated in between
          }
        }
      }
    }
  }
}

// ---- static cache ----

void DpuAgent::static_load(std::uint16_t region_id, std::uint64_t first_chunk,
                           std::uint64_t n_chunks) {
  if (n_chunks == 0) raise(Errc::invalid_argument, "empty static load");
  DirEntry dir;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    auto it = directory_.find(region_id);
    if (it == directory_.end()) raise(Errc::unknown_region, "static load of unknown region");
    if (it->second.writer) raise(Errc::coherence, "static cache requires a read-only region");
    dir = it->second;
  }
  std::uint64_t eb = table_.entry_bytes();
  std::uint64_t begin = first_chunk * dir.chunk_size;
  std::uint64_t end = std::min(dir.length, (first_chunk + n_chunks) * dir.chunk_size);
  if (begin >= end) raise(Errc::out_of_bounds, "static range beyond region");
  std::uint64_t g0 = begin / eb;
  std::uint64_t g1 = (end + eb - 1) / eb;
  std::uint64_t covered_begin = g0 * eb;
  std::uint64_t covered_end = std::min(dir.length, g1 * eb);

  // reserve first: a failed budget check must not pin anything
  std::uint32_t base = table_.reserve_static(std::uint32_t(g1 - g0));

  std::vector<OneSidedOp> ops;
  for (std::uint64_t g = g0; g < g1; g++) {
    OneSidedOp op;
    op.target = RemoteRef{memd_, dir.rkey};
    op.offset = g * eb;
    op.length = std::min(eb, dir.length - g * eb);
    ops.push_back(std::move(op));
  }
  std::vector<Bytes> datas;
  {
    std::lock_guard<std::mutex> io(prefetch_io_mu_);
    datas = prefetch_ep_.read_batch_sync(std::move(ops), OpMeta{TrafficClass::background, 0});
  }
  for (std::size_t i = 0; i < datas.size(); i++)
    table_.install_static(base + std::uint32_t(i), datas[i]);

  proto::StaticCacheInfo info;
  info.region_id = region_id;
  info.covered_begin = covered_begin;
  info.covered_end = covered_end;
  info.store_offset = std::uint64_t(base) * eb;
  info.entry_bytes = std::uint32_t(eb);
  info.cache_rkey = table_.store_rkey();
  std::vector<std::uint32_t> clients;
  {
    std::lock_guard<std::mutex> g(st_mu_);
    static_infos_[region_id] = info;
    clients.assign(clients_.begin(), clients_.end());
  }
  for (auto c : clients)
    host_ep_.send(c, proto::kImmControl, proto::encode_control(info),
                  OpMeta{TrafficClass::on_demand, c});
}

}  // namespace offmem
