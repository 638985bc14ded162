#include "offmem/fabric.hpp"

#include <algorithm>
#include <atomic>

namespace offmem {

std::vector<Bytes> Endpoint::read_batch_sync(std::vector<OneSidedOp> reads, const OpMeta& meta) {
  std::size_t n = reads.size();
  for (std::size_t i = 0; i < n; i++) {
    reads[i].is_write = false;
    reads[i].tag = i;
  }
  post_batch(std::move(reads), meta);
  std::vector<Bytes> out(n);
  for (std::size_t i = 0; i < n; i++) {
    auto c = poll();
    if (!c) raise(Errc::shutdown, "endpoint closed while waiting for batch");
    if (c->tag >= n) raise(Errc::remote_error, "stray completion tag");
    out[c->tag] = std::move(c->data);
  }
  return out;
}

namespace {

struct RegionRec {
  std::uint64_t length = 0;
  SparseByteStore store;
  std::optional<std::set<EndpointId>> writers;  // nullopt = unrestricted
  explicit RegionRec(std::uint64_t len) : length(len), store(len) {}
};

}  // namespace

struct InProcFabric::EpState {
  EndpointId id = 0;
  Site site = Site::host;
  std::string name;
  std::uint64_t capacity = UINT64_MAX;
  std::uint64_t used = 0;

  SyncQueue<Message> rq;
  SyncQueue<Completion> cq;

  mutable std::mutex regions_mu;
  std::map<Rkey, RegionRec> regions;
  Rkey next_rkey = 0x1000;

  std::mutex hold_mu;
  bool hold = false;
  std::vector<Completion> held;
};

class InProcEndpoint final : public Endpoint {
 public:
  InProcEndpoint(InProcFabric* hub, InProcFabric::EpState* st) : hub_(hub), st_(st) {}

  EndpointId id() const override { return st_->id; }
  Site site() const override { return st_->site; }

  void close() override {
    st_->rq.close();
    st_->cq.close();
  }

  void send(EndpointId to, std::uint32_t immediate, Bytes payload, const OpMeta& meta) override {
    if (payload.size() > hub_->cfg_.max_message_bytes)
      raise(Errc::message_too_large, "payload exceeds max message size");
    auto* dst = hub_->find_state(to);
    if (!dst) raise(Errc::invalid_argument, "unknown destination endpoint");
    hub_->account(st_->site, dst->site, OpRecord::Kind::send, st_->id, to, payload.size(), 1,
                  meta);
    dst->rq.push(Message{std::move(payload), immediate, st_->id});
  }

  void send_batch(EndpointId to, std::vector<OutMessage> msgs, const OpMeta& meta) override {
    if (msgs.empty()) raise(Errc::empty_batch, "send_batch of zero messages");
    auto* dst = hub_->find_state(to);
    if (!dst) raise(Errc::invalid_argument, "unknown destination endpoint");
    std::uint64_t payload = 0;
    for (auto& m : msgs) {
      if (m.payload.size() > hub_->cfg_.max_message_bytes)
        raise(Errc::message_too_large, "payload exceeds max message size");
      payload += m.payload.size();
    }
    hub_->account(st_->site, dst->site, OpRecord::Kind::send_batch, st_->id, to, payload,
                  std::uint32_t(msgs.size()), meta);
    for (auto& m : msgs) dst->rq.push(Message{std::move(m.payload), m.immediate, st_->id});
  }

  std::optional<Message> recv() override { return st_->rq.pop(); }
  std::optional<Message> try_recv() override { return st_->rq.try_pop(); }
  std::size_t pending_messages() const override { return st_->rq.size(); }

  RemoteRef register_region(std::uint64_t length) override {
    if (length == 0) raise(Errc::invalid_argument, "empty region");
    std::lock_guard<std::mutex> g(st_->regions_mu);
    if (length > st_->capacity - std::min(st_->used, st_->capacity))
      raise(Errc::capacity_exceeded, "endpoint region capacity exceeded");
    Rkey k = st_->next_rkey++;
    st_->regions.emplace(k, RegionRec(length));
    st_->used += length;
    return RemoteRef{st_->id, k};
  }

  void unregister_region(Rkey rkey) override {
    std::lock_guard<std::mutex> g(st_->regions_mu);
    auto it = st_->regions.find(rkey);
    if (it == st_->regions.end()) raise(Errc::protection_fault, "unknown rkey");
    st_->used -= it->second.length;
    st_->regions.erase(it);
  }

  void restrict_writers(Rkey rkey, std::optional<std::set<EndpointId>> writers) override {
    std::lock_guard<std::mutex> g(st_->regions_mu);
    auto it = st_->regions.find(rkey);
    if (it == st_->regions.end()) raise(Errc::protection_fault, "unknown rkey");
    it->second.writers = std::move(writers);
  }

  void local_write(Rkey rkey, std::uint64_t offset, ByteSpan data) override {
    std::lock_guard<std::mutex> g(st_->regions_mu);
    auto it = st_->regions.find(rkey);
    if (it == st_->regions.end()) raise(Errc::protection_fault, "unknown rkey");
    if (offset > it->second.length || data.size() > it->second.length - offset)
      raise(Errc::protection_fault, "local write out of bounds");
    it->second.store.write(offset, data);
  }

  Bytes local_read(Rkey rkey, std::uint64_t offset, std::uint64_t length) const override {
    std::lock_guard<std::mutex> g(st_->regions_mu);
    auto it = st_->regions.find(rkey);
    if (it == st_->regions.end()) raise(Errc::protection_fault, "unknown rkey");
    if (offset > it->second.length || length > it->second.length - offset)
      raise(Errc::protection_fault, "local read out of bounds");
    return it->second.store.read(offset, length);
  }

  Bytes read_remote(const RemoteRef& r, std::uint64_t offset, std::uint64_t length,
                    const OpMeta& meta) override {
    Bytes out = hub_->one_sided_read(st_->id, r, offset, length);
    auto* owner = hub_->find_state(r.owner);
    hub_->account(st_->site, owner->site, OpRecord::Kind::os_read, st_->id, r.owner, length, 1,
                  meta);
    return out;
  }

  void write_remote(const RemoteRef& r, std::uint64_t offset, ByteSpan data,
                    const OpMeta& meta) override {
    hub_->one_sided_write(st_->id, r, offset, data);
    auto* owner = hub_->find_state(r.owner);
    hub_->account(st_->site, owner->site, OpRecord::Kind::os_write, st_->id, r.owner,
                  data.size(), 1, meta);
  }

  void post(OneSidedOp op, const OpMeta& meta) override {
    Completion c;
    c.tag = op.tag;
    c.is_write = op.is_write;
    if (op.is_write) {
      hub_->one_sided_write(st_->id, op.target, op.offset, op.data);
    } else {
      c.data = hub_->one_sided_read(st_->id, op.target, op.offset, op.length);
      // headroom so a forwarder can append a trailer without reallocating
      c.data.reserve(c.data.size() + 16);
    }
    auto* owner = hub_->find_state(op.target.owner);
    hub_->account(st_->site, owner->site,
                  op.is_write ? OpRecord::Kind::os_write : OpRecord::Kind::os_read, st_->id,
                  op.target.owner, op.is_write ? op.data.size() : op.length, 1, meta);
    hub_->deliver(st_, std::move(c));
  }

  void post_batch(std::vector<OneSidedOp> ops, const OpMeta& meta) override {
    if (ops.empty()) raise(Errc::empty_batch, "post_batch of zero ops");
    // a batch is posted toward one peer and traverses one link
    EndpointId owner_id = ops.front().target.owner;
    std::uint64_t payload = 0;
    for (auto& op : ops) {
      if (op.target.owner != owner_id)
        raise(Errc::invalid_argument, "batch spans multiple peers");
      payload += op.is_write ? op.data.size() : op.length;
    }
    std::vector<Completion> cs;
    cs.reserve(ops.size());
    for (auto& op : ops) {
      Completion c;
      c.tag = op.tag;
      c.is_write = op.is_write;
      if (op.is_write) {
        hub_->one_sided_write(st_->id, op.target, op.offset, op.data);
      } else {
        c.data = hub_->one_sided_read(st_->id, op.target, op.offset, op.length);
        c.data.reserve(c.data.size() + 16);
      }
      cs.push_back(std::move(c));
    }
    auto* owner = hub_->find_state(owner_id);
    hub_->account(st_->site, owner->site, OpRecord::Kind::os_batch, st_->id, owner_id, payload,
                  std::uint32_t(ops.size()), meta);
    for (auto& c : cs) hub_->deliver(st_, std::move(c));
  }

  std::optional<Completion> poll() override { return st_->cq.pop(); }

 private:
  InProcFabric* hub_;
  InProcFabric::EpState* st_;
};

// ---- hub ----

InProcFabric::InProcFabric(FabricConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.intra.name = "intra";
  cfg_.net.name = "net";
  if (cfg_.intra.bandwidth_bytes_per_sec <= 0 || cfg_.net.bandwidth_bytes_per_sec <= 0)
    raise(Errc::config_error, "link bandwidth must be positive");
  if (cfg_.intra.latency_sec < 0 || cfg_.net.latency_sec < 0)
    raise(Errc::config_error, "link latency must be non-negative");
}

InProcFabric::~InProcFabric() {
  for (auto& ep : eps_) {
    ep->rq.close();
    ep->cq.close();
  }
}

Endpoint& InProcFabric::create_endpoint(Site site, std::string name, std::uint64_t capacity) {
  static std::atomic<EndpointId> next_id{1};
  auto st = std::make_unique<EpState>();
  st->id = next_id.fetch_add(1);
  st->site = site;
  st->name = std::move(name);
  st->capacity = capacity;
  EpState* raw = st.get();
  auto facade = std::make_unique<InProcEndpoint>(this, raw);
  Endpoint* out = facade.get();
  std::lock_guard<std::mutex> g(mu_);
  eps_.push_back(std::move(st));
  facades_.push_back(std::move(facade));
  return *out;
}

InProcFabric::EpState* InProcFabric::find_state(EndpointId id) const {
  std::lock_guard<std::mutex> g(mu_);
  for (auto& e : eps_)
    if (e->id == id) return e.get();
  return nullptr;
}

void InProcFabric::hold_completions(EndpointId ep, bool held) {
  EpState* st = find_state(ep);
  if (!st) raise(Errc::invalid_argument, "unknown endpoint");
  std::vector<Completion> flush;
  {
    std::lock_guard<std::mutex> g(st->hold_mu);
    st->hold = held;
    if (!held) flush.swap(st->held);
  }
  for (auto& c : flush) st->cq.push(std::move(c));
}

void InProcFabric::deliver(EpState* ep, Completion c) {
  {
    std::lock_guard<std::mutex> g(ep->hold_mu);
    if (ep->hold) {
      ep->held.push_back(std::move(c));
      return;
    }
  }
  ep->cq.push(std::move(c));
}

Bytes InProcFabric::one_sided_read(EndpointId from, const RemoteRef& r, std::uint64_t offset,
                                   std::uint64_t length) {
  (void)from;
  EpState* owner = find_state(r.owner);
  if (!owner) raise(Errc::protection_fault, "unknown region owner");
  std::lock_guard<std::mutex> g(owner->regions_mu);
  auto it = owner->regions.find(r.rkey);
  if (it == owner->regions.end()) raise(Errc::protection_fault, "unknown rkey");
  if (offset > it->second.length || length > it->second.length - offset)
    raise(Errc::protection_fault, "one-sided read out of bounds");
  return it->second.store.read(offset, length);
}

void InProcFabric::one_sided_write(EndpointId from, const RemoteRef& r, std::uint64_t offset,
                                   ByteSpan data) {
  EpState* owner = find_state(r.owner);
  if (!owner) raise(Errc::protection_fault, "unknown region owner");
  std::lock_guard<std::mutex> g(owner->regions_mu);
  auto it = owner->regions.find(r.rkey);
  if (it == owner->regions.end()) raise(Errc::protection_fault, "unknown rkey");
  RegionRec& reg = it->second;
  if (offset > reg.length || data.size() > reg.length - offset)
    raise(Errc::protection_fault, "one-sided write out of bounds");
  if (reg.writers && !reg.writers->count(from))
    raise(Errc::coherence, "endpoint lacks write access to region");
  reg.store.write(offset, data);
}

CounterSnapshot InProcFabric::counters() const {
  std::lock_guard<std::mutex> g(mu_);
  CounterSnapshot s;
  s.links = counters_;
  return s;
}

void InProcFabric::reset_counters() {
  std::lock_guard<std::mutex> g(mu_);
  counters_.clear();
}

void InProcFabric::set_observer(OpObserver obs) {
  std::lock_guard<std::mutex> g(observer_mu_);
  observer_ = std::move(obs);
}

void InProcFabric::account(Site from, Site to, OpRecord::Kind kind, EndpointId fid,
                           EndpointId tid, std::uint64_t payload, std::uint32_t ops,
                           const OpMeta& meta) {
  const LinkProfile& lp = link_for(from, to);
  std::uint64_t bytes = payload + kHeaderOverheadBytes;
  {
    std::lock_guard<std::mutex> g(mu_);
    LinkCounters& c = counters_[lp.name];
    if (meta.cls == TrafficClass::on_demand)
      c.bytes_on_demand += bytes;
    else
      c.bytes_background += bytes;
    c.messages += ops;
    if (kind == OpRecord::Kind::send_batch || kind == OpRecord::Kind::os_batch) c.batches += 1;
    c.modeled_time_sec += lp.transfer_time(payload);
    c.client_bytes[meta.client] += bytes;
  }
  OpObserver obs;
  {
    std::lock_guard<std::mutex> g(observer_mu_);
    obs = observer_;
  }
  if (obs) obs(OpRecord{kind, lp.name, fid, tid, payload, kHeaderOverheadBytes, ops, meta});
}

}  // namespace offmem
