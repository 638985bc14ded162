#include "offmem/fabric_tcp.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstring>
#include <thread>
#include <unordered_map>

namespace offmem {

namespace {

constexpr std::uint32_t kImmHello = 0xFFFF0001u;
constexpr std::uint32_t kImmOsReadReq = 0xFFFF0002u;
constexpr std::uint32_t kImmOsReadResp = 0xFFFF0003u;
constexpr std::uint32_t kImmOsWriteReq = 0xFFFF0004u;
constexpr std::uint32_t kImmOsWriteResp = 0xFFFF0005u;

struct RegionRec {
  std::uint64_t length = 0;
  SparseByteStore store;
  std::optional<std::set<EndpointId>> writers;
  explicit RegionRec(std::uint64_t len) : length(len), store(len) {}
};

bool write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w <= 0) return false;
    p += w;
    n -= std::size_t(w);
  }
  return true;
}

bool read_all(int fd, std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    ssize_t r = ::read(fd, p, n);
    if (r <= 0) return false;
    p += r;
    n -= std::size_t(r);
  }
  return true;
}

sockaddr_in parse_addr(const std::string& addr) {
  auto colon = addr.rfind(':');
  if (colon == std::string::npos) raise(Errc::config_error, "address must be host:port");
  std::string host = addr.substr(0, colon);
  int port = std::atoi(addr.c_str() + colon + 1);
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(std::uint16_t(port));
  if (host == "0.0.0.0" || host.empty())
    sa.sin_addr.s_addr = htonl(INADDR_ANY);
  else if (host == "localhost")
    sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  else if (inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1)
    raise(Errc::config_error, "cannot parse address " + host);
  return sa;
}

struct PendingOs {
  std::mutex mu;
  std::condition_variable cv;
  bool done = false;
  bool ok = false;
  Errc err = Errc::ok;
  Bytes data;
  bool is_async = false;
  bool is_write = false;
  std::uint64_t user_tag = 0;
};

}  // namespace

class TcpEndpoint;

struct TcpFabric::Impl {
  std::mutex mu;
  std::vector<std::unique_ptr<TcpEndpoint>> eps;
  std::map<std::string, LinkCounters> counters;
  OpObserver observer;
  std::mutex observer_mu;
  std::atomic<EndpointId> next_ep_id{1};
};

class TcpEndpoint final : public Endpoint {
 public:
  struct Conn {
    int fd = -1;
    EndpointId alias = 0;
    Site peer_site = Site::host;
    std::mutex write_mu;
    std::thread reader;
    std::atomic<bool> open{true};
  };

  TcpEndpoint(TcpFabric* hub, EndpointId id, Site site) : hub_(hub), id_(id), site_(site) {}

  ~TcpEndpoint() override { close(); }

  EndpointId id() const override { return id_; }
  Site site() const override { return site_; }

  void start_listen(const std::string& bind_addr) {
    sockaddr_in sa = parse_addr(bind_addr);
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    int one = 1;
    setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
      raise(Errc::config_error, "cannot bind " + bind_addr);
    ::listen(listen_fd_, 16);
    socklen_t len = sizeof sa;
    getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    port_ = ntohs(sa.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  EndpointId add_connection(const std::string& addr, Site peer_site) {
    sockaddr_in sa = parse_addr(addr);
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
      ::close(fd);
      raise(Errc::config_error, "cannot connect " + addr);
    }
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    auto conn = register_conn(fd, peer_site);
    // announce our site so the acceptor can resolve the link
    Bytes hello(1);
    hello[0] = std::uint8_t(site_);
    send_frame(*conn, kImmHello, hello);
    return conn->alias;
  }

  std::uint16_t port() const { return port_; }

  void close() override {
    bool was = closed_.exchange(true);
    if (!was) {
      if (listen_fd_ >= 0) ::shutdown(listen_fd_, SHUT_RDWR);
      if (listen_fd_ >= 0) ::close(listen_fd_);
      std::vector<std::shared_ptr<Conn>> conns;
      {
        std::lock_guard<std::mutex> g(mu_);
        for (auto& [a, c] : conns_) conns.push_back(c);
      }
      for (auto& c : conns)
        if (c->open.exchange(false)) ::shutdown(c->fd, SHUT_RDWR);
      rq_.close();
      cq_.close();
    }
    if (acceptor_.joinable() && std::this_thread::get_id() != acceptor_.get_id()) acceptor_.join();
    std::vector<std::shared_ptr<Conn>> conns;
    {
      std::lock_guard<std::mutex> g(mu_);
      for (auto& [a, c] : conns_) conns.push_back(c);
    }
    for (auto& c : conns)
      if (c->reader.joinable() && std::this_thread::get_id() != c->reader.get_id())
        c->reader.join();
  }

  void send(EndpointId to, std::uint32_t immediate, Bytes payload, const OpMeta& meta) override {
    if (payload.size() > kDefaultMaxMessageBytes)
      raise(Errc::message_too_large, "payload exceeds max message size");
    auto conn = find_conn(to);
    hub_->account(site_, conn->peer_site, OpRecord::Kind::send, payload.size(), 1, meta);
    send_frame(*conn, immediate, payload);
  }

  void send_batch(EndpointId to, std::vector<OutMessage> msgs, const OpMeta& meta) override {
    if (msgs.empty()) raise(Errc::empty_batch, "send_batch of zero messages");
    auto conn = find_conn(to);
    std::uint64_t payload = 0;
    for (auto& m : msgs) payload += m.payload.size();
    hub_->account(site_, conn->peer_site, OpRecord::Kind::send_batch, payload,
                  std::uint32_t(msgs.size()), meta);
    std::lock_guard<std::mutex> g(conn->write_mu);
    for (auto& m : msgs) send_frame_locked(*conn, m.immediate, m.payload);
  }

  std::optional<Message> recv() override { return rq_.pop(); }
  std::optional<Message> try_recv() override { return rq_.try_pop(); }
  std::size_t pending_messages() const override { return rq_.size(); }

  RemoteRef register_region(std::uint64_t length) override {
    if (length == 0) raise(Errc::invalid_argument, "empty region");
    std::lock_guard<std::mutex> g(regions_mu_);
    Rkey k = next_rkey_++;
    regions_.emplace(k, RegionRec(length));
    return RemoteRef{id_, k};
  }

  void unregister_region(Rkey rkey) override {
    std::lock_guard<std::mutex> g(regions_mu_);
    if (!regions_.erase(rkey)) raise(Errc::protection_fault, "unknown rkey");
  }

  void restrict_writers(Rkey rkey, std::optional<std::set<EndpointId>> writers) override {
    std::lock_guard<std::mutex> g(regions_mu_);
    auto it = regions_.find(rkey);
    if (it == regions_.end()) raise(Errc::protection_fault, "unknown rkey");
    it->second.writers = std::move(writers);
  }

  void local_write(Rkey rkey, std::uint64_t offset, ByteSpan data) override {
    std::lock_guard<std::mutex> g(regions_mu_);
    auto it = regions_.find(rkey);
    if (it == regions_.end()) raise(Errc::protection_fault, "unknown rkey");
    if (offset > it->second.length || data.size() > it->second.length - offset)
      raise(Errc::protection_fault, "local write out of bounds");
    it->second.store.write(offset, data);
  }

  Bytes local_read(Rkey rkey, std::uint64_t offset, std::uint64_t length) const override {
    std::lock_guard<std::mutex> g(regions_mu_);
    auto it = regions_.find(rkey);
    if (it == regions_.end()) raise(Errc::protection_fault, "unknown rkey");
    if (offset > it->second.length || length > it->second.length - offset)
      raise(Errc::protection_fault, "local read out of bounds");
    return it->second.store.read(offset, length);
  }

  Bytes read_remote(const RemoteRef& r, std::uint64_t offset, std::uint64_t length,
                    const OpMeta& meta) override {
    auto conn = find_conn(r.owner);
    auto pend = std::make_shared<PendingOs>();
    std::uint64_t req = enroll(pend);
    hub_->account(site_, conn->peer_site, OpRecord::Kind::os_read, length, 1, meta);
    Bytes b(8 + 4 + 8 + 8);
    put_u64le(b.data(), req);
    put_u32le(b.data() + 8, r.rkey);
    put_u64le(b.data() + 12, offset);
    put_u64le(b.data() + 20, length);
    send_frame(*conn, kImmOsReadReq, b);
    std::unique_lock<std::mutex> lk(pend->mu);
    pend->cv.wait(lk, [&] { return pend->done; });
    if (!pend->ok) raise(pend->err, "remote read failed");
    return std::move(pend->data);
  }

  void write_remote(const RemoteRef& r, std::uint64_t offset, ByteSpan data,
                    const OpMeta& meta) override {
    auto conn = find_conn(r.owner);
    auto pend = std::make_shared<PendingOs>();
    std::uint64_t req = enroll(pend);
    hub_->account(site_, conn->peer_site, OpRecord::Kind::os_write, data.size(), 1, meta);
    Bytes b(8 + 4 + 8 + data.size());
    put_u64le(b.data(), req);
    put_u32le(b.data() + 8, r.rkey);
    put_u64le(b.data() + 12, offset);
    std::memcpy(b.data() + 20, data.data(), data.size());
    send_frame(*conn, kImmOsWriteReq, b);
    std::unique_lock<std::mutex> lk(pend->mu);
    pend->cv.wait(lk, [&] { return pend->done; });
    if (!pend->ok) raise(pend->err, "remote write failed");
  }

  void post(OneSidedOp op, const OpMeta& meta) override { post_one(op, meta, false); }

  void post_batch(std::vector<OneSidedOp> ops, const OpMeta& meta) override {
    if (ops.empty()) raise(Errc::empty_batch, "post_batch of zero ops");
    EndpointId owner = ops.front().target.owner;
    std::uint64_t payload = 0;
    for (auto& op : ops) {
      if (op.target.owner != owner) raise(Errc::invalid_argument, "batch spans multiple peers");
      payload += op.is_write ? op.data.size() : op.length;
    }
    auto conn = find_conn(owner);
    hub_->account(site_, conn->peer_site, OpRecord::Kind::os_batch, payload,
                  std::uint32_t(ops.size()), meta);
    for (auto& op : ops) post_one(op, meta, true);
  }

  std::optional<Completion> poll() override { return cq_.pop(); }

  void hold_completions(bool held) {
    std::vector<Completion> flush;
    {
      std::lock_guard<std::mutex> g(hold_mu_);
      hold_ = held;
      if (!held) flush.swap(held_);
    }
    for (auto& c : flush) cq_.push(std::move(c));
  }

 private:
  void post_one(OneSidedOp& op, const OpMeta& meta, bool accounted) {
    auto conn = find_conn(op.target.owner);
    auto pend = std::make_shared<PendingOs>();
    pend->is_async = true;
    pend->is_write = op.is_write;
    pend->user_tag = op.tag;
    std::uint64_t req = enroll(pend);
    if (!accounted)
      hub_->account(site_, conn->peer_site,
                    op.is_write ? OpRecord::Kind::os_write : OpRecord::Kind::os_read,
                    op.is_write ? op.data.size() : op.length, 1, meta);
    if (op.is_write) {
      Bytes b(20 + op.data.size());
      put_u64le(b.data(), req);
      put_u32le(b.data() + 8, op.target.rkey);
      put_u64le(b.data() + 12, op.offset);
      std::memcpy(b.data() + 20, op.data.data(), op.data.size());
      send_frame(*conn, kImmOsWriteReq, b);
    } else {
      Bytes b(28);
      put_u64le(b.data(), req);
      put_u32le(b.data() + 8, op.target.rkey);
      put_u64le(b.data() + 12, op.offset);
      put_u64le(b.data() + 20, op.length);
      send_frame(*conn, kImmOsReadReq, b);
    }
  }

  std::uint64_t enroll(std::shared_ptr<PendingOs> p) {
    std::lock_guard<std::mutex> g(mu_);
    std::uint64_t id = next_req_++;
    pending_[id] = std::move(p);
    return id;
  }

  std::shared_ptr<Conn> register_conn(int fd, Site peer_site) {
    auto conn = std::make_shared<Conn>();
    conn->fd = fd;
    conn->peer_site = peer_site;
    {
      std::lock_guard<std::mutex> g(mu_);
      conn->alias = next_alias_++;
      conns_[conn->alias] = conn;
    }
    conn->reader = std::thread([this, conn] { reader_loop(conn); });
    return conn;
  }

  std::shared_ptr<Conn> find_conn(EndpointId alias) {
    std::lock_guard<std::mutex> g(mu_);
    auto it = conns_.find(alias);
    if (it == conns_.end()) raise(Errc::invalid_argument, "unknown peer");
    return it->second;
  }

  void send_frame(Conn& c, std::uint32_t imm, ByteSpan payload) {
    std::lock_guard<std::mutex> g(c.write_mu);
    send_frame_locked(c, imm, payload);
  }

  void send_frame_locked(Conn& c, std::uint32_t imm, ByteSpan payload) {
    std::uint8_t hdr[8];
    put_u32le(hdr, std::uint32_t(payload.size()));
    put_u32le(hdr + 4, imm);
    if (!write_all(c.fd, hdr, 8) ||
        (!payload.empty() && !write_all(c.fd, payload.data(), payload.size())))
      raise(Errc::shutdown, "peer connection closed");
  }

  void accept_loop() {
    for (;;) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) return;
      int one = 1;
      setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      register_conn(fd, Site::host);  // refined by the hello frame
    }
  }

  void reader_loop(std::shared_ptr<Conn> conn) {
    for (;;) {
      std::uint8_t hdr[8];
      if (!read_all(conn->fd, hdr, 8)) break;
      std::uint32_t len = get_u32le(hdr);
      std::uint32_t imm = get_u32le(hdr + 4);
      Bytes payload(len);
      if (len && !read_all(conn->fd, payload.data(), len)) break;
      if (imm == kImmHello) {
        if (payload.size() == 1 && payload[0] <= 2) conn->peer_site = Site(payload[0]);
        continue;
      }
      if (imm == kImmOsReadReq || imm == kImmOsWriteReq) {
        service_os(*conn, imm, payload);
        continue;
      }
      if (imm == kImmOsReadResp || imm == kImmOsWriteResp) {
        settle_os(imm, std::move(payload));
        continue;
      }
      rq_.push(Message{std::move(payload), imm, conn->alias});
    }
    if (conn->open.exchange(false)) ::shutdown(conn->fd, SHUT_RDWR);
    ::close(conn->fd);
    fail_pending();
  }

  void service_os(Conn& conn, std::uint32_t imm, ByteSpan p) {
    if (p.size() < 20) return;
    std::uint64_t req = get_u64le(p.data());
    Rkey rkey = get_u32le(p.data() + 8);
    std::uint64_t off = get_u64le(p.data() + 12);
    Bytes reply(9);
    put_u64le(reply.data(), req);
    try {
      std::lock_guard<std::mutex> g(regions_mu_);
      auto it = regions_.find(rkey);
      if (it == regions_.end()) raise(Errc::protection_fault, "unknown rkey");
      RegionRec& reg = it->second;
      if (imm == kImmOsReadReq) {
        if (p.size() != 28) raise(Errc::decode_error, "bad read frame");
        std::uint64_t len = get_u64le(p.data() + 20);
        if (off > reg.length || len > reg.length - off)
          raise(Errc::protection_fault, "one-sided read out of bounds");
        Bytes data = reg.store.read(off, len);
        reply[8] = 1;
        reply.insert(reply.end(), data.begin(), data.end());
        send_frame(conn, kImmOsReadResp, reply);
        return;
      }
      ByteSpan data(p.data() + 20, p.size() - 20);
      if (off > reg.length || data.size() > reg.length - off)
        raise(Errc::protection_fault, "one-sided write out of bounds");
      if (reg.writers && !reg.writers->count(conn.alias))
        raise(Errc::coherence, "endpoint lacks write access to region");
      reg.store.write(off, data);
      reply[8] = 1;
      send_frame(conn, kImmOsWriteResp, reply);
    } catch (const Error& e) {
      reply[8] = 0;
      reply.resize(13);
      put_u32le(reply.data() + 9, std::uint32_t(e.code()));
      send_frame(conn, imm == kImmOsReadReq ? kImmOsReadResp : kImmOsWriteResp, reply);
    }
  }

  void settle_os(std::uint32_t imm, Bytes payload) {
    if (payload.size() < 9) return;
    std::uint64_t req = get_u64le(payload.data());
    bool ok = payload[8] != 0;
    std::shared_ptr<PendingOs> pend;
    {
      std::lock_guard<std::mutex> g(mu_);
      auto it = pending_.find(req);
      if (it == pending_.end()) return;
      pend = it->second;
      pending_.erase(it);
    }
    Errc err = Errc::remote_error;
    Bytes data;
    if (ok && imm == kImmOsReadResp) data.assign(payload.begin() + 9, payload.end());
    if (!ok && payload.size() >= 13) err = errc_from_u32(get_u32le(payload.data() + 9));
    if (pend->is_async) {
      if (!ok) {
        OFFMEM_LOG_ERROR("async one-sided op failed: %s", errc_name(err));
        return;
      }
      data.reserve(data.size() + 16);
      deliver(Completion{pend->user_tag, pend->is_write, std::move(data)});
      return;
    }
    std::lock_guard<std::mutex> g(pend->mu);
    pend->done = true;
    pend->ok = ok;
    pend->err = err;
    pend->data = std::move(data);
    pend->cv.notify_all();
  }

  void fail_pending() {
    std::vector<std::shared_ptr<PendingOs>> orphans;
    {
      std::lock_guard<std::mutex> g(mu_);
      for (auto& [id, p] : pending_) orphans.push_back(p);
      pending_.clear();
    }
    for (auto& p : orphans) {
      std::lock_guard<std::mutex> g(p->mu);
      p->done = true;
      p->ok = false;
      p->err = Errc::shutdown;
      p->cv.notify_all();
    }
  }

  void deliver(Completion c) {
    {
      std::lock_guard<std::mutex> g(hold_mu_);
      if (hold_) {
        held_.push_back(std::move(c));
        return;
      }
    }
    cq_.push(std::move(c));
  }

  TcpFabric* hub_;
  EndpointId id_;
  Site site_;
  std::atomic<bool> closed_{false};

  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::thread acceptor_;

  mutable std::mutex mu_;
  std::map<EndpointId, std::shared_ptr<Conn>> conns_;
  EndpointId next_alias_ = 1;
  std::unordered_map<std::uint64_t, std::shared_ptr<PendingOs>> pending_;
  std::uint64_t next_req_ = 1;

  mutable std::mutex regions_mu_;
  std::map<Rkey, RegionRec> regions_;
  Rkey next_rkey_ = 0x1000;

  std::mutex hold_mu_;
  bool hold_ = false;
  std::vector<Completion> held_;

  SyncQueue<Message> rq_;
  SyncQueue<Completion> cq_;
};

TcpFabric::TcpFabric(FabricConfig cfg) : cfg_(std::move(cfg)), impl_(new Impl) {
  cfg_.intra.name = "intra";
  cfg_.net.name = "net";
}

TcpFabric::~TcpFabric() {
  std::lock_guard<std::mutex> g(impl_->mu);
  for (auto& ep : impl_->eps) ep->close();
}

Endpoint& TcpFabric::listen(Site my_site, const std::string& bind_addr) {
  auto ep = std::make_unique<TcpEndpoint>(this, impl_->next_ep_id.fetch_add(1), my_site);
  ep->start_listen(bind_addr);
  TcpEndpoint* raw = ep.get();
  std::lock_guard<std::mutex> g(impl_->mu);
  impl_->eps.push_back(std::move(ep));
  return *raw;
}

Endpoint& TcpFabric::connect(Site my_site, const std::string& addr, Site peer_site) {
  auto ep = std::make_unique<TcpEndpoint>(this, impl_->next_ep_id.fetch_add(1), my_site);
  ep->add_connection(addr, peer_site);
  TcpEndpoint* raw = ep.get();
  std::lock_guard<std::mutex> g(impl_->mu);
  impl_->eps.push_back(std::move(ep));
  return *raw;
}

EndpointId TcpFabric::add_peer(Endpoint& connector, const std::string& addr, Site peer_site) {
  return static_cast<TcpEndpoint&>(connector).add_connection(addr, peer_site);
}

std::uint16_t TcpFabric::bound_port(const Endpoint& listener) const {
  return static_cast<const TcpEndpoint&>(listener).port();
}

EndpointId TcpFabric::peer_id(const Endpoint&) const {
  return 1;  // a connector's sole peer is always its first alias
}

CounterSnapshot TcpFabric::counters() const {
  std::lock_guard<std::mutex> g(impl_->mu);
  CounterSnapshot s;
  s.links = impl_->counters;
  return s;
}

void TcpFabric::reset_counters() {
  std::lock_guard<std::mutex> g(impl_->mu);
  impl_->counters.clear();
}

void TcpFabric::set_observer(OpObserver obs) {
  std::lock_guard<std::mutex> g(impl_->observer_mu);
  impl_->observer = std::move(obs);
}

void TcpFabric::account(Site from, Site to, OpRecord::Kind kind, std::uint64_t payload,
                        std::uint32_t ops, const OpMeta& meta) {
  const LinkProfile& lp = (from == Site::mem || to == Site::mem) ? cfg_.net : cfg_.intra;
  std::uint64_t bytes = payload + kHeaderOverheadBytes;
  {
    std::lock_guard<std::mutex> g(impl_->mu);
    LinkCounters& c = impl_->counters[lp.name];
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
    std::lock_guard<std::mutex> g(impl_->observer_mu);
    obs = impl_->observer;
  }
  if (obs) obs(OpRecord{kind, lp.name, 0, 0, payload, kHeaderOverheadBytes, ops, meta});
}

}  // namespace offmem
