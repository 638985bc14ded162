#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "offmem/error.hpp"
#include "offmem/util.hpp"

namespace offmem {

using EndpointId = std::uint32_t;
using Rkey = std::uint32_t;

enum class Site : std::uint8_t { host = 0, dpu = 1, mem = 2 };

// on_demand = critical path; background = prefetch/preload traffic
enum class TrafficClass : std::uint8_t { on_demand = 0, background = 1 };

// Fixed per-message/per-op cost added to the traffic counters. A batch is
// charged once, which is what makes doorbell batching observable.
inline constexpr std::uint64_t kHeaderOverheadBytes = 64;
inline constexpr std::uint64_t kDefaultMaxMessageBytes = 1u << 20;

struct LinkProfile {
  double bandwidth_bytes_per_sec = 1e9;
  double latency_sec = 0.0;
  std::string name = "intra";  // "intra" (host<->dpu) or "net" (anything<->mem)

  // Modeled time for payload bytes; header overhead is a counter construct
  // and does not enter the time model.
  double transfer_time(std::uint64_t payload_bytes) const {
    return latency_sec + double(payload_bytes) / bandwidth_bytes_per_sec;
  }
};

struct OpMeta {
  TrafficClass cls = TrafficClass::on_demand;
  std::uint32_t client = 0;  // attribution; 0 = runtime-internal
};

struct Message {
  Bytes payload;
  std::uint32_t immediate = 0;
  EndpointId sender = 0;
};

struct OutMessage {
  Bytes payload;
  std::uint32_t immediate = 0;
};

struct RemoteRef {
  EndpointId owner = 0;
  Rkey rkey = 0;
};

struct OneSidedOp {
  bool is_write = false;
  RemoteRef target;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;  // read length; ignored for writes
  Bytes data;                // write payload
  std::uint64_t tag = 0;
};

struct Completion {
  std::uint64_t tag = 0;
  bool is_write = false;
  Bytes data;
};

struct LinkCounters {
  std::uint64_t bytes_on_demand = 0;
  std::uint64_t bytes_background = 0;
  std::uint64_t messages = 0;  // individual messages / one-sided ops
  std::uint64_t batches = 0;   // explicit batch submissions
  double modeled_time_sec = 0.0;
  std::map<std::uint32_t, std::uint64_t> client_bytes;
  std::uint64_t total_bytes() const { return bytes_on_demand + bytes_background; }
};

struct CounterSnapshot {
  std::map<std::string, LinkCounters> links;
  const LinkCounters& link(const std::string& name) const {
    static const LinkCounters empty;
    auto it = links.find(name);
    return it == links.end() ? empty : it->second;
  }
};

// Test instrumentation: one record per transport operation.
struct OpRecord {
  enum class Kind : std::uint8_t { send, send_batch, os_read, os_write, os_batch };
  Kind kind;
  std::string link;
  EndpointId from = 0;
  EndpointId to = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t overhead_bytes = 0;
  std::uint32_t ops = 0;
  OpMeta meta;
};
using OpObserver = std::function<void(const OpRecord&)>;

class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual EndpointId id() const = 0;
  virtual Site site() const = 0;
  virtual void close() = 0;

  // two-sided
  virtual void send(EndpointId to, std::uint32_t immediate, Bytes payload, const OpMeta& meta) = 0;
  virtual void send_batch(EndpointId to, std::vector<OutMessage> msgs, const OpMeta& meta) = 0;
  virtual std::optional<Message> recv() = 0;  // blocks; nullopt once closed and drained
  virtual std::optional<Message> try_recv() = 0;
  virtual std::size_t pending_messages() const = 0;

  // registered memory (this endpoint is the passive owner)
  virtual RemoteRef register_region(std::uint64_t length) = 0;
  virtual void unregister_region(Rkey rkey) = 0;
  // nullopt = unrestricted; otherwise only listed endpoints may write remotely
  virtual void restrict_writers(Rkey rkey, std::optional<std::set<EndpointId>> writers) = 0;
  virtual void local_write(Rkey rkey, std::uint64_t offset, ByteSpan data) = 0;
  virtual Bytes local_read(Rkey rkey, std::uint64_t offset, std::uint64_t length) const = 0;

  // one-sided, synchronous
  virtual Bytes read_remote(const RemoteRef& r, std::uint64_t offset, std::uint64_t length,
                            const OpMeta& meta) = 0;
  virtual void write_remote(const RemoteRef& r, std::uint64_t offset, ByteSpan data,
                            const OpMeta& meta) = 0;

  // one-sided, asynchronous; completions arrive on this endpoint's queue
  virtual void post(OneSidedOp op, const OpMeta& meta) = 0;
  virtual void post_batch(std::vector<OneSidedOp> ops, const OpMeta& meta) = 0;
  virtual std::optional<Completion> poll() = 0;  // blocks; nullopt once closed

  // convenience: batched reads, waiting for all completions (caller must be
  // the only poller of this endpoint's completion queue)
  std::vector<Bytes> read_batch_sync(std::vector<OneSidedOp> reads, const OpMeta& meta);
};

class Fabric {
 public:
  virtual ~Fabric() = default;
  virtual CounterSnapshot counters() const = 0;
  virtual void reset_counters() = 0;
  virtual void set_observer(OpObserver obs) = 0;
  virtual const LinkProfile& intra_profile() const = 0;
  virtual const LinkProfile& net_profile() const = 0;
};

struct FabricConfig {
  LinkProfile intra{12.6e9, 2e-6, "intra"};
  LinkProfile net{6.3e9, 5e-6, "net"};
  std::uint64_t max_message_bytes = kDefaultMaxMessageBytes;
};

class InProcEndpoint;

// In-process backend: every agent lives in one process; this is the default
// for tests and single-process experiments.
class InProcFabric final : public Fabric {
 public:
  explicit InProcFabric(FabricConfig cfg = {});
  ~InProcFabric() override;

  Endpoint& create_endpoint(Site site, std::string name,
                            std::uint64_t region_capacity = UINT64_MAX);

  // Test hook: buffer completions for an endpoint until released. Models a
  // memory node whose responses are withheld.
  void hold_completions(EndpointId ep, bool held);

  CounterSnapshot counters() const override;
  void reset_counters() override;
  void set_observer(OpObserver obs) override;
  const LinkProfile& intra_profile() const override { return cfg_.intra; }
  const LinkProfile& net_profile() const override { return cfg_.net; }

 private:
  friend class InProcEndpoint;
  struct EpState;

  const LinkProfile& link_for(Site a, Site b) const {
    return (a == Site::mem || b == Site::mem) ? cfg_.net : cfg_.intra;
  }
  EpState* find_state(EndpointId id) const;
  void account(Site from, Site to, OpRecord::Kind kind, EndpointId fid, EndpointId tid,
               std::uint64_t payload, std::uint32_t ops, const OpMeta& meta);
  Bytes one_sided_read(EndpointId from, const RemoteRef& r, std::uint64_t offset,
                       std::uint64_t length);
  void one_sided_write(EndpointId from, const RemoteRef& r, std::uint64_t offset, ByteSpan data);
  void deliver(EpState* ep, Completion c);

  FabricConfig cfg_;
  mutable std::mutex mu_;
  std::vector<std::unique_ptr<EpState>> eps_;
  std::vector<std::unique_ptr<Endpoint>> facades_;
  std::map<std::string, LinkCounters> counters_;
  OpObserver observer_;
  std::mutex observer_mu_;
};

}  // namespace offmem
