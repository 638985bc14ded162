#pragma once

#include <memory>

#include "offmem/fabric.hpp"

namespace offmem {

// Socket backend for multi-process deployments. Each frame on the wire is
//   4-byte little-endian payload length, 4-byte little-endian immediate,
//   payload bytes.
// Application messages use the protocol immediates; one-sided operations are
// carried by reserved internal immediates, serviced by the peer's reader
// thread against its registered regions and never surfaced to agents.
//
// Counters are per process and cover operations this process initiates.
class TcpFabric final : public Fabric {
 public:
  explicit TcpFabric(FabricConfig cfg = {});
  ~TcpFabric() override;

  // Accepting endpoint: peers that connect are addressed by the sender id
  // found on received messages. Binds to host:port ("0" port picks one).
  Endpoint& listen(Site my_site, const std::string& bind_addr);
  // Connecting endpoint: a single peer, addressed as peer_id() of the result.
  Endpoint& connect(Site my_site, const std::string& addr, Site peer_site);
  // Extra outgoing connection on an existing connector; returns the peer alias.
  EndpointId add_peer(Endpoint& connector, const std::string& addr, Site peer_site);

  std::uint16_t bound_port(const Endpoint& listener) const;
  EndpointId peer_id(const Endpoint& connector) const;

  CounterSnapshot counters() const override;
  void reset_counters() override;
  void set_observer(OpObserver obs) override;
  const LinkProfile& intra_profile() const override { return cfg_.intra; }
  const LinkProfile& net_profile() const override { return cfg_.net; }

 private:
  friend class TcpEndpoint;
  struct Impl;
  void account(Site from, Site to, OpRecord::Kind kind, std::uint64_t payload,
               std::uint32_t ops, const OpMeta& meta);

  FabricConfig cfg_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace offmem
