#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <map>

#include "test_world.hpp"

using namespace offmem;
using namespace offmem::testing;

TEST_CASE("anonymous regions come back zeroed and distinct") {
  World w;
  auto r1 = w.memd->alloc_region(1 << 20, std::nullopt, false, 1, 0, 65536);
  auto r2 = w.memd->alloc_region(1 << 20, std::nullopt, false, 1, 0, 65536);
  CHECK(r1.region_id != r2.region_id);
  CHECK(w.memd->serve_read(r1.region_id, 0, 65536) == Bytes(65536, 0));
  CHECK_THROWS_AS(w.memd->alloc_region(0, std::nullopt, false, 1, 0, 65536), Error);
}

TEST_CASE("file-backed regions load the file prefix and zero-pad the rest") {
  World w;
  std::string dir = temp_dir("memd-file");
  std::string path = dir + "/twelve.bin";
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write("abcdefghijkl", 12);
  }
  auto r = w.memd->alloc_region(16, path, false, 1, 0, 8);
  Bytes want{'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 0, 0, 0, 0};
  CHECK(w.memd->region_snapshot(r.region_id) == want);
  CHECK_THROWS_AS(w.memd->alloc_region(16, dir + "/missing.bin", false, 1, 0, 8), Error);
}

TEST_CASE("free invalidates the region id and returns capacity") {
  World w;
  std::uint64_t before = w.memd->capacity_used();
  auto r = w.memd->alloc_region(4096, std::nullopt, false, 1, 0, 1024);
  CHECK(w.memd->capacity_used() == before + 4096);
  CHECK(w.memd->free_region(r.region_id, 1));
  CHECK(w.memd->capacity_used() == before);
  CHECK_THROWS_AS(w.memd->serve_read(r.region_id, 0, 16), Error);
  CHECK_THROWS_AS(w.memd->free_region(r.region_id, 1), Error);
}

TEST_CASE("logical capacity limit rejects oversized allocations") {
  FabricConfig fc;
  World w(fc, false, {}, MemoryAgentConfig{1 << 20, {}});
  CHECK_THROWS_AS(w.memd->alloc_region(2 << 20, std::nullopt, false, 1, 0, 4096), Error);
  auto r = w.memd->alloc_region(1 << 20, std::nullopt, false, 1, 0, 4096);
  CHECK_THROWS_AS(w.memd->alloc_region(1, std::nullopt, false, 1, 0, 4096), Error);
  w.memd->free_region(r.region_id, 1);
  CHECK_NOTHROW(w.memd->alloc_region(1 << 20, std::nullopt, false, 2, 0, 4096));
}

TEST_CASE("single-writer rule at the data plane") {
  World w;
  auto r = w.memd->alloc_region(4096, std::nullopt, true, 42, 0, 1024);
  Bytes chunk(1024, 9);
  CHECK_NOTHROW(w.memd->serve_write(r.region_id, 1, chunk, 42));
  CHECK(w.memd->serve_read(r.region_id, 1, 1024) == chunk);
  CHECK_THROWS_AS(w.memd->serve_write(r.region_id, 1, chunk, 43), Error);
  CHECK(w.memd->serve_read(r.region_id, 0, 1024) == Bytes(1024, 0));
}

TEST_CASE("file-backed attach shares one region; writer slot is exclusive") {
  World w;
  std::string dir = temp_dir("memd-attach");
  std::string path = dir + "/shared.bin";
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    Bytes data = pattern_bytes(5, 4096);
    f.write(reinterpret_cast<const char*>(data.data()), 4096);
  }
  auto a = w.memd->alloc_region(4096, path, true, 1, 0, 1024);
  auto b = w.memd->alloc_region(4096, path, false, 2, 0, 1024);
  CHECK(a.region_id == b.region_id);
  CHECK(b.attached);
  CHECK_THROWS_AS(w.memd->alloc_region(4096, path, true, 3, 0, 1024), Error);
  CHECK_THROWS_AS(w.memd->alloc_region(8192, path, false, 3, 0, 1024), Error);
  // region survives the first detach, dies on the last
  CHECK_FALSE(w.memd->free_region(a.region_id, 1));
  // writer released: someone else can attach writable now
  auto c = w.memd->alloc_region(4096, path, true, 3, 0, 1024);
  CHECK(c.region_id == a.region_id);
  CHECK_FALSE(w.memd->free_region(a.region_id, 3));
  CHECK(w.memd->free_region(a.region_id, 2));
}

TEST_CASE("writer permission applies to the fabric one-sided path") {
  World w;
  Endpoint& writer_ep = w.client_endpoint("writer");
  Endpoint& other_ep = w.client_endpoint("other");
  auto r = w.memd->alloc_region(4096, std::nullopt, true, writer_ep.id(), writer_ep.id(), 1024);
  auto info = w.memd->region_info(r.region_id);
  REQUIRE(info);
  RemoteRef ref{w.mem_ep->id(), info->rkey};
  CHECK_NOTHROW(writer_ep.write_remote(ref, 0, Bytes{1, 2, 3}, {}));
  CHECK_THROWS_AS(other_ep.write_remote(ref, 0, Bytes{1}, {}), Error);
  CHECK(other_ep.read_remote(ref, 0, 3, {}) == Bytes{1, 2, 3});
}

TEST_CASE("a read is a bounds check plus a copy of the live backing bytes") {
  World w;
  auto r = w.memd->alloc_region(2048, std::nullopt, true, 1, 0, 512);
  w.memd->serve_write(r.region_id, 0, Bytes(512, 7), 1);
  CHECK(w.memd->serve_read(r.region_id, 0, 512) == Bytes(512, 7));
  // mutate the backing directly; the next read must observe it immediately
  auto info = w.memd->region_info(r.region_id);
  w.mem_ep->local_write(info->rkey, 0, Bytes(512, 8));
  CHECK(w.memd->serve_read(r.region_id, 0, 512) == Bytes(512, 8));
  CHECK_THROWS_AS(w.memd->serve_read(r.region_id, 4, 1), Error);
}

TEST_CASE("region contents match a plain map oracle over random operation sequences") {
  World w;
  struct OracleRegion {
    Bytes data;
    std::uint32_t chunk;
  };
  std::map<std::uint16_t, OracleRegion> oracle;
  SplitMix64 rng(99);
  std::vector<std::uint16_t> live;
  for (int step = 0; step < 400; step++) {
    std::uint64_t pick = rng.next_below(10);
    if (pick < 2 || live.empty()) {
      std::uint32_t chunk = 256 << rng.next_below(3);
      std::uint64_t len = chunk * (1 + rng.next_below(8));
      auto r = w.memd->alloc_region(len, std::nullopt, true, 1, 0, chunk);
      oracle[r.region_id] = {Bytes(len, 0), chunk};
      live.push_back(r.region_id);
    } else if (pick == 2 && !live.empty()) {
      std::size_t i = rng.next_below(live.size());
      w.memd->free_region(live[i], 1);
      oracle.erase(live[i]);
      live.erase(live.begin() + i);
    } else if (pick < 7) {
      std::uint16_t id = live[rng.next_below(live.size())];
      auto& reg = oracle[id];
      std::uint64_t chunks = reg.data.size() / reg.chunk;
      std::uint64_t c = rng.next_below(chunks);
      Bytes data = pattern_bytes(rng.next(), reg.chunk);
      w.memd->serve_write(id, c, data, 1);
      std::copy(data.begin(), data.end(), reg.data.begin() + c * reg.chunk);
    } else {
      std::uint16_t id = live[rng.next_below(live.size())];
      auto& reg = oracle[id];
      std::uint64_t chunks = reg.data.size() / reg.chunk;
      std::uint64_t c = rng.next_below(chunks);
      Bytes got = w.memd->serve_read(id, c, reg.chunk);
      Bytes want(reg.data.begin() + c * reg.chunk, reg.data.begin() + (c + 1) * reg.chunk);
      REQUIRE(got == want);
    }
  }
  for (auto id : live) CHECK(w.memd->region_snapshot(id) == oracle[id].data);
}

TEST_CASE("control plane serves setup, alloc and free over the fabric") {
  World w;
  Endpoint& c = w.client_endpoint("ctl");
  using namespace protocol;
  auto rpc = [&](const ControlMessage& m) {
    c.send(w.mem_ep->id(), kImmControl, encode_control(m), {});
    auto reply = c.recv();
    REQUIRE(reply);
    REQUIRE(reply->immediate == kImmControl);
    return decode_control(reply->payload);
  };
  CHECK(std::holds_alternative<SetupAck>(rpc(Setup{1, c.id()})));
  auto ack = std::get<AllocAck>(rpc(AllocRegion{4096, 1024, false, c.id(), std::nullopt}));
  CHECK(ack.region_id != 0);
  CHECK(c.read_remote(RemoteRef{w.mem_ep->id(), ack.rkey}, 0, 16, {}) == Bytes(16, 0));
  CHECK(std::get<FreeAck>(rpc(FreeRegion{ack.region_id, c.id()})).destroyed);

  // errors come back on the error immediate
  c.send(w.mem_ep->id(), kImmControl,
         encode_control(FreeRegion{ack.region_id, c.id()}), {});
  auto reply = c.recv();
  REQUIRE(reply);
  CHECK(reply->immediate == kImmError);
  CHECK(decode_error(reply->payload).code == Errc::unknown_region);
}
