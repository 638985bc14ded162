#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <thread>

#include "test_world.hpp"

using namespace offmem;
using namespace offmem::testing;

namespace {

DpuConfig dynamic_config(std::uint64_t cache_bytes, std::uint32_t entry_bytes,
                         std::uint32_t degree = 1, double required_rate = 0.5,
                         std::uint32_t window = 1024) {
  DpuConfig dc;
  dc.dynamic_cache = true;
  dc.cache = CacheTableConfig{cache_bytes, entry_bytes, 7};
  dc.prefetch_degree = degree;
  dc.hit_window = window;
  dc.required_rate = required_rate;
  return dc;
}

HostConfig small_host(std::uint32_t chunk, std::uint64_t chunks) {
  HostConfig hc;
  hc.mode = AccessMode::offload;
  hc.chunk_size = chunk;
  hc.buffer_chunks = chunks;
  hc.load_threshold = 1.0;
  hc.low_water = 0.9;
  return hc;
}

}  // namespace

TEST_CASE("sequential scan warms the cache; later pages are served as hits") {
  // 4 MiB region of 16 KiB chunks, 64 KiB cache entries, cache big enough
  // that nothing is evicted mid-scan
  World w({}, true, dynamic_config(4 << 20, 1 << 16));
  auto& s = w.session(small_host(1 << 14, 8));
  FamHandle h = s.fam_alloc(4 << 20, std::nullopt, false);
  for (std::uint64_t c = 0; c < h.chunk_count(); c++) s.fam_read(h, c << 14, 1 << 14);
  w.dpud->quiesce();
  auto st = w.dpud->stats();
  CHECK(st.cache_hits + st.cache_misses == 256);
  // only the very first page of the scan misses: every access marks the
  // enclosing and next group for fill, so later pages find theirs under way
  CHECK(st.cache_misses == 1);
  CHECK(double(st.cache_hits) / double(st.cache_hits + st.cache_misses) > 0.9);
  CHECK(st.prefetch_fills == 64);
  auto net = w.fabric.counters().link("net");
  CHECK(net.bytes_background > net.bytes_on_demand);
}

TEST_CASE("scan through a small cache stays hit-dominated despite evictions") {
  World w({}, true, dynamic_config(1 << 20, 1 << 16));  // 16 slots vs 64 groups
  auto& s = w.session(small_host(1 << 14, 8));
  FamHandle h = s.fam_alloc(4 << 20, std::nullopt, false);
  for (std::uint64_t c = 0; c < h.chunk_count(); c++) s.fam_read(h, c << 14, 1 << 14);
  w.dpud->quiesce();
  auto st = w.dpud->stats();
  CHECK(double(st.cache_hits) / double(st.cache_hits + st.cache_misses) > 0.9);
}

TEST_CASE("prefetch_degree zero fetches only the enclosing group") {
  World w({}, true, dynamic_config(1 << 20, 1 << 16, 0));
  auto& s = w.session(small_host(1 << 14, 8));
  FamHandle h = s.fam_alloc(1 << 20, std::nullopt, false);
  s.fam_read(h, 0, 1 << 14);
  w.dpud->quiesce();
  CHECK(w.dpud->stats().prefetch_fills == 1);
  // the three other pages of the group hit; the next group was not touched
  for (std::uint64_t c = 1; c < 4; c++) s.fam_read(h, c << 14, 1 << 14);
  w.dpud->quiesce();
  auto st = w.dpud->stats();
  CHECK(st.cache_hits == 3);
  CHECK(st.prefetch_fills == 1);
}

TEST_CASE("cold cache always misses first; fills arrive off the critical path") {
  World w({}, true, dynamic_config(1 << 20, 1 << 16));
  auto& s = w.session(small_host(1 << 14, 8));
  FamHandle h = s.fam_alloc(1 << 20, std::nullopt, false);
  s.fam_read(h, 5 << 14, 1 << 14);
  auto st = w.dpud->stats();
  CHECK(st.cache_misses == 1);
  CHECK(st.cache_hits == 0);
}

TEST_CASE("write-backs invalidate matching cache entries and poison fills") {
  World w({}, true, dynamic_config(1 << 20, 1 << 16));
  auto& s = w.session(small_host(1 << 14, 4));
  FamHandle h = s.fam_alloc(1 << 20, std::nullopt, true);
  Bytes oracle(1 << 20, 0);

  // populate, then keep writing and reading through cache churn
  SplitMix64 rng(31337);
  for (int op = 0; op < 1500; op++) {
    std::uint64_t off = rng.next_below((1 << 20) - 4096);
    std::uint64_t len = 1 + rng.next_below(4096);
    if (rng.next_below(3) == 0) {
      Bytes data = pattern_bytes(rng.next(), len);
      s.fam_write(h, off, data);
      std::copy(data.begin(), data.end(), oracle.begin() + off);
    } else {
      Bytes got = s.fam_read(h, off, len);
      REQUIRE(got == Bytes(oracle.begin() + off, oracle.begin() + off + len));
    }
  }
  s.flush();
  w.dpud->quiesce();
  CHECK(w.memd->region_snapshot(h.region_id) == oracle);
}

TEST_CASE("uniform random access over a region much larger than the cache disables caching") {
  // cache of 8 x 64 KiB entries against a 16 MiB region; required rate 0.5
  World w({}, true, dynamic_config(8 << 16, 1 << 16, 1, 0.5, 256));
  auto& s = w.session(small_host(1 << 14, 16));
  FamHandle h = s.fam_alloc(16 << 20, std::nullopt, false);
  SplitMix64 rng(4);
  std::uint64_t lookups_until_disable = 0;
  for (int i = 0; i < 1200; i++) {
    std::uint64_t c = rng.next_below(h.chunk_count());
    s.fam_read(h, c << 14, 1 << 14);
    auto st = w.dpud->stats();
    if (!st.dynamic_enabled && lookups_until_disable == 0) {
      lookups_until_disable = st.disabled_at_lookup;
      break;
    }
  }
  auto st = w.dpud->stats();
  CHECK_FALSE(st.dynamic_enabled);
  CHECK(st.disabled_at_lookup > 0);
  CHECK(st.disabled_at_lookup <= 2 * 256);  // within two windows
  CHECK(st.window_hit_rate < 0.45);
  // once disabled the forward path still works
  Bytes b = s.fam_read(h, 0, 1 << 14);
  CHECK(b == Bytes(1 << 14, 0));
}

TEST_CASE("static load pins a region; host reads bypass the proxy cpu path") {
  DpuConfig dc;
  dc.cache = CacheTableConfig{1 << 20, 1 << 16, 1};
  World w({}, true, dc);
  auto& s = w.session(small_host(1 << 14, 4));
  std::string dir = temp_dir("static");
  Bytes content = pattern_bytes(77, 256 * 1024);
  {
    std::ofstream f(dir + "/vertex.bin", std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(content.data()),
            std::streamsize(content.size()));
  }
  FamHandle h = s.fam_alloc(256 * 1024, dir + "/vertex.bin", false);
  w.dpud->quiesce();
  w.fabric.reset_counters();

  w.dpud->static_load(h.region_id, 0, h.chunk_count());
  while (!s.has_static_route(h.region_id))
    std::this_thread::sleep_for(std::chrono::microseconds(100));

  auto after_load = w.fabric.counters().link("net");
  CHECK(after_load.bytes_background == 256 * 1024 + kHeaderOverheadBytes);
  CHECK(after_load.batches == 1);

  // many passes over the region: intra transfers only, zero net growth
  for (int pass = 0; pass < 3; pass++)
    for (std::uint64_t c = 0; c < h.chunk_count(); c++) {
      Bytes got = s.fam_read(h, c << 14, 1 << 14);
      REQUIRE(got ==
              Bytes(content.begin() + (c << 14), content.begin() + ((c + 1) << 14)));
    }
  auto net = w.fabric.counters().link("net");
  CHECK(net.total_bytes() == after_load.total_bytes());
  CHECK(s.stats().static_reads > 0);
  CHECK(w.dpud->stats().requests == 0);  // never went through the two-sided path
}

TEST_CASE("chunks outside the static range bypass straight to the memory agent") {
  DpuConfig dc;
  dc.cache = CacheTableConfig{1 << 20, 1 << 16, 1};
  World w({}, true, dc);
  auto& s = w.session(small_host(1 << 14, 8));
  FamHandle h = s.fam_alloc(512 * 1024, std::nullopt, false);
  w.dpud->quiesce();
  // cache only the first 64 KiB worth of chunks (one group)
  w.dpud->static_load(h.region_id, 0, 4);
  while (!s.has_static_route(h.region_id))
    std::this_thread::sleep_for(std::chrono::microseconds(100));

  s.fam_read(h, 0, 1 << 14);             // covered: intra one-sided
  s.fam_read(h, 6 << 14, 1 << 14);       // uncovered: net one-sided, no proxy
  auto hs = s.stats();
  CHECK(hs.static_reads == 1);
  CHECK(hs.bypass_reads == 1);
  CHECK(w.dpud->stats().requests == 0);
}

TEST_CASE("static load rejects writable regions and over-budget ranges") {
  DpuConfig dc;
  dc.cache = CacheTableConfig{2 << 16, 1 << 16, 1};  // two slots only
  World w({}, true, dc);
  auto& s = w.session(small_host(1 << 14, 8));
  FamHandle writable = s.fam_alloc(1 << 20, std::nullopt, true);
  CHECK_THROWS_AS(w.dpud->static_load(writable.region_id, 0, 4), Error);

  FamHandle big = s.fam_alloc(1 << 20, std::nullopt, false);
  CHECK_THROWS_AS(w.dpud->static_load(big.region_id, 0, big.chunk_count()), Error);
  // nothing was pinned by the failed attempt
  CHECK_NOTHROW(w.dpud->static_load(big.region_id, 0, 8));  // two groups fit
}

TEST_CASE("enabling any cache mode never changes application-visible bytes") {
  // one writable working region plus one read-only static region
  auto run = [](int variant) {
    DpuConfig dc;
    dc.cache = CacheTableConfig{4 << 16, 1 << 16, 9};
    dc.dynamic_cache = variant == 2;
    World w({}, true, dc);
    auto& s = w.session(small_host(1 << 14, 6));
    std::string dir = temp_dir("equiv" + std::to_string(variant));
    Bytes ro = pattern_bytes(5, 128 * 1024);
    {
      std::ofstream f(dir + "/ro.bin", std::ios::binary | std::ios::trunc);
      f.write(reinterpret_cast<const char*>(ro.data()), std::streamsize(ro.size()));
    }
    FamHandle rw = s.fam_alloc(256 * 1024, std::nullopt, true);
    FamHandle rdonly = s.fam_alloc(128 * 1024, dir + "/ro.bin", false);
    if (variant == 1) {
      w.dpud->static_load(rdonly.region_id, 0, rdonly.chunk_count());
      while (!s.has_static_route(rdonly.region_id))
        std::this_thread::sleep_for(std::chrono::microseconds(100));
    }
    Bytes oracle(256 * 1024, 0);
    SplitMix64 rng(1717);  // identical op stream for every variant
    std::uint64_t digest = 1469598103934665603ull;
    for (int op = 0; op < 800; op++) {
      std::uint64_t kind = rng.next_below(4);
      if (kind == 0) {
        std::uint64_t off = rng.next_below(250 * 1024);
        std::uint64_t len = 1 + rng.next_below(6 * 1024);
        Bytes data = pattern_bytes(rng.next(), len);
        s.fam_write(rw, off, data);
        std::copy(data.begin(), data.end(), oracle.begin() + off);
      } else if (kind < 3) {
        std::uint64_t off = rng.next_below(250 * 1024);
        std::uint64_t len = 1 + rng.next_below(6 * 1024);
        Bytes got = s.fam_read(rw, off, len);
        REQUIRE(got == Bytes(oracle.begin() + off, oracle.begin() + off + len));
        digest = fnv1a64(got, digest);
      } else {
        std::uint64_t off = rng.next_below(120 * 1024);
        std::uint64_t len = 1 + rng.next_below(6 * 1024);
        Bytes got = s.fam_read(rdonly, off, len);
        REQUIRE(got == Bytes(ro.begin() + off, ro.begin() + off + len));
        digest = fnv1a64(got, digest);
      }
    }
    s.flush();
    w.dpud->quiesce();
    Bytes snapshot = w.memd->region_snapshot(rw.region_id);
    return std::pair<std::uint64_t, std::uint64_t>(digest, fnv1a64(snapshot));
  };
  auto base = run(0);
  // rng streams are per-variant identical; only the cache mode differs
  auto with_static = run(1);
  auto with_dynamic = run(2);
  CHECK(base == with_static);
  CHECK(base == with_dynamic);
}
