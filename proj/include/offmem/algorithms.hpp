#pragma once

#include <atomic>
#include <cmath>

#include "offmem/graph.hpp"

// Level-synchronous graph kernels over a traversal view (PlainView or
// FamView). Each round writes a vertex from exactly one worker and reads only
// values settled in earlier rounds, so outputs are bit-identical for a given
// graph regardless of thread count or backing store. Per-run state stays in
// ordinary memory; only the graph itself lives behind the view.

namespace offmem::graph {

inline constexpr std::uint64_t kUnreached = UINT64_MAX;

struct BfsResult {
  std::vector<std::uint64_t> parent;  // min eligible predecessor; self at the source
  std::vector<std::uint64_t> level;   // kUnreached when not reachable
};

template <class View>
BfsResult bfs(const View& g, std::uint64_t source, unsigned threads = 0) {
  std::uint64_t n = g.num_vertices();
  if (source >= n) raise(Errc::invalid_argument, "bfs source out of range");
  BfsResult r;
  r.parent.assign(n, kUnreached);
  r.level.assign(n, kUnreached);
  r.level[source] = 0;
  r.parent[source] = source;
  std::uint64_t cur = 0;
  bool more = true;
  while (more) {
    std::atomic<bool> changed{false};
    parallel_for(0, n, threads, [&](std::uint64_t lo, std::uint64_t hi) {
      typename View::Scratch sc;
      std::uint64_t off[2];
      for (std::uint64_t v = lo; v < hi; v++) {
        if (r.level[v] != kUnreached) continue;
        g.read_in_offsets(v, 2, off, sc);
        auto row = g.in_edges_slice(off[0], off[1] - off[0], sc);
        std::uint64_t best = kUnreached;
        for (std::uint64_t u : row) {
          // levels settle one round at a time: a concurrent writer can only
          // store cur+1, which compares unequal to cur either way
          std::uint64_t lu = std::atomic_ref<std::uint64_t>(r.level[u])
                                 .load(std::memory_order_relaxed);
          if (lu == cur && u < best) best = u;
        }
        if (best != kUnreached) {
          std::atomic_ref<std::uint64_t>(r.level[v]).store(cur + 1,
                                                           std::memory_order_relaxed);
          r.parent[v] = best;
          changed.store(true, std::memory_order_relaxed);
        }
      }
    });
    more = changed.load();
    cur++;
  }
  return r;
}

template <class View>
std::vector<std::uint64_t> out_degrees(const View& g, unsigned threads = 0) {
  std::uint64_t n = g.num_vertices();
  std::vector<std::uint64_t> deg(n);
  parallel_for(0, n, threads, [&](std::uint64_t lo, std::uint64_t hi) {
    typename View::Scratch sc;
    constexpr std::uint64_t kBlock = 1024;
    std::vector<std::uint64_t> off(kBlock + 1);
    for (std::uint64_t v = lo; v < hi; v += kBlock) {
      std::uint64_t count = std::min(kBlock, hi - v);
      g.read_offsets(v, count + 1, off.data(), sc);
      for (std::uint64_t i = 0; i < count; i++) deg[v + i] = off[i + 1] - off[i];
    }
  });
  return deg;
}

template <class View>
std::vector<double> pagerank(const View& g, double damping, std::uint32_t iters,
                             unsigned threads = 0) {
  std::uint64_t n = g.num_vertices();
  if (n == 0) return {};
  std::vector<std::uint64_t> deg = out_degrees(g, threads);
  std::vector<double> rank(n, 1.0 / double(n)), next(n), contrib(n);
  for (std::uint32_t it = 0; it < iters; it++) {
    parallel_for(0, n, threads, [&](std::uint64_t lo, std::uint64_t hi) {
      for (std::uint64_t v = lo; v < hi; v++)
        contrib[v] = deg[v] ? rank[v] / double(deg[v]) : 0.0;
    });
    // dangling mass summed serially so the result is schedule-independent
    double dangling = 0.0;
    for (std::uint64_t v = 0; v < n; v++)
      if (deg[v] == 0) dangling += rank[v];
    double base = (1.0 - damping) / double(n) + damping * dangling / double(n);
    parallel_for(0, n, threads, [&](std::uint64_t lo, std::uint64_t hi) {
      typename View::Scratch sc;
      std::uint64_t off[2];
      for (std::uint64_t v = lo; v < hi; v++) {
        g.read_in_offsets(v, 2, off, sc);
        auto row = g.in_edges_slice(off[0], off[1] - off[0], sc);
        double sum = 0.0;
        for (std::uint64_t u : row) sum += contrib[u];
        next[v] = base + damping * sum;
      }
    });
    rank.swap(next);
  }
  return rank;
}

// weakly connected components by jacobi min-label propagation
template <class View>
std::vector<std::uint64_t> components(const View& g, unsigned threads = 0) {
  std::uint64_t n = g.num_vertices();
  std::vector<std::uint64_t> label(n), next(n);
  for (std::uint64_t v = 0; v < n; v++) label[v] = v;
  bool more = true;
  while (more) {
    std::atomic<bool> changed{false};
    parallel_for(0, n, threads, [&](std::uint64_t lo, std::uint64_t hi) {
      typename View::Scratch sc;
      std::uint64_t off[2];
      for (std::uint64_t v = lo; v < hi; v++) {
        std::uint64_t m = label[v];
        g.read_offsets(v, 2, off, sc);
        for (std::uint64_t u : g.out_edges_slice(off[0], off[1] - off[0], sc))
          m = std::min(m, label[u]);
        g.read_in_offsets(v, 2, off, sc);
        for (std::uint64_t u : g.in_edges_slice(off[0], off[1] - off[0], sc))
          m = std::min(m, label[u]);
        next[v] = m;
        if (m != label[v]) changed.store(true, std::memory_order_relaxed);
      }
    });
    label.swap(next);
    more = changed.load();
  }
  return label;
}

// Eccentricity lower bounds from up to 64 sampled sources: estimate(v) is the
// longest shortest path from v to any sampled source it can reach, tracked by
// propagating per-source reachability masks along out-edges.
template <class View>
std::vector<std::uint64_t> radii(const View& g, std::uint32_t num_sources, std::uint64_t seed,
                                 unsigned threads = 0) {
  std::uint64_t n = g.num_vertices();
  if (n == 0) return {};
  std::uint32_t ns = std::uint32_t(std::min<std::uint64_t>(std::min(num_sources, 64u), n));
  if (ns == 0) ns = 1;
  std::vector<std::uint64_t> ids(n);
  for (std::uint64_t v = 0; v < n; v++) ids[v] = v;
  SplitMix64 rng(seed);
  for (std::uint32_t i = 0; i < ns; i++)
    std::swap(ids[i], ids[i + rng.next_below(n - i)]);

  std::vector<std::uint64_t> mask(n, 0), next(n, 0), est(n, 0);
  for (std::uint32_t i = 0; i < ns; i++) mask[ids[i]] = 1ull << i;
  std::uint64_t round = 0;
  bool more = true;
  while (more) {
    round++;
    std::atomic<bool> changed{false};
    parallel_for(0, n, threads, [&](std::uint64_t lo, std::uint64_t hi) {
      typename View::Scratch sc;
      std::uint64_t off[2];
      for (std::uint64_t v = lo; v < hi; v++) {
        std::uint64_t m = mask[v];
        g.read_offsets(v, 2, off, sc);
        for (std::uint64_t w : g.out_edges_slice(off[0], off[1] - off[0], sc)) m |= mask[w];
        next[v] = m;
        if (m != mask[v]) {
          est[v] = round;
          changed.store(true, std::memory_order_relaxed);
        }
      }
    });
    mask.swap(next);
    more = changed.load();
  }
  return est;
}

// Brandes single-source dependency scores; the source's own score is zero.
template <class View>
std::vector<double> betweenness(const View& g, std::uint64_t source, unsigned threads = 0) {
  std::uint64_t n = g.num_vertices();
  BfsResult b = bfs(g, source, threads);
  std::uint64_t max_level = 0;
  for (std::uint64_t v = 0; v < n; v++)
    if (b.level[v] != kUnreached) max_level = std::max(max_level, b.level[v]);
  std::vector<std::vector<std::uint64_t>> buckets(max_level + 1);
  for (std::uint64_t v = 0; v < n; v++)
    if (b.level[v] != kUnreached) buckets[b.level[v]].push_back(v);

  std::vector<double> sigma(n, 0.0), delta(n, 0.0);
  sigma[source] = 1.0;
  for (std::uint64_t l = 1; l <= max_level; l++) {
    auto& bucket = buckets[l];
    parallel_for(0, bucket.size(), threads, [&](std::uint64_t lo, std::uint64_t hi) {
      typename View::Scratch sc;
      std::uint64_t off[2];
      for (std::uint64_t i = lo; i < hi; i++) {
        std::uint64_t v = bucket[i];
        g.read_in_offsets(v, 2, off, sc);
        double s = 0.0;
        for (std::uint64_t u : g.in_edges_slice(off[0], off[1] - off[0], sc))
          if (b.level[u] + 1 == l) s += sigma[u];
        sigma[v] = s;
      }
    });
  }
  for (std::uint64_t l = max_level; l-- > 0;) {
    auto& bucket = buckets[l];
    parallel_for(0, bucket.size(), threads, [&](std::uint64_t lo, std::uint64_t hi) {
      typename View::Scratch sc;
      std::uint64_t off[2];
      for (std::uint64_t i = lo; i < hi; i++) {
        std::uint64_t v = bucket[i];
        g.read_offsets(v, 2, off, sc);
        double d = 0.0;
        for (std::uint64_t w : g.out_edges_slice(off[0], off[1] - off[0], sc))
          if (b.level[w] != kUnreached && b.level[w] == l + 1 && sigma[w] != 0.0)
            d += sigma[v] / sigma[w] * (1.0 + delta[w]);
        delta[v] = d;
      }
    });
  }
  delta[source] = 0.0;
  return delta;
}

}  // namespace offmem::graph
