#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "offmem/host_agent.hpp"

namespace offmem::graph {

// Directed graph in CSR form, forward and reverse. Self-loops and duplicate
// edges are kept as parsed.
struct CsrGraph {
  std::uint64_t n = 0;
  std::uint64_t m = 0;
  std::vector<std::uint64_t> offsets;     // n+1, offsets[0]=0, offsets[n]=m
  std::vector<std::uint64_t> edges;       // m targets
  std::vector<std::uint64_t> in_offsets;  // reverse graph
  std::vector<std::uint64_t> in_edges;
};

CsrGraph build_csr(std::uint64_t n,
                   const std::vector<std::pair<std::uint64_t, std::uint64_t>>& edge_list);

// "src dst" per line, '#' starts a comment; vertex count defaults to max id + 1
CsrGraph load_edge_list(const std::string& path,
                        std::optional<std::uint64_t> n = std::nullopt);
void save_edge_list(const CsrGraph& g, const std::string& path);

CsrGraph generate_uniform(std::uint64_t n, std::uint64_t m, std::uint64_t seed);
// recursive-partition generator with skewed degree distribution; n rounds up
// to a power of two
CsrGraph generate_rmat(std::uint64_t n, std::uint64_t m, std::uint64_t seed);

// binary cache file: magic, n, m, offsets, edges, all little-endian 64-bit
void save_csr(const CsrGraph& g, const std::string& path);
CsrGraph load_csr(const std::string& path);

bool same_structure(const CsrGraph& a, const CsrGraph& b);

// ---- FAM-backed storage ----

struct FamGraph {
  std::uint64_t n = 0;
  std::uint64_t m = 0;
  FamHandle offsets;
  FamHandle edges;
  FamHandle in_offsets;
  FamHandle in_edges;
};

// writes the four arrays through the interposed write path (writable handles)
FamGraph upload_graph(HostSession& s, const CsrGraph& g);
// dumps the arrays as raw little-endian files and maps them read-only; lets
// several clients attach to one copy and permits static caching
FamGraph upload_graph_via_files(HostSession& s, const CsrGraph& g, const std::string& dir,
                                const std::string& tag);
void free_graph(HostSession& s, FamGraph& g);

// ---- traversal views; algorithms are templated over these ----

class PlainView {
 public:
  struct Scratch {};
  explicit PlainView(const CsrGraph& g) : g_(&g) {}
  std::uint64_t num_vertices() const { return g_->n; }
  std::uint64_t num_edges() const { return g_->m; }
  void read_offsets(std::uint64_t from, std::uint64_t count, std::uint64_t* out,
                    Scratch&) const {
    std::copy(g_->offsets.begin() + from, g_->offsets.begin() + from + count, out);
  }
  void read_in_offsets(std::uint64_t from, std::uint64_t count, std::uint64_t* out,
                       Scratch&) const {
    std::copy(g_->in_offsets.begin() + from, g_->in_offsets.begin() + from + count, out);
  }
  std::span<const std::uint64_t> out_edges_slice(std::uint64_t begin, std::uint64_t count,
                                                 Scratch&) const {
    return {g_->edges.data() + begin, count};
  }
  std::span<const std::uint64_t> in_edges_slice(std::uint64_t begin, std::uint64_t count,
                                                Scratch&) const {
    return {g_->in_edges.data() + begin, count};
  }

 private:
  const CsrGraph* g_;
};

class FamView {
 public:
  struct Scratch {
    Bytes buf;
    std::vector<std::uint64_t> row;
  };
  FamView(HostSession& s, const FamGraph& g) : s_(&s), g_(&g) {}
  std::uint64_t num_vertices() const { return g_->n; }
  std::uint64_t num_edges() const { return g_->m; }
  void read_offsets(std::uint64_t from, std::uint64_t count, std::uint64_t* out,
                    Scratch& sc) const {
    read_words(g_->offsets, from, count, out, sc);
  }
  void read_in_offsets(std::uint64_t from, std::uint64_t count, std::uint64_t* out,
                       Scratch& sc) const {
    read_words(g_->in_offsets, from, count, out, sc);
  }
  std::span<const std::uint64_t> out_edges_slice(std::uint64_t begin, std::uint64_t count,
                                                 Scratch& sc) const {
    return edge_slice(g_->edges, begin, count, sc);
  }
  std::span<const std::uint64_t> in_edges_slice(std::uint64_t begin, std::uint64_t count,
                                                Scratch& sc) const {
    return edge_slice(g_->in_edges, begin, count, sc);
  }

 private:
  void read_words(const FamHandle& h, std::uint64_t from, std::uint64_t count,
                  std::uint64_t* out, Scratch& sc) const {
    sc.buf.resize(count * 8);
    s_->fam_read(h, from * 8, std::span<std::uint8_t>(sc.buf.data(), count * 8));
    for (std::uint64_t i = 0; i < count; i++) out[i] = get_u64le(sc.buf.data() + i * 8);
  }
  std::span<const std::uint64_t> edge_slice(const FamHandle& h, std::uint64_t begin,
                                            std::uint64_t count, Scratch& sc) const {
    sc.row.resize(count);
    if (count == 0) return {sc.row.data(), 0};
    sc.buf.resize(count * 8);
    s_->fam_read(h, begin * 8, std::span<std::uint8_t>(sc.buf.data(), count * 8));
    for (std::uint64_t i = 0; i < count; i++) sc.row[i] = get_u64le(sc.buf.data() + i * 8);
    return {sc.row.data(), count};
  }
  HostSession* s_;
  const FamGraph* g_;
};

}  // namespace offmem::graph
