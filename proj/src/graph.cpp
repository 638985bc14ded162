#include "offmem/graph.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>

namespace offmem::graph {

CsrGraph build_csr(std::uint64_t n,
                   const std::vector<std::pair<std::uint64_t, std::uint64_t>>& edge_list) {
  for (auto& [s, d] : edge_list)
    if (s >= n || d >= n) raise(Errc::invalid_argument, "edge endpoint exceeds vertex count");
  CsrGraph g;
  g.n = n;
  g.m = edge_list.size();
  g.offsets.assign(n + 1, 0);
  g.in_offsets.assign(n + 1, 0);
  for (auto& [s, d] : edge_list) {
    g.offsets[s + 1]++;
    g.in_offsets[d + 1]++;
  }
  for (std::uint64_t v = 0; v < n; v++) {
    g.offsets[v + 1] += g.offsets[v];
    g.in_offsets[v + 1] += g.in_offsets[v];
  }
  g.edges.resize(g.m);
  g.in_edges.resize(g.m);
  std::vector<std::uint64_t> pos(g.offsets.begin(), g.offsets.end() - 1);
  std::vector<std::uint64_t> ipos(g.in_offsets.begin(), g.in_offsets.end() - 1);
  for (auto& [s, d] : edge_list) {
    g.edges[pos[s]++] = d;
    g.in_edges[ipos[d]++] = s;
  }
  return g;
}

CsrGraph load_edge_list(const std::string& path, std::optional<std::uint64_t> n) {
  std::ifstream f(path);
  if (!f) raise(Errc::file_error, "cannot open " + path);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
  std::string line;
  std::uint64_t max_id = 0;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    lineno++;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const char* p = line.data();
    const char* end = p + line.size();
    auto skip_ws = [&] {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) p++;
    };
    skip_ws();
    if (p == end) continue;
    std::uint64_t ids[2];
    for (int i = 0; i < 2; i++) {
      auto [np, ec] = std::from_chars(p, end, ids[i]);
      if (ec != std::errc())
        raise(Errc::decode_error, path + ":" + std::to_string(lineno) + ": malformed line");
      p = np;
      skip_ws();
    }
    if (p != end)
      raise(Errc::decode_error, path + ":" + std::to_string(lineno) + ": trailing tokens");
    if (n && (ids[0] >= *n || ids[1] >= *n))
      raise(Errc::out_of_bounds,
            path + ":" + std::to_string(lineno) + ": vertex id beyond declared count");
    max_id = std::max({max_id, ids[0], ids[1]});
    edges.emplace_back(ids[0], ids[1]);
  }
  std::uint64_t count = n ? *n : (edges.empty() ? 0 : max_id + 1);
  return build_csr(count, edges);
}

void save_edge_list(const CsrGraph& g, const std::string& path) {
  std::ofstream f(path);
  if (!f) raise(Errc::file_error, "cannot open " + path);
  f << "# " << g.n << " vertices, " << g.m << " edges\n";
  for (std::uint64_t v = 0; v < g.n; v++)
    for (std::uint64_t e = g.offsets[v]; e < g.offsets[v + 1]; e++)
      f << v << ' ' << g.edges[e] << '\n';
}

CsrGraph generate_uniform(std::uint64_t n, std::uint64_t m, std::uint64_t seed) {
  if (n == 0) raise(Errc::invalid_argument, "empty vertex set");
  SplitMix64 rng(seed);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
  edges.reserve(m);
  for (std::uint64_t i = 0; i < m; i++)
    edges.emplace_back(rng.next_below(n), rng.next_below(n));
  return build_csr(n, edges);
}

CsrGraph generate_rmat(std::uint64_t n, std::uint64_t m, std::uint64_t seed) {
  if (n == 0) raise(Errc::invalid_argument, "empty vertex set");
  std::uint64_t scale = 0;
  while ((1ull << scale) < n) scale++;
  n = 1ull << scale;
  SplitMix64 rng(seed);
  const double a = 0.57, b = 0.19, c = 0.19;  // remaining mass falls in the last quadrant
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
  edges.reserve(m);
  for (std::uint64_t i = 0; i < m; i++) {
    std::uint64_t src = 0, dst = 0;
    for (std::uint64_t bit = 0; bit < scale; bit++) {
      double r = rng.next_double();
      std::uint64_t sbit = 0, dbit = 0;
      if (r < a) {
      } else if (r < a + b) {
        dbit = 1;
      } else if (r < a + b + c) {
        sbit = 1;
      } else {
        sbit = 1;
        dbit = 1;
      }
      src = (src << 1) | sbit;
      dst = (dst << 1) | dbit;
    }
    edges.emplace_back(src, dst);
  }
  return build_csr(n, edges);
}

static constexpr char kCsrMagic[8] = {'O', 'F', 'M', 'C', 'S', 'R', '0', '1'};

void save_csr(const CsrGraph& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(Errc::file_error, "cannot open " + path);
  f.write(kCsrMagic, 8);
  Bytes word(8);
  auto put = [&](std::uint64_t v) {
    put_u64le(word.data(), v);
    f.write(reinterpret_cast<const char*>(word.data()), 8);
  };
  put(g.n);
  put(g.m);
  for (auto v : g.offsets) put(v);
  for (auto v : g.edges) put(v);
}

CsrGraph load_csr(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Errc::file_error, "cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCsrMagic, 8) != 0)
    raise(Errc::decode_error, "bad csr magic in " + path);
  Bytes word(8);
  auto get = [&]() -> std::uint64_t {
    f.read(reinterpret_cast<char*>(word.data()), 8);
    if (!f) raise(Errc::decode_error, "truncated csr file");
    return get_u64le(word.data());
  };
  CsrGraph g;
  g.n = get();
  g.m = get();
  g.offsets.resize(g.n + 1);
  for (auto& v : g.offsets) v = get();
  g.edges.resize(g.m);
  for (auto& v : g.edges) v = get();
  if (g.offsets.front() != 0 || g.offsets.back() != g.m)
    raise(Errc::decode_error, "inconsistent csr offsets");
  for (std::uint64_t v = 0; v < g.n; v++)
    if (g.offsets[v] > g.offsets[v + 1]) raise(Errc::decode_error, "csr offsets not monotone");
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
  edges.reserve(g.m);
  for (std::uint64_t v = 0; v < g.n; v++)
    for (std::uint64_t e = g.offsets[v]; e < g.offsets[v + 1]; e++) {
      if (g.edges[e] >= g.n) raise(Errc::decode_error, "csr edge target out of range");
      edges.emplace_back(v, g.edges[e]);
    }
  return build_csr(g.n, edges);
}

bool same_structure(const CsrGraph& a, const CsrGraph& b) {
  return a.n == b.n && a.m == b.m && a.offsets == b.offsets && a.edges == b.edges;
}

// ---- FAM plumbing ----

namespace {

Bytes serialize_words(const std::vector<std::uint64_t>& words) {
  Bytes out(words.size() * 8);
  for (std::size_t i = 0; i < words.size(); i++) put_u64le(out.data() + i * 8, words[i]);
  return out;
}

FamHandle upload_array(HostSession& s, const std::vector<std::uint64_t>& words) {
  Bytes raw = serialize_words(words.empty() ? std::vector<std::uint64_t>{0} : words);
  FamHandle h = s.fam_alloc(raw.size(), std::nullopt, true);
  s.fam_write(h, 0, raw);
  return h;
}

void dump_array(const std::vector<std::uint64_t>& words, const std::string& path) {
  Bytes raw = serialize_words(words.empty() ? std::vector<std::uint64_t>{0} : words);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(Errc::file_error, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
}

}  // namespace

FamGraph upload_graph(HostSession& s, const CsrGraph& g) {
  FamGraph fg;
  fg.n = g.n;
  fg.m = g.m;
  fg.offsets = upload_array(s, g.offsets);
  fg.edges = upload_array(s, g.edges);
  fg.in_offsets = upload_array(s, g.in_offsets);
  fg.in_edges = upload_array(s, g.in_edges);
  s.flush();
  return fg;
}

FamGraph upload_graph_via_files(HostSession& s, const CsrGraph& g, const std::string& dir,
                                const std::string& tag) {
  std::filesystem::create_directories(dir);
  auto alloc = [&](const std::vector<std::uint64_t>& words, const char* part) {
    std::string p = dir + "/" + tag + "." + part;
    if (!std::filesystem::exists(p)) dump_array(words, p);
    return s.fam_alloc(std::max<std::uint64_t>(words.size(), 1) * 8, p, false);
  };
  FamGraph fg;
  fg.n = g.n;
  fg.m = g.m;
  fg.offsets = alloc(g.offsets, "voff");
  fg.edges = alloc(g.edges, "edge");
  fg.in_offsets = alloc(g.in_offsets, "vioff");
  fg.in_edges = alloc(g.in_edges, "iedge");
  return fg;
}

void free_graph(HostSession& s, FamGraph& g) {
  if (g.offsets.valid()) s.fam_free(g.offsets);
  if (g.edges.valid()) s.fam_free(g.edges);
  if (g.in_offsets.valid()) s.fam_free(g.in_offsets);
  if (g.in_edges.valid()) s.fam_free(g.in_edges);
  g = FamGraph{};
}

}  // namespace offmem::graph
