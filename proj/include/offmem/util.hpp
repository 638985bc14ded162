#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace offmem {

using Bytes = std::vector<std::uint8_t>;
using ByteSpan = std::span<const std::uint8_t>;

// ---- little-endian field packing ----

inline void put_u16le(std::uint8_t* p, std::uint16_t v) {
  p[0] = std::uint8_t(v);
  p[1] = std::uint8_t(v >> 8);
}
inline void put_u32le(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = std::uint8_t(v >> (8 * i));
}
inline void put_u64le(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; i++) p[i] = std::uint8_t(v >> (8 * i));
}
inline std::uint16_t get_u16le(const std::uint8_t* p) {
  return std::uint16_t(p[0] | (std::uint16_t(p[1]) << 8));
}
inline std::uint32_t get_u32le(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; i++) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

inline void append_u8(Bytes& b, std::uint8_t v) { b.push_back(v); }
inline void append_u16le(Bytes& b, std::uint16_t v) {
  b.resize(b.size() + 2);
  put_u16le(b.data() + b.size() - 2, v);
}
inline void append_u32le(Bytes& b, std::uint32_t v) {
  b.resize(b.size() + 4);
  put_u32le(b.data() + b.size() - 4, v);
}
inline void append_u64le(Bytes& b, std::uint64_t v) {
  b.resize(b.size() + 8);
  put_u64le(b.data() + b.size() - 8, v);
}

// ---- deterministic rng ----

struct SplitMix64 {
  std::uint64_t state;
  explicit SplitMix64(std::uint64_t seed) : state(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  std::uint64_t next_below(std::uint64_t n) { return n ? next() % n : 0; }
  double next_double() { return double(next() >> 11) * 0x1.0p-53; }
};

inline std::uint64_t fnv1a64(ByteSpan data, std::uint64_t h = 1469598103934665603ull) {
  for (std::uint8_t b : data) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::string to_hex(ByteSpan data);
Bytes from_hex(const std::string& s);

// ---- logging (level from OFFMEM_LOG: debug|info|warn|error|off) ----

enum class LogLevel : int { debug = 0, info = 1, warn = 2, error = 3, off = 4 };
LogLevel log_level();
void log_line(LogLevel lvl, const char* fmt, ...) __attribute__((format(printf, 2, 3)));

#define OFFMEM_LOG_DEBUG(...) ::offmem::log_line(::offmem::LogLevel::debug, __VA_ARGS__)
#define OFFMEM_LOG_INFO(...) ::offmem::log_line(::offmem::LogLevel::info, __VA_ARGS__)
#define OFFMEM_LOG_WARN(...) ::offmem::log_line(::offmem::LogLevel::warn, __VA_ARGS__)
#define OFFMEM_LOG_ERROR(...) ::offmem::log_line(::offmem::LogLevel::error, __VA_ARGS__)

// ---- multi-producer/multi-consumer queue; each element popped exactly once ----

template <typename T>
class SyncQueue {
 public:
  bool push(T v) {
    {
      std::lock_guard<std::mutex> g(mu_);
      if (closed_) return false;
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return closed_ || !q_.empty(); });
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

  std::optional<T> try_pop() {
    std::lock_guard<std::mutex> g(mu_);
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

  void close() {
    {
      std::lock_guard<std::mutex> g(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard<std::mutex> g(mu_);
    return closed_;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> g(mu_);
    return q_.size();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
  bool closed_ = false;
};

// ---- sparse backing store: blocks materialize on first write, reads of
// untouched ranges yield zeros. Not thread-safe; callers hold their own lock.

class SparseByteStore {
 public:
  explicit SparseByteStore(std::uint64_t length, std::uint32_t block = 1u << 16)
      : length_(length), block_(block) {}

  std::uint64_t length() const { return length_; }

  void read(std::uint64_t offset, std::span<std::uint8_t> out) const;
  void write(std::uint64_t offset, ByteSpan data);
  Bytes read(std::uint64_t offset, std::uint64_t len) const;
  Bytes snapshot() const { return read(0, length_); }
  std::uint64_t materialized_bytes() const { return blocks_.size() * std::uint64_t(block_); }

 private:
  std::uint64_t length_;
  std::uint32_t block_;
  std::unordered_map<std::uint64_t, Bytes> blocks_;
};

// ---- fork/join helper used by the graph kernels ----

void parallel_for(std::uint64_t begin, std::uint64_t end, unsigned threads,
                  const std::function<void(std::uint64_t, std::uint64_t)>& block_fn);

unsigned default_threads();

}  // namespace offmem
