#include "offmem/util.hpp"

#include <algorithm>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>

#include "offmem/error.hpp"

namespace offmem {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::ok: return "ok";
    case Errc::protection_fault: return "protection_fault";
    case Errc::message_too_large: return "message_too_large";
    case Errc::empty_batch: return "empty_batch";
    case Errc::out_of_bounds: return "out_of_bounds";
    case Errc::coherence: return "coherence";
    case Errc::unknown_region: return "unknown_region";
    case Errc::capacity_exceeded: return "capacity_exceeded";
    case Errc::file_error: return "file_error";
    case Errc::encode_error: return "encode_error";
    case Errc::decode_error: return "decode_error";
    case Errc::config_error: return "config_error";
    case Errc::budget_exceeded: return "budget_exceeded";
    case Errc::shutdown: return "shutdown";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::remote_error: return "remote_error";
  }
  return "unknown";
}

Errc errc_from_u32(std::uint32_t v) {
  if (v > std::uint32_t(Errc::remote_error)) return Errc::remote_error;
  return Errc(v);
}

std::string to_hex(ByteSpan data) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(data.size() * 2);
  for (std::uint8_t b : data) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xf]);
  }
  return s;
}

Bytes from_hex(const std::string& s) {
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (s.size() % 2 != 0) raise(Errc::decode_error, "odd hex string");
  Bytes out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); i++) {
    int hi = nib(s[2 * i]), lo = nib(s[2 * i + 1]);
    if (hi < 0 || lo < 0) raise(Errc::decode_error, "bad hex digit");
    out[i] = std::uint8_t((hi << 4) | lo);
  }
  return out;
}

LogLevel log_level() {
  static LogLevel lvl = [] {
    const char* e = std::getenv("OFFMEM_LOG");
    if (!e) return LogLevel::warn;
    std::string s(e);
    if (s == "debug") return LogLevel::debug;
    if (s == "info") return LogLevel::info;
    if (s == "warn") return LogLevel::warn;
    if (s == "error") return LogLevel::error;
    return LogLevel::off;
  }();
  return lvl;
}

void log_line(LogLevel lvl, const char* fmt, ...) {
  if (int(lvl) < int(log_level())) return;
  static const char* names[] = {"DEBUG", "INFO", "WARN", "ERROR"};
  std::fprintf(stderr, "[offmem %s] ", names[int(lvl)]);
  va_list ap;
  va_start(ap, fmt);
  std::vfprintf(stderr, fmt, ap);
  va_end(ap);
  std::fputc('\n', stderr);
}

void SparseByteStore::read(std::uint64_t offset, std::span<std::uint8_t> out) const {
  if (offset > length_ || out.size() > length_ - offset)
    raise(Errc::out_of_bounds, "store read past end");
  std::uint64_t pos = offset;
  std::size_t done = 0;
  while (done < out.size()) {
    std::uint64_t blk = pos / block_;
    std::uint32_t in_blk = std::uint32_t(pos % block_);
    std::size_t n = std::min<std::size_t>(out.size() - done, block_ - in_blk);
    auto it = blocks_.find(blk);
    if (it == blocks_.end()) {
      std::memset(out.data() + done, 0, n);
    } else {
      std::memcpy(out.data() + done, it->second.data() + in_blk, n);
    }
    done += n;
    pos += n;
  }
}

Bytes SparseByteStore::read(std::uint64_t offset, std::uint64_t len) const {
  Bytes out(len);
  read(offset, std::span<std::uint8_t>(out));
  return out;
}

void SparseByteStore::write(std::uint64_t offset, ByteSpan data) {
  if (offset > length_ || data.size() > length_ - offset)
    raise(Errc::out_of_bounds, "store write past end");
  std::uint64_t pos = offset;
  std::size_t done = 0;
  while (done < data.size()) {
    std::uint64_t blk = pos / block_;
    std::uint32_t in_blk = std::uint32_t(pos % block_);
    std::size_t n = std::min<std::size_t>(data.size() - done, block_ - in_blk);
    auto it = blocks_.find(blk);
    if (it == blocks_.end()) it = blocks_.emplace(blk, Bytes(block_, 0)).first;
    std::memcpy(it->second.data() + in_blk, data.data() + done, n);
    done += n;
    pos += n;
  }
}

unsigned default_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n ? n : 2;
}

void parallel_for(std::uint64_t begin, std::uint64_t end, unsigned threads,
                  const std::function<void(std::uint64_t, std::uint64_t)>& block_fn) {
  if (begin >= end) return;
  if (threads == 0) threads = default_threads();
  std::uint64_t total = end - begin;
  unsigned t = unsigned(std::min<std::uint64_t>(threads, total));
  if (t <= 1) {
    block_fn(begin, end);
    return;
  }
  std::uint64_t per = total / t;
  std::uint64_t extra = total % t;
  std::vector<std::thread> ws;
  ws.reserve(t);
  std::uint64_t lo = begin;
  for (unsigned i = 0; i < t; i++) {
    std::uint64_t hi = lo + per + (i < extra ? 1 : 0);
    ws.emplace_back([&block_fn, lo, hi] { block_fn(lo, hi); });
    lo = hi;
  }
  for (auto& w : ws) w.join();
}

}  // namespace offmem
