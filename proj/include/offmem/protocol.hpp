#pragma once

#include <optional>
#include <string>
#include <variant>

#include "offmem/error.hpp"
#include "offmem/util.hpp"

namespace offmem::protocol {

// immediate tags carried by two-sided messages
inline constexpr std::uint32_t kImmRead = 1;
inline constexpr std::uint32_t kImmWrite = 2;
inline constexpr std::uint32_t kImmError = 3;
inline constexpr std::uint32_t kImmReadResp = 4;
inline constexpr std::uint32_t kImmWriteAck = 5;
inline constexpr std::uint32_t kImmControl = 6;

enum class RequestKind : std::uint32_t { read = kImmRead, write = kImmWrite };

// Only READ/WRITE are request kinds; anything else is rejected.
RequestKind request_kind_from_immediate(std::uint32_t imm);

inline constexpr std::size_t kReadRequestBytes = 24;
inline constexpr std::size_t kWriteHeaderBytes = 12;
inline constexpr std::size_t kWriteAckBytes = 8;
inline constexpr std::size_t kErrorResponseBytes = 12;
inline constexpr std::uint64_t kMaxPageOffset = (1ull << 48) - 1;

// page_offset is a chunk index within the region; byte address = index * chunk_size.
struct ReadRequest {
  std::uint16_t region_id = 0;
  std::uint64_t page_offset = 0;  // 48 bits
  std::uint64_t dest_addr = 0;
  std::uint32_t size = 0;
  std::uint32_t dest_rkey = 0;
  bool operator==(const ReadRequest&) const = default;
};

struct WriteRequest {
  std::uint16_t region_id = 0;
  std::uint64_t page_offset = 0;  // 48 bits
  Bytes data;                     // size field derives from data.size()
  bool operator==(const WriteRequest&) const = default;
};

// A read response is the data followed by a 12-byte trailer with the same
// region/page word and size as a write header. The trailer goes at the end so
// a forwarder can append it to a staged buffer without moving the data.
struct ReadResponse {
  std::uint16_t region_id = 0;
  std::uint64_t page_offset = 0;
  Bytes data;
  bool operator==(const ReadResponse&) const = default;
};

struct WriteAck {
  std::uint16_t region_id = 0;
  std::uint64_t page_offset = 0;
  bool operator==(const WriteAck&) const = default;
};

struct ErrorResponse {
  std::uint16_t region_id = 0;
  std::uint64_t page_offset = 0;
  Errc code = Errc::remote_error;
  bool operator==(const ErrorResponse&) const = default;
};

Bytes encode_read(const ReadRequest& r);
ReadRequest decode_read(ByteSpan b);

Bytes encode_write(const WriteRequest& w);
WriteRequest decode_write(ByteSpan b);

// appends the trailer to `data` in place and returns it
Bytes encode_read_resp(std::uint16_t region_id, std::uint64_t page_offset, Bytes data);
ReadResponse decode_read_resp(Bytes b);  // strips the trailer in place

Bytes encode_write_ack(const WriteAck& a);
WriteAck decode_write_ack(ByteSpan b);

Bytes encode_error(const ErrorResponse& e);
ErrorResponse decode_error(ByteSpan b);

// bounds check against region metadata
void validate_extent(std::uint64_t page_offset, std::uint64_t size, std::uint64_t region_length,
                     std::uint32_t chunk_size);

// ---- control plane (setup/teardown RPCs) ----

struct Setup {
  std::uint8_t role = 1;  // 1 = host client, 2 = forwarding proxy
  std::uint32_t client_id = 0;
  bool operator==(const Setup&) const = default;
};
struct SetupAck {
  bool operator==(const SetupAck&) const = default;
};
struct AllocRegion {
  std::uint64_t length = 0;
  std::uint32_t chunk_size = 0;
  bool writable = false;
  std::uint32_t client_id = 0;
  std::optional<std::string> file;
  bool operator==(const AllocRegion&) const = default;
};
struct AllocAck {
  std::uint16_t region_id = 0;
  std::uint32_t rkey = 0;
  bool operator==(const AllocAck&) const = default;
};
struct FreeRegion {
  std::uint16_t region_id = 0;
  std::uint32_t client_id = 0;
  bool operator==(const FreeRegion&) const = default;
};
struct FreeAck {
  bool destroyed = false;
  bool operator==(const FreeAck&) const = default;
};
// Pushed by the proxy so clients can serve listed chunks with one-sided reads
// from the proxy cache store, and bypass the proxy for the rest of the region.
struct StaticCacheInfo {
  std::uint16_t region_id = 0;
  std::uint64_t covered_begin = 0;  // byte range within the region
  std::uint64_t covered_end = 0;
  std::uint64_t store_offset = 0;  // byte offset of covered_begin in the cache store
  std::uint32_t entry_bytes = 0;
  std::uint32_t cache_rkey = 0;
  bool operator==(const StaticCacheInfo&) const = default;
};

using ControlMessage =
    std::variant<Setup, SetupAck, AllocRegion, AllocAck, FreeRegion, FreeAck, StaticCacheInfo>;

Bytes encode_control(const ControlMessage& m);
ControlMessage decode_control(ByteSpan b);

}  // namespace offmem::protocol
