#include "offmem/protocol.hpp"

namespace offmem::protocol {

RequestKind request_kind_from_immediate(std::uint32_t imm) {
  if (imm == kImmRead) return RequestKind::read;
  if (imm == kImmWrite) return RequestKind::write;
  raise(Errc::decode_error, "unknown request immediate " + std::to_string(imm));
}

// word0 layout: region_id in bits 63..48, page_offset in bits 47..0,
// serialized little-endian.
static std::uint64_t pack_word0(std::uint16_t region_id, std::uint64_t page_offset) {
  if (page_offset > kMaxPageOffset) raise(Errc::encode_error, "page_offset exceeds 48 bits");
  return (std::uint64_t(region_id) << 48) | page_offset;
}

static void unpack_word0(std::uint64_t w, std::uint16_t& region_id, std::uint64_t& page_offset) {
  region_id = std::uint16_t(w >> 48);
  page_offset = w & kMaxPageOffset;
}

Bytes encode_read(const ReadRequest& r) {
  if (r.size == 0) raise(Errc::encode_error, "read request of zero size");
  Bytes b(kReadRequestBytes);
  put_u64le(b.data(), pack_word0(r.region_id, r.page_offset));
  put_u64le(b.data() + 8, r.dest_addr);
  put_u32le(b.data() + 16, r.size);
  put_u32le(b.data() + 20, r.dest_rkey);
  return b;
}

ReadRequest decode_read(ByteSpan b) {
  if (b.size() != kReadRequestBytes)
    raise(Errc::decode_error, "read request must be 24 bytes, got " + std::to_string(b.size()));
  ReadRequest r;
  unpack_word0(get_u64le(b.data()), r.region_id, r.page_offset);
  r.dest_addr = get_u64le(b.data() + 8);
  r.size = get_u32le(b.data() + 16);
  r.dest_rkey = get_u32le(b.data() + 20);
  if (r.size == 0) raise(Errc::decode_error, "read request of zero size");
  return r;
}

Bytes encode_write(const WriteRequest& w) {
  if (w.data.empty()) raise(Errc::encode_error, "write request of zero size");
  if (w.data.size() > UINT32_MAX) raise(Errc::encode_error, "write request too large");
  Bytes b(kWriteHeaderBytes + w.data.size());
  put_u64le(b.data(), pack_word0(w.region_id, w.page_offset));
  put_u32le(b.data() + 8, std::uint32_t(w.data.size()));
  std::memcpy(b.data() + kWriteHeaderBytes, w.data.data(), w.data.size());
  return b;
}

WriteRequest decode_write(ByteSpan b) {
  if (b.size() < kWriteHeaderBytes) raise(Errc::decode_error, "short write request");
  WriteRequest w;
  unpack_word0(get_u64le(b.data()), w.region_id, w.page_offset);
  std::uint32_t size = get_u32le(b.data() + 8);
  if (size == 0) raise(Errc::decode_error, "write request of zero size");
  if (b.size() != kWriteHeaderBytes + size)
    raise(Errc::decode_error, "declared size does not match payload length");
  w.data.assign(b.begin() + kWriteHeaderBytes, b.end());
  return w;
}

Bytes encode_read_resp(std::uint16_t region_id, std::uint64_t page_offset, Bytes data) {
  if (data.empty()) raise(Errc::encode_error, "read response of zero size");
  if (data.size() > UINT32_MAX) raise(Errc::encode_error, "read response too large");
  std::uint32_t size = std::uint32_t(data.size());
  std::uint64_t w0 = pack_word0(region_id, page_offset);
  data.resize(data.size() + kWriteHeaderBytes);
  put_u64le(data.data() + size, w0);
  put_u32le(data.data() + size + 8, size);
  return data;
}

ReadResponse decode_read_resp(Bytes b) {
  if (b.size() < kWriteHeaderBytes + 1) raise(Errc::decode_error, "short read response");
  std::size_t data_len = b.size() - kWriteHeaderBytes;
  ReadResponse r;
  unpack_word0(get_u64le(b.data() + data_len), r.region_id, r.page_offset);
  std::uint32_t size = get_u32le(b.data() + data_len + 8);
  if (size != data_len) raise(Errc::decode_error, "read response trailer size mismatch");
  b.resize(data_len);
  r.data = std::move(b);
  return r;
}

Bytes encode_write_ack(const WriteAck& a) {
  Bytes b(kWriteAckBytes);
  put_u64le(b.data(), pack_word0(a.region_id, a.page_offset));
  return b;
}

WriteAck decode_write_ack(ByteSpan b) {
  if (b.size() != kWriteAckBytes) raise(Errc::decode_error, "write ack must be 8 bytes");
  WriteAck a;
  unpack_word0(get_u64le(b.data()), a.region_id, a.page_offset);
  return a;
}

Bytes encode_error(const ErrorResponse& e) {
  Bytes b(kErrorResponseBytes);
  put_u64le(b.data(), pack_word0(e.region_id, e.page_offset));
  put_u32le(b.data() + 8, std::uint32_t(e.code));
  return b;
}

ErrorResponse decode_error(ByteSpan b) {
  if (b.size() != kErrorResponseBytes) raise(Errc::decode_error, "error response must be 12 bytes");
  ErrorResponse e;
  unpack_word0(get_u64le(b.data()), e.region_id, e.page_offset);
  e.code = errc_from_u32(get_u32le(b.data() + 8));
  return e;
}

void validate_extent(std::uint64_t page_offset, std::uint64_t size, std::uint64_t region_length,
                     std::uint32_t chunk_size) {
  if (size == 0) raise(Errc::out_of_bounds, "zero-size extent");
  if (chunk_size == 0) raise(Errc::config_error, "zero chunk size");
  std::uint64_t begin = page_offset * chunk_size;
  if (begin / chunk_size != page_offset) raise(Errc::out_of_bounds, "extent overflow");
  if (begin > region_length || size > region_length - begin)
    raise(Errc::out_of_bounds, "extent beyond region end");
}

// ---- control plane ----

namespace {

constexpr std::uint8_t kTagSetup = 1;
constexpr std::uint8_t kTagSetupAck = 2;
constexpr std::uint8_t kTagAllocRegion = 3;
constexpr std::uint8_t kTagAllocAck = 4;
constexpr std::uint8_t kTagFreeRegion = 5;
constexpr std::uint8_t kTagFreeAck = 6;
constexpr std::uint8_t kTagStaticCacheInfo = 7;

struct Reader {
  ByteSpan b;
  std::size_t pos = 0;
  void need(std::size_t n) {
    if (b.size() - pos < n) raise(Errc::decode_error, "truncated control message");
  }
  std::uint8_t u8() {
    need(1);
    return b[pos++];
  }
  std::uint16_t u16() {
    need(2);
    auto v = get_u16le(b.data() + pos);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    auto v = get_u32le(b.data() + pos);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    auto v = get_u64le(b.data() + pos);
    pos += 8;
    return v;
  }
  std::string str() {
    std::uint16_t n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
  void done() {
    if (pos != b.size()) raise(Errc::decode_error, "trailing bytes in control message");
  }
};

void append_str(Bytes& b, const std::string& s) {
  if (s.size() > UINT16_MAX) raise(Errc::encode_error, "string too long");
  append_u16le(b, std::uint16_t(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

}  // namespace

Bytes encode_control(const ControlMessage& m) {
  Bytes b;
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Setup>) {
          append_u8(b, kTagSetup);
          append_u8(b, v.role);
          append_u32le(b, v.client_id);
        } else if constexpr (std::is_same_v<T, SetupAck>) {
          append_u8(b, kTagSetupAck);
        } else if constexpr (std::is_same_v<T, AllocRegion>) {
          append_u8(b, kTagAllocRegion);
          append_u64le(b, v.length);
          append_u32le(b, v.chunk_size);
          append_u8(b, v.writable ? 1 : 0);
          append_u32le(b, v.client_id);
          append_u8(b, v.file ? 1 : 0);
          if (v.file) append_str(b, *v.file);
        } else if constexpr (std::is_same_v<T, AllocAck>) {
          append_u8(b, kTagAllocAck);
          append_u16le(b, v.region_id);
          append_u32le(b, v.rkey);
        } else if constexpr (std::is_same_v<T, FreeRegion>) {
          append_u8(b, kTagFreeRegion);
          append_u16le(b, v.region_id);
          append_u32le(b, v.client_id);
        } else if constexpr (std::is_same_v<T, FreeAck>) {
          append_u8(b, kTagFreeAck);
          append_u8(b, v.destroyed ? 1 : 0);
        } else if constexpr (std::is_same_v<T, StaticCacheInfo>) {
          append_u8(b, kTagStaticCacheInfo);
          append_u16le(b, v.region_id);
          append_u64le(b, v.covered_begin);
          append_u64le(b, v.covered_end);
          append_u64le(b, v.store_offset);
          append_u32le(b, v.entry_bytes);
          append_u32le(b, v.cache_rkey);
        }
      },
      m);
  return b;
}

ControlMessage decode_control(ByteSpan b) {
  Reader r{b};
  std::uint8_t tag = r.u8();
  switch (tag) {
    case kTagSetup: {
      Setup v;
      v.role = r.u8();
      v.client_id = r.u32();
      r.done();
      return v;
    }
    case kTagSetupAck: {
      r.done();
      return SetupAck{};
    }
    case kTagAllocRegion: {
      AllocRegion v;
      v.length = r.u64();
      v.chunk_size = r.u32();
      v.writable = r.u8() != 0;
      v.client_id = r.u32();
      if (r.u8() != 0) v.file = r.str();
      r.done();
      return v;
    }
    case kTagAllocAck: {
      AllocAck v;
      v.region_id = r.u16();
      v.rkey = r.u32();
      r.done();
      return v;
    }
    case kTagFreeRegion: {
      FreeRegion v;
      v.region_id = r.u16();
      v.client_id = r.u32();
      r.done();
      return v;
    }
    case kTagFreeAck: {
      FreeAck v;
      v.destroyed = r.u8() != 0;
      r.done();
      return v;
    }
    case kTagStaticCacheInfo: {
      StaticCacheInfo v;
      v.region_id = r.u16();
      v.covered_begin = r.u64();
      v.covered_end = r.u64();
      v.store_offset = r.u64();
      v.entry_bytes = r.u32();
      v.cache_rkey = r.u32();
      r.done();
      return v;
    }
    default:
      raise(Errc::decode_error, "unknown control tag " + std::to_string(tag));
  }
}

}  // namespace offmem::protocol
