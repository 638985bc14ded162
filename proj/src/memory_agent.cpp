#include "offmem/memory_agent.hpp"

#include <filesystem>
#include <fstream>

namespace offmem {

namespace proto = protocol;

MemoryAgent::MemoryAgent(Endpoint& ep, MemoryAgentConfig cfg) : ep_(ep), cfg_(std::move(cfg)) {}

MemoryAgent::~MemoryAgent() { stop(); }

void MemoryAgent::start() {
  if (running_) return;
  running_ = true;
  service_ = std::thread([this] { service_loop(); });
}

void MemoryAgent::stop() {
  if (!running_) return;
  running_ = false;
  ep_.close();
  if (service_.joinable()) service_.join();
}

void MemoryAgent::service_loop() {
  while (auto msg = ep_.recv()) {
    if (msg->immediate != proto::kImmControl) {
      OFFMEM_LOG_WARN("memory agent dropping message with immediate %u", msg->immediate);
      continue;
    }
    try {
      handle_control(*msg);
    } catch (const Error& e) {
      ep_.send(msg->sender, proto::kImmError,
               proto::encode_error({0, 0, e.code()}), OpMeta{});
    }
  }
}

void MemoryAgent::handle_control(const Message& msg) {
  auto cm = proto::decode_control(msg.payload);
  if (auto* setup = std::get_if<proto::Setup>(&cm)) {
    if (setup->role == 2) add_trusted_forwarder(msg.sender);
    ep_.send(msg.sender, proto::kImmControl, proto::encode_control(proto::SetupAck{}), OpMeta{});
    return;
  }
  if (auto* alloc = std::get_if<proto::AllocRegion>(&cm)) {
    auto res = alloc_region(alloc->length, alloc->file, alloc->writable, alloc->client_id,
                            msg.sender, alloc->chunk_size);
    ep_.send(msg.sender, proto::kImmControl,
             proto::encode_control(proto::AllocAck{res.region_id, res.rkey}),
             OpMeta{TrafficClass::on_demand, alloc->client_id});
    return;
  }
  if (auto* free = std::get_if<proto::FreeRegion>(&cm)) {
    bool destroyed = free_region(free->region_id, free->client_id);
    ep_.send(msg.sender, proto::kImmControl,
             proto::encode_control(proto::FreeAck{destroyed}),
             OpMeta{TrafficClass::on_demand, free->client_id});
    return;
  }
  raise(Errc::invalid_argument, "unexpected control message at memory agent");
}

void MemoryAgent::apply_writer_permissions_locked(std::uint16_t region_id) {
  const RegionInfo& info = regions_.at(region_id);
  std::set<EndpointId> writers = trusted_;
  if (info.writer) {
    auto it = first_requester_.find(region_id);
    if (it != first_requester_.end()) writers.insert(it->second);
  }
  ep_.restrict_writers(info.rkey, std::move(writers));
}

MemoryAgent::AllocResult MemoryAgent::alloc_region(std::uint64_t length,
                                                   const std::optional<std::string>& file,
                                                   bool writable, std::uint32_t client_id,
                                                   EndpointId requester,
                                                   std::uint32_t chunk_size) {
  if (length == 0) raise(Errc::invalid_argument, "zero-length region");
  if (chunk_size == 0) raise(Errc::config_error, "zero chunk size");

  std::string file_key;
  if (file) {
    std::filesystem::path p(*file);
    if (p.is_relative() && !cfg_.data_dir.empty()) p = std::filesystem::path(cfg_.data_dir) / p;
    file_key = p.string();
  }

  std::unique_lock<std::mutex> lk(mu_);

  if (file) {
    auto it = by_file_.find(file_key);
    if (it != by_file_.end()) {
      RegionInfo& info = regions_.at(it->second);
      if (info.length != length)
        raise(Errc::invalid_argument, "length mismatch on file region attach");
      if (info.chunk_size != chunk_size)
        raise(Errc::invalid_argument, "chunk size mismatch on file region attach");
      if (writable) {
        if (info.writer) raise(Errc::coherence, "region already has a writer");
        info.writer = client_id;
        first_requester_[info.region_id] = requester;
        apply_writer_permissions_locked(info.region_id);
      }
      info.attach_count++;
      return {info.region_id, info.rkey, true};
    }
  }

  if (used_ + length > cfg_.capacity_bytes)
    raise(Errc::capacity_exceeded, "memory node capacity exceeded");
  if (regions_.size() >= 0xFFFF) raise(Errc::capacity_exceeded, "region id space exhausted");

  RemoteRef ref = ep_.register_region(length);

  RegionInfo info;
  while (regions_.count(next_region_) || next_region_ == 0) next_region_++;
  info.region_id = next_region_++;
  info.rkey = ref.rkey;
  info.length = length;
  info.chunk_size = chunk_size;
  info.attach_count = 1;
  if (writable) info.writer = client_id;
  if (file) info.file_key = file_key;

  if (file) {
    std::ifstream f(file_key, std::ios::binary);
    if (!f) {
      ep_.unregister_region(ref.rkey);
      raise(Errc::file_error, "cannot open " + file_key);
    }
    // first min(length, file size) bytes come from the file, the rest is zero
    std::uint64_t off = 0;
    Bytes buf(1u << 20);
    while (off < length && f) {
      f.read(reinterpret_cast<char*>(buf.data()),
             std::streamsize(std::min<std::uint64_t>(buf.size(), length - off)));
      std::streamsize got = f.gcount();
      if (got <= 0) break;
      ep_.local_write(ref.rkey, off, ByteSpan(buf.data(), std::size_t(got)));
      off += std::uint64_t(got);
    }
  }

  used_ += length;
  regions_[info.region_id] = info;
  first_requester_[info.region_id] = requester;
  if (file) by_file_[file_key] = info.region_id;
  apply_writer_permissions_locked(info.region_id);
  return {info.region_id, info.rkey, false};
}

bool MemoryAgent::free_region(std::uint16_t region_id, std::uint32_t client_id) {
  std::lock_guard<std::mutex> g(mu_);
  auto it = regions_.find(region_id);
  if (it == regions_.end()) raise(Errc::unknown_region, "free of unknown region");
  RegionInfo& info = it->second;
  if (info.writer && *info.writer == client_id) {
    info.writer.reset();
    apply_writer_permissions_locked(region_id);
  }
  if (--info.attach_count > 0) return false;
  ep_.unregister_region(info.rkey);
  used_ -= info.length;
  if (info.file_key) by_file_.erase(*info.file_key);
  first_requester_.erase(region_id);
  regions_.erase(it);
  return true;
}

Bytes MemoryAgent::serve_read(std::uint16_t region_id, std::uint64_t chunk_index,
                              std::uint32_t size) const {
  Rkey rkey;
  std::uint64_t offset;
  {
    std::lock_guard<std::mutex> g(mu_);
    auto it = regions_.find(region_id);
    if (it == regions_.end()) raise(Errc::unknown_region, "read of unknown region");
    proto::validate_extent(chunk_index, size, it->second.length, it->second.chunk_size);
    rkey = it->second.rkey;
    offset = chunk_index * it->second.chunk_size;
  }
  return ep_.local_read(rkey, offset, size);
}

void MemoryAgent::serve_write(std::uint16_t region_id, std::uint64_t chunk_index, ByteSpan data,
                              std::uint32_t client_id) {
  Rkey rkey;
  std::uint64_t offset;
  {
    std::lock_guard<std::mutex> g(mu_);
    auto it = regions_.find(region_id);
    if (it == regions_.end()) raise(Errc::unknown_region, "write of unknown region");
    if (!it->second.writer || *it->second.writer != client_id)
      raise(Errc::coherence, "write from non-writer client");
    proto::validate_extent(chunk_index, data.size(), it->second.length, it->second.chunk_size);
    rkey = it->second.rkey;
    offset = chunk_index * it->second.chunk_size;
  }
  ep_.local_write(rkey, offset, data);
}

void MemoryAgent::add_trusted_forwarder(EndpointId ep) {
  std::lock_guard<std::mutex> g(mu_);
  trusted_.insert(ep);
  for (auto& [id, info] : regions_) apply_writer_permissions_locked(id);
}

std::uint64_t MemoryAgent::capacity_used() const {
  std::lock_guard<std::mutex> g(mu_);
  return used_;
}

std::optional<RegionInfo> MemoryAgent::region_info(std::uint16_t region_id) const {
  std::lock_guard<std::mutex> g(mu_);
  auto it = regions_.find(region_id);
  if (it == regions_.end()) return std::nullopt;
  return it->second;
}

Bytes MemoryAgent::region_snapshot(std::uint16_t region_id) const {
  Rkey rkey;
  std::uint64_t length;
  {
    std::lock_guard<std::mutex> g(mu_);
    auto it = regions_.find(region_id);
    if (it == regions_.end()) raise(Errc::unknown_region, "snapshot of unknown region");
    rkey = it->second.rkey;
    length = it->second.length;
  }
  return ep_.local_read(rkey, 0, length);
}

}  // namespace offmem
