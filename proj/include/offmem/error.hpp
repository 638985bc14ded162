#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace offmem {

enum class Errc : std::uint32_t {
  ok = 0,
  protection_fault = 1,   // out-of-bounds or unknown rkey on a registered region
  message_too_large = 2,
  empty_batch = 3,
  out_of_bounds = 4,
  coherence = 5,          // single-writer rule violated
  unknown_region = 6,
  capacity_exceeded = 7,
  file_error = 8,
  encode_error = 9,
  decode_error = 10,
  config_error = 11,
  budget_exceeded = 12,
  shutdown = 13,
  invalid_argument = 14,
  remote_error = 15,
};

const char* errc_name(Errc c);
Errc errc_from_u32(std::uint32_t v);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace offmem
