#include "csmamba/digest.hpp"

#include <openssl/sha.h>

namespace csm {

Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest d{};
  SHA256(bytes.data(), bytes.size(), d.data());
  return d;
}

Digest sha256(std::string_view text) {
  return sha256(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex(const Digest& d) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(d.size() * 2);
  for (std::uint8_t b : d) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

}  // namespace csm
