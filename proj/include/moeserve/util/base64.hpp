#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace moeserve {

namespace detail {
inline constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace detail

inline std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 3 <= bytes.size()) {
    uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                 (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                 static_cast<unsigned char>(bytes[i + 2]);
    out.push_back(detail::kB64Alphabet[(v >> 18) & 63]);
    out.push_back(detail::kB64Alphabet[(v >> 12) & 63]);
    out.push_back(detail::kB64Alphabet[(v >> 6) & 63]);
    out.push_back(detail::kB64Alphabet[v & 63]);
    i += 3;
  }
  size_t rem = bytes.size() - i;
  if (rem == 1) {
    uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    out.push_back(detail::kB64Alphabet[(v >> 18) & 63]);
    out.push_back(detail::kB64Alphabet[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                 (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out.push_back(detail::kB64Alphabet[(v >> 18) & 63]);
    out.push_back(detail::kB64Alphabet[(v >> 12) & 63]);
    out.push_back(detail::kB64Alphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

// Strict decoder: canonical padding required, no whitespace, no stray bits.
// Returns nullopt on any malformed input.
inline std::optional<std::string> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) return std::nullopt;
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    bool last = (i + 4 == text.size());
    int pad = 0;
    if (last) {
      if (text[i + 3] == '=') pad++;
      if (text[i + 2] == '=') pad++;
    }
    if (pad == 1 && text[i + 3] != '=') return std::nullopt;
    int v0 = detail::b64_value(text[i]);
    int v1 = detail::b64_value(text[i + 1]);
    int v2 = pad >= 2 ? 0 : detail::b64_value(text[i + 2]);
    int v3 = pad >= 1 ? 0 : detail::b64_value(text[i + 3]);
    if (v0 < 0 || v1 < 0 || v2 < 0 || v3 < 0) return std::nullopt;
    uint32_t v = (v0 << 18) | (v1 << 12) | (v2 << 6) | v3;
    // reject non-canonical trailing bits, e.g. "AB==" with nonzero low bits
    if (pad == 2 && (v & 0xFFFF) != 0) return std::nullopt;
    if (pad == 1 && (v & 0xFF) != 0) return std::nullopt;
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    if (pad < 2) out.push_back(static_cast<char>((v >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<char>(v & 0xFF));
  }
  return out;
}

}  // namespace moeserve
