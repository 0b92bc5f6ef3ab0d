#include "probebench/base64.hpp"

#include <array>
#include <cstring>

#include "probebench/error.hpp"

namespace probebench {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

constexpr std::array<int, 256> make_reverse() {
  std::array<int, 256> r{};
  for (auto& v : r) v = -1;
  for (int i = 0; i < 64; ++i) r[static_cast<unsigned char>(kAlphabet[i])] = i;
  return r;
}

constexpr auto kReverse = make_reverse();

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back(kAlphabet[v & 63]);
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ValidationError("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=') {
        if (i + 4 != text.size() || j < 2) throw ValidationError("base64: misplaced padding");
        v[j] = 0;
        ++pad;
      } else {
        if (pad > 0) throw ValidationError("base64: data after padding");
        v[j] = kReverse[static_cast<unsigned char>(c)];
        if (v[j] < 0) throw ValidationError("base64: invalid character");
      }
    }
    const std::uint32_t word = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(word >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((word >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(word & 0xff));
  }
  return out;
}

std::string encode_f32_samples(std::span<const float> samples) {
  std::vector<std::uint8_t> bytes(samples.size() * 4);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::uint32_t raw;
    std::memcpy(&raw, &samples[i], 4);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>((raw >> (8 * b)) & 0xff);
  }
  return base64_encode(bytes);
}

std::vector<float> decode_f32_samples(std::string_view base64) {
  const auto bytes = base64_decode(base64);
  if (bytes.size() % 4 != 0) throw ValidationError("f32 payload length is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t raw = 0;
    for (int b = 0; b < 4; ++b) raw |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    std::memcpy(&out[i], &raw, 4);
  }
  return out;
}

}  // namespace probebench
