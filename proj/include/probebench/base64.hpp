#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace probebench {

/// RFC 4648 base64 with padding.
std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws ValidationError on characters outside the alphabet or bad padding.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// f32 little-endian packing used by the external embedder wire protocol.
std::string encode_f32_samples(std::span<const float> samples);
std::vector<float> decode_f32_samples(std::string_view base64);

}  // namespace probebench
