#pragma once

#include <string>
#include <vector>

namespace probebench {

/// RFC 4180-style CSV: quoted fields, doubled quotes, CRLF or LF rows.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

/// Quotes a field when it contains a comma, quote, or newline.
std::string csv_field(const std::string& value);

}  // namespace probebench
