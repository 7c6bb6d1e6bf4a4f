#pragma once

// Flat key=value text used by config files and checkpoint headers.

#include <map>
#include <string>
#include <string_view>

namespace thm {

using KeyValues = std::map<std::string, std::string>;

/// One key=value per line; blank lines and lines starting with '#' are
/// skipped, whitespace around keys and values is trimmed. Malformed or
/// repeated keys throw ParameterError.
KeyValues parse_kv(std::string_view text, std::string_view origin = "config");
KeyValues read_kv_file(const std::string& path);

/// Round-trippable decimal form (17 significant digits).
std::string format_double(double v);
std::size_t parse_size(const std::string& key, const std::string& v);
long parse_long(const std::string& key, const std::string& v);
double parse_double(const std::string& key, const std::string& v);
bool parse_bool(const std::string& key, const std::string& v);

}  // namespace thm
