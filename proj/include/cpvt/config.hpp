#pragma once

#include <map>
#include <string>

namespace cpvt {

// Flat "key=value" lines. Blank lines and lines starting with '#' are
// skipped; whitespace around keys and values is trimmed. A line without '='
// is a ConfigError; a repeated key is a ConfigError.
std::map<std::string, std::string> parse_kv_text(const std::string& text);

// parse_kv_text over a file's contents; missing file is an IoError.
std::map<std::string, std::string> parse_config_file(const std::string& path);

}  // namespace cpvt
