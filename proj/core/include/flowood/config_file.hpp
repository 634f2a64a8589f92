#pragma once

#include <string>
#include <utility>
#include <vector>

namespace flowood {

// Flat UTF-8 "key = value" configuration. '#' starts a comment, blank lines
// are skipped. Returns entries in file order; duplicate keys and lines
// without '=' are errors naming the line number. Key validation happens at
// apply time, where the set of known keys is defined.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin = "<string>");
std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path);

} // namespace flowood
