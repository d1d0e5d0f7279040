#pragma once

// Helpers for flat string key/value records (config sections, checkpoint
// headers). Numbers are written in shortest round-trip form.

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mococxr::fields {

using Fields = std::map<std::string, std::string>;

std::string format_double(double v);
std::string format_list(const std::vector<std::size_t>& values);
std::string format_list(const std::vector<double>& values);

// Strict parsers: the whole string must be consumed. Errors name `key`.
double parse_double(const std::string& key, const std::string& text);
std::uint64_t parse_uint(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);
std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& text);
std::vector<double> parse_double_list(const std::string& key, const std::string& text);

// Entries whose key starts with prefix, with the prefix removed.
Fields strip_prefix(const Fields& all, const std::string& prefix);
Fields add_prefix(const Fields& fields, const std::string& prefix);

// Throws std::invalid_argument naming the first key not in `known`.
void reject_unknown(const Fields& fields, const std::set<std::string>& known, const std::string& context);

}  // namespace mococxr::fields
