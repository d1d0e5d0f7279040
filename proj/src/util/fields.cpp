#include "mococxr/fields.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mococxr::fields {

std::string format_double(double v) { return fmt::format("{}", v); }

std::string format_list(const std::vector<std::size_t>& values) { return fmt::format("{}", fmt::join(values, ",")); }

std::string format_list(const std::vector<double>& values) { return fmt::format("{}", fmt::join(values, ",")); }

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& text, const char* what) {
  throw std::invalid_argument(fmt::format("{}: cannot parse '{}' as {}", key, text, what));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace

double parse_double(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t.empty()) bad(key, text, "a number");
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    bad(key, text, "a number");
  }
  if (used != t.size() || !std::isfinite(v)) bad(key, text, "a finite number");
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) bad(key, text, "a non-negative integer");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  bad(key, text, "a boolean");
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_uint(key, item));
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_double(key, item));
  return out;
}

Fields strip_prefix(const Fields& all, const std::string& prefix) {
  Fields out;
  for (const auto& [k, v] : all) {
    if (k.compare(0, prefix.size(), prefix) == 0) out[k.substr(prefix.size())] = v;
  }
  return out;
}

Fields add_prefix(const Fields& fields, const std::string& prefix) {
  Fields out;
  for (const auto& [k, v] : fields) out[prefix + k] = v;
  return out;
}

void reject_unknown(const Fields& fields, const std::set<std::string>& known, const std::string& context) {
  for (const auto& [k, v] : fields) {
    if (!known.count(k)) throw std::invalid_argument(fmt::format("{}: unknown key '{}'", context, k));
  }
}

}  // namespace mococxr::fields
