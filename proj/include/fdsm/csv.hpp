#pragma once

#include <charconv>
#include <cmath>
#include <string>
#include <system_error>

namespace fdsm {

/// Shortest text that parses back to the same double ("1", "0.1", "nan").
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  if (res.ec != std::errc()) return "nan";
  return std::string(buf, res.ptr);
}

}  // namespace fdsm
