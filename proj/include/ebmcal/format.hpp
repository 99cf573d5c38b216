#pragma once

#include <charconv>
#include <string>
#include <system_error>

namespace ebmcal {

// Shortest decimal text that parses back to exactly the same double.
inline std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) return "nan";
  return std::string(buf, end);
}

}  // namespace ebmcal
