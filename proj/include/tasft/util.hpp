#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace tasft {

// Raised when a forward value goes non-finite (NaN policy: abort the step).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised by the transport solver on non-convergence or infeasible marginals.
struct solver_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised by dataset / checkpoint readers; message carries the location.
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shortest decimal form that round-trips a double bit-exactly. Used for all
// CSV output so re-runs compare byte-for-byte.
inline std::string fmt_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

// |a-b| / max(1, |a|, |b|): the relative-error measure used by gradient checks.
inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

}  // namespace tasft
