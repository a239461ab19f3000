#include "fsad/stats.hpp"

#include <cmath>

namespace fsad {

double Summary::ci95_half_width() const { return count > 0 ? 1.96 * std / std::sqrt(static_cast<double>(count)) : 0.0; }

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / s.count;
  if (s.count > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (s.count - 1));
  }
  return s;
}

}  // namespace fsad
