#pragma once

#include <span>

namespace fsad {

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  int count = 0;

  /// Half-width of the normal-approximation 95% interval of the mean.
  double ci95_half_width() const;
};

Summary summarize(std::span<const double> values);

}  // namespace fsad
