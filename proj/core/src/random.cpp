#include "fsad/random.hpp"

#include <numeric>
#include <stdexcept>

namespace fsad {

std::vector<int> sample_without_replacement(int n, int k, Rng& rng) {
  if (k < 0 || k > n) throw std::invalid_argument("cannot draw " + std::to_string(k) + " of " + std::to_string(n));
  std::vector<int> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  // partial Fisher-Yates
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

}  // namespace fsad
