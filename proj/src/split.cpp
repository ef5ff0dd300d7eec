#include "cae/split.hpp"

#include <cmath>
#include <map>

#include "cae/error.hpp"
#include "cae/random.hpp"

namespace cae {

std::vector<bool> group_split(const std::vector<std::string>& groups, double test_fraction,
                              std::uint64_t seed) {
  const std::size_t n = groups.size();
  if (n < 2) fail(ErrorKind::invalid_argument, "split needs at least 2 rows, got " + std::to_string(n));
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    fail(ErrorKind::invalid_argument, "test fraction must be in (0, 1)");

  std::vector<std::string> order;
  std::map<std::string, std::size_t> sizes;
  for (const auto& g : groups)
    if (sizes[g]++ == 0) order.push_back(g);
  for (const auto& [g, count] : sizes)
    if (5 * count > 4 * n)
      fail(ErrorKind::invalid_argument, "group '" + g + "' holds " + std::to_string(count) +
                                            " of " + std::to_string(n) +
                                            " rows; no split keeps it on one side");

  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const auto target = static_cast<std::size_t>(std::llround(test_fraction * double(n)));
  std::map<std::string, bool> in_test;
  std::size_t taken = 0;
  for (const auto& g : order) {
    if (taken >= target) break;
    const std::size_t with = taken + sizes[g];
    const auto gap = [&](std::size_t c) { return c > target ? c - target : target - c; };
    if (gap(with) < gap(taken) || taken == 0) {
      in_test[g] = true;
      taken = with;
    }
  }
  if (taken == n) fail(ErrorKind::invalid_argument, "split left the training side empty");

  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = in_test.count(groups[i]) > 0;
  return out;
}

}  // namespace cae
