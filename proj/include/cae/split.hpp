#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cae {

// Random split that keeps every group on one side. Groups are visited in a
// seeded shuffle and moved to the test side while that brings the test count
// closer to round(test_fraction * n). Returns one flag per row, true = test.
// A single group holding more than 80% of the rows makes the split impossible.
std::vector<bool> group_split(const std::vector<std::string>& groups, double test_fraction,
                              std::uint64_t seed);

}  // namespace cae
