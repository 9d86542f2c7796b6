#pragma once

#include <vector>

namespace mulmon {

// Maximum-total-weight injective assignment of rows to columns (rows and
// columns need not match in count). Returns, per row, the assigned column or
// -1 when there are more rows than columns. O(n^3) potentials method; exact.
std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& weights);

}  // namespace mulmon
