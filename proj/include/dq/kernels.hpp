#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace dq::kernels {

/// Squared L2 distance between two D-vectors, accumulated in double.
double squared_l2(const double* a, const double* b, std::size_t dim);

/// Nearest-code assignment for `positions` rows of dimension `dim` against
/// `codes` (a num_codes x dim row-major matrix). Ties break to the lowest
/// code index. Serial reference implementation.
void assign_nearest_serial(const double* vectors, std::size_t positions, std::size_t dim,
                           const double* codes, std::size_t num_codes,
                           std::int32_t* out_index, double* out_distance);

/// OpenMP-parallel variant; rows are independent, so the result is
/// bit-identical to assign_nearest_serial for any thread count.
void assign_nearest(const double* vectors, std::size_t positions, std::size_t dim,
                    const double* codes, std::size_t num_codes,
                    std::int32_t* out_index, double* out_distance);

/// Code-frequency counting, serial reference.
std::vector<std::uint64_t> count_codes_serial(const std::int32_t* codes, std::size_t n,
                                              std::size_t num_codes);

/// Sharded counting: per-thread local histograms merged at the end.
/// Counts are additive, so the merge is exact.
std::vector<std::uint64_t> count_codes(const std::int32_t* codes, std::size_t n,
                                       std::size_t num_codes);

}  // namespace dq::kernels
