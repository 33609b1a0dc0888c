#include "dq/kernels.hpp"

#include <limits>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dq::kernels {

double squared_l2(const double* a, const double* b, std::size_t dim) {
    double acc = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

namespace {

inline void assign_row(const double* v, std::size_t dim, const double* codes,
                       std::size_t num_codes, std::int32_t& out_index, double& out_distance) {
    std::int32_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < num_codes; ++k) {
        const double d = squared_l2(v, codes + k * dim, dim);
        if (d < best_dist) {
            best_dist = d;
            best = static_cast<std::int32_t>(k);
        }
    }
    out_index = best;
    out_distance = best_dist;
}

}  // namespace

void assign_nearest_serial(const double* vectors, std::size_t positions, std::size_t dim,
                           const double* codes, std::size_t num_codes,
                           std::int32_t* out_index, double* out_distance) {
    if (num_codes == 0) throw std::invalid_argument("assign_nearest: empty codebook");
    for (std::size_t p = 0; p < positions; ++p)
        assign_row(vectors + p * dim, dim, codes, num_codes, out_index[p], out_distance[p]);
}

void assign_nearest(const double* vectors, std::size_t positions, std::size_t dim,
                    const double* codes, std::size_t num_codes,
                    std::int32_t* out_index, double* out_distance) {
    if (num_codes == 0) throw std::invalid_argument("assign_nearest: empty codebook");
#pragma omp parallel for schedule(static)
    for (std::size_t p = 0; p < positions; ++p)
        assign_row(vectors + p * dim, dim, codes, num_codes, out_index[p], out_distance[p]);
}

std::vector<std::uint64_t> count_codes_serial(const std::int32_t* codes, std::size_t n,
                                              std::size_t num_codes) {
    std::vector<std::uint64_t> counts(num_codes, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int32_t c = codes[i];
        if (c < 0 || static_cast<std::size_t>(c) >= num_codes)
            throw std::out_of_range("count_codes: code index out of range");
        ++counts[static_cast<std::size_t>(c)];
    }
    return counts;
}

std::vector<std::uint64_t> count_codes(const std::int32_t* codes, std::size_t n,
                                       std::size_t num_codes) {
#ifdef _OPENMP
    const int max_threads = omp_get_max_threads();
    if (max_threads > 1 && n > 4096) {
        std::vector<std::vector<std::uint64_t>> shards(
            static_cast<std::size_t>(max_threads), std::vector<std::uint64_t>(num_codes, 0));
        bool bad = false;
#pragma omp parallel
        {
            auto& local = shards[static_cast<std::size_t>(omp_get_thread_num())];
#pragma omp for schedule(static)
            for (std::size_t i = 0; i < n; ++i) {
                const std::int32_t c = codes[i];
                if (c < 0 || static_cast<std::size_t>(c) >= num_codes) {
#pragma omp atomic write
                    bad = true;
                } else {
                    ++local[static_cast<std::size_t>(c)];
                }
            }
        }
        if (bad) throw std::out_of_range("count_codes: code index out of range");
        std::vector<std::uint64_t> counts(num_codes, 0);
        for (const auto& shard : shards)
            for (std::size_t k = 0; k < num_codes; ++k) counts[k] += shard[k];
        return counts;
    }
#endif
    return count_codes_serial(codes, n, num_codes);
}

}  // namespace dq::kernels
