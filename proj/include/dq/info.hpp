#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"

namespace dq {

/// Code-frequency counts for one codebook.
struct UsageHistogram {
    std::vector<std::uint64_t> counts;

    UsageHistogram() = default;
    explicit UsageHistogram(std::size_t num_codes) : counts(num_codes, 0) {}

    std::uint64_t total() const;
    void add(std::int32_t code);
    void add_all(std::span<const std::int32_t> codes);
    /// Counts are additive; merging shards is exact.
    void merge(const UsageHistogram& other);
};

/// Joint code-frequency counts for a pair of aligned code streams.
struct JointHistogram {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint64_t> counts;  // row-major rows x cols

    JointHistogram() = default;
    JointHistogram(std::size_t r, std::size_t c) : rows(r), cols(c), counts(r * c, 0) {}

    std::uint64_t total() const;
    void add(std::int32_t i, std::int32_t j);
    std::uint64_t at(std::size_t i, std::size_t j) const { return counts[i * cols + j]; }
    UsageHistogram row_marginal() const;
    UsageHistogram col_marginal() const;
};

/// Plug-in entropy, -sum p ln p with 0 ln 0 := 0, in nats.
/// Throws std::invalid_argument on an empty histogram.
double entropy_nats(const UsageHistogram& h);

/// Plug-in mutual information in nats. Terms are accumulated in sorted order,
/// so transposing the joint gives a bit-identical result. Exactly 0 when the
/// joint factors as an outer product of its marginals.
double mutual_information_nats(const JointHistogram& j);

/// Upper-triangular M x M matrix, diagonal included.
struct TriangularMatrix {
    std::size_t size = 0;
    std::vector<double> upper;  // packed rows i <= j

    TriangularMatrix() = default;
    explicit TriangularMatrix(std::size_t m) : size(m), upper(m * (m + 1) / 2, 0.0) {}

    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;
};

struct InfoReport {
    std::vector<double> per_book_entropy;  // nats, length M
    TriangularMatrix mi_matrix;            // diagonal = entropies
    NdTensor position_entropy_map;         // spatial grid of mean entropies
    double mean_entropy = 0.0;             // mean over per_book_entropy
    double mean_offdiag_mi = 0.0;          // mean over i < j (0 when M == 1)
    std::string sample_source;             // which stream fed the estimators
};

/// Pairwise MI over M aligned code streams; diagonal holds entropies.
/// Streams must share a length >= 1; codes must lie in [0, num_codes).
TriangularMatrix pairwise_mi_matrix(const std::vector<std::vector<std::int32_t>>& streams,
                                    std::size_t num_codes);

/// Mean (over books) plug-in entropy of each spatial position's code
/// distribution across a stream of assignment grids. Each grid is a
/// CodeTensor whose axis 0 indexes the book and whose remaining axes are the
/// spatial grid. Returns the spatial grid of mean entropies.
NdTensor position_entropy_map(const std::vector<CodeTensor>& grids, std::size_t num_codes);

struct PosthocOptions {
    double gamma = 0.99;
    double epsilon = 1e-5;
    std::size_t dead_check_interval = 100;
    double dead_threshold_fraction = 0.01;  // of the uniform stationary mass
    std::uint64_t seed = 0;
    bool shared_codebook = false;
};

struct PosthocResult {
    double mean_l2 = 0.0;       // per-element mean squared reconstruction error
    double mean_entropy = 0.0;  // mean over books of usage entropy, nats
    std::vector<double> per_book_entropy;
    DepthwiseQuantizer quantizer;
};

/// Fits a DepthwiseQuantizer to a tensor stream by EMA alone (no network):
/// the post-hoc density-estimation workflow. Codebooks are seeded from the
/// first tensor; each epoch sweeps the stream once. The returned metrics are
/// measured in a final pass with the codebooks frozen.
PosthocResult posthoc_density_estimate(const std::vector<NdTensor>& tensors, std::size_t axis,
                                       std::size_t num_slices, std::size_t num_codes,
                                       std::size_t epochs, const PosthocOptions& opt = {});

}  // namespace dq
