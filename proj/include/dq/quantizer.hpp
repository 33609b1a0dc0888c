#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dq/tensor.hpp"

namespace dq {

/// Integer code assignments with a tensor shape.
struct CodeTensor {
    std::vector<std::size_t> shape;
    std::vector<std::int32_t> data;

    std::size_t size() const { return data.size(); }
};

/// One codebook: `num_codes` learnable vectors of dimension `dim`, plus the
/// EMA accumulator state that drives soft-EM updates.
///
/// Update rule (ema_update): for every code index i,
///   n_i <- gamma * n_i + (1 - gamma) * count_i
///   m_i <- gamma * m_i + (1 - gamma) * sum_i
/// and for every code that received at least one assignment in the batch,
///   codes_i <- m_i / n_hat_i,  n_hat_i = (n_i + eps) / (sum_j n_j + K*eps) * sum_j n_j.
/// Codes untouched by the batch keep their previous value, so codes that have
/// never been assigned stay at initialization and an empty batch is a pure
/// decay step on the accumulators.
class Codebook {
public:
    Codebook() = default;
    Codebook(std::size_t num_codes, std::size_t dim, double gamma = 0.99, double epsilon = 1e-5);

    /// Seeds codes from rows of `samples` ([P x dim]); rows are drawn without
    /// replacement when P >= K, cyclically otherwise.
    static Codebook init_from_samples(const NdTensor& samples, std::size_t num_codes,
                                      std::uint64_t seed, double gamma = 0.99,
                                      double epsilon = 1e-5);

    std::size_t num_codes() const { return num_codes_; }
    std::size_t dim() const { return dim_; }
    double gamma() const { return gamma_; }
    double epsilon() const { return epsilon_; }

    const std::vector<double>& codes() const { return codes_; }
    std::vector<double>& codes() { return codes_; }
    const double* code(std::size_t k) const { return codes_.data() + k * dim_; }
    double* code(std::size_t k) { return codes_.data() + k * dim_; }

    const std::vector<double>& ema_counts() const { return ema_counts_; }
    std::vector<double>& ema_counts() { return ema_counts_; }
    const std::vector<double>& ema_sums() const { return ema_sums_; }
    std::vector<double>& ema_sums() { return ema_sums_; }
    bool ever_assigned(std::size_t k) const { return ever_assigned_[k] != 0; }
    /// Rebuilds the lifetime flags from persisted counts (n_i > 0 marks use).
    void derive_assignment_flags_from_counts();

    /// Index and squared L2 distance of the closest code; ties break low.
    std::pair<std::int32_t, double> nearest_code(std::span<const double> v) const;

    /// One EMA step over a batch of (vector, code) assignments. `vectors` is
    /// [P x dim] and `codes[p]` is the assignment of row p. Empty batches are
    /// allowed (pure decay).
    void ema_update(const NdTensor& vectors, std::span<const std::int32_t> assignments);

    /// Replaces every code with n_i < threshold by a uniformly sampled row of
    /// `batch_vectors` ([P x dim], non-empty); the code's accumulators reset
    /// to n=1, m=sample. Returns the number of codes reinitialized.
    std::size_t reinit_dead_codes(const NdTensor& batch_vectors, double threshold,
                                  std::uint64_t seed);

private:
    std::size_t num_codes_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> codes_;
    std::vector<double> ema_counts_;
    std::vector<double> ema_sums_;
    std::vector<std::uint8_t> ever_assigned_;
    double gamma_ = 0.99;
    double epsilon_ = 1e-5;
};

/// M codebooks bound to one axis decomposition. With shared_codebook() the
/// quantizer keeps a single book applied to every slice (the plain-VQ
/// baseline); otherwise slice i is quantized by book i.
class DepthwiseQuantizer {
public:
    DepthwiseQuantizer() = default;
    DepthwiseQuantizer(std::size_t num_slices, std::size_t axis, std::vector<Codebook> books);

    /// num_slices books, one per slice.
    static DepthwiseQuantizer per_slice(std::size_t num_slices, std::size_t axis,
                                        std::size_t num_codes, std::size_t dim,
                                        double gamma = 0.99, double epsilon = 1e-5);
    /// One book shared across num_slices slices.
    static DepthwiseQuantizer shared(std::size_t num_slices, std::size_t axis,
                                     std::size_t num_codes, std::size_t dim, double gamma = 0.99,
                                     double epsilon = 1e-5);

    std::size_t num_slices() const { return num_slices_; }
    std::size_t axis() const { return axis_; }
    bool shared_codebook() const { return books_.size() == 1 && num_slices_ > 1; }
    std::size_t num_books() const { return books_.size(); }
    Codebook& book(std::size_t i) { return books_[i]; }
    const Codebook& book(std::size_t i) const { return books_[i]; }
    /// Book responsible for slice i.
    Codebook& book_for_slice(std::size_t i) { return books_[books_.size() == 1 ? 0 : i]; }
    const Codebook& book_for_slice(std::size_t i) const {
        return books_[books_.size() == 1 ? 0 : i];
    }
    std::size_t code_dim() const { return books_.front().dim(); }

private:
    std::size_t num_slices_ = 1;
    std::size_t axis_ = 0;
    std::vector<Codebook> books_;
};

/// Output of a quantization pass.
struct QuantizationResult {
    CodeTensor codes;       // assigned index per position per codebook
    NdTensor quantized;     // same shape as the input
    NdTensor distances;     // per-position squared L2, same shape as codes
    double mean_distance = 0.0;  // mean over all (position, book) pairs
};

/// Per-slice flattened views of a dq_forward pass, for EMA updates and
/// dead-code reinitialization.
struct DqDetail {
    std::vector<NdTensor> slice_vectors;               // M matrices [P x D]
    std::vector<std::vector<std::int32_t>> slice_codes;  // M vectors of length P
    AxisDecomposition decomposition;
    std::vector<std::size_t> slice_shape;  // tensor shape of one slice
};

/// Quantize each row of a [P x dim] matrix against one codebook.
QuantizationResult vq_forward(const Codebook& book, const NdTensor& vectors);

/// Depthwise quantization: decompose along q.axis(), quantize slice i with
/// its book, reassemble. With M=1 this is bit-identical to vq_forward on
/// positions_as_vectors(t, axis).
QuantizationResult dq_forward(const DepthwiseQuantizer& q, const NdTensor& t,
                              DqDetail* detail = nullptr);

/// Rebuilds the quantized tensor from a fixed assignment instead of a
/// nearest-code search (freezes assignments, e.g. for finite-difference
/// checks). `codes` must have t's shape with the decomposed axis replaced
/// by num_slices.
QuantizationResult dq_apply_codes(const DepthwiseQuantizer& q, const NdTensor& t,
                                  const CodeTensor& codes, DqDetail* detail = nullptr);

/// Rebuilds the (trimmed) input tensor from a forward pass's slice views.
NdTensor reassemble_from_detail(const DqDetail& detail);

/// One EMA step on every book of `q` from a forward pass's per-slice detail.
/// With a shared codebook all slices merge into one assignment batch.
void ema_update_from_detail(DepthwiseQuantizer& q, const DqDetail& detail);

/// Dead-code pass over every book: threshold is `fraction` of the uniform
/// stationary mass (positions per batch / K). Returns total reinitialized.
std::size_t reinit_dead_codes_from_detail(DepthwiseQuantizer& q, const DqDetail& detail,
                                          double fraction, std::uint64_t seed);

enum class Reduction {
    MeanPerElement,  // divide by the element count (default for training)
    Sum,             // raw squared Frobenius norm
};

struct LossTerms {
    double codebook = 0.0;    // ||sg(z) - z_hat||^2 under the chosen reduction
    double commitment = 0.0;  // beta * ||z - sg(z_hat)||^2
};

/// The two quantization loss terms. Shapes must match; `mask`, when given,
/// selects the elements that count (1 = real, 0 = pad) for both the sum and
/// the element count.
LossTerms quantization_loss(const NdTensor& z, const NdTensor& z_hat, double beta,
                            Reduction reduction = Reduction::MeanPerElement,
                            const NdTensor* mask = nullptr);

struct CapacityReport {
    std::size_t cost = 0;            // K * M code vectors
    double capacity_nats = 0.0;      // M * ln K
    double sample_space_log = 0.0;   // ln S = M * ln K
    double kl_constant_nats = 0.0;   // the constant KL term, same value
};

CapacityReport capacity(std::size_t num_codes, std::size_t num_slices);

/// DQC1 codebook file: magic "DQCODE01", u32 M (books), u32 K, u32 D,
/// u8 dtype, then M*K*D codes, M*K counts, M*K*D EMA sums, little-endian.
void save_dqc1(const DepthwiseQuantizer& q, const std::string& path, Dtype dtype = Dtype::F64);
DepthwiseQuantizer load_dqc1(const std::string& path, std::size_t num_slices = 0,
                             std::size_t axis = 0, double gamma = 0.99, double epsilon = 1e-5);

}  // namespace dq
