#include "dq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "dq/error.hpp"
#include "dq/kernels.hpp"

namespace dq {

Codebook::Codebook(std::size_t num_codes, std::size_t dim, double gamma, double epsilon)
    : num_codes_(num_codes),
      dim_(dim),
      codes_(num_codes * dim, 0.0),
      ema_counts_(num_codes, 0.0),
      ema_sums_(num_codes * dim, 0.0),
      ever_assigned_(num_codes, 0),
      gamma_(gamma),
      epsilon_(epsilon) {
    if (num_codes == 0 || dim == 0)
        throw std::invalid_argument("Codebook: K and D must be positive");
}

Codebook Codebook::init_from_samples(const NdTensor& samples, std::size_t num_codes,
                                     std::uint64_t seed, double gamma, double epsilon) {
    if (samples.rank() != 2) throw std::invalid_argument("init_from_samples: [P x D] expected");
    const std::size_t rows = samples.extent(0);
    const std::size_t dim = samples.extent(1);
    Codebook book(num_codes, dim, gamma, epsilon);

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(rows);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < num_codes; ++k) {
        const std::size_t r = order[k % rows];
        std::memcpy(book.code(k), samples.data() + r * dim, dim * sizeof(double));
    }
    return book;
}

std::pair<std::int32_t, double> Codebook::nearest_code(std::span<const double> v) const {
    if (v.size() != dim_) throw std::invalid_argument("nearest_code: dimension mismatch");
    std::int32_t idx = 0;
    double dist = 0.0;
    kernels::assign_nearest_serial(v.data(), 1, dim_, codes_.data(), num_codes_, &idx, &dist);
    return {idx, dist};
}

void Codebook::ema_update(const NdTensor& vectors, std::span<const std::int32_t> assignments) {
    const bool empty_batch = vectors.rank() == 0 && assignments.empty();
    if (!empty_batch) {
        if (vectors.rank() != 2 || vectors.extent(1) != dim_)
            throw std::invalid_argument("ema_update: [P x D] vectors expected");
        if (vectors.extent(0) != assignments.size())
            throw std::invalid_argument("ema_update: vector/assignment count mismatch");
    }

    std::vector<double> batch_count(num_codes_, 0.0);
    std::vector<double> batch_sum(num_codes_ * dim_, 0.0);
    for (std::size_t p = 0; p < assignments.size(); ++p) {
        const std::int32_t c = assignments[p];
        if (c < 0 || static_cast<std::size_t>(c) >= num_codes_)
            throw std::out_of_range("ema_update: code index out of range");
        batch_count[static_cast<std::size_t>(c)] += 1.0;
        const double* row = vectors.data() + p * dim_;
        double* acc = batch_sum.data() + static_cast<std::size_t>(c) * dim_;
        for (std::size_t i = 0; i < dim_; ++i) acc[i] += row[i];
    }

    for (std::size_t k = 0; k < num_codes_; ++k) {
        ema_counts_[k] = gamma_ * ema_counts_[k] + (1.0 - gamma_) * batch_count[k];
        double* m = ema_sums_.data() + k * dim_;
        const double* s = batch_sum.data() + k * dim_;
        for (std::size_t i = 0; i < dim_; ++i) m[i] = gamma_ * m[i] + (1.0 - gamma_) * s[i];
    }

    const double total = std::accumulate(ema_counts_.begin(), ema_counts_.end(), 0.0);
    for (std::size_t k = 0; k < num_codes_; ++k) {
        if (batch_count[k] == 0.0) continue;  // untouched: keep the current vector
        ever_assigned_[k] = 1;
        const double n_hat =
            (ema_counts_[k] + epsilon_) / (total + static_cast<double>(num_codes_) * epsilon_) *
            total;
        const double* m = ema_sums_.data() + k * dim_;
        double* c = code(k);
        for (std::size_t i = 0; i < dim_; ++i) c[i] = m[i] / n_hat;
    }
}

void Codebook::derive_assignment_flags_from_counts() {
    for (std::size_t k = 0; k < num_codes_; ++k)
        ever_assigned_[k] = ema_counts_[k] > 0.0 ? 1 : 0;
}

std::size_t Codebook::reinit_dead_codes(const NdTensor& batch_vectors, double threshold,
                                        std::uint64_t seed) {
    if (batch_vectors.rank() != 2 || batch_vectors.extent(1) != dim_)
        throw std::invalid_argument("reinit_dead_codes: [P x D] vectors expected");
    const std::size_t rows = batch_vectors.extent(0);
    if (rows == 0) throw std::invalid_argument("reinit_dead_codes: empty batch");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, rows - 1);
    std::size_t reinitialized = 0;
    for (std::size_t k = 0; k < num_codes_; ++k) {
        if (ema_counts_[k] >= threshold) continue;
        const std::size_t r = pick(rng);
        const double* row = batch_vectors.data() + r * dim_;
        std::memcpy(code(k), row, dim_ * sizeof(double));
        std::memcpy(ema_sums_.data() + k * dim_, row, dim_ * sizeof(double));
        ema_counts_[k] = 1.0;
        ever_assigned_[k] = 1;
        ++reinitialized;
    }
    return reinitialized;
}

DepthwiseQuantizer::DepthwiseQuantizer(std::size_t num_slices, std::size_t axis,
                                       std::vector<Codebook> books)
    : num_slices_(num_slices), axis_(axis), books_(std::move(books)) {
    if (books_.empty()) throw std::invalid_argument("DepthwiseQuantizer: no codebooks");
    if (books_.size() != 1 && books_.size() != num_slices_)
        throw std::invalid_argument("DepthwiseQuantizer: need 1 or M codebooks");
    for (const Codebook& b : books_)
        if (b.dim() != books_.front().dim())
            throw std::invalid_argument("DepthwiseQuantizer: codebook dims differ");
}

DepthwiseQuantizer DepthwiseQuantizer::per_slice(std::size_t num_slices, std::size_t axis,
                                                 std::size_t num_codes, std::size_t dim,
                                                 double gamma, double epsilon) {
    std::vector<Codebook> books;
    books.reserve(num_slices);
    for (std::size_t i = 0; i < num_slices; ++i)
        books.emplace_back(num_codes, dim, gamma, epsilon);
    return DepthwiseQuantizer(num_slices, axis, std::move(books));
}

DepthwiseQuantizer DepthwiseQuantizer::shared(std::size_t num_slices, std::size_t axis,
                                              std::size_t num_codes, std::size_t dim,
                                              double gamma, double epsilon) {
    std::vector<Codebook> books;
    books.emplace_back(num_codes, dim, gamma, epsilon);
    return DepthwiseQuantizer(num_slices, axis, std::move(books));
}

QuantizationResult vq_forward(const Codebook& book, const NdTensor& vectors) {
    if (vectors.rank() == 0) return QuantizationResult{};  // empty input: no-op
    if (vectors.rank() != 2 || vectors.extent(1) != book.dim())
        throw std::invalid_argument("vq_forward: [P x D] vectors expected");
    const std::size_t positions = vectors.extent(0);
    const std::size_t dim = book.dim();

    QuantizationResult r;
    r.codes.shape = {positions};
    r.codes.data.resize(positions);
    r.distances = NdTensor::zeros({positions});

    kernels::assign_nearest(vectors.data(), positions, dim, book.codes().data(),
                            book.num_codes(), r.codes.data.data(), r.distances.data());

    NdTensor quantized = NdTensor::zeros({positions, dim});
    for (std::size_t p = 0; p < positions; ++p)
        std::memcpy(quantized.data() + p * dim, book.code(static_cast<std::size_t>(r.codes.data[p])),
                    dim * sizeof(double));
    r.quantized = std::move(quantized);

    double acc = 0.0;
    for (std::size_t p = 0; p < positions; ++p) acc += r.distances[p];
    r.mean_distance = acc / static_cast<double>(positions);
    return r;
}

QuantizationResult dq_forward(const DepthwiseQuantizer& q, const NdTensor& t, DqDetail* detail) {
    auto [slices, decomp] = decompose(t, q.axis(), q.num_slices());

    std::vector<NdTensor> quantized_slices;
    quantized_slices.reserve(slices.size());
    std::vector<std::size_t> code_shape = t.shape();
    code_shape[q.axis()] = q.num_slices();

    CodeTensor codes;
    codes.shape = code_shape;
    NdTensor distances = NdTensor::zeros(code_shape);
    std::size_t total_codes = 1;
    for (std::size_t e : code_shape) total_codes *= e;
    codes.data.assign(total_codes, 0);

    if (detail) {
        detail->slice_vectors.clear();
        detail->slice_codes.clear();
        detail->decomposition = decomp;
        detail->slice_shape = slices.front().shape();
    }

    // Positions of slice m map to code-tensor entries with axis index m.
    std::size_t inner = 1;
    for (std::size_t a = q.axis() + 1; a < t.rank(); ++a) inner *= t.extent(a);
    const std::size_t outer = total_codes / (q.num_slices() * inner);

    double acc = 0.0;
    std::size_t total_positions = 0;
    for (std::size_t m = 0; m < q.num_slices(); ++m) {
        const Codebook& book = q.book_for_slice(m);
        NdTensor vectors = positions_as_vectors(slices[m], q.axis());
        QuantizationResult slice_r = vq_forward(book, vectors);
        quantized_slices.push_back(
            vectors_to_positions(slice_r.quantized, slices[m].shape(), q.axis()));

        const std::size_t positions = vectors.extent(0);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t p = o * inner + i;
                const std::size_t dst = (o * q.num_slices() + m) * inner + i;
                codes.data[dst] = slice_r.codes.data[p];
                distances[dst] = slice_r.distances[p];
            }
        acc += slice_r.mean_distance * static_cast<double>(positions);
        total_positions += positions;

        if (detail) {
            detail->slice_vectors.push_back(std::move(vectors));
            detail->slice_codes.push_back(std::move(slice_r.codes.data));
        }
    }

    QuantizationResult r;
    r.codes = std::move(codes);
    r.distances = std::move(distances);
    r.quantized = reassemble(quantized_slices, decomp);
    r.mean_distance = acc / static_cast<double>(total_positions);
    return r;
}

namespace {

// Concatenate all slice batches (used when one book serves every slice).
std::pair<NdTensor, std::vector<std::int32_t>> merge_detail(const DqDetail& detail,
                                                            std::size_t dim) {
    std::size_t rows = 0;
    for (const NdTensor& v : detail.slice_vectors) rows += v.extent(0);
    NdTensor merged = NdTensor::zeros({rows, dim});
    std::vector<std::int32_t> codes;
    codes.reserve(rows);
    std::size_t at = 0;
    for (std::size_t m = 0; m < detail.slice_vectors.size(); ++m) {
        const NdTensor& v = detail.slice_vectors[m];
        std::memcpy(merged.data() + at * dim, v.data(), v.size() * sizeof(double));
        codes.insert(codes.end(), detail.slice_codes[m].begin(), detail.slice_codes[m].end());
        at += v.extent(0);
    }
    return {std::move(merged), std::move(codes)};
}

}  // namespace

NdTensor reassemble_from_detail(const DqDetail& detail) {
    if (detail.slice_vectors.empty() || detail.slice_shape.empty())
        throw std::invalid_argument("reassemble_from_detail: empty detail");
    std::vector<NdTensor> slices;
    slices.reserve(detail.slice_vectors.size());
    for (const NdTensor& mat : detail.slice_vectors)
        slices.push_back(vectors_to_positions(mat, detail.slice_shape, detail.decomposition.axis));
    return reassemble(slices, detail.decomposition);
}

void ema_update_from_detail(DepthwiseQuantizer& q, const DqDetail& detail) {
    if (detail.slice_vectors.size() != q.num_slices())
        throw std::invalid_argument("ema_update_from_detail: slice count mismatch");
    if (q.num_books() == 1 && q.num_slices() > 1) {
        auto [merged, codes] = merge_detail(detail, q.code_dim());
        q.book(0).ema_update(merged, codes);
        return;
    }
    for (std::size_t m = 0; m < q.num_slices(); ++m)
        q.book(m).ema_update(detail.slice_vectors[m], detail.slice_codes[m]);
}

std::size_t reinit_dead_codes_from_detail(DepthwiseQuantizer& q, const DqDetail& detail,
                                          double fraction, std::uint64_t seed) {
    std::size_t total = 0;
    if (q.num_books() == 1 && q.num_slices() > 1) {
        auto [merged, codes] = merge_detail(detail, q.code_dim());
        const double uniform_mass = static_cast<double>(merged.extent(0)) /
                                    static_cast<double>(q.book(0).num_codes());
        total += q.book(0).reinit_dead_codes(merged, fraction * uniform_mass, seed);
        return total;
    }
    for (std::size_t m = 0; m < q.num_slices(); ++m) {
        const double uniform_mass = static_cast<double>(detail.slice_vectors[m].extent(0)) /
                                    static_cast<double>(q.book(m).num_codes());
        total += q.book(m).reinit_dead_codes(detail.slice_vectors[m], fraction * uniform_mass,
                                             seed + m * 131);
    }
    return total;
}

QuantizationResult dq_apply_codes(const DepthwiseQuantizer& q, const NdTensor& t,
                                  const CodeTensor& codes, DqDetail* detail) {
    auto [slices, decomp] = decompose(t, q.axis(), q.num_slices());

    std::vector<std::size_t> code_shape = t.shape();
    code_shape[q.axis()] = q.num_slices();
    if (codes.shape != code_shape)
        throw std::invalid_argument("dq_apply_codes: code tensor shape mismatch");

    std::size_t inner = 1;
    for (std::size_t a = q.axis() + 1; a < t.rank(); ++a) inner *= t.extent(a);
    std::size_t total_codes = codes.data.size();
    const std::size_t outer = total_codes / (q.num_slices() * inner);

    if (detail) {
        detail->slice_vectors.clear();
        detail->slice_codes.clear();
        detail->decomposition = decomp;
        detail->slice_shape = slices.front().shape();
    }

    NdTensor distances = NdTensor::zeros(code_shape);
    std::vector<NdTensor> quantized_slices;
    quantized_slices.reserve(q.num_slices());
    double acc = 0.0;
    std::size_t total_positions = 0;
    const std::size_t dim = q.code_dim();
    for (std::size_t m = 0; m < q.num_slices(); ++m) {
        const Codebook& book = q.book_for_slice(m);
        NdTensor vectors = positions_as_vectors(slices[m], q.axis());
        const std::size_t positions = vectors.extent(0);
        NdTensor qmat = NdTensor::zeros({positions, dim});
        std::vector<std::int32_t> slice_codes(positions);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t p = o * inner + i;
                const std::int32_t c = codes.data[(o * q.num_slices() + m) * inner + i];
                if (c < 0 || static_cast<std::size_t>(c) >= book.num_codes())
                    throw std::out_of_range("dq_apply_codes: code index out of range");
                slice_codes[p] = c;
                std::memcpy(qmat.data() + p * dim, book.code(static_cast<std::size_t>(c)),
                            dim * sizeof(double));
                const double d2 = kernels::squared_l2(vectors.data() + p * dim,
                                                      book.code(static_cast<std::size_t>(c)), dim);
                distances[(o * q.num_slices() + m) * inner + i] = d2;
                acc += d2;
            }
        total_positions += positions;
        quantized_slices.push_back(vectors_to_positions(qmat, slices[m].shape(), q.axis()));
        if (detail) {
            detail->slice_vectors.push_back(std::move(vectors));
            detail->slice_codes.push_back(std::move(slice_codes));
        }
    }

    QuantizationResult r;
    r.codes = codes;
    r.distances = std::move(distances);
    r.quantized = reassemble(quantized_slices, decomp);
    r.mean_distance = acc / static_cast<double>(total_positions);
    return r;
}

LossTerms quantization_loss(const NdTensor& z, const NdTensor& z_hat, double beta,
                            Reduction reduction, const NdTensor* mask) {
    if (!z.same_shape(z_hat)) throw std::invalid_argument("quantization_loss: shape mismatch");
    if (beta < 0.0) throw std::invalid_argument("quantization_loss: beta must be >= 0");
    if (mask && !mask->same_shape(z))
        throw std::invalid_argument("quantization_loss: mask shape mismatch");

    double acc = 0.0;
    double count = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double w = mask ? (*mask)[i] : 1.0;
        if (w == 0.0) continue;
        const double diff = z[i] - z_hat[i];
        acc += diff * diff;
        count += 1.0;
    }
    if (reduction == Reduction::MeanPerElement && count > 0.0) acc /= count;

    LossTerms terms;
    terms.codebook = acc;
    terms.commitment = beta * acc;
    return terms;
}

CapacityReport capacity(std::size_t num_codes, std::size_t num_slices) {
    if (num_codes == 0 || num_slices == 0)
        throw std::invalid_argument("capacity: K and M must be >= 1");
    CapacityReport r;
    r.cost = num_codes * num_slices;
    r.capacity_nats = static_cast<double>(num_slices) * std::log(static_cast<double>(num_codes));
    r.sample_space_log = r.capacity_nats;
    r.kl_constant_nats = r.capacity_nats;
    return r;
}

// ---------------------------------------------------------------------------
// DQC1 serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kCodebookMagic[8] = {'D', 'Q', 'C', 'O', 'D', 'E', '0', '1'};

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32_le(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

void put_values(std::vector<std::uint8_t>& out, const double* v, std::size_t n, Dtype dtype) {
    if (dtype == Dtype::F64) {
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, &v[i], 8);
            for (int b = 0; b < 8; ++b)
                out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xff));
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const float f = static_cast<float>(v[i]);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32_le(out, bits);
        }
    }
}

void read_values(const std::uint8_t* p, double* v, std::size_t n, Dtype dtype) {
    if (dtype == Dtype::F64) {
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(p[i * 8 + b]) << (8 * b);
            std::memcpy(&v[i], &bits, 8);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = read_u32_le(p + i * 4);
            float f;
            std::memcpy(&f, &bits, 4);
            v[i] = static_cast<double>(f);
        }
    }
}

}  // namespace

void save_dqc1(const DepthwiseQuantizer& q, const std::string& path, Dtype dtype) {
    const std::size_t books = q.num_books();
    const std::size_t k = q.book(0).num_codes();
    const std::size_t d = q.book(0).dim();
    for (std::size_t i = 0; i < books; ++i)
        if (q.book(i).num_codes() != k)
            throw std::invalid_argument("save_dqc1: books must share K");

    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), kCodebookMagic, kCodebookMagic + 8);
    put_u32_le(buf, static_cast<std::uint32_t>(books));
    put_u32_le(buf, static_cast<std::uint32_t>(k));
    put_u32_le(buf, static_cast<std::uint32_t>(d));
    buf.push_back(static_cast<std::uint8_t>(dtype));
    for (std::size_t i = 0; i < books; ++i) put_values(buf, q.book(i).codes().data(), k * d, dtype);
    for (std::size_t i = 0; i < books; ++i)
        put_values(buf, q.book(i).ema_counts().data(), k, dtype);
    for (std::size_t i = 0; i < books; ++i)
        put_values(buf, q.book(i).ema_sums().data(), k * d, dtype);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_dqc1: cannot open " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("save_dqc1: write failed for " + path);
}

DepthwiseQuantizer load_dqc1(const std::string& path, std::size_t num_slices, std::size_t axis,
                             double gamma, double epsilon) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_dqc1: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    auto fail_at = [&](std::size_t offset, const std::string& what) -> void {
        throw IoError(path + ": " + what + " at byte offset " + std::to_string(offset));
    };
    if (buf.size() < 21) fail_at(buf.size(), "truncated header");
    if (std::memcmp(buf.data(), kCodebookMagic, 8) != 0)
        fail_at(0, "bad magic (expected DQCODE01)");
    const std::size_t books = read_u32_le(buf.data() + 8);
    const std::size_t k = read_u32_le(buf.data() + 12);
    const std::size_t d = read_u32_le(buf.data() + 16);
    const std::uint8_t dtag = buf[20];
    if (dtag > 1) fail_at(20, "unknown dtype tag");
    if (books == 0 || k == 0 || d == 0) fail_at(8, "zero dimension in header");
    const Dtype dtype = static_cast<Dtype>(dtag);
    const std::size_t elem = dtype == Dtype::F64 ? 8 : 4;
    const std::size_t need = 21 + books * (k * d * 2 + k) * elem;
    if (buf.size() < need) fail_at(buf.size(), "truncated payload");

    std::vector<Codebook> loaded;
    loaded.reserve(books);
    std::size_t off = 21;
    for (std::size_t i = 0; i < books; ++i) {
        Codebook b(k, d, gamma, epsilon);
        read_values(buf.data() + off, b.codes().data(), k * d, dtype);
        loaded.push_back(std::move(b));
        off += k * d * elem;
    }
    for (std::size_t i = 0; i < books; ++i) {
        read_values(buf.data() + off, loaded[i].ema_counts().data(), k, dtype);
        off += k * elem;
    }
    for (std::size_t i = 0; i < books; ++i) {
        read_values(buf.data() + off, loaded[i].ema_sums().data(), k * d, dtype);
        off += k * d * elem;
    }
    for (Codebook& b : loaded) b.derive_assignment_flags_from_counts();

    if (num_slices == 0) num_slices = books;
    DepthwiseQuantizer q(num_slices, axis, std::move(loaded));
    return q;
}

}  // namespace dq
