#include "dq/info.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dq/kernels.hpp"

namespace dq {

std::uint64_t UsageHistogram::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

void UsageHistogram::add(std::int32_t code) {
    if (code < 0 || static_cast<std::size_t>(code) >= counts.size())
        throw std::out_of_range("UsageHistogram::add: code out of range");
    ++counts[static_cast<std::size_t>(code)];
}

void UsageHistogram::add_all(std::span<const std::int32_t> codes) {
    for (std::int32_t c : codes) add(c);
}

void UsageHistogram::merge(const UsageHistogram& other) {
    if (other.counts.size() != counts.size())
        throw std::invalid_argument("UsageHistogram::merge: size mismatch");
    for (std::size_t k = 0; k < counts.size(); ++k) counts[k] += other.counts[k];
}

std::uint64_t JointHistogram::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

void JointHistogram::add(std::int32_t i, std::int32_t j) {
    if (i < 0 || static_cast<std::size_t>(i) >= rows || j < 0 ||
        static_cast<std::size_t>(j) >= cols)
        throw std::out_of_range("JointHistogram::add: code out of range");
    ++counts[static_cast<std::size_t>(i) * cols + static_cast<std::size_t>(j)];
}

UsageHistogram JointHistogram::row_marginal() const {
    UsageHistogram h(rows);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) h.counts[i] += at(i, j);
    return h;
}

UsageHistogram JointHistogram::col_marginal() const {
    UsageHistogram h(cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) h.counts[j] += at(i, j);
    return h;
}

namespace {

// Sorting the terms before summation makes the result independent of
// traversal order (identical term multisets sum bit-identically).
double sorted_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += t;
    return acc;
}

}  // namespace

double entropy_nats(const UsageHistogram& h) {
    const std::uint64_t total = h.total();
    if (total == 0) throw std::invalid_argument("entropy_nats: empty histogram");
    const double n = static_cast<double>(total);
    std::vector<double> terms;
    terms.reserve(h.counts.size());
    for (std::uint64_t c : h.counts) {
        if (c == 0) continue;  // 0 ln 0 := 0
        const double p = static_cast<double>(c) / n;
        terms.push_back(-p * std::log(p));
    }
    return sorted_sum(terms);
}

double mutual_information_nats(const JointHistogram& j) {
    const std::uint64_t total = j.total();
    if (total == 0) throw std::invalid_argument("mutual_information_nats: empty histogram");
    const UsageHistogram rm = j.row_marginal();
    const UsageHistogram cm = j.col_marginal();
    const double n = static_cast<double>(total);

    std::vector<double> terms;
    terms.reserve(j.counts.size());
    for (std::size_t r = 0; r < j.rows; ++r) {
        for (std::size_t c = 0; c < j.cols; ++c) {
            const std::uint64_t cnt = j.at(r, c);
            if (cnt == 0) continue;
            const double p = static_cast<double>(cnt) / n;
            // p / (p_r * p_c) == cnt * n / (row * col); the ratio is exactly
            // 1.0 for outer-product joints, so log evaluates to exactly 0.
            const double ratio = (static_cast<double>(cnt) * n) /
                                 (static_cast<double>(rm.counts[r]) *
                                  static_cast<double>(cm.counts[c]));
            terms.push_back(p * std::log(ratio));
        }
    }
    return sorted_sum(terms);
}

double& TriangularMatrix::at(std::size_t i, std::size_t j) {
    if (i > j || j >= size) throw std::out_of_range("TriangularMatrix::at: need i <= j < size");
    // packed offset of row i: i*size - i*(i-1)/2
    return upper[i * size - i * (i - 1) / 2 + (j - i)];
}

double TriangularMatrix::at(std::size_t i, std::size_t j) const {
    return const_cast<TriangularMatrix*>(this)->at(i, j);
}

TriangularMatrix pairwise_mi_matrix(const std::vector<std::vector<std::int32_t>>& streams,
                                    std::size_t num_codes) {
    if (streams.empty()) throw std::invalid_argument("pairwise_mi_matrix: no streams");
    const std::size_t len = streams.front().size();
    if (len == 0) throw std::invalid_argument("pairwise_mi_matrix: empty streams");
    for (const auto& s : streams)
        if (s.size() != len) throw std::invalid_argument("pairwise_mi_matrix: length mismatch");

    const std::size_t m = streams.size();
    TriangularMatrix mat(m);
    for (std::size_t i = 0; i < m; ++i) {
        UsageHistogram h(num_codes);
        h.add_all(streams[i]);
        mat.at(i, i) = entropy_nats(h);
        for (std::size_t j = i + 1; j < m; ++j) {
            JointHistogram joint(num_codes, num_codes);
            for (std::size_t t = 0; t < len; ++t) joint.add(streams[i][t], streams[j][t]);
            mat.at(i, j) = mutual_information_nats(joint);
        }
    }
    return mat;
}

NdTensor position_entropy_map(const std::vector<CodeTensor>& grids, std::size_t num_codes) {
    if (grids.empty()) throw std::invalid_argument("position_entropy_map: empty stream");
    const std::vector<std::size_t>& shape = grids.front().shape;
    if (shape.size() < 2)
        throw std::invalid_argument("position_entropy_map: grids need a book axis plus space");
    for (const CodeTensor& g : grids)
        if (g.shape != shape) throw std::invalid_argument("position_entropy_map: shape mismatch");

    const std::size_t books = shape[0];
    std::vector<std::size_t> spatial(shape.begin() + 1, shape.end());
    std::size_t positions = 1;
    for (std::size_t e : spatial) positions *= e;

    NdTensor map = NdTensor::zeros(spatial);
    for (std::size_t p = 0; p < positions; ++p) {
        double acc = 0.0;
        for (std::size_t b = 0; b < books; ++b) {
            UsageHistogram h(num_codes);
            for (const CodeTensor& g : grids) h.add(g.data[b * positions + p]);
            acc += entropy_nats(h);
        }
        map[p] = acc / static_cast<double>(books);
    }
    return map;
}

PosthocResult posthoc_density_estimate(const std::vector<NdTensor>& tensors, std::size_t axis,
                                       std::size_t num_slices, std::size_t num_codes,
                                       std::size_t epochs, const PosthocOptions& opt) {
    if (tensors.empty()) throw std::invalid_argument("posthoc_density_estimate: empty stream");
    const std::vector<std::size_t>& shape = tensors.front().shape();
    for (const NdTensor& t : tensors)
        if (t.shape() != shape)
            throw std::invalid_argument("posthoc_density_estimate: inconsistent shapes");

    // Seed the books from the first tensor's position vectors.
    auto [first_slices, decomp] = decompose(tensors.front(), axis, num_slices);
    std::vector<Codebook> books;
    if (opt.shared_codebook) {
        NdTensor seed_vectors = positions_as_vectors(first_slices[0], axis);
        books.push_back(Codebook::init_from_samples(seed_vectors, num_codes, opt.seed, opt.gamma,
                                                    opt.epsilon));
    } else {
        for (std::size_t m = 0; m < num_slices; ++m) {
            NdTensor seed_vectors = positions_as_vectors(first_slices[m], axis);
            books.push_back(Codebook::init_from_samples(seed_vectors, num_codes, opt.seed + m,
                                                        opt.gamma, opt.epsilon));
        }
    }
    DepthwiseQuantizer q(num_slices, axis, std::move(books));

    std::size_t step = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
        for (const NdTensor& t : tensors) {
            DqDetail detail;
            (void)dq_forward(q, t, &detail);
            ema_update_from_detail(q, detail);
            ++step;
            if (step % opt.dead_check_interval == 0)
                reinit_dead_codes_from_detail(q, detail, opt.dead_threshold_fraction,
                                              opt.seed + 0x9e3779b9ull + step);
        }
    }

    // Final measuring pass with frozen codebooks.
    PosthocResult result;
    std::vector<UsageHistogram> usage(num_slices, UsageHistogram(num_codes));
    double err_acc = 0.0;
    double n_elems = 0.0;
    for (const NdTensor& t : tensors) {
        DqDetail detail;
        QuantizationResult r = dq_forward(q, t, &detail);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double diff = t[i] - r.quantized[i];
            err_acc += diff * diff;
        }
        n_elems += static_cast<double>(t.size());
        for (std::size_t m = 0; m < num_slices; ++m) usage[m].add_all(detail.slice_codes[m]);
    }
    result.mean_l2 = err_acc / n_elems;
    result.per_book_entropy.resize(num_slices);
    double h_acc = 0.0;
    for (std::size_t m = 0; m < num_slices; ++m) {
        result.per_book_entropy[m] = entropy_nats(usage[m]);
        h_acc += result.per_book_entropy[m];
    }
    result.mean_entropy = h_acc / static_cast<double>(num_slices);
    result.quantizer = std::move(q);
    return result;
}

}  // namespace dq
