#include "dq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "dq/error.hpp"

namespace dq {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("NdTensor: zero extent");
        n *= e;
    }
    return n;
}

}  // namespace

NdTensor NdTensor::zeros(std::vector<std::size_t> shape) {
    NdTensor t;
    std::size_t n = shape_product(shape);
    t.shape_ = std::move(shape);
    t.data_.assign(n, 0.0);
    return t;
}

NdTensor NdTensor::full(std::vector<std::size_t> shape, double value) {
    NdTensor t = zeros(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

NdTensor NdTensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_product(shape) != data.size())
        throw std::invalid_argument("NdTensor: shape/data size mismatch");
    for (double v : data)
        if (!std::isfinite(v)) throw std::invalid_argument("NdTensor: non-finite element");
    NdTensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

NdTensor NdTensor::from_data_unchecked(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_product(shape) != data.size())
        throw std::invalid_argument("NdTensor: shape/data size mismatch");
    NdTensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

std::size_t NdTensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) throw std::invalid_argument("NdTensor: axis out of range");
    return shape_[axis];
}

namespace {

std::size_t flat_index(const std::vector<std::size_t>& shape, const std::vector<std::size_t>& idx) {
    if (idx.size() != shape.size()) throw std::invalid_argument("NdTensor::at: rank mismatch");
    std::size_t flat = 0;
    for (std::size_t a = 0; a < idx.size(); ++a) {
        if (idx[a] >= shape[a]) throw std::out_of_range("NdTensor::at: index out of range");
        flat = flat * shape[a] + idx[a];
    }
    return flat;
}

}  // namespace

double& NdTensor::at(const std::vector<std::size_t>& idx) {
    return data_[flat_index(shape_, idx)];
}

double NdTensor::at(const std::vector<std::size_t>& idx) const {
    return data_[flat_index(shape_, idx)];
}

bool bit_equal(const NdTensor& a, const NdTensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::pair<std::vector<NdTensor>, AxisDecomposition>
decompose(const NdTensor& t, std::size_t axis, std::size_t num_slices) {
    if (axis >= t.rank()) throw std::invalid_argument("decompose: axis out of range");
    if (num_slices == 0) throw std::invalid_argument("decompose: num_slices must be >= 1");
    const std::size_t extent = t.extent(axis);
    if (num_slices > extent)
        throw std::invalid_argument("decompose: num_slices exceeds axis extent");

    AxisDecomposition d;
    d.axis = axis;
    d.num_slices = num_slices;
    d.slice_extent = (extent + num_slices - 1) / num_slices;
    d.pad = d.slice_extent * num_slices - extent;
    if (d.pad >= d.slice_extent)
        throw std::invalid_argument(
            "decompose: num_slices would leave an all-pad slice (invalid decomposition)");

    // Row-major block copy: `inner` consecutive elements share one axis index,
    // `outer` blocks of extent*inner elements precede it.
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < t.rank(); ++a) inner *= t.extent(a);
    std::size_t outer = t.size() / (extent * inner);

    std::vector<std::size_t> slice_shape = t.shape();
    slice_shape[axis] = d.slice_extent;

    std::vector<NdTensor> slices;
    slices.reserve(num_slices);
    for (std::size_t m = 0; m < num_slices; ++m) {
        NdTensor s = NdTensor::zeros(slice_shape);
        const std::size_t base = m * d.slice_extent;
        const std::size_t valid = d.valid_extent(m);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = t.data() + (o * extent + base) * inner;
            double* dst = s.data() + o * d.slice_extent * inner;
            std::memcpy(dst, src, valid * inner * sizeof(double));
            // remainder stays zero (the pad)
        }
        slices.push_back(std::move(s));
    }
    return {std::move(slices), d};
}

NdTensor reassemble(const std::vector<NdTensor>& slices, const AxisDecomposition& d) {
    if (slices.size() != d.num_slices)
        throw std::invalid_argument("reassemble: slice count mismatch");
    const NdTensor& first = slices.front();
    if (d.axis >= first.rank() || first.extent(d.axis) != d.slice_extent)
        throw std::invalid_argument("reassemble: slice extent mismatch");
    for (const NdTensor& s : slices)
        if (!s.same_shape(first)) throw std::invalid_argument("reassemble: slice shape mismatch");

    std::vector<std::size_t> shape = first.shape();
    shape[d.axis] = d.original_extent();
    NdTensor t = NdTensor::zeros(shape);

    const std::size_t extent = shape[d.axis];
    std::size_t inner = 1;
    for (std::size_t a = d.axis + 1; a < t.rank(); ++a) inner *= t.extent(a);
    std::size_t outer = t.size() / (extent * inner);

    for (std::size_t m = 0; m < d.num_slices; ++m) {
        const std::size_t base = m * d.slice_extent;
        const std::size_t valid = d.valid_extent(m);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = slices[m].data() + o * d.slice_extent * inner;
            double* dst = t.data() + (o * extent + base) * inner;
            std::memcpy(dst, src, valid * inner * sizeof(double));
        }
    }
    return t;
}

NdTensor positions_as_vectors(const NdTensor& slice, std::size_t axis) {
    if (axis >= slice.rank()) throw std::invalid_argument("positions_as_vectors: axis out of range");
    const std::size_t dim = slice.extent(axis);
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < slice.rank(); ++a) inner *= slice.extent(a);
    const std::size_t outer = slice.size() / (dim * inner);
    const std::size_t positions = outer * inner;

    NdTensor mat = NdTensor::zeros({positions, dim});
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            double* row = mat.data() + (o * inner + i) * dim;
            const double* src = slice.data() + o * dim * inner + i;
            for (std::size_t k = 0; k < dim; ++k) row[k] = src[k * inner];
        }
    }
    return mat;
}

NdTensor vectors_to_positions(const NdTensor& mat, const std::vector<std::size_t>& slice_shape,
                              std::size_t axis) {
    if (mat.rank() != 2) throw std::invalid_argument("vectors_to_positions: matrix expected");
    if (axis >= slice_shape.size())
        throw std::invalid_argument("vectors_to_positions: axis out of range");
    const std::size_t dim = slice_shape[axis];
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < slice_shape.size(); ++a) inner *= slice_shape[a];
    std::size_t total = 1;
    for (std::size_t e : slice_shape) total *= e;
    const std::size_t outer = total / (dim * inner);
    if (mat.extent(0) != outer * inner || mat.extent(1) != dim)
        throw std::invalid_argument("vectors_to_positions: matrix/shape mismatch");

    NdTensor slice = NdTensor::zeros(slice_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const double* row = mat.data() + (o * inner + i) * dim;
            double* dst = slice.data() + o * dim * inner + i;
            for (std::size_t k = 0; k < dim; ++k) dst[k * inner] = row[k];
        }
    }
    return slice;
}

NdTensor pad_mask(const AxisDecomposition& d, std::size_t m,
                  const std::vector<std::size_t>& slice_shape) {
    if (slice_shape.at(d.axis) != d.slice_extent)
        throw std::invalid_argument("pad_mask: slice shape mismatch");
    NdTensor mask = NdTensor::full(slice_shape, 1.0);
    const std::size_t valid = d.valid_extent(m);
    if (valid == d.slice_extent) return mask;

    std::size_t inner = 1;
    for (std::size_t a = d.axis + 1; a < slice_shape.size(); ++a) inner *= slice_shape[a];
    const std::size_t outer = mask.size() / (d.slice_extent * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = valid; k < d.slice_extent; ++k) {
            double* dst = mask.data() + (o * d.slice_extent + k) * inner;
            std::fill(dst, dst + inner, 0.0);
        }
    return mask;
}

// ---------------------------------------------------------------------------
// DQT1 serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kTensorMagic[8] = {'D', 'Q', 'T', 'E', 'N', 'S', '0', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

double get_f64(const std::uint8_t* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

float get_f32(const std::uint8_t* p) {
    std::uint32_t bits = get_u32(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void encode_dqt1(const NdTensor& t, Dtype dtype, std::vector<std::uint8_t>& out) {
    if (t.rank() == 0 || t.rank() > 255)
        throw std::invalid_argument("encode_dqt1: unsupported rank");
    out.insert(out.end(), kTensorMagic, kTensorMagic + 8);
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) {
        if (e > 0xffffffffULL) throw std::invalid_argument("encode_dqt1: extent too large");
        put_u32(out, static_cast<std::uint32_t>(e));
    }
    out.push_back(static_cast<std::uint8_t>(dtype));
    if (dtype == Dtype::F64) {
        for (std::size_t i = 0; i < t.size(); ++i) put_f64(out, t[i]);
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) put_f32(out, static_cast<float>(t[i]));
    }
}

NdTensor decode_dqt1(const std::uint8_t* bytes, std::size_t len, std::size_t& consumed,
                     const std::string& context) {
    auto fail_at = [&](std::size_t offset, const std::string& what) -> void {
        throw IoError(context + ": " + what + " at byte offset " + std::to_string(offset));
    };
    if (len < 8) fail_at(len, "truncated header");
    if (std::memcmp(bytes, kTensorMagic, 8) != 0) fail_at(0, "bad magic (expected DQTENS01)");
    std::size_t off = 8;
    if (off + 1 > len) fail_at(off, "truncated rank");
    std::size_t rank = bytes[off++];
    if (rank == 0) fail_at(off - 1, "zero rank");
    std::vector<std::size_t> shape(rank);
    for (std::size_t a = 0; a < rank; ++a) {
        if (off + 4 > len) fail_at(off, "truncated extents");
        shape[a] = get_u32(bytes + off);
        if (shape[a] == 0) fail_at(off, "zero extent");
        off += 4;
    }
    if (off + 1 > len) fail_at(off, "truncated dtype");
    std::uint8_t dtag = bytes[off++];
    if (dtag > 1) fail_at(off - 1, "unknown dtype tag");
    std::size_t count = 1;
    for (std::size_t e : shape) count *= e;
    const std::size_t elem = dtag == 1 ? 8 : 4;
    if (off + count * elem > len) fail_at(len, "truncated payload");

    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        data[i] = dtag == 1 ? get_f64(bytes + off) : static_cast<double>(get_f32(bytes + off));
        off += elem;
    }
    consumed = off;
    for (double v : data)
        if (!std::isfinite(v)) throw IoError(context + ": non-finite element in payload");
    return NdTensor::from_data_unchecked(std::move(shape), std::move(data));
}

void save_dqt1(const NdTensor& t, const std::string& path, Dtype dtype) {
    std::vector<std::uint8_t> buf;
    encode_dqt1(t, dtype, buf);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_dqt1: cannot open " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("save_dqt1: write failed for " + path);
}

NdTensor load_dqt1(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_dqt1: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    std::size_t consumed = 0;
    NdTensor t = decode_dqt1(buf.data(), buf.size(), consumed, path);
    if (consumed != buf.size())
        throw IoError(path + ": trailing bytes after payload at byte offset " +
                      std::to_string(consumed));
    return t;
}

}  // namespace dq
