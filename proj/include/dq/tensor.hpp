#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace dq {

/// Dense n-dimensional tensor of doubles, row-major.
/// Values are immutable by convention once handed to other modules; nothing
/// here is thread-safe for concurrent mutation.
class NdTensor {
public:
    NdTensor() = default;

    static NdTensor zeros(std::vector<std::size_t> shape);
    static NdTensor full(std::vector<std::size_t> shape, double value);

    /// Takes ownership of `data`. Validates that product(shape) == data.size()
    /// and that every element is finite; use this for anything that crosses a
    /// module or file boundary.
    static NdTensor from_data(std::vector<std::size_t> shape, std::vector<double> data);

    /// No finiteness scan; for values produced internally.
    static NdTensor from_data_unchecked(std::vector<std::size_t> shape, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t flat) { return data_[flat]; }
    double operator[](std::size_t flat) const { return data_[flat]; }

    /// Multi-index access (row-major); bounds-checked, test/debug convenience.
    double& at(const std::vector<std::size_t>& idx);
    double at(const std::vector<std::size_t>& idx) const;

    bool same_shape(const NdTensor& other) const { return shape_ == other.shape_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Bitwise equality of shape and every element.
bool bit_equal(const NdTensor& a, const NdTensor& b);

/// Description of one axis decomposition: M slices of extent D along `axis`,
/// with `pad` appended zeros, all of them on the last slice.
struct AxisDecomposition {
    std::size_t axis = 0;
    std::size_t num_slices = 1;   // M
    std::size_t slice_extent = 0; // D
    std::size_t pad = 0;

    std::size_t original_extent() const { return num_slices * slice_extent - pad; }

    /// Unpadded extent of slice `m` along the decomposed axis.
    std::size_t valid_extent(std::size_t m) const {
        return m + 1 == num_slices ? slice_extent - pad : slice_extent;
    }

    /// True if position `axis_index` within slice `m` is padding.
    bool is_pad(std::size_t m, std::size_t axis_index) const {
        return axis_index >= valid_extent(m);
    }
};

/// Split `t` along `axis` into `num_slices` slices of extent ceil(extent/M);
/// the final slice is zero-padded. Throws std::invalid_argument on a bad axis
/// or when M exceeds the axis extent.
std::pair<std::vector<NdTensor>, AxisDecomposition>
decompose(const NdTensor& t, std::size_t axis, std::size_t num_slices);

/// Inverse of decompose: concatenates slices along d.axis and trims the pad.
/// Bit-exact round-trip. Throws std::invalid_argument on shape mismatch.
NdTensor reassemble(const std::vector<NdTensor>& slices, const AxisDecomposition& d);

/// Flattens every non-axis position of `slice` into one row: result is a
/// [P x D] rank-2 tensor with D = slice.extent(axis) and P the product of the
/// other extents. Row order is the row-major order of the remaining indices.
NdTensor positions_as_vectors(const NdTensor& slice, std::size_t axis);

/// Inverse of positions_as_vectors given the original slice shape.
NdTensor vectors_to_positions(const NdTensor& mat, const std::vector<std::size_t>& slice_shape,
                              std::size_t axis);

/// 0/1 mask with the shape of slice `m` of `d`: 1 where the element is real,
/// 0 where it is padding.
NdTensor pad_mask(const AxisDecomposition& d, std::size_t m,
                  const std::vector<std::size_t>& slice_shape);

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

/// DQT1 tensor file: magic "DQTENS01", u8 rank, rank x u32 LE extents,
/// u8 dtype (0=f32, 1=f64), raw little-endian payload.
void save_dqt1(const NdTensor& t, const std::string& path, Dtype dtype = Dtype::F64);
NdTensor load_dqt1(const std::string& path);

/// In-memory DQT1 encoding (used by the DQP1 checkpoint format).
void encode_dqt1(const NdTensor& t, Dtype dtype, std::vector<std::uint8_t>& out);
NdTensor decode_dqt1(const std::uint8_t* bytes, std::size_t len, std::size_t& consumed,
                     const std::string& context);

}  // namespace dq
