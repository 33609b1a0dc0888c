#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "dq/error.hpp"
#include "dq/tensor.hpp"

using dq::AxisDecomposition;
using dq::NdTensor;

namespace {

NdTensor arange(std::vector<std::size_t> shape) {
    NdTensor t = NdTensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i + 1);
    return t;
}

NdTensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-10.0, 10.0);
    NdTensor t = NdTensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

std::filesystem::path temp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "dq_tensor_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("construction validates shape and finiteness") {
    CHECK_THROWS_AS(NdTensor::from_data({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
    CHECK_THROWS_AS(NdTensor::from_data({2}, {1.0, std::nan("")}), std::invalid_argument);
    CHECK_THROWS_AS(NdTensor::zeros({2, 0}), std::invalid_argument);
    NdTensor t = NdTensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.at({1, 2}) == 6.0);
}

TEST_CASE("decompose [512,7,7] along axis 0 into 7 slices") {
    NdTensor t = arange({512, 7, 7});
    auto [slices, d] = dq::decompose(t, 0, 7);
    CHECK(slices.size() == 7);
    CHECK(d.slice_extent == 74);
    CHECK(d.pad == 6);
    for (const NdTensor& s : slices) CHECK(s.shape() == std::vector<std::size_t>{74, 7, 7});
    // pad rows of the final slice are exactly zero
    for (std::size_t k = 68; k < 74; ++k)
        for (std::size_t i = 0; i < 49; ++i) CHECK(slices[6][k * 49 + i] == 0.0);
    CHECK(dq::bit_equal(dq::reassemble(slices, d), t));
}

TEST_CASE("decompose with M=1 is the identity") {
    NdTensor t = arange({6, 2});
    auto [slices, d] = dq::decompose(t, 0, 1);
    CHECK(slices.size() == 1);
    CHECK(d.pad == 0);
    CHECK(dq::bit_equal(slices[0], t));
    CHECK(dq::bit_equal(dq::reassemble(slices, d), t));
}

TEST_CASE("decompose [5,2] with M=2, element enumeration") {
    // hand-enumerated expectation: rows 0..2 in slice 0, rows 3..4 plus a
    // zero row in slice 1
    NdTensor t = NdTensor::from_data({5, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
    auto [slices, d] = dq::decompose(t, 0, 2);
    CHECK(d.slice_extent == 3);
    CHECK(d.pad == 1);
    NdTensor expect0 = NdTensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    NdTensor expect1 = NdTensor::from_data({3, 2}, {7, 8, 9, 10, 0, 0});
    CHECK(dq::bit_equal(slices[0], expect0));
    CHECK(dq::bit_equal(slices[1], expect1));
    NdTensor rt = dq::reassemble(slices, d);
    CHECK(rt.shape() == std::vector<std::size_t>{5, 2});
    CHECK(dq::bit_equal(rt, t));
}

TEST_CASE("decompose rejects bad arguments") {
    NdTensor t = arange({4, 3});
    CHECK_THROWS_AS(dq::decompose(t, 2, 1), std::invalid_argument);
    CHECK_THROWS_AS(dq::decompose(t, 0, 5), std::invalid_argument);
    CHECK_THROWS_AS(dq::decompose(t, 0, 0), std::invalid_argument);
}

TEST_CASE("reassemble rejects mismatched slices") {
    NdTensor t = arange({5, 2});
    auto [slices, d] = dq::decompose(t, 0, 2);
    slices[1] = arange({2, 2});
    CHECK_THROWS_AS(dq::reassemble(slices, d), std::invalid_argument);
}

TEST_CASE("decompose/reassemble is a bit-exact inverse pair (random shapes)") {
    std::mt19937_64 rng(20240811);
    std::uniform_int_distribution<std::size_t> rank_dist(1, 4);
    std::uniform_int_distribution<std::size_t> extent_dist(1, 9);
    for (int iter = 0; iter < 250; ++iter) {
        std::vector<std::size_t> shape(rank_dist(rng));
        for (auto& e : shape) e = extent_dist(rng);
        NdTensor t = random_tensor(shape, rng);
        std::uniform_int_distribution<std::size_t> axis_dist(0, shape.size() - 1);
        const std::size_t axis = axis_dist(rng);
        std::uniform_int_distribution<std::size_t> m_dist(1, shape[axis]);
        const std::size_t m = m_dist(rng);

        // ceil division leaves an all-pad slice when (m-1)*D >= extent;
        // such an M is rejected, everything else must round-trip
        const std::size_t d_extent = (shape[axis] + m - 1) / m;
        if (d_extent * m - shape[axis] >= d_extent) {
            CHECK_THROWS_AS(dq::decompose(t, axis, m), std::invalid_argument);
            continue;
        }
        auto [slices, d] = dq::decompose(t, axis, m);
        CHECK(d.original_extent() + d.pad == d.num_slices * d.slice_extent);
        CHECK(d.pad < d.slice_extent);
        CHECK(dq::bit_equal(dq::reassemble(slices, d), t));
    }
}

TEST_CASE("pad mask marks exactly the zero-padded elements") {
    NdTensor t = arange({5, 3});
    auto [slices, d] = dq::decompose(t, 0, 2);
    NdTensor mask0 = dq::pad_mask(d, 0, slices[0].shape());
    NdTensor mask1 = dq::pad_mask(d, 1, slices[1].shape());
    for (std::size_t i = 0; i < mask0.size(); ++i) CHECK(mask0[i] == 1.0);
    // slice 1 holds rows 3,4 and one pad row
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(mask1.at({0, c}) == 1.0);
        CHECK(mask1.at({1, c}) == 1.0);
        CHECK(mask1.at({2, c}) == 0.0);
        CHECK(slices[1].at({2, c}) == 0.0);
    }
    CHECK(d.is_pad(1, 2));
    CHECK_FALSE(d.is_pad(1, 1));
    CHECK_FALSE(d.is_pad(0, 2));
    CHECK(d.valid_extent(0) == 3);
    CHECK(d.valid_extent(1) == 2);
}

TEST_CASE("positions_as_vectors geometry") {
    NdTensor slice = arange({74, 7, 7});
    NdTensor mat = dq::positions_as_vectors(slice, 0);
    CHECK(mat.shape() == std::vector<std::size_t>{49, 74});
    // column k of row p is slice[k, p/7, p%7]
    CHECK(mat.at({0, 0}) == slice.at({0, 0, 0}));
    CHECK(mat.at({8, 3}) == slice.at({3, 1, 1}));

    NdTensor vec = arange({5});
    NdTensor row = dq::positions_as_vectors(vec, 0);
    CHECK(row.shape() == std::vector<std::size_t>{1, 5});

    NdTensor back = dq::vectors_to_positions(mat, slice.shape(), 0);
    CHECK(dq::bit_equal(back, slice));
}

TEST_CASE("positions_as_vectors round-trips on random shapes and axes") {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> rank_dist(1, 4);
    std::uniform_int_distribution<std::size_t> extent_dist(1, 6);
    for (int iter = 0; iter < 100; ++iter) {
        std::vector<std::size_t> shape(rank_dist(rng));
        for (auto& e : shape) e = extent_dist(rng);
        NdTensor t = random_tensor(shape, rng);
        std::uniform_int_distribution<std::size_t> axis_dist(0, shape.size() - 1);
        const std::size_t axis = axis_dist(rng);
        NdTensor mat = dq::positions_as_vectors(t, axis);
        std::size_t expect_p = t.size() / t.extent(axis);
        CHECK(mat.extent(0) == expect_p);
        CHECK(mat.extent(1) == t.extent(axis));
        CHECK(dq::bit_equal(dq::vectors_to_positions(mat, t.shape(), axis), t));
    }
}

TEST_CASE("DQT1 round-trip is bit-exact for f64") {
    std::mt19937_64 rng(5);
    NdTensor t = random_tensor({3, 4, 5}, rng);
    auto path = temp_file("roundtrip.dqt");
    dq::save_dqt1(t, path.string(), dq::Dtype::F64);
    NdTensor back = dq::load_dqt1(path.string());
    CHECK(dq::bit_equal(back, t));
}

TEST_CASE("DQT1 f32 round-trip preserves f32 values") {
    NdTensor t = NdTensor::from_data({2, 2}, {1.5, -0.25, 1024.0, 3.0});
    auto path = temp_file("roundtrip32.dqt");
    dq::save_dqt1(t, path.string(), dq::Dtype::F32);
    NdTensor back = dq::load_dqt1(path.string());
    CHECK(dq::bit_equal(back, t));  // all values exactly representable in f32
}

TEST_CASE("DQT1 parse errors carry byte offsets") {
    std::mt19937_64 rng(6);
    NdTensor t = random_tensor({4, 4}, rng);
    auto path = temp_file("trunc.dqt");
    dq::save_dqt1(t, path.string());

    // truncate the payload
    {
        std::ifstream in(path.string(), std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() - 9);
        std::ofstream out(path.string(), std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_WITH_AS(dq::load_dqt1(path.string()),
                         doctest::Contains("byte offset"), dq::IoError);

    auto bad_magic = temp_file("magic.dqt");
    {
        std::ofstream out(bad_magic.string(), std::ios::binary);
        out.write("NOTMAGIC", 8);
    }
    CHECK_THROWS_WITH_AS(dq::load_dqt1(bad_magic.string()),
                         doctest::Contains("magic"), dq::IoError);
}
