#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "dq/error.hpp"
#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"

using dq::Codebook;
using dq::DepthwiseQuantizer;
using dq::NdTensor;

namespace {

Codebook make_book(std::size_t k, std::size_t d, const std::vector<double>& codes,
                   double gamma = 0.99, double epsilon = 1e-5) {
    Codebook b(k, d, gamma, epsilon);
    b.codes() = codes;
    return b;
}

NdTensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                       double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    NdTensor t = NdTensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

std::filesystem::path temp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "dq_quantizer_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

// EMA closed form for a constant assignment stream: after T identical steps,
//   n(T) = g^T n(0) + (1 - g^T) c,   m(T) = g^T m(0) + (1 - g^T) s
// and the code is m(T) / n_hat(T) with the documented Laplace smoothing.
struct EmaOracle {
    std::vector<double> n;
    std::vector<double> m;  // K x D

    static EmaOracle run(std::size_t k, std::size_t d, const std::vector<double>& n0,
                         const std::vector<double>& m0, const std::vector<double>& batch_count,
                         const std::vector<double>& batch_sum, double gamma, std::size_t steps) {
        const double decay = std::pow(gamma, static_cast<double>(steps));
        EmaOracle o;
        o.n.resize(k);
        o.m.resize(k * d);
        for (std::size_t i = 0; i < k; ++i)
            o.n[i] = decay * n0[i] + (1.0 - decay) * batch_count[i];
        for (std::size_t i = 0; i < k * d; ++i)
            o.m[i] = decay * m0[i] + (1.0 - decay) * batch_sum[i];
        return o;
    }

    std::vector<double> code(std::size_t i, std::size_t k, std::size_t d, double epsilon) const {
        const double total = std::accumulate(n.begin(), n.end(), 0.0);
        const double n_hat =
            (n[i] + epsilon) / (total + static_cast<double>(k) * epsilon) * total;
        std::vector<double> c(d);
        for (std::size_t x = 0; x < d; ++x) c[x] = m[i * d + x] / n_hat;
        return c;
    }
};

}  // namespace

TEST_CASE("nearest_code picks the minimum squared distance") {
    // by hand: d((0,0),(0.9,0.8)) = 1.45, d((1,1),(0.9,0.8)) = 0.05
    Codebook b = make_book(2, 2, {0, 0, 1, 1});
    std::vector<double> v = {0.9, 0.8};
    auto [idx, dist] = b.nearest_code(v);
    CHECK(idx == 1);
    CHECK(dist == doctest::Approx(0.05).epsilon(1e-12));

    auto [idx0, dist0] = b.nearest_code(std::vector<double>{0.0, 0.0});
    CHECK(idx0 == 0);
    CHECK(dist0 == 0.0);

    Codebook tie = make_book(2, 2, {0, 0, 1, 0});
    auto [ti, td] = tie.nearest_code(std::vector<double>{0.5, 0.0});
    CHECK(ti == 0);  // lowest index wins the tie
    CHECK(td == 0.25);

    CHECK_THROWS_AS(b.nearest_code(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("vq_forward on exact code rows gives zero distances") {
    Codebook b = make_book(3, 2, {0, 0, 1, 1, 2, 2});
    NdTensor vectors = NdTensor::from_data({3, 2}, {1, 1, 0, 0, 2, 2});
    auto r = dq::vq_forward(b, vectors);
    CHECK(r.codes.data == std::vector<std::int32_t>{1, 0, 2});
    for (std::size_t p = 0; p < 3; ++p) CHECK(r.distances[p] == 0.0);
    CHECK(r.mean_distance == 0.0);
    // quantized rows are exact copies of codebook rows
    CHECK(dq::bit_equal(r.quantized, vectors));
}

TEST_CASE("vq_forward single row reduces to nearest_code") {
    Codebook b = make_book(4, 3, {0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1});
    NdTensor row = NdTensor::from_data({1, 3}, {0.4, 0.9, 0.1});
    auto r = dq::vq_forward(b, row);
    auto [idx, dist] = b.nearest_code(std::vector<double>{0.4, 0.9, 0.1});
    CHECK(r.codes.data[0] == idx);
    CHECK(r.distances[0] == dist);
    CHECK(r.mean_distance == dist);
}

TEST_CASE("vq_forward mean distance matches a brute-force oracle") {
    std::mt19937_64 rng(42);
    NdTensor vectors = random_tensor({100, 8}, rng);
    NdTensor code_rows = random_tensor({4, 8}, rng);
    Codebook b = make_book(4, 8, code_rows.storage());

    auto r = dq::vq_forward(b, vectors);

    double acc = 0.0;
    for (std::size_t p = 0; p < 100; ++p) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < 4; ++k) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < 8; ++i) {
                const double diff = vectors[p * 8 + i] - code_rows[k * 8 + i];
                d2 += diff * diff;
            }
            best = std::min(best, d2);
        }
        acc += best;
    }
    CHECK(r.mean_distance == doctest::Approx(acc / 100.0).epsilon(1e-12));
}

TEST_CASE("vq_forward on empty input is a no-op") {
    Codebook b = make_book(2, 2, {0, 0, 1, 1});
    NdTensor empty;
    auto r = dq::vq_forward(b, empty);
    CHECK(r.codes.data.empty());
    CHECK(r.quantized.size() == 0);
    CHECK(r.mean_distance == 0.0);
}

TEST_CASE("dq_forward with M=1 is bit-identical to vq_forward") {
    std::mt19937_64 rng(7);
    for (int iter = 0; iter < 10; ++iter) {
        NdTensor t = random_tensor({6, 4, 5}, rng);
        NdTensor code_rows = random_tensor({32, 6}, rng);
        Codebook b = make_book(32, 6, code_rows.storage());
        DepthwiseQuantizer q(1, 0, {b});

        auto dq_r = dq::dq_forward(q, t);
        auto vq_r = dq::vq_forward(b, dq::positions_as_vectors(t, 0));

        CHECK(dq_r.codes.data == vq_r.codes.data);
        CHECK(dq_r.mean_distance == vq_r.mean_distance);
        NdTensor vq_tensor = dq::vectors_to_positions(vq_r.quantized, t.shape(), 0);
        CHECK(dq::bit_equal(dq_r.quantized, vq_tensor));
    }
}

TEST_CASE("dq_forward emits one code per position per book") {
    std::mt19937_64 rng(11);
    NdTensor t = random_tensor({512, 7, 7}, rng);
    DepthwiseQuantizer q = DepthwiseQuantizer::per_slice(7, 0, 32, 74);
    for (std::size_t m = 0; m < 7; ++m) {
        NdTensor rows = random_tensor({32, 74}, rng);
        q.book(m).codes() = rows.storage();
    }
    auto r = dq::dq_forward(q, t);
    CHECK(r.codes.shape == std::vector<std::size_t>{7, 7, 7});  // 49 positions x 7 books
    CHECK(r.codes.data.size() == 343);
    CHECK(r.quantized.shape() == t.shape());
    for (std::int32_t c : r.codes.data) {
        CHECK(c >= 0);
        CHECK(c < 32);
    }
}

TEST_CASE("dq_forward achieves zero distance when every vector is a code row") {
    DepthwiseQuantizer q = DepthwiseQuantizer::per_slice(2, 0, 2, 2);
    q.book(0).codes() = {1, 1, 2, 2};
    q.book(1).codes() = {3, 3, 4, 4};
    // tensor [4,3]: slice 0 = rows 0..1, slice 1 = rows 2..3; vectors along
    // axis 0 are columns, so fill columns with code rows
    NdTensor t = NdTensor::from_data({4, 3}, {1, 2, 1, 1, 2, 1, 3, 4, 4, 3, 4, 4});
    auto r = dq::dq_forward(q, t);
    CHECK(r.mean_distance == 0.0);
    CHECK(dq::bit_equal(r.quantized, t));
}

TEST_CASE("quantization_loss terms") {
    NdTensor z = NdTensor::from_data({2}, {1.0, 0.0});
    NdTensor z_hat = NdTensor::from_data({2}, {0.0, 0.0});

    // spec'd sum-squared convention per element
    auto sum_terms = dq::quantization_loss(z, z_hat, 0.25, dq::Reduction::Sum);
    CHECK(sum_terms.codebook == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(sum_terms.commitment == doctest::Approx(0.25).epsilon(1e-15));

    // default training reduction: mean over elements
    auto mean_terms = dq::quantization_loss(z, z_hat, 0.25);
    CHECK(mean_terms.codebook == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(mean_terms.commitment == doctest::Approx(0.125).epsilon(1e-15));

    auto equal_terms = dq::quantization_loss(z, z, 0.25);
    CHECK(equal_terms.codebook == 0.0);
    CHECK(equal_terms.commitment == 0.0);

    auto beta0 = dq::quantization_loss(z, z_hat, 0.0);
    CHECK(beta0.commitment == 0.0);

    NdTensor other = NdTensor::from_data({3}, {0, 0, 0});
    CHECK_THROWS_AS(dq::quantization_loss(z, other, 0.25), std::invalid_argument);
}

TEST_CASE("quantization_loss respects the pad mask and position order") {
    std::mt19937_64 rng(13);
    NdTensor z = random_tensor({10}, rng);
    NdTensor z_hat = random_tensor({10}, rng);
    NdTensor mask = NdTensor::full({10}, 1.0);
    mask[7] = 0.0;
    auto masked = dq::quantization_loss(z, z_hat, 0.5, dq::Reduction::MeanPerElement, &mask);

    double acc = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        if (i == 7) continue;
        acc += (z[i] - z_hat[i]) * (z[i] - z_hat[i]);
    }
    CHECK(masked.codebook == doctest::Approx(acc / 9.0).epsilon(1e-15));

    // permutation invariance over positions
    std::vector<std::size_t> perm(10);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    NdTensor zp = NdTensor::zeros({10}), zhp = NdTensor::zeros({10});
    for (std::size_t i = 0; i < 10; ++i) {
        zp[i] = z[perm[i]];
        zhp[i] = z_hat[perm[i]];
    }
    auto a = dq::quantization_loss(z, z_hat, 0.5);
    auto bt = dq::quantization_loss(zp, zhp, 0.5);
    CHECK(a.codebook == doctest::Approx(bt.codebook).epsilon(1e-12));
    CHECK(a.codebook > 0.0);
}

TEST_CASE("ema_update follows the decayed-count rule") {
    Codebook b(2, 2, 0.5, 1e-5);
    b.codes() = {0, 0, 5, 5};
    b.ema_counts() = {2.0, 1.0};
    b.ema_sums() = {0, 0, 5, 5};

    NdTensor vectors = NdTensor::from_data({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
    std::vector<std::int32_t> assign = {0, 0, 0, 0};
    b.ema_update(vectors, assign);

    CHECK(b.ema_counts()[0] == doctest::Approx(3.0).epsilon(1e-15));  // 0.5*2 + 0.5*4
    // untouched code decays but keeps its vector
    CHECK(b.ema_counts()[1] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(b.code(1)[0] == 5.0);
    CHECK(b.code(1)[1] == 5.0);
}

TEST_CASE("empty batch is a pure decay step") {
    Codebook b(2, 1, 0.9, 1e-5);
    b.codes() = {1.0, 2.0};
    b.ema_counts() = {1.0, 4.0};
    b.ema_sums() = {1.0, 8.0};
    NdTensor none = NdTensor::zeros({1, 1});
    // zero-length span: pass a 1-row matrix but no assignments is invalid;
    // use matching empty containers through a 1x1 tensor trick is not
    // possible, so ema_update accepts mismatch only as an error. Pure decay
    // is exercised per-code: assign everything to code 0 and check code 1.
    std::vector<std::int32_t> assign = {0};
    none[0] = 3.0;
    b.ema_update(none, assign);
    CHECK(b.ema_counts()[1] == doctest::Approx(3.6).epsilon(1e-15));
    CHECK(b.ema_sums()[1] == doctest::Approx(7.2).epsilon(1e-15));
    CHECK(b.code(1)[0] == 2.0);  // m/n ratio preserved, vector untouched

    // a fully empty batch decays all counts, touches no code
    Codebook c(2, 1, 0.5, 1e-5);
    c.codes() = {3.0, 4.0};
    c.ema_counts() = {2.0, 6.0};
    c.ema_sums() = {6.0, 24.0};
    c.ema_update(NdTensor{}, {});
    CHECK(c.ema_counts()[0] == 1.0);
    CHECK(c.ema_counts()[1] == 3.0);
    CHECK(c.codes() == std::vector<double>{3.0, 4.0});
}

TEST_CASE("ema converges to the closed form on a constant stream") {
    const std::size_t k = 4, d = 3;
    const double gamma = 0.9, epsilon = 1e-5;
    Codebook b(k, d, gamma, epsilon);
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> dist(-1, 1);
    for (double& c : b.codes()) c = dist(rng);
    const std::vector<double> n0 = b.ema_counts();
    const std::vector<double> m0 = b.ema_sums();

    // constant batch: 3 vectors to code 0, 2 vectors to code 2
    NdTensor batch = NdTensor::from_data(
        {5, 3}, {0.5, 0.5, 0.5, 0.7, 0.1, 0.0, 0.3, 0.3, 0.4, -1.0, 0.0, 1.0, -0.8, 0.2, 0.6});
    std::vector<std::int32_t> assign = {0, 0, 0, 2, 2};

    // T such that gamma^T < 1e-8
    const std::size_t steps = 200;
    CHECK(std::pow(gamma, static_cast<double>(steps)) < 1e-8);
    for (std::size_t t = 0; t < steps; ++t) b.ema_update(batch, assign);

    std::vector<double> batch_count = {3, 0, 2, 0};
    std::vector<double> batch_sum(k * d, 0.0);
    for (std::size_t p = 0; p < 5; ++p)
        for (std::size_t i = 0; i < d; ++i)
            batch_sum[static_cast<std::size_t>(assign[p]) * d + i] += batch[p * d + i];

    auto oracle = EmaOracle::run(k, d, n0, m0, batch_count, batch_sum, gamma, steps);
    for (std::size_t code : {std::size_t{0}, std::size_t{2}}) {
        auto expect = oracle.code(code, k, d, epsilon);
        for (std::size_t i = 0; i < d; ++i)
            CHECK(b.code(code)[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    }
    // and toward the stream mean
    for (std::size_t i = 0; i < d; ++i) {
        const double mean0 = batch_sum[i] / 3.0;
        CHECK(std::abs(b.code(0)[i] - mean0) < 1e-5);
    }
}

TEST_CASE("reinit_dead_codes") {
    std::mt19937_64 rng(3);
    NdTensor batch = random_tensor({16, 2}, rng);

    Codebook healthy(3, 2, 0.99, 1e-5);
    healthy.ema_counts() = {1.0, 2.0, 3.0};
    CHECK(healthy.reinit_dead_codes(batch, 0.5, 1) == 0);

    Codebook b(3, 2, 0.99, 1e-5);
    b.codes() = {9, 9, 8, 8, 7, 7};
    b.ema_counts() = {0.0, 1.0, 1.0};
    const std::size_t n = b.reinit_dead_codes(batch, 0.1, 42);
    CHECK(n == 1);
    CHECK(b.ema_counts()[0] == 1.0);
    bool matches_row = false;
    for (std::size_t r = 0; r < 16; ++r)
        matches_row |= (b.code(0)[0] == batch[r * 2] && b.code(0)[1] == batch[r * 2 + 1]);
    CHECK(matches_row);

    // exact threshold boundary: n_i == threshold is kept
    Codebook edge(2, 2, 0.99, 1e-5);
    edge.ema_counts() = {0.1, 0.2};
    CHECK(edge.reinit_dead_codes(batch, 0.1, 7) == 0);

    // determinism
    Codebook b1(3, 2, 0.99, 1e-5), b2(3, 2, 0.99, 1e-5);
    b1.ema_counts() = {0.0, 0.0, 1.0};
    b2.ema_counts() = {0.0, 0.0, 1.0};
    b1.reinit_dead_codes(batch, 0.1, 1234);
    b2.reinit_dead_codes(batch, 0.1, 1234);
    CHECK(b1.codes() == b2.codes());
}

TEST_CASE("capacity closed forms") {
    auto r = dq::capacity(512, 10);
    CHECK(r.cost == 5120);
    CHECK(r.capacity_nats == doctest::Approx(62.383).epsilon(1e-4));
    CHECK(r.capacity_nats == 10.0 * std::log(512.0));
    CHECK(r.sample_space_log == r.capacity_nats);
    CHECK(r.kl_constant_nats == r.capacity_nats);

    auto r2 = dq::capacity(32, 1);
    CHECK(r2.cost == 32);
    CHECK(r2.capacity_nats == doctest::Approx(std::log(32.0)).epsilon(1e-15));

    auto r3 = dq::capacity(1, 5);
    CHECK(r3.capacity_nats == 0.0);
    CHECK(r3.cost == 5);
}

TEST_CASE("capacity grows additively in M") {
    for (std::size_t k : {2, 32, 512}) {
        const double lnk = std::log(static_cast<double>(k));
        for (std::size_t m = 1; m <= 12; ++m) {
            auto lo = dq::capacity(k, m);
            auto hi = dq::capacity(k, m + 1);
            CHECK(hi.cost - lo.cost == k);  // cost grows by exactly K
            const double diff = hi.capacity_nats - lo.capacity_nats;
            if (m == 1) {
                CHECK(diff == lnk);  // 2x - x is always exact
            } else {
                // additivity of M*ln K holds to within a few ulps of the
                // product representation
                CHECK(diff == doctest::Approx(lnk).epsilon(1e-13));
            }
        }
    }
}

TEST_CASE("DQC1 round-trip is bit-exact") {
    std::mt19937_64 rng(31);
    DepthwiseQuantizer q = DepthwiseQuantizer::per_slice(3, 1, 8, 4, 0.97, 1e-4);
    for (std::size_t m = 0; m < 3; ++m) {
        NdTensor rows = random_tensor({8, 4}, rng);
        q.book(m).codes() = rows.storage();
        NdTensor batch = random_tensor({20, 4}, rng);
        std::vector<std::int32_t> assign(20);
        for (auto& a : assign) a = static_cast<std::int32_t>(rng() % 8);
        q.book(m).ema_update(batch, assign);
    }

    auto path = temp_file("books.dqc");
    dq::save_dqc1(q, path.string());
    DepthwiseQuantizer back = dq::load_dqc1(path.string(), 3, 1, 0.97, 1e-4);
    CHECK(back.num_books() == 3);
    CHECK(back.num_slices() == 3);
    for (std::size_t m = 0; m < 3; ++m) {
        CHECK(back.book(m).codes() == q.book(m).codes());
        CHECK(back.book(m).ema_counts() == q.book(m).ema_counts());
        CHECK(back.book(m).ema_sums() == q.book(m).ema_sums());
    }
}

TEST_CASE("DQC1 shared-codebook round-trip keeps num_slices from caller") {
    DepthwiseQuantizer q = DepthwiseQuantizer::shared(5, 1, 4, 2);
    q.book(0).codes() = {0, 0, 1, 1, 2, 2, 3, 3};
    auto path = temp_file("shared.dqc");
    dq::save_dqc1(q, path.string());
    DepthwiseQuantizer back = dq::load_dqc1(path.string(), 5, 1);
    CHECK(back.num_books() == 1);
    CHECK(back.num_slices() == 5);
    CHECK(back.shared_codebook());
    CHECK(back.book(0).codes() == q.book(0).codes());
}
