#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <limits>
#include <random>
#include <vector>

#include "dq/kernels.hpp"

namespace {

// Independent brute-force oracle: plain double loop, no shared helpers.
void brute_force_nearest(const std::vector<double>& vecs, std::size_t positions, std::size_t dim,
                         const std::vector<double>& codes, std::size_t num_codes,
                         std::vector<std::int32_t>& idx, std::vector<double>& dist) {
    idx.assign(positions, 0);
    dist.assign(positions, 0.0);
    for (std::size_t p = 0; p < positions; ++p) {
        double best = std::numeric_limits<double>::infinity();
        std::int32_t best_k = 0;
        for (std::size_t k = 0; k < num_codes; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                const double diff = vecs[p * dim + i] - codes[k * dim + i];
                acc += diff * diff;
            }
            if (acc < best) {
                best = acc;
                best_k = static_cast<std::int32_t>(k);
            }
        }
        idx[p] = best_k;
        dist[p] = best;
    }
}

}  // namespace

TEST_CASE("parallel assignment is bit-identical to the serial reference") {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> val(-2.0, 2.0);
    for (int iter = 0; iter < 20; ++iter) {
        const std::size_t positions = 1 + static_cast<std::size_t>(rng() % 300);
        const std::size_t dim = 1 + static_cast<std::size_t>(rng() % 16);
        const std::size_t num_codes = 1 + static_cast<std::size_t>(rng() % 32);
        std::vector<double> vecs(positions * dim), codes(num_codes * dim);
        for (auto& v : vecs) v = val(rng);
        for (auto& v : codes) v = val(rng);

        std::vector<std::int32_t> ia(positions), ib(positions);
        std::vector<double> da(positions), db(positions);
        dq::kernels::assign_nearest_serial(vecs.data(), positions, dim, codes.data(), num_codes,
                                           ia.data(), da.data());
        dq::kernels::assign_nearest(vecs.data(), positions, dim, codes.data(), num_codes,
                                    ib.data(), db.data());
        CHECK(ia == ib);
        CHECK(da == db);
    }
}

TEST_CASE("assignment matches the brute-force oracle") {
    std::mt19937_64 rng(202);
    std::uniform_real_distribution<double> val(-1.0, 1.0);
    for (int iter = 0; iter < 200; ++iter) {
        const std::size_t positions = 1 + static_cast<std::size_t>(rng() % 64);
        const std::size_t dim = 1 + static_cast<std::size_t>(rng() % 8);
        const std::size_t num_codes = 1 + static_cast<std::size_t>(rng() % 16);
        std::vector<double> vecs(positions * dim), codes(num_codes * dim);
        for (auto& v : vecs) v = val(rng);
        for (auto& v : codes) v = val(rng);

        std::vector<std::int32_t> got_i(positions), want_i;
        std::vector<double> got_d(positions), want_d;
        dq::kernels::assign_nearest(vecs.data(), positions, dim, codes.data(), num_codes,
                                    got_i.data(), got_d.data());
        brute_force_nearest(vecs, positions, dim, codes, num_codes, want_i, want_d);
        CHECK(got_i == want_i);
        CHECK(got_d == want_d);
    }
}

TEST_CASE("exact ties break to the lowest code index") {
    // duplicate codes guarantee ties
    std::vector<double> codes = {0.5, 0.5, 0.5, 0.5, 1.0, 1.0};
    std::vector<double> vec = {0.5, 0.5};
    std::int32_t idx = -1;
    double dist = -1.0;
    dq::kernels::assign_nearest(vec.data(), 1, 2, codes.data(), 3, &idx, &dist);
    CHECK(idx == 0);
    CHECK(dist == 0.0);

    // equidistant distinct codes
    std::vector<double> codes2 = {0.0, 0.0, 1.0, 0.0};
    std::vector<double> vec2 = {0.5, 0.0};
    dq::kernels::assign_nearest(vec2.data(), 1, 2, codes2.data(), 2, &idx, &dist);
    CHECK(idx == 0);
    CHECK(dist == 0.25);
}

TEST_CASE("sharded counting equals the serial reference") {
    std::mt19937_64 rng(303);
    const std::size_t n = 100000;
    const std::size_t num_codes = 97;
    std::vector<std::int32_t> codes(n);
    for (auto& c : codes) c = static_cast<std::int32_t>(rng() % num_codes);
    auto a = dq::kernels::count_codes_serial(codes.data(), n, num_codes);
    auto b = dq::kernels::count_codes(codes.data(), n, num_codes);
    CHECK(a == b);

    codes[500] = -3;
    CHECK_THROWS_AS(dq::kernels::count_codes(codes.data(), n, num_codes), std::out_of_range);
}
