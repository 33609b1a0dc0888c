#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dq/dqae.hpp"

using dq::DqaeConfig;
using dq::DqaeModel;
using dq::NdTensor;

namespace {

NdTensor random_batch(std::vector<std::size_t> shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.05, 0.95);
    NdTensor t = NdTensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

DqaeConfig small_config() {
    DqaeConfig cfg;
    cfg.num_levels = 2;
    cfg.codebook_sizes = {8, 8};
    cfg.num_slices = 2;
    cfg.code_dim = 3;
    cfg.width = 6;
    cfg.beta = 0.25;
    cfg.optimizer.lr = 1e-3;
    cfg.seed = 11;
    cfg.dead_check_interval = 50;
    return cfg;
}

}  // namespace

TEST_CASE("encode stack geometry") {
    SUBCASE("32x32 with two levels gives 8x8 and 4x4 grids") {
        DqaeConfig cfg = small_config();
        DqaeModel model(cfg);
        auto stack = model.encode_stack(random_batch({2, 1, 32, 32}, 1));
        REQUIRE(stack.size() == 2);
        CHECK(stack[0].shape() == std::vector<std::size_t>{2, 6, 8, 8});
        CHECK(stack[1].shape() == std::vector<std::size_t>{2, 6, 4, 4});
    }
    SUBCASE("16x16 with two levels gives 4x4 and 2x2") {
        DqaeConfig cfg = small_config();
        DqaeModel model(cfg);
        auto stack = model.encode_stack(random_batch({1, 1, 16, 16}, 2));
        CHECK(stack[0].shape() == std::vector<std::size_t>{1, 6, 4, 4});
        CHECK(stack[1].shape() == std::vector<std::size_t>{1, 6, 2, 2});
    }
    SUBCASE("indivisible extents are rejected") {
        DqaeConfig cfg = small_config();
        DqaeModel model(cfg);
        CHECK_THROWS_AS(model.encode_stack(random_batch({1, 1, 12, 12}, 3)),
                        std::invalid_argument);
    }
}

TEST_CASE("quantized code grids follow the stride arithmetic") {
    DqaeConfig cfg = small_config();
    DqaeModel model(cfg);
    NdTensor batch = random_batch({2, 1, 16, 16}, 4);
    auto eval = model.evaluate(batch);
    REQUIRE(eval.level_codes.size() == 2);
    CHECK(eval.level_codes[0].shape == std::vector<std::size_t>{2, 2, 4, 4});  // bottom
    CHECK(eval.level_codes[1].shape == std::vector<std::size_t>{2, 2, 2, 2});  // top
    CHECK(eval.reconstruction.shape() == batch.shape());
    for (double v : eval.commitment_terms) CHECK(v >= 0.0);
}

TEST_CASE("single-hierarchy model degenerates cleanly") {
    DqaeConfig cfg = small_config();
    cfg.num_levels = 1;
    cfg.codebook_sizes = {8};
    DqaeModel model(cfg);
    NdTensor batch = random_batch({2, 1, 16, 16}, 5);
    auto eval = model.evaluate(batch);
    CHECK(eval.level_codes.size() == 1);
    CHECK(eval.level_codes[0].shape == std::vector<std::size_t>{2, 2, 4, 4});
    CHECK(eval.reconstruction.shape() == batch.shape());
    auto metrics = model.train_step(batch);
    CHECK(metrics.step == 1);
}

TEST_CASE("loss composition matches the reported terms") {
    DqaeConfig cfg = small_config();
    DqaeModel model(cfg);
    NdTensor batch = random_batch({2, 1, 16, 16}, 6);
    for (int s = 0; s < 5; ++s) {
        auto m = model.train_step(batch);
        double expect = m.reconstruction;
        for (std::size_t l = 0; l < 2; ++l)
            expect += m.codebook_terms[l] + m.commitment_terms[l];
        CHECK(m.total == doctest::Approx(expect).epsilon(1e-12));
        for (double v : m.commitment_terms) CHECK(v >= 0.0);
        CHECK(m.capacity_nats ==
              doctest::Approx(2.0 * 2.0 * std::log(8.0)).epsilon(1e-12));
    }
}

TEST_CASE("training is deterministic under a fixed seed") {
    auto run = [] {
        DqaeConfig cfg = small_config();
        DqaeModel model(cfg);
        std::vector<double> stream;
        for (int s = 0; s < 6; ++s) {
            NdTensor batch = random_batch({2, 1, 16, 16}, 100 + s);
            auto m = model.train_step(batch);
            stream.push_back(m.total);
            stream.push_back(m.reconstruction);
            stream.insert(stream.end(), m.level_entropy.begin(), m.level_entropy.end());
        }
        return stream;
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);  // bit-identical metric streams
}

TEST_CASE("NaN loss aborts naming the term") {
    DqaeConfig cfg = small_config();
    DqaeModel model(cfg);
    NdTensor bad = NdTensor::from_data_unchecked({2, 1, 16, 16},
                                                 std::vector<double>(512, std::nan("")));
    CHECK_THROWS_WITH_AS(model.train_step(bad), doctest::Contains("term"), std::runtime_error);
}

TEST_CASE("every parameter group receives gradient at initialization") {
    DqaeConfig cfg = small_config();
    DqaeModel model(cfg);
    NdTensor batch = random_batch({2, 1, 16, 16}, 7);
    auto offsets = model.capture_offsets(batch);
    // real STE gradients (not the frozen surrogate): run one step and look
    // at the optimizer's effect instead; here check the frozen surrogate's
    // gradients reach every tensor, then spot-check the STE path below.
    auto grads = model.frozen_loss_gradients(batch, offsets);
    REQUIRE(!grads.empty());
    for (const auto& [name, g] : grads) {
        double norm = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) norm += std::abs(g[i]);
        INFO("parameter ", name);
        CHECK(norm > 0.0);
    }
}

TEST_CASE("zeroing streams degrades but does not destroy reconstruction") {
    DqaeConfig cfg = small_config();
    cfg.optimizer.lr = 2e-3;
    DqaeModel model(cfg);
    NdTensor batch = random_batch({4, 1, 16, 16}, 8);
    for (int s = 0; s < 60; ++s) model.train_step(batch);

    const double full = model.evaluate(batch).mse;
    const double no_bottom = model.evaluate(batch, {0}).mse;
    const double no_top = model.evaluate(batch, {1}).mse;
    const double nothing = model.evaluate(batch, {0, 1}).mse;
    CHECK(full < no_bottom);
    CHECK(full < no_top);
    // top codes alone still beat an information-free decode
    CHECK(no_bottom < nothing);
}

TEST_CASE("frozen-offset surrogate matches finite differences across the model") {
    DqaeConfig cfg = small_config();
    cfg.width = 4;
    cfg.num_slices = 2;
    cfg.code_dim = 2;
    DqaeModel model(cfg);
    NdTensor batch = random_batch({2, 1, 8, 8}, 9);
    auto offsets = model.capture_offsets(batch);
    auto grads = model.frozen_loss_gradients(batch, offsets);
    auto params = model.parameters();
    REQUIRE(grads.size() >= params.size());

    std::mt19937_64 rng(10);
    const double h = 1e-5;
    for (auto& [name, tensor] : params) {
        // sample a few coordinates per tensor
        NdTensor analytic;
        for (auto& [gname, g] : grads)
            if (gname == name) analytic = g;
        REQUIRE(analytic.size() == tensor->size());
        const std::size_t samples = std::min<std::size_t>(3, tensor->size());
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t i = rng() % tensor->size();
            const double keep = (*tensor)[i];
            (*tensor)[i] = keep + h;
            const double fp = model.frozen_loss(batch, offsets);
            (*tensor)[i] = keep - h;
            const double fm = model.frozen_loss(batch, offsets);
            (*tensor)[i] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
            INFO("parameter ", name, " coord ", i, " fd=", fd, " analytic=", analytic[i]);
            CHECK(std::abs(fd - analytic[i]) / denom < 1e-4);
        }
    }
}

TEST_CASE("checkpoint round-trip restores the model bit-exactly") {
    DqaeConfig cfg = small_config();
    DqaeModel model(cfg);
    NdTensor batch = random_batch({2, 1, 16, 16}, 12);
    for (int s = 0; s < 3; ++s) model.train_step(batch);

    auto dir = (std::filesystem::temp_directory_path() / "dqae_ckpt").string();
    model.save_checkpoint(dir);
    const double before = model.evaluate(batch).mse;

    DqaeModel restored(cfg);
    restored.load_checkpoint(dir);
    const double after = restored.evaluate(batch).mse;
    CHECK(before == after);

    auto pa = model.parameters();
    auto pb = restored.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        CHECK(dq::bit_equal(*pa[i].second, *pb[i].second));
    for (std::size_t l = 0; l < 2; ++l)
        CHECK(model.quantizer(l).book(0).codes() == restored.quantizer(l).book(0).codes());
}

TEST_CASE("smoke training reduces reconstruction loss") {
    DqaeConfig cfg = small_config();
    cfg.width = 8;
    cfg.optimizer.lr = 3e-3;
    cfg.seed = 21;
    DqaeModel model(cfg);
    // easy target: smooth low-rank images
    NdTensor batch = NdTensor::zeros({8, 1, 16, 16});
    std::mt19937_64 rng(22);
    for (std::size_t b = 0; b < 8; ++b) {
        const double fx = 0.2 + 0.1 * static_cast<double>(rng() % 5);
        const double fy = 0.2 + 0.1 * static_cast<double>(rng() % 5);
        for (std::size_t i = 0; i < 16; ++i)
            for (std::size_t j = 0; j < 16; ++j)
                batch[(b * 256) + i * 16 + j] =
                    0.5 + 0.4 * std::sin(fx * static_cast<double>(i)) *
                              std::cos(fy * static_cast<double>(j));
    }
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 120; ++s) {
        auto m = model.train_step(batch);
        if (s == 0) first = m.reconstruction;
        last = m.reconstruction;
    }
    CHECK(last < 0.5 * first);
}

TEST_CASE("bits_per_dim closed forms") {
    CHECK(dq::bits_per_dim(std::log(2.0), 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(dq::bits_per_dim(10.0 * std::log(256.0), 10) == doctest::Approx(8.0).epsilon(1e-12));
    CHECK_THROWS_AS(dq::bits_per_dim(1.0, 0), std::invalid_argument);
}

TEST_CASE("ce-256 training path produces bits/dim") {
    DqaeConfig cfg = small_config();
    cfg.recon = dq::ReconLoss::Ce256;
    cfg.width = 4;
    DqaeModel model(cfg);
    NdTensor batch = random_batch({2, 1, 16, 16}, 30);
    auto m = model.train_step(batch);
    CHECK(m.bits_per_dim > 0.0);
    CHECK(m.bits_per_dim == doctest::Approx(m.reconstruction / std::log(2.0)).epsilon(1e-12));
    auto eval = model.evaluate(batch);
    CHECK(eval.bits_per_dim > 0.0);
    CHECK(eval.reconstruction.shape() == batch.shape());
}
