#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dq/autodiff.hpp"
#include "dq/tensor.hpp"

namespace dq {

/// A parameter tensor bound onto a tape for one forward/backward pass.
struct BoundParam {
    std::string name;
    NdTensor* tensor = nullptr;
    Var var;
};

/// Fan-in-scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
NdTensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::mt19937_64& rng);

struct DenseLayer {
    std::string name;
    NdTensor w;  // [in x out]
    NdTensor b;  // [out]

    DenseLayer() = default;
    DenseLayer(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng);

    Var forward(Tape& tape, Var x, std::vector<BoundParam>& bound);
    void collect(std::vector<std::pair<std::string, NdTensor*>>& out);
};

struct Conv2dLayer {
    std::string name;
    std::size_t stride = 1;
    std::size_t pad = 0;
    NdTensor w;  // [out, in, k, k]
    NdTensor b;  // [out]

    Conv2dLayer() = default;
    Conv2dLayer(std::string name, std::size_t in, std::size_t out, std::size_t ksize,
                std::size_t stride, std::size_t pad, std::mt19937_64& rng);

    Var forward(Tape& tape, Var x, std::vector<BoundParam>& bound);
    void collect(std::vector<std::pair<std::string, NdTensor*>>& out);
};

/// x + conv3x3(relu(conv3x3(relu(x)))), width preserved.
struct ResBlock {
    Conv2dLayer c1, c2;

    ResBlock() = default;
    ResBlock(const std::string& name, std::size_t ch, std::mt19937_64& rng);

    Var forward(Tape& tape, Var x, std::vector<BoundParam>& bound);
    void collect(std::vector<std::pair<std::string, NdTensor*>>& out);
};

/// Nearest-neighbor 2x upsample followed by a 3x3 convolution.
struct UpsampleConv {
    Conv2dLayer conv;

    UpsampleConv() = default;
    UpsampleConv(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);

    Var forward(Tape& tape, Var x, std::vector<BoundParam>& bound);
    void collect(std::vector<std::pair<std::string, NdTensor*>>& out);
};

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. State slots follow parameter order,
/// which the model keeps stable across steps.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::size_t step_count() const { return step_; }

    /// Applies one update using the gradients recorded on `tape`.
    /// Throws std::runtime_error naming the parameter on a NaN gradient.
    void step(std::vector<BoundParam>& params, const Tape& tape);

private:
    struct Slot {
        NdTensor m, v;
    };
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::size_t step_ = 0;
};

/// DQP1 checkpoint: magic "DQPARM01", u32 version (1), u32 record count,
/// then per record a u16 name length, the name bytes, and a DQT1-encoded
/// tensor.
void save_dqp1(const std::vector<std::pair<std::string, const NdTensor*>>& records,
               const std::string& path, Dtype dtype = Dtype::F64);
std::vector<std::pair<std::string, NdTensor>> load_dqp1(const std::string& path);

}  // namespace dq
