#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dq/autodiff.hpp"
#include "dq/layers.hpp"
#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"

namespace dq {

enum class ReconLoss { Mse, Ce256 };

struct DqaeConfig {
    std::size_t num_levels = 2;
    std::vector<std::size_t> codebook_sizes = {256, 128};  // top -> bottom
    std::size_t num_slices = 5;   // M
    std::size_t code_dim = 64;    // D per book; bottleneck width is M*D
    double beta = 0.25;
    double gamma = 0.99;
    double epsilon = 1e-5;
    bool shared_codebook = false;  // single book over the M slices (the VQ baseline)
    bool use_ema = true;           // EMA codebook training; off routes Eq.-style gradients to codes
    ReconLoss recon = ReconLoss::Mse;
    std::size_t width = 32;
    std::size_t input_channels = 1;
    bool top_stream_to_final = false;  // also upsample the top code map into the final decoder
    double dead_code_fraction = 0.01;
    std::size_t dead_check_interval = 100;
    AdamWConfig optimizer{};
    std::uint64_t seed = 0;
};

struct TrainMetrics {
    std::size_t step = 0;
    double total = 0.0;
    double reconstruction = 0.0;
    std::vector<double> codebook_terms;    // per level, bottom -> top
    std::vector<double> commitment_terms;  // beta included
    std::vector<double> level_entropy;     // batch usage entropy, mean over books (nats)
    std::vector<std::vector<std::uint64_t>> level_usage;  // per level, summed over books
    double bits_per_dim = 0.0;  // populated for Ce256 runs
    double capacity_nats = 0.0;
    std::size_t dead_codes_reinitialized = 0;
};

/// nll (nats) normalized to base-2 units per dimension.
double bits_per_dim(double nll_nats_total, std::size_t num_dims);

/// The hierarchical autoencoder with a depthwise-quantized bottleneck per
/// level. Level 0 is the bottom (finest) hierarchy; the bottom encoder
/// downsamples x4 and every level above adds another x2.
class DqaeModel {
public:
    explicit DqaeModel(const DqaeConfig& cfg);

    const DqaeConfig& config() const { return cfg_; }

    /// Encoder activations bottom -> top (values only, no quantization).
    std::vector<NdTensor> encode_stack(const NdTensor& batch);

    /// One optimizer + EMA step. Batch is [B,C,H,W]; for Ce256 values must
    /// lie in [0,1). Throws std::runtime_error naming the term on NaN loss.
    TrainMetrics train_step(const NdTensor& batch);

    struct EvalResult {
        NdTensor reconstruction;
        double recon_loss = 0.0;  // mse or mean nats, matching cfg.recon
        double mse = 0.0;         // always populated
        double bits_per_dim = 0.0;
        std::vector<CodeTensor> level_codes;  // [B, M, h, w] per level
        std::vector<double> codebook_terms;
        std::vector<double> commitment_terms;
    };

    /// Forward pass without parameter updates. `zero_levels` lists levels
    /// whose encoder stream is replaced by zeros before conditioning and
    /// quantization (the hierarchy ablation).
    EvalResult evaluate(const NdTensor& batch, const std::vector<std::size_t>& zero_levels = {});

    /// Central-difference support: captures the per-level quantization
    /// offsets of a base forward so a later forward can run with the
    /// quantizer replaced by "z + offset" (assignments frozen).
    struct FrozenOffsets {
        std::vector<NdTensor> offsets;  // bottom -> top, z_hat - z at the base point
        std::vector<NdTensor> base_z;   // z at the base point (commitment target)
    };
    FrozenOffsets capture_offsets(const NdTensor& batch);

    /// Scalar total loss of a forward pass with frozen offsets; gradients
    /// are exact for this surrogate, so finite differences apply.
    double frozen_loss(const NdTensor& batch, const FrozenOffsets& offsets);
    /// Same forward, but returns the gradients for every parameter.
    std::vector<std::pair<std::string, NdTensor>> frozen_loss_gradients(
        const NdTensor& batch, const FrozenOffsets& offsets);

    std::vector<std::pair<std::string, NdTensor*>> parameters();
    DepthwiseQuantizer& quantizer(std::size_t level) { return quantizers_[level]; }
    const DepthwiseQuantizer& quantizer(std::size_t level) const { return quantizers_[level]; }
    std::size_t step_count() const { return step_; }

    void save_checkpoint(const std::string& dir) const;
    void load_checkpoint(const std::string& dir);

private:
    struct LevelBlocks {
        // encoder
        Conv2dLayer enc_down1;  // level 0 only: first x2
        Conv2dLayer enc_down2;  // x2
        ResBlock enc_res1, enc_res2;
        // conditioning (all levels below the top)
        Conv2dLayer cond_proj;  // 1x1 on concat(e, up(d_prev))
        // quantizer IO
        Conv2dLayer pre_q;   // 1x1 width -> M*D
        Conv2dLayer post_q;  // 1x1 M*D -> width
        // same-scale decoder block
        ResBlock dec_res;
        // upsampler chain to half input resolution (loop levels; top when
        // N == 1 or top_stream_to_final)
        Conv2dLayer up_proj;  // 1x1 onto width before upsampling
        std::vector<UpsampleConv> up_stages;
    };

    struct ForwardOutputs {
        Var x_hat;
        Var recon_loss;
        Var total;
        // indexed by level, 0 = bottom
        std::vector<Var> codebook_terms;
        std::vector<Var> commitment_terms;
        std::vector<Tape::StraightThrough> levels;  // default entries in frozen mode
        std::vector<BoundParam> bound;
    };

    ForwardOutputs forward(Tape& tape, const NdTensor& batch,
                           const std::vector<std::size_t>& zero_levels,
                           const FrozenOffsets* frozen);

    Var quantize_level(Tape& tape, std::size_t level, Var z, const FrozenOffsets* frozen,
                       ForwardOutputs& out);

    void maybe_init_books(std::size_t level, const NdTensor& z_value);

    DqaeConfig cfg_;
    std::vector<LevelBlocks> levels_;  // index 0 = bottom
    // final decoder
    Conv2dLayer final_in;
    ResBlock final_res;
    UpsampleConv final_up;
    Conv2dLayer head1;
    Conv2dLayer head2;  // Ce256 only
    std::vector<DepthwiseQuantizer> quantizers_;
    std::vector<bool> books_ready_;
    AdamW optimizer_;
    std::size_t step_ = 0;
};

}  // namespace dq
