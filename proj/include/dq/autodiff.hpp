#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"

namespace dq {

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in construction order, so every
/// parent id is smaller than its consumer's and backward() is a single
/// reverse sweep. One tape per forward pass; tapes are single-threaded.
class Tape {
public:
    /// Leaf without gradient (data, targets, frozen offsets).
    Var constant(NdTensor value);
    /// Leaf that accumulates gradient.
    Var param(NdTensor value);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);  // elementwise
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var relu(Var a);

    /// x [P x in] * w [in x out] + b [out] -> [P x out]
    Var dense(Var x, Var w, Var b);

    /// x [B,C,H,W], w [Cout,Cin,k,k], b [Cout]; zero padding.
    Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad);

    /// Nearest-neighbor 2x upsampling of [B,C,H,W].
    Var upsample2_nearest(Var x);

    /// Concatenate two [B,C,H,W] tensors along the channel axis.
    Var concat_channels(Var a, Var b);

    Var sum(Var a);
    Var mean(Var a);

    /// mean((pred - target)^2) over all elements.
    Var mse_loss(Var pred, Var target);

    /// Softmax cross-entropy in nats over `bins`-way channel groups.
    /// logits [B, C*bins, H, W]; targets [B,C,H,W] with values in [0, bins).
    /// Returns the mean negative log-likelihood per target element.
    Var softmax_ce_loss(Var logits, const CodeTensor& targets, std::size_t bins);

    /// Forward identity, zero gradient to the operand.
    Var stop_gradient(Var a);

    struct StraightThrough {
        Var quantized;        // z + sg(z_hat - z); backward is the identity
        Var codebook_term;    // scalar ||sg(z) - z_hat||^2 (mean per element)
        Var commitment_term;  // scalar beta * ||z - sg(z_hat)||^2
        QuantizationResult result;
        DqDetail detail;
    };

    /// Quantize the value of `z` with `q` and expose the straight-through
    /// surrogate plus the two loss terms. With EMA training (default) the
    /// codebook term is a metric only; passing `code_vars` (one [K x D]
    /// param per book) routes its gradient into those instead. When
    /// `frozen_codes` is given, assignments are taken from it rather than
    /// recomputed (used by finite-difference checks).
    StraightThrough straight_through_quantize(Var z, const DepthwiseQuantizer& q, double beta,
                                              const std::vector<Var>& code_vars = {},
                                              const CodeTensor* frozen_codes = nullptr);

    /// Reverse sweep from a scalar loss. Throws on non-scalar input.
    void backward(Var loss);

    const NdTensor& value(Var v) const;
    /// Accumulated gradient; a zero tensor of the value's shape if the node
    /// was never reached.
    NdTensor grad(Var v) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        NdTensor value;
        NdTensor grad;  // empty until first accumulation
        bool wants_grad = false;
        std::function<void(Tape&, int)> backprop;  // null for leaves
    };

    std::vector<Node> nodes_;

    int push(NdTensor value, bool wants_grad, std::function<void(Tape&, int)> backprop);
    NdTensor& grad_buffer(int id);
    void accumulate(int id, const double* g, std::size_t n);
    const Node& node(Var v) const;

};

}  // namespace dq
