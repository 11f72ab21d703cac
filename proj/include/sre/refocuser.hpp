#pragma once

// Refocus stage: token-selection prompt sigma + B-layer decoder producing
// per-layer value biases, wired through the two-pass forward, plus the
// classification / alignment / mask-variance losses.

#include <vector>

#include "sre/augment.hpp"
#include "sre/dataset.hpp"
#include "sre/encoder.hpp"
#include "sre/tensor.hpp"

namespace sre {

template <class R>
struct DecoderLayer {
    Tensor<R> ln_gamma, ln_beta;  // [d]
    Tensor<R> w1, b1;             // [d x d], [d]
    Tensor<R> w2, b2;             // [d x d], [d]
};

template <class R>
struct RefocuserParams {
    Tensor<R> sigma;                      // [d], initialized to all ones
    std::vector<DecoderLayer<R>> layers;  // B layers, theta
    bool use_residual = true;             // test mode can disable the residual path
    bool force_zero = false;              // test mode: decoder emits exact zeros

    void init(const EncoderConfig& cfg, uint64_t seed);
    std::vector<Tensor<R>*> trainable();    // sigma then theta
    std::vector<Tensor<R>*> theta();        // decoder tensors, fixed order
    std::vector<const Tensor<R>*> theta() const;
};

template <class R>
struct TokenSelection {
    Tensor<R> mask;     // [L], M_l = cos(z_l, sigma)
    Tensor<R> selected; // [L x d], M ⊙ z
};

template <class R>
TokenSelection<R> select_tokens(const Tensor<R>& z, const Tensor<R>& sigma);

// E[(Ms - E[Ms])^2] + E[(Mt - E[Mt])^2], population variance over positions.
template <class R>
Tensor<R> variance_term(const Tensor<R>& mask_s, const Tensor<R>& mask_t);

// Single-mask variant used when no simulated target exists.
template <class R>
Tensor<R> variance_term(const Tensor<R>& mask);

// Decoder layer b output e_b feeds encoder layer b in the second pass.
// Layer structure: LayerNorm -> Linear -> GELU -> Linear, token-wise, with a
// residual connection. A layer count differing from the encoder's is a
// configuration error.
template <class R>
RefocusParams<R> decode_refocus(const Tensor<R>& z_tilde, const RefocuserParams<R>& params,
                                int encoder_layers);

template <class R>
struct TwoPassResult {
    Tensor<R> zhat;       // [d] refocused embedding
    Tensor<R> mask;       // [L] task-relevant mask from pass 1
    Tensor<R> attention;  // [L] class-token attention from pass 2
};

template <class R>
TwoPassResult<R> two_pass_forward(const RasterImage& img, const AttentionParams<R>& backbone,
                                  const RefocuserParams<R>& refocuser);

enum class DisparityMode {
    Maximize,  // total = cls + align - lambda * var (the stated intent)
    Literal,   // total = cls + align + lambda * var
};

inline double disparity_sign(DisparityMode m) { return m == DisparityMode::Maximize ? -1.0 : 1.0; }

struct LossBreakdown {
    double cls = 0.0;
    double align = 0.0;
    double var = 0.0;
    double total = 0.0;
    double lambda = 0.0;
    bool align_present = true;
    bool prob_clamped = false;  // some p(y|x) hit the 1e-12 floor
};

template <class R>
struct BatchLossResult {
    Tensor<R> total;                     // scalar graph root
    LossBreakdown breakdown;
    std::vector<R> consistencies;        // per-sample attention consistency s
    bool degenerate_consistency = false; // any s came from a zero-norm map
};

// For every source sample: simulate a target (when align_enabled), run the
// two-pass forward on both, and assemble cls/align/var. Gradients flow into
// sigma and theta only (the backbone is frozen).
template <class R>
BatchLossResult<R> total_loss(const std::vector<const Sample*>& batch,
                              const AttentionParams<R>& backbone, const TextTable<R>& text,
                              const RefocuserParams<R>& refocuser, const AugmentRanges& ranges,
                              double lambda, DisparityMode disparity, bool align_enabled,
                              uint64_t step_seed);

}  // namespace sre
