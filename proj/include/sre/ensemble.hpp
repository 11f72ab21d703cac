#pragma once

// Ensemble stage: mask-refined attention maps, cross-domain attention
// consistency, and the similarity-gated exponential parameter-selection
// state machine.

#include <span>
#include <vector>

#include "sre/refocuser.hpp"
#include "sre/tensor.hpp"

namespace sre {

// A ⊙ M, element-wise. Works on detached values; no gradient flows through
// the ensemble gate.
template <class R>
Tensor<R> refine_attention(const Tensor<R>& attention, const Tensor<R>& mask);

// cos(Âs, Ât); zero-norm maps yield 0 with the degenerate flag.
template <class R>
R attention_consistency(const Tensor<R>& a_hat_s, const Tensor<R>& a_hat_t,
                        bool* degenerate = nullptr);

// Arithmetic mean of per-sample consistencies; empty batch is a contract
// violation.
template <class R>
R batch_consistency(std::span<const R> values);

template <class R>
struct EnsembleState {
    R s_bar = R(0);                        // running threshold, init 0
    std::vector<std::vector<R>> theta_a;   // zeros, parallel to RefocuserParams::theta()
    R omega = R(0.98);
    long accept_count = 0;

    void init_like(const RefocuserParams<R>& refocuser, R omega_value);
};

// Accepts strictly when s_t > s_bar: theta_a <- w*theta_a + (1-w)*theta_t and
// s_bar <- w*s_bar + (1-w)*s_t. Otherwise the state is untouched.
// `force_accept` implements the plain-EMA ablation by holding the gate open.
template <class R>
bool maybe_ensemble(EnsembleState<R>& state, const RefocuserParams<R>& theta_t, R s_t,
                    bool force_accept = false);

// Builds the inference-time refocuser: sigma carried over, decoder weights
// replaced by theta_a.
template <class R>
RefocuserParams<R> ensembled_refocuser(const RefocuserParams<R>& trained,
                                       const EnsembleState<R>& state);

}  // namespace sre
