#include "sre/ensemble.hpp"

namespace sre {

template <class R>
Tensor<R> refine_attention(const Tensor<R>& attention, const Tensor<R>& mask) {
    detail::require_same_shape(attention, mask, "refine_attention");
    Tensor<R> out = Tensor<R>::zeros(attention.shape());
    for (long i = 0; i < attention.numel(); ++i)
        out.values()[static_cast<size_t>(i)] =
            attention.values()[static_cast<size_t>(i)] * mask.values()[static_cast<size_t>(i)];
    return out;
}

template <class R>
R attention_consistency(const Tensor<R>& a_hat_s, const Tensor<R>& a_hat_t, bool* degenerate) {
    Tensor<R> s = cosine_similarity(a_hat_s.clone_detached(), a_hat_t.clone_detached());
    if (degenerate) *degenerate = s.degenerate();
    return s.item();
}

template <class R>
R batch_consistency(std::span<const R> values) {
    if (values.empty()) throw ConfigError("batch_consistency: empty batch");
    double acc = 0.0;
    for (R v : values) acc += static_cast<double>(v);
    return static_cast<R>(acc / static_cast<double>(values.size()));
}

template <class R>
void EnsembleState<R>::init_like(const RefocuserParams<R>& refocuser, R omega_value) {
    s_bar = R(0);
    omega = omega_value;
    accept_count = 0;
    theta_a.clear();
    for (const auto* t : refocuser.theta())
        theta_a.emplace_back(static_cast<size_t>(t->numel()), R(0));
}

template <class R>
bool maybe_ensemble(EnsembleState<R>& state, const RefocuserParams<R>& theta_t, R s_t,
                    bool force_accept) {
    if (!(force_accept || s_t > state.s_bar)) return false;
    auto tensors = theta_t.theta();
    if (tensors.size() != state.theta_a.size())
        throw ShapeError("maybe_ensemble: parameter count mismatch");
    R w = state.omega;
    for (size_t i = 0; i < tensors.size(); ++i) {
        const auto& src = tensors[i]->values();
        auto& dst = state.theta_a[i];
        if (src.size() != dst.size()) throw ShapeError("maybe_ensemble: parameter shape mismatch");
        for (size_t j = 0; j < dst.size(); ++j) dst[j] = w * dst[j] + (R(1) - w) * src[j];
    }
    state.s_bar = w * state.s_bar + (R(1) - w) * s_t;
    state.accept_count++;
    return true;
}

template <class R>
RefocuserParams<R> ensembled_refocuser(const RefocuserParams<R>& trained,
                                       const EnsembleState<R>& state) {
    RefocuserParams<R> out;
    out.sigma = trained.sigma.clone_detached();
    out.use_residual = trained.use_residual;
    out.layers.clear();
    for (const auto& dl : trained.layers) {
        DecoderLayer<R> copy;
        copy.ln_gamma = dl.ln_gamma.clone_detached();
        copy.ln_beta = dl.ln_beta.clone_detached();
        copy.w1 = dl.w1.clone_detached();
        copy.b1 = dl.b1.clone_detached();
        copy.w2 = dl.w2.clone_detached();
        copy.b2 = dl.b2.clone_detached();
        out.layers.push_back(std::move(copy));
    }
    auto slots = out.theta();
    if (slots.size() != state.theta_a.size())
        throw ShapeError("ensembled_refocuser: parameter count mismatch");
    for (size_t i = 0; i < slots.size(); ++i) {
        if (state.theta_a[i].size() != slots[i]->values().size())
            throw ShapeError("ensembled_refocuser: parameter shape mismatch");
        slots[i]->values() = state.theta_a[i];
    }
    return out;
}

// explicit instantiations
template Tensor<float> refine_attention(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> refine_attention(const Tensor<double>&, const Tensor<double>&);
template float attention_consistency(const Tensor<float>&, const Tensor<float>&, bool*);
template double attention_consistency(const Tensor<double>&, const Tensor<double>&, bool*);
template float batch_consistency(std::span<const float>);
template double batch_consistency(std::span<const double>);
template struct EnsembleState<float>;
template struct EnsembleState<double>;
template bool maybe_ensemble(EnsembleState<float>&, const RefocuserParams<float>&, float, bool);
template bool maybe_ensemble(EnsembleState<double>&, const RefocuserParams<double>&, double, bool);
template RefocuserParams<float> ensembled_refocuser(const RefocuserParams<float>&,
                                                    const EnsembleState<float>&);
template RefocuserParams<double> ensembled_refocuser(const RefocuserParams<double>&,
                                                     const EnsembleState<double>&);

}  // namespace sre
