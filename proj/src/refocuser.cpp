#include "sre/refocuser.hpp"

#include <cmath>

#include "sre/ensemble.hpp"

namespace sre {

template <class R>
void RefocuserParams<R>::init(const EncoderConfig& cfg, uint64_t seed) {
    int d = cfg.embed_dim;
    // "sigma is initialized to constant 1 for all positions"
    sigma = Tensor<R>::ones({d});
    sigma.set_requires_grad(true);
    Rng rng(mix_seed(seed, hash_str("refocuser")));
    double std1 = 1.0 / std::sqrt(static_cast<double>(d));
    layers.clear();
    for (int b = 0; b < cfg.layers; ++b) {
        DecoderLayer<R> dl;
        dl.ln_gamma = Tensor<R>::ones({d});
        dl.ln_beta = Tensor<R>::zeros({d});
        dl.w1 = Tensor<R>::randn({d, d}, rng, std1);
        dl.b1 = Tensor<R>::zeros({d});
        // small output scale so initial biases barely perturb the frozen encoder
        dl.w2 = Tensor<R>::randn({d, d}, rng, std1 * 0.1);
        dl.b2 = Tensor<R>::zeros({d});
        for (auto* t : {&dl.ln_gamma, &dl.ln_beta, &dl.w1, &dl.b1, &dl.w2, &dl.b2})
            t->set_requires_grad(true);
        layers.push_back(std::move(dl));
    }
}

template <class R>
std::vector<Tensor<R>*> RefocuserParams<R>::trainable() {
    std::vector<Tensor<R>*> ps = {&sigma};
    for (auto* t : theta()) ps.push_back(t);
    return ps;
}

template <class R>
std::vector<Tensor<R>*> RefocuserParams<R>::theta() {
    std::vector<Tensor<R>*> ps;
    for (auto& dl : layers)
        for (auto* t : {&dl.ln_gamma, &dl.ln_beta, &dl.w1, &dl.b1, &dl.w2, &dl.b2})
            ps.push_back(t);
    return ps;
}

template <class R>
std::vector<const Tensor<R>*> RefocuserParams<R>::theta() const {
    std::vector<const Tensor<R>*> ps;
    for (const auto& dl : layers)
        for (const auto* t : {&dl.ln_gamma, &dl.ln_beta, &dl.w1, &dl.b1, &dl.w2, &dl.b2})
            ps.push_back(t);
    return ps;
}

template <class R>
TokenSelection<R> select_tokens(const Tensor<R>& z, const Tensor<R>& sigma) {
    TokenSelection<R> out;
    out.mask = cosine_rows(z, sigma);
    out.selected = scale_rows(z, out.mask);
    return out;
}

template <class R>
Tensor<R> variance_term(const Tensor<R>& mask) {
    Tensor<R> centered = sub_broadcast(mask, mean(mask));
    return mean(mul(centered, centered));
}

template <class R>
Tensor<R> variance_term(const Tensor<R>& mask_s, const Tensor<R>& mask_t) {
    detail::require_same_shape(mask_s, mask_t, "variance_term");
    return add(variance_term(mask_s), variance_term(mask_t));
}

template <class R>
RefocusParams<R> decode_refocus(const Tensor<R>& z_tilde, const RefocuserParams<R>& params,
                                int encoder_layers) {
    if (static_cast<int>(params.layers.size()) != encoder_layers)
        throw ConfigError("decode_refocus: decoder has " + std::to_string(params.layers.size()) +
                          " layers, encoder has " + std::to_string(encoder_layers));
    RefocusParams<R> out;
    if (params.force_zero) {
        for (int b = 0; b < encoder_layers; ++b)
            out.e.push_back(Tensor<R>::zeros(z_tilde.shape()));
        return out;
    }
    Tensor<R> x = z_tilde;
    for (const auto& dl : params.layers) {
        Tensor<R> h = layer_norm(x, dl.ln_gamma, dl.ln_beta);
        Tensor<R> y = add_bias_row(matmul(gelu(add_bias_row(matmul(h, dl.w1), dl.b1)), dl.w2),
                                   dl.b2);
        x = params.use_residual ? add(x, y) : y;
        out.e.push_back(x);
    }
    return out;
}

template <class R>
TwoPassResult<R> two_pass_forward(const RasterImage& img, const AttentionParams<R>& backbone,
                                  const RefocuserParams<R>& refocuser) {
    // pass 1: plain encode, token selection, refocus parameters
    EncodeResult<R> pass1 = encode_image<R>(img, backbone);
    TokenSelection<R> sel = select_tokens(pass1.tokens, refocuser.sigma);
    RefocusParams<R> e = decode_refocus(sel.selected, refocuser, backbone.config.layers);
    // pass 2: encode with value biases
    EncodeResult<R> pass2 = encode_image<R>(img, backbone, &e);
    TwoPassResult<R> out;
    out.zhat = pass2.embedding;
    out.mask = sel.mask;
    out.attention = pass2.last_attention;
    return out;
}

template <class R>
BatchLossResult<R> total_loss(const std::vector<const Sample*>& batch,
                              const AttentionParams<R>& backbone, const TextTable<R>& text,
                              const RefocuserParams<R>& refocuser, const AugmentRanges& ranges,
                              double lambda, DisparityMode disparity, bool align_enabled,
                              uint64_t step_seed) {
    if (batch.empty()) throw ConfigError("total_loss: empty batch");
    BatchLossResult<R> res;
    std::vector<Tensor<R>> cls_terms, align_terms, var_terms;
    bool clamped = false;

    for (size_t i = 0; i < batch.size(); ++i) {
        const Sample& s = *batch[i];
        if (s.label < 0 || s.label >= text.num_classes())
            throw LabelError("total_loss: label " + std::to_string(s.label) + " outside table");
        TwoPassResult<R> src = two_pass_forward(s.image, backbone, refocuser);
        NllInfo info;
        cls_terms.push_back(nll_loss(class_logits(src.zhat, text), s.label, R(1e-12), &info));
        clamped = clamped || info.clamped;

        if (align_enabled) {
            Rng stream(mix_seed(step_seed, static_cast<uint64_t>(i)));
            RasterImage target = simulate_target(s.image, stream, ranges);
            TwoPassResult<R> tgt = two_pass_forward(target, backbone, refocuser);
            align_terms.push_back(nll_loss(class_logits(tgt.zhat, text), s.label, R(1e-12), &info));
            clamped = clamped || info.clamped;
            var_terms.push_back(variance_term(src.mask, tgt.mask));

            Tensor<R> a_hat_s = refine_attention(src.attention, src.mask);
            Tensor<R> a_hat_t = refine_attention(tgt.attention, tgt.mask);
            bool degenerate = false;
            res.consistencies.push_back(attention_consistency(a_hat_s, a_hat_t, &degenerate));
            res.degenerate_consistency = res.degenerate_consistency || degenerate;
        } else {
            var_terms.push_back(variance_term(src.mask));
        }
    }

    Tensor<R> cls = mean(stack(cls_terms));
    Tensor<R> var = mean(stack(var_terms));
    R sign_lambda = static_cast<R>(disparity_sign(disparity) * lambda);
    Tensor<R> total;
    if (align_enabled) {
        Tensor<R> align = mean(stack(align_terms));
        total = add(add(cls, align), scale(var, sign_lambda));
        res.breakdown.align = static_cast<double>(align.item());
        res.breakdown.align_present = true;
    } else {
        total = add(cls, scale(var, sign_lambda));
        res.breakdown.align_present = false;
    }
    res.total = total;
    res.breakdown.cls = static_cast<double>(cls.item());
    res.breakdown.var = static_cast<double>(var.item());
    res.breakdown.total = static_cast<double>(total.item());
    res.breakdown.lambda = lambda;
    res.breakdown.prob_clamped = clamped;
    if (!std::isfinite(res.breakdown.total))
        throw NumericError("total_loss: non-finite total loss");
    return res;
}

// explicit instantiations
template struct RefocuserParams<float>;
template struct RefocuserParams<double>;
template TokenSelection<float> select_tokens(const Tensor<float>&, const Tensor<float>&);
template TokenSelection<double> select_tokens(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> variance_term(const Tensor<float>&);
template Tensor<double> variance_term(const Tensor<double>&);
template Tensor<float> variance_term(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> variance_term(const Tensor<double>&, const Tensor<double>&);
template RefocusParams<float> decode_refocus(const Tensor<float>&, const RefocuserParams<float>&,
                                             int);
template RefocusParams<double> decode_refocus(const Tensor<double>&, const RefocuserParams<double>&,
                                              int);
template TwoPassResult<float> two_pass_forward(const RasterImage&, const AttentionParams<float>&,
                                               const RefocuserParams<float>&);
template TwoPassResult<double> two_pass_forward(const RasterImage&, const AttentionParams<double>&,
                                                const RefocuserParams<double>&);
template BatchLossResult<float> total_loss(const std::vector<const Sample*>&,
                                           const AttentionParams<float>&, const TextTable<float>&,
                                           const RefocuserParams<float>&, const AugmentRanges&,
                                           double, DisparityMode, bool, uint64_t);
template BatchLossResult<double> total_loss(const std::vector<const Sample*>&,
                                            const AttentionParams<double>&,
                                            const TextTable<double>&, const RefocuserParams<double>&,
                                            const AugmentRanges&, double, DisparityMode, bool,
                                            uint64_t);

}  // namespace sre
