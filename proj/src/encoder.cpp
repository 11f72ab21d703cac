#include "sre/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "sre/optimizer.hpp"

namespace sre {

void EncoderConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || layers <= 0 || embed_dim <= 0 || heads <= 0)
        throw ConfigError("encoder config: all dimensions must be positive");
    if (image_size % patch_size != 0)
        throw ConfigError("encoder config: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % heads != 0)
        throw ConfigError("encoder config: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by heads " + std::to_string(heads));
}

template <class R>
void AttentionParams<R>::init(uint64_t seed) {
    config.validate();
    Rng rng(mix_seed(seed, hash_str("backbone")));
    int d = config.embed_dim;
    int pd = 3 * config.patch_size * config.patch_size;
    int L = config.tokens();
    double w_std = 0.02;
    double proj_std = 1.0 / std::sqrt(static_cast<double>(d));

    patch_proj = Tensor<R>::randn({pd, d}, rng, proj_std);
    patch_bias = Tensor<R>::zeros({d});
    class_token = Tensor<R>::randn({1, d}, rng, w_std);
    pos_embed = Tensor<R>::randn({L, d}, rng, w_std);
    layers.clear();
    for (int b = 0; b < config.layers; ++b) {
        LayerParams<R> lp;
        lp.wq = Tensor<R>::randn({d, d}, rng, proj_std);
        lp.bq = Tensor<R>::zeros({d});
        lp.wk = Tensor<R>::randn({d, d}, rng, proj_std);
        lp.bk = Tensor<R>::zeros({d});
        lp.wv = Tensor<R>::randn({d, d}, rng, proj_std);
        lp.bv = Tensor<R>::zeros({d});
        lp.wo = Tensor<R>::randn({d, d}, rng, proj_std * 0.5);
        lp.bo = Tensor<R>::zeros({d});
        lp.ln_gamma = Tensor<R>::ones({d});
        lp.ln_beta = Tensor<R>::zeros({d});
        lp.mlp_w1 = Tensor<R>::randn({d, 4 * d}, rng, proj_std);
        lp.mlp_b1 = Tensor<R>::zeros({4 * d});
        lp.mlp_w2 = Tensor<R>::randn({4 * d, d}, rng, proj_std * 0.5);
        lp.mlp_b2 = Tensor<R>::zeros({d});
        layers.push_back(std::move(lp));
    }
    ln_final_gamma = Tensor<R>::ones({d});
    ln_final_beta = Tensor<R>::zeros({d});
    out_proj = Tensor<R>::randn({d, d}, rng, proj_std);
}

template <class R>
std::vector<Tensor<R>*> AttentionParams<R>::parameters() {
    std::vector<Tensor<R>*> ps = {&patch_proj, &patch_bias, &class_token, &pos_embed,
                                  &ln_final_gamma, &ln_final_beta, &out_proj};
    for (auto& lp : layers) {
        for (auto* t : {&lp.wq, &lp.bq, &lp.wk, &lp.bk, &lp.wv, &lp.bv, &lp.wo, &lp.bo,
                        &lp.ln_gamma, &lp.ln_beta, &lp.mlp_w1, &lp.mlp_b1, &lp.mlp_w2,
                        &lp.mlp_b2})
            ps.push_back(t);
    }
    return ps;
}

template <class R>
void AttentionParams<R>::set_requires_grad(bool b) {
    for (auto* p : parameters()) p->set_requires_grad(b);
}

template <class R>
LayerForward<R> attention_layer_forward(const Tensor<R>& x, const LayerParams<R>& p,
                                        const Tensor<R>* e_b, int heads) {
    int L = x.dim(0);
    int d = x.dim(1);
    int dk = d / heads;
    R inv_sqrt_dk = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dk)));

    Tensor<R> q = add_bias_row(matmul(x, p.wq), p.bq);
    Tensor<R> k = add_bias_row(matmul(x, p.wk), p.bk);
    Tensor<R> v_in = e_b ? add(x, *e_b) : x;
    Tensor<R> v = add_bias_row(matmul(v_in, p.wv), p.bv);

    std::vector<Tensor<R>> ctx_heads;
    Tensor<R> attn_sum;
    for (int h = 0; h < heads; ++h) {
        Tensor<R> qh = slice_cols(q, h * dk, (h + 1) * dk);
        Tensor<R> kh = slice_cols(k, h * dk, (h + 1) * dk);
        Tensor<R> vh = slice_cols(v, h * dk, (h + 1) * dk);
        Tensor<R> scores = scale(matmul_nt(qh, kh), inv_sqrt_dk);
        Tensor<R> attn = softmax(scores, -1);
        ctx_heads.push_back(matmul(attn, vh));
        attn_sum = (h == 0) ? attn : add(attn_sum, attn);
    }
    Tensor<R> attn_avg = scale(attn_sum, static_cast<R>(1.0 / heads));

    Tensor<R> attn_out = add_bias_row(matmul(concat_cols(ctx_heads), p.wo), p.bo);
    Tensor<R> x1 = add(x, attn_out);
    Tensor<R> h1 = layer_norm(x1, p.ln_gamma, p.ln_beta);
    Tensor<R> m = add_bias_row(matmul(gelu(add_bias_row(matmul(h1, p.mlp_w1), p.mlp_b1)), p.mlp_w2),
                               p.mlp_b2);
    LayerForward<R> out;
    out.next = add(x1, m);
    out.attn = attn_avg;
    out.value = v;
    (void)L;
    return out;
}

namespace {

// [P x 3*p*p] patch matrix; rows ordered row-major over the patch grid,
// columns ordered channel-major then row-major within the patch.
template <class R>
Tensor<R> extract_patches(const RasterImage& img, const EncoderConfig& cfg) {
    if (img.height != cfg.image_size || img.width != cfg.image_size)
        throw ShapeError("encode_image: image " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + " does not match configured size " +
                         std::to_string(cfg.image_size));
    int p = cfg.patch_size;
    int grid = cfg.image_size / p;
    int pd = 3 * p * p;
    Tensor<R> out = Tensor<R>::zeros({grid * grid, pd});
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            int r = gy * grid + gx;
            int col = 0;
            for (int c = 0; c < 3; ++c)
                for (int yy = 0; yy < p; ++yy)
                    for (int xx = 0; xx < p; ++xx)
                        out.set(r, col++, static_cast<R>(img.at(c, gy * p + yy, gx * p + xx)));
        }
    return out;
}

}  // namespace

template <class R>
EncodeResult<R> encode_image(const RasterImage& img, const AttentionParams<R>& backbone,
                             const RefocusParams<R>* refocus) {
    const EncoderConfig& cfg = backbone.config;
    int L = cfg.tokens();
    int d = cfg.embed_dim;
    if (refocus) {
        if (static_cast<int>(refocus->e.size()) != cfg.layers)
            throw ShapeError("refocus params: " + std::to_string(refocus->e.size()) +
                             " layers, encoder has " + std::to_string(cfg.layers));
        for (const auto& e : refocus->e)
            if (e.shape() != Shape{L, d})
                throw ShapeError("refocus params: layer bias " + shape_str(e.shape()) +
                                 ", expected " + shape_str({L, d}));
    }

    Tensor<R> patches = extract_patches<R>(img, cfg);
    Tensor<R> x = add(concat_rows(backbone.class_token,
                                  add_bias_row(matmul(patches, backbone.patch_proj),
                                               backbone.patch_bias)),
                      backbone.pos_embed);
    Tensor<R> last_attn;
    for (int b = 0; b < cfg.layers; ++b) {
        const Tensor<R>* e_b = refocus ? &refocus->e[static_cast<size_t>(b)] : nullptr;
        LayerForward<R> lf = attention_layer_forward(x, backbone.layers[static_cast<size_t>(b)],
                                                     e_b, cfg.heads);
        x = lf.next;
        if (b == cfg.layers - 1) last_attn = lf.attn;
    }
    EncodeResult<R> res;
    res.tokens = layer_norm(x, backbone.ln_final_gamma, backbone.ln_final_beta);
    res.embedding = row(matmul(slice_rows(res.tokens, 0, 1), backbone.out_proj), 0);
    res.last_attention = row(last_attn, 0);
    return res;
}

template <class R>
Tensor<R> encode_text(const TextTable<R>& table, int class_id) {
    if (class_id < 0 || class_id >= table.num_classes())
        throw LabelError("encode_text: unknown class id " + std::to_string(class_id) + " (have " +
                         std::to_string(table.num_classes()) + " classes)");
    return row(table.embeddings, class_id);
}

template <class R>
Tensor<R> class_logits(const Tensor<R>& zhat, const TextTable<R>& text) {
    Tensor<R> cos = cosine_rows(text.embeddings, zhat);
    if (cos.degenerate()) throw NumericError("predict_probs: degenerate (zero-norm) embedding");
    return scale(cos, static_cast<R>(1.0) / text.tau);
}

template <class R>
Tensor<R> predict_probs(const Tensor<R>& zhat, const TextTable<R>& text) {
    return softmax(class_logits(zhat, text), -1);
}

namespace {

template <class R>
void check_coverage(const LabeledSet& corpus, int num_classes) {
    std::vector<int> counts(static_cast<size_t>(num_classes), 0);
    for (const auto& s : corpus.samples) {
        if (s.label < 0 || s.label >= num_classes)
            throw LabelError("pretrain: label " + std::to_string(s.label) + " out of range");
        counts[static_cast<size_t>(s.label)]++;
    }
    for (int c = 0; c < num_classes; ++c)
        if (counts[static_cast<size_t>(c)] == 0)
            throw CoverageError("pretrain: corpus has no images of class '" +
                                corpus.class_names[static_cast<size_t>(c)] + "'");
    if (num_classes < 2) throw CoverageError("pretrain: at least 2 classes required");
}

// One-image-per-class batches; pools reshuffle each epoch. The logit scale
// is a trainable parameter exp(s), the stand-in for CLIP's learned
// temperature; s starts at 0 so the very first batch sees unit scale.
template <class R>
Tensor<R> infonce_batch_loss(const std::vector<const Sample*>& batch,
                             AttentionParams<R>& backbone, Tensor<R>& text_embeddings,
                             Tensor<R>& log_scale) {
    int n = static_cast<int>(batch.size());
    Tensor<R> z_rows;
    for (int i = 0; i < n; ++i) {
        EncodeResult<R> enc = encode_image<R>(batch[static_cast<size_t>(i)]->image, backbone);
        Tensor<R> zi = slice_rows(matmul(slice_rows(enc.tokens, 0, 1), backbone.out_proj), 0, 1);
        z_rows = (i == 0) ? zi : concat_rows(z_rows, zi);
    }
    Tensor<R> zn = l2_normalize_rows(z_rows);
    Tensor<R> un = l2_normalize_rows(text_embeddings);
    // batch[i] carries class i by construction
    Tensor<R> logits = mul_broadcast_scalar(matmul_nt(zn, un), exp_elem(log_scale));
    Tensor<R> logits_t = transpose(logits);
    std::vector<Tensor<R>> terms;
    for (int i = 0; i < n; ++i) {
        terms.push_back(nll_loss(row(logits, i), i));
        terms.push_back(nll_loss(row(logits_t, i), i));
    }
    return mean(stack(terms));
}

}  // namespace

template <class R>
R infonce_loss_value(const LabeledSet& corpus, const EncoderConfig& config, uint64_t seed,
                     double tau) {
    int C = static_cast<int>(corpus.class_names.size());
    check_coverage<R>(corpus, C);
    AttentionParams<R> backbone;
    backbone.config = config;
    backbone.init(seed);
    backbone.set_requires_grad(false);
    Rng rng(mix_seed(seed, hash_str("text")));
    Tensor<R> text = Tensor<R>::randn({C, config.embed_dim}, rng, 0.1);
    Tensor<R> log_scale = Tensor<R>::scalar(static_cast<R>(std::log(1.0 / tau)));
    std::vector<const Sample*> batch(static_cast<size_t>(C), nullptr);
    for (const auto& s : corpus.samples)
        if (!batch[static_cast<size_t>(s.label)]) batch[static_cast<size_t>(s.label)] = &s;
    return infonce_batch_loss<R>(batch, backbone, text, log_scale).item();
}

template <class R>
PretrainedBackbone<R> pretrain_contrastive(const LabeledSet& corpus, const EncoderConfig& config,
                                           const PretrainConfig& pt) {
    int C = static_cast<int>(corpus.class_names.size());
    check_coverage<R>(corpus, C);

    PretrainedBackbone<R> out;
    out.backbone.config = config;
    out.backbone.init(pt.seed);
    out.backbone.set_requires_grad(true);
    Rng rng(mix_seed(pt.seed, hash_str("pretrain")));
    out.text.embeddings = Tensor<R>::randn({C, config.embed_dim}, rng, 0.1);
    out.text.embeddings.set_requires_grad(true);
    out.text.tau = static_cast<R>(pt.inference_tau);
    out.text.class_names = corpus.class_names;

    std::vector<std::vector<const Sample*>> pools(static_cast<size_t>(C));
    for (const auto& s : corpus.samples) pools[static_cast<size_t>(s.label)].push_back(&s);
    size_t steps_per_epoch = 0;
    for (const auto& p : pools) steps_per_epoch = std::max(steps_per_epoch, p.size());

    Tensor<R> log_scale = Tensor<R>::scalar(static_cast<R>(std::log(1.0 / pt.tau)));
    log_scale.set_requires_grad(true);
    std::vector<Tensor<R>*> params = out.backbone.parameters();
    params.push_back(&out.text.embeddings);
    params.push_back(&log_scale);
    AdamWConfig acfg;
    acfg.weight_decay = pt.weight_decay;
    AdamW<R> opt({{params, pt.lr}}, acfg);
    const R max_log_scale = static_cast<R>(std::log(100.0));

    for (int epoch = 0; epoch < pt.epochs; ++epoch) {
        for (auto& p : pools) rng.shuffle(p);
        for (size_t k = 0; k < steps_per_epoch; ++k) {
            std::vector<const Sample*> batch;
            batch.reserve(static_cast<size_t>(C));
            for (int c = 0; c < C; ++c)
                batch.push_back(pools[static_cast<size_t>(c)][k % pools[static_cast<size_t>(c)].size()]);
            opt.zero_grad();
            Tensor<R> loss =
                infonce_batch_loss<R>(batch, out.backbone, out.text.embeddings, log_scale);
            if (!std::isfinite(static_cast<double>(loss.item())))
                throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch));
            backward(loss);
            opt.step();
            if (log_scale.values()[0] > max_log_scale) log_scale.values()[0] = max_log_scale;
        }
    }

    // freeze and normalize text rows to unit norm
    out.backbone.set_requires_grad(false);
    out.text.embeddings.set_requires_grad(false);
    auto& emb = out.text.embeddings.values();
    int d = config.embed_dim;
    for (int c = 0; c < C; ++c) {
        R* rowp = emb.data() + static_cast<size_t>(c) * d;
        double norm = 0.0;
        for (int j = 0; j < d; ++j) norm += static_cast<double>(rowp[j]) * rowp[j];
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw NumericError("pretrain: zero-norm text embedding");
        for (int j = 0; j < d; ++j) rowp[j] = static_cast<R>(rowp[j] / norm);
    }
    return out;
}

// explicit instantiations
template struct AttentionParams<float>;
template struct AttentionParams<double>;
template LayerForward<float> attention_layer_forward(const Tensor<float>&, const LayerParams<float>&,
                                                     const Tensor<float>*, int);
template LayerForward<double> attention_layer_forward(const Tensor<double>&,
                                                      const LayerParams<double>&,
                                                      const Tensor<double>*, int);
template EncodeResult<float> encode_image(const RasterImage&, const AttentionParams<float>&,
                                          const RefocusParams<float>*);
template EncodeResult<double> encode_image(const RasterImage&, const AttentionParams<double>&,
                                           const RefocusParams<double>*);
template Tensor<float> encode_text(const TextTable<float>&, int);
template Tensor<double> encode_text(const TextTable<double>&, int);
template Tensor<float> class_logits(const Tensor<float>&, const TextTable<float>&);
template Tensor<double> class_logits(const Tensor<double>&, const TextTable<double>&);
template Tensor<float> predict_probs(const Tensor<float>&, const TextTable<float>&);
template Tensor<double> predict_probs(const Tensor<double>&, const TextTable<double>&);
template PretrainedBackbone<float> pretrain_contrastive(const LabeledSet&, const EncoderConfig&,
                                                        const PretrainConfig&);
template PretrainedBackbone<double> pretrain_contrastive(const LabeledSet&, const EncoderConfig&,
                                                         const PretrainConfig&);
template float infonce_loss_value<float>(const LabeledSet&, const EncoderConfig&, uint64_t, double);
template double infonce_loss_value<double>(const LabeledSet&, const EncoderConfig&, uint64_t,
                                           double);

}  // namespace sre
