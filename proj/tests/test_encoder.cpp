#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "sre/bench.hpp"
#include "sre/encoder.hpp"

using namespace sre;

namespace {

RasterImage random_image(int size, uint64_t seed) {
    RasterImage img(size, size);
    Rng rng(seed);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform01());
    return img;
}

template <class R>
RefocusParams<R> zero_refocus(const EncoderConfig& cfg) {
    RefocusParams<R> e;
    for (int b = 0; b < cfg.layers; ++b)
        e.e.push_back(Tensor<R>::zeros({cfg.tokens(), cfg.embed_dim}));
    return e;
}

template <class R>
RefocusParams<R> random_refocus(const EncoderConfig& cfg, uint64_t seed) {
    RefocusParams<R> e;
    Rng rng(seed);
    for (int b = 0; b < cfg.layers; ++b)
        e.e.push_back(Tensor<R>::randn({cfg.tokens(), cfg.embed_dim}, rng, 0.3));
    return e;
}

}  // namespace

TEST_CASE("encoder config validation") {
    EncoderConfig cfg;
    CHECK(cfg.tokens() == 17);
    CHECK(cfg.head_dim() == 16);
    cfg.patch_size = 7;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.patch_size = 8;
    cfg.heads = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("zero refocus biases reproduce the plain forward bit for bit") {
    EncoderConfig cfg;
    AttentionParams<double> backbone;
    backbone.config = cfg;
    backbone.init(31);
    RasterImage img = random_image(cfg.image_size, 5);

    EncodeResult<double> plain = encode_image<double>(img, backbone);
    RefocusParams<double> zeros = zero_refocus<double>(cfg);
    EncodeResult<double> biased = encode_image<double>(img, backbone, &zeros);

    CHECK(plain.embedding.values() == biased.embedding.values());
    CHECK(plain.tokens.values() == biased.tokens.values());
    CHECK(plain.last_attention.values() == biased.last_attention.values());
}

TEST_CASE("encode_image is deterministic") {
    EncoderConfig cfg;
    AttentionParams<double> backbone;
    backbone.config = cfg;
    backbone.init(8);
    RasterImage img = random_image(cfg.image_size, 90);
    RefocusParams<double> e = random_refocus<double>(cfg, 17);

    EncodeResult<double> a = encode_image<double>(img, backbone, &e);
    EncodeResult<double> b = encode_image<double>(img, backbone, &e);
    CHECK(a.embedding.values() == b.embedding.values());
    CHECK(a.tokens.values() == b.tokens.values());
    CHECK(a.last_attention.values() == b.last_attention.values());
}

TEST_CASE("refocus shape mismatches raise a refocus-shape error") {
    EncoderConfig cfg;
    AttentionParams<double> backbone;
    backbone.config = cfg;
    backbone.init(3);
    RasterImage img = random_image(cfg.image_size, 4);

    RefocusParams<double> wrong_count = zero_refocus<double>(cfg);
    wrong_count.e.pop_back();
    CHECK_THROWS_AS(encode_image<double>(img, backbone, &wrong_count), ShapeError);

    RefocusParams<double> wrong_shape = zero_refocus<double>(cfg);
    wrong_shape.e[1] = Tensor<double>::zeros({3, cfg.embed_dim});
    CHECK_THROWS_AS(encode_image<double>(img, backbone, &wrong_shape), ShapeError);
}

TEST_CASE("single-layer single-head attention matches a hand-rolled oracle") {
    // L = 2 (one 4x4 patch + class token), d = 4, one head, hand-set weights
    EncoderConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 4;
    cfg.layers = 1;
    cfg.embed_dim = 4;
    cfg.heads = 1;
    AttentionParams<double> backbone;
    backbone.config = cfg;
    backbone.init(0);
    Rng rng(77);
    for (auto* p : backbone.parameters())
        for (auto& v : p->values()) v = rng.uniform(-0.5, 0.5);

    RasterImage img = random_image(4, 11);
    EncodeResult<double> res = encode_image<double>(img, backbone);

    // oracle: recompute X_1 and softmax(Q K^T / sqrt(d_k)) with plain loops
    int d = 4;
    std::vector<double> patch(static_cast<size_t>(3 * 16));
    int col = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) patch[static_cast<size_t>(col++)] = img.at(c, y, x);
    std::vector<double> x1(2 * 4);
    for (int j = 0; j < d; ++j) {
        x1[static_cast<size_t>(j)] = backbone.class_token.at(0, j) + backbone.pos_embed.at(0, j);
        double acc = backbone.patch_bias.at(j);
        for (int k = 0; k < 48; ++k)
            acc += patch[static_cast<size_t>(k)] * backbone.patch_proj.at(k, j);
        x1[static_cast<size_t>(4 + j)] = acc + backbone.pos_embed.at(1, j);
    }
    const auto& lp = backbone.layers[0];
    std::vector<double> q(2 * 4), k(2 * 4);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < d; ++j) {
            double accq = lp.bq.at(j), acck = lp.bk.at(j);
            for (int m = 0; m < d; ++m) {
                accq += x1[static_cast<size_t>(i * 4 + m)] * lp.wq.at(m, j);
                acck += x1[static_cast<size_t>(i * 4 + m)] * lp.wk.at(m, j);
            }
            q[static_cast<size_t>(i * 4 + j)] = accq;
            k[static_cast<size_t>(i * 4 + j)] = acck;
        }
    double scale = 1.0 / std::sqrt(4.0);
    std::vector<double> attn(2 * 2);
    for (int i = 0; i < 2; ++i) {
        double s0 = 0, s1 = 0;
        for (int m = 0; m < d; ++m) {
            s0 += q[static_cast<size_t>(i * 4 + m)] * k[static_cast<size_t>(m)];
            s1 += q[static_cast<size_t>(i * 4 + m)] * k[static_cast<size_t>(4 + m)];
        }
        s0 *= scale;
        s1 *= scale;
        double mx = std::max(s0, s1);
        double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
        attn[static_cast<size_t>(i * 2)] = e0 / (e0 + e1);
        attn[static_cast<size_t>(i * 2 + 1)] = e1 / (e0 + e1);
    }
    // class-token row of the (single-head) attention
    CHECK(std::abs(res.last_attention.at(0) - attn[0]) < 1e-10);
    CHECK(std::abs(res.last_attention.at(1) - attn[1]) < 1e-10);
}

TEST_CASE("attention layer: zero bias is the identity and V shifts linearly") {
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;  // L = 5
    cfg.layers = 1;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    AttentionParams<double> backbone;
    backbone.config = cfg;
    backbone.init(21);
    int L = cfg.tokens(), d = cfg.embed_dim;

    Rng rng(3);
    Tensor<double> x = Tensor<double>::randn({L, d}, rng, 0.7);
    Tensor<double> zero = Tensor<double>::zeros({L, d});
    Tensor<double> e = Tensor<double>::randn({L, d}, rng, 0.5);

    auto& lp = backbone.layers[0];
    LayerForward<double> base = attention_layer_forward<double>(x, lp, nullptr, cfg.heads);
    LayerForward<double> with_zero = attention_layer_forward<double>(x, lp, &zero, cfg.heads);
    CHECK(base.next.values() == with_zero.next.values());
    CHECK(base.attn.values() == with_zero.attn.values());

    // W_V = identity, b_v = 0: value stream shifts by exactly e
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) lp.wv.set(i, j, i == j ? 1.0 : 0.0);
    for (int j = 0; j < d; ++j) lp.bv.set(j, 0.0);
    LayerForward<double> v0 = attention_layer_forward<double>(x, lp, nullptr, cfg.heads);
    LayerForward<double> v1 = attention_layer_forward<double>(x, lp, &e, cfg.heads);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < d; ++j)
            CHECK(std::abs((v1.value.at(i, j) - v0.value.at(i, j)) - e.at(i, j)) < 1e-12);
    // attention weights do not react to the value bias
    CHECK(v0.attn.values() == v1.attn.values());
}

TEST_CASE("attention layer matches an independent per-head loop oracle") {
    EncoderConfig cfg;
    cfg.embed_dim = 6;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.image_size = 6;
    cfg.patch_size = 3;  // L = 5
    AttentionParams<double> backbone;
    backbone.config = cfg;
    backbone.init(99);
    int L = 5, d = 6, heads = 2, dk = 3;

    Rng rng(15);
    Tensor<double> x = Tensor<double>::randn({L, d}, rng, 0.8);
    Tensor<double> e = Tensor<double>::randn({L, d}, rng, 0.4);
    const auto& lp = backbone.layers[0];
    LayerForward<double> out = attention_layer_forward<double>(x, lp, &e, heads);

    // oracle: per-head loops over raw arrays
    auto matvec = [&](const Tensor<double>& w, const Tensor<double>& b,
                      const std::vector<double>& in, std::vector<double>& o) {
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < d; ++j) {
                double acc = b.at(j);
                for (int m = 0; m < d; ++m) acc += in[static_cast<size_t>(i * d + m)] * w.at(m, j);
                o[static_cast<size_t>(i * d + j)] = acc;
            }
    };
    std::vector<double> xin(static_cast<size_t>(L * d)), vin(static_cast<size_t>(L * d));
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < d; ++j) {
            xin[static_cast<size_t>(i * d + j)] = x.at(i, j);
            vin[static_cast<size_t>(i * d + j)] = x.at(i, j) + e.at(i, j);
        }
    std::vector<double> q(static_cast<size_t>(L * d)), k(static_cast<size_t>(L * d)),
        v(static_cast<size_t>(L * d));
    matvec(lp.wq, lp.bq, xin, q);
    matvec(lp.wk, lp.bk, xin, k);
    matvec(lp.wv, lp.bv, vin, v);

    std::vector<double> attn_avg(static_cast<size_t>(L * L), 0.0);
    std::vector<double> ctx(static_cast<size_t>(L * d), 0.0);
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < L; ++i) {
            std::vector<double> srow(static_cast<size_t>(L));
            double mx = -1e300;
            for (int j = 0; j < L; ++j) {
                double acc = 0;
                for (int m = 0; m < dk; ++m)
                    acc += q[static_cast<size_t>(i * d + h * dk + m)] *
                           k[static_cast<size_t>(j * d + h * dk + m)];
                srow[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(dk));
                mx = std::max(mx, srow[static_cast<size_t>(j)]);
            }
            double denom = 0;
            for (int j = 0; j < L; ++j) {
                srow[static_cast<size_t>(j)] = std::exp(srow[static_cast<size_t>(j)] - mx);
                denom += srow[static_cast<size_t>(j)];
            }
            for (int j = 0; j < L; ++j) {
                double a = srow[static_cast<size_t>(j)] / denom;
                attn_avg[static_cast<size_t>(i * L + j)] += a / heads;
                for (int m = 0; m < dk; ++m)
                    ctx[static_cast<size_t>(i * d + h * dk + m)] +=
                        a * v[static_cast<size_t>(j * d + h * dk + m)];
            }
        }
    }
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            CHECK(std::abs(out.attn.at(i, j) - attn_avg[static_cast<size_t>(i * L + j)]) < 1e-10);

    // finish the block: W_O, residual, pre-MLP LN, MLP
    std::vector<double> attn_out(static_cast<size_t>(L * d));
    matvec(lp.wo, lp.bo, ctx, attn_out);
    std::vector<double> x1v(static_cast<size_t>(L * d));
    for (size_t i = 0; i < x1v.size(); ++i) x1v[i] = xin[i] + attn_out[i];
    for (int i = 0; i < L; ++i) {
        double m = 0;
        for (int j = 0; j < d; ++j) m += x1v[static_cast<size_t>(i * d + j)];
        m /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) {
            double t = x1v[static_cast<size_t>(i * d + j)] - m;
            var += t * t;
        }
        var /= d;
        double inv = 1.0 / std::sqrt(var + 1e-5);
        std::vector<double> h1(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j)
            h1[static_cast<size_t>(j)] =
                (x1v[static_cast<size_t>(i * d + j)] - m) * inv * lp.ln_gamma.at(j) +
                lp.ln_beta.at(j);
        std::vector<double> mid(static_cast<size_t>(4 * d));
        for (int j = 0; j < 4 * d; ++j) {
            double acc = lp.mlp_b1.at(j);
            for (int mm = 0; mm < d; ++mm) acc += h1[static_cast<size_t>(mm)] * lp.mlp_w1.at(mm, j);
            mid[static_cast<size_t>(j)] =
                0.5 * acc * (1.0 + std::tanh(0.7978845608028654 *
                                             (acc + 0.044715 * acc * acc * acc)));
        }
        for (int j = 0; j < d; ++j) {
            double acc = lp.mlp_b2.at(j);
            for (int mm = 0; mm < 4 * d; ++mm)
                acc += mid[static_cast<size_t>(mm)] * lp.mlp_w2.at(mm, j);
            double expect = x1v[static_cast<size_t>(i * d + j)] + acc;
            CHECK(std::abs(out.next.at(i, j) - expect) < 1e-10);
        }
    }
}

TEST_CASE("attention rows sum to 1 at every layer with and without biases") {
    EncoderConfig cfg;
    AttentionParams<double> backbone;
    backbone.config = cfg;
    backbone.init(13);
    int L = cfg.tokens(), d = cfg.embed_dim;

    Rng rng(40);
    Tensor<double> x = Tensor<double>::randn({L, d}, rng, 0.6);
    for (int b = 0; b < cfg.layers; ++b) {
        Tensor<double> e = Tensor<double>::randn({L, d}, rng, 0.5);
        const Tensor<double>* biases[2] = {nullptr, &e};
        for (const Tensor<double>* bias : biases) {
            LayerForward<double> lf = attention_layer_forward<double>(
                x, backbone.layers[static_cast<size_t>(b)], bias, cfg.heads);
            for (int i = 0; i < L; ++i) {
                double s = 0;
                for (int j = 0; j < L; ++j) s += lf.attn.at(i, j);
                CHECK(std::abs(s - 1.0) < 1e-9);
            }
        }
        x = attention_layer_forward<double>(x, backbone.layers[static_cast<size_t>(b)], nullptr,
                                            cfg.heads)
                .next;
    }
}

TEST_CASE("predict_probs: alignment, symmetry, and the cosine+softmax oracle") {
    TextTable<double> text;
    text.class_names = {"a", "b", "c"};
    text.tau = 1.0;
    text.embeddings = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});

    // zhat aligned with class 1, others orthogonal: argmax is 1
    Tensor<double> z = Tensor<double>::from({3}, {0, 2, 0});
    Tensor<double> p = predict_probs(z, text);
    CHECK(p.at(1) > p.at(0));
    CHECK(p.at(1) > p.at(2));
    CHECK(std::abs(p.at(0) + p.at(1) + p.at(2) - 1.0) < 1e-9);

    // equidistant embedding: uniform probabilities
    Tensor<double> pu = predict_probs(Tensor<double>::from({3}, {1, 1, 1}), text);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(pu.at(i) - 1.0 / 3.0) < 1e-12);

    // random case vs independent cosine+softmax oracle, tau = 0.07, 5 classes
    TextTable<double> t5;
    t5.class_names = {"a", "b", "c", "d", "e"};
    t5.tau = 0.07;
    Rng rng(6);
    t5.embeddings = Tensor<double>::randn({5, 8}, rng);
    Tensor<double> zr = Tensor<double>::randn({8}, rng);
    Tensor<double> pr = predict_probs(zr, t5);
    std::vector<double> logits(5);
    for (int c = 0; c < 5; ++c) {
        double dot = 0, nz = 0, nu = 0;
        for (int j = 0; j < 8; ++j) {
            dot += zr.at(j) * t5.embeddings.at(c, j);
            nz += zr.at(j) * zr.at(j);
            nu += t5.embeddings.at(c, j) * t5.embeddings.at(c, j);
        }
        logits[static_cast<size_t>(c)] = dot / (std::sqrt(nz) * std::sqrt(nu)) / 0.07;
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0;
    for (double l : logits) denom += std::exp(l - mx);
    for (int c = 0; c < 5; ++c)
        CHECK(std::abs(pr.at(c) - std::exp(logits[static_cast<size_t>(c)] - mx) / denom) < 1e-10);

    // zero-norm embedding is a degenerate-embedding error
    CHECK_THROWS_AS(predict_probs(Tensor<double>::zeros({3}), text), NumericError);
}

TEST_CASE("encode_text: determinism and unknown labels") {
    TextTable<double> text;
    text.class_names = {"x", "y"};
    text.embeddings = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    Tensor<double> a = encode_text(text, 1);
    Tensor<double> b = encode_text(text, 1);
    CHECK(a.values() == b.values());
    CHECK(text.prompt(0) == "a photo of a x");
    CHECK_THROWS_AS(encode_text(text, 2), LabelError);
    CHECK_THROWS_AS(encode_text(text, -1), LabelError);
}

TEST_CASE("pretraining rejects a corpus that misses classes") {
    LabeledSet corpus;
    corpus.class_names = shape_class_names();
    Rng rng(1);
    DomainStyle style = pretrain_styles()[0];
    for (int i = 0; i < 8; ++i) {
        Sample s;
        s.image = render_shape_image(32, 0, style, rng);  // circles only
        s.label = 0;
        corpus.samples.push_back(std::move(s));
    }
    EncoderConfig cfg;
    PretrainConfig pt;
    pt.epochs = 1;
    CHECK_THROWS_AS(pretrain_contrastive<double>(corpus, cfg, pt), CoverageError);
}

TEST_CASE("InfoNCE at initialization is ln(batch) for a 5-class batch") {
    LabeledSet corpus = make_corpus(pretrain_styles(), 2, 32, 77);
    EncoderConfig cfg;
    double loss = infonce_loss_value<double>(corpus, cfg, 123, 1.0);
    CHECK(std::abs(loss - std::log(5.0)) < 0.1);
}

TEST_CASE("pretraining yields above-chance zero-shot accuracy on a held-out style") {
    EncoderConfig cfg;
    PretrainConfig pt;
    pt.epochs = 6;
    pt.lr = 1.5e-3;

    LabeledSet holdout = make_corpus({holdout_pretrain_style()}, 12, cfg.image_size, 555);
    int passes = 0;
    for (uint64_t seed : {0ull, 1ull, 2ull}) {
        LabeledSet corpus = make_corpus(pretrain_styles(), 12, cfg.image_size, seed);
        pt.seed = seed;
        PretrainedBackbone<double> pre = pretrain_contrastive<double>(corpus, cfg, pt);

        // text rows are unit-norm and classes separate after pretraining
        for (int c = 0; c < 5; ++c) {
            double n = 0;
            for (int j = 0; j < cfg.embed_dim; ++j)
                n += pre.text.embeddings.at(c, j) * pre.text.embeddings.at(c, j);
            CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
        }
        double max_cos = -1.0;
        for (int a = 0; a < 5; ++a)
            for (int b = a + 1; b < 5; ++b)
                max_cos = std::max(max_cos,
                                   cosine_similarity(encode_text(pre.text, a),
                                                     encode_text(pre.text, b)).item());
        CHECK(max_cos < 0.9);

        long correct = 0;
        for (const auto& s : holdout.samples) {
            EncodeResult<double> enc = encode_image<double>(s.image, pre.backbone);
            Tensor<double> probs = predict_probs(enc.embedding, pre.text);
            int best = 0;
            for (int c = 1; c < 5; ++c)
                if (probs.at(c) > probs.at(best)) best = c;
            if (best == s.label) ++correct;
        }
        double acc = static_cast<double>(correct) / static_cast<double>(holdout.samples.size());
        INFO("seed ", seed, " zero-shot accuracy ", acc);
        if (acc > 0.40) ++passes;
    }
    CHECK(passes == 3);
}
