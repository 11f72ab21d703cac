#pragma once

// Miniature frozen dual encoder: a patch-token transformer image encoder
// whose attention accepts per-layer value biases, and a learned-then-frozen
// per-class text embedding table. Contrastive pretraining makes zero-shot
// classification meaningful before any refocus training starts.

#include <string>
#include <vector>

#include "sre/dataset.hpp"
#include "sre/image.hpp"
#include "sre/tensor.hpp"

namespace sre {

struct EncoderConfig {
    int image_size = 32;
    int patch_size = 8;
    int layers = 4;     // B
    int embed_dim = 64;  // d
    int heads = 4;

    int num_patches() const {
        int g = image_size / patch_size;
        return g * g;
    }
    int tokens() const { return 1 + num_patches(); }  // L
    int head_dim() const { return embed_dim / heads; }
    void validate() const;
};

template <class R>
struct LayerParams {
    Tensor<R> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<R> ln_gamma, ln_beta;        // pre-MLP norm
    Tensor<R> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// The frozen attention parameter set E.
template <class R>
struct AttentionParams {
    EncoderConfig config;
    Tensor<R> patch_proj;   // [3*p*p x d]
    Tensor<R> patch_bias;   // [d]
    Tensor<R> class_token;  // [1 x d]
    Tensor<R> pos_embed;    // [L x d]
    std::vector<LayerParams<R>> layers;
    Tensor<R> ln_final_gamma, ln_final_beta;
    Tensor<R> out_proj;     // [d x d]

    void init(uint64_t seed);
    std::vector<Tensor<R>*> parameters();
    void set_requires_grad(bool b);
};

// Per-encoder-layer bias tensors e = {e_b}, added before the value projection.
template <class R>
struct RefocusParams {
    std::vector<Tensor<R>> e;  // B entries, each [L x d]
};

template <class R>
struct TextTable {
    Tensor<R> embeddings;  // [C x d], unit-norm rows once frozen
    R tau = R(0.07);
    std::vector<std::string> class_names;

    int num_classes() const { return embeddings.dim(0); }
    std::string prompt(int class_id) const {
        return "a photo of a " + class_names.at(static_cast<size_t>(class_id));
    }
};

template <class R>
struct EncodeResult {
    Tensor<R> embedding;       // [d] layer-normalized, projected class token
    Tensor<R> tokens;          // [L x d] final-layer token states
    Tensor<R> last_attention;  // [L] class-token row of head-averaged last-layer attention
};

template <class R>
struct LayerForward {
    Tensor<R> next;   // [L x d]
    Tensor<R> attn;   // [L x L] head-averaged post-softmax weights
    Tensor<R> value;  // [L x d] value matrix after projection (test hook)
};

// Q and K are computed from X_b; V from X_b + e_b. Residual, then a
// LayerNorm -> Linear -> GELU -> Linear MLP block with residual.
template <class R>
LayerForward<R> attention_layer_forward(const Tensor<R>& x, const LayerParams<R>& p,
                                        const Tensor<R>* e_b, int heads);

// Runs the B layers; when `refocus` is present layer b adds e_b to the value
// input. Shape mismatches between refocus and config raise ShapeError.
template <class R>
EncodeResult<R> encode_image(const RasterImage& img, const AttentionParams<R>& backbone,
                             const RefocusParams<R>* refocus = nullptr);

// Frozen unit-norm row u_c for the class prompt.
template <class R>
Tensor<R> encode_text(const TextTable<R>& table, int class_id);

// Cosine logits <u_c, zhat>/tau as a graph tensor.
template <class R>
Tensor<R> class_logits(const Tensor<R>& zhat, const TextTable<R>& text);

// softmax over class_logits; zero-norm zhat raises NumericError.
template <class R>
Tensor<R> predict_probs(const Tensor<R>& zhat, const TextTable<R>& text);

struct PretrainConfig {
    int epochs = 12;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double tau = 1.0;  // InfoNCE temperature during pretraining
    uint64_t seed = 0;
    double inference_tau = 0.07;  // frozen into the TextTable
};

template <class R>
struct PretrainedBackbone {
    AttentionParams<R> backbone;
    TextTable<R> text;
};

// Symmetric in-batch image/text InfoNCE over one-image-per-class batches.
// All parameters are frozen on return; text rows are unit-normalized.
// A corpus missing any class raises CoverageError.
template <class R>
PretrainedBackbone<R> pretrain_contrastive(const LabeledSet& corpus, const EncoderConfig& config,
                                           const PretrainConfig& pt);

// One InfoNCE step's loss value without updating anything (test hook).
template <class R>
R infonce_loss_value(const LabeledSet& corpus, const EncoderConfig& config, uint64_t seed,
                     double tau);

}  // namespace sre
