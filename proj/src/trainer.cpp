#include "sre/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "sre/optimizer.hpp"

namespace sre {

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::ZS: return "ZS";
        case Mode::AR: return "AR";
        case Mode::SR: return "SR";
        case Mode::SR_EMA: return "SR_EMA";
        case Mode::SRE: return "SRE";
    }
    return "?";
}

Mode mode_from_name(const std::string& s) {
    if (s == "ZS") return Mode::ZS;
    if (s == "AR") return Mode::AR;
    if (s == "SR") return Mode::SR;
    if (s == "SR_EMA" || s == "SR+EMA") return Mode::SR_EMA;
    if (s == "SRE") return Mode::SRE;
    throw ConfigError("unknown mode '" + s + "' (expected ZS, AR, SR, SR_EMA or SRE)");
}

std::string precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision precision_from_name(const std::string& s) {
    if (s == "f32") return Precision::F32;
    if (s == "f64") return Precision::F64;
    throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

std::string disparity_name(DisparityMode m) {
    return m == DisparityMode::Maximize ? "maximize" : "literal";
}

DisparityMode disparity_from_name(const std::string& s) {
    if (s == "maximize") return DisparityMode::Maximize;
    if (s == "literal") return DisparityMode::Literal;
    throw ConfigError("unknown disparity mode '" + s + "' (expected maximize or literal)");
}

void TrainConfig::validate() const {
    if (iterations < 0 || batch_size <= 0 || accumulation_steps <= 0)
        throw ConfigError("train config: iterations/batch_size/accumulation_steps must be positive");
    if (lr_decoder <= 0 || lr_prompt <= 0 || weight_decay < 0 || lambda < 0)
        throw ConfigError("train config: learning rates must be positive, weights non-negative");
    if (omega <= 0 || omega >= 1) throw ConfigError("train config: omega must lie in (0,1)");
    if (checkpoint_interval <= 0) throw ConfigError("train config: checkpoint_interval must be positive");
    if (val_fraction <= 0 || val_fraction >= 1)
        throw ConfigError("train config: val_fraction must lie in (0,1)");
    encoder.validate();
}

// --- checkpoint packing -----------------------------------------------------

namespace {

template <class R>
std::vector<float> to_floats(const Tensor<R>& t) {
    std::vector<float> out(t.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(t.values()[i]);
    return out;
}

template <class R>
void put_tensor(Checkpoint& ckpt, const std::string& name, const Tensor<R>& t) {
    std::vector<uint64_t> ext;
    for (int d : t.shape()) ext.push_back(static_cast<uint64_t>(d));
    ckpt.put(name, std::move(ext), to_floats(t));
}

template <class R>
Tensor<R> get_tensor(const Checkpoint& ckpt, const std::string& name) {
    const auto& e = ckpt.entry(name);
    Shape shape;
    for (uint64_t ext : e.extents) shape.push_back(static_cast<int>(ext));
    std::vector<R> vals(e.data.size());
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<R>(e.data[i]);
    return Tensor<R>::from(std::move(shape), std::move(vals));
}

std::string layer_prefix(const std::string& base, int b) {
    return base + ".layer" + std::to_string(b) + ".";
}

EncoderConfig encoder_config_from(const Checkpoint& ckpt) {
    EncoderConfig cfg;
    cfg.image_size = static_cast<int>(ckpt.scalar("config.image_size"));
    cfg.patch_size = static_cast<int>(ckpt.scalar("config.patch_size"));
    cfg.layers = static_cast<int>(ckpt.scalar("config.layers"));
    cfg.embed_dim = static_cast<int>(ckpt.scalar("config.embed_dim"));
    cfg.heads = static_cast<int>(ckpt.scalar("config.heads"));
    cfg.validate();
    return cfg;
}

void put_encoder_config(Checkpoint& ckpt, const EncoderConfig& cfg) {
    ckpt.put_scalar("config.image_size", cfg.image_size);
    ckpt.put_scalar("config.patch_size", cfg.patch_size);
    ckpt.put_scalar("config.layers", cfg.layers);
    ckpt.put_scalar("config.embed_dim", cfg.embed_dim);
    ckpt.put_scalar("config.heads", cfg.heads);
}

std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (size_t i = 0; i < names.size(); ++i) {
        if (i) out.push_back('\n');
        out += names[i];
    }
    return out;
}

std::vector<std::string> split_names(const std::string& joined) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : joined) {
        if (c == '\n') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

template <class R>
void pack_backbone(Checkpoint& ckpt, const AttentionParams<R>& backbone, const TextTable<R>& text) {
    put_encoder_config(ckpt, backbone.config);
    put_tensor(ckpt, "backbone.patch_proj", backbone.patch_proj);
    put_tensor(ckpt, "backbone.patch_bias", backbone.patch_bias);
    put_tensor(ckpt, "backbone.class_token", backbone.class_token);
    put_tensor(ckpt, "backbone.pos_embed", backbone.pos_embed);
    for (int b = 0; b < backbone.config.layers; ++b) {
        const auto& lp = backbone.layers[static_cast<size_t>(b)];
        std::string p = layer_prefix("backbone", b);
        put_tensor(ckpt, p + "wq", lp.wq);
        put_tensor(ckpt, p + "bq", lp.bq);
        put_tensor(ckpt, p + "wk", lp.wk);
        put_tensor(ckpt, p + "bk", lp.bk);
        put_tensor(ckpt, p + "wv", lp.wv);
        put_tensor(ckpt, p + "bv", lp.bv);
        put_tensor(ckpt, p + "wo", lp.wo);
        put_tensor(ckpt, p + "bo", lp.bo);
        put_tensor(ckpt, p + "ln_gamma", lp.ln_gamma);
        put_tensor(ckpt, p + "ln_beta", lp.ln_beta);
        put_tensor(ckpt, p + "mlp_w1", lp.mlp_w1);
        put_tensor(ckpt, p + "mlp_b1", lp.mlp_b1);
        put_tensor(ckpt, p + "mlp_w2", lp.mlp_w2);
        put_tensor(ckpt, p + "mlp_b2", lp.mlp_b2);
    }
    put_tensor(ckpt, "backbone.ln_final_gamma", backbone.ln_final_gamma);
    put_tensor(ckpt, "backbone.ln_final_beta", backbone.ln_final_beta);
    put_tensor(ckpt, "backbone.out_proj", backbone.out_proj);
    put_tensor(ckpt, "text.embeddings", text.embeddings);
    ckpt.put_scalar("text.tau", static_cast<double>(text.tau));
    ckpt.put_string("meta.class_names", join_names(text.class_names));
}

template <class R>
void unpack_backbone(const Checkpoint& ckpt, AttentionParams<R>& backbone, TextTable<R>& text) {
    backbone.config = encoder_config_from(ckpt);
    backbone.patch_proj = get_tensor<R>(ckpt, "backbone.patch_proj");
    backbone.patch_bias = get_tensor<R>(ckpt, "backbone.patch_bias");
    backbone.class_token = get_tensor<R>(ckpt, "backbone.class_token");
    backbone.pos_embed = get_tensor<R>(ckpt, "backbone.pos_embed");
    backbone.layers.clear();
    for (int b = 0; b < backbone.config.layers; ++b) {
        LayerParams<R> lp;
        std::string p = layer_prefix("backbone", b);
        lp.wq = get_tensor<R>(ckpt, p + "wq");
        lp.bq = get_tensor<R>(ckpt, p + "bq");
        lp.wk = get_tensor<R>(ckpt, p + "wk");
        lp.bk = get_tensor<R>(ckpt, p + "bk");
        lp.wv = get_tensor<R>(ckpt, p + "wv");
        lp.bv = get_tensor<R>(ckpt, p + "bv");
        lp.wo = get_tensor<R>(ckpt, p + "wo");
        lp.bo = get_tensor<R>(ckpt, p + "bo");
        lp.ln_gamma = get_tensor<R>(ckpt, p + "ln_gamma");
        lp.ln_beta = get_tensor<R>(ckpt, p + "ln_beta");
        lp.mlp_w1 = get_tensor<R>(ckpt, p + "mlp_w1");
        lp.mlp_b1 = get_tensor<R>(ckpt, p + "mlp_b1");
        lp.mlp_w2 = get_tensor<R>(ckpt, p + "mlp_w2");
        lp.mlp_b2 = get_tensor<R>(ckpt, p + "mlp_b2");
        backbone.layers.push_back(std::move(lp));
    }
    backbone.ln_final_gamma = get_tensor<R>(ckpt, "backbone.ln_final_gamma");
    backbone.ln_final_beta = get_tensor<R>(ckpt, "backbone.ln_final_beta");
    backbone.out_proj = get_tensor<R>(ckpt, "backbone.out_proj");
    text.embeddings = get_tensor<R>(ckpt, "text.embeddings");
    text.tau = static_cast<R>(ckpt.scalar("text.tau"));
    text.class_names = split_names(ckpt.string_value("meta.class_names"));
}

namespace {

const char* kDecoderTensorNames[6] = {"ln_gamma", "ln_beta", "w1", "b1", "w2", "b2"};

}  // namespace

template <class R>
void pack_refocuser(Checkpoint& ckpt, const RefocuserParams<R>& refocuser) {
    put_tensor(ckpt, "refocuser.sigma", refocuser.sigma);
    for (size_t b = 0; b < refocuser.layers.size(); ++b) {
        const auto& dl = refocuser.layers[b];
        std::string p = layer_prefix("refocuser.theta", static_cast<int>(b));
        const Tensor<R>* ts[6] = {&dl.ln_gamma, &dl.ln_beta, &dl.w1, &dl.b1, &dl.w2, &dl.b2};
        for (int i = 0; i < 6; ++i) put_tensor(ckpt, p + kDecoderTensorNames[i], *ts[i]);
    }
}

template <class R>
void unpack_refocuser(const Checkpoint& ckpt, RefocuserParams<R>& refocuser,
                      const EncoderConfig& cfg) {
    refocuser.sigma = get_tensor<R>(ckpt, "refocuser.sigma");
    refocuser.layers.clear();
    for (int b = 0; b < cfg.layers; ++b) {
        DecoderLayer<R> dl;
        std::string p = layer_prefix("refocuser.theta", b);
        dl.ln_gamma = get_tensor<R>(ckpt, p + "ln_gamma");
        dl.ln_beta = get_tensor<R>(ckpt, p + "ln_beta");
        dl.w1 = get_tensor<R>(ckpt, p + "w1");
        dl.b1 = get_tensor<R>(ckpt, p + "b1");
        dl.w2 = get_tensor<R>(ckpt, p + "w2");
        dl.b2 = get_tensor<R>(ckpt, p + "b2");
        refocuser.layers.push_back(std::move(dl));
    }
}

template <class R>
void pack_ensemble(Checkpoint& ckpt, const EnsembleState<R>& state) {
    ckpt.put_scalar("ensemble.s_bar", static_cast<double>(state.s_bar));
    ckpt.put_scalar("ensemble.accept_count", static_cast<double>(state.accept_count));
    size_t slot = 0;
    int layer = 0;
    while (slot < state.theta_a.size()) {
        std::string p = layer_prefix("ensemble.theta_a", layer);
        for (int i = 0; i < 6 && slot < state.theta_a.size(); ++i, ++slot) {
            std::vector<float> data(state.theta_a[slot].size());
            for (size_t j = 0; j < data.size(); ++j)
                data[j] = static_cast<float>(state.theta_a[slot][j]);
            ckpt.put(p + kDecoderTensorNames[i], {static_cast<uint64_t>(data.size())},
                     std::move(data));
        }
        ++layer;
    }
}

template <class R>
void unpack_ensemble(const Checkpoint& ckpt, EnsembleState<R>& state,
                     const RefocuserParams<R>& like) {
    state.s_bar = static_cast<R>(ckpt.scalar("ensemble.s_bar"));
    state.accept_count = static_cast<long>(ckpt.scalar("ensemble.accept_count"));
    state.theta_a.clear();
    size_t want = like.theta().size();
    size_t slot = 0;
    int layer = 0;
    while (slot < want) {
        std::string p = layer_prefix("ensemble.theta_a", layer);
        for (int i = 0; i < 6 && slot < want; ++i, ++slot) {
            const auto& e = ckpt.entry(p + kDecoderTensorNames[i]);
            std::vector<R> v(e.data.size());
            for (size_t j = 0; j < v.size(); ++j) v[j] = static_cast<R>(e.data[j]);
            state.theta_a.push_back(std::move(v));
        }
        ++layer;
    }
}

std::vector<uint8_t> serialize_frozen_subset(const Checkpoint& ckpt) {
    Checkpoint sub;
    for (const auto& e : ckpt.entries()) {
        if (e.name.rfind("backbone.", 0) == 0 || e.name.rfind("text.", 0) == 0)
            sub.put(e.name, e.extents, e.data);
    }
    return sub.serialize();
}

std::string log_digest(const std::vector<StepRecord>& log) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const char* buf, int n) {
        for (int i = 0; i < n; ++i) {
            h ^= static_cast<uint8_t>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    };
    char buf[256];
    for (const auto& r : log) {
        int n = std::snprintf(buf, sizeof(buf), "%d|%.17g|%.17g|%.17g|%.17g|%d|%.17g|%d|%.17g|%.17g",
                              r.step, r.cls, r.align, r.var, r.total, r.align_present ? 1 : 0,
                              r.s_t, r.ensembled ? 1 : 0, r.s_bar_before, r.s_bar_after);
        feed(buf, n);
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016" PRIx64, h);
    return std::string(hex);
}

void write_training_log(const std::string& path, const std::vector<StepRecord>& log) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& r : log) {
        nlohmann::json j;
        j["step"] = r.step;
        j["cls"] = r.cls;
        if (r.align_present) j["align"] = r.align;
        j["var"] = r.var;
        j["total"] = r.total;
        if (r.has_consistency) {
            j["s_t"] = r.s_t;
            j["ensembled"] = r.ensembled;
            j["s_bar_before"] = r.s_bar_before;
            j["s_bar_after"] = r.s_bar_after;
        }
        out << j.dump() << "\n";
    }
}

// --- training ---------------------------------------------------------------

namespace {

// Inference-time refocuser for a mode: SRE/SR_EMA use the ensembled decoder
// (falling back to the trained theta when nothing was accepted); AR/SR use
// the trained theta.
template <class R>
RefocuserParams<R> inference_refocuser(Mode mode, const RefocuserParams<R>& trained,
                                       const EnsembleState<R>& state, bool* used_fallback) {
    if (used_fallback) *used_fallback = false;
    if ((mode == Mode::SRE || mode == Mode::SR_EMA) && state.accept_count > 0)
        return ensembled_refocuser(trained, state);
    if (mode == Mode::SRE || mode == Mode::SR_EMA) {
        if (used_fallback) *used_fallback = true;
    }
    RefocuserParams<R> copy;
    copy.sigma = trained.sigma.clone_detached();
    copy.use_residual = trained.use_residual;
    for (const auto& dl : trained.layers) {
        DecoderLayer<R> c;
        c.ln_gamma = dl.ln_gamma.clone_detached();
        c.ln_beta = dl.ln_beta.clone_detached();
        c.w1 = dl.w1.clone_detached();
        c.b1 = dl.b1.clone_detached();
        c.w2 = dl.w2.clone_detached();
        c.b2 = dl.b2.clone_detached();
        copy.layers.push_back(std::move(c));
    }
    return copy;
}

template <class R>
int argmax_index(const Tensor<R>& probs) {
    int best = 0;
    for (int i = 1; i < probs.dim(0); ++i)
        if (probs.at(i) > probs.at(best)) best = i;
    return best;
}

// accuracy of (backbone, text, refocuser) on a split at working precision
template <class R>
double accuracy_of_params(const AttentionParams<R>& backbone, const TextTable<R>& text,
                          const RefocuserParams<R>* refocuser,
                          const std::vector<const Sample*>& split) {
    if (split.empty()) throw ConfigError("evaluate: empty split");
    long correct = 0;
    for (const Sample* s : split) {
        Tensor<R> probs;
        if (refocuser) {
            TwoPassResult<R> r = two_pass_forward(s->image, backbone, *refocuser);
            probs = predict_probs(r.zhat, text);
        } else {
            EncodeResult<R> enc = encode_image<R>(s->image, backbone);
            probs = predict_probs(enc.embedding, text);
        }
        if (argmax_index(probs) == s->label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

struct SplitPools {
    std::vector<const Sample*> train;
    std::vector<const Sample*> val;
};

// Deterministic 80/20 per-domain split keyed by (seed, domain name).
SplitPools split_dataset(const MultiDomainDataset& data, uint64_t seed, double val_fraction) {
    SplitPools pools;
    for (size_t d = 0; d < data.domains.size(); ++d) {
        const auto& samples = data.per_domain[d];
        std::vector<size_t> idx(samples.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng(mix_seed(seed, hash_str(data.domains[d].c_str())));
        rng.shuffle(idx);
        size_t n_val = static_cast<size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
        if (!samples.empty() && n_val == 0) n_val = 1;
        for (size_t i = 0; i < idx.size(); ++i) {
            if (i < idx.size() - n_val) pools.train.push_back(&samples[idx[i]]);
            else pools.val.push_back(&samples[idx[i]]);
        }
    }
    return pools;
}

template <class R>
TrainOutput train_impl(const TrainConfig& cfg, const MultiDomainDataset& data,
                       const Checkpoint& backbone_ckpt) {
    cfg.validate();
    if (data.domains.size() < 2)
        throw ConfigError("train: multi-source training needs at least 2 source domains, got " +
                          std::to_string(data.domains.size()));

    AttentionParams<R> backbone;
    TextTable<R> text;
    unpack_backbone(backbone_ckpt, backbone, text);
    backbone.set_requires_grad(false);
    text.embeddings.set_requires_grad(false);
    if (text.class_names != data.class_names)
        throw ConfigError("train: dataset class names do not match the backbone's text table");

    SplitPools pools = split_dataset(data, cfg.seed, cfg.val_fraction);
    if (pools.train.empty() || pools.val.empty())
        throw ConfigError("train: empty train or validation split");

    RefocuserParams<R> refocuser;
    refocuser.init(backbone.config, cfg.seed);
    EnsembleState<R> state;
    state.init_like(refocuser, static_cast<R>(cfg.omega));

    TrainOutput out;

    auto validation_accuracy = [&]() {
        if (cfg.mode == Mode::ZS)
            return accuracy_of_params<R>(backbone, text, nullptr, pools.val);
        RefocuserParams<R> inf = inference_refocuser(cfg.mode, refocuser, state, nullptr);
        return accuracy_of_params<R>(backbone, text, &inf, pools.val);
    };

    auto snapshot = [&]() {
        Checkpoint ckpt;
        pack_backbone(ckpt, backbone, text);
        pack_refocuser(ckpt, refocuser);
        bool uses_ensemble = cfg.mode == Mode::SRE || cfg.mode == Mode::SR_EMA;
        if (uses_ensemble) pack_ensemble(ckpt, state);
        ckpt.put_scalar("meta.has_theta_a", uses_ensemble ? 1 : 0);
        ckpt.put_string("meta.mode", mode_name(cfg.mode));
        ckpt.put_string("meta.precision", precision_name(cfg.precision));
        ckpt.put_string("meta.disparity", disparity_name(cfg.disparity));
        ckpt.put_scalar("config.iterations", cfg.iterations);
        ckpt.put_scalar("config.batch_size", cfg.batch_size);
        ckpt.put_scalar("config.accumulation_steps", cfg.accumulation_steps);
        ckpt.put_scalar("config.lr_decoder", cfg.lr_decoder);
        ckpt.put_scalar("config.lr_prompt", cfg.lr_prompt);
        ckpt.put_scalar("config.weight_decay", cfg.weight_decay);
        ckpt.put_scalar("config.lambda", cfg.lambda);
        ckpt.put_scalar("config.omega", cfg.omega);
        ckpt.put_scalar("config.checkpoint_interval", cfg.checkpoint_interval);
        ckpt.put_string("config.seed", std::to_string(cfg.seed));
        return ckpt;
    };

    if (cfg.mode == Mode::ZS) {
        // no training: sigma/theta keep their initial values
        out.best_val_accuracy = validation_accuracy();
        out.best_iteration = 0;
        out.val_history.emplace_back(0, out.best_val_accuracy);
        out.checkpoint = snapshot();
        out.checkpoint.put_string("log.digest", log_digest(out.log));
        return out;
    }

    typename AdamW<R>::Group prompt_group{{&refocuser.sigma}, cfg.lr_prompt};
    typename AdamW<R>::Group decoder_group{refocuser.theta(), cfg.lr_decoder};
    AdamWConfig acfg;
    acfg.beta1 = cfg.beta1;
    acfg.beta2 = cfg.beta2;
    acfg.eps = cfg.adam_eps;
    acfg.weight_decay = cfg.weight_decay;
    AdamW<R> opt({prompt_group, decoder_group}, acfg);

    std::vector<const Sample*> order = pools.train;
    Rng order_rng(mix_seed(cfg.seed, hash_str("batch-order")));
    order_rng.shuffle(order);
    size_t cursor = 0;
    auto next_batch = [&]() {
        if (cursor + static_cast<size_t>(cfg.batch_size) > order.size()) {
            order_rng.shuffle(order);
            cursor = 0;
        }
        std::vector<const Sample*> batch(order.begin() + static_cast<long>(cursor),
                                         order.begin() + static_cast<long>(cursor) + cfg.batch_size);
        cursor += static_cast<size_t>(cfg.batch_size);
        return batch;
    };
    if (static_cast<size_t>(cfg.batch_size) > order.size())
        throw ConfigError("train: batch_size exceeds training-split size");

    bool align_enabled = cfg.mode != Mode::AR;
    double best_acc = -1.0;
    Checkpoint best_ckpt;

    for (int it = 1; it <= cfg.iterations; ++it) {
        opt.zero_grad();
        StepRecord rec;
        rec.step = it;
        rec.align_present = align_enabled;
        std::vector<R> consistencies;
        try {
            for (int a = 0; a < cfg.accumulation_steps; ++a) {
                uint64_t step_seed = mix_seed(cfg.seed, hash_str("simulate") +
                                                            static_cast<uint64_t>(it) * 1000003ULL +
                                                            static_cast<uint64_t>(a));
                BatchLossResult<R> res =
                    total_loss(next_batch(), backbone, text, refocuser, cfg.augment, cfg.lambda,
                               cfg.disparity, align_enabled, step_seed);
                backward(res.total);
                double inv = 1.0 / cfg.accumulation_steps;
                rec.cls += res.breakdown.cls * inv;
                rec.align += res.breakdown.align * inv;
                rec.var += res.breakdown.var * inv;
                rec.total += res.breakdown.total * inv;
                consistencies.insert(consistencies.end(), res.consistencies.begin(),
                                     res.consistencies.end());
            }
        } catch (const NumericError& e) {
            throw NumericError("train: aborting at iteration " + std::to_string(it) + ": " +
                               e.what());
        }
        opt.step(1.0 / cfg.accumulation_steps);

        rec.s_bar_before = static_cast<double>(state.s_bar);
        if (!consistencies.empty() && (cfg.mode == Mode::SRE || cfg.mode == Mode::SR_EMA)) {
            R s_t = batch_consistency<R>(consistencies);
            rec.s_t = static_cast<double>(s_t);
            rec.has_consistency = true;
            rec.ensembled = maybe_ensemble(state, refocuser, s_t, cfg.mode == Mode::SR_EMA);
        } else if (!consistencies.empty()) {
            rec.s_t = static_cast<double>(batch_consistency<R>(consistencies));
            rec.has_consistency = true;
        }
        rec.s_bar_after = static_cast<double>(state.s_bar);
        out.log.push_back(rec);

        if (it % cfg.checkpoint_interval == 0 || it == cfg.iterations) {
            double acc = validation_accuracy();
            out.val_history.emplace_back(it, acc);
            if (acc > best_acc) {
                best_acc = acc;
                out.best_iteration = it;
                best_ckpt = snapshot();
            }
        }
    }

    out.best_val_accuracy = best_acc;
    out.checkpoint = std::move(best_ckpt);
    out.checkpoint.put_string("log.digest", log_digest(out.log));
    return out;
}

}  // namespace

TrainOutput train(const TrainConfig& config, const MultiDomainDataset& data,
                  const Checkpoint& backbone) {
    if (config.precision == Precision::F32) return train_impl<float>(config, data, backbone);
    return train_impl<double>(config, data, backbone);
}

// --- inference --------------------------------------------------------------

InferResult infer(const Checkpoint& ckpt, const RasterImage& image) {
    AttentionParams<double> backbone;
    TextTable<double> text;
    unpack_backbone(ckpt, backbone, text);
    if (image.height != backbone.config.image_size || image.width != backbone.config.image_size)
        throw ShapeError("infer: image " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + " does not match model size " +
                         std::to_string(backbone.config.image_size));

    Mode mode = mode_from_name(ckpt.string_value("meta.mode"));
    InferResult res;
    Tensor<double> probs;
    if (mode == Mode::ZS) {
        EncodeResult<double> enc = encode_image<double>(image, backbone);
        probs = predict_probs(enc.embedding, text);
        TokenSelection<double> sel;  // mask of ones: refined attention equals raw attention
        res.mask.assign(static_cast<size_t>(backbone.config.tokens()), 1.0);
        for (int i = 0; i < enc.last_attention.dim(0); ++i)
            res.refined_attention.push_back(enc.last_attention.at(i));
        (void)sel;
    } else {
        RefocuserParams<double> trained;
        unpack_refocuser(ckpt, trained, backbone.config);
        EnsembleState<double> state;
        state.init_like(trained, 0.98);
        bool has_theta_a = ckpt.has("meta.has_theta_a") && ckpt.scalar("meta.has_theta_a") > 0.5;
        if (has_theta_a) unpack_ensemble(ckpt, state, trained);
        bool fallback = false;
        RefocuserParams<double> inf = inference_refocuser(mode, trained, state, &fallback);
        if (fallback)
            std::cerr << "[sre] warning: ensemble accepted 0 steps; falling back to the final "
                         "trained decoder\n";
        res.used_fallback_theta = fallback;
        TwoPassResult<double> two = two_pass_forward(image, backbone, inf);
        probs = predict_probs(two.zhat, text);
        Tensor<double> refined = refine_attention(two.attention, two.mask);
        for (int i = 0; i < refined.dim(0); ++i) res.refined_attention.push_back(refined.at(i));
        for (int i = 0; i < two.mask.dim(0); ++i) res.mask.push_back(two.mask.at(i));
    }
    res.class_id = argmax_index(probs);
    for (int i = 0; i < probs.dim(0); ++i) res.probs.push_back(probs.at(i));
    return res;
}

EvalResult evaluate_predictions(const std::vector<int>& predicted,
                                const std::vector<double>& confidence,
                                const std::vector<int>& labels, int num_classes) {
    if (labels.empty()) throw ConfigError("evaluate: empty split");
    if (predicted.size() != labels.size() || confidence.size() != labels.size())
        throw ShapeError("evaluate: prediction/label size mismatch");
    EvalResult res;
    res.count = static_cast<long>(labels.size());
    std::vector<long> per_class_total(static_cast<size_t>(num_classes), 0);
    std::vector<long> per_class_hit(static_cast<size_t>(num_classes), 0);
    long hits = 0;
    double conf = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
        int y = labels[i];
        if (y < 0 || y >= num_classes) throw LabelError("evaluate: label out of range");
        per_class_total[static_cast<size_t>(y)]++;
        if (predicted[i] == y) {
            ++hits;
            per_class_hit[static_cast<size_t>(y)]++;
        }
        conf += confidence[i];
    }
    res.accuracy = static_cast<double>(hits) / static_cast<double>(labels.size());
    res.mean_confidence = conf / static_cast<double>(labels.size());
    for (int c = 0; c < num_classes; ++c)
        res.per_class_accuracy.push_back(
            per_class_total[static_cast<size_t>(c)] == 0
                ? 0.0
                : static_cast<double>(per_class_hit[static_cast<size_t>(c)]) /
                      static_cast<double>(per_class_total[static_cast<size_t>(c)]));
    return res;
}

EvalResult evaluate(const Checkpoint& ckpt, const std::vector<Sample>& split, int num_classes) {
    if (split.empty()) throw ConfigError("evaluate: empty split");
    std::vector<int> predicted, labels;
    std::vector<double> confidence;
    for (const auto& s : split) {
        InferResult r = infer(ckpt, s.image);
        predicted.push_back(r.class_id);
        confidence.push_back(r.probs[static_cast<size_t>(r.class_id)]);
        labels.push_back(s.label);
    }
    return evaluate_predictions(predicted, confidence, labels, num_classes);
}

// explicit instantiations for the packing helpers
template void pack_backbone(Checkpoint&, const AttentionParams<float>&, const TextTable<float>&);
template void pack_backbone(Checkpoint&, const AttentionParams<double>&, const TextTable<double>&);
template void unpack_backbone(const Checkpoint&, AttentionParams<float>&, TextTable<float>&);
template void unpack_backbone(const Checkpoint&, AttentionParams<double>&, TextTable<double>&);
template void pack_refocuser(Checkpoint&, const RefocuserParams<float>&);
template void pack_refocuser(Checkpoint&, const RefocuserParams<double>&);
template void unpack_refocuser(const Checkpoint&, RefocuserParams<float>&, const EncoderConfig&);
template void unpack_refocuser(const Checkpoint&, RefocuserParams<double>&, const EncoderConfig&);
template void pack_ensemble(Checkpoint&, const EnsembleState<float>&);
template void pack_ensemble(Checkpoint&, const EnsembleState<double>&);
template void unpack_ensemble(const Checkpoint&, EnsembleState<float>&,
                              const RefocuserParams<float>&);
template void unpack_ensemble(const Checkpoint&, EnsembleState<double>&,
                              const RefocuserParams<double>&);

}  // namespace sre
