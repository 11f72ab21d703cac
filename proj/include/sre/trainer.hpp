#pragma once

// Orchestrates SRE training: AdamW over {sigma, theta}, gradient
// accumulation, per-effective-step ensembling, validation-based model
// selection, ablation modes, and checkpoint-based inference.

#include <string>
#include <utility>
#include <vector>

#include "sre/checkpoint.hpp"
#include "sre/dataset.hpp"
#include "sre/encoder.hpp"
#include "sre/ensemble.hpp"
#include "sre/refocuser.hpp"

namespace sre {

enum class Mode { ZS, AR, SR, SR_EMA, SRE };
enum class Precision { F32, F64 };

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& s);
std::string precision_name(Precision p);
Precision precision_from_name(const std::string& s);
std::string disparity_name(DisparityMode m);
DisparityMode disparity_from_name(const std::string& s);

struct TrainConfig {
    int iterations = 2000;
    int batch_size = 16;
    int accumulation_steps = 4;
    double lr_decoder = 0.0004;
    double lr_prompt = 0.001;
    double weight_decay = 0.005;
    double lambda = 0.1;
    double omega = 0.98;
    uint64_t seed = 0;
    Mode mode = Mode::SRE;
    DisparityMode disparity = DisparityMode::Maximize;
    Precision precision = Precision::F64;
    int checkpoint_interval = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double val_fraction = 0.2;  // per-domain validation share
    AugmentRanges augment;
    EncoderConfig encoder;

    void validate() const;
};

struct StepRecord {
    int step = 0;
    double cls = 0.0;
    double align = 0.0;
    double var = 0.0;
    double total = 0.0;
    bool align_present = true;
    double s_t = 0.0;
    bool has_consistency = false;
    bool ensembled = false;
    double s_bar_before = 0.0;
    double s_bar_after = 0.0;
};

struct TrainOutput {
    Checkpoint checkpoint;  // best-validation snapshot
    std::vector<StepRecord> log;
    double best_val_accuracy = 0.0;
    int best_iteration = 0;
    std::vector<std::pair<int, double>> val_history;  // (iteration, accuracy)
};

// `backbone` must hold a pretrained, frozen backbone + text table (see
// pack_backbone). The dataset must provide at least two source domains.
TrainOutput train(const TrainConfig& config, const MultiDomainDataset& data,
                  const Checkpoint& backbone);

struct InferResult {
    int class_id = 0;
    std::vector<double> probs;
    std::vector<double> refined_attention;  // [L]
    std::vector<double> mask;               // [L]
    bool used_fallback_theta = false;       // zero accepted ensemble steps
};

InferResult infer(const Checkpoint& checkpoint, const RasterImage& image);

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    double mean_confidence = 0.0;
    long count = 0;
};

EvalResult evaluate(const Checkpoint& checkpoint, const std::vector<Sample>& split,
                    int num_classes);

// Counting core shared by evaluate; the test suite drives it directly.
EvalResult evaluate_predictions(const std::vector<int>& predicted,
                                const std::vector<double>& confidence,
                                const std::vector<int>& labels, int num_classes);

// --- checkpoint packing -----------------------------------------------------

template <class R>
void pack_backbone(Checkpoint& ckpt, const AttentionParams<R>& backbone, const TextTable<R>& text);
template <class R>
void unpack_backbone(const Checkpoint& ckpt, AttentionParams<R>& backbone, TextTable<R>& text);
template <class R>
void pack_refocuser(Checkpoint& ckpt, const RefocuserParams<R>& refocuser);
template <class R>
void unpack_refocuser(const Checkpoint& ckpt, RefocuserParams<R>& refocuser,
                      const EncoderConfig& cfg);
template <class R>
void pack_ensemble(Checkpoint& ckpt, const EnsembleState<R>& state);
template <class R>
void unpack_ensemble(const Checkpoint& ckpt, EnsembleState<R>& state,
                     const RefocuserParams<R>& like);

// Serialized bytes of only the backbone + text entries (frozen-parameter
// comparison helper).
std::vector<uint8_t> serialize_frozen_subset(const Checkpoint& ckpt);

// FNV-1a 64 digest of the step records, hex-encoded.
std::string log_digest(const std::vector<StepRecord>& log);

// Line-delimited records, one JSON object per step. AR-mode records omit
// "align"; steps without a consistency value omit "s_t".
void write_training_log(const std::string& path, const std::vector<StepRecord>& log);

}  // namespace sre
