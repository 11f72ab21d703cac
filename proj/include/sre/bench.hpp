#pragma once

// Synthetic multi-domain benchmark: shape classes rendered under distinct
// styles, the leave-one-domain-out protocol runner, and the report/heatmap
// emitters.

#include <array>
#include <string>
#include <vector>

#include "sre/dataset.hpp"
#include "sre/trainer.hpp"

namespace sre {

enum class TextureKind { Flat, Stripes, Noise, Gradient };

std::string texture_name(TextureKind t);

struct DomainStyle {
    std::string name;
    TextureKind texture = TextureKind::Flat;
    std::array<float, 3> bg_a{0.5f, 0.5f, 0.5f};
    std::array<float, 3> bg_b{0.5f, 0.5f, 0.5f};
    std::vector<std::array<float, 3>> fg_palette;
    std::array<float, 3> tint{1.0f, 1.0f, 1.0f};
    float contrast = 1.0f;
    bool outline = false;  // sketch-like rendering: draw shape boundary only
};

// circle, square, triangle, cross, ring — class identity is geometry only.
std::vector<std::string> shape_class_names();

// The four benchmark domains; "sketch" is deliberately far from the rest.
std::vector<DomainStyle> benchmark_styles();

// Styles used only for contrastive pretraining, disjoint from the benchmark
// domains so leave-one-domain-out evaluation never sees pretraining data.
std::vector<DomainStyle> pretrain_styles();

// A fifth rendering style held out of pretraining, for zero-shot checks.
DomainStyle holdout_pretrain_style();

RasterImage render_shape_image(int image_size, int class_id, const DomainStyle& style, Rng& rng);

struct DatasetSpec {
    int image_size = 32;
    int per_class = 100;  // images per (domain, class) cell
    std::vector<DomainStyle> domains;
    std::vector<std::string> classes;
    uint64_t seed = 0;

    DatasetSpec() : domains(benchmark_styles()), classes(shape_class_names()) {}
};

// Writes <root>/<domain>/<class>/<index>.ppm plus manifest.tsv. Refuses an
// existing non-empty root unless force is set.
void generate_dataset(const DatasetSpec& spec, const std::string& root, bool force = false);

MultiDomainDataset load_dataset(const std::string& root);

MultiDomainDataset remove_domain(const MultiDomainDataset& data, const std::string& domain);

// In-memory corpus for pretraining; spans all classes across the styles.
LabeledSet make_corpus(const std::vector<DomainStyle>& styles, int per_class_per_style,
                       int image_size, uint64_t seed);

// --- leave-one-domain-out ----------------------------------------------------

struct LodoConfig {
    TrainConfig train;  // template; seed and mode are overridden per run
    std::vector<Mode> modes{Mode::ZS, Mode::AR, Mode::SR, Mode::SR_EMA, Mode::SRE};
    std::vector<uint64_t> seeds{0, 1, 2};
    int jobs = 2;
    PretrainConfig pretrain;
    int pretrain_per_class = 40;  // per (style, class) in the pretraining corpus
};

struct LodoCell {
    std::string domain;  // held-out domain
    Mode mode = Mode::ZS;
    uint64_t seed = 0;
    double accuracy = 0.0;      // on the held-out domain
    double val_accuracy = 0.0;  // best combined-domain validation accuracy
};

struct LodoReport {
    std::vector<std::string> domains;
    std::vector<Mode> modes;
    std::vector<uint64_t> seeds;
    std::vector<LodoCell> cells;
    std::string config_digest;

    double mode_domain_mean(Mode mode, const std::string& domain) const;
    double mode_average(Mode mode) const;
};

LodoReport run_lodo(const LodoConfig& config, const std::string& dataset_root,
                    const std::string& out_dir);

// Fixed-width per-domain table, one row per mode.
std::string render_report(const LodoReport& report);

void write_report_json(const std::string& path, const LodoReport& report);
LodoReport read_report_json(const std::string& path);

// --- attention heatmaps -------------------------------------------------------

struct HeatmapResult {
    std::vector<uint8_t> gray;  // out_size x out_size
    int size = 0;
    bool degenerate = false;  // constant input; emitted as uniform mid-gray
};

// Reshapes patch scores to a grid x grid map, min-max normalizes, bilinearly
// upsamples to out_size, then min-max stretches the result to 0..255.
HeatmapResult heatmap_from_attention(const std::vector<double>& patch_scores, int grid,
                                     int out_size);

// Writes <prefix>.pgm, an RGB overlay <prefix>_overlay.ppm, and a sidecar
// <prefix>.txt with the degenerate flag.
void emit_heatmap(const Checkpoint& checkpoint, const std::string& image_path,
                  const std::string& out_prefix);

}  // namespace sre
