#include "sre/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;

namespace sre {

std::string texture_name(TextureKind t) {
    switch (t) {
        case TextureKind::Flat: return "flat";
        case TextureKind::Stripes: return "stripes";
        case TextureKind::Noise: return "noise";
        case TextureKind::Gradient: return "gradient";
    }
    return "?";
}

std::vector<std::string> shape_class_names() {
    return {"circle", "square", "triangle", "cross", "ring"};
}

std::vector<DomainStyle> benchmark_styles() {
    std::vector<DomainStyle> styles;
    {
        DomainStyle s;
        s.name = "photo";
        s.texture = TextureKind::Gradient;
        s.bg_a = {0.55f, 0.65f, 0.75f};
        s.bg_b = {0.35f, 0.45f, 0.40f};
        s.fg_palette = {{0.85f, 0.30f, 0.25f}, {0.25f, 0.55f, 0.85f}, {0.90f, 0.70f, 0.20f},
                        {0.35f, 0.70f, 0.35f}};
        s.tint = {1.0f, 0.98f, 0.95f};
        s.contrast = 1.0f;
        styles.push_back(s);
    }
    {
        DomainStyle s;
        s.name = "cartoon";
        s.texture = TextureKind::Flat;
        s.bg_a = {0.95f, 0.85f, 0.60f};
        s.bg_b = {0.70f, 0.90f, 0.95f};
        s.fg_palette = {{0.95f, 0.20f, 0.45f}, {0.20f, 0.35f, 0.90f}, {0.10f, 0.70f, 0.60f},
                        {0.98f, 0.55f, 0.10f}};
        s.tint = {1.0f, 1.0f, 1.0f};
        s.contrast = 1.15f;
        styles.push_back(s);
    }
    {
        DomainStyle s;
        s.name = "noisy";
        s.texture = TextureKind::Noise;
        s.bg_a = {0.45f, 0.40f, 0.35f};
        s.bg_b = {0.45f, 0.40f, 0.35f};
        s.fg_palette = {{0.75f, 0.55f, 0.30f}, {0.55f, 0.35f, 0.60f}, {0.30f, 0.55f, 0.65f},
                        {0.70f, 0.40f, 0.40f}};
        s.tint = {1.05f, 0.95f, 0.85f};
        s.contrast = 0.85f;
        styles.push_back(s);
    }
    {
        DomainStyle s;
        s.name = "sketch";
        s.texture = TextureKind::Flat;
        s.bg_a = {0.96f, 0.96f, 0.94f};
        s.bg_b = {0.96f, 0.96f, 0.94f};
        s.fg_palette = {{0.10f, 0.10f, 0.12f}, {0.18f, 0.16f, 0.16f}, {0.05f, 0.08f, 0.10f}};
        s.tint = {1.0f, 1.0f, 1.0f};
        s.contrast = 1.0f;
        s.outline = true;
        styles.push_back(s);
    }
    return styles;
}

std::vector<DomainStyle> pretrain_styles() {
    std::vector<DomainStyle> styles;
    {
        DomainStyle s;
        s.name = "pt_plain";
        s.texture = TextureKind::Flat;
        s.bg_a = {0.60f, 0.60f, 0.62f};
        s.bg_b = {0.78f, 0.74f, 0.70f};
        s.fg_palette = {{0.85f, 0.25f, 0.25f}, {0.25f, 0.45f, 0.85f}, {0.25f, 0.75f, 0.35f},
                        {0.90f, 0.80f, 0.25f}};
        styles.push_back(s);
    }
    {
        DomainStyle s;
        s.name = "pt_grad";
        s.texture = TextureKind::Gradient;
        s.bg_a = {0.30f, 0.30f, 0.50f};
        s.bg_b = {0.70f, 0.60f, 0.45f};
        s.fg_palette = {{0.90f, 0.60f, 0.20f}, {0.20f, 0.80f, 0.75f}, {0.80f, 0.30f, 0.65f}};
        s.contrast = 1.05f;
        styles.push_back(s);
    }
    {
        DomainStyle s;
        s.name = "pt_speckle";
        s.texture = TextureKind::Noise;
        s.bg_a = {0.55f, 0.52f, 0.50f};
        s.bg_b = {0.55f, 0.52f, 0.50f};
        s.fg_palette = {{0.30f, 0.30f, 0.35f}, {0.85f, 0.80f, 0.75f}, {0.60f, 0.25f, 0.25f}};
        s.contrast = 0.9f;
        styles.push_back(s);
    }
    {
        DomainStyle s;
        s.name = "pt_inverse";
        s.texture = TextureKind::Flat;
        s.bg_a = {0.12f, 0.12f, 0.15f};
        s.bg_b = {0.12f, 0.12f, 0.15f};
        s.fg_palette = {{0.90f, 0.90f, 0.85f}, {0.75f, 0.85f, 0.95f}, {0.95f, 0.75f, 0.70f}};
        s.outline = true;
        styles.push_back(s);
    }
    return styles;
}

DomainStyle holdout_pretrain_style() {
    DomainStyle s;
    s.name = "pt_holdout_stripes";
    s.texture = TextureKind::Stripes;
    s.bg_a = {0.66f, 0.70f, 0.60f};
    s.bg_b = {0.50f, 0.52f, 0.46f};
    s.fg_palette = {{0.20f, 0.25f, 0.55f}, {0.75f, 0.30f, 0.30f}};
    s.contrast = 1.0f;
    return s;
}

namespace {

// Coverage in [0,1] for one shape at the sample point, distances normalized
// by the half-extent. Per-class size factors roughly equalize filled areas
// so class cannot be read off pixel statistics.
bool point_in_shape(int class_id, double dx, double dy, double size) {
    switch (class_id) {
        case 0:  // circle
            return dx * dx + dy * dy <= size * size;
        case 1: {  // square
            double s = size * 0.86;
            return std::abs(dx) <= s && std::abs(dy) <= s;
        }
        case 2: {  // triangle, apex up
            double s = size * 1.22;
            if (dy < -s || dy > s) return false;
            double t = (dy + s) / (2.0 * s);  // 0 at apex row, 1 at base
            return std::abs(dx) <= t * s;
        }
        case 3: {  // cross
            double s = size * 1.18;
            double arm = s * 0.38;
            return (std::abs(dx) <= arm && std::abs(dy) <= s) ||
                   (std::abs(dy) <= arm && std::abs(dx) <= s);
        }
        default: {  // ring
            double s = size * 1.16;
            double r2 = dx * dx + dy * dy;
            double inner = s * 0.55;
            return r2 <= s * s && r2 >= inner * inner;
        }
    }
}

// 2x2 supersampled coverage, optionally outline-only.
double shape_coverage(int class_id, double px, double py, double cx, double cy, double size,
                      bool outline) {
    int hit = 0;
    for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
            double dx = px + 0.25 + 0.5 * sx - cx;
            double dy = py + 0.25 + 0.5 * sy - cy;
            bool in = point_in_shape(class_id, dx, dy, size);
            if (outline) in = in && !point_in_shape(class_id, dx, dy, size * 0.74);
            if (in) ++hit;
        }
    return hit / 4.0;
}

inline float clamp01f(float v) { return std::clamp(v, 0.0f, 1.0f); }

}  // namespace

RasterImage render_shape_image(int image_size, int class_id, const DomainStyle& style, Rng& rng) {
    RasterImage img(image_size, image_size);

    // background
    double grad_dir = rng.uniform01() < 0.5 ? 1.0 : -1.0;
    int stripe_phase = static_cast<int>(rng.below(8));
    uint64_t noise_seed = rng.next_u64();
    Rng noise(noise_seed);
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
            float t = 0.0f;
            switch (style.texture) {
                case TextureKind::Flat: t = 0.0f; break;
                case TextureKind::Gradient:
                    t = static_cast<float>(
                        grad_dir > 0 ? static_cast<double>(y) / (image_size - 1)
                                     : static_cast<double>(x) / (image_size - 1));
                    break;
                case TextureKind::Stripes:
                    t = (((x + y + stripe_phase) / 4) % 2 == 0) ? 0.0f : 1.0f;
                    break;
                case TextureKind::Noise: t = 0.0f; break;
            }
            for (int c = 0; c < 3; ++c) {
                float v = style.bg_a[static_cast<size_t>(c)] * (1.0f - t) +
                          style.bg_b[static_cast<size_t>(c)] * t;
                if (style.texture == TextureKind::Noise)
                    v += static_cast<float>(noise.uniform(-0.10, 0.10));
                img.at(c, y, x) = clamp01f(v);
            }
        }

    // shape placement and foreground color are independent of the class
    double cx = image_size / 2.0 + rng.uniform(-0.16, 0.16) * image_size;
    double cy = image_size / 2.0 + rng.uniform(-0.16, 0.16) * image_size;
    double size = image_size * rng.uniform(0.20, 0.30);
    const auto& fg0 = style.fg_palette[static_cast<size_t>(rng.below(style.fg_palette.size()))];
    std::array<float, 3> fg = fg0;
    for (auto& c : fg) c = clamp01f(c + static_cast<float>(rng.uniform(-0.06, 0.06)));

    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
            double cov = shape_coverage(class_id, x, y, cx, cy, size, style.outline);
            if (cov <= 0.0) continue;
            for (int c = 0; c < 3; ++c) {
                float v = img.at(c, y, x);
                img.at(c, y, x) = clamp01f(static_cast<float>(v * (1.0 - cov) +
                                                              fg[static_cast<size_t>(c)] * cov));
            }
        }

    // style post: tint then contrast about mid-gray
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
                float v = img.at(c, y, x) * style.tint[static_cast<size_t>(c)];
                v = 0.5f + style.contrast * (v - 0.5f);
                img.at(c, y, x) = clamp01f(v);
            }
    return img;
}

// --- dataset generation -------------------------------------------------------

namespace {

uint64_t image_stream_seed(uint64_t dataset_seed, const std::string& domain,
                           const std::string& cls, int index) {
    uint64_t h = mix_seed(dataset_seed, hash_str(domain.c_str()));
    h = mix_seed(h, hash_str(cls.c_str()));
    return mix_seed(h, static_cast<uint64_t>(index));
}

}  // namespace

void generate_dataset(const DatasetSpec& spec, const std::string& root, bool force) {
    if (spec.domains.size() < 2) throw ConfigError("generate: need at least 2 domains");
    if (spec.classes.size() < 2) throw ConfigError("generate: need at least 2 classes");
    if (spec.per_class <= 0) throw ConfigError("generate: per_class must be positive");

    fs::path rootp(root);
    if (fs::exists(rootp) && !fs::is_empty(rootp) && !force)
        throw ConfigError("generate: '" + root + "' exists and is not empty (use --force)");
    fs::create_directories(rootp);

    std::ostringstream manifest;
    for (const auto& style : spec.domains)
        for (size_t ci = 0; ci < spec.classes.size(); ++ci) {
            fs::path dir = rootp / style.name / spec.classes[ci];
            fs::create_directories(dir);
            for (int i = 0; i < spec.per_class; ++i) {
                Rng rng(image_stream_seed(spec.seed, style.name, spec.classes[ci], i));
                RasterImage img =
                    render_shape_image(spec.image_size, static_cast<int>(ci), style, rng);
                char name[32];
                std::snprintf(name, sizeof(name), "%04d.ppm", i);
                save_ppm((dir / name).string(), img);
                manifest << style.name << "/" << spec.classes[ci] << "/" << name << "\t"
                         << style.name << "\t" << spec.classes[ci] << "\n";
            }
        }
    std::ofstream mf(rootp / "manifest.tsv");
    if (!mf) throw IoError("cannot write manifest in " + root);
    mf << manifest.str();
}

MultiDomainDataset load_dataset(const std::string& root) {
    fs::path rootp(root);
    std::ifstream mf(rootp / "manifest.tsv");
    if (!mf) throw IoError("cannot open manifest.tsv under " + root);
    MultiDomainDataset data;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        size_t t1 = line.find('\t');
        size_t t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw IoError("malformed manifest line: " + line);
        std::string rel = line.substr(0, t1);
        std::string domain = line.substr(t1 + 1, t2 - t1 - 1);
        std::string cls = line.substr(t2 + 1);

        auto dit = std::find(data.domains.begin(), data.domains.end(), domain);
        size_t di;
        if (dit == data.domains.end()) {
            di = data.domains.size();
            data.domains.push_back(domain);
            data.per_domain.emplace_back();
        } else {
            di = static_cast<size_t>(dit - data.domains.begin());
        }
        auto cit = std::find(data.class_names.begin(), data.class_names.end(), cls);
        int ci;
        if (cit == data.class_names.end()) {
            ci = static_cast<int>(data.class_names.size());
            data.class_names.push_back(cls);
        } else {
            ci = static_cast<int>(cit - data.class_names.begin());
        }
        Sample s;
        s.image = load_ppm((rootp / rel).string());
        s.label = ci;
        s.domain = domain;
        data.per_domain[di].push_back(std::move(s));
    }
    if (data.domains.empty()) throw IoError("manifest.tsv under " + root + " is empty");
    return data;
}

MultiDomainDataset remove_domain(const MultiDomainDataset& data, const std::string& domain) {
    MultiDomainDataset out;
    out.class_names = data.class_names;
    bool found = false;
    for (size_t d = 0; d < data.domains.size(); ++d) {
        if (data.domains[d] == domain) {
            found = true;
            continue;
        }
        out.domains.push_back(data.domains[d]);
        out.per_domain.push_back(data.per_domain[d]);
    }
    if (!found) throw ConfigError("remove_domain: '" + domain + "' not in dataset");
    return out;
}

LabeledSet make_corpus(const std::vector<DomainStyle>& styles, int per_class_per_style,
                       int image_size, uint64_t seed) {
    LabeledSet corpus;
    corpus.class_names = shape_class_names();
    for (const auto& style : styles)
        for (size_t ci = 0; ci < corpus.class_names.size(); ++ci)
            for (int i = 0; i < per_class_per_style; ++i) {
                Rng rng(image_stream_seed(mix_seed(seed, hash_str("corpus")), style.name,
                                          corpus.class_names[ci], i));
                Sample s;
                s.image = render_shape_image(image_size, static_cast<int>(ci), style, rng);
                s.label = static_cast<int>(ci);
                s.domain = style.name;
                corpus.samples.push_back(std::move(s));
            }
    return corpus;
}

// --- leave-one-domain-out ------------------------------------------------------

double LodoReport::mode_domain_mean(Mode mode, const std::string& domain) const {
    double acc = 0.0;
    int n = 0;
    for (const auto& c : cells)
        if (c.mode == mode && c.domain == domain) {
            acc += c.accuracy;
            ++n;
        }
    if (n == 0) throw ConfigError("report: no cells for mode " + mode_name(mode) + " on " + domain);
    return acc / n;
}

double LodoReport::mode_average(Mode mode) const {
    double acc = 0.0;
    for (const auto& d : domains) acc += mode_domain_mean(mode, d);
    return acc / static_cast<double>(domains.size());
}

namespace {

std::string lodo_config_digest(const LodoConfig& cfg) {
    std::ostringstream os;
    os << cfg.train.iterations << "|" << cfg.train.batch_size << "|"
       << cfg.train.accumulation_steps << "|" << cfg.train.lr_decoder << "|"
       << cfg.train.lr_prompt << "|" << cfg.train.weight_decay << "|" << cfg.train.lambda << "|"
       << cfg.train.omega << "|" << disparity_name(cfg.train.disparity) << "|"
       << precision_name(cfg.train.precision) << "|" << cfg.train.checkpoint_interval << "|"
       << cfg.pretrain.epochs << "|" << cfg.pretrain.lr << "|" << cfg.pretrain_per_class;
    for (auto m : cfg.modes) os << "|" << mode_name(m);
    for (auto s : cfg.seeds) os << "|" << s;
    std::string text = os.str();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}

Checkpoint pretrained_backbone_for_seed(const LodoConfig& cfg, uint64_t seed,
                                        const fs::path& out_dir) {
    fs::path cache = out_dir / ("backbone_s" + std::to_string(seed) + ".srec");
    if (fs::exists(cache)) return load_checkpoint(cache.string());
    LabeledSet corpus = make_corpus(pretrain_styles(), cfg.pretrain_per_class,
                                    cfg.train.encoder.image_size, seed);
    PretrainConfig pt = cfg.pretrain;
    pt.seed = seed;
    Checkpoint ckpt;
    if (cfg.train.precision == Precision::F32) {
        auto pre = pretrain_contrastive<float>(corpus, cfg.train.encoder, pt);
        pack_backbone(ckpt, pre.backbone, pre.text);
    } else {
        auto pre = pretrain_contrastive<double>(corpus, cfg.train.encoder, pt);
        pack_backbone(ckpt, pre.backbone, pre.text);
    }
    save_checkpoint(cache.string(), ckpt);
    return ckpt;
}

}  // namespace

LodoReport run_lodo(const LodoConfig& cfg, const std::string& dataset_root,
                    const std::string& out_dir) {
    if (cfg.modes.empty() || cfg.seeds.empty()) throw ConfigError("lodo: no modes or seeds");
    MultiDomainDataset data = load_dataset(dataset_root);
    if (data.domains.size() < 2) throw ConfigError("lodo: need at least 2 domains");
    fs::path outp(out_dir);
    fs::create_directories(outp);

    LodoReport report;
    report.domains = data.domains;
    report.modes = cfg.modes;
    report.seeds = cfg.seeds;
    report.config_digest = lodo_config_digest(cfg);

    std::vector<Checkpoint> backbones;
    backbones.reserve(cfg.seeds.size());
    for (uint64_t seed : cfg.seeds) backbones.push_back(pretrained_backbone_for_seed(cfg, seed, outp));

    struct Run {
        size_t seed_idx;
        Mode mode;
        std::string domain;
    };
    std::vector<Run> runs;
    for (size_t si = 0; si < cfg.seeds.size(); ++si)
        for (Mode mode : cfg.modes)
            for (const auto& domain : data.domains) runs.push_back({si, mode, domain});

    report.cells.resize(runs.size());
    std::atomic<size_t> next{0};
    std::atomic<bool> failed{false};
    std::string failure;
    std::mutex failure_mutex;

    auto worker = [&]() {
        for (;;) {
            size_t idx = next.fetch_add(1);
            if (idx >= runs.size() || failed.load()) return;
            const Run& run = runs[idx];
            try {
                TrainConfig tc = cfg.train;
                tc.seed = cfg.seeds[run.seed_idx];
                tc.mode = run.mode;
                MultiDomainDataset sources = remove_domain(data, run.domain);
                TrainOutput out = train(tc, sources, backbones[run.seed_idx]);

                const auto* held = &data.per_domain[static_cast<size_t>(
                    std::find(data.domains.begin(), data.domains.end(), run.domain) -
                    data.domains.begin())];
                EvalResult ev = evaluate(out.checkpoint, *held,
                                         static_cast<int>(data.class_names.size()));

                fs::path run_dir = outp / ("run_" + mode_name(run.mode) + "_" + run.domain +
                                           "_s" + std::to_string(tc.seed));
                fs::create_directories(run_dir);
                save_checkpoint((run_dir / "checkpoint.srec").string(), out.checkpoint);
                write_training_log((run_dir / "train_log.jsonl").string(), out.log);

                LodoCell cell;
                cell.domain = run.domain;
                cell.mode = run.mode;
                cell.seed = tc.seed;
                cell.accuracy = ev.accuracy;
                cell.val_accuracy = out.best_val_accuracy;
                report.cells[idx] = cell;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                failed.store(true);
                if (failure.empty())
                    failure = "lodo run " + mode_name(run.mode) + "/" + run.domain + ": " + e.what();
                return;
            }
        }
    };

    int jobs = std::max(1, cfg.jobs);
    std::vector<std::thread> threads;
    for (int j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (failed.load()) throw NumericError(failure);
    return report;
}

std::string render_report(const LodoReport& report) {
    std::ostringstream os;
    size_t mode_width = 8;
    for (Mode m : report.modes) mode_width = std::max(mode_width, mode_name(m).size() + 1);
    os << std::string(mode_width, ' ');
    char buf[64];
    for (const auto& d : report.domains) {
        std::snprintf(buf, sizeof(buf), " %9s", d.substr(0, 9).c_str());
        os << buf;
    }
    os << "       Avg\n";
    os << std::string(mode_width + 10 * report.domains.size() + 10, '-') << "\n";
    for (Mode m : report.modes) {
        std::string name = mode_name(m);
        os << name << std::string(mode_width - name.size(), ' ');
        for (const auto& d : report.domains) {
            std::snprintf(buf, sizeof(buf), " %9.1f", 100.0 * report.mode_domain_mean(m, d));
            os << buf;
        }
        std::snprintf(buf, sizeof(buf), " %9.1f", 100.0 * report.mode_average(m));
        os << buf << "\n";
    }
    return os.str();
}

void write_report_json(const std::string& path, const LodoReport& report) {
    nlohmann::json j;
    j["domains"] = report.domains;
    std::vector<std::string> modes;
    for (Mode m : report.modes) modes.push_back(mode_name(m));
    j["modes"] = modes;
    j["seeds"] = report.seeds;
    j["config_digest"] = report.config_digest;
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : report.cells) {
        nlohmann::json cj;
        cj["domain"] = c.domain;
        cj["mode"] = mode_name(c.mode);
        cj["seed"] = c.seed;
        cj["accuracy"] = c.accuracy;
        cj["val_accuracy"] = c.val_accuracy;
        cells.push_back(cj);
    }
    j["cells"] = cells;
    nlohmann::json summary;
    for (Mode m : report.modes) {
        nlohmann::json per_domain;
        for (const auto& d : report.domains) per_domain[d] = report.mode_domain_mean(m, d);
        nlohmann::json mj;
        mj["per_domain"] = per_domain;
        mj["average"] = report.mode_average(m);
        summary[mode_name(m)] = mj;
    }
    j["summary"] = summary;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

LodoReport read_report_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    in >> j;
    LodoReport report;
    report.domains = j.at("domains").get<std::vector<std::string>>();
    for (const auto& m : j.at("modes")) report.modes.push_back(mode_from_name(m.get<std::string>()));
    report.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    report.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& cj : j.at("cells")) {
        LodoCell c;
        c.domain = cj.at("domain").get<std::string>();
        c.mode = mode_from_name(cj.at("mode").get<std::string>());
        c.seed = cj.at("seed").get<uint64_t>();
        c.accuracy = cj.at("accuracy").get<double>();
        c.val_accuracy = cj.at("val_accuracy").get<double>();
        report.cells.push_back(c);
    }
    return report;
}

// --- heatmaps -------------------------------------------------------------------

HeatmapResult heatmap_from_attention(const std::vector<double>& patch_scores, int grid,
                                     int out_size) {
    if (static_cast<int>(patch_scores.size()) != grid * grid)
        throw ShapeError("heatmap: " + std::to_string(patch_scores.size()) +
                         " scores do not fill a " + std::to_string(grid) + "x" +
                         std::to_string(grid) + " grid");
    HeatmapResult res;
    res.size = out_size;
    res.gray.assign(static_cast<size_t>(out_size) * out_size, 128);

    double mn = patch_scores[0], mx = patch_scores[0];
    for (double v : patch_scores) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx - mn < 1e-12) {
        res.degenerate = true;
        return res;
    }

    std::vector<double> norm(patch_scores.size());
    for (size_t i = 0; i < norm.size(); ++i) norm[i] = (patch_scores[i] - mn) / (mx - mn);

    std::vector<double> up(static_cast<size_t>(out_size) * out_size);
    double up_min = 1e300, up_max = -1e300;
    for (int y = 0; y < out_size; ++y)
        for (int x = 0; x < out_size; ++x) {
            double u = (x + 0.5) * grid / out_size - 0.5;
            double v = (y + 0.5) * grid / out_size - 0.5;
            u = std::clamp(u, 0.0, static_cast<double>(grid - 1));
            v = std::clamp(v, 0.0, static_cast<double>(grid - 1));
            int x0 = static_cast<int>(std::floor(u));
            int y0 = static_cast<int>(std::floor(v));
            int x1 = std::min(x0 + 1, grid - 1);
            int y1 = std::min(y0 + 1, grid - 1);
            double fx = u - x0, fy = v - y0;
            double val = norm[static_cast<size_t>(y0) * grid + x0] * (1 - fx) * (1 - fy) +
                         norm[static_cast<size_t>(y0) * grid + x1] * fx * (1 - fy) +
                         norm[static_cast<size_t>(y1) * grid + x0] * (1 - fx) * fy +
                         norm[static_cast<size_t>(y1) * grid + x1] * fx * fy;
            up[static_cast<size_t>(y) * out_size + x] = val;
            up_min = std::min(up_min, val);
            up_max = std::max(up_max, val);
        }
    // stretch so the written image spans the full 0..255 range
    for (size_t i = 0; i < up.size(); ++i)
        res.gray[i] = static_cast<uint8_t>(
            std::lround(255.0 * (up[i] - up_min) / (up_max - up_min)));
    return res;
}

void emit_heatmap(const Checkpoint& checkpoint, const std::string& image_path,
                  const std::string& out_prefix) {
    RasterImage img = load_ppm(image_path);
    InferResult inf = infer(checkpoint, img);
    int L = static_cast<int>(inf.refined_attention.size());
    int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(L - 1))));
    if (grid * grid != L - 1)
        throw ShapeError("heatmap: token count " + std::to_string(L) + " has no square patch grid");
    std::vector<double> patches(inf.refined_attention.begin() + 1, inf.refined_attention.end());
    HeatmapResult heat = heatmap_from_attention(patches, grid, img.height);

    save_pgm(out_prefix + ".pgm", heat.gray, heat.size, heat.size);

    RasterImage overlay(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float h = heat.gray[static_cast<size_t>(y) * img.width + x] / 255.0f;
            overlay.at(0, y, x) = std::clamp(0.5f * img.at(0, y, x) + 0.5f * h, 0.0f, 1.0f);
            overlay.at(1, y, x) = 0.5f * img.at(1, y, x);
            overlay.at(2, y, x) = 0.5f * img.at(2, y, x);
        }
    save_ppm(out_prefix + "_overlay.ppm", overlay);

    std::ofstream side(out_prefix + ".txt");
    side << "prediction = " << inf.class_id << "\n";
    side << "degenerate = " << (heat.degenerate ? 1 : 0) << "\n";
}

}  // namespace sre
