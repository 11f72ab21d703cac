// Command-line front end: dataset generation, training, evaluation, the
// leave-one-domain-out benchmark, augmentation preview, attention heatmaps,
// and report rendering.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sre/bench.hpp"
#include "sre/config.hpp"

namespace fs = std::filesystem;
using namespace sre;

namespace {

struct GlobalFlags {
    uint64_t seed = 0;
    std::string config_path;
    std::string precision = "f64";
    std::string mode = "SRE";
};

TrainConfig build_train_config(const GlobalFlags& g, CLI::App* cmd) {
    TrainConfig cfg;
    if (!g.config_path.empty()) apply_train_config(cfg, parse_config_file(g.config_path));
    cfg.seed = g.seed;
    cfg.mode = mode_from_name(g.mode);
    cfg.precision = precision_from_name(g.precision);

    auto maybe = [cmd](const std::string& flag, auto setter) {
        if (cmd->count(flag) > 0) setter();
    };
    // flag storage lives on the subcommand via these statics
    (void)maybe;
    return cfg;
}

Checkpoint pretrain_or_load_backbone(const TrainConfig& cfg, const PretrainConfig& pt_in,
                                     int corpus_per_class, const std::string& backbone_path,
                                     const std::string& cache_dir) {
    if (!backbone_path.empty()) return load_checkpoint(backbone_path);
    fs::path cache = fs::path(cache_dir) / ("backbone_s" + std::to_string(cfg.seed) + ".srec");
    if (fs::exists(cache)) return load_checkpoint(cache.string());
    std::cerr << "[sre] pretraining backbone (seed " << cfg.seed << ")...\n";
    LabeledSet corpus = make_corpus(pretrain_styles(), corpus_per_class, cfg.encoder.image_size,
                                    cfg.seed);
    PretrainConfig pt = pt_in;
    pt.seed = cfg.seed;
    Checkpoint ckpt;
    if (cfg.precision == Precision::F32) {
        auto pre = pretrain_contrastive<float>(corpus, cfg.encoder, pt);
        pack_backbone(ckpt, pre.backbone, pre.text);
    } else {
        auto pre = pretrain_contrastive<double>(corpus, cfg.encoder, pt);
        pack_backbone(ckpt, pre.backbone, pre.text);
    }
    fs::create_directories(cache.parent_path());
    save_checkpoint(cache.string(), ckpt);
    return ckpt;
}

std::vector<Mode> parse_modes(const std::string& csv) {
    std::vector<Mode> modes;
    std::string cur;
    for (char c : csv + ",") {
        if (c == ',') {
            if (!cur.empty()) modes.push_back(mode_from_name(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (modes.empty()) throw ConfigError("no modes given");
    return modes;
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
    std::vector<uint64_t> seeds;
    std::string cur;
    for (char c : csv + ",") {
        if (c == ',') {
            if (!cur.empty()) seeds.push_back(std::stoull(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (seeds.empty()) throw ConfigError("no seeds given");
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"simulate-refocus-ensemble domain generalization workbench"};
    app.require_subcommand(1);

    GlobalFlags g;
    app.add_option("--seed", g.seed, "global random seed");
    app.add_option("--config", g.config_path, "key = value config file");
    app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--mode", g.mode, "ZS, AR, SR, SR_EMA or SRE")
        ->check(CLI::IsMember({"ZS", "AR", "SR", "SR_EMA", "SRE"}));

    // generate
    auto* gen = app.add_subcommand("generate", "generate the synthetic multi-domain dataset");
    std::string gen_out;
    int gen_per_class = 100, gen_image_size = 32;
    bool gen_force = false;
    gen->add_option("--out", gen_out, "dataset root directory")->required();
    gen->add_option("--per-class", gen_per_class, "images per (domain, class) cell");
    gen->add_option("--image-size", gen_image_size, "image side in pixels");
    gen->add_flag("--force", gen_force, "overwrite a non-empty root");

    // train
    auto* tr = app.add_subcommand("train", "train the attention-refocuser on source domains");
    std::string tr_data, tr_out, tr_holdout, tr_backbone;
    int tr_iterations = -1, tr_batch = -1, tr_accum = -1, tr_ckpt_interval = -1;
    double tr_lr_decoder = -1, tr_lr_prompt = -1, tr_wd = -1, tr_lambda = -1, tr_omega = -1;
    std::string tr_disparity;
    int tr_pre_epochs = 12;
    double tr_pre_lr = 1e-3;
    int tr_pre_per_class = 40;
    tr->add_option("--data", tr_data, "dataset root")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--holdout", tr_holdout, "domain to exclude from training");
    tr->add_option("--backbone", tr_backbone, "pretrained backbone checkpoint (.srec)");
    tr->add_option("--iterations", tr_iterations, "effective optimizer steps");
    tr->add_option("--batch-size", tr_batch, "mini-batch size");
    tr->add_option("--accumulation-steps", tr_accum, "gradient accumulation steps");
    tr->add_option("--lr-decoder", tr_lr_decoder, "decoder learning rate");
    tr->add_option("--lr-prompt", tr_lr_prompt, "prompt learning rate");
    tr->add_option("--weight-decay", tr_wd, "weight decay");
    tr->add_option("--lambda", tr_lambda, "variance-loss weight");
    tr->add_option("--omega", tr_omega, "ensemble update ratio");
    tr->add_option("--disparity", tr_disparity, "maximize or literal")
        ->check(CLI::IsMember({"maximize", "literal"}));
    tr->add_option("--checkpoint-interval", tr_ckpt_interval, "validation cadence in steps");
    tr->add_option("--pretrain-epochs", tr_pre_epochs, "backbone pretraining epochs");
    tr->add_option("--pretrain-lr", tr_pre_lr, "backbone pretraining learning rate");
    tr->add_option("--pretrain-per-class", tr_pre_per_class, "corpus images per (style, class)");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on one domain");
    std::string ev_ckpt, ev_data, ev_domain;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset root")->required();
    ev->add_option("--domain", ev_domain, "domain to evaluate")->required();

    // lodo
    auto* lo = app.add_subcommand("lodo", "run the leave-one-domain-out benchmark");
    std::string lo_data, lo_out, lo_modes = "ZS,AR,SR,SR_EMA,SRE", lo_seeds = "0,1,2";
    int lo_jobs = 2, lo_iterations = -1, lo_batch = -1, lo_accum = -1, lo_ckpt_interval = -1;
    int lo_pre_epochs = 12, lo_pre_per_class = 40;
    double lo_pre_lr = 1e-3;
    lo->add_option("--data", lo_data, "dataset root")->required();
    lo->add_option("--out", lo_out, "output directory")->required();
    lo->add_option("--modes", lo_modes, "comma-separated mode list");
    lo->add_option("--seeds", lo_seeds, "comma-separated seed list");
    lo->add_option("--jobs", lo_jobs, "parallel runs");
    lo->add_option("--iterations", lo_iterations, "effective optimizer steps per run");
    lo->add_option("--batch-size", lo_batch, "mini-batch size");
    lo->add_option("--accumulation-steps", lo_accum, "gradient accumulation steps");
    lo->add_option("--checkpoint-interval", lo_ckpt_interval, "validation cadence");
    lo->add_option("--pretrain-epochs", lo_pre_epochs, "backbone pretraining epochs");
    lo->add_option("--pretrain-lr", lo_pre_lr, "backbone pretraining learning rate");
    lo->add_option("--pretrain-per-class", lo_pre_per_class, "corpus images per (style, class)");

    // simulate
    auto* si = app.add_subcommand("simulate", "apply the simulate-stage augmentation to a PPM");
    std::string si_in, si_out;
    si->add_option("--in", si_in, "input PPM (P6)")->required();
    si->add_option("--out", si_out, "output PPM")->required();

    // heatmap
    auto* hm = app.add_subcommand("heatmap", "export the refined attention map for an image");
    std::string hm_ckpt, hm_image, hm_out;
    hm->add_option("--checkpoint", hm_ckpt, "checkpoint file")->required();
    hm->add_option("--image", hm_image, "input PPM")->required();
    hm->add_option("--out", hm_out, "output prefix")->required();

    // report
    auto* rp = app.add_subcommand("report", "render a benchmark report");
    std::string rp_in, rp_out;
    rp->add_option("--in", rp_in, "report.json")->required();
    rp->add_option("--out", rp_out, "write the table here as well");

    // dump-config
    auto* dc = app.add_subcommand("dump-config", "print the shipped defaults as a config file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            DatasetSpec spec;
            spec.seed = g.seed;
            spec.per_class = gen_per_class;
            spec.image_size = gen_image_size;
            generate_dataset(spec, gen_out, gen_force);
            std::cout << "wrote dataset to " << gen_out << "\n";
        } else if (*tr) {
            TrainConfig cfg = build_train_config(g, tr);
            if (tr_iterations >= 0) cfg.iterations = tr_iterations;
            if (tr_batch > 0) cfg.batch_size = tr_batch;
            if (tr_accum > 0) cfg.accumulation_steps = tr_accum;
            if (tr_lr_decoder > 0) cfg.lr_decoder = tr_lr_decoder;
            if (tr_lr_prompt > 0) cfg.lr_prompt = tr_lr_prompt;
            if (tr_wd >= 0) cfg.weight_decay = tr_wd;
            if (tr_lambda >= 0) cfg.lambda = tr_lambda;
            if (tr_omega > 0) cfg.omega = tr_omega;
            if (!tr_disparity.empty()) cfg.disparity = disparity_from_name(tr_disparity);
            if (tr_ckpt_interval > 0) cfg.checkpoint_interval = tr_ckpt_interval;

            MultiDomainDataset data = load_dataset(tr_data);
            if (!tr_holdout.empty()) data = remove_domain(data, tr_holdout);
            PretrainConfig pt;
            pt.epochs = tr_pre_epochs;
            pt.lr = tr_pre_lr;
            Checkpoint backbone =
                pretrain_or_load_backbone(cfg, pt, tr_pre_per_class, tr_backbone, tr_out);
            TrainOutput out = train(cfg, data, backbone);
            fs::create_directories(tr_out);
            save_checkpoint((fs::path(tr_out) / "checkpoint.srec").string(), out.checkpoint);
            write_training_log((fs::path(tr_out) / "train_log.jsonl").string(), out.log);
            std::cout << "best validation accuracy " << 100.0 * out.best_val_accuracy
                      << "% at iteration " << out.best_iteration << "\n";
        } else if (*ev) {
            Checkpoint ckpt = load_checkpoint(ev_ckpt);
            MultiDomainDataset data = load_dataset(ev_data);
            auto it = std::find(data.domains.begin(), data.domains.end(), ev_domain);
            if (it == data.domains.end())
                throw ConfigError("eval: domain '" + ev_domain + "' not in dataset");
            const auto& split = data.per_domain[static_cast<size_t>(it - data.domains.begin())];
            EvalResult res = evaluate(ckpt, split, static_cast<int>(data.class_names.size()));
            std::printf("accuracy %.2f%% over %ld images (mean confidence %.3f)\n",
                        100.0 * res.accuracy, res.count, res.mean_confidence);
            for (size_t c = 0; c < data.class_names.size(); ++c)
                std::printf("  %-10s %.2f%%\n", data.class_names[c].c_str(),
                            100.0 * res.per_class_accuracy[c]);
        } else if (*lo) {
            LodoConfig cfg;
            cfg.train = build_train_config(g, lo);
            if (lo_iterations >= 0) cfg.train.iterations = lo_iterations;
            if (lo_batch > 0) cfg.train.batch_size = lo_batch;
            if (lo_accum > 0) cfg.train.accumulation_steps = lo_accum;
            if (lo_ckpt_interval > 0) cfg.train.checkpoint_interval = lo_ckpt_interval;
            cfg.modes = parse_modes(lo_modes);
            cfg.seeds = parse_seeds(lo_seeds);
            cfg.jobs = lo_jobs;
            cfg.pretrain.epochs = lo_pre_epochs;
            cfg.pretrain.lr = lo_pre_lr;
            cfg.pretrain_per_class = lo_pre_per_class;
            LodoReport report = run_lodo(cfg, lo_data, lo_out);
            std::string table = render_report(report);
            write_report_json((fs::path(lo_out) / "report.json").string(), report);
            std::ofstream txt(fs::path(lo_out) / "report.txt");
            txt << table;
            std::cout << table;
        } else if (*si) {
            RasterImage img = load_ppm(si_in);
            Rng stream(mix_seed(g.seed, hash_str("simulate-cli")));
            AugmentationIntensity phi;
            RasterImage out = simulate_target(img, stream, AugmentRanges{}, &phi);
            save_ppm(si_out, out);
            std::ofstream side(si_out + ".txt");
            side << "brightness = " << phi.brightness << "\n";
            side << "contrast = " << phi.contrast << "\n";
            side << "saturation = " << phi.saturation << "\n";
            side << "hue = " << phi.hue << "\n";
            side << "sigma = " << phi.sigma << "\n";
            side << "blend = " << phi.blend << "\n";
            std::cout << "wrote " << si_out << " and " << si_out << ".txt\n";
        } else if (*hm) {
            Checkpoint ckpt = load_checkpoint(hm_ckpt);
            emit_heatmap(ckpt, hm_image, hm_out);
            std::cout << "wrote " << hm_out << ".pgm, " << hm_out << "_overlay.ppm, " << hm_out
                      << ".txt\n";
        } else if (*rp) {
            LodoReport report = read_report_json(rp_in);
            std::string table = render_report(report);
            if (!rp_out.empty()) {
                std::ofstream out(rp_out);
                out << table;
            }
            std::cout << table;
        } else if (*dc) {
            TrainConfig cfg;
            std::cout << dump_train_config(cfg);
        }
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
