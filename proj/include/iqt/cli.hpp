// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. Subcommands: train, score, eval, ablate, attn-export,
// extract-features. Model hyper-parameters come from --preset / a key=value
// config file (default path in $IQT_CONFIG) / individual flags, with flags
// winning over file values. Exit codes: 0 success, 1 runtime failure,
// 2 usage error.

#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "iqt/config.hpp"
#include "iqt/eval.hpp"
#include "iqt/image.hpp"
#include "iqt/manifest.hpp"
#include "iqt/model.hpp"
#include "iqt/pipeline.hpp"

namespace iqt::cli {

namespace detail {

// Shared model/run configuration flags. Values are raw strings validated by
// apply_config_key, so file keys and flags share one parser.
class ConfigFlags {
public:
    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path_, "key = value config file ($IQT_CONFIG when unset)");
        auto opt = [this, cmd](const char* flag, const char* key, const char* desc) {
            cmd->add_option_function<std::string>(
                flag, [this, key](const std::string& v) { values_[key] = v; }, desc);
        };
        opt("--preset", "preset", "model preset: iqt|iqt-c");
        opt("--seed", "seed", "global seed (default 1)");
        opt("--patch", "patch_size", "training/inference patch size");
        opt("--layers", "layers", "encoder/decoder layer count L");
        opt("--heads", "n_heads", "attention head count");
        opt("--d-model", "d_model", "transformer width D");
        opt("--d-feat", "d_feat", "feed-forward width D_feat");
        opt("--d-head", "d_head", "prediction head hidden width D_head");
        opt("--backbone", "backbone_kind", "backbone kind: toy|feature-file");
        opt("--backbone-stages", "backbone_stages", "toy backbone stage count S");
        opt("--backbone-channels", "backbone_channels", "toy backbone per-stage channels c");
        opt("--backbone-downsample", "backbone_downsample", "toy backbone downsample factor");
        opt("--batch", "batch_size", "training batch size");
        opt("--lr0", "lr0", "initial learning rate");
        opt("--steps", "total_steps", "total training steps");
        opt("--augment", "augment", "paired augmentation: 0|1");
        opt("--enc-stream", "enc_stream", "encoder input: dist|ref|diff");
        opt("--dec-stream", "dec_stream", "decoder input: dist|ref|diff");
        opt("--diff-level", "diff_level", "difference level: feature|image");
    }

    RunConfig resolve(const RunConfig& base = RunConfig{}) const {
        RunConfig cfg = base;
        std::string file = config_path_;
        if (file.empty()) {
            const char* env = std::getenv("IQT_CONFIG");
            if (env != nullptr && *env != '\0') file = env;
        }
        if (!file.empty()) apply_config_file(cfg, file);
        // preset first so explicit dimension flags override it
        auto it = values_.find("preset");
        if (it != values_.end()) apply_config_key(cfg, "preset", it->second);
        for (const auto& [key, value] : values_) {
            if (key == "preset") continue;
            apply_config_key(cfg, key, value);
        }
        return cfg;
    }

private:
    std::string config_path_;
    std::map<std::string, std::string> values_;
};

inline std::filesystem::path ensure_out_dir(const std::string& out_dir) {
    std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline Model<float> load_model(const std::string& ckpt_path) {
    return model_from_checkpoint(load_checkpoint(ckpt_path));
}

// Maps a routing back to its ablation row id, "custom" when it is none of
// the nine shipped configurations.
inline std::string routing_config_id(const Routing& r) {
    for (const AblationConfig& c : ablation_suite()) {
        if (c.encoder_stream == r.encoder_stream && c.decoder_stream == r.decoder_stream &&
            c.diff_level == r.diff_level)
            return std::to_string(c.id);
    }
    return "custom";
}

inline int run_train(const std::string& manifest, const std::string& out_dir, const ConfigFlags& flags) {
    const RunConfig cfg = flags.resolve();
    const std::vector<ManifestRow> rows = parse_manifest(manifest);
    Model<float> model = build_model<float>(cfg.tf, cfg.patch_size, cfg.build_backbone(), cfg.routing(),
                                            cfg.model_seed());
    TrainConfig tc;
    tc.patch_size = cfg.patch_size;
    tc.batch_size = cfg.batch_size;
    tc.lr0 = cfg.lr0;
    tc.total_steps = cfg.total_steps;
    tc.seed = cfg.train_seed();
    tc.augment = cfg.augment;
    TrainResult result = train(model, rows, tc);

    const auto dir = ensure_out_dir(out_dir);
    save_checkpoint(result.checkpoint, dir / "checkpoint.iqtc");
    binio::write_file(dir / "loss_log.csv", format_loss_log_csv(result.log));
    if (result.log.empty())
        std::cout << "trained 0 steps, checkpoint written to " << (dir / "checkpoint.iqtc").string() << "\n";
    else
        std::cout << "final mse " << result.log.back().mse << " after " << result.log.size()
                  << " steps, checkpoint written to " << (dir / "checkpoint.iqtc").string() << "\n";
    return 0;
}

inline int run_score(const std::string& ref, const std::string& dist, const std::string& ckpt) {
    Model<float> model = load_model(ckpt);
    ManifestRow row;
    row.ref_path = ref;
    row.dist_path = dist;
    const double score = score_manifest_row(model, row);
    std::printf("%.9g\n", score);
    return 0;
}

inline int run_eval(const std::string& manifest, const std::string& ckpt, const std::string& out_dir) {
    Model<float> model = load_model(ckpt);
    const std::vector<ManifestRow> rows = parse_manifest(manifest);
    const CorrelationReport report = evaluate(rows, model);
    const auto dir = ensure_out_dir(out_dir);
    write_report_csv({{routing_config_id(model.routing), report}}, dir / "report.csv");
    std::printf("srcc=%.6f krcc=%.6f plcc=%.6f main_score=%.6f n=%zu\n", report.srcc, report.krcc, report.plcc,
                report.main_score, report.n_samples);
    return 0;
}

inline int run_ablate(const std::string& train_manifest, const std::string& eval_manifest,
                      const std::string& out_dir, const ConfigFlags& flags) {
    // Reduced shared budget by default; flags and config files override.
    RunConfig base;
    base.preset = "tiny";
    base.tf.layers = 1;
    base.tf.n_heads = 2;
    base.tf.d_model = 32;
    base.tf.d_feat = 64;
    base.tf.d_head = 32;
    base.patch_size = 32;
    base.backbone_stages = 2;
    base.backbone_channels = 2;
    base.backbone_downsample = 8;
    base.batch_size = 8;
    base.total_steps = 100;
    base.augment = false;
    const RunConfig cfg = flags.resolve(base);

    AblationSettings settings;
    settings.tf = cfg.tf;
    settings.patch_size = cfg.patch_size;
    settings.backbone_stages = cfg.backbone_stages;
    settings.backbone_channels = cfg.backbone_channels;
    settings.backbone_downsample = cfg.backbone_downsample;
    settings.seed = cfg.model_seed();
    settings.train_cfg.patch_size = cfg.patch_size;
    settings.train_cfg.batch_size = cfg.batch_size;
    settings.train_cfg.lr0 = cfg.lr0;
    settings.train_cfg.total_steps = cfg.total_steps;
    settings.train_cfg.seed = cfg.train_seed();
    settings.train_cfg.augment = cfg.augment;

    const std::vector<ManifestRow> train_rows = parse_manifest(train_manifest);
    const std::vector<ManifestRow> eval_rows = parse_manifest(eval_manifest);
    const std::vector<AblationRow> rows = run_ablation(train_rows, eval_rows, settings);

    const auto dir = ensure_out_dir(out_dir);
    write_report_csv(ablation_report_rows(rows), dir / "ablation_report.csv");
    const std::string table = format_ablation_table(rows);
    binio::write_file(dir / "ablation_table.txt", table);
    std::cout << table;
    return 0;
}

inline int run_attn_export(const std::string& ref, const std::string& dist, const std::string& ckpt,
                           const std::string& out_dir) {
    Model<float> model = load_model(ckpt);
    AttentionTrace<float> trace;
    std::size_t out_h = model.patch_size, out_w = model.patch_size;
    if (model.backbone.kind == BackboneKind::FeatureFile) {
        FeatureMap<float> f_ref = load_feature_file<float>(ref);
        FeatureMap<float> f_dist = load_feature_file<float>(dist);
        auto [enc_feat, dec_feat] = select_streams(model, f_ref, f_dist, nullptr, nullptr);
        score_from_features(model, enc_feat, dec_feat, &trace);
    } else {
        ImageBuffer ref_img = decode_ppm(ref);
        ImageBuffer dist_img = decode_ppm(dist);
        if (!ref_img.same_dims(dist_img)) throw std::runtime_error("attn-export: image dimensions differ");
        if (ref_img.height < model.patch_size || ref_img.width < model.patch_size)
            throw std::runtime_error("attn-export: image smaller than model patch size");
        // center crop, matching how the attention examples are produced
        const std::size_t top = (ref_img.height - model.patch_size) / 2;
        const std::size_t left = (ref_img.width - model.patch_size) / 2;
        ImageBuffer rp = crop(ref_img, top, left, model.patch_size, model.patch_size);
        ImageBuffer dp = crop(dist_img, top, left, model.patch_size, model.patch_size);
        forward_score(model, rp, dp, &trace);
    }
    const HeatMap map = export_attention(trace, model.grid_h, model.grid_w, out_h, out_w);
    const auto dir = ensure_out_dir(out_dir);
    const auto path = dir / "attention.pgm";
    write_heatmap_pgm(map, path);
    std::cout << path.string() << "\n";
    return 0;
}

inline int run_extract_features(const std::string& image, const std::string& out_dir, const std::string& ckpt,
                                const std::string& name, const ConfigFlags& flags) {
    BackboneSpec<float> backbone = [&]() {
        if (!ckpt.empty()) {
            Model<float> model = load_model(ckpt);
            if (model.backbone.kind != BackboneKind::ToyCnn)
                throw std::runtime_error("extract-features: checkpoint does not carry an image backbone");
            return model.backbone;
        }
        const RunConfig cfg = flags.resolve();
        BackboneSpec<float> spec = cfg.build_backbone();
        if (spec.kind != BackboneKind::ToyCnn)
            throw std::runtime_error("extract-features: needs a toy backbone (got feature-file)");
        return spec;
    }();
    const ImageBuffer img = decode_ppm(image);
    const FeatureMap<float> f = extract_features(img, backbone);
    const auto dir = ensure_out_dir(out_dir);
    std::string stem = name.empty() ? std::filesystem::path(image).stem().string() + ".iqtf" : name;
    const auto path = dir / stem;
    save_feature_file(f, path);
    std::cout << path.string() << " (" << f.height << "x" << f.width << "x" << f.channels << ")\n";
    return 0;
}

} // namespace detail

// Parses argv (program name excluded) and runs the selected subcommand.
inline int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"IQT: full-reference image quality scoring with a transformer encoder-decoder"};
    app.require_subcommand(1);

    detail::ConfigFlags train_flags, ablate_flags, extract_flags;

    auto* sc_train = app.add_subcommand("train", "train a model from a dataset manifest");
    std::string train_manifest, train_out;
    sc_train->add_option("--manifest", train_manifest, "CSV manifest: ref_path,dist_path,mos")->required();
    sc_train->add_option("--out-dir", train_out, "output directory (created)")->required();
    train_flags.attach(sc_train);

    auto* sc_score = app.add_subcommand("score", "score one reference/distorted pair");
    std::string score_ref, score_dist, score_ckpt;
    sc_score->add_option("--ref", score_ref, "reference image (.ppm) or feature file (.iqtf)")->required();
    sc_score->add_option("--dist", score_dist, "distorted image (.ppm) or feature file (.iqtf)")->required();
    sc_score->add_option("--ckpt", score_ckpt, "model checkpoint (.iqtc)")->required();

    auto* sc_eval = app.add_subcommand("eval", "evaluate a model on a manifest (SRCC/KRCC/PLCC)");
    std::string eval_manifest, eval_ckpt, eval_out;
    sc_eval->add_option("--manifest", eval_manifest, "CSV manifest")->required();
    sc_eval->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
    sc_eval->add_option("--out-dir", eval_out, "output directory (created)")->required();

    auto* sc_ablate = app.add_subcommand("ablate", "train/evaluate all input routings plus image-level diff");
    std::string abl_train, abl_eval, abl_out;
    sc_ablate->add_option("--train-manifest", abl_train, "training manifest")->required();
    sc_ablate->add_option("--eval-manifest", abl_eval, "evaluation manifest")->required();
    sc_ablate->add_option("--out-dir", abl_out, "output directory (created)")->required();
    ablate_flags.attach(sc_ablate);

    auto* sc_attn = app.add_subcommand("attn-export", "export the averaged attention heat map as P5 .pgm");
    std::string attn_ref, attn_dist, attn_ckpt, attn_out;
    sc_attn->add_option("--ref", attn_ref, "reference image or feature file")->required();
    sc_attn->add_option("--dist", attn_dist, "distorted image or feature file")->required();
    sc_attn->add_option("--ckpt", attn_ckpt, "model checkpoint")->required();
    sc_attn->add_option("--out-dir", attn_out, "output directory (created)")->required();

    auto* sc_extract = app.add_subcommand("extract-features", "run the toy backbone and write an .iqtf feature file");
    std::string ex_image, ex_out, ex_ckpt, ex_name;
    sc_extract->add_option("--image", ex_image, "input image (.ppm)")->required();
    sc_extract->add_option("--out-dir", ex_out, "output directory (created)")->required();
    sc_extract->add_option("--ckpt", ex_ckpt, "take the backbone from this checkpoint");
    sc_extract->add_option("--name", ex_name, "output file name (default: <image stem>.iqtf)");
    extract_flags.attach(sc_extract);

    std::vector<const char*> argv;
    argv.push_back("iqt");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sc_train->parsed()) return detail::run_train(train_manifest, train_out, train_flags);
        if (sc_score->parsed()) return detail::run_score(score_ref, score_dist, score_ckpt);
        if (sc_eval->parsed()) return detail::run_eval(eval_manifest, eval_ckpt, eval_out);
        if (sc_ablate->parsed()) return detail::run_ablate(abl_train, abl_eval, abl_out, ablate_flags);
        if (sc_attn->parsed()) return detail::run_attn_export(attn_ref, attn_dist, attn_ckpt, attn_out);
        if (sc_extract->parsed())
            return detail::run_extract_features(ex_image, ex_out, ex_ckpt, ex_name, extract_flags);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand selected\n";
    return 2;
}

} // namespace iqt::cli
