// SPDX-License-Identifier: Apache-2.0
//
// Benchmark evaluation and the ablation harness: scores a manifest, computes
// the correlation report, and sweeps the eight (encoder, decoder) input
// routings plus the image-level difference variant under identical seeds and
// budgets.

#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "iqt/binio.hpp"
#include "iqt/manifest.hpp"
#include "iqt/metrics.hpp"
#include "iqt/model.hpp"
#include "iqt/pipeline.hpp"

namespace iqt {

// Scores every row with `score_fn`, skipping rows whose scoring throws, and
// reduces to a correlation report. Fewer than `min_rows` usable rows is fatal.
template <typename ScoreFn>
CorrelationReport evaluate_rows(const std::vector<ManifestRow>& rows, ScoreFn&& score_fn,
                                std::vector<double>* predictions_out = nullptr, std::size_t min_rows = 5) {
    std::vector<double> preds;
    std::vector<double> mos;
    preds.reserve(rows.size());
    mos.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        try {
            preds.push_back(score_fn(rows[i]));
            mos.push_back(rows[i].mos);
        } catch (const std::exception& e) {
            std::cerr << "evaluate: skipping row " << (i + 1) << ": " << e.what() << "\n";
        }
    }
    if (preds.size() < min_rows)
        throw std::runtime_error("evaluate: only " + std::to_string(preds.size()) + " usable rows (need >= " +
                                 std::to_string(min_rows) + ")");
    if (predictions_out != nullptr) *predictions_out = preds;
    return correlation_report(preds, mos);
}

template <typename T>
CorrelationReport evaluate(const std::vector<ManifestRow>& rows, const Model<T>& model,
                           std::vector<double>* predictions_out = nullptr) {
    return evaluate_rows(
        rows, [&model](const ManifestRow& row) { return score_manifest_row(model, row); }, predictions_out);
}

// ---------------------------------------------------------------------------
// Report CSV

struct ReportRow {
    std::string config_id;
    CorrelationReport report;
};

// `config_id,srcc,krcc,plcc,main_score,n`; values carry max_digits10 so the
// emitted main_score parses back to exactly plcc + srcc.
inline std::string format_report_csv(const std::vector<ReportRow>& rows) {
    std::string out = "config_id,srcc,krcc,plcc,main_score,n\n";
    char buf[256];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g,%zu\n", row.config_id.c_str(), row.report.srcc,
                      row.report.krcc, row.report.plcc, row.report.main_score, row.report.n_samples);
        out += buf;
    }
    return out;
}

inline void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
    binio::write_file(path, format_report_csv(rows));
}

// ---------------------------------------------------------------------------
// Ablation suite

struct AblationConfig {
    int id = 0;
    Stream encoder_stream = Stream::Diff;
    Stream decoder_stream = Stream::Ref;
    DiffLevel diff_level = DiffLevel::Feature;

    Routing routing() const { return Routing{encoder_stream, decoder_stream, diff_level}; }
};

// Rows (1)-(8): every (encoder, decoder) input routing of the published
// comparison. Row (7), diff -> encoder and ref -> decoder, is the shipped
// default.
inline std::vector<AblationConfig> table3_routings() {
    return {
        {1, Stream::Dist, Stream::Dist, DiffLevel::Feature},
        {2, Stream::Dist, Stream::Ref, DiffLevel::Feature},
        {3, Stream::Ref, Stream::Dist, DiffLevel::Feature},
        {4, Stream::Dist, Stream::Diff, DiffLevel::Feature},
        {5, Stream::Ref, Stream::Diff, DiffLevel::Feature},
        {6, Stream::Diff, Stream::Dist, DiffLevel::Feature},
        {7, Stream::Diff, Stream::Ref, DiffLevel::Feature},
        {8, Stream::Diff, Stream::Diff, DiffLevel::Feature},
    };
}

// The eight feature-level routings plus the image-level difference variant of
// the default routing (id 9).
inline std::vector<AblationConfig> ablation_suite() {
    auto configs = table3_routings();
    configs.push_back({9, Stream::Diff, Stream::Ref, DiffLevel::Image});
    return configs;
}

// Which concrete input a selected stream turned out to be, established by
// bitwise comparison against independently computed candidates.
enum class ProbedStream { Dist, Ref, FeatureDiff, ImageDiff, Unknown };

inline const char* probed_stream_name(ProbedStream s) {
    switch (s) {
        case ProbedStream::Dist: return "dist";
        case ProbedStream::Ref: return "ref";
        case ProbedStream::FeatureDiff: return "feature-diff";
        case ProbedStream::ImageDiff: return "image-diff";
        case ProbedStream::Unknown: return "unknown";
    }
    return "?";
}

struct RoutingProbe {
    ProbedStream encoder = ProbedStream::Unknown;
    ProbedStream decoder = ProbedStream::Unknown;
};

// Runs the real stream-selection path on probe inputs and identifies, bitwise,
// which candidate reached each stack. No training involved.
inline RoutingProbe probe_routing(const AblationConfig& cfg, std::uint64_t seed = 99) {
    BackboneSpec<float> backbone = BackboneSpec<float>::toy(2, 2, 4, seed);
    const std::size_t patch = 16;
    TransformerConfig tf;
    tf.layers = 1;
    tf.n_heads = 2;
    tf.d_model = 8;
    tf.d_feat = 16;
    tf.d_head = 8;
    Model<float> m = build_model<float>(tf, patch, backbone, cfg.routing(), seed);

    Rng rng(seed + 1);
    ImageBuffer ref(patch, patch), dist(patch, patch);
    for (auto& v : ref.data) v = static_cast<float>(rng.uniform());
    for (auto& v : dist.data) v = static_cast<float>(rng.uniform());

    const FeatureMap<float> f_ref = extract_features(ref, m.backbone);
    const FeatureMap<float> f_dist = extract_features(dist, m.backbone);
    const FeatureMap<float> f_diff = diff_features(f_ref, f_dist);
    ImageBuffer dimg(patch, patch);
    for (std::size_t i = 0; i < dimg.data.size(); ++i) dimg.data[i] = (ref.data[i] - dist.data[i] + 1.0f) * 0.5f;
    const FeatureMap<float> f_img_diff = extract_features(dimg, m.backbone);

    auto [enc_feat, dec_feat] = select_streams(m, f_ref, f_dist, &ref, &dist);
    auto identify = [&](const FeatureMap<float>& f) {
        auto same = [](const FeatureMap<float>& a, const FeatureMap<float>& b) {
            return a.same_shape(b) && a.data == b.data;
        };
        if (same(f, f_dist)) return ProbedStream::Dist;
        if (same(f, f_ref)) return ProbedStream::Ref;
        if (same(f, f_diff)) return ProbedStream::FeatureDiff;
        if (same(f, f_img_diff)) return ProbedStream::ImageDiff;
        return ProbedStream::Unknown;
    };
    return {identify(enc_feat), identify(dec_feat)};
}

// ---------------------------------------------------------------------------
// Ablation harness

struct AblationSettings {
    TransformerConfig tf;
    std::size_t patch_size = 32;
    std::size_t backbone_stages = 2;
    std::size_t backbone_channels = 2;
    std::size_t backbone_downsample = 8;
    std::uint64_t seed = 1;
    TrainConfig train_cfg;
};

struct AblationRow {
    AblationConfig config;
    bool failed = false;
    std::string error;
    CorrelationReport report;
};

// Trains and evaluates every suite config under identical seeds and budgets.
// A config that fails is marked and the sweep continues.
inline std::vector<AblationRow> run_ablation(const std::vector<ManifestRow>& train_rows,
                                             const std::vector<ManifestRow>& eval_rows,
                                             const AblationSettings& settings) {
    std::vector<AblationRow> out;
    for (const AblationConfig& cfg : ablation_suite()) {
        AblationRow row;
        row.config = cfg;
        try {
            BackboneSpec<float> backbone =
                BackboneSpec<float>::toy(settings.backbone_stages, settings.backbone_channels,
                                         settings.backbone_downsample, settings.seed + 1000003);
            Model<float> model =
                build_model<float>(settings.tf, settings.patch_size, std::move(backbone), cfg.routing(), settings.seed);
            TrainConfig tc = settings.train_cfg;
            tc.patch_size = settings.patch_size;
            train(model, train_rows, tc);
            row.report = evaluate(eval_rows, model);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
            std::cerr << "ablation config (" << cfg.id << ") failed: " << e.what() << "\n";
        }
        out.push_back(std::move(row));
    }
    return out;
}

// Plain-text table mirroring the published ablation layout: one row per
// config, x marks under the encoder/decoder stream columns.
inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::string out;
    out += "      |      Encoder       |      Decoder       |\n";
    out += " No.  | dist | ref  | diff | dist | ref  | diff | diff.lvl |    SRCC    KRCC    PLCC    main\n";
    out += "------+------+------+------+------+------+------+----------+---------------------------------\n";
    char buf[256];
    for (const auto& row : rows) {
        auto mark = [](bool b) { return b ? "  x " : "    "; };
        const AblationConfig& c = row.config;
        std::snprintf(buf, sizeof(buf), " (%d)  | %s | %s | %s | %s | %s | %s | %-8s |", c.id,
                      mark(c.encoder_stream == Stream::Dist), mark(c.encoder_stream == Stream::Ref),
                      mark(c.encoder_stream == Stream::Diff), mark(c.decoder_stream == Stream::Dist),
                      mark(c.decoder_stream == Stream::Ref), mark(c.decoder_stream == Stream::Diff),
                      c.diff_level == DiffLevel::Feature ? "feature" : "image");
        out += buf;
        if (row.failed) {
            out += "  FAILED: " + row.error + "\n";
        } else {
            std::snprintf(buf, sizeof(buf), "  %7.4f %7.4f %7.4f %7.4f\n", row.report.srcc, row.report.krcc,
                          row.report.plcc, row.report.main_score);
            out += buf;
        }
    }
    return out;
}

inline std::vector<ReportRow> ablation_report_rows(const std::vector<AblationRow>& rows) {
    std::vector<ReportRow> out;
    for (const auto& row : rows) {
        if (row.failed) continue;
        out.push_back({std::to_string(row.config.id), row.report});
    }
    return out;
}

} // namespace iqt
