// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "iqt/pipeline.hpp"
#include "iqt/rng.hpp"

namespace fs = std::filesystem;

using iqt::BackboneSpec;
using iqt::ImageBuffer;
using iqt::Model;
using iqt::TransformerConfig;

namespace {

fs::path temp_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "iqt_test_pipeline";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

TransformerConfig tiny_config() {
    TransformerConfig cfg;
    cfg.layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_feat = 16;
    cfg.d_head = 8;
    return cfg;
}

Model<float> tiny_model(std::uint64_t seed = 303, std::size_t patch = 16) {
    return iqt::build_model<float>(tiny_config(), patch, BackboneSpec<float>::toy(2, 2, 8, seed + 7), iqt::Routing{},
                                   seed);
}

ImageBuffer random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    iqt::Rng rng(seed);
    ImageBuffer img(h, w);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform_int(256)) / 255.0f;
    return img;
}

bool covers_axis(const std::vector<std::size_t>& offsets, std::size_t dim, std::size_t patch) {
    std::size_t covered_to = 0;
    for (std::size_t off : offsets) {
        if (off > covered_to) return false;  // gap
        if (off + patch > dim) return false; // out of bounds
        covered_to = std::max(covered_to, off + patch);
    }
    return covered_to == dim;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// 8 synthetic pairs: one reference, a monotone noise ladder as distortions.
std::vector<iqt::ManifestRow> write_toy_dataset(const fs::path& dir, std::size_t size = 16) {
    fs::create_directories(dir);
    ImageBuffer ref = random_image(size, size, 555);
    iqt::encode_ppm(ref, dir / "ref.ppm");
    iqt::Rng noise_rng(777);
    ImageBuffer noise(size, size);
    for (auto& v : noise.data) v = static_cast<float>(noise_rng.uniform(-1.0, 1.0));

    std::string csv = "ref_path,dist_path,mos\n";
    for (int k = 0; k < 8; ++k) {
        ImageBuffer dist = ref;
        const float alpha = 0.5f * static_cast<float>(k) / 7.0f;
        for (std::size_t i = 0; i < dist.data.size(); ++i)
            dist.data[i] = std::clamp(dist.data[i] + alpha * noise.data[i], 0.0f, 1.0f);
        const std::string name = "dist" + std::to_string(k) + ".ppm";
        iqt::encode_ppm(dist, dir / name);
        csv += "ref.ppm," + name + "," + std::to_string(8 - k) + "\n";
    }
    const fs::path manifest = dir / "train.csv";
    iqt::binio::write_file(manifest, csv);
    return iqt::parse_manifest(manifest);
}

} // namespace

TEST_CASE("plan_patches: exact cover, no-overlap and overlap cases") {
    const auto one = iqt::plan_patches(256, 256, 256);
    CHECK(one.count() == 1);
    CHECK(one.offsets_y == std::vector<std::size_t>{0});
    CHECK(one.offsets_x == std::vector<std::size_t>{0});

    const auto four = iqt::plan_patches(512, 512, 256);
    CHECK(four.count() == 4);
    CHECK(four.offsets_y == std::vector<std::size_t>{0, 256});
    CHECK(four.offsets_x == std::vector<std::size_t>{0, 256});

    const auto overlap = iqt::plan_patches(500, 500, 256);
    CHECK(overlap.count() == 4);
    CHECK(overlap.offsets_y == std::vector<std::size_t>{0, 244});
    CHECK(overlap.offsets_x == std::vector<std::size_t>{0, 244});

    CHECK_THROWS_AS(iqt::plan_patches(255, 500, 256), std::invalid_argument);
}

TEST_CASE("plan_patches covers every pixel with in-bounds patches for random sizes") {
    iqt::Rng rng(151);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t patch = 8 + rng.uniform_int(64);
        const std::size_t h = patch + rng.uniform_int(3 * patch);
        const std::size_t w = patch + rng.uniform_int(3 * patch);
        const auto plan = iqt::plan_patches(h, w, patch);
        CHECK(covers_axis(plan.offsets_y, h, patch));
        CHECK(covers_axis(plan.offsets_x, w, patch));
        CHECK(plan.count() >= 1);
    }
}

TEST_CASE("augmentation: identity op, double flip, and the 90-degree permutation oracle") {
    const ImageBuffer img = random_image(6, 6, 157);

    const ImageBuffer same = iqt::apply_augment(img, {false, 0});
    CHECK(same.data == img.data);

    const ImageBuffer flipped_twice = iqt::flip_horizontal(iqt::flip_horizontal(img));
    CHECK(flipped_twice.data == img.data);

    // 2x2 asymmetric image: one clockwise quarter turn permutes (a b / c d)
    // to (c a / d b)
    ImageBuffer tiny(2, 2);
    for (std::size_t i = 0; i < tiny.data.size(); ++i) tiny.data[i] = static_cast<float>(i);
    const ImageBuffer rot = iqt::apply_augment(tiny, {false, 1});
    auto pixel = [](const ImageBuffer& im, std::size_t r, std::size_t c) {
        return std::vector<float>{im.at(r, c, 0), im.at(r, c, 1), im.at(r, c, 2)};
    };
    CHECK(pixel(rot, 0, 0) == pixel(tiny, 1, 0));
    CHECK(pixel(rot, 0, 1) == pixel(tiny, 0, 0));
    CHECK(pixel(rot, 1, 0) == pixel(tiny, 1, 1));
    CHECK(pixel(rot, 1, 1) == pixel(tiny, 0, 1));

    // four quarter turns are the identity
    const ImageBuffer full = iqt::apply_augment(img, {false, 4});
    CHECK(full.data == img.data);
}

TEST_CASE("augment_pair applies the identical transform to both images") {
    // dist is a pixelwise function of ref; the relation must survive any
    // shared spatial transform
    const ImageBuffer ref = random_image(8, 8, 163);
    ImageBuffer dist(8, 8);
    for (std::size_t i = 0; i < dist.data.size(); ++i) dist.data[i] = 1.0f - ref.data[i];

    iqt::Rng rng(167);
    for (int trial = 0; trial < 16; ++trial) {
        const auto [r2, d2] = iqt::augment_pair(ref, dist, rng);
        REQUIRE(r2.same_dims(d2));
        for (std::size_t i = 0; i < r2.data.size(); ++i) CHECK(d2.data[i] == 1.0f - r2.data[i]);
    }
}

TEST_CASE("forward_score: identical patches give a zero diff stream and a repeatable finite score") {
    Model<float> model = tiny_model();
    const ImageBuffer img = random_image(16, 16, 173);

    const auto f = iqt::extract_features(img, model.backbone);
    const auto [enc_feat, dec_feat] = iqt::select_streams(model, f, f, &img, &img);
    for (float v : enc_feat.data) CHECK(v == 0.0f); // diff stream
    CHECK(dec_feat.data == f.data);                 // ref stream

    const float s1 = iqt::forward_score(model, img, img).item();
    const float s2 = iqt::forward_score(model, img, img).item();
    CHECK(std::isfinite(s1));
    CHECK(s1 == s2);
}

TEST_CASE("forward_score is a pure function: interleaved calls do not disturb each other") {
    Model<float> model = tiny_model();
    const ImageBuffer a = random_image(16, 16, 179);
    const ImageBuffer b = random_image(16, 16, 181);
    const float sa = iqt::forward_score(model, a, b).item();
    const float sb = iqt::forward_score(model, b, a).item();
    CHECK(iqt::forward_score(model, a, b).item() == sa);
    CHECK(iqt::forward_score(model, b, a).item() == sb);
}

TEST_CASE("forward_score matches the manual composition of the stage ops") {
    Model<float> model = tiny_model();
    const ImageBuffer ref = random_image(16, 16, 191);
    const ImageBuffer dist = random_image(16, 16, 193);

    const float got = iqt::forward_score(model, ref, dist).item();

    const auto f_ref = iqt::extract_features(ref, model.backbone);
    const auto f_dist = iqt::extract_features(dist, model.backbone);
    const auto f_diff = iqt::diff_features(f_ref, f_dist);
    const auto xe = iqt::project_and_flatten(f_diff, model.embed.proj_w, model.embed.proj_b);
    const auto seq_e = iqt::assemble_sequence(xe, model.embed.quality_token_enc, model.embed.pos_enc);
    const auto enc_out = iqt::encoder_forward(seq_e, model.enc_layers, model.cfg);
    const auto xd = iqt::project_and_flatten(f_ref, model.embed.proj_w, model.embed.proj_b);
    const auto seq_d = iqt::assemble_sequence(xd, model.embed.quality_token_dec, model.embed.pos_dec);
    const auto dec_out = iqt::decoder_forward(seq_d, enc_out, model.dec_layers, model.cfg);
    const float want = iqt::head_forward(iqt::slice_rows(dec_out, 0, 1), model.head).item();

    CHECK(got == want);
}

TEST_CASE("score_pair: M = 1 equals the single patch score; uniform patches average to themselves") {
    Model<float> model = tiny_model();
    const ImageBuffer ref = random_image(16, 16, 197);
    const ImageBuffer dist = random_image(16, 16, 199);
    CHECK(iqt::score_pair(model, ref, dist) == static_cast<double>(iqt::forward_score(model, ref, dist).item()));

    // a uniform image tiles into identical patches, so the mean equals the
    // per-patch score
    ImageBuffer flat_ref(32, 32), flat_dist(32, 32);
    std::fill(flat_ref.data.begin(), flat_ref.data.end(), 0.25f);
    std::fill(flat_dist.data.begin(), flat_dist.data.end(), 0.75f);
    const double mean_score = iqt::score_pair(model, flat_ref, flat_dist);
    const double one = static_cast<double>(
        iqt::forward_score(model, iqt::crop(flat_ref, 0, 0, 16, 16), iqt::crop(flat_dist, 0, 0, 16, 16)).item());
    CHECK(mean_score == doctest::Approx(one).epsilon(1e-12));

    CHECK_THROWS_AS(iqt::score_pair(model, ref, random_image(32, 16, 211)), std::invalid_argument);
}

TEST_CASE("score_pair equals the manual average over the derived patch plan") {
    Model<float> model = tiny_model(19, 16);
    const ImageBuffer ref = random_image(30, 30, 213);
    const ImageBuffer dist = random_image(30, 30, 215);

    const auto plan = iqt::plan_patches(30, 30, 16);
    CHECK(plan.count() == 4);
    std::vector<double> scores;
    for (std::size_t oy : plan.offsets_y)
        for (std::size_t ox : plan.offsets_x)
            scores.push_back(static_cast<double>(
                iqt::forward_score(model, iqt::crop(ref, oy, ox, 16, 16), iqt::crop(dist, oy, ox, 16, 16)).item()));
    CHECK(iqt::score_pair(model, ref, dist) == iqt::pairwise_mean(scores));
}

TEST_CASE("checkpoint: save/load/save is byte-identical and forwards are bitwise stable") {
    Model<float> model = tiny_model(401);
    const ImageBuffer ref = random_image(16, 16, 405);
    const ImageBuffer dist = random_image(16, 16, 407);
    const float before = iqt::forward_score(model, ref, dist).item();

    const fs::path p1 = temp_dir() / "a.iqtc";
    const fs::path p2 = temp_dir() / "b.iqtc";
    iqt::save_checkpoint(iqt::make_checkpoint(model, 5), p1);
    iqt::Checkpoint ck = iqt::load_checkpoint(p1);
    CHECK(ck.train_step == 5);
    iqt::save_checkpoint(ck, p2);
    CHECK(file_bytes(p1) == file_bytes(p2));

    Model<float> restored = iqt::model_from_checkpoint(ck);
    CHECK(restored.patch_size == model.patch_size);
    CHECK(iqt::forward_score(restored, ref, dist).item() == before);
}

TEST_CASE("checkpoint: truncation and corruption report offsets") {
    Model<float> model = tiny_model(409);
    const fs::path full = temp_dir() / "full.iqtc";
    iqt::save_checkpoint(iqt::make_checkpoint(model, 0), full);
    const std::string bytes = file_bytes(full);

    const fs::path cut = temp_dir() / "cut.iqtc";
    iqt::binio::write_file(cut, bytes.substr(0, bytes.size() / 2));
    try {
        iqt::load_checkpoint(cut);
        FAIL("expected a format error");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("truncated") != std::string::npos);
        CHECK(msg.find("byte offset") != std::string::npos);
    }

    const fs::path bad = temp_dir() / "bad.iqtc";
    iqt::binio::write_file(bad, "IQTX" + bytes.substr(4));
    CHECK_THROWS_AS(iqt::load_checkpoint(bad), std::runtime_error);

    // version bump is rejected
    std::string v2 = bytes;
    v2[4] = 2;
    const fs::path vers = temp_dir() / "vers.iqtc";
    iqt::binio::write_file(vers, v2);
    try {
        iqt::load_checkpoint(vers);
        FAIL("expected a version error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
}

TEST_CASE("normalize_mos is strictly monotone and rejects constant targets") {
    const std::vector<double> mos{4.0, 1.0, 2.5, 9.0};
    const auto t = iqt::normalize_mos(mos);
    CHECK(t[3] == 1.0);
    CHECK(t[1] == 0.0);
    for (std::size_t i = 0; i < mos.size(); ++i)
        for (std::size_t j = 0; j < mos.size(); ++j)
            if (mos[i] < mos[j]) CHECK(t[i] < t[j]);
    CHECK_THROWS_AS(iqt::normalize_mos({2, 2, 2}), std::invalid_argument);
}

TEST_CASE("train: zero steps returns a checkpoint equal to the initialization") {
    const auto rows = write_toy_dataset(temp_dir() / "zero_steps");
    Model<float> model = tiny_model(411, 16);
    const iqt::Checkpoint init = iqt::make_checkpoint(model, 0);

    iqt::TrainConfig cfg;
    cfg.patch_size = 16;
    cfg.batch_size = 4;
    cfg.total_steps = 0;
    cfg.seed = 5;
    cfg.augment = false;
    const iqt::TrainResult result = iqt::train(model, rows, cfg);
    CHECK(result.log.empty());
    CHECK(iqt::encode_checkpoint(result.checkpoint) == iqt::encode_checkpoint(init));
}

TEST_CASE("train: same seed twice gives bitwise-identical checkpoints, and the loss drops") {
    const auto rows = write_toy_dataset(temp_dir() / "determinism");

    iqt::TrainConfig cfg;
    cfg.patch_size = 16;
    cfg.batch_size = 4;
    cfg.lr0 = 1e-3;
    cfg.total_steps = 40;
    cfg.seed = 6;
    cfg.augment = true;

    Model<float> m1 = tiny_model(413, 16);
    const iqt::TrainResult r1 = iqt::train(m1, rows, cfg);
    Model<float> m2 = tiny_model(413, 16);
    const iqt::TrainResult r2 = iqt::train(m2, rows, cfg);
    CHECK(iqt::encode_checkpoint(r1.checkpoint) == iqt::encode_checkpoint(r2.checkpoint));
    REQUIRE(r1.log.size() == 40);
    CHECK(r1.log.front().lr == cfg.lr0);

    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < 10; ++i) early += r1.log[i].mse;
    for (std::size_t i = 30; i < 40; ++i) late += r1.log[i].mse;
    CHECK(late < early);
}

TEST_CASE("train: unreadable rows are skipped with a warning, all-unreadable fails") {
    const fs::path dir = temp_dir() / "skip";
    auto rows = write_toy_dataset(dir);
    rows.push_back({(dir / "missing.ppm").string(), (dir / "missing2.ppm").string(), 3.0});

    Model<float> model = tiny_model(417, 16);
    iqt::TrainConfig cfg;
    cfg.patch_size = 16;
    cfg.batch_size = 2;
    cfg.total_steps = 1;
    cfg.augment = false;
    CHECK_NOTHROW(iqt::train(model, rows, cfg));

    std::vector<iqt::ManifestRow> all_bad{{(dir / "nope.ppm").string(), (dir / "nope2.ppm").string(), 1.0},
                                          {(dir / "nope3.ppm").string(), (dir / "nope4.ppm").string(), 2.0}};
    Model<float> m2 = tiny_model(419, 16);
    CHECK_THROWS_AS(iqt::train(m2, all_bad, cfg), std::runtime_error);
}

TEST_CASE("train rejects an empty manifest and mismatched patch size") {
    Model<float> model = tiny_model(421, 16);
    iqt::TrainConfig cfg;
    cfg.patch_size = 32;
    CHECK_THROWS_AS(iqt::train(model, {}, cfg), std::invalid_argument);
    const auto rows = write_toy_dataset(temp_dir() / "patchmismatch");
    CHECK_THROWS_AS(iqt::train(model, rows, cfg), std::invalid_argument);
}

TEST_CASE("feature-file backbone: training and scoring work from .iqtf inputs") {
    const fs::path dir = temp_dir() / "featmode";
    fs::create_directories(dir);

    // export features with a toy backbone, then train a feature-file model
    const auto toy = BackboneSpec<float>::toy(2, 2, 8, 431);
    std::string csv = "ref_path,dist_path,mos\n";
    iqt::Rng rng(433);
    for (int k = 0; k < 6; ++k) {
        const ImageBuffer ref = random_image(16, 16, 435);
        ImageBuffer dist = ref;
        for (auto& v : dist.data) v = std::clamp(v + static_cast<float>(k) * 0.05f * static_cast<float>(rng.uniform()), 0.0f, 1.0f);
        iqt::save_feature_file(iqt::extract_features(ref, toy), dir / ("r" + std::to_string(k) + ".iqtf"));
        iqt::save_feature_file(iqt::extract_features(dist, toy), dir / ("d" + std::to_string(k) + ".iqtf"));
        csv += "r" + std::to_string(k) + ".iqtf,d" + std::to_string(k) + ".iqtf," + std::to_string(6 - k) + "\n";
    }
    const fs::path manifest = dir / "train.csv";
    iqt::binio::write_file(manifest, csv);
    const auto rows = iqt::parse_manifest(manifest);

    BackboneSpec<float> ff = BackboneSpec<float>::feature_file();
    ff.stages = 2;
    ff.stage_channels = 2;
    ff.downsample = 8;
    Model<float> model = iqt::build_model<float>(tiny_config(), 16, ff, iqt::Routing{}, 437);

    iqt::TrainConfig cfg;
    cfg.patch_size = 16;
    cfg.batch_size = 4;
    cfg.total_steps = 5;
    cfg.seed = 11;
    cfg.augment = false;
    CHECK_NOTHROW(iqt::train(model, rows, cfg));

    const double s = iqt::score_manifest_row(model, rows[0]);
    CHECK(std::isfinite(s));
    CHECK(s == iqt::score_manifest_row(model, rows[0]));
}
