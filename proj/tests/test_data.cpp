#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "peftforge/data.hpp"
#include "peftforge/train.hpp"
#include "test_util.hpp"

using namespace peft;
using testutil::bit_equal;
using testutil::rand_tensor;

namespace {

namespace fs = std::filesystem;

void write_ppm(const fs::path& path, int w, int h, unsigned char r, unsigned char g,
               unsigned char b) {
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << w << " " << h << "\n255\n";
    for (int i = 0; i < w * h; ++i) {
        out.put(static_cast<char>(r));
        out.put(static_cast<char>(g));
        out.put(static_cast<char>(b));
    }
}

}  // namespace

TEST_SUITE_BEGIN("data");

TEST_CASE("normalization anchor values") {
    auto imagenet = NormalizationSpec::preset("imagenet");
    auto img = Tensor<double>::from_data({3, 1, 1}, {0.485, 0.456, 0.406});
    auto out = normalize_image(img, imagenet);
    for (double v : out.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

    auto red = Tensor<double>::from_data({3, 1, 1}, {1.0, 0.0, 0.0});
    auto out2 = normalize_image(red, imagenet);
    CHECK(out2.data()[0] == doctest::Approx((1.0 - 0.485) / 0.229).epsilon(1e-9));
    CHECK(out2.data()[0] == doctest::Approx(2.2489).epsilon(1e-4));

    CHECK_THROWS_AS(NormalizationSpec::preset("zscore"), ConfigError);
}

TEST_CASE("inception normalization maps [0,1] strictly into [-1,1]") {
    auto inception = NormalizationSpec::preset("inception");
    Rng rng(1);
    for (int i = 0; i < 100000; ++i) {
        auto img = rand_tensor<double>(rng, {3, 2, 2}, false, 0, 1);
        auto out = normalize_image(img, inception);
        for (double v : out.data()) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("flip is an involution and resize to same size is near-identity") {
    Rng rng(2);
    auto img = rand_tensor<double>(rng, {3, 9, 7}, false, 0, 1);
    CHECK(bit_equal(horizontal_flip(horizontal_flip(img)), img));

    auto same = resize(rand_tensor<double>(rng, {3, 8, 8}, false, 0, 1), 8);
    auto src = resize(same, 8);
    CHECK(testutil::max_abs_diff(same.data(), src.data()) < 1e-6);
}

TEST_CASE("crop with pinned full-area parameters equals plain resize") {
    Rng rng(3);
    auto img = rand_tensor<double>(rng, {3, 12, 12}, false, 0, 1);
    auto cropped = resized_crop(img, 0, 0, 12, 12, 8);
    auto resized = resize(img, 8);
    CHECK(testutil::max_abs_diff(cropped.data(), resized.data()) == 0.0);
    CHECK_THROWS_AS(resized_crop(img, 4, 4, 12, 12, 8), ContractError);
    CHECK_THROWS_AS(resize(img, 0), ContractError);
}

TEST_CASE("random resized crop stays in range and is deterministic per seed") {
    Rng rng(4);
    auto img = rand_tensor<double>(rng, {3, 16, 16}, false, 0, 1);
    Rng a(9), b(9);
    auto ca = random_resized_crop(img, 8, a);
    auto cb = random_resized_crop(img, 8, b);
    CHECK(bit_equal(ca, cb));
    REQUIRE(ca.shape() == Shape{3, 8, 8});
}

TEST_CASE("synthetic transfer pair: shapes, splits, determinism") {
    Rng rng(7);
    auto [source, target] = synth_transfer_pair<double>(rng, 4, 40, 12, 12, ShiftKind::rotate);
    CHECK(source.train.size() == 40);
    CHECK(source.val.size() == 12);
    CHECK(source.test.size() == 12);
    CHECK(target.train.class_count == 4);
    source.train.validate();
    target.test.validate();

    SUBCASE("splits are pairwise disjoint as tensors") {
        auto key = [](const Sample<double>& s) {
            double acc = 0;
            for (double v : s.image.data()) acc += v;
            return acc;
        };
        for (const auto& a : source.train.samples) {
            for (const auto& b : source.val.samples) {
                CHECK(key(a) != key(b));
            }
        }
    }
    SUBCASE("same seed regenerates identical bundles") {
        Rng rng2(7);
        auto [s2, t2] = synth_transfer_pair<double>(rng2, 4, 40, 12, 12, ShiftKind::rotate);
        CHECK(bit_equal(source.train.samples[0].image, s2.train.samples[0].image));
        CHECK(bit_equal(target.test.samples[5].image, t2.test.samples[5].image));
    }
    SUBCASE("zero shift means the target generator matches the source") {
        SynthTaskParams<double> p;
        p.classes = 4;
        Rng g1(123), g2(123);
        auto a = synth_sample(p, detail::SynthDomain{}, 2, g1);
        auto b = synth_sample(p, detail::shifted_domain(ShiftKind::none), 2, g2);
        CHECK(bit_equal(a.image, b.image));
    }
    CHECK_THROWS_AS(synth_transfer_pair<double>(rng, 1, 10, 5, 5, ShiftKind::none), ContractError);
}

TEST_CASE("pipeline: train-time-only augmentation and batch determinism") {
    Rng rng(8);
    auto img = rand_tensor<double>(rng, {3, 12, 12}, false, 0, 1);
    Sample<double> sample{img, 0};
    InputPipeline<double> pipe;
    pipe.aug.policy = AugmentationSpec::Policy::fgvc_crop_flip;
    pipe.aug.target_size = 8;
    pipe.norm = NormalizationSpec::preset("inception");

    // eval path never crops or flips: it is exactly resize + normalize
    auto eval1 = pipe.prepare_eval(sample);
    auto expect = normalize_image(resize(img, 8), pipe.norm);
    CHECK(bit_equal(eval1, expect));

    Rng a(3), b(3);
    CHECK(bit_equal(pipe.prepare_train(sample, a), pipe.prepare_train(sample, b)));
}

TEST_CASE("linear probe on frozen random features beats chance on the source task") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng data_rng(50);
        auto [source, target] = synth_transfer_pair<float>(data_rng, 3, 120, 60, 60, ShiftKind::none);
        (void)target;
        BackboneConfig bc;
        bc.image_size = 32;
        bc.patch_size = 8;
        bc.hidden_dim = 32;
        bc.num_layers = 2;
        bc.num_heads = 2;
        bc.ffn_expansion = 2;
        bc.drop_path_max = 0.0;
        Rng init(seed);
        VisionTransformer<float> model(bc, 3, init);
        freeze_backbone(model);
        TrainConfig cfg;
        cfg.mode = TuneMode::linear;
        cfg.batch_size = 20;
        cfg.total_epochs = 6;
        cfg.warmup_epochs = 1;
        Trainer<VisionTransformer<float>> trainer(model, cfg, static_cast<int>(source.train.size()));
        InputPipeline<float> pipe;
        pipe.aug.target_size = 32;
        pipe.norm = NormalizationSpec::preset("inception");
        Rng train_rng(seed + 7);
        for (int e = 0; e < cfg.total_epochs; ++e) trainer.train_epoch(source.train, pipe, train_rng);
        const double acc = trainer.evaluate(source.val, pipe);
        INFO("seed ", seed, " acc ", acc);
        CHECK(acc > 1.0 / 3.0);
    }
}

TEST_CASE("image folder ingestion") {
    const auto root = fs::temp_directory_path() / "peftforge_folder_test";
    fs::remove_all(root);
    fs::create_directories(root / "cats");
    fs::create_directories(root / "dogs");
    fs::create_directories(root / "empty");
    write_ppm(root / "cats" / "a.ppm", 4, 4, 255, 0, 0);
    write_ppm(root / "cats" / "b.ppm", 4, 4, 0, 255, 0);
    write_ppm(root / "dogs" / "a.ppm", 4, 4, 0, 0, 255);

    SUBCASE("classes index alphabetically, pixels decode to [0,1]") {
        FolderLoadReport report;
        auto ds = load_image_folder<double>(root.string(), &report);
        CHECK(ds.class_count == 3);
        REQUIRE(ds.samples.size() == 3);
        CHECK(report.class_names == std::vector<std::string>{"cats", "dogs", "empty"});
        REQUIRE(report.warnings.size() == 1);
        CHECK(report.warnings[0].find("empty") != std::string::npos);
        // cats == label 0, red channel-major
        CHECK(ds.samples[0].label == 0);
        CHECK(ds.samples[0].image.data()[0] == doctest::Approx(1.0));
        CHECK(ds.samples[0].image.data()[16] == doctest::Approx(0.0));  // G plane
        CHECK(ds.samples[2].label == 1);
    }
    SUBCASE("unreadable files produce an itemized error") {
        std::ofstream bad(root / "dogs" / "broken.ppm");
        bad << "not an image";
        bad.close();
        CHECK_THROWS_WITH_AS(load_image_folder<double>(root.string()),
                             doctest::Contains("broken.ppm"), IoError);
    }
    SUBCASE("missing root raises") {
        CHECK_THROWS_AS(load_image_folder<double>((root / "nowhere").string()), IoError);
    }
    fs::remove_all(root);
}

TEST_SUITE_END();
