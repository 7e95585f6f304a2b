#include <fstream>

#include "doctest_torch.hpp"
#include "expredit/infer_eval.hpp"
#include "expredit/training.hpp"
#include "support.hpp"

using namespace expredit;
namespace fs = std::filesystem;

namespace {

AUVector au_with(int j, double v) { return AUVector::zeros().with(static_cast<size_t>(j), v); }

std::vector<AUVector> series(const std::vector<double>& values, int j = 0) {
    std::vector<AUVector> out;
    for (double v : values) out.push_back(au_with(j, v));
    return out;
}

AUVector random_au(std::mt19937_64& rng) {
    std::vector<double> v(17);
    for (auto& x : v) x = 5.0 * uniform_unit(rng);
    return AUVector::clamped(v);
}

const ModelBundle& pretrained_bundle() {
    static const auto bundle = [] {
        static const auto ds = make_synthetic_dataset(testing::scratch("eval_ds"), 4, 8, 5, 64);
        auto b = build_models(testing::tiny_config(), 0);
        pretrain_identity(b, ds.dataset.records);
        return b;
    }();
    return bundle;
}

}  // namespace

TEST_CASE("au_mse hand-computed fixtures") {
    const auto zeros = std::vector<AUVector>{AUVector::zeros()};
    const auto ones = std::vector<AUVector>{AUVector::clamped(std::vector<double>(17, 1.0))};
    const auto unit = au_mse(zeros, ones);
    for (double v : unit.per_au_mse) CHECK(v == 1.0);
    CHECK(unit.avg_mse == 1.0);
    CHECK(au_mse(ones, ones).avg_mse == 0.0);

    const auto r = au_mse(series({0, 2, 4}, 5), series({1, 2, 3}, 5));
    CHECK(std::abs(r.per_au_mse[5] - 2.0 / 3.0) < 1e-12);
    CHECK(std::abs(r.avg_mse - (2.0 / 3.0) / 17.0) < 1e-12);
    CHECK_THROWS_WITH_AS(au_mse(series({0, 1}), series({0})), doctest::Contains("length mismatch"), Error);
}

TEST_CASE("au_pcc hand-computed fixtures") {
    const auto r = au_pcc(series({0, 1, 2}, 3), series({0, 2, 3}, 3));
    // cov = 1.5, var_x = 1, var_y = 2.333..: r = 1.5 / sqrt(2.333..)
    REQUIRE(r.per_au_pcc[3].has_value());
    CHECK(std::abs(*r.per_au_pcc[3] - 1.5 / std::sqrt(7.0 / 3.0)) < 1e-12);
    CHECK(std::abs(*r.per_au_pcc[3] - 0.9820) < 1e-4);
    // The other 16 AUs are constant zero series.
    CHECK(r.undefined_pcc == 16);
    REQUIRE(r.avg_pcc.has_value());
    CHECK(*r.avg_pcc == *r.per_au_pcc[3]);

    const auto same = au_pcc(series({0, 1, 4}), series({0, 1, 4}));
    CHECK(*same.per_au_pcc[0] == doctest::Approx(1.0));
    const auto anti = au_pcc(series({0, 1, 4}), series({5, 4, 1}));
    CHECK(*anti.per_au_pcc[0] == doctest::Approx(-1.0));
    CHECK_THROWS_AS(au_pcc(series({1}), series({1})), Error);
}

TEST_CASE("PCC is invariant under positive affine maps while MSE is not") {
    std::mt19937_64 rng(2);
    std::vector<AUVector> t, p, scaled;
    for (int i = 0; i < 12; ++i) {
        t.push_back(random_au(rng));
        p.push_back(random_au(rng));
        std::vector<double> v(p.back().values().begin(), p.back().values().end());
        for (auto& x : v) x = 0.5 * x + 1.0;
        scaled.push_back(AUVector::clamped(v));
    }
    const auto a = au_metrics(t, p);
    const auto b = au_metrics(t, scaled);
    for (int j = 0; j < 17; ++j) CHECK(*a.per_au_pcc[j] == doctest::Approx(*b.per_au_pcc[j]).epsilon(1e-9));
    CHECK(a.avg_mse != doctest::Approx(b.avg_mse));
}

TEST_CASE("averages use only defined PCC entries") {
    std::vector<AUVector> t = {au_with(0, 1).with(1, 2), au_with(0, 2).with(1, 2), au_with(0, 4).with(1, 2)};
    const auto r = au_metrics(t, t);
    CHECK(r.undefined_pcc == 16);
    CHECK(*r.avg_pcc == doctest::Approx(1.0));
}

TEST_CASE("evaluate_au with a pass-through oracle and identity generator gives zero MSE") {
    std::mt19937_64 rng(4);
    std::vector<AUVector> targets;
    for (int i = 0; i < 6; ++i) targets.push_back(random_au(rng));
    const auto source = FaceImage::constant(8, 0.0f);
    std::size_t calls = 0;
    const Manipulator identity_generator = [](const FaceImage& img, const AUVector&) { return img; };
    const AUOracle pass_through = [&](const FaceImage&, const std::string& name) {
        CHECK(name == generated_image_name(calls));
        return targets[calls++];
    };
    const auto r = evaluate_au(identity_generator, source, targets, pass_through);
    for (double v : r.per_au_mse) CHECK(v == 0.0);
    CHECK(r.avg_mse == 0.0);
    CHECK(*r.avg_pcc == doctest::Approx(1.0));
}

TEST_CASE("the CSV oracle names missing images") {
    const auto dir = testing::scratch("csv_oracle");
    {
        std::ofstream out(dir / "pred.csv");
        out << annotations_header() << '\n' << generated_image_name(0) << ",gen";
        for (int j = 0; j < 17; ++j) out << ",2";
        out << '\n';
    }
    const auto oracle = csv_oracle(dir / "pred.csv");
    CHECK(oracle(FaceImage::constant(8, 0), generated_image_name(0))[4] == 2.0);
    CHECK_THROWS_WITH_AS(oracle(FaceImage::constant(8, 0), generated_image_name(1)), doctest::Contains("target_0001.png"),
                         DataError);
}

TEST_CASE("the renderer-fit oracle recovers AUs of clean renders") {
    const auto params = synthetic_identity(1, 4, 9);
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 2; ++trial) {
        std::vector<double> v(17);
        for (auto& x : v) x = uniform_unit(rng) < 0.5 ? 0.0 : 5.0 * uniform_unit(rng);
        const auto truth = AUVector::clamped(v);
        const auto fit = renderer_fit_oracle(params, 64)(render_synthetic_face(params, truth, 64), "x.png");
        for (int j = 0; j < 17; ++j) CHECK(std::abs(fit[j] - truth[j]) < 1e-3);
    }
}

TEST_CASE("interpolation strips honour their endpoints") {
    const auto& b = pretrained_bundle();
    const auto image = render_synthetic_face(synthetic_identity(0, 4, 5), AUVector::zeros(), 64);
    const auto source = au_with(8, 1.0);
    const auto target = au_with(14, 4.0).with(8, 3.0);
    const auto strip = interpolate_images(b, image, source, target, 5);
    CHECK((strip.alphas == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
    CHECK(strip.frames.front() == reconstruct(b, image, source));
    CHECK(strip.frames.back() == manipulate(b, image, target));
    const auto two = interpolate_images(b, image, source, target, 2);
    CHECK(two.frames.size() == 2);
    const auto flat = interpolate_images(b, image, source, source, 4);
    for (const auto& f : flat.frames) CHECK(f == flat.frames.front());
    CHECK_THROWS_AS(interpolate_images(b, image, source, target, 1), Error);
    CHECK(interpolation_alphas(kDefaultInterpolationSteps).size() == 8);
}

TEST_CASE("manipulation is deterministic and bounded") {
    const auto& b = pretrained_bundle();
    const auto image = render_synthetic_face(synthetic_identity(2, 4, 5), AUVector::zeros(), 64);
    const auto a = manipulate(b, image, au_with(14, 5.0));
    CHECK(a == manipulate(b, image, au_with(14, 5.0)));
    for (float p : a.pixels()) {
        CHECK(p > -1.0f);
        CHECK(p < 1.0f);
    }
}

TEST_CASE("identity accuracy: identical pairs, guards, and monotonicity") {
    const auto& b = pretrained_bundle();
    std::vector<std::pair<FaceImage, FaceImage>> pairs;
    for (int i = 0; i < 4; ++i) {
        const auto img = render_synthetic_face(synthetic_identity(i, 4, 5), AUVector::zeros(), 64);
        pairs.emplace_back(img, img);
    }
    CHECK(identity_accuracy(b, pairs, 0.99) == 1.0);
    CHECK_THROWS_AS(identity_accuracy(b, {}, 0.5), Error);
    CHECK_THROWS_AS(identity_accuracy(b, pairs, 1.0), Error);

    std::vector<std::pair<FaceImage, FaceImage>> mixed;
    for (int i = 0; i < 4; ++i) {
        mixed.emplace_back(pairs[i].first, pairs[(i + 1) % 4].first);
        mixed.emplace_back(pairs[i].first, pairs[i].first);
    }
    double previous = 1.0;
    for (double t = -0.9; t < 0.99; t += 0.1) {
        const double acc = identity_accuracy(b, mixed, t);
        CHECK(acc <= previous);
        previous = acc;
    }
}

TEST_CASE("EER calibration separates different synthetic identities") {
    const auto dir = testing::scratch("eer_ds");
    const auto ds = make_synthetic_dataset(dir, 4, 8, 5, 64);
    const auto& b = pretrained_bundle();
    const auto cal = calibrate_identity_threshold(b, ds.dataset.records);
    CHECK(cal.same_pairs > 0);
    CHECK(cal.different_pairs > 0);
    CHECK(cal.threshold > -1.0);
    CHECK(cal.threshold < 1.0);
    // Pairs of different identities are mostly rejected at the calibrated threshold.
    std::vector<std::pair<FaceImage, FaceImage>> different;
    const auto& r = ds.dataset.records;
    for (size_t i = 0; i < r.size() && different.size() < 100; ++i)
        for (size_t k = i + 1; k < r.size() && different.size() < 100; ++k)
            if (!(r[i].identity == r[k].identity)) different.emplace_back(r[i].image, r[k].image);
    CHECK(identity_accuracy(b, different, cal.threshold) <= 0.5 + 0.1);
}

TEST_CASE("metric reports are written as CSV with an avg row") {
    const auto dir = testing::scratch("metric_csv");
    const auto r = au_metrics(series({0, 1, 2}, 3), series({0, 2, 3}, 3));
    write_metric_csv(r, dir / "m.csv");
    std::ifstream in(dir / "m.csv");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    REQUIRE(lines.size() == 19);
    CHECK(lines[0] == "au,mse,pcc");
    CHECK(lines[1] == "AU01,0.000000,nan");
    CHECK(lines[4] == "AU05,0.666667,0.981981");
    CHECK(lines[18].rfind("avg,", 0) == 0);
    CHECK(metric_summary(r).find("16 AUs excluded") != std::string::npos);
}

TEST_CASE("montages tile faces and strips come with a manifest") {
    const auto a = FaceImage::constant(8, -1.0f);
    const auto b = FaceImage::constant(8, 1.0f);
    const auto m = montage({{a, b}, {b}});
    CHECK(m.width == 16);
    CHECK(m.height == 16);
    CHECK(m.bytes[0] == 0);
    CHECK(m.bytes[8 * 3] == 255);
    const auto dir = testing::scratch("strip");
    InterpolationStrip strip{{a, b, a}, {0.0, 0.5, 1.0}};
    write_strip(strip, AUVector::zeros(), au_with(8, 5.0), dir / "s.png", dir / "s.json");
    CHECK(read_image(dir / "s.png").width == 24);
    std::ifstream in(dir / "s.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["frames"].size() == 3);
    CHECK(j["frames"][1]["au"]["AU12"].get<double>() == 2.5);
}

TEST_CASE("run_ablation with no variants trains only the full model") {
    const auto dir = testing::scratch("ablation_empty");
    const auto ds = make_synthetic_dataset(dir / "data", 4, 6, 2, 64, 2);
    const auto [train, held] = partition(ds.dataset.records, load_split(dir / "data" / kSplitFile));
    AblationInputs inputs{train, ds.dataset.identity_names, held, nullptr, 3, 2, nullptr};
    auto c = testing::tiny_config();
    c.max_steps = 2;
    const auto rows = run_ablation(inputs, c, {}, dir / "out");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].variant == "full");
    CHECK(rows[0].steps == 2);
    CHECK(fs::exists(dir / "out" / "ablation.csv"));
    CHECK(fs::exists(dir / "out" / "ablation_grid.png"));
    CHECK(fs::exists(dir / "out" / "ablation_grid.json"));
    CHECK_THROWS_AS(run_ablation(inputs, c, {"no_gan"}, dir / "out2"), ConfigError);
}
