#include <fstream>
#include <set>

#include "doctest_torch.hpp"
#include "expredit/data.hpp"
#include "support.hpp"

using namespace expredit;
namespace fs = std::filesystem;

namespace {

RawImage solid(int h, int w, std::uint8_t v) {
    RawImage raw;
    raw.height = h;
    raw.width = w;
    raw.bytes.assign(static_cast<size_t>(h) * w * 3, v);
    return raw;
}

std::string au_row(const std::string& path, const std::string& identity, int columns, const std::string& value = "1.5") {
    std::string row = path + "," + identity;
    for (int j = 0; j < columns; ++j) row += "," + value;
    return row;
}

fs::path write_tiny_dataset(const std::string& name, const std::vector<std::string>& rows, bool with_image = true) {
    const auto dir = testing::scratch(name);
    if (with_image) write_image(dir / kImagesDir / "a.png", solid(16, 16, 100));
    std::ofstream out(dir / kAnnotationsFile);
    out << annotations_header() << '\n';
    for (const auto& r : rows) out << r << '\n';
    return dir;
}

AUVector random_au(std::mt19937_64& rng) {
    std::vector<double> v(17);
    for (auto& x : v) x = 5.0 * uniform_unit(rng);
    return AUVector::clamped(v);
}

}  // namespace

TEST_CASE("preprocessing maps bytes affinely onto [-1, 1]") {
    const auto img = preprocess(solid(8, 8, 255), 8);
    CHECK(img.at(0, 0, 0) == 1.0f);
    CHECK(preprocess(solid(8, 8, 0), 8).at(7, 7, 2) == -1.0f);
    // Resizing a constant image keeps it constant.
    const auto resized = preprocess(solid(40, 30, 51), 16);
    for (float p : resized.pixels()) CHECK(p == doctest::Approx(51 / 127.5 - 1.0).epsilon(1e-6));
}

TEST_CASE("preprocessing centre-crops the longer side") {
    RawImage raw = solid(8, 16, 0);
    // Left and right quarters white; the centred 8x8 crop must be all black.
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 16; ++x)
            if (x < 4 || x >= 12)
                for (int c = 0; c < 3; ++c) raw.bytes[(y * 16 + x) * 3 + c] = 255;
    const auto img = preprocess(raw, 8);
    for (float p : img.pixels()) CHECK(p == -1.0f);
}

TEST_CASE("preprocessing rejects unusable images") {
    RawImage gray = solid(16, 16, 0);
    gray.channels = 1;
    gray.bytes.resize(256);
    CHECK_THROWS_WITH_AS(preprocess(gray, 16), doctest::Contains("3-channel"), DataError);
    CHECK_THROWS_AS(preprocess(solid(4, 4, 0), 4), DataError);
}

TEST_CASE("PNG write/read round-trips 8-bit images exactly") {
    const auto dir = testing::scratch("png_roundtrip");
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    const auto noise = torch::randint(0, 256, {20 * 24 * 3}, gen, torch::kUInt8);
    RawImage raw;
    raw.height = 20;
    raw.width = 24;
    raw.bytes.assign(noise.data_ptr<uint8_t>(), noise.data_ptr<uint8_t>() + noise.numel());
    write_image(dir / "x.png", raw);
    const auto back = read_image(dir / "x.png");
    CHECK(back.height == 20);
    CHECK(back.width == 24);
    CHECK((back.bytes == raw.bytes));
    // Bytes -> FaceImage -> bytes is the identity for square images.
    RawImage square = raw;
    square.width = 20;
    square.bytes.resize(20 * 20 * 3);
    CHECK((to_raw(preprocess(square, 20)).bytes == square.bytes));
    CHECK_THROWS_WITH_AS(read_image(dir / "missing.png"), doctest::Contains("missing.png"), DataError);
}

TEST_CASE("annotation rows are validated and errors name the row") {
    CHECK_THROWS_WITH_AS(load_dataset(write_tiny_dataset("ann_short", {au_row("a.png", "p1", 16)}), 16),
                         "annotations row 2: expected 17 AU columns, found 16", DataError);
    CHECK_THROWS_WITH_AS(load_dataset(write_tiny_dataset("ann_nan", {au_row("a.png", "p1", 17, "abc")}), 16),
                         doctest::Contains("annotations row 2: non-numeric"), DataError);
    CHECK_THROWS_WITH_AS(load_dataset(write_tiny_dataset("ann_missing", {au_row("b.png", "p1", 17)}), 16),
                         doctest::Contains("annotations row 2: missing image"), DataError);
    const auto dir = testing::scratch("ann_header");
    std::ofstream(dir / kAnnotationsFile) << "path,identity,AU01\n";
    CHECK_THROWS_WITH_AS(load_dataset(dir, 16), doctest::Contains("header"), DataError);
}

TEST_CASE("annotations clamp intensities and assign identities by first appearance") {
    const auto dir = write_tiny_dataset("ann_ok", {au_row("a.png", "zed", 17, "7"), au_row("a.png", "amy", 17, "-1"),
                                                   au_row("a.png", "zed", 17, "2.25")});
    const auto ds = load_dataset(dir, 16);
    REQUIRE(ds.records.size() == 3);
    CHECK((ds.identity_names == std::vector<std::string>{"zed", "amy"}));
    CHECK(ds.records[0].au[0] == 5.0);
    CHECK(ds.records[1].au[16] == 0.0);
    CHECK(ds.records[2].au[3] == 2.25);
    CHECK(ds.records[2].identity.index == 0);
    CHECK(ds.records[1].identity.index == 1);
}

TEST_CASE("batches draw without replacement and pair each source with another sample's AUs") {
    std::vector<DatasetRecord> records;
    std::mt19937_64 au_rng(1);
    for (int i = 0; i < 10; ++i) {
        DatasetRecord r;
        r.image = FaceImage::constant(8, static_cast<float>(i) / 10.0f);
        r.au = random_au(au_rng);
        r.identity = IdentityLabel{i % 3};
        records.push_back(r);
    }
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto batch = sample_batch(records, 6, rng);
        std::set<float> seen;
        for (const auto& img : batch.images) seen.insert(img.at(0, 0, 0));
        CHECK(seen.size() == 6);
        // Targets are a derangement of the sources.
        std::multiset<std::vector<double>> src, tgt;
        for (size_t i = 0; i < 6; ++i) {
            CHECK_FALSE(batch.target_aus[i] == batch.source_aus[i]);
            src.insert({batch.source_aus[i].values().begin(), batch.source_aus[i].values().end()});
            tgt.insert({batch.target_aus[i].values().begin(), batch.target_aus[i].values().end()});
        }
        CHECK((src == tgt));
    }
    std::mt19937_64 a(3), b(3);
    CHECK((sample_batch(records, 4, a).target_aus == sample_batch(records, 4, b).target_aus));
    CHECK_THROWS_AS(sample_batch(records, 1, a), DataError);
    CHECK_THROWS_AS(sample_batch(records, 11, a), DataError);
}

TEST_CASE("uniform helpers stay in range and are deterministic") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 1000; ++i) {
        CHECK(uniform_index(rng, 7) < 7u);
        const double u = uniform_unit(rng);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    std::mt19937_64 a(9), b(9);
    CHECK(uniform_index(a, 1000) == uniform_index(b, 1000));
}

TEST_CASE("every AU changes the synthetic rendering") {
    const auto p = synthetic_identity(0, 4, 1);
    const auto neutral = render_synthetic_face(p, AUVector::zeros(), 64);
    const PixelBox whole{0, 0, 64, 64};
    for (int j = 0; j < kNumAUs; ++j) {
        const auto edited = render_synthetic_face(p, AUVector::zeros().with(j, 5.0), 64);
        INFO(std::string(kAUNames[j]));
        CHECK(mean_abs_diff(neutral, edited, whole) > 1e-4);
        CHECK(mean_abs_diff(neutral, edited, background_box(64)) == 0.0);
    }
}

TEST_CASE("mouth AUs only change pixels inside the mouth box") {
    const auto p = synthetic_identity(2, 4, 1);
    for (const char* name : {"AU12", "AU25"}) {
        const auto a = render_synthetic_face(p, AUVector::zeros(), 64);
        const auto b = render_synthetic_face(p, AUVector::zeros().with(au_index(name), 5.0), 64);
        const auto box = mouth_box(64);
        double outside = 0.0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                if (x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1) continue;
                for (int c = 0; c < 3; ++c) outside = std::max(outside, static_cast<double>(std::abs(a.at(y, x, c) - b.at(y, x, c))));
            }
        INFO(std::string(name));
        // Shading tails leave at most one 8-bit level outside the box.
        CHECK(outside < 2.0 / 255.0);
        CHECK(mean_abs_diff(a, b, box) > 0.01);
    }
}

TEST_CASE("synthetic identities differ from each other") {
    const auto a = render_synthetic_face(synthetic_identity(0, 4, 1), AUVector::zeros(), 64);
    const auto b = render_synthetic_face(synthetic_identity(1, 4, 1), AUVector::zeros(), 64);
    CHECK(mean_abs_diff(a, b, PixelBox{0, 0, 64, 64}) > 0.02);
}

TEST_CASE("synthetic dataset generation is deterministic and writes a split") {
    const auto d1 = testing::scratch("synth_a");
    const auto d2 = testing::scratch("synth_b");
    const auto a = make_synthetic_dataset(d1, 3, 5, 11, 64, 2);
    const auto b = make_synthetic_dataset(d2, 3, 5, 11, 64, 2);
    REQUIRE(a.dataset.records.size() == 15);
    for (size_t i = 0; i < 15; ++i) {
        CHECK(a.dataset.records[i].au == b.dataset.records[i].au);
        CHECK(a.dataset.records[i].image == b.dataset.records[i].image);
    }
    const auto split = load_split(d1 / kSplitFile);
    CHECK(split.size() == 6);
    const auto [train, held] = partition(load_dataset(d1, 64).records, split);
    CHECK(train.size() == 9);
    CHECK(held.size() == 6);
    const auto params = load_synthetic_params(d1);
    REQUIRE(params.size() == 3);
    CHECK(params[1].second == a.params[1]);
    CHECK_THROWS_AS(make_synthetic_dataset(d1, 1, 5, 0, 64), DataError);
}
