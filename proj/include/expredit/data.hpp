#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "expredit/core.hpp"

namespace expredit {

/// 8-bit interleaved image as decoded from disk (RGB order when channels == 3).
struct RawImage {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<std::uint8_t> bytes;
};

struct DatasetRecord {
    FaceImage image;
    AUVector au;
    IdentityLabel identity;
    std::string source_path;  // relative to the dataset's images directory
};

struct Dataset {
    std::vector<DatasetRecord> records;
    std::vector<std::string> identity_names;  // dense index -> identity string

    int num_identities() const { return static_cast<int>(identity_names.size()); }
};

struct Batch {
    std::vector<FaceImage> images;
    std::vector<AUVector> source_aus;
    std::vector<AUVector> target_aus;
    std::vector<IdentityLabel> identities;

    std::size_t size() const { return images.size(); }
};

struct SyntheticFaceParams {
    std::uint64_t identity_seed = 0;
    double skin_tone = 0.5;    // 0 light .. 1 dark
    double face_aspect = 1.0;  // horizontal scale of the face ellipse
    double eye_spacing = 0.27; // eye centre offset from the midline, normalized units

    friend bool operator==(const SyntheticFaceParams&, const SyntheticFaceParams&) = default;
};

/// Pixel rectangle [x0, x1) x [y0, y1).
struct PixelBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

inline constexpr const char* kAnnotationsFile = "annotations.csv";
inline constexpr const char* kImagesDir = "images";
inline constexpr const char* kIdentitiesFile = "identities.json";
inline constexpr const char* kSplitFile = "test_split.txt";

std::string annotations_header();

// Image codec (lossless PNG).
RawImage read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const RawImage& image);
RawImage to_raw(const FaceImage& image);

/// Center-crops to a square on the shorter side, bilinearly resizes to
/// image_size and maps bytes [0, 255] affinely onto [-1, 1].
FaceImage preprocess(const RawImage& raw, int image_size);

struct AnnotationRow {
    int row = 0;  // 1-based line number in the file
    std::string path;
    std::string identity;
    AUVector au;  // clamped to [0, 5]
};

/// Parses an annotations CSV (header, then path, identity and one column per AU) without touching images.
std::vector<AnnotationRow> read_annotations(const std::filesystem::path& csv_path);

/// Reads `<root>/annotations.csv` and the images it references.
Dataset load_dataset(const std::filesystem::path& root, int image_size);

/// Test-split paths, one per line; blank lines ignored.
std::set<std::string> load_split(const std::filesystem::path& path);

/// Splits records into (train, held-out) by membership of source_path in `held_out`.
std::pair<std::vector<DatasetRecord>, std::vector<DatasetRecord>> partition(
    const std::vector<DatasetRecord>& records, const std::set<std::string>& held_out);

/// Draws batch_size records without replacement; target AUs are a random
/// non-trivial cyclic shift of the drawn source AUs.
Batch sample_batch(const std::vector<DatasetRecord>& records, int batch_size, std::mt19937_64& rng);

// Small deterministic helpers around mt19937_64, independent of the
// standard library's distribution implementations.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);
double uniform_unit(std::mt19937_64& rng);

SyntheticFaceParams synthetic_identity(int index, int n_identities, std::uint64_t seed);

FaceImage render_synthetic_face(const SyntheticFaceParams& params, const AUVector& u, int image_size);

/// Region that contains the mouth for every AU setting.
PixelBox mouth_box(int image_size);
/// Top-left background patch (image_size/8 on a side), never covered by the face.
PixelBox background_box(int image_size);

/// Mean |a - b| over a pixel box, across channels.
double mean_abs_diff(const FaceImage& a, const FaceImage& b, const PixelBox& box);

struct SyntheticDataset {
    Dataset dataset;
    std::vector<SyntheticFaceParams> params;  // per identity index
};

/// Renders n_identities x samples_per_identity faces into `out_dir` in the
/// load_dataset layout, plus identities.json with the renderer parameters.
/// The last `held_out_per_identity` samples of every identity are listed in test_split.txt.
SyntheticDataset make_synthetic_dataset(const std::filesystem::path& out_dir, int n_identities,
                                        int samples_per_identity, std::uint64_t seed, int image_size,
                                        int held_out_per_identity = 0);

/// Reads identities.json written by make_synthetic_dataset, keyed by identity name.
std::vector<std::pair<std::string, SyntheticFaceParams>> load_synthetic_params(const std::filesystem::path& root);

}  // namespace expredit
