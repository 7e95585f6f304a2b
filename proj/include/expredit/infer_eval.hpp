#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "expredit/data.hpp"
#include "expredit/networks.hpp"

namespace expredit {

/// G(E(I) | target). Throws when the bundle holds non-finite parameters.
FaceImage manipulate(const ModelBundle& bundle, const FaceImage& image, const AUVector& target);

/// Self-reconstruction G(E(I) | own), the same computation as manipulate.
FaceImage reconstruct(const ModelBundle& bundle, const FaceImage& image, const AUVector& own);

struct InterpolationStrip {
    std::vector<FaceImage> frames;
    std::vector<double> alphas;
};

inline constexpr int kDefaultInterpolationSteps = 8;

/// Frames G(E(I) | source + alpha (target - source)) at alphas evenly spaced on [0, 1].
InterpolationStrip interpolate_images(const ModelBundle& bundle, const FaceImage& image, const AUVector& source,
                                      const AUVector& target, int steps = kDefaultInterpolationSteps);

/// Evenly spaced alphas with exact 0 and 1 endpoints.
std::vector<double> interpolation_alphas(int steps);

struct AUMetricReport {
    std::vector<double> per_au_mse;
    std::vector<std::optional<double>> per_au_pcc;  // empty optional: a series had zero variance
    double avg_mse = 0.0;
    std::optional<double> avg_pcc;  // mean over defined entries
    int undefined_pcc = 0;
};

/// Fills the MSE part: per-AU mean squared difference across samples and its mean over AUs.
AUMetricReport au_mse(const std::vector<AUVector>& targets, const std::vector<AUVector>& predictions);

/// Fills the PCC part: per-AU Pearson correlation across samples. Requires at least two samples.
AUMetricReport au_pcc(const std::vector<AUVector>& targets, const std::vector<AUVector>& predictions);

/// Both parts.
AUMetricReport au_metrics(const std::vector<AUVector>& targets, const std::vector<AUVector>& predictions);

/// Predicts AU intensities of a generated image. `name` is the file name the
/// image is (or would be) written under, e.g. target_0003.png.
using AUOracle = std::function<AUVector(const FaceImage& image, const std::string& name)>;

/// Maps (source image, target AUs) to an edited image.
using Manipulator = std::function<FaceImage(const FaceImage& image, const AUVector& target)>;

std::string generated_image_name(std::size_t index);

/// Generates one image per target, queries the oracle, and compares predictions with the targets.
AUMetricReport evaluate_au(const Manipulator& manipulator, const FaceImage& source, const std::vector<AUVector>& targets,
                           const AUOracle& oracle);

AUMetricReport evaluate_au(const ModelBundle& bundle, const FaceImage& source,
                           const std::vector<DatasetRecord>& target_records, const AUOracle& oracle);

/// Oracle backed by an externally produced CSV in the annotations schema, keyed by image name.
/// Asking for an image absent from the table throws DataError naming it.
AUOracle csv_oracle(const std::filesystem::path& csv_path);

/// Oracle that recovers AUs by bounded least-squares fitting of the synthetic
/// renderer (identity parameters known) to the image.
AUOracle renderer_fit_oracle(const SyntheticFaceParams& params, int image_size);

/// Fit used by renderer_fit_oracle; exposed for testing.
AUVector fit_renderer_aus(const SyntheticFaceParams& params, const FaceImage& image, int iterations = 12);

/// Cosine similarity of the identity-classifier embeddings of a and b.
double identity_similarity(const ModelBundle& bundle, const FaceImage& a, const FaceImage& b);

struct ThresholdCalibration {
    double threshold = 0.0;
    double false_accept = 0.0;
    double false_reject = 0.0;
    int same_pairs = 0;
    int different_pairs = 0;
};

/// Equal-error-rate threshold over same-identity vs different-identity pairs of real records.
/// Uses every pair when there are at most max_pairs of each kind, otherwise a seeded subsample.
ThresholdCalibration calibrate_identity_threshold(const ModelBundle& bundle, const std::vector<DatasetRecord>& records,
                                                  int max_pairs = 500, std::uint64_t seed = 0);

/// Fraction of (source, generated) pairs whose embedding cosine is at least threshold.
/// This is a proxy verifier built on the identity classifier.
double identity_accuracy(const ModelBundle& bundle, const std::vector<std::pair<FaceImage, FaceImage>>& pairs,
                         double threshold);

/// `au,mse,pcc` rows plus an `avg` row; undefined PCC entries are written as `nan`.
void write_metric_csv(const AUMetricReport& report, const std::filesystem::path& path);
std::string metric_summary(const AUMetricReport& report);

/// Lays out rows of equally sized faces left to right, top to bottom.
RawImage montage(const std::vector<std::vector<FaceImage>>& rows);

/// Writes the strip as a one-row montage plus a JSON manifest of alphas and AU vectors.
void write_strip(const InterpolationStrip& strip, const AUVector& source, const AUVector& target,
                 const std::filesystem::path& png_path, const std::filesystem::path& manifest_path);

struct AblationRow {
    std::string variant;  // "full" or an ablation flag name
    std::int64_t steps = 0;
    std::filesystem::path checkpoint;
    AUMetricReport au;
    double identity_accuracy = 0.0;
    double identity_threshold = 0.0;
};

struct AblationInputs {
    std::vector<DatasetRecord> train;
    std::vector<std::string> identity_names;
    std::vector<DatasetRecord> eval;  // held-out records: sources and targets
    std::function<AUOracle(const DatasetRecord& source)> oracle_for;
    int eval_targets = 10;
    int grid_rows = 4;
    std::ostream* progress = nullptr;
};

/// Trains the full model and one model per variant with identical seeds and
/// steps, then evaluates each. Writes `<variant>/` run directories,
/// ablation.csv, ablation_grid.png and ablation_grid.json under out_dir.
std::vector<AblationRow> run_ablation(const AblationInputs& inputs, const TrainConfig& config,
                                      const std::vector<std::string>& variants, const std::filesystem::path& out_dir);

}  // namespace expredit
