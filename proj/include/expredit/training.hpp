#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "expredit/data.hpp"
#include "expredit/losses.hpp"
#include "expredit/networks.hpp"

namespace expredit {

class TrainingError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

struct Optimizers {
    std::unique_ptr<torch::optim::Adam> encoder;
    std::unique_ptr<torch::optim::Adam> generator;
    std::unique_ptr<torch::optim::Adam> latent_critic;
    std::unique_ptr<torch::optim::Adam> image_critic;
    std::unique_ptr<torch::optim::Adam> expression;

    std::vector<std::pair<std::string, torch::optim::Adam*>> named() const;
};

struct TrainState {
    ModelBundle bundle;
    Optimizers optimizers;
    std::shared_ptr<FeatureExtractor> extractor;
    std::int64_t epoch = 0;
    std::int64_t global_step = 0;
    std::mt19937_64 batch_rng;
    at::Generator tensor_rng;
    std::vector<std::pair<std::int64_t, LossReport>> metrics_log;
};

/// Wraps a bundle with fresh Adam states and seeded RNGs (all derived from config.seed).
TrainState make_train_state(ModelBundle bundle);

/// Perceptual feature extractor used for a config: seeded from config.seed, frozen.
std::shared_ptr<FeatureExtractor> make_extractor(const TrainConfig& config);

struct PretrainResult {
    int epochs_run = 0;
    double train_accuracy = 0.0;
};

/// Trains C_id alone on real images with id_class_loss until the training accuracy
/// reaches config.pretrain_target_accuracy or config.pretrain_epochs have run, then freezes it.
PretrainResult pretrain_identity(ModelBundle& bundle, const std::vector<DatasetRecord>& records);

/// Fraction of records whose arg-max identity prediction is correct.
double identity_train_accuracy(const ModelBundle& bundle, const std::vector<DatasetRecord>& records);

/// Linear decay after the decay-start epoch h = floor(epochs * fraction):
/// 1 - max(0, epoch + 1 - h) / (epochs - h + 1), evaluated at epoch start.
double lr_multiplier(std::int64_t epoch, int epochs, double decay_start_fraction);

void set_learning_rates(TrainState& state, double multiplier);

struct BatchTensors {
    torch::Tensor images;       // (B, 3, S, S)
    torch::Tensor source_aus;   // (B, d)
    torch::Tensor target_aus;   // (B, d)
    torch::Tensor identities;   // (B) int64
};
BatchTensors to_tensors(const Batch& batch);

/// Min-side loss terms for the generator phase. Frozen networks are evaluated
/// with their parameters excluded from autograd.
struct GeneratorPass {
    LossTerms terms;
    torch::Tensor total;
    torch::Tensor manipulated;
    torch::Tensor reconstructed;
};
GeneratorPass generator_pass(const ModelBundle& bundle, const FeatureExtractor& extractor, const BatchTensors& batch);

/// Gradients of the min-side total w.r.t. every E and G parameter (no update is applied).
std::vector<torch::Tensor> generator_gradients(TrainState& state, const Batch& batch);

/// One joint update: critic phase, C_exp phase, generator phase. Throws TrainingError
/// naming the step and term when a loss or gradient is not finite.
LossReport train_step(TrainState& state, const Batch& batch);

struct TrainOptions {
    std::optional<std::filesystem::path> resume_from;
    std::ostream* progress = nullptr;
};

/// Full run: pretrains C_id if needed, then epochs x floor(N / batch_size) steps
/// (capped by config.max_steps), with per-epoch learning-rate decay, periodic
/// checkpoints, a metrics CSV and a final checkpoint in checkpoint_dir.
TrainState train(const Dataset& dataset, TrainConfig config, const std::filesystem::path& checkpoint_dir,
                 const TrainOptions& options = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kFinalCheckpoint = "final.ckpt";
inline constexpr const char* kMetricsFile = "metrics.csv";

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);

/// Validates length, checksum and version; when `expected` is given its hash must
/// match the stored config hash.
TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig* expected = nullptr);

std::string metrics_header();
std::string metrics_row(std::int64_t step, const LossReport& report, double lr);

}  // namespace expredit
