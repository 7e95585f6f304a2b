#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

namespace expredit {

enum class GpMode { at_real, interpolated };
enum class AdvMode { log_form, wasserstein };

struct Ablation {
    bool no_per = false;
    bool no_id = false;
    bool no_ssim = false;

    bool empty() const { return !no_per && !no_id && !no_ssim; }
    friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct TrainConfig {
    int d = 17;
    int m = 5;
    int image_size = 128;
    int latent_dim = 256;
    int n_identities = 0;  // 0: taken from the dataset at train time

    double lambda_au = 100.0;
    double lambda_id = 60.0;
    double lambda_per = 20.0;
    double lambda_rec = 100.0;
    double lambda_gp = 20.0;

    double lr_main = 1e-4;
    double lr_cexp = 2e-4;
    double lr_id = 2e-4;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;

    int batch_size = 8;
    int epochs = 400;
    double lr_decay_start_fraction = 0.5;
    std::uint64_t seed = 0;
    double prior_mean = 0.0;
    double prior_std = 1.0;
    int critic_steps = 1;
    GpMode gp_mode = GpMode::at_real;
    AdvMode adv_mode = AdvMode::wasserstein;
    Ablation ablation;
    bool joint_cexp = false;
    bool latent_saturating = false;

    // Architecture widths.
    int generator_width = 512;
    int critic_width = 32;
    int classifier_width = 32;
    int classifier_blocks = 4;
    int embedding_dim = 128;
    int extractor_width = 16;
    int ms_ssim_scales = 0;  // 0: as many as fit (at most 4)

    int pretrain_epochs = 30;
    double pretrain_target_accuracy = 0.99;

    // Run control; excluded from the config hash.
    int checkpoint_every = 1000;
    int log_every = 50;
    int max_steps = 0;  // 0: run all epochs

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Fills defaults for absent keys and rejects unknown keys, wrong types and
/// out-of-range values. Errors name the offending key.
TrainConfig validate_config(const nlohmann::json& raw);

nlohmann::json to_json(const TrainConfig& config);

/// Reads a JSON config file. A missing or unparsable file is a ConfigError naming the path.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// Applies a `key=value` override. The value is parsed as JSON when possible,
/// otherwise kept as a string; `ablation` takes a comma-separated list.
void apply_override(nlohmann::json& raw, std::string_view assignment);

/// FNV-1a over the canonical JSON of every field that affects the trained model.
std::uint64_t config_hash(const TrainConfig& config);

/// Number of MS-SSIM scales used for a given config (resolves the 0 = auto setting).
int effective_ms_ssim_scales(const TrainConfig& config);

std::string to_string(GpMode mode);
std::string to_string(AdvMode mode);

}  // namespace expredit
