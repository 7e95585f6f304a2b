#pragma once

#include <functional>
#include <memory>

#include <torch/torch.h>

#include "expredit/config.hpp"
#include "expredit/core.hpp"

namespace expredit {

inline constexpr double kProbEpsilon = 1e-7;

struct AdversarialLoss {
    torch::Tensor d_loss;  // discriminator / critic side
    torch::Tensor g_loss;  // encoder or generator side
};

/// Latent game between D_z and E. Probabilities are clamped to [eps, 1 - eps].
/// The encoder side is non-saturating (-log D(E(I))) unless `saturating` is set,
/// in which case it is log(1 - D(E(I))).
AdversarialLoss latent_adv_loss(const torch::Tensor& real_probs, const torch::Tensor& fake_probs, bool saturating = false);

/// Image game on raw critic scores. Wasserstein: d = mean(fake) - mean(real), g = -mean(fake).
/// log_form: scores pass through a sigmoid and the log form is used with a saturating generator side.
AdversarialLoss image_adv_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores, AdvMode mode);

/// Generator side of image_adv_loss alone.
torch::Tensor image_generator_loss(const torch::Tensor& fake_scores, AdvMode mode);

using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

/// lambda * mean_b (||d critic(x_b) / d x_b||_2 - 1)^2, differentiable w.r.t. the critic's parameters.
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& samples, double lambda);

/// Points at which the penalty is evaluated: the real batch itself, or uniform
/// per-sample convex combinations of real and generated images.
torch::Tensor penalty_samples(GpMode mode, const torch::Tensor& real, const torch::Tensor& fake, at::Generator& gen);

/// Nearest-integer level per entry (ties away from zero), clamped to [0, m].
torch::Tensor discretize_levels(const torch::Tensor& aus, int m);

/// grids: (B, d, m+1) probabilities; targets: (B, d) continuous intensities.
/// -(1/d) sum_j log grid[j, round(u_j)], averaged over the batch.
torch::Tensor au_class_loss(const torch::Tensor& grids, const torch::Tensor& targets);

/// probs: (B, n); labels: (B) int64. Mean of -log probs[c].
torch::Tensor id_class_loss(const torch::Tensor& probs, const torch::Tensor& labels);

/// Fixed feature map used by the perceptual loss; parameters never receive gradients.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    /// images: NCHW in [-1, 1]; returns (N, C3, H3, W3).
    virtual torch::Tensor features(const torch::Tensor& images) const = 0;
};

/// Three seeded, frozen conv blocks (He-normal weights). Optionally loads
/// externally trained weights saved with torch::save. Follows the input dtype.
class RandomConvExtractor final : public FeatureExtractor {
public:
    RandomConvExtractor(int width, std::uint64_t seed);
    torch::Tensor features(const torch::Tensor& images) const override;
    void load_weights(const std::string& path);

private:
    mutable torch::nn::Sequential net_;
};

torch::Tensor perceptual_loss(const FeatureExtractor& extractor, const torch::Tensor& real, const torch::Tensor& manipulated,
                              const torch::Tensor& reconstructed);

struct SsimConstants {
    int window_size = 11;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

/// Mean SSIM of two NCHW batches in [0, 1] with Gaussian-window statistics over the valid region.
torch::Tensor ssim_single(const torch::Tensor& x, const torch::Tensor& y, const SsimConstants& k = {});

/// Standard five-scale MS-SSIM exponents truncated to `scales` and renormalized to sum to 1.
std::vector<double> ms_ssim_weights(int scales);

/// Multi-scale SSIM of NCHW batches in [0, 1] with 2x average pooling between scales.
/// Per scale and channel the mean contrast-structure term (mean SSIM at the coarsest
/// scale) is clamped below at 1e-6 before exponentiation. Returns the batch/channel mean.
torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& y, int scales = 4, const SsimConstants& k = {});

/// mean|I_hat - I| + (1 - MS-SSIM(I_hat, I)), both on images remapped from [-1, 1] to [0, 1].
/// The MS-SSIM term is dropped when use_ssim is false.
torch::Tensor reconstruction_loss(const torch::Tensor& reconstructed, const torch::Tensor& real, bool use_ssim, int scales);

/// Scalar terms entering the min side of the full objective.
struct LossTerms {
    torch::Tensor adv_z;    // encoder side of the latent game
    torch::Tensor adv_img;  // generator side of the image game
    torch::Tensor au;
    torch::Tensor id;
    torch::Tensor per;
    torch::Tensor rec;
};

/// adv_z + adv_img + lambda_au*au + lambda_id*id + lambda_per*per + lambda_rec*rec,
/// dropping the perceptual / identity terms under their ablation flags.
torch::Tensor min_side_total(const LossTerms& terms, const TrainConfig& config);

struct LossReport {
    double adv_z = 0, adv_img = 0, au = 0, id = 0, per = 0, rec = 0;
    double total_min_side = 0;
    double total_max_side = 0;  // D_z loss + D_img adversarial loss + gradient penalty
    double d_z = 0, d_img = 0, gp = 0;
};

LossReport total_losses(const LossTerms& terms, const TrainConfig& config, double d_z_loss = 0, double d_img_loss = 0,
                        double gp = 0);

}  // namespace expredit
