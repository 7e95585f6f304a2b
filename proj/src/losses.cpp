#include "expredit/losses.hpp"

#include <cmath>
#include <sstream>

#include "expredit/core.hpp"

namespace expredit {

namespace F = torch::nn::functional;

namespace {

void require_nonempty(const torch::Tensor& t, const char* what) {
    if (!t.defined() || t.numel() == 0) throw Error(std::string("empty batch passed to ") + what);
}

torch::Tensor clamp_prob(const torch::Tensor& p) { return p.clamp(kProbEpsilon, 1.0 - kProbEpsilon); }

}  // namespace

AdversarialLoss latent_adv_loss(const torch::Tensor& real_probs, const torch::Tensor& fake_probs, bool saturating) {
    require_nonempty(real_probs, "latent_adv_loss");
    require_nonempty(fake_probs, "latent_adv_loss");
    const auto real = clamp_prob(real_probs);
    const auto fake = clamp_prob(fake_probs);
    AdversarialLoss out;
    out.d_loss = -torch::log(real).mean() - torch::log(1.0 - fake).mean();
    out.g_loss = saturating ? torch::log(1.0 - fake).mean() : -torch::log(fake).mean();
    return out;
}

AdversarialLoss image_adv_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores, AdvMode mode) {
    require_nonempty(real_scores, "image_adv_loss");
    require_nonempty(fake_scores, "image_adv_loss");
    AdversarialLoss out;
    if (mode == AdvMode::wasserstein) {
        out.d_loss = fake_scores.mean() - real_scores.mean();
    } else {
        const auto real = clamp_prob(torch::sigmoid(real_scores));
        const auto fake = clamp_prob(torch::sigmoid(fake_scores));
        out.d_loss = -torch::log(real).mean() - torch::log(1.0 - fake).mean();
    }
    out.g_loss = image_generator_loss(fake_scores, mode);
    return out;
}

torch::Tensor image_generator_loss(const torch::Tensor& fake_scores, AdvMode mode) {
    require_nonempty(fake_scores, "image_generator_loss");
    if (mode == AdvMode::wasserstein) return -fake_scores.mean();
    return torch::log(1.0 - clamp_prob(torch::sigmoid(fake_scores))).mean();
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& samples, double lambda) {
    require_nonempty(samples, "gradient_penalty");
    auto x = samples.detach().requires_grad_(true);
    auto scores = critic(x);
    torch::Tensor grads;
    if (scores.requires_grad()) {
        grads = torch::autograd::grad({scores.sum()}, {x}, /*grad_outputs=*/{}, /*retain_graph=*/true,
                                      /*create_graph=*/true, /*allow_unused=*/true)[0];
    }
    if (!grads.defined()) grads = torch::zeros_like(x);
    const auto norms = torch::linalg_vector_norm(grads.flatten(1), 2, {1});
    return lambda * (norms - 1.0).pow(2).mean();
}

torch::Tensor penalty_samples(GpMode mode, const torch::Tensor& real, const torch::Tensor& fake, at::Generator& gen) {
    if (mode == GpMode::at_real) return real.detach();
    auto eps = torch::rand({real.size(0), 1, 1, 1}, gen, real.options());
    return (eps * real.detach() + (1.0 - eps) * fake.detach());
}

torch::Tensor discretize_levels(const torch::Tensor& aus, int m) {
    // floor(|u| + 0.5) with the sign restored is round-half-away-from-zero.
    auto rounded = torch::sign(aus) * torch::floor(torch::abs(aus) + 0.5);
    return rounded.clamp(0, m).to(torch::kLong);
}

torch::Tensor au_class_loss(const torch::Tensor& grids, const torch::Tensor& targets) {
    require_nonempty(grids, "au_class_loss");
    if (grids.dim() != 3 || targets.dim() != 2 || grids.size(0) != targets.size(0) || grids.size(1) != targets.size(1)) {
        std::ostringstream msg;
        msg << "au_class_loss shape mismatch: grids " << grids.sizes() << " vs targets " << targets.sizes();
        throw Error(msg.str());
    }
    const auto m = static_cast<int>(grids.size(2)) - 1;
    const auto levels = discretize_levels(targets.detach(), m).unsqueeze(2);
    const auto picked = grids.gather(2, levels).squeeze(2);
    return -torch::log(clamp_prob(picked)).mean(1).mean();
}

torch::Tensor id_class_loss(const torch::Tensor& probs, const torch::Tensor& labels) {
    require_nonempty(probs, "id_class_loss");
    if (probs.dim() != 2 || labels.dim() != 1 || labels.size(0) != probs.size(0)) throw Error("id_class_loss shape mismatch");
    const auto n = probs.size(1);
    const auto lo = labels.min().item<std::int64_t>();
    const auto hi = labels.max().item<std::int64_t>();
    if (lo < 0 || hi >= n) {
        throw Error("identity label " + std::to_string(hi >= n ? hi : lo) + " outside [0, " + std::to_string(n) + ")");
    }
    const auto picked = probs.gather(1, labels.to(torch::kLong).unsqueeze(1)).squeeze(1);
    return -torch::log(clamp_prob(picked)).mean();
}

RandomConvExtractor::RandomConvExtractor(int width, std::uint64_t seed) {
    namespace nn = torch::nn;
    net_ = nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, width, 3).padding(1)), nn::ReLU(),
                          nn::MaxPool2d(nn::MaxPool2dOptions(2)),
                          nn::Conv2d(nn::Conv2dOptions(width, 2 * width, 3).padding(1)), nn::ReLU(),
                          nn::MaxPool2d(nn::MaxPool2dOptions(2)),
                          nn::Conv2d(nn::Conv2dOptions(2 * width, 4 * width, 3).padding(1)), nn::ReLU());
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    torch::NoGradGuard no_grad;
    for (auto& m : net_->modules(false)) {
        if (auto* conv = m->as<nn::Conv2d>()) {
            const double fan_in = static_cast<double>(conv->weight.size(1) * conv->weight.size(2) * conv->weight.size(3));
            conv->weight.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
            conv->bias.zero_();
        }
    }
    for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

torch::Tensor RandomConvExtractor::features(const torch::Tensor& images) const {
    if (net_->parameters().front().scalar_type() != images.scalar_type()) net_->to(images.scalar_type());
    return net_->forward(images);
}

void RandomConvExtractor::load_weights(const std::string& path) {
    torch::load(net_, path);
    for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

torch::Tensor perceptual_loss(const FeatureExtractor& extractor, const torch::Tensor& real, const torch::Tensor& manipulated,
                              const torch::Tensor& reconstructed) {
    if (real.sizes() != manipulated.sizes() || real.sizes() != reconstructed.sizes()) {
        throw Error("perceptual_loss: image batches differ in shape");
    }
    torch::Tensor f_real;
    {
        torch::NoGradGuard no_grad;
        f_real = extractor.features(real.detach());
    }
    const auto f_man = extractor.features(manipulated);
    const auto f_rec = extractor.features(reconstructed);
    if (f_man.sizes() != f_real.sizes() || f_rec.sizes() != f_real.sizes()) {
        throw Error("perceptual_loss: extractor output shape differs across inputs");
    }
    const double volume = static_cast<double>(f_real[0].numel());
    const auto d_man = torch::linalg_vector_norm((f_real - f_man).flatten(1), 2, {1});
    const auto d_rec = torch::linalg_vector_norm((f_real - f_rec).flatten(1), 2, {1});
    return ((d_man + d_rec) / volume).mean();
}

namespace {

torch::Tensor gaussian_window(int size, double sigma, const torch::TensorOptions& options) {
    auto coords = torch::arange(size, torch::TensorOptions().dtype(torch::kFloat64)) - (size / 2);
    auto g = torch::exp(-coords.pow(2) / (2.0 * sigma * sigma));
    return (g / g.sum()).to(options);
}

struct SsimStats {
    torch::Tensor ssim;  // (N, C) mean of l * cs
    torch::Tensor cs;    // (N, C) mean of cs
};

SsimStats ssim_stats(const torch::Tensor& x, const torch::Tensor& y, const SsimConstants& k) {
    if (x.sizes() != y.sizes() || x.dim() != 4) throw Error("SSIM inputs must be NCHW batches of equal shape");
    if (x.size(2) < k.window_size || x.size(3) < k.window_size) {
        throw Error("image of " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                    " pixels is smaller than the SSIM window " + std::to_string(k.window_size));
    }
    const auto channels = x.size(1);
    const auto g = gaussian_window(k.window_size, k.sigma, x.options());
    const auto wh = g.view({1, 1, 1, k.window_size}).expand({channels, 1, 1, k.window_size}).contiguous();
    const auto wv = g.view({1, 1, k.window_size, 1}).expand({channels, 1, k.window_size, 1}).contiguous();
    auto filt = [&](const torch::Tensor& t) {
        return F::conv2d(F::conv2d(t, wh, F::Conv2dFuncOptions().groups(channels)), wv, F::Conv2dFuncOptions().groups(channels));
    };
    const auto mu_x = filt(x);
    const auto mu_y = filt(y);
    const auto mu_xx = mu_x * mu_x;
    const auto mu_yy = mu_y * mu_y;
    const auto mu_xy = mu_x * mu_y;
    const auto s_xx = filt(x * x) - mu_xx;
    const auto s_yy = filt(y * y) - mu_yy;
    const auto s_xy = filt(x * y) - mu_xy;

    const auto luminance = (2.0 * mu_xy + k.c1) / (mu_xx + mu_yy + k.c1);
    const auto cs = (2.0 * s_xy + k.c2) / (s_xx + s_yy + k.c2);
    return {(luminance * cs).mean({2, 3}), cs.mean({2, 3})};
}

}  // namespace

torch::Tensor ssim_single(const torch::Tensor& x, const torch::Tensor& y, const SsimConstants& k) {
    return ssim_stats(x, y, k).ssim.mean();
}

std::vector<double> ms_ssim_weights(int scales) {
    static constexpr double kStandard[] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    if (scales < 1 || scales > 5) throw Error("MS-SSIM supports 1 to 5 scales");
    double total = 0.0;
    for (int s = 0; s < scales; ++s) total += kStandard[s];
    std::vector<double> w(static_cast<std::size_t>(scales));
    for (int s = 0; s < scales; ++s) w[s] = kStandard[s] / total;
    return w;
}

torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& y, int scales, const SsimConstants& k) {
    const auto weights = ms_ssim_weights(scales);
    const auto coarsest = std::min(x.size(2), x.size(3)) >> (scales - 1);
    if (coarsest < k.window_size) {
        throw Error("images of " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) + " are too small for " +
                    std::to_string(scales) + "-scale MS-SSIM with an " + std::to_string(k.window_size) + "-pixel window");
    }
    constexpr double kFloor = 1e-6;
    auto a = x;
    auto b = y;
    torch::Tensor product;
    for (int s = 0; s < scales; ++s) {
        const auto stats = ssim_stats(a, b, k);
        const bool last = s == scales - 1;
        const auto term = (last ? stats.ssim : stats.cs).clamp_min(kFloor).pow(weights[s]);
        product = product.defined() ? product * term : term;
        if (!last) {
            a = F::avg_pool2d(a, F::AvgPool2dFuncOptions(2));
            b = F::avg_pool2d(b, F::AvgPool2dFuncOptions(2));
        }
    }
    return product.mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& reconstructed, const torch::Tensor& real, bool use_ssim, int scales) {
    if (reconstructed.sizes() != real.sizes()) throw Error("reconstruction_loss: shape mismatch");
    const auto r = (reconstructed + 1.0) * 0.5;
    const auto t = (real + 1.0) * 0.5;
    auto loss = (r - t).abs().mean();
    if (use_ssim) loss = loss + (1.0 - ms_ssim(r, t, scales));
    return loss;
}

torch::Tensor min_side_total(const LossTerms& t, const TrainConfig& config) {
    auto total = t.adv_z + t.adv_img + config.lambda_au * t.au + config.lambda_rec * t.rec;
    if (!config.ablation.no_id) total = total + config.lambda_id * t.id;
    if (!config.ablation.no_per) total = total + config.lambda_per * t.per;
    return total;
}

LossReport total_losses(const LossTerms& terms, const TrainConfig& config, double d_z_loss, double d_img_loss, double gp) {
    LossReport r;
    r.adv_z = terms.adv_z.item<double>();
    r.adv_img = terms.adv_img.item<double>();
    r.au = terms.au.item<double>();
    r.id = terms.id.item<double>();
    r.per = terms.per.item<double>();
    r.rec = terms.rec.item<double>();
    r.total_min_side = min_side_total(terms, config).item<double>();
    r.d_z = d_z_loss;
    r.d_img = d_img_loss;
    r.gp = gp;
    r.total_max_side = d_z_loss + d_img_loss + gp;
    return r;
}

}  // namespace expredit
