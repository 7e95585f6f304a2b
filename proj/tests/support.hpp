#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "expredit/config.hpp"

namespace testing {

/// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "expredit_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Very small networks for fast unit tests.
inline expredit::TrainConfig tiny_config(int n_identities = 4) {
    expredit::TrainConfig c;
    c.image_size = 64;
    c.latent_dim = 32;
    c.n_identities = n_identities;
    c.batch_size = 4;
    c.generator_width = 64;
    c.critic_width = 4;
    c.classifier_width = 4;
    c.classifier_blocks = 3;
    c.embedding_dim = 16;
    c.extractor_width = 4;
    c.pretrain_epochs = 40;
    return c;
}

/// Desk-scale networks used by the longer runs.
inline expredit::TrainConfig desk_config(int n_identities = 4) {
    expredit::TrainConfig c;
    c.image_size = 64;
    c.n_identities = n_identities;
    c.batch_size = 8;
    c.generator_width = 128;
    c.critic_width = 8;
    c.classifier_width = 8;
    c.classifier_blocks = 3;
    return c;
}

/// Direct-summation MS-SSIM: every windowed statistic is an explicit double
/// loop over the 11x11 Gaussian window at each valid position.
inline double ms_ssim_oracle(const torch::Tensor& x_in, const torch::Tensor& y_in, int scales) {
    const double standard[] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double wsum = 0.0;
    for (int s = 0; s < scales; ++s) wsum += standard[s];

    constexpr int kWin = 11;
    constexpr double kSigma = 1.5, kC1 = 1e-4, kC2 = 9e-4;
    double g[kWin];
    double gs = 0.0;
    for (int i = 0; i < kWin; ++i) {
        g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2 * kSigma * kSigma));
        gs += g[i];
    }
    for (double& v : g) v /= gs;

    const auto n = x_in.size(0), channels = x_in.size(1);
    double total = 0.0;
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t c = 0; c < channels; ++c) {
            auto xt = x_in[b][c].to(torch::kDouble).contiguous();
            auto yt = y_in[b][c].to(torch::kDouble).contiguous();
            std::vector<double> xs(xt.data_ptr<double>(), xt.data_ptr<double>() + xt.numel());
            std::vector<double> ys(yt.data_ptr<double>(), yt.data_ptr<double>() + yt.numel());
            int64_t h = xt.size(0), w = xt.size(1);
            double product = 1.0;
            for (int s = 0; s < scales; ++s) {
                double cs_sum = 0.0, ssim_sum = 0.0;
                int64_t count = 0;
                for (int64_t i = 0; i + kWin <= h; ++i) {
                    for (int64_t j = 0; j + kWin <= w; ++j) {
                        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                        for (int u = 0; u < kWin; ++u) {
                            for (int v = 0; v < kWin; ++v) {
                                const double wt = g[u] * g[v];
                                const double a = xs[(i + u) * w + j + v];
                                const double bb = ys[(i + u) * w + j + v];
                                mx += wt * a;
                                my += wt * bb;
                                xx += wt * a * a;
                                yy += wt * bb * bb;
                                xy += wt * a * bb;
                            }
                        }
                        const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
                        const double l = (2 * mx * my + kC1) / (mx * mx + my * my + kC1);
                        const double cs = (2 * cxy + kC2) / (vx + vy + kC2);
                        cs_sum += cs;
                        ssim_sum += l * cs;
                        ++count;
                    }
                }
                const bool last = s == scales - 1;
                const double term = std::max(1e-6, (last ? ssim_sum : cs_sum) / static_cast<double>(count));
                product *= std::pow(term, standard[s] / wsum);
                if (!last) {
                    const int64_t h2 = h / 2, w2 = w / 2;
                    std::vector<double> xd(h2 * w2), yd(h2 * w2);
                    for (int64_t i = 0; i < h2; ++i) {
                        for (int64_t j = 0; j < w2; ++j) {
                            xd[i * w2 + j] = 0.25 * (xs[2 * i * w + 2 * j] + xs[2 * i * w + 2 * j + 1] + xs[(2 * i + 1) * w + 2 * j] +
                                                     xs[(2 * i + 1) * w + 2 * j + 1]);
                            yd[i * w2 + j] = 0.25 * (ys[2 * i * w + 2 * j] + ys[2 * i * w + 2 * j + 1] + ys[(2 * i + 1) * w + 2 * j] +
                                                     ys[(2 * i + 1) * w + 2 * j + 1]);
                        }
                    }
                    xs = std::move(xd);
                    ys = std::move(yd);
                    h = h2;
                    w = w2;
                }
            }
            total += product;
        }
    }
    return total / static_cast<double>(n * channels);
}

struct GradCheck {
    int checked = 0;
    double worst_relative = 0.0;
};

/// Compares the float32 autograd gradient of f at x with central differences
/// (step h) evaluated in float64, at `count` seeded coordinates.
inline GradCheck check_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x,
                                int count, double h, uint64_t seed) {
    auto xv = x.detach().to(torch::kFloat).clone().requires_grad_(true);
    f(xv).backward();
    const auto analytic = xv.grad().flatten();
    const auto base = x.detach().to(torch::kDouble).flatten();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto picks = torch::randint(base.numel(), {count}, gen, torch::kLong);
    GradCheck out;
    torch::NoGradGuard no_grad;
    for (int k = 0; k < count; ++k) {
        const auto idx = picks[k].item<int64_t>();
        auto plus = base.clone();
        auto minus = base.clone();
        plus[idx] += h;
        minus[idx] -= h;
        const double fd = (f(plus.view(x.sizes())).item<double>() - f(minus.view(x.sizes())).item<double>()) / (2 * h);
        const double an = analytic[idx].item<double>();
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
        out.worst_relative = std::max(out.worst_relative, rel);
        ++out.checked;
    }
    return out;
}

}  // namespace testing
