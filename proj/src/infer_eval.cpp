#include "expredit/infer_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "expredit/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace expredit {

namespace {

void require_usable(const ModelBundle& bundle) {
    if (!all_parameters_finite(*bundle.encoder) || !all_parameters_finite(*bundle.generator)) {
        throw Error("model bundle has non-finite encoder/generator parameters");
    }
}

FaceImage generate_one(const ModelBundle& bundle, const torch::Tensor& code, const AUVector& au) {
    return tensor_to_image(generate(bundle, code, aus_to_tensor({au}))[0]);
}

torch::Tensor encode_one(const ModelBundle& bundle, const FaceImage& image) {
    return encode(bundle, images_to_tensor({image}));
}

void require_pairs(const std::vector<AUVector>& targets, const std::vector<AUVector>& predictions, std::size_t min_n) {
    if (targets.size() != predictions.size()) {
        throw Error("length mismatch: " + std::to_string(targets.size()) + " targets vs " + std::to_string(predictions.size()) +
                    " predictions");
    }
    if (targets.size() < min_n) throw Error("need at least " + std::to_string(min_n) + " samples, got " + std::to_string(targets.size()));
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i].size() != predictions[i].size() || targets[i].size() == 0) {
            throw Error("AU vector length mismatch at sample " + std::to_string(i));
        }
    }
}

nlohmann::json au_json(const AUVector& u) {
    auto out = nlohmann::json::object();
    for (std::size_t j = 0; j < u.size(); ++j) out[std::string(kAUNames[j])] = u[j];
    return out;
}

std::vector<float> cosine_embeddings(const ModelBundle& bundle, const std::vector<FaceImage>& images) {
    torch::NoGradGuard no_grad;
    auto e = classify_identity(bundle, images_to_tensor(images)).embedding.to(torch::kDouble);
    e = e / e.norm(2, 1, true).clamp_min(1e-12);
    e = e.contiguous().to(torch::kFloat);
    return {e.data_ptr<float>(), e.data_ptr<float>() + e.numel()};
}

}  // namespace

FaceImage manipulate(const ModelBundle& bundle, const FaceImage& image, const AUVector& target) {
    require_usable(bundle);
    torch::NoGradGuard no_grad;
    return generate_one(bundle, encode_one(bundle, image), target);
}

FaceImage reconstruct(const ModelBundle& bundle, const FaceImage& image, const AUVector& own) {
    return manipulate(bundle, image, own);
}

std::vector<double> interpolation_alphas(int steps) {
    if (steps < 2) throw Error("interpolation needs steps ≥ 2, got " + std::to_string(steps));
    std::vector<double> alphas(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) alphas[k] = static_cast<double>(k) / (steps - 1);
    alphas.back() = 1.0;
    return alphas;
}

InterpolationStrip interpolate_images(const ModelBundle& bundle, const FaceImage& image, const AUVector& source,
                                      const AUVector& target, int steps) {
    InterpolationStrip strip;
    strip.alphas = interpolation_alphas(steps);
    require_usable(bundle);
    torch::NoGradGuard no_grad;
    const auto code = encode_one(bundle, image);
    for (double alpha : strip.alphas) strip.frames.push_back(generate_one(bundle, code, interpolate_au(source, target, alpha)));
    return strip;
}

AUMetricReport au_mse(const std::vector<AUVector>& targets, const std::vector<AUVector>& predictions) {
    require_pairs(targets, predictions, 1);
    const std::size_t d = targets.front().size();
    AUMetricReport report;
    report.per_au_mse.assign(d, 0.0);
    report.per_au_pcc.assign(d, std::nullopt);
    report.undefined_pcc = static_cast<int>(d);
    for (std::size_t j = 0; j < d; ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const double diff = predictions[i][j] - targets[i][j];
            sum += diff * diff;
        }
        report.per_au_mse[j] = sum / static_cast<double>(targets.size());
    }
    double total = 0.0;
    for (double v : report.per_au_mse) total += v;
    report.avg_mse = total / static_cast<double>(d);
    return report;
}

AUMetricReport au_pcc(const std::vector<AUVector>& targets, const std::vector<AUVector>& predictions) {
    require_pairs(targets, predictions, 2);
    const std::size_t d = targets.front().size();
    const auto n = static_cast<double>(targets.size());
    AUMetricReport report;
    report.per_au_pcc.assign(d, std::nullopt);
    double total = 0.0;
    int defined = 0;
    for (std::size_t j = 0; j < d; ++j) {
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            mx += targets[i][j];
            my += predictions[i][j];
        }
        mx /= n;
        my /= n;
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const double dx = targets[i][j] - mx;
            const double dy = predictions[i][j] - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        if (sxx == 0.0 || syy == 0.0) {
            ++report.undefined_pcc;
            continue;
        }
        const double r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
        report.per_au_pcc[j] = r;
        total += r;
        ++defined;
    }
    if (defined > 0) report.avg_pcc = total / defined;
    return report;
}

AUMetricReport au_metrics(const std::vector<AUVector>& targets, const std::vector<AUVector>& predictions) {
    auto report = au_mse(targets, predictions);
    if (targets.size() >= 2) {
        const auto pcc = au_pcc(targets, predictions);
        report.per_au_pcc = pcc.per_au_pcc;
        report.avg_pcc = pcc.avg_pcc;
        report.undefined_pcc = pcc.undefined_pcc;
    }
    return report;
}

std::string generated_image_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "target_%04zu.png", index);
    return buf;
}

AUMetricReport evaluate_au(const Manipulator& manipulator, const FaceImage& source, const std::vector<AUVector>& targets,
                           const AUOracle& oracle) {
    if (targets.empty()) throw Error("evaluate_au needs at least one target");
    std::vector<AUVector> predictions;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        predictions.push_back(oracle(manipulator(source, targets[i]), generated_image_name(i)));
    }
    return au_metrics(targets, predictions);
}

AUMetricReport evaluate_au(const ModelBundle& bundle, const FaceImage& source, const std::vector<DatasetRecord>& target_records,
                           const AUOracle& oracle) {
    std::vector<AUVector> targets;
    for (const auto& r : target_records) targets.push_back(r.au);
    return evaluate_au([&](const FaceImage& image, const AUVector& u) { return manipulate(bundle, image, u); }, source, targets,
                       oracle);
}

AUOracle csv_oracle(const fs::path& csv_path) {
    std::map<std::string, AUVector> table;
    for (auto& row : read_annotations(csv_path)) table[row.path] = std::move(row.au);
    return [table = std::move(table), csv_path](const FaceImage&, const std::string& name) {
        const auto it = table.find(name);
        if (it == table.end()) throw DataError("AU predictions " + csv_path.string() + " have no row for image " + name);
        return it->second;
    };
}

AUVector fit_renderer_aus(const SyntheticFaceParams& params, const FaceImage& image, int iterations) {
    const int size = image.size();
    const auto target = image.pixels();
    const auto n = static_cast<std::int64_t>(target.size());
    const auto residual = [&](const std::vector<double>& u) {
        const auto rendered = render_synthetic_face(params, AUVector::clamped(u), size);
        auto r = torch::empty({n}, torch::kDouble);
        auto* out = r.data_ptr<double>();
        const auto pix = rendered.pixels();
        for (std::int64_t i = 0; i < n; ++i) out[i] = static_cast<double>(pix[i]) - static_cast<double>(target[i]);
        return r;
    };
    const auto cost = [](const torch::Tensor& r) { return r.dot(r).item<double>(); };

    constexpr double kStep = 0.05;
    const auto refine = [&](std::vector<double> u) {
        auto r = residual(u);
        double c = cost(r);
        double lambda = 1e-2;
        for (int it = 0; it < iterations; ++it) {
            auto jac = torch::empty({n, kNumAUs}, torch::kDouble);
            for (int j = 0; j < kNumAUs; ++j) {
                auto probe = u;
                const double h = probe[j] + kStep <= kMaxIntensity ? kStep : -kStep;
                probe[j] += h;
                jac.select(1, j).copy_((residual(probe) - r) / h);
            }
            const auto jtj = jac.t().mm(jac);
            const auto jtr = jac.t().mv(r);
            bool improved = false;
            for (int tries = 0; tries < 6 && !improved; ++tries) {
                const auto damped = jtj + lambda * torch::diag(jtj.diagonal() + 1e-6);
                const auto delta = torch::linalg_solve(damped, -jtr.unsqueeze(1)).squeeze(1);
                auto candidate = u;
                for (int j = 0; j < kNumAUs; ++j) {
                    candidate[j] = std::clamp(u[j] + delta[j].item<double>(), 0.0, static_cast<double>(kMaxIntensity));
                }
                const auto r_new = residual(candidate);
                const double c_new = cost(r_new);
                if (c_new < c) {
                    u = std::move(candidate);
                    r = r_new;
                    c = c_new;
                    lambda = std::max(lambda / 3.0, 1e-6);
                    improved = true;
                } else {
                    lambda *= 4.0;
                }
            }
            if (!improved) break;
        }
        return std::pair{u, c};
    };
    // Per-AU grid search to leave basins the local refinement cannot escape.
    const auto coordinate_search = [&](std::vector<double> u, double c) {
        for (int j = 0; j < kNumAUs; ++j) {
            for (int k = 0; k <= 20; ++k) {
                auto probe = u;
                probe[j] = 0.25 * k;
                const double c_new = cost(residual(probe));
                if (c_new < c) {
                    u = std::move(probe);
                    c = c_new;
                }
            }
        }
        return std::pair{u, c};
    };

    std::vector<double> best_u;
    double best_cost = 0.0;
    for (double start : {0.0, 2.5}) {
        auto [u, c] = refine(std::vector<double>(kNumAUs, start));
        if (best_u.empty() || c < best_cost) {
            best_u = u;
            best_cost = c;
        }
    }
    for (int round = 0; round < 2; ++round) {
        auto [u, c] = coordinate_search(best_u, best_cost);
        std::tie(best_u, best_cost) = refine(u);
        if (best_cost > c) std::tie(best_u, best_cost) = std::pair{u, c};
    }
    return AUVector::clamped(best_u);
}

AUOracle renderer_fit_oracle(const SyntheticFaceParams& params, int image_size) {
    return [params, image_size](const FaceImage& image, const std::string& name) {
        if (image.size() != image_size) throw DataError("image " + name + " has the wrong size for the renderer oracle");
        return fit_renderer_aus(params, image);
    };
}

double identity_similarity(const ModelBundle& bundle, const FaceImage& a, const FaceImage& b) {
    const auto e = cosine_embeddings(bundle, {a, b});
    const std::size_t dim = e.size() / 2;
    double dot = 0.0;
    for (std::size_t k = 0; k < dim; ++k) dot += static_cast<double>(e[k]) * e[dim + k];
    return std::clamp(dot, -1.0, 1.0);
}

ThresholdCalibration calibrate_identity_threshold(const ModelBundle& bundle, const std::vector<DatasetRecord>& records,
                                                  int max_pairs, std::uint64_t seed) {
    std::vector<std::pair<std::size_t, std::size_t>> same, different;
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (std::size_t k = i + 1; k < records.size(); ++k) {
            (records[i].identity == records[k].identity ? same : different).emplace_back(i, k);
        }
    }
    if (same.empty() || different.empty()) throw Error("threshold calibration needs same- and different-identity pairs");
    std::mt19937_64 rng(seed);
    const auto subsample = [&](auto& pairs) {
        if (pairs.size() <= static_cast<std::size_t>(max_pairs)) return;
        for (std::size_t i = 0; i < static_cast<std::size_t>(max_pairs); ++i) {
            std::swap(pairs[i], pairs[i + uniform_index(rng, pairs.size() - i)]);
        }
        pairs.resize(static_cast<std::size_t>(max_pairs));
    };
    subsample(same);
    subsample(different);

    std::vector<FaceImage> images;
    for (const auto& r : records) images.push_back(r.image);
    std::vector<float> e;
    for (std::size_t start = 0; start < images.size(); start += 32) {
        const auto end = std::min(images.size(), start + 32);
        const auto chunk = cosine_embeddings(bundle, {images.begin() + start, images.begin() + end});
        e.insert(e.end(), chunk.begin(), chunk.end());
    }
    const std::size_t dim = e.size() / images.size();
    const auto cosine = [&](std::size_t a, std::size_t b) {
        double dot = 0.0;
        for (std::size_t k = 0; k < dim; ++k) dot += static_cast<double>(e[a * dim + k]) * e[b * dim + k];
        return dot;
    };
    std::vector<double> s_same, s_diff;
    for (const auto& [a, b] : same) s_same.push_back(cosine(a, b));
    for (const auto& [a, b] : different) s_diff.push_back(cosine(a, b));

    std::vector<double> scores = s_same;
    scores.insert(scores.end(), s_diff.begin(), s_diff.end());
    std::sort(scores.begin(), scores.end());
    // Midpoints between neighbouring scores, so a clean separation puts the threshold inside the gap.
    std::vector<double> candidates = {scores.front() - 1e-6};
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[i - 1]) candidates.push_back(0.5 * (scores[i] + scores[i - 1]));
    }
    candidates.push_back(scores.back() + 1e-6);
    ThresholdCalibration best;
    best.same_pairs = static_cast<int>(s_same.size());
    best.different_pairs = static_cast<int>(s_diff.size());
    double best_gap = 2.0;
    for (double t : candidates) {
        const double frr = static_cast<double>(std::count_if(s_same.begin(), s_same.end(), [t](double s) { return s < t; })) /
                           static_cast<double>(s_same.size());
        const double far = static_cast<double>(std::count_if(s_diff.begin(), s_diff.end(), [t](double s) { return s >= t; })) /
                           static_cast<double>(s_diff.size());
        if (std::abs(far - frr) < best_gap) {
            best_gap = std::abs(far - frr);
            best.threshold = t;
            best.false_accept = far;
            best.false_reject = frr;
        }
    }
    best.threshold = std::clamp(best.threshold, -0.999999, 0.999999);
    return best;
}

double identity_accuracy(const ModelBundle& bundle, const std::vector<std::pair<FaceImage, FaceImage>>& pairs, double threshold) {
    if (pairs.empty()) throw Error("identity_accuracy needs at least one pair");
    if (!(threshold > -1.0 && threshold < 1.0)) throw Error("identity threshold must lie in (-1, 1)");
    std::size_t accepted = 0;
    for (const auto& [a, b] : pairs) accepted += identity_similarity(bundle, a, b) >= threshold ? 1 : 0;
    return static_cast<double>(accepted) / static_cast<double>(pairs.size());
}

void write_metric_csv(const AUMetricReport& report, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    char buf[128];
    const auto fmt = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    out << "au,mse,pcc\n";
    for (std::size_t j = 0; j < report.per_au_mse.size(); ++j) {
        out << kAUNames[j] << ',' << fmt(report.per_au_mse[j]) << ','
            << (report.per_au_pcc[j] ? fmt(*report.per_au_pcc[j]) : "nan") << '\n';
    }
    out << "avg," << fmt(report.avg_mse) << ',' << (report.avg_pcc ? fmt(*report.avg_pcc) : "nan") << '\n';
}

std::string metric_summary(const AUMetricReport& report) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << "AU intensity metrics over " << report.per_au_mse.size() << " AUs\n";
    out << "  average MSE: " << report.avg_mse << '\n';
    out << "  average PCC: ";
    if (report.avg_pcc) {
        out << *report.avg_pcc;
    } else {
        out << "undefined";
    }
    out << " (" << report.undefined_pcc << " AUs excluded for zero variance)\n";
    return out.str();
}

RawImage montage(const std::vector<std::vector<FaceImage>>& rows) {
    if (rows.empty() || rows.front().empty()) throw Error("montage needs at least one image");
    const int s = rows.front().front().size();
    std::size_t cols = 0;
    for (const auto& row : rows) cols = std::max(cols, row.size());
    RawImage out;
    out.height = s * static_cast<int>(rows.size());
    out.width = s * static_cast<int>(cols);
    out.channels = 3;
    out.bytes.assign(static_cast<std::size_t>(out.height) * out.width * 3, 255);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            if (rows[r][c].size() != s) throw Error("montage images must share one size");
            const auto tile = to_raw(rows[r][c]);
            for (int y = 0; y < s; ++y) {
                const auto* src = tile.bytes.data() + static_cast<std::size_t>(y) * s * 3;
                auto* dst = out.bytes.data() + ((r * s + y) * static_cast<std::size_t>(out.width) + c * s) * 3;
                std::copy(src, src + static_cast<std::size_t>(s) * 3, dst);
            }
        }
    }
    return out;
}

void write_strip(const InterpolationStrip& strip, const AUVector& source, const AUVector& target, const fs::path& png_path,
                 const fs::path& manifest_path) {
    write_image(png_path, montage({strip.frames}));
    nlohmann::json manifest;
    manifest["image"] = png_path.filename().string();
    manifest["frame_size"] = strip.frames.front().size();
    manifest["source_au"] = au_json(source);
    manifest["target_au"] = au_json(target);
    manifest["frames"] = nlohmann::json::array();
    for (double alpha : strip.alphas) {
        manifest["frames"].push_back({{"alpha", alpha}, {"au", au_json(interpolate_au(source, target, alpha))}});
    }
    std::ofstream out(manifest_path);
    if (!out) throw Error("cannot write " + manifest_path.string());
    out << manifest.dump(2) << '\n';
}

std::vector<AblationRow> run_ablation(const AblationInputs& inputs, const TrainConfig& config,
                                      const std::vector<std::string>& variants, const fs::path& out_dir) {
    static const std::set<std::string> known = {"no_per", "no_id", "no_ssim"};
    std::vector<std::string> names = {"full"};
    for (const auto& v : variants) {
        if (!known.count(v)) throw ConfigError("unknown ablation variant '" + v + "' (expected no_per, no_id or no_ssim)");
        if (std::find(names.begin(), names.end(), v) == names.end()) names.push_back(v);
    }
    if (inputs.eval.size() < 2) throw Error("ablation evaluation needs at least 2 held-out records");
    fs::create_directories(out_dir);

    const Dataset train_set{inputs.train, inputs.identity_names};
    const auto& eval = inputs.eval;
    const std::size_t n_targets = std::min(eval.size() - 1, static_cast<std::size_t>(std::max(1, inputs.eval_targets)));
    const std::vector<DatasetRecord> targets(eval.begin() + 1, eval.begin() + 1 + static_cast<std::ptrdiff_t>(n_targets));
    const auto next_target = [&](std::size_t k) { return eval[(k + 1) % eval.size()].au; };

    std::vector<AblationRow> rows;
    std::vector<ModelBundle> bundles;
    for (const auto& name : names) {
        TrainConfig cfg = config;
        cfg.ablation = Ablation{};
        cfg.ablation.no_per = name == "no_per";
        cfg.ablation.no_id = name == "no_id";
        cfg.ablation.no_ssim = name == "no_ssim";
        if (inputs.progress) *inputs.progress << "ablation variant " << name << '\n';
        const auto run_dir = out_dir / name;
        auto state = train(train_set, cfg, run_dir, TrainOptions{.resume_from = std::nullopt, .progress = inputs.progress});

        AblationRow row;
        row.variant = name;
        row.steps = state.global_step;
        row.checkpoint = run_dir / kFinalCheckpoint;
        if (inputs.oracle_for) row.au = evaluate_au(state.bundle, eval.front().image, targets, inputs.oracle_for(eval.front()));
        const auto calibration = calibrate_identity_threshold(state.bundle, inputs.train, 500, cfg.seed);
        std::vector<std::pair<FaceImage, FaceImage>> pairs;
        for (std::size_t k = 0; k < std::min(eval.size(), n_targets); ++k) {
            pairs.emplace_back(eval[k].image, manipulate(state.bundle, eval[k].image, next_target(k)));
        }
        row.identity_threshold = calibration.threshold;
        row.identity_accuracy = identity_accuracy(state.bundle, pairs, calibration.threshold);
        rows.push_back(row);
        bundles.push_back(std::move(state.bundle));
    }

    std::ofstream table(out_dir / "ablation.csv");
    if (!table) throw Error("cannot write " + (out_dir / "ablation.csv").string());
    table << "variant,steps,checkpoint,avg_mse,avg_pcc,pcc_undefined,identity_accuracy_proxy,identity_threshold\n";
    char buf[256];
    for (const auto& r : rows) {
        const bool has_au = !r.au.per_au_mse.empty();
        std::snprintf(buf, sizeof buf, ",%.6f,%s,%d,%.6f,%.6f\n", has_au ? r.au.avg_mse : std::nan(""),
                      r.au.avg_pcc ? std::to_string(*r.au.avg_pcc).c_str() : "nan", r.au.undefined_pcc, r.identity_accuracy,
                      r.identity_threshold);
        table << r.variant << ',' << r.steps << ',' << fs::relative(r.checkpoint, out_dir).string() << buf;
    }

    std::vector<std::vector<FaceImage>> grid;
    nlohmann::json manifest;
    manifest["columns"] = nlohmann::json::array({"source"});
    for (const auto& name : names) manifest["columns"].push_back(name);
    manifest["rows"] = nlohmann::json::array();
    const std::size_t n_rows = std::min(eval.size(), static_cast<std::size_t>(std::max(1, inputs.grid_rows)));
    for (std::size_t k = 0; k < n_rows; ++k) {
        std::vector<FaceImage> row = {eval[k].image};
        for (const auto& b : bundles) row.push_back(manipulate(b, eval[k].image, next_target(k)));
        grid.push_back(std::move(row));
        manifest["rows"].push_back({{"source", eval[k].source_path}, {"source_au", au_json(eval[k].au)},
                                    {"target_au", au_json(next_target(k))}});
    }
    write_image(out_dir / "ablation_grid.png", montage(grid));
    manifest["image"] = "ablation_grid.png";
    std::ofstream(out_dir / "ablation_grid.json") << manifest.dump(2) << '\n';
    return rows;
}

}  // namespace expredit
