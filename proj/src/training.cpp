#include "expredit/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace expredit {

namespace {

std::unique_ptr<torch::optim::Adam> make_adam(torch::nn::Module& module, double lr, const TrainConfig& c) {
    return std::make_unique<torch::optim::Adam>(
        module.parameters(), torch::optim::AdamOptions(lr).betas({c.adam_beta1, c.adam_beta2}));
}

void set_lr(torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

double current_lr(const torch::optim::Adam& opt) {
    return static_cast<const torch::optim::AdamOptions&>(opt.param_groups().front().options()).lr();
}

void set_trainable(torch::nn::Module& module, bool trainable) {
    for (auto& p : module.parameters()) p.set_requires_grad(trainable);
}

// Restores requires_grad flags on scope exit.
class FreezeGuard {
public:
    explicit FreezeGuard(std::vector<torch::nn::Module*> modules) : modules_(std::move(modules)) {
        for (auto* m : modules_) {
            for (const auto& p : m->parameters()) saved_.push_back(p.requires_grad());
            set_trainable(*m, false);
        }
    }
    ~FreezeGuard() {
        std::size_t i = 0;
        for (auto* m : modules_) {
            for (auto& p : m->parameters()) p.set_requires_grad(saved_[i++]);
        }
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    std::vector<torch::nn::Module*> modules_;
    std::vector<bool> saved_;
};

void require_finite(const torch::Tensor& value, std::int64_t step, const char* term) {
    if (!torch::isfinite(value).all().item<bool>()) {
        throw TrainingError("step " + std::to_string(step) + ": non-finite " + term);
    }
}

void require_finite_grads(torch::nn::Module& module, std::int64_t step, const char* network) {
    for (const auto& p : module.parameters()) {
        if (p.grad().defined() && !torch::isfinite(p.grad()).all().item<bool>()) {
            throw TrainingError("step " + std::to_string(step) + ": non-finite gradient in " + network);
        }
    }
}

constexpr std::uint64_t kExtractorSalt = 0x5045524345505455ULL;
constexpr std::uint64_t kTensorRngSalt = 0x54454E534F52524EULL;
constexpr std::uint64_t kPretrainSalt = 0x5052455452414E49ULL;

}  // namespace

std::vector<std::pair<std::string, torch::optim::Adam*>> Optimizers::named() const {
    return {{"E", encoder.get()},
            {"G", generator.get()},
            {"D_z", latent_critic.get()},
            {"D_img", image_critic.get()},
            {"C_exp", expression.get()}};
}

std::shared_ptr<FeatureExtractor> make_extractor(const TrainConfig& config) {
    return std::make_shared<RandomConvExtractor>(config.extractor_width, config.seed ^ kExtractorSalt);
}

TrainState make_train_state(ModelBundle bundle) {
    const auto& c = bundle.config;
    TrainState state{.bundle = std::move(bundle),
                     .optimizers = {},
                     .extractor = make_extractor(c),
                     .epoch = 0,
                     .global_step = 0,
                     .batch_rng = std::mt19937_64(c.seed),
                     .tensor_rng = at::make_generator<at::CPUGeneratorImpl>(c.seed ^ kTensorRngSalt),
                     .metrics_log = {}};
    auto& b = state.bundle;
    state.optimizers.encoder = make_adam(*b.encoder, c.lr_main, c);
    state.optimizers.generator = make_adam(*b.generator, c.lr_main, c);
    state.optimizers.latent_critic = make_adam(*b.latent_critic, c.lr_main, c);
    state.optimizers.image_critic = make_adam(*b.image_critic, c.lr_main, c);
    state.optimizers.expression = make_adam(*b.expression, c.lr_cexp, c);
    state.global_step = b.step;
    return state;
}

double identity_train_accuracy(const ModelBundle& bundle, const std::vector<DatasetRecord>& records) {
    torch::NoGradGuard no_grad;
    std::int64_t correct = 0;
    constexpr std::size_t kChunk = 32;
    for (std::size_t start = 0; start < records.size(); start += kChunk) {
        std::vector<FaceImage> images;
        std::vector<std::int64_t> labels;
        for (std::size_t i = start; i < std::min(records.size(), start + kChunk); ++i) {
            images.push_back(records[i].image);
            labels.push_back(records[i].identity.index);
        }
        const auto probs = classify_identity(bundle, images_to_tensor(images)).probs;
        const auto predicted = probs.argmax(1);
        correct += predicted.eq(torch::tensor(labels)).sum().item<std::int64_t>();
    }
    return records.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(records.size());
}

PretrainResult pretrain_identity(ModelBundle& bundle, const std::vector<DatasetRecord>& records) {
    const auto& c = bundle.config;
    int max_label = -1;
    bool several = false;
    for (const auto& r : records) {
        if (max_label >= 0 && r.identity.index != records.front().identity.index) several = true;
        max_label = std::max(max_label, r.identity.index);
    }
    if (!several) throw TrainingError("identity pretraining needs at least 2 identities");
    if (max_label >= c.n_identities) throw TrainingError("identity label exceeds the configured n_identities");

    set_trainable(*bundle.identity, true);
    torch::optim::Adam opt(bundle.identity->parameters(), torch::optim::AdamOptions(c.lr_id).betas({c.adam_beta1, c.adam_beta2}));
    std::mt19937_64 rng(c.seed ^ kPretrainSalt);
    const auto batch = static_cast<std::size_t>(c.batch_size);

    PretrainResult result;
    result.train_accuracy = identity_train_accuracy(bundle, records);
    for (int epoch = 0; epoch < c.pretrain_epochs && result.train_accuracy < c.pretrain_target_accuracy; ++epoch) {
        std::vector<std::size_t> order(records.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

        for (std::size_t start = 0; start < order.size(); start += batch) {
            std::vector<FaceImage> images;
            std::vector<std::int64_t> labels;
            for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) {
                images.push_back(records[order[i]].image);
                labels.push_back(records[order[i]].identity.index);
            }
            opt.zero_grad();
            const auto probs = classify_identity(bundle, images_to_tensor(images)).probs;
            const auto loss = id_class_loss(probs, torch::tensor(labels));
            require_finite(loss, epoch, "identity pretraining loss");
            loss.backward();
            opt.step();
        }
        result.epochs_run = epoch + 1;
        result.train_accuracy = identity_train_accuracy(bundle, records);
    }
    set_trainable(*bundle.identity, false);
    bundle.identity_pretrained = true;
    return result;
}

double lr_multiplier(std::int64_t epoch, int epochs, double decay_start_fraction) {
    const auto h = static_cast<std::int64_t>(std::floor(epochs * decay_start_fraction));
    const double decayed = static_cast<double>(std::max<std::int64_t>(0, epoch + 1 - h));
    return std::max(0.0, 1.0 - decayed / static_cast<double>(epochs - h + 1));
}

void set_learning_rates(TrainState& state, double multiplier) {
    const auto& c = state.bundle.config;
    set_lr(*state.optimizers.encoder, c.lr_main * multiplier);
    set_lr(*state.optimizers.generator, c.lr_main * multiplier);
    set_lr(*state.optimizers.latent_critic, c.lr_main * multiplier);
    set_lr(*state.optimizers.image_critic, c.lr_main * multiplier);
    set_lr(*state.optimizers.expression, c.lr_cexp * multiplier);
}

BatchTensors to_tensors(const Batch& batch) {
    std::vector<std::int64_t> ids;
    for (const auto& id : batch.identities) ids.push_back(id.index);
    return {images_to_tensor(batch.images), aus_to_tensor(batch.source_aus), aus_to_tensor(batch.target_aus), torch::tensor(ids)};
}

GeneratorPass generator_pass(const ModelBundle& bundle, const FeatureExtractor& extractor, const BatchTensors& batch) {
    const auto& c = bundle.config;
    std::vector<torch::nn::Module*> frozen = {bundle.latent_critic.ptr().get(), bundle.image_critic.ptr().get(),
                                              bundle.identity.ptr().get()};
    if (!c.joint_cexp) frozen.push_back(bundle.expression.ptr().get());
    FreezeGuard guard(frozen);

    const auto b = batch.images.size(0);
    const auto codes = encode(bundle, batch.images);
    // Manipulated and reconstructed images share one generator call.
    const auto both = generate(bundle, torch::cat({codes, codes}), torch::cat({batch.target_aus, batch.source_aus}));
    GeneratorPass pass;
    pass.manipulated = both.slice(0, 0, b);
    pass.reconstructed = both.slice(0, b, 2 * b);

    auto& t = pass.terms;
    t.adv_z = latent_adv_loss(torch::ones({1}), discriminate_latent(bundle, codes), c.latent_saturating).g_loss;
    t.adv_img = image_generator_loss(discriminate_image(bundle, pass.manipulated), c.adv_mode);
    t.au = au_class_loss(classify_expression(bundle, pass.manipulated), batch.target_aus);
    t.id = id_class_loss(classify_identity(bundle, pass.manipulated).probs, batch.identities);
    t.per = perceptual_loss(extractor, batch.images, pass.manipulated, pass.reconstructed);
    t.rec = reconstruction_loss(pass.reconstructed, batch.images, !c.ablation.no_ssim, effective_ms_ssim_scales(c));
    pass.total = min_side_total(t, c);
    return pass;
}

std::vector<torch::Tensor> generator_gradients(TrainState& state, const Batch& batch) {
    auto& b = state.bundle;
    b.encoder->zero_grad();
    b.generator->zero_grad();
    const auto pass = generator_pass(b, *state.extractor, to_tensors(batch));
    pass.total.backward();
    std::vector<torch::Tensor> grads;
    for (auto* net : {static_cast<torch::nn::Module*>(b.encoder.ptr().get()), static_cast<torch::nn::Module*>(b.generator.ptr().get())}) {
        for (const auto& p : net->parameters()) {
            grads.push_back(p.grad().defined() ? p.grad().clone() : torch::Tensor());
        }
    }
    b.encoder->zero_grad();
    b.generator->zero_grad();
    if (b.config.joint_cexp) b.expression->zero_grad();
    return grads;
}

LossReport train_step(TrainState& state, const Batch& batch) {
    auto& b = state.bundle;
    const auto& c = b.config;
    const auto step = state.global_step;
    if (!b.identity_pretrained) throw TrainingError("C_id must be pretrained before joint training");
    if (static_cast<int>(batch.size()) < 2) throw TrainingError("batch must hold at least 2 samples");

    const auto t = to_tensors(batch);
    const auto bsz = t.images.size(0);

    // (a) critic phase.
    torch::Tensor fake_codes, fake_images;
    {
        torch::NoGradGuard no_grad;
        fake_codes = encode(b, t.images);
        fake_images = generate(b, fake_codes, t.target_aus);
    }
    double d_z_value = 0.0, d_img_value = 0.0, gp_value = 0.0;
    for (int k = 0; k < c.critic_steps; ++k) {
        state.optimizers.latent_critic->zero_grad();
        const auto prior = torch::randn({bsz, c.latent_dim}, state.tensor_rng) * c.prior_std + c.prior_mean;
        const auto latent = latent_adv_loss(discriminate_latent(b, prior), discriminate_latent(b, fake_codes));
        require_finite(latent.d_loss, step, "D_z loss");
        latent.d_loss.backward();
        require_finite_grads(*b.latent_critic, step, "D_z");
        state.optimizers.latent_critic->step();

        state.optimizers.image_critic->zero_grad();
        const auto image = image_adv_loss(discriminate_image(b, t.images), discriminate_image(b, fake_images), c.adv_mode);
        const auto samples = penalty_samples(c.gp_mode, t.images, fake_images, state.tensor_rng);
        const auto gp = gradient_penalty([&](const torch::Tensor& x) { return discriminate_image(b, x); }, samples, c.lambda_gp);
        require_finite(image.d_loss, step, "D_img loss");
        require_finite(gp, step, "gradient penalty");
        (image.d_loss + gp).backward();
        require_finite_grads(*b.image_critic, step, "D_img");
        state.optimizers.image_critic->step();

        d_z_value = latent.d_loss.item<double>();
        d_img_value = image.d_loss.item<double>();
        gp_value = gp.item<double>();
    }

    // (b) expression classifier on real images and their own labels.
    if (!c.joint_cexp) {
        FreezeGuard guard({b.identity.ptr().get()});
        state.optimizers.expression->zero_grad();
        const auto loss = au_class_loss(classify_expression(b, t.images), t.source_aus);
        require_finite(loss, step, "C_exp loss");
        loss.backward();
        require_finite_grads(*b.expression, step, "C_exp");
        state.optimizers.expression->step();
    }

    // (c) encoder + generator.
    state.optimizers.encoder->zero_grad();
    state.optimizers.generator->zero_grad();
    if (c.joint_cexp) state.optimizers.expression->zero_grad();
    const auto pass = generator_pass(b, *state.extractor, t);
    const auto& terms = pass.terms;
    require_finite(terms.adv_z, step, "adv_z");
    require_finite(terms.adv_img, step, "adv_img");
    require_finite(terms.au, step, "au");
    require_finite(terms.id, step, "id");
    require_finite(terms.per, step, "per");
    require_finite(terms.rec, step, "rec");
    require_finite(pass.total, step, "total");
    pass.total.backward();

    if (step == 0) {
        for (auto* net : {static_cast<torch::nn::Module*>(b.encoder.ptr().get()),
                          static_cast<torch::nn::Module*>(b.generator.ptr().get())}) {
            for (const auto& item : net->named_parameters()) {
                if (!item.value().grad().defined()) {
                    throw TrainingError("step 0: parameter " + item.key() + " received no gradient");
                }
            }
        }
    }
    require_finite_grads(*b.encoder, step, "E");
    require_finite_grads(*b.generator, step, "G");
    state.optimizers.encoder->step();
    state.optimizers.generator->step();
    if (c.joint_cexp) {
        require_finite_grads(*b.expression, step, "C_exp");
        state.optimizers.expression->step();
    }

    for (const auto& [name, net] : b.named_networks()) {
        if (!all_parameters_finite(*net)) throw TrainingError("step " + std::to_string(step) + ": non-finite parameters in " + name);
    }

    LossReport report;
    {
        torch::NoGradGuard no_grad;
        report = total_losses(terms, c, d_z_value, d_img_value, gp_value);
    }
    state.global_step += 1;
    b.step = state.global_step;
    state.metrics_log.emplace_back(state.global_step, report);
    return report;
}

std::string metrics_header() { return "step,adv_z,adv_img,au,id,per,rec,total,lr"; }

std::string metrics_row(std::int64_t step, const LossReport& r, double lr) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", static_cast<long long>(step), r.adv_z,
                  r.adv_img, r.au, r.id, r.per, r.rec, r.total_min_side, lr);
    return buf;
}

TrainState train(const Dataset& dataset, TrainConfig config, const fs::path& checkpoint_dir, const TrainOptions& options) {
    if (config.n_identities == 0) config.n_identities = dataset.num_identities();
    if (config.n_identities != dataset.num_identities()) {
        throw TrainingError("config n_identities " + std::to_string(config.n_identities) + " differs from the dataset's " +
                            std::to_string(dataset.num_identities()));
    }
    std::error_code ec;
    fs::create_directories(checkpoint_dir, ec);
    {
        std::ofstream probe(checkpoint_dir / ".write_probe");
        if (ec || !probe) throw TrainingError("checkpoint directory " + checkpoint_dir.string() + " is not writable");
    }
    fs::remove(checkpoint_dir / ".write_probe", ec);

    const auto& records = dataset.records;
    if (records.size() < static_cast<std::size_t>(config.batch_size)) {
        throw TrainingError("dataset has fewer records than batch_size");
    }

    TrainState state = options.resume_from ? load_checkpoint(*options.resume_from, &config)
                                           : make_train_state(build_models(config, config.seed));
    if (options.resume_from) {
        // Run-control keys are not hashed; take the caller's.
        state.bundle.config.checkpoint_every = config.checkpoint_every;
        state.bundle.config.log_every = config.log_every;
        state.bundle.config.max_steps = config.max_steps;
    }
    if (!state.bundle.identity_pretrained) {
        const auto pre = pretrain_identity(state.bundle, records);
        if (options.progress) {
            *options.progress << "pretrain-id epochs=" << pre.epochs_run << " accuracy=" << pre.train_accuracy << '\n';
        }
    }

    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(records.size()) / config.batch_size;
    const std::int64_t total = steps_per_epoch * config.epochs;
    const std::int64_t stop = config.max_steps > 0 ? std::min<std::int64_t>(total, config.max_steps) : total;

    const auto metrics_path = checkpoint_dir / kMetricsFile;
    const bool fresh_log = !options.resume_from || !fs::exists(metrics_path);
    std::ofstream metrics(metrics_path, fresh_log ? std::ios::trunc : std::ios::app);
    if (!metrics) throw TrainingError("cannot write " + metrics_path.string());
    if (fresh_log) metrics << metrics_header() << '\n';

    auto checkpoint = [&](const fs::path& path) {
        save_checkpoint(state, path);
        write_architecture_manifest(state.bundle, fs::path(path.string() + ".arch.txt"));
    };

    while (state.global_step < stop) {
        state.epoch = state.global_step / steps_per_epoch;
        set_learning_rates(state, lr_multiplier(state.epoch, config.epochs, config.lr_decay_start_fraction));
        const auto batch = sample_batch(records, config.batch_size, state.batch_rng);
        const auto report = train_step(state, batch);
        metrics << metrics_row(state.global_step, report, current_lr(*state.optimizers.generator)) << '\n';

        if (options.progress && config.log_every > 0 && state.global_step % config.log_every == 0) {
            *options.progress << "epoch " << state.epoch << " step " << state.global_step << " total=" << report.total_min_side
                              << '\n';
        }
        if (config.checkpoint_every > 0 && state.global_step % config.checkpoint_every == 0 && state.global_step < stop) {
            char name[64];
            std::snprintf(name, sizeof name, "step_%08lld.ckpt", static_cast<long long>(state.global_step));
            checkpoint(checkpoint_dir / name);
        }
    }
    metrics.flush();
    checkpoint(checkpoint_dir / kFinalCheckpoint);
    return state;
}

}  // namespace expredit
