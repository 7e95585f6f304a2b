#include <fstream>

#include "doctest_torch.hpp"
#include "expredit/training.hpp"
#include "support.hpp"

using namespace expredit;
namespace fs = std::filesystem;

namespace {

const SyntheticDataset& small_dataset() {
    static const auto ds = make_synthetic_dataset(testing::scratch("train_ds"), 4, 8, 3, 64);
    return ds;
}

TrainState pretrained_state(const TrainConfig& c) {
    auto bundle = build_models(c, c.seed);
    pretrain_identity(bundle, small_dataset().dataset.records);
    return make_train_state(std::move(bundle));
}

void run_steps(TrainState& s, int n) {
    for (int i = 0; i < n; ++i) train_step(s, sample_batch(small_dataset().dataset.records, s.bundle.config.batch_size, s.batch_rng));
}

}  // namespace

TEST_CASE("learning-rate multiplier decays linearly in the second half") {
    const std::vector<double> expected = {1.0, 1.0, 2.0 / 3.0, 1.0 / 3.0};
    for (int e = 0; e < 4; ++e) CHECK(lr_multiplier(e, 4, 0.5) == doctest::Approx(expected[e]).epsilon(1e-12));
    CHECK(lr_multiplier(0, 400, 0.5) == 1.0);
    CHECK(lr_multiplier(199, 400, 0.5) == 1.0);
    CHECK(lr_multiplier(200, 400, 0.5) == doctest::Approx(1.0 - 1.0 / 201.0));
    CHECK(lr_multiplier(399, 400, 0.5) == doctest::Approx(1.0 / 201.0));
    for (int e = 0; e < 10; ++e) CHECK(lr_multiplier(e, 10, 1.0) == 1.0);
}

TEST_CASE("identity pretraining reaches full training accuracy and freezes the classifier") {
    auto bundle = build_models(testing::tiny_config(), 0);
    const auto result = pretrain_identity(bundle, small_dataset().dataset.records);
    CHECK(result.train_accuracy >= 0.95);
    CHECK(bundle.identity_pretrained);
    for (const auto& p : bundle.identity->parameters()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("joint training refuses an unpretrained identity classifier") {
    auto s = make_train_state(build_models(testing::tiny_config(), 0));
    CHECK_THROWS_WITH_AS(run_steps(s, 1), doctest::Contains("pretrained"), TrainingError);
}

TEST_CASE("a train step updates E, G and the critics but never C_id") {
    auto s = pretrained_state(testing::tiny_config());
    const auto before = clone_bundle(s.bundle);
    run_steps(s, 2);
    CHECK(parameter_checksum(*s.bundle.identity) == parameter_checksum(*before.identity));
    const auto after_nets = s.bundle.named_networks();
    const auto before_nets = before.named_networks();
    REQUIRE(after_nets.size() == before_nets.size());
    for (size_t i = 0; i < after_nets.size(); ++i) {
        if (after_nets[i].first == "C_id") continue;
        INFO(after_nets[i].first);
        CHECK(parameter_checksum(*after_nets[i].second) != parameter_checksum(*before_nets[i].second));
    }
    CHECK(s.global_step == 2);
    CHECK(s.metrics_log.size() == 2);
    CHECK(std::isfinite(s.metrics_log.back().second.total_min_side));
}

TEST_CASE("the generator phase gradient reaches every encoder and generator parameter") {
    auto s = pretrained_state(testing::tiny_config());
    const auto grads = generator_gradients(s, sample_batch(small_dataset().dataset.records, 4, s.batch_rng));
    int64_t expected = 0;
    for (auto* net : {static_cast<torch::nn::Module*>(s.bundle.encoder.ptr().get()),
                      static_cast<torch::nn::Module*>(s.bundle.generator.ptr().get())}) {
        expected += static_cast<int64_t>(net->parameters().size());
    }
    CHECK(static_cast<int64_t>(grads.size()) == expected);
    for (const auto& g : grads) {
        REQUIRE(g.defined());
        CHECK(torch::isfinite(g).all().item<bool>());
    }
}

TEST_CASE("ablation flags remove terms from the generator objective") {
    auto c = testing::tiny_config();
    const auto s = pretrained_state(c);
    std::mt19937_64 rng(1);
    const auto batch = to_tensors(sample_batch(small_dataset().dataset.records, 4, rng));
    const auto full = generator_pass(s.bundle, *s.extractor, batch);
    auto ablated = clone_bundle(s.bundle);
    ablated.config.ablation.no_per = true;
    ablated.config.ablation.no_id = true;
    const auto pass = generator_pass(ablated, *s.extractor, batch);
    const auto& t = full.terms;
    const double expected = full.total.item<double>() - c.lambda_per * t.per.item<double>() - c.lambda_id * t.id.item<double>();
    CHECK(pass.total.item<double>() == doctest::Approx(expected).epsilon(1e-5));
    ablated.config.ablation = {};
    ablated.config.ablation.no_ssim = true;
    const auto no_ssim = generator_pass(ablated, *s.extractor, batch);
    const auto l1 = ((no_ssim.reconstructed + 1) * 0.5 - (batch.images + 1) * 0.5).abs().mean();
    CHECK(no_ssim.terms.rec.item<double>() == doctest::Approx(l1.item<double>()).epsilon(1e-6));
}

TEST_CASE("seeded training is reproducible") {
    auto c = testing::tiny_config();
    auto a = pretrained_state(c);
    auto b = pretrained_state(c);
    run_steps(a, 3);
    run_steps(b, 3);
    CHECK(parameter_checksum(a.bundle) == parameter_checksum(b.bundle));
}

TEST_CASE("checkpoints restore the full training state") {
    const auto dir = testing::scratch("ckpt_state");
    auto c = testing::tiny_config();
    auto a = pretrained_state(c);
    run_steps(a, 2);
    save_checkpoint(a, dir / "a.ckpt");
    auto b = load_checkpoint(dir / "a.ckpt", &c);
    CHECK(b.global_step == 2);
    CHECK(b.bundle.identity_pretrained);
    CHECK(parameter_checksum(b.bundle) == parameter_checksum(a.bundle));
    CHECK(b.metrics_log.size() == 2);
    run_steps(a, 2);
    run_steps(b, 2);
    CHECK(parameter_checksum(b.bundle) == parameter_checksum(a.bundle));
}

TEST_CASE("damaged or mismatched checkpoints are rejected") {
    const auto dir = testing::scratch("ckpt_bad");
    auto c = testing::tiny_config();
    const auto s = make_train_state(build_models(c, 0));
    save_checkpoint(s, dir / "ok.ckpt");
    std::ifstream in(dir / "ok.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "short.ckpt"), doctest::Contains("truncated"), CheckpointError);

    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x5a;
    std::ofstream(dir / "flip.ckpt", std::ios::binary) << flipped;
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "flip.ckpt"), doctest::Contains("checksum"), CheckpointError);

    auto versioned = bytes;
    versioned[8] = 9;
    std::ofstream(dir / "version.ckpt", std::ios::binary) << versioned;
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "version.ckpt"), doctest::Contains("version"), CheckpointError);

    auto other = c;
    other.lambda_au = 1.0;
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "ok.ckpt", &other), doctest::Contains("config hash mismatch"), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), CheckpointError);
}

TEST_CASE("train writes metrics, periodic and final checkpoints, and resumes") {
    const auto dir = testing::scratch("train_run");
    auto c = testing::tiny_config();
    c.epochs = 2;
    c.checkpoint_every = 4;
    const auto state = train(small_dataset().dataset, c, dir);
    // 32 records / batch 4 = 8 steps per epoch.
    CHECK(state.global_step == 16);
    CHECK(fs::exists(dir / kFinalCheckpoint));
    CHECK(fs::exists(dir / "step_00000004.ckpt"));
    CHECK(fs::exists(dir / "step_00000012.ckpt"));
    CHECK(fs::exists(dir / "final.ckpt.arch.txt"));
    std::ifstream metrics(dir / kMetricsFile);
    std::string header;
    std::getline(metrics, header);
    CHECK(header == metrics_header());
    int rows = 0;
    for (std::string line; std::getline(metrics, line);) ++rows;
    CHECK(rows == 16);

    // Resuming from step 8 reproduces the uninterrupted run.
    const auto resumed_dir = testing::scratch("train_resume");
    TrainOptions options;
    options.resume_from = dir / "step_00000008.ckpt";
    const auto resumed = train(small_dataset().dataset, c, resumed_dir, options);
    CHECK(resumed.global_step == 16);
    CHECK(parameter_checksum(resumed.bundle) == parameter_checksum(state.bundle));
}

TEST_CASE("train validates its inputs") {
    auto c = testing::tiny_config();
    c.n_identities = 7;
    CHECK_THROWS_WITH_AS(train(small_dataset().dataset, c, testing::scratch("train_bad")), doctest::Contains("n_identities"),
                         TrainingError);
}
