#include <fstream>

#include "doctest_torch.hpp"
#include "expredit/config.hpp"
#include "expredit/core.hpp"
#include "support.hpp"

using namespace expredit;
using nlohmann::json;

TEST_CASE("an empty config yields the documented defaults") {
    const auto c = validate_config(json::object());
    CHECK(c == TrainConfig{});
    CHECK(c.lambda_au == 100.0);
    CHECK(c.lambda_id == 60.0);
    CHECK(c.lambda_per == 20.0);
    CHECK(c.lambda_rec == 100.0);
    CHECK(c.lambda_gp == 20.0);
    CHECK(c.lr_main == 1e-4);
    CHECK(c.lr_cexp == 2e-4);
    CHECK(c.batch_size == 8);
    CHECK(c.epochs == 400);
    CHECK(c.image_size == 128);
}

TEST_CASE("unknown keys and bad values name the key") {
    CHECK_THROWS_WITH_AS(validate_config(json{{"lamda_au", 1}}), "config key 'lamda_au': unknown key", ConfigError);
    CHECK_THROWS_WITH_AS(validate_config(json{{"batch_size", 1}}), doctest::Contains("batch_size must be ≥ 2"), ConfigError);
    CHECK_THROWS_WITH_AS(validate_config(json{{"d", 12}}), doctest::Contains("config key 'd'"), ConfigError);
    CHECK_THROWS_WITH_AS(validate_config(json{{"image_size", 96}}), doctest::Contains("image_size"), ConfigError);
    CHECK_THROWS_WITH_AS(validate_config(json{{"gp_mode", "sometimes"}}), doctest::Contains("gp_mode"), ConfigError);
    CHECK_THROWS_WITH_AS(validate_config(json{{"lr_main", "fast"}}), doctest::Contains("lr_main"), ConfigError);
    CHECK_THROWS_WITH_AS(validate_config(json{{"ablation", {"no_gan"}}}), doctest::Contains("no_gan"), ConfigError);
    CHECK_THROWS_AS(validate_config(json{{"image_size", 64}, {"ms_ssim_scales", 4}}), ConfigError);
}

TEST_CASE("overrides parse JSON values, fall back to strings, and win over the file") {
    json raw = {{"batch_size", 8}};
    apply_override(raw, "batch_size=4");
    apply_override(raw, "gp_mode=interpolated");
    apply_override(raw, "ablation=no_ssim,no_per");
    apply_override(raw, "joint_cexp=true");
    const auto c = validate_config(raw);
    CHECK(c.batch_size == 4);
    CHECK(c.gp_mode == GpMode::interpolated);
    CHECK(c.ablation.no_ssim);
    CHECK(c.ablation.no_per);
    CHECK_FALSE(c.ablation.no_id);
    CHECK(c.joint_cexp);
    CHECK_THROWS_AS(apply_override(raw, "no_equals_sign"), ConfigError);
}

TEST_CASE("config files round-trip through to_json") {
    const auto dir = testing::scratch("config_roundtrip");
    auto c = testing::desk_config();
    c.ablation.no_id = true;
    c.adv_mode = AdvMode::log_form;
    std::ofstream(dir / "c.json") << to_json(c).dump(2);
    CHECK(validate_config(load_config_file(dir / "c.json")) == c);
}

TEST_CASE("missing or malformed config files name the path") {
    CHECK_THROWS_WITH_AS(load_config_file("/nonexistent/c.json"), doctest::Contains("/nonexistent/c.json"), ConfigError);
    const auto dir = testing::scratch("config_bad");
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK_THROWS_WITH_AS(load_config_file(dir / "bad.json"), doctest::Contains("bad.json"), ConfigError);
}

TEST_CASE("config hash ignores run-control keys only") {
    TrainConfig a;
    TrainConfig b = a;
    b.max_steps = 10;
    b.log_every = 1;
    b.checkpoint_every = 7;
    CHECK(config_hash(a) == config_hash(b));
    b.seed = 1;
    CHECK(config_hash(a) != config_hash(b));
    TrainConfig c = a;
    c.ablation.no_ssim = true;
    CHECK(config_hash(a) != config_hash(c));
}

TEST_CASE("MS-SSIM scale count resolves automatically") {
    TrainConfig c;
    CHECK(effective_ms_ssim_scales(c) == 4);
    c.image_size = 64;
    CHECK(effective_ms_ssim_scales(c) == 3);
    c.ms_ssim_scales = 2;
    CHECK(effective_ms_ssim_scales(c) == 2);
}
