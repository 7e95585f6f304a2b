#include "expredit/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "expredit/core.hpp"

namespace expredit {

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& key, const std::string& what) {
    throw ConfigError("config key '" + key + "': " + what);
}

int get_int(const json& value, const std::string& key, int lo, int hi) {
    if (!value.is_number_integer() && !(value.is_number_float() && std::floor(value.get<double>()) == value.get<double>())) {
        fail(key, "expected an integer");
    }
    const auto v = value.get<double>();
    if (v < lo || v > hi) fail(key, "value " + value.dump() + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return static_cast<int>(v);
}

double get_real(const json& value, const std::string& key, double lo, double hi, bool open_lo = false) {
    if (!value.is_number()) fail(key, "expected a number");
    const auto v = value.get<double>();
    if (!std::isfinite(v) || v < lo || v > hi || (open_lo && v == lo)) {
        fail(key, "value " + value.dump() + " out of range");
    }
    return v;
}

bool get_bool(const json& value, const std::string& key) {
    if (!value.is_boolean()) fail(key, "expected true or false");
    return value.get<bool>();
}

Ablation parse_ablation(const json& value) {
    Ablation ablation;
    if (!value.is_array()) fail("ablation", "expected a list of {no_per, no_id, no_ssim}");
    for (const auto& item : value) {
        if (!item.is_string()) fail("ablation", "expected strings");
        const auto name = item.get<std::string>();
        if (name == "no_per") ablation.no_per = true;
        else if (name == "no_id") ablation.no_id = true;
        else if (name == "no_ssim") ablation.no_ssim = true;
        else fail("ablation", "unknown variant '" + name + "'");
    }
    return ablation;
}

json ablation_json(const Ablation& ablation) {
    json out = json::array();
    if (ablation.no_per) out.push_back("no_per");
    if (ablation.no_id) out.push_back("no_id");
    if (ablation.no_ssim) out.push_back("no_ssim");
    return out;
}

using Setter = std::function<void(TrainConfig&, const json&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    constexpr int kBig = 1 << 30;
    static const std::map<std::string, Setter> table = {
        {"d", [](TrainConfig& c, const json& v, const std::string& k) {
             c.d = get_int(v, k, 1, kBig);
             if (c.d != kNumAUs) fail(k, "only the fixed 17-AU set is supported");
         }},
        {"m", [](TrainConfig& c, const json& v, const std::string& k) {
             c.m = get_int(v, k, 1, kBig);
             if (c.m != kMaxIntensity) fail(k, "AU intensities are coded 0..5; m must be 5");
         }},
        {"image_size", [](TrainConfig& c, const json& v, const std::string& k) { c.image_size = get_int(v, k, 64, 4096); }},
        {"latent_dim", [](TrainConfig& c, const json& v, const std::string& k) { c.latent_dim = get_int(v, k, 1, 65536); }},
        {"n_identities", [](TrainConfig& c, const json& v, const std::string& k) { c.n_identities = get_int(v, k, 0, kBig); }},
        {"lambda_au", [](TrainConfig& c, const json& v, const std::string& k) { c.lambda_au = get_real(v, k, 0, 1e12); }},
        {"lambda_id", [](TrainConfig& c, const json& v, const std::string& k) { c.lambda_id = get_real(v, k, 0, 1e12); }},
        {"lambda_per", [](TrainConfig& c, const json& v, const std::string& k) { c.lambda_per = get_real(v, k, 0, 1e12); }},
        {"lambda_rec", [](TrainConfig& c, const json& v, const std::string& k) { c.lambda_rec = get_real(v, k, 0, 1e12); }},
        {"lambda_gp", [](TrainConfig& c, const json& v, const std::string& k) { c.lambda_gp = get_real(v, k, 0, 1e12); }},
        {"lr_main", [](TrainConfig& c, const json& v, const std::string& k) { c.lr_main = get_real(v, k, 0, 10, true); }},
        {"lr_cexp", [](TrainConfig& c, const json& v, const std::string& k) { c.lr_cexp = get_real(v, k, 0, 10, true); }},
        {"lr_id", [](TrainConfig& c, const json& v, const std::string& k) { c.lr_id = get_real(v, k, 0, 10, true); }},
        {"adam_beta1", [](TrainConfig& c, const json& v, const std::string& k) { c.adam_beta1 = get_real(v, k, 0, 0.999999); }},
        {"adam_beta2", [](TrainConfig& c, const json& v, const std::string& k) { c.adam_beta2 = get_real(v, k, 0, 0.999999); }},
        {"batch_size", [](TrainConfig& c, const json& v, const std::string& k) {
             c.batch_size = get_int(v, k, -kBig, kBig);
             if (c.batch_size < 2) fail(k, "batch_size must be ≥ 2");
         }},
        {"epochs", [](TrainConfig& c, const json& v, const std::string& k) { c.epochs = get_int(v, k, 1, kBig); }},
        {"lr_decay_start_fraction",
         [](TrainConfig& c, const json& v, const std::string& k) { c.lr_decay_start_fraction = get_real(v, k, 0, 1); }},
        {"seed", [](TrainConfig& c, const json& v, const std::string& k) {
             if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
                 fail(k, "expected a non-negative integer");
             }
             c.seed = v.get<std::uint64_t>();
         }},
        {"prior_mean", [](TrainConfig& c, const json& v, const std::string& k) { c.prior_mean = get_real(v, k, -1e6, 1e6); }},
        {"prior_std", [](TrainConfig& c, const json& v, const std::string& k) { c.prior_std = get_real(v, k, 0, 1e6, true); }},
        {"critic_steps", [](TrainConfig& c, const json& v, const std::string& k) { c.critic_steps = get_int(v, k, 1, 1000); }},
        {"gp_mode", [](TrainConfig& c, const json& v, const std::string& k) {
             const auto s = v.is_string() ? v.get<std::string>() : std::string{};
             if (s == "at_real") c.gp_mode = GpMode::at_real;
             else if (s == "interpolated") c.gp_mode = GpMode::interpolated;
             else fail(k, "expected \"at_real\" or \"interpolated\"");
         }},
        {"adv_mode", [](TrainConfig& c, const json& v, const std::string& k) {
             const auto s = v.is_string() ? v.get<std::string>() : std::string{};
             if (s == "wasserstein") c.adv_mode = AdvMode::wasserstein;
             else if (s == "log_form") c.adv_mode = AdvMode::log_form;
             else fail(k, "expected \"wasserstein\" or \"log_form\"");
         }},
        {"ablation", [](TrainConfig& c, const json& v, const std::string&) { c.ablation = parse_ablation(v); }},
        {"joint_cexp", [](TrainConfig& c, const json& v, const std::string& k) { c.joint_cexp = get_bool(v, k); }},
        {"latent_saturating", [](TrainConfig& c, const json& v, const std::string& k) { c.latent_saturating = get_bool(v, k); }},
        {"generator_width", [](TrainConfig& c, const json& v, const std::string& k) { c.generator_width = get_int(v, k, 64, 8192); }},
        {"critic_width", [](TrainConfig& c, const json& v, const std::string& k) { c.critic_width = get_int(v, k, 1, 4096); }},
        {"classifier_width", [](TrainConfig& c, const json& v, const std::string& k) { c.classifier_width = get_int(v, k, 1, 4096); }},
        {"classifier_blocks", [](TrainConfig& c, const json& v, const std::string& k) { c.classifier_blocks = get_int(v, k, 1, 5); }},
        {"embedding_dim", [](TrainConfig& c, const json& v, const std::string& k) { c.embedding_dim = get_int(v, k, 2, 65536); }},
        {"extractor_width", [](TrainConfig& c, const json& v, const std::string& k) { c.extractor_width = get_int(v, k, 1, 4096); }},
        {"ms_ssim_scales", [](TrainConfig& c, const json& v, const std::string& k) { c.ms_ssim_scales = get_int(v, k, 0, 5); }},
        {"pretrain_epochs", [](TrainConfig& c, const json& v, const std::string& k) { c.pretrain_epochs = get_int(v, k, 0, kBig); }},
        {"pretrain_target_accuracy",
         [](TrainConfig& c, const json& v, const std::string& k) { c.pretrain_target_accuracy = get_real(v, k, 0, 1); }},
        {"checkpoint_every", [](TrainConfig& c, const json& v, const std::string& k) { c.checkpoint_every = get_int(v, k, 0, kBig); }},
        {"log_every", [](TrainConfig& c, const json& v, const std::string& k) { c.log_every = get_int(v, k, 0, kBig); }},
        {"max_steps", [](TrainConfig& c, const json& v, const std::string& k) { c.max_steps = get_int(v, k, 0, kBig); }},
    };
    return table;
}

constexpr const char* kRunControlKeys[] = {"checkpoint_every", "log_every", "max_steps"};

}  // namespace

TrainConfig validate_config(const json& raw) {
    if (!raw.is_object()) throw ConfigError("config must be a flat key-value object");
    TrainConfig config;
    const auto& table = setters();
    for (const auto& [key, value] : raw.items()) {
        const auto it = table.find(key);
        if (it == table.end()) fail(key, "unknown key");
        it->second(config, value, key);
    }
    if (config.image_size % 64 != 0) {
        fail("image_size", "must be a multiple of 64 for the generator's 6-step upsampling ladder");
    }
    const int scales = config.ms_ssim_scales;
    if (scales > 0 && (config.image_size >> (scales - 1)) < 11) {
        fail("ms_ssim_scales", std::to_string(scales) + " scales do not fit an 11-pixel window at image_size " +
                                   std::to_string(config.image_size));
    }
    if (config.image_size >> (config.classifier_blocks) < 1) fail("classifier_blocks", "too deep for image_size");
    return config;
}

json to_json(const TrainConfig& c) {
    return json{
        {"d", c.d},
        {"m", c.m},
        {"image_size", c.image_size},
        {"latent_dim", c.latent_dim},
        {"n_identities", c.n_identities},
        {"lambda_au", c.lambda_au},
        {"lambda_id", c.lambda_id},
        {"lambda_per", c.lambda_per},
        {"lambda_rec", c.lambda_rec},
        {"lambda_gp", c.lambda_gp},
        {"lr_main", c.lr_main},
        {"lr_cexp", c.lr_cexp},
        {"lr_id", c.lr_id},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"batch_size", c.batch_size},
        {"epochs", c.epochs},
        {"lr_decay_start_fraction", c.lr_decay_start_fraction},
        {"seed", c.seed},
        {"prior_mean", c.prior_mean},
        {"prior_std", c.prior_std},
        {"critic_steps", c.critic_steps},
        {"gp_mode", to_string(c.gp_mode)},
        {"adv_mode", to_string(c.adv_mode)},
        {"ablation", ablation_json(c.ablation)},
        {"joint_cexp", c.joint_cexp},
        {"latent_saturating", c.latent_saturating},
        {"generator_width", c.generator_width},
        {"critic_width", c.critic_width},
        {"classifier_width", c.classifier_width},
        {"classifier_blocks", c.classifier_blocks},
        {"embedding_dim", c.embedding_dim},
        {"extractor_width", c.extractor_width},
        {"ms_ssim_scales", c.ms_ssim_scales},
        {"pretrain_epochs", c.pretrain_epochs},
        {"pretrain_target_accuracy", c.pretrain_target_accuracy},
        {"checkpoint_every", c.checkpoint_every},
        {"log_every", c.log_every},
        {"max_steps", c.max_steps},
    };
}

json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse config file " + path.string() + ": " + e.what());
    }
}

void apply_override(json& raw, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    if (key == "ablation") {
        json list = json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) list.push_back(item);
        }
        raw[key] = list;
        return;
    }
    auto parsed = json::parse(text, nullptr, /*allow_exceptions=*/false);
    raw[key] = parsed.is_discarded() ? json(text) : parsed;
}

std::uint64_t config_hash(const TrainConfig& config) {
    auto j = to_json(config);
    for (const auto* key : kRunControlKeys) j.erase(key);
    const auto text = j.dump();  // object keys are sorted, so the dump is canonical
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

int effective_ms_ssim_scales(const TrainConfig& config) {
    if (config.ms_ssim_scales > 0) return config.ms_ssim_scales;
    int scales = 1;
    while (scales < 4 && (config.image_size >> scales) >= 11) ++scales;
    return scales;
}

std::string to_string(GpMode mode) { return mode == GpMode::at_real ? "at_real" : "interpolated"; }
std::string to_string(AdvMode mode) { return mode == AdvMode::wasserstein ? "wasserstein" : "log_form"; }

}  // namespace expredit
