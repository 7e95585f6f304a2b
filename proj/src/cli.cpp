#include "expredit/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "expredit/config.hpp"
#include "expredit/data.hpp"
#include "expredit/infer_eval.hpp"
#include "expredit/training.hpp"

namespace fs = std::filesystem;

namespace expredit {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    return std::string(s.substr(b, s.find_last_not_of(" \t") - b + 1));
}

std::string valid_au_names() {
    std::string names;
    for (const auto name : kAUNames) {
        if (!names.empty()) names += ", ";
        names += name;
    }
    return names;
}

struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_config_flags(CLI::App& cmd, ConfigArgs& args) {
    cmd.add_option("--config", args.config_path, std::string("JSON config file (default: $") + kConfigEnvVar + ")");
    cmd.add_option("--set", args.overrides, "Override a config key, e.g. --set batch_size=4 (repeatable)");
}

TrainConfig resolve_config(const ConfigArgs& args) {
    nlohmann::json raw = nlohmann::json::object();
    std::string path = args.config_path;
    if (path.empty()) {
        if (const char* env = std::getenv(kConfigEnvVar); env != nullptr) path = env;
    }
    if (!path.empty()) raw = load_config_file(path);
    for (const auto& o : args.overrides) apply_override(raw, o);
    return validate_config(raw);
}

struct Splits {
    Dataset dataset;
    std::vector<DatasetRecord> train;
    std::vector<DatasetRecord> held_out;
};

Splits load_splits(const fs::path& root, int image_size) {
    Splits s;
    s.dataset = load_dataset(root, image_size);
    if (fs::exists(root / kSplitFile)) {
        std::tie(s.train, s.held_out) = partition(s.dataset.records, load_split(root / kSplitFile));
    } else {
        s.train = s.dataset.records;
    }
    if (s.train.empty()) throw DataError("dataset " + root.string() + " has no training records");
    return s;
}

std::vector<DatasetRecord> evaluation_records(const Splits& s) { return s.held_out.empty() ? s.dataset.records : s.held_out; }

struct SourceArgs {
    std::string ckpt, image, target_au, source_au, data, out;
    bool from_neutral = false;
};

void add_source_flags(CLI::App& cmd, SourceArgs& a) {
    cmd.add_option("--ckpt", a.ckpt, "Checkpoint file")->required();
    cmd.add_option("--image", a.image, "Source face image (PNG)")->required();
    cmd.add_option("--target-au", a.target_au, "AU edits, e.g. \"AU12=5,AU25=2.5\"")->required();
    cmd.add_option("--source-au", a.source_au, "AU intensities of the source image, same syntax (unset AUs are 0)");
    cmd.add_option("--data", a.data, "Dataset root whose annotations list the source image");
    cmd.add_flag("--from-neutral", a.from_neutral, "Start the edit from all-zero AUs");
    cmd.add_option("--out", a.out, "Output PNG")->required();
}

AUVector source_aus(const SourceArgs& a, std::ostream& err) {
    std::vector<std::string> warnings;
    AUVector base = AUVector::zeros();
    if (a.from_neutral) return base;
    if (!a.source_au.empty()) {
        base = parse_au_override(a.source_au, base, &warnings);
    } else if (!a.data.empty()) {
        const auto wanted = fs::path(a.image).filename().string();
        std::optional<AUVector> found;
        for (const auto& row : read_annotations(fs::path(a.data) / kAnnotationsFile)) {
            if (fs::path(row.path).filename().string() == wanted) found = row.au;
        }
        if (!found) throw DataError("image " + wanted + " is not listed in " + (fs::path(a.data) / kAnnotationsFile).string());
        base = *found;
    } else {
        throw Error("source AUs unknown: pass --source-au, --data or --from-neutral");
    }
    for (const auto& w : warnings) err << "warning: " << w << '\n';
    return base;
}

AUVector target_aus(const SourceArgs& a, const AUVector& base, std::ostream& err) {
    std::vector<std::string> warnings;
    auto target = parse_au_override(a.target_au, base, &warnings);
    for (const auto& w : warnings) err << "warning: " << w << '\n';
    return target;
}

ModelBundle load_bundle(const std::string& path) { return load_checkpoint(path).bundle; }

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string fixed(double v, int precision = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    return buf;
}

}  // namespace

AUVector parse_au_override(std::string_view spec, const AUVector& base, std::vector<std::string>* warnings) {
    if (base.size() != static_cast<std::size_t>(kNumAUs)) throw Error("AU override needs a 17-entry base vector");
    AUVector out = base;
    std::size_t start = 0;
    while (start <= spec.size()) {
        const auto end = std::min(spec.find(',', start), spec.size());
        const auto item = trim(spec.substr(start, end - start));
        start = end + 1;
        if (item.empty()) {
            if (end == spec.size()) break;
            continue;
        }
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw Error("AU edit '" + item + "' must look like NAME=VALUE");
        const auto name = trim(std::string_view(item).substr(0, eq));
        const auto text = trim(std::string_view(item).substr(eq + 1));
        const int j = au_index(name);
        if (j < 0) throw Error("unknown AU '" + name + "'; valid names: " + valid_au_names());
        double value = 0.0;
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
        if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(value)) {
            throw Error("AU '" + name + "' has non-numeric value '" + text + "'");
        }
        if (value < 0.0 || value > kMaxIntensity) {
            const double clamped = std::clamp(value, 0.0, static_cast<double>(kMaxIntensity));
            if (warnings) warnings->push_back(name + "=" + text + " clamped to " + fixed(clamped, 1));
            value = clamped;
        }
        out = out.with(static_cast<std::size_t>(j), value);
    }
    return out;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Fine-grained facial expression editing with AU-conditioned adversarial autoencoders", "expredit"};
    app.require_subcommand(1);

    // make-synthetic
    struct {
        std::string out;
        int identities = 4, samples = 100, held_out = 0, image_size = 64;
        std::uint64_t seed = 0;
    } synth;
    auto* make_synth = app.add_subcommand("make-synthetic", "Render a synthetic AU-annotated face dataset");
    make_synth->add_option("--out", synth.out, "Output dataset directory")->required();
    make_synth->add_option("--identities", synth.identities, "Number of identities")->capture_default_str();
    make_synth->add_option("--samples-per-identity", synth.samples, "Images per identity")->capture_default_str();
    make_synth->add_option("--held-out", synth.held_out, "Samples per identity listed in the test split")->capture_default_str();
    make_synth->add_option("--image-size", synth.image_size, "Image side in pixels")->capture_default_str();
    make_synth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();

    // pretrain-id
    ConfigArgs pre_cfg;
    std::string pre_data, pre_out;
    auto* pretrain = app.add_subcommand("pretrain-id", "Pretrain the identity classifier and save a step-0 checkpoint");
    add_config_flags(*pretrain, pre_cfg);
    pretrain->add_option("--data", pre_data, "Dataset root")->required();
    pretrain->add_option("--out", pre_out, "Output checkpoint file")->required();

    // train
    ConfigArgs train_cfg;
    std::string train_data, train_out, train_resume;
    auto* train_cmd = app.add_subcommand("train", "Train all networks; writes checkpoints and metrics.csv");
    add_config_flags(*train_cmd, train_cfg);
    train_cmd->add_option("--data", train_data, "Dataset root")->required();
    train_cmd->add_option("--out", train_out, "Run directory")->required();
    train_cmd->add_option("--resume", train_resume, "Checkpoint to continue from (e.g. the pretrain-id output)");

    // generate / interpolate
    SourceArgs gen_args;
    auto* generate_cmd = app.add_subcommand("generate", "Edit the expression of one image");
    add_source_flags(*generate_cmd, gen_args);

    SourceArgs interp_args;
    int steps = kDefaultInterpolationSteps;
    std::string manifest;
    auto* interp_cmd = app.add_subcommand("interpolate", "Render a strip from the source expression to the target");
    add_source_flags(*interp_cmd, interp_args);
    interp_cmd->add_option("--steps", steps, "Frames in the strip (at least 2)")->capture_default_str();
    interp_cmd->add_option("--manifest", manifest, "JSON manifest path (default: <out>.json)");

    // evaluate-au
    struct {
        std::string ckpt, data, source, predictions, out_dir;
        int targets = 10;
    } eval_au;
    auto* eval_au_cmd = app.add_subcommand("evaluate-au", "AU intensity MSE/PCC of edits toward held-out targets");
    eval_au_cmd->add_option("--ckpt", eval_au.ckpt, "Checkpoint file")->required();
    eval_au_cmd->add_option("--data", eval_au.data, "Dataset root")->required();
    eval_au_cmd->add_option("--source", eval_au.source, "Source image path as listed in annotations (default: first held-out)");
    eval_au_cmd->add_option("--targets", eval_au.targets, "Number of held-out target AU vectors")->capture_default_str();
    eval_au_cmd->add_option("--predictions", eval_au.predictions,
                            "CSV of AU predictions for the generated images (annotations schema)");
    eval_au_cmd->add_option("--out-dir", eval_au.out_dir, "Output directory")->required();

    // evaluate-id
    struct {
        std::string ckpt, data, out_dir;
        int targets = 10;
    } eval_id;
    auto* eval_id_cmd = app.add_subcommand("evaluate-id", "Identity preservation of edits (classifier-embedding proxy)");
    eval_id_cmd->add_option("--ckpt", eval_id.ckpt, "Checkpoint file")->required();
    eval_id_cmd->add_option("--data", eval_id.data, "Dataset root")->required();
    eval_id_cmd->add_option("--targets", eval_id.targets, "Number of held-out sources to edit")->capture_default_str();
    eval_id_cmd->add_option("--out-dir", eval_id.out_dir, "Output directory")->required();

    // ablate
    ConfigArgs abl_cfg;
    std::string abl_data, abl_out, abl_variants;
    int abl_targets = 10;
    auto* ablate_cmd = app.add_subcommand("ablate", "Train the full model and ablated variants, then compare them");
    add_config_flags(*ablate_cmd, abl_cfg);
    ablate_cmd->add_option("--data", abl_data, "Dataset root")->required();
    ablate_cmd->add_option("--variants", abl_variants, "Comma-separated subset of no_per,no_id,no_ssim");
    ablate_cmd->add_option("--targets", abl_targets, "Held-out target AU vectors per evaluation")->capture_default_str();
    ablate_cmd->add_option("--out", abl_out, "Output directory")->required();

    if (!args.empty() && !args.front().starts_with('-') && app.get_subcommand_no_throw(args.front()) == nullptr) {
        err << "usage error: unknown command '" << args.front() << "'\n"
            << "run 'expredit --help' for the list of commands\n";
        return 2;
    }
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
            err << "run 'expredit " << sub->get_name() << " --help' for the accepted flags\n";
        } else {
            err << "run 'expredit --help' for the list of commands\n";
        }
        return 2;
    }

    try {
        if (make_synth->parsed()) {
            const auto s = make_synthetic_dataset(synth.out, synth.identities, synth.samples, synth.seed, synth.image_size,
                                                  synth.held_out);
            out << "wrote " << s.dataset.records.size() << " images of " << s.dataset.num_identities() << " identities to "
                << synth.out << '\n';
        } else if (pretrain->parsed()) {
            auto config = resolve_config(pre_cfg);
            const auto splits = load_splits(pre_data, config.image_size);
            config.n_identities = splits.dataset.num_identities();
            auto bundle = build_models(config, config.seed);
            const auto result = pretrain_identity(bundle, splits.train);
            out << "identity classifier: " << result.epochs_run << " epochs, train accuracy " << fixed(result.train_accuracy, 4)
                << '\n';
            ensure_parent(pre_out);
            save_checkpoint(make_train_state(std::move(bundle)), pre_out);
            out << "wrote " << pre_out << '\n';
        } else if (train_cmd->parsed()) {
            auto config = resolve_config(train_cfg);
            const auto splits = load_splits(train_data, config.image_size);
            TrainOptions options;
            options.progress = &out;
            if (!train_resume.empty()) options.resume_from = fs::path(train_resume);
            const auto state = train(Dataset{splits.train, splits.dataset.identity_names}, config, train_out, options);
            out << "finished at step " << state.global_step << "; checkpoint " << (fs::path(train_out) / kFinalCheckpoint).string()
                << '\n';
        } else if (generate_cmd->parsed()) {
            const auto bundle = load_bundle(gen_args.ckpt);
            const auto image = preprocess(read_image(gen_args.image), bundle.config.image_size);
            const auto base = source_aus(gen_args, err);
            const auto result = manipulate(bundle, image, target_aus(gen_args, base, err));
            ensure_parent(gen_args.out);
            write_image(gen_args.out, to_raw(result));
            out << "wrote " << gen_args.out << '\n';
        } else if (interp_cmd->parsed()) {
            const auto bundle = load_bundle(interp_args.ckpt);
            const auto image = preprocess(read_image(interp_args.image), bundle.config.image_size);
            const auto base = source_aus(interp_args, err);
            const auto target = target_aus(interp_args, base, err);
            const auto strip = interpolate_images(bundle, image, base, target, steps);
            const fs::path png = interp_args.out;
            const fs::path json = manifest.empty() ? fs::path(png).replace_extension(".json") : fs::path(manifest);
            ensure_parent(png);
            ensure_parent(json);
            write_strip(strip, base, target, png, json);
            out << "wrote " << strip.frames.size() << "-frame strip " << png.string() << " and " << json.string() << '\n';
        } else if (eval_au_cmd->parsed()) {
            const auto bundle = load_bundle(eval_au.ckpt);
            const fs::path root = eval_au.data;
            const auto splits = load_splits(root, bundle.config.image_size);
            const auto records = evaluation_records(splits);
            auto source_it = records.begin();
            if (!eval_au.source.empty()) {
                source_it = std::find_if(records.begin(), records.end(),
                                         [&](const DatasetRecord& r) { return r.source_path == eval_au.source; });
                if (source_it == records.end()) throw DataError("source " + eval_au.source + " is not among the evaluation records");
            }
            std::vector<DatasetRecord> targets;
            for (const auto& r : records) {
                if (&r != &*source_it && static_cast<int>(targets.size()) < eval_au.targets) targets.push_back(r);
            }
            if (targets.empty()) throw DataError("no target records available");

            const fs::path out_dir = eval_au.out_dir;
            fs::create_directories(out_dir / "generated");
            for (std::size_t i = 0; i < targets.size(); ++i) {
                write_image(out_dir / "generated" / generated_image_name(i), to_raw(manipulate(bundle, source_it->image, targets[i].au)));
            }
            AUOracle oracle;
            if (!eval_au.predictions.empty()) {
                oracle = csv_oracle(eval_au.predictions);
            } else if (fs::exists(root / kIdentitiesFile)) {
                const auto params = load_synthetic_params(root);
                const auto& name = splits.dataset.identity_names.at(static_cast<std::size_t>(source_it->identity.index));
                const auto it = std::find_if(params.begin(), params.end(), [&](const auto& p) { return p.first == name; });
                if (it == params.end()) throw DataError("identity " + name + " missing from " + (root / kIdentitiesFile).string());
                oracle = renderer_fit_oracle(it->second, bundle.config.image_size);
            } else {
                throw Error("no AU oracle: run an AU predictor on " + (out_dir / "generated").string() +
                            " and pass its CSV with --predictions");
            }
            const auto report = evaluate_au(bundle, source_it->image, targets, oracle);
            write_metric_csv(report, out_dir / "au_metrics.csv");
            const auto summary = "source " + source_it->source_path + ", " + std::to_string(targets.size()) + " targets\n" +
                                 metric_summary(report);
            std::ofstream(out_dir / "au_summary.txt") << summary;
            out << summary;
        } else if (eval_id_cmd->parsed()) {
            const auto bundle = load_bundle(eval_id.ckpt);
            const auto splits = load_splits(eval_id.data, bundle.config.image_size);
            const auto records = evaluation_records(splits);
            if (records.size() < 2) throw DataError("identity evaluation needs at least 2 records");
            const auto calibration = calibrate_identity_threshold(bundle, splits.train, 500, bundle.config.seed);
            std::vector<std::pair<FaceImage, FaceImage>> pairs;
            const auto n = std::min(records.size(), static_cast<std::size_t>(std::max(1, eval_id.targets)));
            for (std::size_t k = 0; k < n; ++k) {
                pairs.emplace_back(records[k].image, manipulate(bundle, records[k].image, records[(k + 1) % records.size()].au));
            }
            const double accuracy = identity_accuracy(bundle, pairs, calibration.threshold);
            const fs::path out_dir = eval_id.out_dir;
            fs::create_directories(out_dir);
            nlohmann::json report = {{"verifier", "proxy: identity-classifier embedding cosine"},
                                     {"threshold", calibration.threshold},
                                     {"calibration_false_accept", calibration.false_accept},
                                     {"calibration_false_reject", calibration.false_reject},
                                     {"calibration_same_pairs", calibration.same_pairs},
                                     {"calibration_different_pairs", calibration.different_pairs},
                                     {"pairs", pairs.size()},
                                     {"identity_accuracy_proxy", accuracy}};
            std::ofstream(out_dir / "identity.json") << report.dump(2) << '\n';
            const auto summary = "identity preservation (proxy verifier): " + fixed(accuracy, 4) + " over " +
                                 std::to_string(pairs.size()) + " pairs at EER threshold " + fixed(calibration.threshold, 4) +
                                 '\n';
            std::ofstream(out_dir / "identity_summary.txt") << summary;
            out << summary;
        } else if (ablate_cmd->parsed()) {
            const auto config = resolve_config(abl_cfg);
            const fs::path root = abl_data;
            const auto splits = load_splits(root, config.image_size);
            std::vector<std::string> variants;
            std::size_t start = 0;
            while (start < abl_variants.size()) {
                const auto end = std::min(abl_variants.find(',', start), abl_variants.size());
                if (auto v = trim(std::string_view(abl_variants).substr(start, end - start)); !v.empty()) variants.push_back(v);
                start = end + 1;
            }
            AblationInputs inputs;
            inputs.train = splits.train;
            inputs.identity_names = splits.dataset.identity_names;
            inputs.eval = evaluation_records(splits);
            inputs.eval_targets = abl_targets;
            inputs.progress = &out;
            if (fs::exists(root / kIdentitiesFile)) {
                const auto params = load_synthetic_params(root);
                const auto names = splits.dataset.identity_names;
                const int size = config.image_size;
                inputs.oracle_for = [params, names, size](const DatasetRecord& source) {
                    const auto& name = names.at(static_cast<std::size_t>(source.identity.index));
                    for (const auto& [n, p] : params) {
                        if (n == name) return renderer_fit_oracle(p, size);
                    }
                    throw DataError("identity " + name + " has no renderer parameters");
                };
            }
            const auto rows = run_ablation(inputs, config, variants, abl_out);
            for (const auto& r : rows) {
                out << r.variant << ": steps " << r.steps << ", avg MSE "
                    << (r.au.per_au_mse.empty() ? std::string("n/a") : fixed(r.au.avg_mse, 4)) << ", identity (proxy) "
                    << fixed(r.identity_accuracy, 4) << '\n';
            }
            out << "wrote " << (fs::path(abl_out) / "ablation.csv").string() << '\n';
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace expredit
