#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "expredit/data.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace expredit {

std::string annotations_header() {
    std::string header = "path,identity";
    for (const auto name : kAUNames) {
        header += ',';
        header += name;
    }
    return header;
}

RawImage read_image(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (bgr.empty()) throw DataError("cannot read image " + path.string());
    if (bgr.depth() != CV_8U) throw DataError("image " + path.string() + " is not 8-bit");
    RawImage raw;
    raw.height = bgr.rows;
    raw.width = bgr.cols;
    raw.channels = bgr.channels();
    cv::Mat rgb;
    if (raw.channels == 3) cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    else rgb = bgr;
    rgb = rgb.isContinuous() ? rgb : rgb.clone();
    raw.bytes.assign(rgb.data, rgb.data + rgb.total() * rgb.elemSize());
    return raw;
}

void write_image(const fs::path& path, const RawImage& image) {
    if (image.channels != 3) throw DataError("only RGB images can be written");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.bytes.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
        throw DataError("cannot write image " + path.string());
    }
}

RawImage to_raw(const FaceImage& image) {
    RawImage raw;
    raw.height = raw.width = image.size();
    raw.channels = 3;
    raw.bytes.resize(image.pixels().size());
    std::transform(image.pixels().begin(), image.pixels().end(), raw.bytes.begin(), [](float v) {
        return static_cast<std::uint8_t>(std::lround(std::clamp((v + 1.0) * 127.5, 0.0, 255.0)));
    });
    return raw;
}

FaceImage preprocess(const RawImage& raw, int image_size) {
    if (raw.channels != 3) {
        throw DataError("expected a 3-channel image, got " + std::to_string(raw.channels) + " channels");
    }
    if (raw.height < 8 || raw.width < 8) throw DataError("image smaller than 8x8");
    if (raw.bytes.size() != static_cast<std::size_t>(raw.height) * raw.width * 3) throw DataError("image buffer size mismatch");

    const int side = std::min(raw.height, raw.width);
    const int oy = (raw.height - side) / 2;
    const int ox = (raw.width - side) / 2;
    auto src = [&](int y, int x, int c) {
        return raw.bytes[(static_cast<std::size_t>(oy + y) * raw.width + ox + x) * 3 + c] / 127.5 - 1.0;
    };

    std::vector<float> out(static_cast<std::size_t>(image_size) * image_size * 3);
    if (side == image_size) {
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x)
                for (int c = 0; c < 3; ++c) out[(static_cast<std::size_t>(y) * side + x) * 3 + c] = static_cast<float>(src(y, x, c));
        return FaceImage::from_hwc(image_size, std::move(out));
    }

    // Bilinear with half-pixel centres and edge clamping.
    const double scale = static_cast<double>(side) / image_size;
    for (int y = 0; y < image_size; ++y) {
        const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, side - 1.0);
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, side - 1);
        const double ty = sy - y0;
        for (int x = 0; x < image_size; ++x) {
            const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, side - 1.0);
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, side - 1);
            const double tx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = src(y0, x0, c) + tx * (src(y0, x1, c) - src(y0, x0, c));
                const double bottom = src(y1, x0, c) + tx * (src(y1, x1, c) - src(y1, x0, c));
                out[(static_cast<std::size_t>(y) * image_size + x) * 3 + c] = static_cast<float>(top + ty * (bottom - top));
            }
        }
    }
    return FaceImage::from_hwc(image_size, std::move(out));
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

std::string trim(std::string s) {
    const auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

}  // namespace

std::vector<AnnotationRow> read_annotations(const fs::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw DataError("cannot open annotations " + csv_path.string());

    std::string line;
    if (!std::getline(in, line) || trim(line) != annotations_header()) {
        throw DataError("annotations " + csv_path.string() + " must start with header: " + annotations_header());
    }

    std::vector<AnnotationRow> rows;
    const std::size_t expected = 2 + kAUNames.size();
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        line = trim(line);
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        const auto where = "annotations row " + std::to_string(row);
        if (cells.size() != expected) {
            throw DataError(where + ": expected " + std::to_string(kAUNames.size()) + " AU columns, found " +
                            std::to_string(cells.size() < 2 ? 0 : cells.size() - 2));
        }
        std::vector<double> values(kAUNames.size());
        for (std::size_t j = 0; j < kAUNames.size(); ++j) {
            const auto text = trim(cells[2 + j]);
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
            if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty() || !std::isfinite(v)) {
                throw DataError(where + ": non-numeric intensity '" + text + "' for " + std::string(kAUNames[j]));
            }
            values[j] = v;
        }
        rows.push_back({row, trim(cells[0]), trim(cells[1]), AUVector::clamped(std::move(values))});
    }
    return rows;
}

Dataset load_dataset(const fs::path& root, int image_size) {
    Dataset dataset;
    std::map<std::string, int> identity_index;
    for (auto& row : read_annotations(root / kAnnotationsFile)) {
        const auto image_path = root / kImagesDir / row.path;
        if (!fs::exists(image_path)) {
            throw DataError("annotations row " + std::to_string(row.row) + ": missing image file " + image_path.string());
        }
        auto [it, inserted] = identity_index.try_emplace(row.identity, static_cast<int>(dataset.identity_names.size()));
        if (inserted) dataset.identity_names.push_back(row.identity);

        DatasetRecord record;
        record.image = preprocess(read_image(image_path), image_size);
        record.au = std::move(row.au);
        record.identity = IdentityLabel{it->second};
        record.source_path = std::move(row.path);
        dataset.records.push_back(std::move(record));
    }
    return dataset;
}

std::set<std::string> load_split(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open split file " + path.string());
    std::set<std::string> entries;
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (!line.empty()) entries.insert(line);
    }
    return entries;
}

std::pair<std::vector<DatasetRecord>, std::vector<DatasetRecord>> partition(const std::vector<DatasetRecord>& records,
                                                                            const std::set<std::string>& held_out) {
    std::pair<std::vector<DatasetRecord>, std::vector<DatasetRecord>> out;
    for (const auto& r : records) (held_out.count(r.source_path) ? out.second : out.first).push_back(r);
    return out;
}

std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
    if (n == 0) throw Error("uniform_index over an empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % n;
}

double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Batch sample_batch(const std::vector<DatasetRecord>& records, int batch_size, std::mt19937_64& rng) {
    if (batch_size < 2) throw DataError("batch_size must be ≥ 2");
    if (records.size() < static_cast<std::size_t>(batch_size)) {
        throw DataError("dataset has " + std::to_string(records.size()) + " records, fewer than batch_size " +
                        std::to_string(batch_size));
    }
    // Partial Fisher-Yates over indices.
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int i = 0; i < batch_size; ++i) {
        const auto j = i + uniform_index(rng, order.size() - i);
        std::swap(order[i], order[j]);
    }
    Batch batch;
    for (int i = 0; i < batch_size; ++i) {
        const auto& r = records[order[i]];
        batch.images.push_back(r.image);
        batch.source_aus.push_back(r.au);
        batch.identities.push_back(r.identity);
    }
    const auto shift = 1 + uniform_index(rng, batch_size - 1);
    for (int i = 0; i < batch_size; ++i) batch.target_aus.push_back(batch.source_aus[(i + shift) % batch_size]);
    return batch;
}

namespace {

std::string format_intensity(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

SyntheticDataset make_synthetic_dataset(const fs::path& out_dir, int n_identities, int samples_per_identity,
                                        std::uint64_t seed, int image_size, int held_out_per_identity) {
    if (n_identities < 2) throw DataError("synthetic dataset needs at least 2 identities");
    if (samples_per_identity < 1) throw DataError("samples_per_identity must be positive");
    if (held_out_per_identity < 0 || held_out_per_identity >= samples_per_identity) {
        throw DataError("held_out_per_identity must lie in [0, samples_per_identity)");
    }
    std::error_code ec;
    fs::create_directories(out_dir / kImagesDir, ec);
    if (ec) throw DataError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    std::ofstream csv(out_dir / kAnnotationsFile, std::ios::binary | std::ios::trunc);
    std::ofstream split(out_dir / kSplitFile, std::ios::binary | std::ios::trunc);
    if (!csv || !split) throw DataError("cannot write annotations under " + out_dir.string());
    csv << annotations_header() << '\n';

    SyntheticDataset result;
    std::mt19937_64 rng(seed);
    nlohmann::json identities = nlohmann::json::object();
    for (int k = 0; k < n_identities; ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "id%03d", k);
        const auto params = synthetic_identity(k, n_identities, seed);
        result.params.push_back(params);
        result.dataset.identity_names.emplace_back(name);
        identities[name] = {{"identity_seed", params.identity_seed},
                            {"skin_tone", params.skin_tone},
                            {"face_aspect", params.face_aspect},
                            {"eye_spacing", params.eye_spacing}};

        for (int s = 0; s < samples_per_identity; ++s) {
            std::vector<double> values(kAUNames.size());
            for (auto& v : values) {
                const bool active = uniform_unit(rng) >= 0.5;
                const double raw = active ? 5.0 * uniform_unit(rng) : 0.0;
                // Labels are rounded to the CSV precision before rendering.
                v = std::stod(format_intensity(raw));
            }
            const auto au = AUVector::clamped(values);
            char file[64];
            std::snprintf(file, sizeof file, "%s_%04d.png", name, s);

            DatasetRecord record;
            record.image = render_synthetic_face(params, au, image_size);
            record.au = au;
            record.identity = IdentityLabel{k};
            record.source_path = file;
            write_image(out_dir / kImagesDir / file, to_raw(record.image));

            csv << file << ',' << name;
            for (const double v : au.values()) csv << ',' << format_intensity(v);
            csv << '\n';
            if (s >= samples_per_identity - held_out_per_identity) split << file << '\n';
            result.dataset.records.push_back(std::move(record));
        }
    }
    std::ofstream(out_dir / kIdentitiesFile, std::ios::binary | std::ios::trunc) << identities.dump(2) << '\n';
    if (!csv) throw DataError("failed writing annotations under " + out_dir.string());
    return result;
}

std::vector<std::pair<std::string, SyntheticFaceParams>> load_synthetic_params(const fs::path& root) {
    std::ifstream in(root / kIdentitiesFile);
    if (!in) throw DataError("no synthetic identity parameters at " + (root / kIdentitiesFile).string());
    const auto j = nlohmann::json::parse(in);
    std::vector<std::pair<std::string, SyntheticFaceParams>> out;
    for (const auto& [name, v] : j.items()) {
        SyntheticFaceParams p;
        p.identity_seed = v.at("identity_seed").get<std::uint64_t>();
        p.skin_tone = v.at("skin_tone").get<double>();
        p.face_aspect = v.at("face_aspect").get<double>();
        p.eye_spacing = v.at("eye_spacing").get<double>();
        out.emplace_back(name, p);
    }
    return out;
}

}  // namespace expredit
