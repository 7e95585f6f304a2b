#include <cstring>
#include <fstream>
#include <sstream>

#include "expredit/training.hpp"

namespace fs = std::filesystem;

namespace expredit {

namespace {

constexpr char kMagic[8] = {'E', 'X', 'P', 'R', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
public:
    template <typename T>
    void put(T value) {
        char raw[sizeof(T)];
        std::memcpy(raw, &value, sizeof(T));
        bytes_.append(raw, sizeof(T));
    }
    void put_bytes(const std::string& s) {
        put<std::uint64_t>(s.size());
        bytes_ += s;
    }
    std::string& bytes() { return bytes_; }

private:
    std::string bytes_;
};

class Reader {
public:
    Reader(const std::string& bytes, std::size_t end, fs::path path) : bytes_(bytes), end_(end), path_(std::move(path)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }
    std::string get_bytes() {
        const auto n = get<std::uint64_t>();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::uint64_t n) {
        if (n > end_ - pos_) throw CheckpointError(path_.string() + ": truncated checkpoint");
    }
    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = sizeof(kMagic);
    fs::path path_;
};

std::string archive_bytes(const std::function<void(torch::serialize::OutputArchive&)>& fill) {
    torch::serialize::OutputArchive archive;
    fill(archive);
    std::ostringstream out;
    archive.save_to(out);
    return out.str();
}

void read_archive(const std::string& bytes, const std::function<void(torch::serialize::InputArchive&)>& use) {
    torch::serialize::InputArchive archive;
    archive.load_from(bytes.data(), bytes.size());
    use(archive);
}

void put_report(Writer& w, const LossReport& r) {
    for (double v : {r.adv_z, r.adv_img, r.au, r.id, r.per, r.rec, r.total_min_side, r.total_max_side, r.d_z, r.d_img, r.gp}) {
        w.put(v);
    }
}

LossReport get_report(Reader& r) {
    LossReport out;
    for (double* v : {&out.adv_z, &out.adv_img, &out.au, &out.id, &out.per, &out.rec, &out.total_min_side,
                      &out.total_max_side, &out.d_z, &out.d_img, &out.gp}) {
        *v = r.get<double>();
    }
    return out;
}

}  // namespace

void save_checkpoint(const TrainState& state, const fs::path& path) {
    const auto& b = state.bundle;
    Writer w;
    w.bytes().append(kMagic, sizeof(kMagic));
    w.put(kCheckpointVersion);
    w.put(config_hash(b.config));
    w.put_bytes(to_json(b.config).dump());
    w.put<std::int64_t>(state.global_step);
    w.put<std::int64_t>(state.epoch);
    w.put<std::uint8_t>(b.identity_pretrained ? 1 : 0);

    std::ostringstream rng;
    rng << state.batch_rng;
    w.put_bytes(rng.str());
    const auto gen_state = state.tensor_rng.get_state().contiguous();
    w.put_bytes(std::string(static_cast<const char*>(gen_state.data_ptr()), gen_state.numel()));

    for (const auto& [name, net] : b.named_networks()) {
        w.put_bytes(name);
        w.put_bytes(archive_bytes([&](auto& a) { net->save(a); }));
    }
    for (const auto& [name, opt] : state.optimizers.named()) {
        w.put_bytes(name);
        w.put_bytes(archive_bytes([&](auto& a) { opt->save(a); }));
    }
    w.put<std::uint64_t>(state.metrics_log.size());
    for (const auto& [step, report] : state.metrics_log) {
        w.put<std::int64_t>(step);
        put_report(w, report);
    }
    w.put(fnv1a(w.bytes().data(), w.bytes().size()));

    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + path.string());
        out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
        if (!out) throw CheckpointError("cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

TrainState load_checkpoint(const fs::path& path, const TrainConfig* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(path.string() + ": cannot open checkpoint");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
        throw CheckpointError(path.string() + ": truncated checkpoint");
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw CheckpointError(path.string() + ": not a checkpoint file");
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
    if (version != kCheckpointVersion) {
        throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, sizeof(stored));
    if (stored != fnv1a(bytes.data(), body)) throw CheckpointError(path.string() + ": checksum mismatch (truncated or corrupted)");

    Reader r(bytes, body, path);
    r.get<std::uint32_t>();
    const auto hash = r.get<std::uint64_t>();
    TrainConfig config;
    try {
        config = validate_config(nlohmann::json::parse(r.get_bytes()));
    } catch (const std::exception& e) {
        throw CheckpointError(path.string() + ": stored config invalid: " + e.what());
    }
    if (config_hash(config) != hash) throw CheckpointError(path.string() + ": stored config does not match its hash");
    if (expected != nullptr) {
        TrainConfig want = *expected;
        if (want.n_identities == 0) want.n_identities = config.n_identities;
        if (config_hash(want) != hash) throw CheckpointError(path.string() + ": config hash mismatch with the requested config");
    }

    TrainState state = make_train_state(build_models(config, config.seed));
    state.global_step = r.get<std::int64_t>();
    state.epoch = r.get<std::int64_t>();
    state.bundle.identity_pretrained = r.get<std::uint8_t>() != 0;
    state.bundle.step = state.global_step;

    std::istringstream rng(r.get_bytes());
    rng >> state.batch_rng;
    if (!rng) throw CheckpointError(path.string() + ": bad batch RNG state");
    const auto gen_bytes = r.get_bytes();
    auto gen_state = torch::empty({static_cast<std::int64_t>(gen_bytes.size())}, torch::kUInt8);
    std::memcpy(gen_state.data_ptr(), gen_bytes.data(), gen_bytes.size());
    state.tensor_rng.set_state(gen_state);

    for (const auto& [name, net] : state.bundle.named_networks()) {
        if (r.get_bytes() != name) throw CheckpointError(path.string() + ": network order mismatch at " + name);
        read_archive(r.get_bytes(), [&](auto& a) { net->load(a); });
    }
    for (const auto& [name, opt] : state.optimizers.named()) {
        if (r.get_bytes() != name) throw CheckpointError(path.string() + ": optimizer order mismatch at " + name);
        read_archive(r.get_bytes(), [&](auto& a) { opt->load(a); });
    }
    const auto n = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
        const auto step = r.get<std::int64_t>();
        state.metrics_log.emplace_back(step, get_report(r));
    }
    if (state.bundle.identity_pretrained) {
        for (auto& p : state.bundle.identity->parameters()) p.set_requires_grad(false);
    }
    return state;
}

}  // namespace expredit
