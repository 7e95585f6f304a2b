#include "expredit/networks.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace expredit {

namespace nn = torch::nn;

torch::Tensor images_to_tensor(const std::vector<FaceImage>& images) {
    if (images.empty()) throw Error("empty image batch");
    const int s = images.front().size();
    auto out = torch::empty({static_cast<long>(images.size()), s, s, 3}, torch::kFloat32);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].size() != s) throw Error("images in a batch differ in size");
        std::memcpy(out[static_cast<long>(i)].data_ptr<float>(), images[i].pixels().data(), images[i].pixels().size() * sizeof(float));
    }
    return out.permute({0, 3, 1, 2}).contiguous();
}

FaceImage tensor_to_image(const torch::Tensor& chw) {
    auto hwc = chw.detach().to(torch::kFloat32).permute({1, 2, 0}).contiguous();
    const auto s = static_cast<int>(hwc.size(0));
    std::vector<float> pixels(hwc.data_ptr<float>(), hwc.data_ptr<float>() + hwc.numel());
    return FaceImage::from_hwc(s, std::move(pixels));
}

std::vector<FaceImage> tensor_to_images(const torch::Tensor& nchw) {
    std::vector<FaceImage> out;
    for (long i = 0; i < nchw.size(0); ++i) out.push_back(tensor_to_image(nchw[i]));
    return out;
}

torch::Tensor aus_to_tensor(const std::vector<AUVector>& aus) {
    if (aus.empty()) throw Error("empty AU batch");
    const auto d = static_cast<long>(aus.front().size());
    auto out = torch::empty({static_cast<long>(aus.size()), d}, torch::kFloat32);
    auto acc = out.accessor<float, 2>();
    for (std::size_t i = 0; i < aus.size(); ++i) {
        if (static_cast<long>(aus[i].size()) != d) throw Error("AU vectors in a batch differ in length");
        for (long j = 0; j < d; ++j) acc[static_cast<long>(i)][j] = static_cast<float>(aus[i][j]);
    }
    return out;
}

AUVector tensor_to_au(const torch::Tensor& row) {
    auto r = row.detach().to(torch::kFloat64).contiguous();
    return AUVector::clamped(std::vector<double>(r.data_ptr<double>(), r.data_ptr<double>() + r.numel()));
}

EncoderImpl::EncoderImpl(int image_size, int latent_dim) {
    convs = register_module("convs", nn::Sequential());
    int in = 3;
    for (const int width : {16, 32, 64, 128, 256}) {
        convs->push_back(nn::Conv2d(nn::Conv2dOptions(in, width, 4).stride(2).padding(1)));
        convs->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
        in = width;
    }
    const int spatial = image_size / 32;
    fc = register_module("fc", nn::Linear(256 * spatial * spatial, latent_dim));
}

torch::Tensor EncoderImpl::forward(torch::Tensor images) { return fc(convs->forward(images).flatten(1)); }

UpResBlockImpl::UpResBlockImpl(int in_channels, int out_channels) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
    norm1 = register_module("norm1", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out_channels).affine(true)));
    act1 = register_module("act1", nn::PReLU());
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
    norm2 = register_module("norm2", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out_channels).affine(true)));
    act2 = register_module("act2", nn::PReLU());
    skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
}

torch::Tensor UpResBlockImpl::forward(torch::Tensor x) {
    x = torch::upsample_nearest2d(x, std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2});
    auto h = act1(norm1(conv1(x)));
    h = norm2(conv2(h));
    return act2(h + skip(x));
}

GeneratorImpl::GeneratorImpl(int image_size, int latent_dim, int num_aus, int width_)
    : start_size(image_size / 64), width(width_) {
    project = register_module("project", nn::Linear(latent_dim + num_aus, width * start_size * start_size));
    blocks = register_module("blocks", nn::ModuleList());
    int in = width;
    for (int k = 0; k < 6; ++k) {
        const int out = std::max(in / 2, 8);
        blocks->push_back(UpResBlock(in, out));
        in = out;
    }
    to_rgb = register_module("to_rgb", nn::Conv2d(nn::Conv2dOptions(in, 3, 3).padding(1)));
}

torch::Tensor GeneratorImpl::forward(torch::Tensor codes, torch::Tensor aus) {
    auto x = project(torch::cat({codes, aus}, 1)).view({codes.size(0), width, start_size, start_size});
    for (const auto& block : *blocks) x = block->as<UpResBlock>()->forward(x);
    return torch::tanh(to_rgb(x));
}

LatentDiscriminatorImpl::LatentDiscriminatorImpl(int latent_dim) {
    layers = register_module("layers", nn::Sequential());
    int in = latent_dim;
    for (const int width : {256, 128, 64, 32, 16}) {
        layers->push_back(nn::Linear(in, width));
        layers->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
        in = width;
    }
    layers->push_back(nn::Linear(in, 1));
}

torch::Tensor LatentDiscriminatorImpl::forward(torch::Tensor codes) { return torch::sigmoid(layers->forward(codes)).squeeze(1); }

ImageCriticImpl::ImageCriticImpl(int image_size, int width) {
    convs = register_module("convs", nn::Sequential());
    int in = 3;
    int out = width;
    for (int k = 0; k < 6; ++k) {
        convs->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
        convs->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
        in = out;
        out = std::min(out * 2, 512);
    }
    const int spatial = image_size / 64;
    head = register_module("head", nn::Linear(in * spatial * spatial, 1));
}

torch::Tensor ImageCriticImpl::forward(torch::Tensor images) { return head(convs->forward(images).flatten(1)).squeeze(1); }

ClassifierImpl::ClassifierImpl(int image_size, int width, int blocks, int embedding_dim, int outputs) {
    features = register_module("features", nn::Sequential());
    int in = 3;
    for (int b = 0; b < blocks; ++b) {
        const int out = width << b;
        features->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
        features->push_back(nn::ReLU());
        features->push_back(nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
        features->push_back(nn::ReLU());
        features->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2)));
        in = out;
    }
    const int pooled = std::min(4, image_size >> blocks);
    features->push_back(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions({pooled, pooled})));
    embed = register_module("embed", nn::Linear(in * pooled * pooled, embedding_dim));
    head = register_module("head", nn::Linear(embedding_dim, outputs));
}

std::pair<torch::Tensor, torch::Tensor> ClassifierImpl::forward(torch::Tensor images) {
    auto embedding = torch::leaky_relu(embed(features->forward(images).flatten(1)), 0.2);
    return {head(embedding), embedding};
}

std::vector<std::pair<std::string, nn::Module*>> ModelBundle::named_networks() const {
    return {{"E", encoder.ptr().get()},
            {"G", generator.ptr().get()},
            {"D_z", latent_critic.ptr().get()},
            {"D_img", image_critic.ptr().get()},
            {"C_exp", expression.ptr().get()},
            {"C_id", identity.ptr().get()}};
}

namespace {

// He-normal for the unnormalized ReLU classifier stacks, N(0, 0.02^2) elsewhere.
void initialize(nn::Module& module, at::Generator& gen, bool he) {
    torch::NoGradGuard no_grad;
    auto std_for = [he](const torch::Tensor& w) {
        return he ? std::sqrt(2.0 / static_cast<double>(w.numel() / w.size(0))) : 0.02;
    };
    for (auto& m : module.modules(/*include_self=*/true)) {
        if (auto* conv = m->as<nn::Conv2d>()) {
            conv->weight.normal_(0.0, std_for(conv->weight), gen);
            if (conv->bias.defined()) conv->bias.zero_();
        } else if (auto* linear = m->as<nn::Linear>()) {
            linear->weight.normal_(0.0, std_for(linear->weight), gen);
            if (linear->bias.defined()) linear->bias.zero_();
        } else if (auto* norm = m->as<nn::InstanceNorm2d>()) {
            if (norm->weight.defined()) norm->weight.fill_(1.0);
            if (norm->bias.defined()) norm->bias.zero_();
        }
    }
}

void check_images(const ModelBundle& bundle, const torch::Tensor& images) {
    const int s = bundle.config.image_size;
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != s || images.size(3) != s) {
        std::ostringstream msg;
        msg << "expected images of shape (B, 3, " << s << ", " << s << "), got " << images.sizes();
        throw Error(msg.str());
    }
}

void check_codes(const ModelBundle& bundle, const torch::Tensor& codes) {
    if (codes.dim() != 2 || codes.size(1) != bundle.config.latent_dim) {
        std::ostringstream msg;
        msg << "expected latent codes of shape (B, " << bundle.config.latent_dim << "), got " << codes.sizes();
        throw Error(msg.str());
    }
}

}  // namespace

ModelBundle build_models(const TrainConfig& config, std::uint64_t seed) {
    if (config.image_size % 64 != 0 || config.image_size < 64) {
        throw ConfigError("image_size " + std::to_string(config.image_size) +
                          " is not compatible with the generator's 2^6 upsampling ladder");
    }
    if (config.n_identities < 1) throw ConfigError("n_identities must be set before building models");

    ModelBundle bundle;
    bundle.config = config;
    bundle.encoder = Encoder(config.image_size, config.latent_dim);
    bundle.generator = Generator(config.image_size, config.latent_dim, config.d, config.generator_width);
    bundle.latent_critic = LatentDiscriminator(config.latent_dim);
    bundle.image_critic = ImageCritic(config.image_size, config.critic_width);
    bundle.expression = Classifier(config.image_size, config.classifier_width, config.classifier_blocks, config.embedding_dim,
                                   config.d * (config.m + 1));
    bundle.identity = Classifier(config.image_size, config.classifier_width, config.classifier_blocks, config.embedding_dim,
                                 config.n_identities);

    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    for (auto& [name, net] : bundle.named_networks()) initialize(*net, gen, name == "C_exp" || name == "C_id");
    return bundle;
}

ModelBundle clone_bundle(const ModelBundle& bundle) {
    auto copy = build_models(bundle.config, 0);
    copy.step = bundle.step;
    copy.identity_pretrained = bundle.identity_pretrained;
    torch::NoGradGuard no_grad;
    const auto src = bundle.named_networks();
    const auto dst = copy.named_networks();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto sp = src[i].second->parameters();
        auto dp = dst[i].second->parameters();
        for (std::size_t k = 0; k < sp.size(); ++k) {
            dp[k].copy_(sp[k]);
            dp[k].set_requires_grad(sp[k].requires_grad());
        }
        auto sb = src[i].second->buffers();
        auto db = dst[i].second->buffers();
        for (std::size_t k = 0; k < sb.size(); ++k) db[k].copy_(sb[k]);
    }
    return copy;
}

torch::Tensor encode(const ModelBundle& bundle, const torch::Tensor& images) {
    check_images(bundle, images);
    return bundle.encoder.ptr()->forward(images);
}

torch::Tensor generate(const ModelBundle& bundle, const torch::Tensor& codes, const torch::Tensor& aus) {
    check_codes(bundle, codes);
    if (aus.dim() != 2 || aus.size(1) != bundle.config.d) throw Error("expected AU batch of shape (B, d)");
    if (codes.size(0) != aus.size(0)) {
        throw Error("batch length mismatch: " + std::to_string(codes.size(0)) + " codes vs " + std::to_string(aus.size(0)) +
                    " AU vectors");
    }
    return bundle.generator.ptr()->forward(codes, aus);
}

torch::Tensor discriminate_latent(const ModelBundle& bundle, const torch::Tensor& codes) {
    check_codes(bundle, codes);
    return bundle.latent_critic.ptr()->forward(codes);
}

torch::Tensor discriminate_image(const ModelBundle& bundle, const torch::Tensor& images) {
    check_images(bundle, images);
    return bundle.image_critic.ptr()->forward(images);
}

torch::Tensor classify_expression(const ModelBundle& bundle, const torch::Tensor& images) {
    check_images(bundle, images);
    auto logits = bundle.expression.ptr()->forward(images).first;
    return torch::softmax(logits.view({images.size(0), bundle.config.d, bundle.config.m + 1}), -1);
}

IdentityOutput classify_identity(const ModelBundle& bundle, const torch::Tensor& images) {
    check_images(bundle, images);
    auto [logits, embedding] = bundle.identity.ptr()->forward(images);
    return {torch::softmax(logits, -1), embedding};
}

std::int64_t parameter_count(const nn::Module& module) {
    std::int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

namespace {

void fnv_update(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
}

}  // namespace

std::uint64_t parameter_checksum(const nn::Module& module) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : module.parameters()) {
        auto c = p.detach().contiguous();
        fnv_update(h, c.data_ptr(), c.numel() * c.element_size());
    }
    return h;
}

std::uint64_t parameter_checksum(const ModelBundle& bundle) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, net] : bundle.named_networks()) {
        const auto part = parameter_checksum(*net);
        fnv_update(h, &part, sizeof part);
    }
    return h;
}

bool all_parameters_finite(const nn::Module& module) {
    for (const auto& p : module.parameters()) {
        if (!torch::isfinite(p).all().item<bool>()) return false;
    }
    return true;
}

std::string architecture_manifest(const ModelBundle& bundle) {
    std::ostringstream out;
    out << "# network.parameter\tshape\tcount\n";
    for (const auto& [name, net] : bundle.named_networks()) {
        for (const auto& item : net->named_parameters()) {
            out << name << '.' << item.key() << '\t' << item.value().sizes() << '\t' << item.value().numel() << '\n';
        }
    }
    for (const auto& [name, net] : bundle.named_networks()) out << "total." << name << "\t-\t" << parameter_count(*net) << '\n';
    return out.str();
}

void write_architecture_manifest(const ModelBundle& bundle, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write architecture manifest " + path.string());
    out << architecture_manifest(bundle);
}

}  // namespace expredit
