#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "expredit/config.hpp"
#include "expredit/core.hpp"

namespace expredit {

// Image batches are NCHW float tensors in [-1, 1]; AU batches are (B, d) floats.
torch::Tensor images_to_tensor(const std::vector<FaceImage>& images);
FaceImage tensor_to_image(const torch::Tensor& chw);
std::vector<FaceImage> tensor_to_images(const torch::Tensor& nchw);
torch::Tensor aus_to_tensor(const std::vector<AUVector>& aus);
AUVector tensor_to_au(const torch::Tensor& row);

/// E: five stride-2 convolutions (16..256 channels) and a linear map to the latent code.
struct EncoderImpl : torch::nn::Module {
    EncoderImpl(int image_size, int latent_dim);
    torch::Tensor forward(torch::Tensor images);

    torch::nn::Sequential convs{nullptr};
    torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(Encoder);

/// Nearest-neighbour x2 upsampling followed by two instance-normalized convs,
/// with a 1x1 projection on the skip path.
struct UpResBlockImpl : torch::nn::Module {
    UpResBlockImpl(int in_channels, int out_channels);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::InstanceNorm2d norm1{nullptr}, norm2{nullptr};
    torch::nn::PReLU act1{nullptr}, act2{nullptr};
};
TORCH_MODULE(UpResBlock);

/// G(l | u): [l, u] is projected to a (width x s x s) map with s = image_size / 64,
/// then six up-sampling residual blocks halve the width while doubling resolution.
struct GeneratorImpl : torch::nn::Module {
    GeneratorImpl(int image_size, int latent_dim, int num_aus, int width);
    torch::Tensor forward(torch::Tensor codes, torch::Tensor aus);

    int start_size = 2;
    int width = 512;
    torch::nn::Linear project{nullptr};
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::Conv2d to_rgb{nullptr};
};
TORCH_MODULE(Generator);

/// D_z: six fully connected layers (256, 128, 64, 32, 16, 1) with a sigmoid head.
struct LatentDiscriminatorImpl : torch::nn::Module {
    explicit LatentDiscriminatorImpl(int latent_dim);
    torch::Tensor forward(torch::Tensor codes);

    torch::nn::Sequential layers{nullptr};
};
TORCH_MODULE(LatentDiscriminator);

/// D_img: six stride-2 convolutions and an unbounded linear score.
struct ImageCriticImpl : torch::nn::Module {
    ImageCriticImpl(int image_size, int width);
    torch::Tensor forward(torch::Tensor images);

    torch::nn::Sequential convs{nullptr};
    torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ImageCritic);

/// Shared VGG-style body for C_exp and C_id: conv-conv-pool blocks, then a
/// fully connected embedding layer and a linear head producing logits.
struct ClassifierImpl : torch::nn::Module {
    ClassifierImpl(int image_size, int width, int blocks, int embedding_dim, int outputs);
    /// Returns {logits, embedding}.
    std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor images);

    torch::nn::Sequential features{nullptr};
    torch::nn::Linear embed{nullptr};
    torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Classifier);

struct ModelBundle {
    TrainConfig config;
    Encoder encoder{nullptr};
    Generator generator{nullptr};
    LatentDiscriminator latent_critic{nullptr};
    ImageCritic image_critic{nullptr};
    Classifier expression{nullptr};
    Classifier identity{nullptr};
    std::int64_t step = 0;
    bool identity_pretrained = false;

    /// (name, module) in a fixed order used for checkpoints and manifests.
    std::vector<std::pair<std::string, torch::nn::Module*>> named_networks() const;
};

/// Builds all six networks deterministically from `seed`: N(0, 0.02^2) weights (He-normal for the
/// two classifiers) and zero biases.
/// config.n_identities must be set.
ModelBundle build_models(const TrainConfig& config, std::uint64_t seed);

/// Deep copy of every parameter and buffer.
ModelBundle clone_bundle(const ModelBundle& bundle);

torch::Tensor encode(const ModelBundle& bundle, const torch::Tensor& images);
torch::Tensor generate(const ModelBundle& bundle, const torch::Tensor& codes, const torch::Tensor& aus);
torch::Tensor discriminate_latent(const ModelBundle& bundle, const torch::Tensor& codes);
torch::Tensor discriminate_image(const ModelBundle& bundle, const torch::Tensor& images);
/// (B, d, m+1) per-AU softmax probabilities.
torch::Tensor classify_expression(const ModelBundle& bundle, const torch::Tensor& images);

struct IdentityOutput {
    torch::Tensor probs;      // (B, n)
    torch::Tensor embedding;  // (B, embedding_dim)
};
IdentityOutput classify_identity(const ModelBundle& bundle, const torch::Tensor& images);

std::int64_t parameter_count(const torch::nn::Module& module);

/// FNV-1a over the raw bytes of every parameter of the given module.
std::uint64_t parameter_checksum(const torch::nn::Module& module);
std::uint64_t parameter_checksum(const ModelBundle& bundle);

bool all_parameters_finite(const torch::nn::Module& module);

/// One line per parameter tensor: network.name, shape, count; then per-network totals.
std::string architecture_manifest(const ModelBundle& bundle);
void write_architecture_manifest(const ModelBundle& bundle, const std::filesystem::path& path);

}  // namespace expredit
