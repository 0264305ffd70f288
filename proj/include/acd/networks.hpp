#pragma once

#include "acd/attributes.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace acd {

struct NetworkConfig {
    int image_size = 32;
    int base_channels = 32;
    int levels = 3;     // resolutions image_size, /2, ... ; channels double per level
    int d = 128;        // semantic latent width
    int d_prime = 16;   // condition subspace width, < d
    int age_bins = 8;
    int taps = 3;       // supervised decoder layers
    int condition_hidden = 64;
    int norm_groups = 8;
    int extra_decoder_layers = 1; // full-resolution layers after the last skip merge

    void validate() const;
    int channels(int level) const { return base_channels << level; }
    int time_embed_dim() const { return 4 * base_channels; }
    int decoder_layers() const { return levels + extra_decoder_layers; }
    // Channel count (d_k) and spatial side of decoder layer `layer` (1-based).
    int decoder_channels(int layer) const;
    int decoder_side(int layer) const;
    // Deepest decoder layer outside the supervised set; 0 if none exists.
    int default_analysis_layer() const { return taps < decoder_layers() ? taps + 1 : 0; }
};

// GroupNorm -> SiLU -> conv, twice, with an optional affine modulation of the
// second normalized activation by the time embedding and by the semantic latent.
class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int in_channels, int out_channels, int time_dim, int latent_dim, int groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_emb = {},
                          const torch::Tensor& latent = {});

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::Conv2d skip_{nullptr};
    torch::nn::Linear time_mod_{nullptr}, latent_mod_{nullptr};
    int out_channels_;
};
TORCH_MODULE(ResBlock);

// Semantic encoder: the denoiser's contracting path without time inputs,
// then global average pooling and a linear map to R^d.
class SemanticEncoderImpl : public torch::nn::Module {
public:
    explicit SemanticEncoderImpl(const NetworkConfig& config);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Linear& head() { return head_; }

private:
    torch::nn::Conv2d conv_in_{nullptr};
    torch::nn::ModuleList blocks_, downs_;
    torch::nn::GroupNorm norm_out_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(SemanticEncoder);

// Two fully connected layers from concatenated one-hots to R^{d'}.
class ConditionEncoderImpl : public torch::nn::Module {
public:
    explicit ConditionEncoderImpl(const NetworkConfig& config);
    torch::Tensor forward(const torch::Tensor& one_hots);
    torch::nn::Linear& output_layer() { return fc2_; }

private:
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ConditionEncoder);

struct DenoiserOutput {
    torch::Tensor x0_hat;                        // [N, 1, H, W]
    std::vector<torch::Tensor> decoder_features; // per decoder layer, [N, C_l, h_l, w_l]
};

// U-Net predicting the clean image from (x_t, t, z).
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(const NetworkConfig& config);
    DenoiserOutput forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& z);
    torch::nn::Conv2d& output_conv() { return conv_out_; }

private:
    torch::Tensor time_embedding(const torch::Tensor& t);

    NetworkConfig config_;
    torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
    torch::nn::Conv2d conv_in_{nullptr};
    torch::nn::ModuleList enc_blocks_, downs_, dec_blocks_, ups_;
    ResBlock mid_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(Denoiser);

// All learnable parameters: encoder, condition encoder, denoiser and one
// query projection R^{d'} -> R^{d' x d_k} per supervised tap.
class AlignCdaeImpl : public torch::nn::Module {
public:
    explicit AlignCdaeImpl(const NetworkConfig& config);

    const NetworkConfig& config() const { return config_; }
    SemanticEncoder encoder{nullptr};
    ConditionEncoder condition{nullptr};
    Denoiser denoiser{nullptr};
    torch::nn::ModuleList query_projections;

    // Query projection used for decoder layer `layer` (1-based). Layers beyond
    // the supervised taps borrow the projection of the deepest supervised tap
    // with the same feature depth.
    torch::nn::Linear query_projection(int layer);

private:
    NetworkConfig config_;
};
TORCH_MODULE(AlignCdae);

// A decoder layer's features K_l and, once computed, its attention A_l.
struct AttentionTap {
    int layer_index = 0;    // 1-based decoder layer
    torch::Tensor features; // [N, d_k, h, w]
    torch::Tensor attention; // [N, d', h*w], undefined until computed

    int64_t height() const { return features.size(2); }
    int64_t width() const { return features.size(3); }
    int64_t depth() const { return features.size(1); }
    int64_t positions() const { return height() * width(); }
};

struct DenoiseResult {
    torch::Tensor x0_hat;
    std::vector<AttentionTap> taps;     // the supervised layers, ordered by decoder depth
    std::vector<AttentionTap> all_layers;
};

// Fan-in scaled uniform weights, zero biases, unit norm gains and a zero
// output convolution; a pure function of (config, seed).
AlignCdae init_parameters(const NetworkConfig& config, uint64_t seed);

torch::Tensor encode_semantic(AlignCdae& model, const torch::Tensor& x_b);
torch::Tensor encode_condition(AlignCdae& model, const torch::Tensor& one_hots);
torch::Tensor encode_condition(AlignCdae& model, std::span<const ProgressionAttributes> attrs);

// z_f = z_b + [z'; 0]; indices [d', d) are copied, not added to.
torch::Tensor compose_follow_up_latent(const torch::Tensor& z_b, const torch::Tensor& z_prime);

// t: int64 [N] with values in [1, T].
DenoiseResult denoise(AlignCdae& model, const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& z,
                      int T);

int64_t parameter_count(AlignCdae& model);

} // namespace acd
