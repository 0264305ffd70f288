#include "acd/networks.hpp"

#include "acd/errors.hpp"

#include <cmath>
#include <numeric>

namespace acd {

namespace nn = torch::nn;

void NetworkConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok)
            throw UsageError("network config: " + msg);
    };
    require(image_size > 0 && base_channels > 0 && levels > 0, "image_size, base_channels and levels must be positive");
    require(image_size % (1 << (levels - 1)) == 0, "image_size must be divisible by 2^(levels-1)");
    require(d > 0 && d_prime > 0, "d and d_prime must be positive");
    require(d_prime < d, "d_prime must be smaller than d");
    require(age_bins > 0, "age_bins must be positive");
    require(taps == 3, "exactly three supervised taps are supported");
    require(extra_decoder_layers >= 0, "extra_decoder_layers must be non-negative");
    require(taps <= decoder_layers(), "more taps than decoder layers");
    require(condition_hidden > 0 && norm_groups > 0, "condition_hidden and norm_groups must be positive");
}

int NetworkConfig::decoder_channels(int layer) const {
    if (layer < 1 || layer > decoder_layers())
        throw UsageError("decoder layer " + std::to_string(layer) + " outside [1, " +
                         std::to_string(decoder_layers()) + "]");
    return layer <= levels ? channels(levels - layer) : channels(0);
}

int NetworkConfig::decoder_side(int layer) const {
    if (layer < 1 || layer > decoder_layers())
        throw UsageError("decoder layer " + std::to_string(layer) + " outside [1, " +
                         std::to_string(decoder_layers()) + "]");
    return layer <= levels ? image_size >> (levels - layer) : image_size;
}

namespace {

int groups_for(int channels, int requested) { return std::gcd(channels, requested); }

nn::Conv2d conv3x3(int in, int out, int stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

} // namespace

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int time_dim, int latent_dim, int groups)
    : out_channels_(out_channels) {
    norm1_ = register_module("norm1", nn::GroupNorm(groups_for(in_channels, groups), in_channels));
    conv1_ = register_module("conv1", conv3x3(in_channels, out_channels));
    norm2_ = register_module("norm2", nn::GroupNorm(groups_for(out_channels, groups), out_channels));
    conv2_ = register_module("conv2", conv3x3(out_channels, out_channels));
    if (in_channels != out_channels)
        skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
    if (time_dim > 0)
        time_mod_ = register_module("time_mod", nn::Linear(time_dim, 2 * out_channels));
    if (latent_dim > 0)
        latent_mod_ = register_module("latent_mod", nn::Linear(latent_dim, 2 * out_channels));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_emb,
                                    const torch::Tensor& latent) {
    auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
    h = norm2_->forward(h);
    auto modulate = [&](nn::Linear& layer, const torch::Tensor& cond) {
        auto params = layer->forward(cond).view({cond.size(0), 2 * out_channels_, 1, 1});
        auto scale_shift = params.chunk(2, 1);
        h = h * (1 + scale_shift[0]) + scale_shift[1];
    };
    if (time_mod_ && time_emb.defined())
        modulate(time_mod_, torch::silu(time_emb));
    if (latent_mod_ && latent.defined())
        modulate(latent_mod_, latent);
    h = conv2_->forward(torch::silu(h));
    return (skip_ ? skip_->forward(x) : x) + h;
}

SemanticEncoderImpl::SemanticEncoderImpl(const NetworkConfig& config) {
    blocks_ = register_module("blocks", nn::ModuleList());
    downs_ = register_module("downs", nn::ModuleList());
    conv_in_ = register_module("conv_in", conv3x3(1, config.channels(0)));
    int in = config.channels(0);
    for (int level = 0; level < config.levels; ++level) {
        const int out = config.channels(level);
        blocks_->push_back(ResBlock(in, out, 0, 0, config.norm_groups));
        if (level + 1 < config.levels)
            downs_->push_back(conv3x3(out, out, 2));
        in = out;
    }
    norm_out_ = register_module("norm_out", nn::GroupNorm(groups_for(in, config.norm_groups), in));
    head_ = register_module("head", nn::Linear(in, config.d));
}

torch::Tensor SemanticEncoderImpl::forward(const torch::Tensor& x) {
    auto h = conv_in_->forward(x);
    for (size_t level = 0; level < blocks_->size(); ++level) {
        h = blocks_[level]->as<ResBlock>()->forward(h);
        if (level < downs_->size())
            h = downs_[level]->as<nn::Conv2d>()->forward(h);
    }
    h = torch::silu(norm_out_->forward(h)).mean({2, 3});
    return head_->forward(h);
}

ConditionEncoderImpl::ConditionEncoderImpl(const NetworkConfig& config) {
    fc1_ = register_module("fc1", nn::Linear(config.age_bins + kDiseaseStates, config.condition_hidden));
    fc2_ = register_module("fc2", nn::Linear(config.condition_hidden, config.d_prime));
}

torch::Tensor ConditionEncoderImpl::forward(const torch::Tensor& one_hots) {
    return fc2_->forward(torch::silu(fc1_->forward(one_hots)));
}

DenoiserImpl::DenoiserImpl(const NetworkConfig& config) : config_(config) {
    const int emb = config.time_embed_dim();
    const int groups = config.norm_groups;
    time_fc1_ = register_module("time_fc1", nn::Linear(config.base_channels, emb));
    time_fc2_ = register_module("time_fc2", nn::Linear(emb, emb));
    conv_in_ = register_module("conv_in", conv3x3(1, config.channels(0)));
    enc_blocks_ = register_module("enc_blocks", nn::ModuleList());
    downs_ = register_module("downs", nn::ModuleList());
    dec_blocks_ = register_module("dec_blocks", nn::ModuleList());
    ups_ = register_module("ups", nn::ModuleList());

    int in = config.channels(0);
    for (int level = 0; level < config.levels; ++level) {
        const int out = config.channels(level);
        enc_blocks_->push_back(ResBlock(in, out, emb, config.d, groups));
        if (level + 1 < config.levels)
            downs_->push_back(conv3x3(out, out, 2));
        in = out;
    }
    mid_ = register_module("mid", ResBlock(in, in, emb, config.d, groups));
    for (int level = config.levels - 1; level >= 0; --level) {
        const int out = config.channels(level);
        dec_blocks_->push_back(ResBlock(in + out, out, emb, config.d, groups));
        if (level > 0)
            ups_->push_back(conv3x3(out, out));
        in = out;
    }
    for (int extra = 0; extra < config.extra_decoder_layers; ++extra)
        dec_blocks_->push_back(ResBlock(in, in, emb, config.d, groups));
    norm_out_ = register_module("norm_out", nn::GroupNorm(groups_for(in, groups), in));
    conv_out_ = register_module("conv_out", conv3x3(in, 1));
}

torch::Tensor DenoiserImpl::time_embedding(const torch::Tensor& t) {
    const int64_t half = config_.base_channels / 2;
    auto freqs = torch::exp(-std::log(10000.0) *
                            torch::arange(half, torch::TensorOptions().dtype(time_fc1_->weight.scalar_type())) /
                            static_cast<double>(half));
    auto args = t.to(freqs.scalar_type()).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
    if (emb.size(1) < config_.base_channels)
        emb = torch::nn::functional::pad(emb, torch::nn::functional::PadFuncOptions({0, 1}));
    return time_fc2_->forward(torch::silu(time_fc1_->forward(emb)));
}

DenoiserOutput DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& z) {
    const auto emb = time_embedding(t);
    auto h = conv_in_->forward(x_t);
    std::vector<torch::Tensor> skips;
    for (size_t level = 0; level < enc_blocks_->size(); ++level) {
        h = enc_blocks_[level]->as<ResBlock>()->forward(h, emb, z);
        skips.push_back(h);
        if (level < downs_->size())
            h = downs_[level]->as<nn::Conv2d>()->forward(h);
    }
    h = mid_->forward(h, emb, z);

    DenoiserOutput out;
    size_t up = 0;
    for (size_t layer = 0; layer < dec_blocks_->size(); ++layer) {
        if (layer < static_cast<size_t>(config_.levels)) {
            h = torch::cat({h, skips[skips.size() - 1 - layer]}, 1);
            h = dec_blocks_[layer]->as<ResBlock>()->forward(h, emb, z);
            out.decoder_features.push_back(h);
            if (up < ups_->size()) {
                h = torch::nn::functional::interpolate(
                    h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(
                           torch::kNearest));
                h = ups_[up++]->as<nn::Conv2d>()->forward(h);
            }
        } else {
            h = dec_blocks_[layer]->as<ResBlock>()->forward(h, emb, z);
            out.decoder_features.push_back(h);
        }
    }
    out.x0_hat = conv_out_->forward(torch::silu(norm_out_->forward(h)));
    return out;
}

AlignCdaeImpl::AlignCdaeImpl(const NetworkConfig& config) : config_(config) {
    config_.validate();
    encoder = register_module("encoder", SemanticEncoder(config_));
    condition = register_module("condition", ConditionEncoder(config_));
    denoiser = register_module("denoiser", Denoiser(config_));
    query_projections = register_module("query", nn::ModuleList());
    for (int layer = 1; layer <= config_.taps; ++layer)
        query_projections->push_back(nn::Linear(config_.d_prime, config_.d_prime * config_.decoder_channels(layer)));
}

nn::Linear AlignCdaeImpl::query_projection(int layer) {
    if (layer < 1 || layer > config_.decoder_layers())
        throw UsageError("decoder layer " + std::to_string(layer) + " outside [1, " +
                         std::to_string(config_.decoder_layers()) + "]");
    if (layer <= config_.taps)
        return nn::Linear(query_projections->ptr<nn::LinearImpl>(static_cast<size_t>(layer - 1)));
    const int depth = config_.decoder_channels(layer);
    for (int tap = config_.taps; tap >= 1; --tap) {
        if (config_.decoder_channels(tap) == depth)
            return nn::Linear(query_projections->ptr<nn::LinearImpl>(static_cast<size_t>(tap - 1)));
    }
    throw UsageError("no query projection matches the feature depth of decoder layer " + std::to_string(layer));
}

AlignCdae init_parameters(const NetworkConfig& config, uint64_t seed) {
    config.validate();
    AlignCdae model(config);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    torch::NoGradGuard no_grad;
    for (auto& item : model->named_parameters()) {
        auto& p = item.value();
        const auto& name = item.key();
        const bool is_norm = name.find("norm") != std::string::npos;
        if (p.dim() == 1) {
            p.fill_(is_norm && name.ends_with("weight") ? 1.0 : 0.0);
        } else {
            const double fan_in = static_cast<double>(p.numel() / p.size(0));
            const double bound = 1.0 / std::sqrt(fan_in);
            p.uniform_(-bound, bound, gen);
        }
    }
    model->denoiser->output_conv()->weight.zero_();
    return model;
}

torch::Tensor encode_semantic(AlignCdae& model, const torch::Tensor& x_b) {
    const auto side = model->config().image_size;
    if (x_b.dim() != 4 || x_b.size(1) != 1 || x_b.size(2) != side || x_b.size(3) != side)
        throw UsageError("encode_semantic: expected [N, 1, " + std::to_string(side) + ", " + std::to_string(side) +
                         "] input");
    return model->encoder->forward(x_b);
}

torch::Tensor encode_condition(AlignCdae& model, const torch::Tensor& one_hots) {
    const auto width = model->config().age_bins + kDiseaseStates;
    if (one_hots.dim() != 2 || one_hots.size(1) != width)
        throw UsageError("encode_condition: expected [N, " + std::to_string(width) + "] one-hot input");
    return model->condition->forward(one_hots);
}

torch::Tensor encode_condition(AlignCdae& model, std::span<const ProgressionAttributes> attrs) {
    for (const auto& a : attrs) {
        if (static_cast<int>(a.age_bin.size()) != model->config().age_bins)
            throw UsageError("encode_condition: attributes use a different age bin count than the model");
    }
    auto one_hots = attributes_tensor(attrs);
    const auto& ref = model->condition->output_layer()->weight;
    return encode_condition(model, one_hots.to(ref.device(), ref.scalar_type()));
}

torch::Tensor compose_follow_up_latent(const torch::Tensor& z_b, const torch::Tensor& z_prime) {
    if (z_b.dim() != 2 || z_prime.dim() != 2 || z_b.size(0) != z_prime.size(0))
        throw UsageError("compose_follow_up_latent: expected [N, d] and [N, d'] latents");
    const auto d = z_b.size(1);
    const auto d_prime = z_prime.size(1);
    if (d_prime >= d)
        throw UsageError("compose_follow_up_latent: d' must be smaller than d");
    using torch::indexing::Slice;
    return torch::cat({z_b.index({Slice(), Slice(0, d_prime)}) + z_prime, z_b.index({Slice(), Slice(d_prime, d)})}, 1);
}

DenoiseResult denoise(AlignCdae& model, const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& z,
                      int T) {
    const auto& cfg = model->config();
    if (x_t.dim() != 4 || x_t.size(1) != 1 || x_t.size(2) != cfg.image_size || x_t.size(3) != cfg.image_size)
        throw UsageError("denoise: x_t must be [N, 1, " + std::to_string(cfg.image_size) + ", " +
                         std::to_string(cfg.image_size) + "]");
    if (z.dim() != 2 || z.size(1) != cfg.d || z.size(0) != x_t.size(0))
        throw UsageError("denoise: latent must be [N, " + std::to_string(cfg.d) + "]");
    if (t.dim() != 1 || t.size(0) != x_t.size(0))
        throw UsageError("denoise: need one diffusion step per sample");
    const auto t_min = t.min().item<int64_t>();
    const auto t_max = t.max().item<int64_t>();
    if (t_min < 1 || t_max > T)
        throw UsageError("denoise: diffusion step outside [1, " + std::to_string(T) + "]");

    auto out = model->denoiser->forward(x_t, t, z);
    DenoiseResult result;
    result.x0_hat = out.x0_hat;
    for (size_t layer = 0; layer < out.decoder_features.size(); ++layer) {
        AttentionTap tap;
        tap.layer_index = static_cast<int>(layer) + 1;
        tap.features = out.decoder_features[layer];
        if (tap.layer_index <= cfg.taps)
            result.taps.push_back(tap);
        result.all_layers.push_back(std::move(tap));
    }
    return result;
}

int64_t parameter_count(AlignCdae& model) {
    int64_t total = 0;
    for (const auto& p : model->parameters())
        total += p.numel();
    return total;
}

} // namespace acd
