#include "acd/inference.hpp"

#include "acd/alignment.hpp"
#include "acd/errors.hpp"

namespace acd {

void InferenceConfig::validate(const NetworkConfig& network, int T) const {
    if (steps < 1 || steps > T)
        throw UsageError("inference steps T_s=" + std::to_string(steps) + " outside [1, " + std::to_string(T) + "]");
    if (analysis_layer < 0 || analysis_layer > network.decoder_layers())
        throw UsageError("analysis_layer " + std::to_string(analysis_layer) + " outside [0, " +
                         std::to_string(network.decoder_layers()) + "]");
    if (attention_t < 0 || attention_t > T)
        throw UsageError("attention_t outside [0, " + std::to_string(T) + "]");
}

int InferenceConfig::resolved_analysis_layer(const NetworkConfig& network) const {
    const int layer = analysis_layer > 0 ? analysis_layer : network.default_analysis_layer();
    return layer > 0 ? layer : network.taps;
}

int InferenceConfig::resolved_attention_t(int T) const { return attention_t > 0 ? attention_t : std::max(1, T / 2); }

torch::Tensor seeded_noise(std::span<const uint64_t> seeds, int64_t height, int64_t width) {
    std::vector<torch::Tensor> slices;
    slices.reserve(seeds.size());
    for (const auto seed : seeds) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
        slices.push_back(torch::randn({1, height, width}, gen));
    }
    return torch::stack(slices);
}

namespace {

void require_batch(size_t a, size_t b, const char* what) {
    if (a != b)
        throw UsageError(std::string(what) + ": batch sizes differ");
    if (a == 0)
        throw UsageError(std::string(what) + ": empty batch");
}

} // namespace

torch::Tensor sample_with_latent(AlignCdae& model, const torch::Tensor& z, const NoiseSchedule& sched, int T_s,
                                 std::span<const uint64_t> seeds) {
    const int T = sched.steps();
    if (T_s < 1 || T_s > T)
        throw UsageError("inference steps T_s=" + std::to_string(T_s) + " outside [1, " + std::to_string(T) + "]");
    require_batch(static_cast<size_t>(z.size(0)), seeds.size(), "sample_with_latent");
    torch::NoGradGuard no_grad;
    model->eval();
    const auto side = model->config().image_size;
    const auto n = z.size(0);
    auto x = seeded_noise(seeds, side, side);
    const auto steps = inference_timesteps(T, T_s);
    torch::Tensor x0_hat;
    for (size_t k = 0; k + 1 < steps.size(); ++k) {
        auto t = torch::full({n}, steps[k], torch::kLong);
        x0_hat = denoise(model, x, t, z, T).x0_hat.clamp(kPredictionClampLow, kPredictionClampHigh);
        x = ddim_reverse_step(x, x0_hat, {steps[k], steps[k + 1]}, sched);
    }
    return x0_hat.clamp(0.0, 1.0);
}

std::vector<ImageGrid> synthesize_follow_up(AlignCdae& model, std::span<const ImageGrid> x_b,
                                            std::span<const ProgressionAttributes> attrs, const NoiseSchedule& sched,
                                            int T_s, std::span<const uint64_t> seeds) {
    require_batch(x_b.size(), attrs.size(), "synthesize_follow_up");
    torch::NoGradGuard no_grad;
    model->eval();
    auto z_f = compose_follow_up_latent(encode_semantic(model, to_tensor(x_b)), encode_condition(model, attrs));
    return batch_from_tensor(sample_with_latent(model, z_f, sched, T_s, seeds));
}

ImageGrid synthesize_follow_up(AlignCdae& model, const ImageGrid& x_b, const ProgressionAttributes& attrs,
                               const NoiseSchedule& sched, int T_s, uint64_t seed) {
    return synthesize_follow_up(model, std::span(&x_b, 1), std::span(&attrs, 1), sched, T_s, std::span(&seed, 1))[0];
}

std::vector<ImageGrid> reconstruct_baseline(AlignCdae& model, std::span<const ImageGrid> x_b,
                                            const NoiseSchedule& sched, int T_s, std::span<const uint64_t> seeds) {
    require_batch(x_b.size(), seeds.size(), "reconstruct_baseline");
    torch::NoGradGuard no_grad;
    model->eval();
    auto z_b = encode_semantic(model, to_tensor(x_b));
    return batch_from_tensor(sample_with_latent(model, z_b, sched, T_s, seeds));
}

ImageGrid reconstruct_baseline(AlignCdae& model, const ImageGrid& x_b, const NoiseSchedule& sched, int T_s,
                               uint64_t seed) {
    return reconstruct_baseline(model, std::span(&x_b, 1), sched, T_s, std::span(&seed, 1))[0];
}

std::vector<torch::Tensor> channel_mean_attention(AlignCdae& model, const torch::Tensor& x_b,
                                                  std::span<const ProgressionAttributes> attrs,
                                                  const NoiseSchedule& sched, int t, std::span<const int> layers,
                                                  std::span<const uint64_t> seeds) {
    const int T = sched.steps();
    if (t < 1 || t > T)
        throw UsageError("attention step t=" + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    require_batch(static_cast<size_t>(x_b.size(0)), attrs.size(), "channel_mean_attention");
    require_batch(attrs.size(), seeds.size(), "channel_mean_attention");
    const auto& cfg = model->config();
    for (const int layer : layers) {
        if (layer < 1 || layer > cfg.decoder_layers())
            throw UsageError("attention layer " + std::to_string(layer) + " outside [1, " +
                             std::to_string(cfg.decoder_layers()) + "]");
    }
    torch::NoGradGuard no_grad;
    model->eval();
    const auto n = x_b.size(0);
    auto z_b = encode_semantic(model, x_b);
    auto z_prime = encode_condition(model, attrs);
    auto z_f = compose_follow_up_latent(z_b, z_prime);
    auto x_t = forward_diffuse(x_b, t, seeded_noise(seeds, x_b.size(2), x_b.size(3)), sched);
    auto result = denoise(model, x_t, torch::full({n}, t, torch::kLong), z_f, T);
    std::vector<torch::Tensor> maps;
    for (const int layer : layers) {
        auto tap = compute_cross_attention(model, z_prime, result.all_layers[static_cast<size_t>(layer - 1)]);
        maps.push_back(tap.attention.mean(1).view({n, tap.height(), tap.width()}));
    }
    return maps;
}

ImageGrid extract_attention_map(AlignCdae& model, const ImageGrid& x_b, const ProgressionAttributes& attrs,
                                const NoiseSchedule& sched, int t, int layer_index, uint64_t seed) {
    attrs.validate();
    const int layers[] = {layer_index};
    auto map = channel_mean_attention(model, to_tensor(x_b), std::span(&attrs, 1), sched, t, layers,
                                      std::span(&seed, 1))[0];
    torch::NoGradGuard no_grad;
    auto lo = map.min();
    auto range = map.max() - lo;
    auto normalized = range.item<double>() > 0 ? (map - lo) / range : torch::zeros_like(map);
    auto up = torch::nn::functional::interpolate(
        normalized.unsqueeze(1), torch::nn::functional::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{x_b.height, x_b.width})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
    return from_tensor(up.clamp(0.0, 1.0));
}

} // namespace acd
