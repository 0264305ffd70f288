#pragma once

#include "acd/attributes.hpp"
#include "acd/diffusion.hpp"
#include "acd/image.hpp"
#include "acd/networks.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <vector>

namespace acd {

struct InferenceConfig {
    int steps = 100;        // T_s
    int analysis_layer = 0; // 0 selects NetworkConfig::default_analysis_layer()
    int attention_t = 0;    // 0 selects T / 2

    void validate(const NetworkConfig& network, int T) const;
    int resolved_analysis_layer(const NetworkConfig& network) const;
    int resolved_attention_t(int T) const;
};

// Standard normal [1, H, W] slices, one generator per seed.
torch::Tensor seeded_noise(std::span<const uint64_t> seeds, int64_t height, int64_t width);

// Deterministic reverse chain from x_T = seeded noise under latent z [N, d];
// returns the final clean prediction clamped to [0, 1], shape [N, 1, H, W].
torch::Tensor sample_with_latent(AlignCdae& model, const torch::Tensor& z, const NoiseSchedule& sched, int T_s,
                                 std::span<const uint64_t> seeds);

std::vector<ImageGrid> synthesize_follow_up(AlignCdae& model, std::span<const ImageGrid> x_b,
                                            std::span<const ProgressionAttributes> attrs, const NoiseSchedule& sched,
                                            int T_s, std::span<const uint64_t> seeds);
ImageGrid synthesize_follow_up(AlignCdae& model, const ImageGrid& x_b, const ProgressionAttributes& attrs,
                               const NoiseSchedule& sched, int T_s, uint64_t seed);

std::vector<ImageGrid> reconstruct_baseline(AlignCdae& model, std::span<const ImageGrid> x_b,
                                            const NoiseSchedule& sched, int T_s, std::span<const uint64_t> seeds);
ImageGrid reconstruct_baseline(AlignCdae& model, const ImageGrid& x_b, const NoiseSchedule& sched, int T_s,
                               uint64_t seed);

// Channel-averaged cross-attention of decoder layers `layers` after one
// denoise pass at step t on the forward-diffused baseline. Each entry is
// [N, h_l, w_l].
std::vector<torch::Tensor> channel_mean_attention(AlignCdae& model, const torch::Tensor& x_b,
                                                  std::span<const ProgressionAttributes> attrs,
                                                  const NoiseSchedule& sched, int t, std::span<const int> layers,
                                                  std::span<const uint64_t> seeds);

// Channel-mean attention of one layer, min-max normalized (a constant map
// becomes all zeros) and bilinearly upsampled to the image size.
ImageGrid extract_attention_map(AlignCdae& model, const ImageGrid& x_b, const ProgressionAttributes& attrs,
                                const NoiseSchedule& sched, int t, int layer_index, uint64_t seed);

} // namespace acd
