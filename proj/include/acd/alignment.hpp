#pragma once

#include "acd/image.hpp"
#include "acd/networks.hpp"

#include <torch/torch.h>

#include <span>
#include <utility>
#include <vector>

namespace acd {

inline constexpr double kCosineEps = 1e-8;
inline constexpr double kScoreNormEps = 1e-5;

// Per-row mean-variance normalization along the last axis, then softmax.
torch::Tensor normalize_scores(const torch::Tensor& raw_scores);
torch::Tensor attention_from_scores(const torch::Tensor& raw_scores);

// Q = proj_l(z') reshaped to [N, d', d_k]; A_l = softmax(norm(Q K_l^T / sqrt(d_k))).
// Returns `tap` with its attention filled, shape [N, d', h*w].
AttentionTap compute_cross_attention(AlignCdae& model, const torch::Tensor& z_prime, AttentionTap tap);

struct ProgressionMask {
    torch::Tensor full;                 // [N, 1, H, W] in [0, 1]
    std::vector<torch::Tensor> per_tap; // [N, 1, h_l, w_l], max-renormalized
    torch::Tensor degenerate;           // bool [N]: x_b == x_f everywhere
};

// M = |x_f - x_b| / max|x_f - x_b|, average-pooled to each tap resolution.
ProgressionMask build_progression_mask(const torch::Tensor& x_b, const torch::Tensor& x_f,
                                       std::span<const std::pair<int64_t, int64_t>> tap_shapes);
ProgressionMask build_progression_mask(const ImageGrid& x_b, const ImageGrid& x_f,
                                       std::span<const std::pair<int64_t, int64_t>> tap_shapes);

// 1 - <a, m> / (|a| |m| + eps) per row of [N, s] inputs, with an analytic backward.
torch::Tensor cosine_distance(const torch::Tensor& a, const torch::Tensor& m);
// sum_{i != j} cos^2(A_i, A_j) over the channel rows of [N, k, s], analytic backward.
torch::Tensor channel_cosine_sq_sum(const torch::Tensor& attention);

// Per-sample losses, shape [N]. The alignment loss averages the attention
// over its channels before comparing with the pooled mask; callers must
// exclude degenerate masks.
torch::Tensor attention_alignment_loss(std::span<const AttentionTap> taps, const ProgressionMask& mask);
torch::Tensor attention_imax_loss(std::span<const AttentionTap> taps);
torch::Tensor reconstruction_loss(const torch::Tensor& x_f, const torch::Tensor& x0_hat);
double reconstruction_loss(const ImageGrid& x_f, const ImageGrid& x0_hat);

struct LossWeights {
    double imax = 0.1;  // lambda_1
    double align = 1.0; // lambda_2
    double mse = 1.0;   // lambda_3
};

struct LossBreakdown {
    double l_mse = 0.0;
    double l_attn_align = 0.0;
    double l_attn_imax = 0.0;
    double total = 0.0;
    LossWeights lambdas;
    bool skipped_alignment = false;
    int64_t skipped_alignment_count = 0;
};

LossBreakdown make_breakdown(double l_imax, double l_align, double l_mse, const LossWeights& lambdas);

struct BatchLoss {
    torch::Tensor total; // differentiable scalar, batch mean
    LossBreakdown breakdown;
};

// Weighted objective over a batch. Samples with a degenerate mask drop the
// alignment term; samples with attention_active = false (reconstruction
// branch) drop both attention terms. Components are batch means with dropped
// terms counted as zero, so breakdown.total is their exact weighted sum.
BatchLoss total_loss(std::span<const AttentionTap> taps, const ProgressionMask& mask, const torch::Tensor& x_f,
                     const torch::Tensor& x0_hat, const LossWeights& lambdas,
                     const torch::Tensor& attention_active = {});

} // namespace acd
