#include "acd/alignment.hpp"

#include "acd/errors.hpp"

#include <cmath>

namespace acd {

using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

torch::Tensor normalize_scores(const torch::Tensor& raw_scores) {
    auto mean = raw_scores.mean(-1, true);
    auto var = (raw_scores - mean).pow(2).mean(-1, true);
    return (raw_scores - mean) / torch::sqrt(var + kScoreNormEps);
}

torch::Tensor attention_from_scores(const torch::Tensor& raw_scores) {
    return torch::softmax(normalize_scores(raw_scores), -1);
}

AttentionTap compute_cross_attention(AlignCdae& model, const torch::Tensor& z_prime, AttentionTap tap) {
    if (!tap.features.defined())
        throw UsageError("compute_cross_attention: tap has no features");
    const auto& cfg = model->config();
    if (z_prime.dim() != 2 || z_prime.size(1) != cfg.d_prime || z_prime.size(0) != tap.features.size(0))
        throw UsageError("compute_cross_attention: z' must be [N, " + std::to_string(cfg.d_prime) + "]");
    auto projection = model->query_projection(tap.layer_index);
    const auto n = tap.features.size(0);
    const auto d_k = tap.depth();
    if (projection->weight.size(0) != cfg.d_prime * d_k)
        throw UsageError("compute_cross_attention: projection does not match the feature depth of layer " +
                         std::to_string(tap.layer_index));
    auto q = projection->forward(z_prime).view({n, cfg.d_prime, d_k});
    auto k = tap.features.flatten(2); // [N, d_k, s]
    auto scores = torch::bmm(q, k) / std::sqrt(static_cast<double>(d_k));
    tap.attention = attention_from_scores(scores);
    return tap;
}

ProgressionMask build_progression_mask(const torch::Tensor& x_b, const torch::Tensor& x_f,
                                       std::span<const std::pair<int64_t, int64_t>> tap_shapes) {
    if (!x_b.sizes().equals(x_f.sizes()) || x_b.dim() != 4)
        throw UsageError("build_progression_mask: x_b and x_f must share one [N, 1, H, W] shape");
    torch::NoGradGuard no_grad;
    ProgressionMask mask;
    auto residual = (x_f - x_b).abs();
    auto peak = residual.amax({1, 2, 3});
    mask.degenerate = peak == 0;
    auto safe = torch::where(mask.degenerate, torch::ones_like(peak), peak).view({-1, 1, 1, 1});
    mask.full = residual / safe;
    for (const auto& [h, w] : tap_shapes) {
        auto pooled = torch::adaptive_avg_pool2d(mask.full, {h, w});
        auto pooled_peak = pooled.amax({1, 2, 3});
        auto denom = torch::where(pooled_peak > 0, pooled_peak, torch::ones_like(pooled_peak)).view({-1, 1, 1, 1});
        mask.per_tap.push_back(pooled / denom);
    }
    return mask;
}

ProgressionMask build_progression_mask(const ImageGrid& x_b, const ImageGrid& x_f,
                                       std::span<const std::pair<int64_t, int64_t>> tap_shapes) {
    if (!x_b.same_shape(x_f))
        throw UsageError("build_progression_mask: x_b and x_f shapes differ");
    return build_progression_mask(to_tensor(x_b), to_tensor(x_f), tap_shapes);
}

namespace {

// Unit vectors along the last axis; zero rows stay zero.
torch::Tensor safe_unit(const torch::Tensor& x, const torch::Tensor& norms) {
    auto denom = torch::where(norms > 0, norms, torch::ones_like(norms));
    return x / denom.unsqueeze(-1);
}

struct CosineDistance : public torch::autograd::Function<CosineDistance> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& a, const torch::Tensor& m) {
        auto na = a.norm(2, 1);
        auto nm = m.norm(2, 1);
        auto dot = (a * m).sum(1);
        ctx->save_for_backward({a, m});
        return 1 - dot / (na * nm + kCosineEps);
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        const auto saved = ctx->get_saved_variables();
        const auto& a = saved[0];
        const auto& m = saved[1];
        auto na = a.norm(2, 1);
        auto nm = m.norm(2, 1);
        auto dot = (a * m).sum(1);
        auto den = na * nm + kCosineEps;
        // d cos / d a = m / den - dot * |m| * a_hat / den^2, symmetric for m.
        auto g = -grad_outputs[0] / den;
        auto ratio = (dot / den).unsqueeze(1);
        auto grad_a = g.unsqueeze(1) * (m - ratio * nm.unsqueeze(1) * safe_unit(a, na));
        auto grad_m = g.unsqueeze(1) * (a - ratio * na.unsqueeze(1) * safe_unit(m, nm));
        return {grad_a, grad_m};
    }
};

struct ChannelCosineSq : public torch::autograd::Function<ChannelCosineSq> {
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& att) {
        auto n = att.norm(2, 2);                                 // [N, k]
        auto gram = torch::bmm(att, att.transpose(1, 2));        // [N, k, k]
        auto den = n.unsqueeze(2) * n.unsqueeze(1) + kCosineEps; // [N, k, k]
        auto off = 1 - torch::eye(att.size(1), att.options()).unsqueeze(0);
        auto cos = gram / den * off;
        ctx->save_for_backward({att});
        return cos.pow(2).sum({1, 2});
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        const auto att = ctx->get_saved_variables()[0];
        auto n = att.norm(2, 2);
        auto gram = torch::bmm(att, att.transpose(1, 2));
        auto den = n.unsqueeze(2) * n.unsqueeze(1) + kCosineEps;
        auto off = 1 - torch::eye(att.size(1), att.options()).unsqueeze(0);
        auto cos = gram / den * off;
        // dL/dA_i = 4 sum_{j != i} cos_ij (A_j / den_ij - gram_ij |A_j| a_hat_i / den_ij^2)
        auto w = cos / den;
        auto term_pairs = torch::bmm(w, att);
        auto coef = (w * gram * n.unsqueeze(1) / den).sum(2, true);
        auto grad = 4 * (term_pairs - coef * safe_unit(att, n));
        return {grad_outputs[0].view({-1, 1, 1}) * grad};
    }
};

void require_attention(std::span<const AttentionTap> taps) {
    if (taps.empty())
        throw UsageError("attention losses need at least one tap");
    for (const auto& tap : taps) {
        if (!tap.attention.defined())
            throw UsageError("tap " + std::to_string(tap.layer_index) + " has no attention; run compute_cross_attention");
    }
}

} // namespace

torch::Tensor cosine_distance(const torch::Tensor& a, const torch::Tensor& m) {
    if (a.dim() != 2 || !a.sizes().equals(m.sizes()))
        throw UsageError("cosine_distance: expected two [N, s] tensors");
    return CosineDistance::apply(a, m);
}

torch::Tensor channel_cosine_sq_sum(const torch::Tensor& attention) {
    if (attention.dim() != 3)
        throw UsageError("channel_cosine_sq_sum: expected [N, k, s]");
    return ChannelCosineSq::apply(attention);
}

torch::Tensor attention_alignment_loss(std::span<const AttentionTap> taps, const ProgressionMask& mask) {
    require_attention(taps);
    if (mask.per_tap.size() < taps.size())
        throw UsageError("attention_alignment_loss: mask has fewer resolutions than taps");
    torch::Tensor loss;
    for (size_t l = 0; l < taps.size(); ++l) {
        const auto& tap = taps[l];
        const auto& pooled = mask.per_tap[l];
        if (pooled.size(2) != tap.height() || pooled.size(3) != tap.width())
            throw UsageError("attention_alignment_loss: mask resolution does not match tap " +
                             std::to_string(tap.layer_index));
        auto averaged = tap.attention.mean(1);                         // [N, s]
        auto target = pooled.flatten(1).to(averaged.scalar_type()); // [N, s]
        auto term = cosine_distance(averaged, target);
        loss = loss.defined() ? loss + term : term;
    }
    return loss / static_cast<double>(taps.size());
}

torch::Tensor attention_imax_loss(std::span<const AttentionTap> taps) {
    require_attention(taps);
    torch::Tensor loss;
    for (const auto& tap : taps) {
        if (tap.attention.size(1) < 2)
            throw UsageError("attention_imax_loss needs at least two attention channels");
        auto term = channel_cosine_sq_sum(tap.attention);
        loss = loss.defined() ? loss + term : term;
    }
    return loss / static_cast<double>(taps.size());
}

torch::Tensor reconstruction_loss(const torch::Tensor& x_f, const torch::Tensor& x0_hat) {
    if (!x_f.sizes().equals(x0_hat.sizes()))
        throw UsageError("reconstruction_loss: shape mismatch");
    return (x_f - x0_hat).pow(2).flatten(1).mean(1);
}

double reconstruction_loss(const ImageGrid& x_f, const ImageGrid& x0_hat) {
    if (!x_f.same_shape(x0_hat))
        throw UsageError("reconstruction_loss: shape mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < x_f.pixels.size(); ++i) {
        const double diff = static_cast<double>(x_f.pixels[i]) - static_cast<double>(x0_hat.pixels[i]);
        sum += diff * diff;
    }
    return sum / static_cast<double>(x_f.pixels.size());
}

LossBreakdown make_breakdown(double l_imax, double l_align, double l_mse, const LossWeights& lambdas) {
    LossBreakdown out;
    out.l_attn_imax = l_imax;
    out.l_attn_align = l_align;
    out.l_mse = l_mse;
    out.lambdas = lambdas;
    out.total = lambdas.imax * l_imax + lambdas.align * l_align + lambdas.mse * l_mse;
    return out;
}

BatchLoss total_loss(std::span<const AttentionTap> taps, const ProgressionMask& mask, const torch::Tensor& x_f,
                     const torch::Tensor& x0_hat, const LossWeights& lambdas, const torch::Tensor& attention_active) {
    if (lambdas.imax < 0 || lambdas.align < 0 || lambdas.mse < 0)
        throw UsageError("loss weights must be non-negative");
    const auto n = x_f.size(0);
    auto active = attention_active.defined() ? attention_active.to(torch::kBool)
                                             : torch::ones({n}, torch::TensorOptions().dtype(torch::kBool));
    auto degenerate = mask.degenerate.to(torch::kBool);
    auto align_active = active.logical_and(degenerate.logical_not());

    auto mse = reconstruction_loss(x_f, x0_hat);
    auto zeros = torch::zeros_like(mse);
    auto imax = torch::where(active, attention_imax_loss(taps).to(mse.scalar_type()), zeros);
    auto align = torch::where(align_active, attention_alignment_loss(taps, mask).to(mse.scalar_type()), zeros);

    auto mse_mean = mse.mean();
    auto imax_mean = imax.mean();
    auto align_mean = align.mean();
    BatchLoss out;
    out.total = lambdas.imax * imax_mean + lambdas.align * align_mean + lambdas.mse * mse_mean;
    out.breakdown = make_breakdown(imax_mean.item<double>(), align_mean.item<double>(), mse_mean.item<double>(), lambdas);
    out.breakdown.skipped_alignment_count = active.logical_and(degenerate).sum().item<int64_t>();
    out.breakdown.skipped_alignment = out.breakdown.skipped_alignment_count > 0;
    return out;
}

} // namespace acd
