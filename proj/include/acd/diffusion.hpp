#pragma once

#include "acd/image.hpp"

#include <torch/torch.h>

#include <string>
#include <vector>

namespace acd {

// Cumulative signal coefficients alpha[0..T], alpha[0] = 1 and strictly
// decreasing afterwards, so that x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps.
class NoiseSchedule {
public:
    NoiseSchedule(std::string name, std::vector<double> alpha);

    int steps() const { return static_cast<int>(alpha_.size()) - 1; }
    double alpha(int t) const;
    const std::vector<double>& alphas() const { return alpha_; }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::vector<double> alpha_;
};

// "linear": betas evenly spaced in [1e-4, 0.02]; "cosine": squared-cosine
// cumulative form with offset 0.008, per-step betas clipped to 0.999.
NoiseSchedule make_schedule(const std::string& name, int T);

struct StepIndexPair {
    int t_from;
    int t_to;
};

void validate(const StepIndexPair& pair, const NoiseSchedule& sched);

// Batched forms operate on [N, C, H, W] tensors; `t` is an int64 tensor of
// shape [N] holding one step per sample.
torch::Tensor forward_diffuse(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& sched);
torch::Tensor forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& sched);
ImageGrid forward_diffuse(const ImageGrid& x0, int t, const ImageGrid& eps, const NoiseSchedule& sched);

// Deterministic (zero-variance) reverse update from t_from to t_to given a
// clean-image prediction. t_to may skip steps.
torch::Tensor ddim_reverse_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, StepIndexPair pair,
                                const NoiseSchedule& sched);
ImageGrid ddim_reverse_step(const ImageGrid& x_t, const ImageGrid& x0_hat, StepIndexPair pair,
                            const NoiseSchedule& sched);

// Uniform-stride decreasing subsequence T = s_0 > s_1 > ... > s_{T_s} = 0.
std::vector<int> inference_timesteps(int T, int T_s);

// Bounds applied to x0 predictions inside the sampler.
inline constexpr float kPredictionClampLow = -1.0f;
inline constexpr float kPredictionClampHigh = 2.0f;

} // namespace acd
