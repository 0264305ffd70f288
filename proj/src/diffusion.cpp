#include "acd/diffusion.hpp"

#include "acd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace acd {

NoiseSchedule::NoiseSchedule(std::string name, std::vector<double> alpha) : name_(std::move(name)), alpha_(std::move(alpha)) {
    if (alpha_.size() < 2)
        throw UsageError("noise schedule needs at least one diffusion step");
    if (alpha_[0] != 1.0)
        throw UsageError("noise schedule must start at alpha[0] = 1");
    for (size_t t = 1; t < alpha_.size(); ++t) {
        if (!(alpha_[t] > 0.0 && alpha_[t] <= 1.0))
            throw UsageError("alpha[" + std::to_string(t) + "] outside (0, 1]");
        if (t >= 2 && !(alpha_[t] < alpha_[t - 1]))
            throw UsageError("alpha must be strictly decreasing for t >= 1");
    }
}

double NoiseSchedule::alpha(int t) const {
    if (t < 0 || t > steps())
        throw UsageError("diffusion step " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
    return alpha_[static_cast<size_t>(t)];
}

NoiseSchedule make_schedule(const std::string& name, int T) {
    if (T < 1)
        throw UsageError("schedule length T must be >= 1, got " + std::to_string(T));
    std::vector<double> alpha(static_cast<size_t>(T) + 1, 1.0);
    if (name == "linear") {
        constexpr double beta_start = 1e-4;
        constexpr double beta_end = 0.02;
        for (int t = 1; t <= T; ++t) {
            const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
            const double beta = beta_start + frac * (beta_end - beta_start);
            alpha[static_cast<size_t>(t)] = alpha[static_cast<size_t>(t) - 1] * (1.0 - beta);
        }
    } else if (name == "cosine") {
        constexpr double offset = 0.008;
        auto f = [&](int t) {
            const double c = std::cos((static_cast<double>(t) / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
            return c * c;
        };
        const double f0 = f(0);
        for (int t = 1; t <= T; ++t) {
            const double ratio = (f(t) / f0) / (f(t - 1) / f0);
            const double beta = std::clamp(1.0 - ratio, 0.0, 0.999);
            alpha[static_cast<size_t>(t)] = alpha[static_cast<size_t>(t) - 1] * (1.0 - beta);
        }
    } else {
        throw UsageError("unknown noise schedule '" + name + "' (expected linear or cosine)");
    }
    return NoiseSchedule(name, std::move(alpha));
}

void validate(const StepIndexPair& pair, const NoiseSchedule& sched) {
    if (pair.t_from < 1 || pair.t_from > sched.steps())
        throw UsageError("t_from " + std::to_string(pair.t_from) + " outside [1, T]");
    if (pair.t_to < 0 || pair.t_to >= pair.t_from)
        throw UsageError("t_to must lie in [0, t_from)");
    if (sched.alpha(pair.t_from) >= 1.0)
        throw UsageError("alpha[t_from] = 1 makes the reverse step singular");
}

torch::Tensor forward_diffuse(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& sched) {
    if (!x0.sizes().equals(eps.sizes()))
        throw UsageError("forward_diffuse: x0 and eps shapes differ");
    if (t.dim() != 1 || t.size(0) != x0.size(0))
        throw UsageError("forward_diffuse: need one step per sample");
    auto t_cpu = t.to(torch::kCPU, torch::kLong).contiguous();
    auto signal = torch::empty({t.size(0)}, torch::kDouble);
    auto noise = torch::empty({t.size(0)}, torch::kDouble);
    for (int64_t i = 0; i < t.size(0); ++i) {
        const double a = sched.alpha(static_cast<int>(t_cpu.data_ptr<int64_t>()[i]));
        signal[i] = std::sqrt(a);
        noise[i] = std::sqrt(1.0 - a);
    }
    std::vector<int64_t> view(static_cast<size_t>(x0.dim()), 1);
    view[0] = x0.size(0);
    signal = signal.to(x0.scalar_type()).view(view);
    noise = noise.to(x0.scalar_type()).view(view);
    return signal * x0 + noise * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& sched) {
    if (!x0.sizes().equals(eps.sizes()))
        throw UsageError("forward_diffuse: x0 and eps shapes differ");
    const double a = sched.alpha(t);
    return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

ImageGrid forward_diffuse(const ImageGrid& x0, int t, const ImageGrid& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps))
        throw UsageError("forward_diffuse: x0 and eps shapes differ");
    const double a = sched.alpha(t);
    const double signal = std::sqrt(a);
    const double noise = std::sqrt(1.0 - a);
    ImageGrid out(x0.height, x0.width, 0.0f, t == 0 && x0.clean);
    for (size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = static_cast<float>(signal * x0.pixels[i] + noise * eps.pixels[i]);
    return out;
}

torch::Tensor ddim_reverse_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, StepIndexPair pair,
                                const NoiseSchedule& sched) {
    validate(pair, sched);
    if (!x_t.sizes().equals(x0_hat.sizes()))
        throw UsageError("ddim_reverse_step: x_t and x0_hat shapes differ");
    const double a_from = sched.alpha(pair.t_from);
    const double a_to = sched.alpha(pair.t_to);
    const auto eps_hat = (x_t - std::sqrt(a_from) * x0_hat) / std::sqrt(1.0 - a_from);
    return std::sqrt(a_to) * x0_hat + std::sqrt(1.0 - a_to) * eps_hat;
}

ImageGrid ddim_reverse_step(const ImageGrid& x_t, const ImageGrid& x0_hat, StepIndexPair pair,
                            const NoiseSchedule& sched) {
    validate(pair, sched);
    if (!x_t.same_shape(x0_hat))
        throw UsageError("ddim_reverse_step: x_t and x0_hat shapes differ");
    const double a_from = sched.alpha(pair.t_from);
    const double a_to = sched.alpha(pair.t_to);
    const double root_from = std::sqrt(a_from);
    const double noise_from = std::sqrt(1.0 - a_from);
    const double root_to = std::sqrt(a_to);
    const double noise_to = std::sqrt(1.0 - a_to);
    ImageGrid out(x_t.height, x_t.width, 0.0f, pair.t_to == 0);
    for (size_t i = 0; i < out.pixels.size(); ++i) {
        const double x0 = x0_hat.pixels[i];
        const double eps_hat = (x_t.pixels[i] - root_from * x0) / noise_from;
        out.pixels[i] = static_cast<float>(root_to * x0 + noise_to * eps_hat);
    }
    return out;
}

std::vector<int> inference_timesteps(int T, int T_s) {
    if (T < 1)
        throw UsageError("T must be >= 1");
    if (T_s < 1 || T_s > T)
        throw UsageError("T_s must lie in [1, " + std::to_string(T) + "], got " + std::to_string(T_s));
    std::vector<int> steps(static_cast<size_t>(T_s) + 1);
    for (int k = 0; k <= T_s; ++k) {
        // round(T * (T_s - k) / T_s), integer arithmetic keeps the ends exact
        steps[static_cast<size_t>(k)] =
            static_cast<int>((static_cast<int64_t>(T) * (T_s - k) * 2 + T_s) / (2 * static_cast<int64_t>(T_s)));
    }
    return steps;
}

} // namespace acd
