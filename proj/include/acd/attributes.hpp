#pragma once

#include <torch/torch.h>

#include <span>
#include <string>
#include <vector>

namespace acd {

enum class DiseaseState { CN = 0, MCI = 1, AD = 2 };
inline constexpr int kDiseaseStates = 3;

std::string to_string(DiseaseState state);
DiseaseState parse_disease_state(const std::string& text);

// Cohort age range used for binning follow-up ages.
inline constexpr double kMinAge = 63.0;
inline constexpr double kMaxAge = 87.0;

// Uniform bins over [kMinAge, kMaxAge]; the upper edge falls in the last bin.
int age_to_bin(double age, int bins);

// One-hot age bin and one-hot disease state.
struct ProgressionAttributes {
    std::vector<float> age_bin;
    std::vector<float> disease_state;

    static ProgressionAttributes make(int age_bin_index, DiseaseState state, int bins);
    static ProgressionAttributes for_age(double target_age, DiseaseState state, int bins);

    // Throws UsageError unless each block holds exactly one 1 and zeros elsewhere.
    void validate() const;
    int age_bin_index() const;
    DiseaseState disease() const;
};

// Concatenated one-hots, [N, bins + 3].
torch::Tensor attributes_tensor(std::span<const ProgressionAttributes> attrs);

} // namespace acd
