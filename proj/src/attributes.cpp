#include "acd/attributes.hpp"

#include "acd/errors.hpp"

#include <algorithm>
#include <cmath>

namespace acd {

std::string to_string(DiseaseState state) {
    switch (state) {
    case DiseaseState::CN:
        return "CN";
    case DiseaseState::MCI:
        return "MCI";
    case DiseaseState::AD:
        return "AD";
    }
    return "?";
}

DiseaseState parse_disease_state(const std::string& text) {
    if (text == "CN")
        return DiseaseState::CN;
    if (text == "MCI")
        return DiseaseState::MCI;
    if (text == "AD")
        return DiseaseState::AD;
    throw UsageError("unknown disease state '" + text + "' (expected CN, MCI or AD)");
}

int age_to_bin(double age, int bins) {
    if (bins < 1)
        throw UsageError("age bin count must be positive");
    if (!(age >= kMinAge && age <= kMaxAge))
        throw UsageError("age " + std::to_string(age) + " outside the cohort range [63, 87]");
    const double width = (kMaxAge - kMinAge) / bins;
    return std::min(bins - 1, static_cast<int>(std::floor((age - kMinAge) / width)));
}

ProgressionAttributes ProgressionAttributes::make(int age_bin_index, DiseaseState state, int bins) {
    if (age_bin_index < 0 || age_bin_index >= bins)
        throw UsageError("age bin " + std::to_string(age_bin_index) + " outside [0, " + std::to_string(bins) + ")");
    ProgressionAttributes attrs;
    attrs.age_bin.assign(static_cast<size_t>(bins), 0.0f);
    attrs.age_bin[static_cast<size_t>(age_bin_index)] = 1.0f;
    attrs.disease_state.assign(kDiseaseStates, 0.0f);
    attrs.disease_state[static_cast<size_t>(state)] = 1.0f;
    return attrs;
}

ProgressionAttributes ProgressionAttributes::for_age(double target_age, DiseaseState state, int bins) {
    return make(age_to_bin(target_age, bins), state, bins);
}

namespace {

int hot_index(const std::vector<float>& block, const char* what) {
    int index = -1;
    for (size_t i = 0; i < block.size(); ++i) {
        if (block[i] == 1.0f) {
            if (index >= 0)
                throw UsageError(std::string("malformed one-hot ") + what + ": more than one hot entry");
            index = static_cast<int>(i);
        } else if (block[i] != 0.0f) {
            throw UsageError(std::string("malformed one-hot ") + what + ": entries must be 0 or 1");
        }
    }
    if (index < 0)
        throw UsageError(std::string("malformed one-hot ") + what + ": no hot entry");
    return index;
}

} // namespace

void ProgressionAttributes::validate() const {
    hot_index(age_bin, "age bin");
    if (disease_state.size() != kDiseaseStates)
        throw UsageError("malformed one-hot disease state: expected 3 entries");
    hot_index(disease_state, "disease state");
}

int ProgressionAttributes::age_bin_index() const { return hot_index(age_bin, "age bin"); }

DiseaseState ProgressionAttributes::disease() const {
    return static_cast<DiseaseState>(hot_index(disease_state, "disease state"));
}

torch::Tensor attributes_tensor(std::span<const ProgressionAttributes> attrs) {
    if (attrs.empty())
        throw UsageError("attributes_tensor: empty batch");
    const auto bins = static_cast<int64_t>(attrs.front().age_bin.size());
    auto out = torch::zeros({static_cast<int64_t>(attrs.size()), bins + kDiseaseStates}, torch::kFloat32);
    auto acc = out.accessor<float, 2>();
    for (size_t n = 0; n < attrs.size(); ++n) {
        attrs[n].validate();
        if (static_cast<int64_t>(attrs[n].age_bin.size()) != bins)
            throw UsageError("attributes in one batch must share the age bin count");
        for (int64_t i = 0; i < bins; ++i)
            acc[static_cast<int64_t>(n)][i] = attrs[n].age_bin[static_cast<size_t>(i)];
        for (int64_t i = 0; i < kDiseaseStates; ++i)
            acc[static_cast<int64_t>(n)][bins + i] = attrs[n].disease_state[static_cast<size_t>(i)];
    }
    return out;
}

} // namespace acd
