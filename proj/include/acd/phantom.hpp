#pragma once

#include "acd/attributes.hpp"
#include "acd/image.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace acd {

// Label values stored in region volumes.
enum class Region : uint8_t { Outside = 0, Tissue = 1, Ventricle = 2, Hippocampus = 3, Amygdala = 4 };

struct IntensityBand {
    float low;
    float high;
    bool contains(float v) const { return v >= low && v <= high; }
};

struct PhantomConfig {
    int height = 32;
    int width = 32;
    int depth = 16;
    int train_subjects = 200;
    int test_subjects = 60;
    int min_scans = 2;
    int max_scans = 3;
    double interval_mean = 2.93;
    double interval_sd = 1.35;
    double interval_min = 1.0;
    double interval_max = 6.0;
    // Relative ventricle radius growth and subcortical radius shrinkage per
    // year since age 63, indexed by DiseaseState (CN, MCI, AD).
    std::array<double, 3> ventricle_growth{0.010, 0.020, 0.035};
    std::array<double, 3> atrophy{0.005, 0.010, 0.020};
    float tissue_intensity = 0.40f;
    float ventricle_intensity = 0.10f;
    float hippocampus_intensity = 0.60f;
    float amygdala_intensity = 1.00f;
    float texture_amplitude = 0.03f;
    IntensityBand ventricle_band{0.05f, 0.25f};
    IntensityBand hippocampus_band{0.50f, 0.69f};
    IntensityBand amygdala_band{0.70f, 1.00f};
    IntensityBand tissue_band{0.26f, 0.49f};
    uint64_t seed = 7;

    void validate() const;
    IntensityBand band(Region region) const;
};

struct Scan {
    double age = 0.0;
    Volume volume;
    LabelVolume labels;
};

struct SubjectRecord {
    std::string subject_id;
    uint64_t identity_seed = 0;
    DiseaseState disease = DiseaseState::CN;
    std::vector<Scan> scans;
};

struct Dataset {
    PhantomConfig config;
    std::vector<SubjectRecord> train;
    std::vector<SubjectRecord> test;
};

// Renders one subject at each age. Ages must be strictly increasing within [63, 87].
SubjectRecord generate_subject(const std::string& subject_id, uint64_t identity_seed, DiseaseState disease,
                               std::span<const double> ages, const PhantomConfig& config);

// Train and test cohorts as a pure function of config (including its seed).
Dataset generate_dataset(const PhantomConfig& config);

struct PairSample {
    ImageGrid x_b;
    ImageGrid x_f;
    ProgressionAttributes attrs;
    std::string subject_id;
    DiseaseState disease = DiseaseState::CN;
    int slice_index = 0;
    double baseline_age = 0.0;
    double follow_up_age = 0.0;
};

enum class PairingPolicy { AllOrdered, FromFirstScan };
PairingPolicy parse_pairing_policy(const std::string& text);

std::vector<PairSample> build_pairs(std::span<const SubjectRecord> subjects, int age_bins,
                                    PairingPolicy policy = PairingPolicy::AllOrdered);

// One directory per subject holding manifest.json, scan_<k>.vol and scan_<k>.lab.
void write_subjects(std::span<const SubjectRecord> subjects, const std::filesystem::path& dir);
std::vector<SubjectRecord> read_subjects(const std::filesystem::path& dir);

// Dataset root: dataset.json plus train/ and test/ subject directories.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset read_dataset(const std::filesystem::path& root);

nlohmann::json to_json(const PhantomConfig& config);
PhantomConfig phantom_config_from_json(const nlohmann::json& j);

} // namespace acd
