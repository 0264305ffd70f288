#pragma once

#include "acd/diffusion.hpp"
#include "acd/image.hpp"
#include "acd/inference.hpp"
#include "acd/networks.hpp"
#include "acd/phantom.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace acd {

inline constexpr double kPsnrCapDb = 100.0;

// Peak 1; identical images give kPsnrCapDb.
double psnr(const ImageGrid& a, const ImageGrid& b);
// Mean local SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// dynamic range 1, reflected borders.
double ssim(const ImageGrid& a, const ImageGrid& b);
double mse(const ImageGrid& a, const ImageGrid& b);

// Rows are samples.
using FeatureMatrix = Eigen::MatrixXd;
using FeatureExtractor = std::function<FeatureMatrix(std::span<const ImageGrid>)>;

// 4x4 average pooling of the raw pixels.
FeatureMatrix pooled_pixel_features(std::span<const ImageGrid> images);
// Semantic encoder outputs; the model must outlive the extractor.
FeatureExtractor make_feature_extractor(const std::string& name, AlignCdae* model);

// Frechet distance between Gaussian fits (covariance ridge 1e-6 I). Each set
// needs more rows than feature columns.
double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b);
double fid_proxy(std::span<const ImageGrid> set_a, std::span<const ImageGrid> set_b, const FeatureExtractor& extractor);

Volume stack_slices(std::span<const ImageGrid> slices, int64_t depth);

// Voxel counts indexed ventricle, hippocampus, amygdala.
using RegionCounts = std::array<int64_t, 3>;
inline constexpr std::array<Region, 3> kMeasuredRegions{Region::Ventricle, Region::Hippocampus, Region::Amygdala};
std::string region_name(Region region);

// Voxels within a radius-2 ball dilation of each baseline region whose
// intensity lies in that region's band.
RegionCounts segment_regions(const Volume& volume, const LabelVolume& priors, const PhantomConfig& config);

double volumetric_mae(double v_b, double v_f, double v_f_hat);

struct EvalConfig {
    std::string fid_extractor = "latent"; // or "pooled_pixels"
    int max_pairs_per_subject = 0;        // 0 keeps every ordered scan pair
    uint64_t seed = 0;

    void validate() const;
};

struct PairRecord {
    std::string subject_id;
    DiseaseState disease = DiseaseState::CN;
    int baseline_scan = 0;
    int follow_up_scan = 0;
    int slice = 0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double mse = 0.0;
};

struct VolumeRecord {
    std::string subject_id;
    DiseaseState disease = DiseaseState::CN;
    int baseline_scan = 0;
    int follow_up_scan = 0;
    Region region = Region::Ventricle;
    int64_t v_b = 0;
    int64_t v_f = 0;
    int64_t v_f_hat = 0;
    double mae = 0.0;
};

struct Summary {
    int64_t count = 0;
    double mean = 0.0;
    double sd = 0.0;
};
Summary summarize(std::span<const double> values);

struct GroupAggregate {
    std::string group; // "CN" or "MCI&AD"
    Summary psnr_db, ssim, mse;
    std::array<Summary, 3> volumetric_mae;
    std::optional<double> fid_proxy;
    std::string fid_note;
};

struct MetricsReport {
    std::string fid_extractor;
    std::vector<PairRecord> pairs;
    std::vector<VolumeRecord> volumes;
    std::vector<GroupAggregate> groups;
};

// Groups are recomputed from the records; fid values are supplied by the caller.
std::vector<GroupAggregate> aggregate(std::span<const PairRecord> pairs, std::span<const VolumeRecord> volumes);

// Synthesizes every slice of every evaluated scan pair, scores it against
// the real follow-up and measures region volumes of the stacked prediction.
MetricsReport evaluate(AlignCdae& model, std::span<const SubjectRecord> subjects, const PhantomConfig& phantom,
                       const NoiseSchedule& sched, const InferenceConfig& inference, const EvalConfig& config);

// Same report structure with predictions supplied directly: predicted[i]
// holds the D slices for the i-th evaluated pair of evaluation_pairs().
struct EvalPair {
    size_t subject = 0;
    int baseline_scan = 0;
    int follow_up_scan = 0;
};
std::vector<EvalPair> evaluation_pairs(std::span<const SubjectRecord> subjects, int max_pairs_per_subject);
MetricsReport score_predictions(std::span<const SubjectRecord> subjects, std::span<const EvalPair> pairs,
                                std::span<const std::vector<ImageGrid>> predicted, const PhantomConfig& phantom,
                                const FeatureExtractor& extractor, const std::string& extractor_name);

nlohmann::json to_json(const MetricsReport& report);
nlohmann::json to_json(const GroupAggregate& group);
// report.json plus pairs.tsv and volumes.tsv next to it.
void write_report(const MetricsReport& report, const std::filesystem::path& json_path);
// Side-by-side aggregates of two reports.
nlohmann::json compare_reports(const MetricsReport& a, const std::string& label_a, const MetricsReport& b,
                               const std::string& label_b);

} // namespace acd
