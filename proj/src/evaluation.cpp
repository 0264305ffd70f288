#include "acd/evaluation.hpp"

#include "acd/alignment.hpp"
#include "acd/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>
#include <map>

namespace acd {

namespace fs = std::filesystem;

double mse(const ImageGrid& a, const ImageGrid& b) { return reconstruction_loss(a, b); }

double psnr(const ImageGrid& a, const ImageGrid& b) {
    const double err = mse(a, b);
    if (err == 0.0)
        return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / err));
}

namespace {

constexpr int kSsimRadius = 5;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

std::array<double, 2 * kSsimRadius + 1> gaussian_taps() {
    std::array<double, 2 * kSsimRadius + 1> w{};
    double sum = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
        w[static_cast<size_t>(i + kSsimRadius)] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
        sum += w[static_cast<size_t>(i + kSsimRadius)];
    }
    for (auto& v : w)
        v /= sum;
    return w;
}

// Half-sample symmetric reflection: -1 -> 0, n -> n-1.
int64_t reflect(int64_t i, int64_t n) {
    while (i < 0 || i >= n) {
        if (i < 0)
            i = -i - 1;
        if (i >= n)
            i = 2 * n - i - 1;
    }
    return i;
}

std::vector<double> gaussian_filter(const std::vector<double>& img, int64_t h, int64_t w) {
    static const auto taps = gaussian_taps();
    std::vector<double> rows(img.size()), out(img.size());
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int k = -kSsimRadius; k <= kSsimRadius; ++k)
                acc += taps[static_cast<size_t>(k + kSsimRadius)] * img[static_cast<size_t>(r * w + reflect(c + k, w))];
            rows[static_cast<size_t>(r * w + c)] = acc;
        }
    }
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int k = -kSsimRadius; k <= kSsimRadius; ++k)
                acc += taps[static_cast<size_t>(k + kSsimRadius)] * rows[static_cast<size_t>(reflect(r + k, h) * w + c)];
            out[static_cast<size_t>(r * w + c)] = acc;
        }
    }
    return out;
}

} // namespace

double ssim(const ImageGrid& a, const ImageGrid& b) {
    if (!a.same_shape(b))
        throw UsageError("ssim: shape mismatch");
    if (a.size() == 0)
        throw UsageError("ssim: empty image");
    const size_t n = a.pixels.size();
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (size_t i = 0; i < n; ++i) {
        x[i] = a.pixels[i];
        y[i] = b.pixels[i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = gaussian_filter(x, a.height, a.width);
    const auto my = gaussian_filter(y, a.height, a.width);
    const auto sxx = gaussian_filter(xx, a.height, a.width);
    const auto syy = gaussian_filter(yy, a.height, a.width);
    const auto sxy = gaussian_filter(xy, a.height, a.width);
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        total += (2 * mx[i] * my[i] + kSsimC1) * (2 * cov + kSsimC2) /
                 ((mx[i] * mx[i] + my[i] * my[i] + kSsimC1) * (vx + vy + kSsimC2));
    }
    return total / static_cast<double>(n);
}

FeatureMatrix pooled_pixel_features(std::span<const ImageGrid> images) {
    if (images.empty())
        return FeatureMatrix(0, 0);
    const int64_t h = images[0].height, w = images[0].width;
    if (h % 4 != 0 || w % 4 != 0)
        throw UsageError("pooled pixel features need sides divisible by 4");
    const int64_t ph = h / 4, pw = w / 4;
    FeatureMatrix out(static_cast<Eigen::Index>(images.size()), ph * pw);
    for (size_t i = 0; i < images.size(); ++i) {
        if (images[i].height != h || images[i].width != w)
            throw UsageError("pooled pixel features: images differ in shape");
        for (int64_t r = 0; r < ph; ++r) {
            for (int64_t c = 0; c < pw; ++c) {
                double acc = 0.0;
                for (int dr = 0; dr < 4; ++dr)
                    for (int dc = 0; dc < 4; ++dc)
                        acc += images[i].at(4 * r + dr, 4 * c + dc);
                out(static_cast<Eigen::Index>(i), r * pw + c) = acc / 16.0;
            }
        }
    }
    return out;
}

FeatureExtractor make_feature_extractor(const std::string& name, AlignCdae* model) {
    if (name == "pooled_pixels")
        return pooled_pixel_features;
    if (name == "latent") {
        if (!model)
            throw UsageError("the latent feature extractor needs a model");
        return [model](std::span<const ImageGrid> images) {
            torch::NoGradGuard no_grad;
            (*model)->eval();
            FeatureMatrix out(static_cast<Eigen::Index>(images.size()), (*model)->config().d);
            constexpr size_t chunk = 64;
            for (size_t start = 0; start < images.size(); start += chunk) {
                const auto part = images.subspan(start, std::min(chunk, images.size() - start));
                auto z = encode_semantic(*model, to_tensor(part)).to(torch::kFloat64).contiguous();
                for (int64_t i = 0; i < z.size(0); ++i)
                    for (int64_t j = 0; j < z.size(1); ++j)
                        out(static_cast<Eigen::Index>(start) + i, j) = z[i][j].item<double>();
            }
            return out;
        };
    }
    throw UsageError("unknown feature extractor '" + name + "' (expected latent or pooled_pixels)");
}

namespace {

constexpr double kFrechetRidge = 1e-6;

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    const Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

} // namespace

double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.cols() != b.cols())
        throw UsageError("frechet_distance: feature widths differ");
    const auto k = a.cols();
    if (a.rows() < k + 1 || b.rows() < k + 1)
        throw UsageError("fid_proxy needs at least " + std::to_string(k + 1) + " samples per set (got " +
                         std::to_string(a.rows()) + " and " + std::to_string(b.rows()) + ")");
    auto moments = [k](const FeatureMatrix& x) {
        const Eigen::RowVectorXd mu = x.colwise().mean();
        const Eigen::MatrixXd centered = x.rowwise() - mu;
        Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
        cov += kFrechetRidge * Eigen::MatrixXd::Identity(k, k);
        return std::pair{mu, cov};
    };
    const auto [mu_a, cov_a] = moments(a);
    const auto [mu_b, cov_b] = moments(b);
    // Tr((S_a S_b)^{1/2}) = Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), a symmetric PSD form.
    const Eigen::MatrixXd root_a = psd_sqrt(cov_a);
    Eigen::MatrixXd inner = root_a * cov_b * root_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner, Eigen::EigenvaluesOnly);
    const double cross = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    return std::max(0.0, value);
}

double fid_proxy(std::span<const ImageGrid> set_a, std::span<const ImageGrid> set_b, const FeatureExtractor& extractor) {
    if (set_a.empty() || set_b.empty())
        throw UsageError("fid_proxy: empty image set");
    return frechet_distance(extractor(set_a), extractor(set_b));
}

Volume stack_slices(std::span<const ImageGrid> slices, int64_t depth) {
    if (static_cast<int64_t>(slices.size()) != depth)
        throw UsageError("stack_slices: expected " + std::to_string(depth) + " slices, got " +
                         std::to_string(slices.size()));
    if (slices.empty())
        throw UsageError("stack_slices: no slices");
    Volume vol(slices[0].height, slices[0].width, depth);
    for (int64_t c = 0; c < depth; ++c) {
        const auto& s = slices[static_cast<size_t>(c)];
        if (!s.same_shape(slices[0]))
            throw UsageError("stack_slices: slices differ in shape");
        std::copy(s.pixels.begin(), s.pixels.end(), vol.voxels.begin() + c * vol.height * vol.width);
    }
    return vol;
}

std::string region_name(Region region) {
    switch (region) {
    case Region::Outside:
        return "outside";
    case Region::Tissue:
        return "tissue";
    case Region::Ventricle:
        return "ventricle";
    case Region::Hippocampus:
        return "hippocampus";
    case Region::Amygdala:
        return "amygdala";
    }
    return "unknown";
}

RegionCounts segment_regions(const Volume& volume, const LabelVolume& priors, const PhantomConfig& config) {
    if (volume.height != priors.height || volume.width != priors.width || volume.depth != priors.depth)
        throw UsageError("segment_regions: volume and priors differ in shape");
    constexpr int radius = 2;
    std::vector<std::array<int, 3>> ball;
    for (int dz = -radius; dz <= radius; ++dz)
        for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx)
                if (dx * dx + dy * dy + dz * dz <= radius * radius)
                    ball.push_back({dy, dx, dz});

    RegionCounts counts{};
    std::vector<uint8_t> dilated(volume.voxels.size());
    for (size_t r = 0; r < kMeasuredRegions.size(); ++r) {
        const auto label = static_cast<uint8_t>(kMeasuredRegions[r]);
        const auto band = config.band(kMeasuredRegions[r]);
        std::fill(dilated.begin(), dilated.end(), uint8_t{0});
        for (int64_t z = 0; z < volume.depth; ++z)
            for (int64_t y = 0; y < volume.height; ++y)
                for (int64_t x = 0; x < volume.width; ++x) {
                    if (priors.at(y, x, z) != label)
                        continue;
                    for (const auto& [oy, ox, oz] : ball) {
                        const int64_t yy = y + oy, xx = x + ox, zz = z + oz;
                        if (yy < 0 || xx < 0 || zz < 0 || yy >= volume.height || xx >= volume.width ||
                            zz >= volume.depth)
                            continue;
                        dilated[static_cast<size_t>((zz * volume.height + yy) * volume.width + xx)] = 1;
                    }
                }
        int64_t count = 0;
        for (size_t i = 0; i < dilated.size(); ++i)
            count += dilated[i] && band.contains(volume.voxels[i]);
        counts[r] = count;
    }
    return counts;
}

double volumetric_mae(double v_b, double v_f, double v_f_hat) {
    if (!(v_b > 0))
        throw DataError("volumetric_mae: baseline region volume is zero");
    return std::abs((v_f_hat - v_b) / v_b - (v_f - v_b) / v_b);
}

void EvalConfig::validate() const {
    if (fid_extractor != "latent" && fid_extractor != "pooled_pixels")
        throw UsageError("eval config: unknown fid_extractor '" + fid_extractor + "'");
    if (max_pairs_per_subject < 0)
        throw UsageError("eval config: max_pairs_per_subject must be non-negative");
}

Summary summarize(std::span<const double> values) {
    Summary s;
    s.count = static_cast<int64_t>(values.size());
    if (values.empty())
        return s;
    double sum = 0.0;
    for (const double v : values)
        sum += v;
    s.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (const double v : values)
            ss += (v - s.mean) * (v - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

namespace {

std::string group_of(DiseaseState d) { return d == DiseaseState::CN ? "CN" : "MCI&AD"; }

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
    uint64_t x = seed;
    for (const uint64_t v : {a, b, c}) {
        x ^= v + 0x9e3779b97f4a7c15ull + (x << 6) + (x >> 2);
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        x ^= x >> 31;
    }
    return x;
}

std::vector<ImageGrid> scan_slices(const Scan& scan) {
    std::vector<ImageGrid> out;
    for (int64_t c = 0; c < scan.volume.depth; ++c)
        out.push_back(scan.volume.slice(c));
    return out;
}

} // namespace

std::vector<GroupAggregate> aggregate(std::span<const PairRecord> pairs, std::span<const VolumeRecord> volumes) {
    std::vector<GroupAggregate> out;
    for (const std::string group : {"CN", "MCI&AD"}) {
        std::vector<double> p, s, m;
        std::array<std::vector<double>, 3> v;
        for (const auto& rec : pairs) {
            if (group_of(rec.disease) != group)
                continue;
            p.push_back(rec.psnr_db);
            s.push_back(rec.ssim);
            m.push_back(rec.mse);
        }
        for (const auto& rec : volumes) {
            if (group_of(rec.disease) != group)
                continue;
            for (size_t r = 0; r < kMeasuredRegions.size(); ++r)
                if (kMeasuredRegions[r] == rec.region)
                    v[r].push_back(rec.mae);
        }
        if (p.empty() && v[0].empty())
            continue;
        GroupAggregate g;
        g.group = group;
        g.psnr_db = summarize(p);
        g.ssim = summarize(s);
        g.mse = summarize(m);
        for (size_t r = 0; r < 3; ++r)
            g.volumetric_mae[r] = summarize(v[r]);
        out.push_back(std::move(g));
    }
    return out;
}

std::vector<EvalPair> evaluation_pairs(std::span<const SubjectRecord> subjects, int max_pairs_per_subject) {
    std::vector<EvalPair> out;
    for (size_t s = 0; s < subjects.size(); ++s) {
        int taken = 0;
        const int scans = static_cast<int>(subjects[s].scans.size());
        for (int i = 0; i < scans; ++i)
            for (int j = i + 1; j < scans; ++j) {
                if (max_pairs_per_subject > 0 && taken >= max_pairs_per_subject)
                    continue;
                out.push_back({s, i, j});
                ++taken;
            }
    }
    return out;
}

MetricsReport score_predictions(std::span<const SubjectRecord> subjects, std::span<const EvalPair> pairs,
                                std::span<const std::vector<ImageGrid>> predicted, const PhantomConfig& phantom,
                                const FeatureExtractor& extractor, const std::string& extractor_name) {
    if (pairs.size() != predicted.size())
        throw UsageError("score_predictions: one prediction set per pair is required");
    if (pairs.empty())
        throw DataError("evaluation needs at least one test pair");
    MetricsReport report;
    report.fid_extractor = extractor_name;
    std::map<std::string, std::pair<std::vector<ImageGrid>, std::vector<ImageGrid>>> fid_sets;
    for (size_t k = 0; k < pairs.size(); ++k) {
        const auto& pair = pairs[k];
        const auto& subject = subjects[pair.subject];
        const auto& base = subject.scans.at(static_cast<size_t>(pair.baseline_scan));
        const auto& follow = subject.scans.at(static_cast<size_t>(pair.follow_up_scan));
        const auto real = scan_slices(follow);
        const auto& pred = predicted[k];
        if (pred.size() != real.size())
            throw UsageError("score_predictions: prediction for " + subject.subject_id + " has " +
                             std::to_string(pred.size()) + " slices, expected " + std::to_string(real.size()));
        auto& sets = fid_sets[group_of(subject.disease)];
        for (size_t c = 0; c < real.size(); ++c) {
            PairRecord rec{subject.subject_id, subject.disease, pair.baseline_scan, pair.follow_up_scan,
                           static_cast<int>(c), psnr(pred[c], real[c]), ssim(pred[c], real[c]), mse(pred[c], real[c])};
            report.pairs.push_back(std::move(rec));
            sets.first.push_back(pred[c]);
            sets.second.push_back(real[c]);
        }
        const auto stacked = stack_slices(pred, follow.volume.depth);
        const auto v_b = segment_regions(base.volume, base.labels, phantom);
        const auto v_f = segment_regions(follow.volume, base.labels, phantom);
        const auto v_hat = segment_regions(stacked, base.labels, phantom);
        for (size_t r = 0; r < kMeasuredRegions.size(); ++r) {
            VolumeRecord rec{subject.subject_id, subject.disease, pair.baseline_scan, pair.follow_up_scan,
                             kMeasuredRegions[r], v_b[r], v_f[r], v_hat[r], 0.0};
            if (v_b[r] == 0)
                throw DataError("subject " + subject.subject_id + " scan " + std::to_string(pair.baseline_scan) +
                                " has no segmented " + region_name(kMeasuredRegions[r]) + " voxels");
            rec.mae = volumetric_mae(static_cast<double>(v_b[r]), static_cast<double>(v_f[r]),
                                     static_cast<double>(v_hat[r]));
            report.volumes.push_back(rec);
        }
    }
    report.groups = aggregate(report.pairs, report.volumes);
    for (auto& g : report.groups) {
        const auto& sets = fid_sets[g.group];
        try {
            g.fid_proxy = fid_proxy(sets.first, sets.second, extractor);
        } catch (const UsageError& e) {
            g.fid_note = e.what();
        }
    }
    return report;
}

MetricsReport evaluate(AlignCdae& model, std::span<const SubjectRecord> subjects, const PhantomConfig& phantom,
                       const NoiseSchedule& sched, const InferenceConfig& inference, const EvalConfig& config) {
    config.validate();
    inference.validate(model->config(), sched.steps());
    const auto pairs = evaluation_pairs(subjects, config.max_pairs_per_subject);
    if (pairs.empty())
        throw DataError("evaluation needs at least one test pair");
    std::vector<std::vector<ImageGrid>> predicted;
    predicted.reserve(pairs.size());
    for (size_t k = 0; k < pairs.size(); ++k) {
        const auto& pair = pairs[k];
        const auto& subject = subjects[pair.subject];
        const auto& base = subject.scans[static_cast<size_t>(pair.baseline_scan)];
        const auto& follow = subject.scans[static_cast<size_t>(pair.follow_up_scan)];
        const auto x_b = scan_slices(base);
        const auto attrs = ProgressionAttributes::for_age(follow.age, subject.disease, model->config().age_bins);
        const std::vector<ProgressionAttributes> batch_attrs(x_b.size(), attrs);
        std::vector<uint64_t> seeds;
        for (size_t c = 0; c < x_b.size(); ++c)
            seeds.push_back(mix_seed(config.seed, pair.subject, static_cast<uint64_t>(pair.follow_up_scan), c));
        predicted.push_back(synthesize_follow_up(model, x_b, batch_attrs, sched, inference.steps, seeds));
    }
    return score_predictions(subjects, pairs, predicted, phantom, make_feature_extractor(config.fid_extractor, &model),
                             config.fid_extractor);
}

namespace {

nlohmann::json summary_json(const Summary& s) { return {{"n", s.count}, {"mean", s.mean}, {"sd", s.sd}}; }

} // namespace

nlohmann::json to_json(const GroupAggregate& g) {
    nlohmann::json j{{"group", g.group},
                     {"psnr_db", summary_json(g.psnr_db)},
                     {"ssim", summary_json(g.ssim)},
                     {"mse", summary_json(g.mse)}};
    for (size_t r = 0; r < kMeasuredRegions.size(); ++r)
        j["volumetric_mae"][region_name(kMeasuredRegions[r])] = summary_json(g.volumetric_mae[r]);
    j["fid_proxy"] = g.fid_proxy ? nlohmann::json(*g.fid_proxy) : nlohmann::json(nullptr);
    if (!g.fid_note.empty())
        j["fid_note"] = g.fid_note;
    return j;
}

nlohmann::json to_json(const MetricsReport& report) {
    nlohmann::json j;
    j["fid_extractor"] = report.fid_extractor;
    j["fid_note"] = "Frechet distance on " + report.fid_extractor +
                    " features; not comparable to Inception-based FID values";
    j["groups"] = nlohmann::json::array();
    for (const auto& g : report.groups)
        j["groups"].push_back(to_json(g));
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : report.pairs)
        j["pairs"].push_back({{"subject_id", p.subject_id},
                              {"disease", to_string(p.disease)},
                              {"baseline_scan", p.baseline_scan},
                              {"follow_up_scan", p.follow_up_scan},
                              {"slice", p.slice},
                              {"psnr_db", p.psnr_db},
                              {"ssim", p.ssim},
                              {"mse", p.mse}});
    j["volumes"] = nlohmann::json::array();
    for (const auto& v : report.volumes)
        j["volumes"].push_back({{"subject_id", v.subject_id},
                                {"disease", to_string(v.disease)},
                                {"baseline_scan", v.baseline_scan},
                                {"follow_up_scan", v.follow_up_scan},
                                {"region", region_name(v.region)},
                                {"v_b", v.v_b},
                                {"v_f", v.v_f},
                                {"v_f_hat", v.v_f_hat},
                                {"mae", v.mae}});
    return j;
}

void write_report(const MetricsReport& report, const fs::path& json_path) {
    if (json_path.has_parent_path())
        fs::create_directories(json_path.parent_path());
    auto open = [](const fs::path& p) {
        std::ofstream out(p);
        if (!out)
            throw DataError("cannot write " + p.string());
        return out;
    };
    {
        auto out = open(json_path);
        out << to_json(report).dump(2) << '\n';
    }
    auto stem = json_path;
    stem.replace_extension();
    {
        auto out = open(stem.string() + ".pairs.tsv");
        out << "subject_id\tdisease\tbaseline_scan\tfollow_up_scan\tslice\tpsnr_db\tssim\tmse\n";
        out.precision(10);
        for (const auto& p : report.pairs)
            out << p.subject_id << '\t' << to_string(p.disease) << '\t' << p.baseline_scan << '\t' << p.follow_up_scan
                << '\t' << p.slice << '\t' << p.psnr_db << '\t' << p.ssim << '\t' << p.mse << '\n';
    }
    {
        auto out = open(stem.string() + ".volumes.tsv");
        out << "subject_id\tdisease\tbaseline_scan\tfollow_up_scan\tregion\tv_b\tv_f\tv_f_hat\tmae\n";
        out.precision(10);
        for (const auto& v : report.volumes)
            out << v.subject_id << '\t' << to_string(v.disease) << '\t' << v.baseline_scan << '\t' << v.follow_up_scan
                << '\t' << region_name(v.region) << '\t' << v.v_b << '\t' << v.v_f << '\t' << v.v_f_hat << '\t'
                << v.mae << '\n';
    }
}

nlohmann::json compare_reports(const MetricsReport& a, const std::string& label_a, const MetricsReport& b,
                               const std::string& label_b) {
    nlohmann::json j;
    j["models"] = {label_a, label_b};
    j["fid_extractor"] = {a.fid_extractor, b.fid_extractor};
    j["groups"] = nlohmann::json::array();
    for (const auto& ga : a.groups) {
        nlohmann::json row{{"group", ga.group}, {label_a, to_json(ga)}};
        for (const auto& gb : b.groups)
            if (gb.group == ga.group)
                row[label_b] = to_json(gb);
        j["groups"].push_back(row);
    }
    return j;
}

} // namespace acd
