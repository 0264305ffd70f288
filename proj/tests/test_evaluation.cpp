#include "acd/errors.hpp"
#include "acd/evaluation.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace acd;
namespace fs = std::filesystem;

namespace {

ImageGrid random_image(std::mt19937& rng, int64_t h, int64_t w) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    ImageGrid img(h, w);
    for (auto& p : img.pixels)
        p = u(rng);
    return img;
}

// Direct windowed SSIM: explicit 2D Gaussian weights over a symmetrically
// padded copy of each image.
double ssim_oracle(const ImageGrid& a, const ImageGrid& b) {
    const int r = 5;
    const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
    double wsum = 0;
    double w2[11][11];
    for (int i = -r; i <= r; ++i)
        for (int j = -r; j <= r; ++j) {
            w2[i + r][j + r] = std::exp(-(i * i + j * j) / (2 * sigma * sigma));
            wsum += w2[i + r][j + r];
        }
    const int64_t h = a.height, w = a.width;
    auto padded = [&](const ImageGrid& img) {
        std::vector<std::vector<double>> p(static_cast<size_t>(h + 2 * r), std::vector<double>(static_cast<size_t>(w + 2 * r)));
        auto mirror = [](int64_t i, int64_t n) {
            // ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
            if (i < 0)
                return -i - 1;
            if (i >= n)
                return 2 * n - i - 1;
            return i;
        };
        for (int64_t y = -r; y < h + r; ++y)
            for (int64_t x = -r; x < w + r; ++x)
                p[static_cast<size_t>(y + r)][static_cast<size_t>(x + r)] = img.at(mirror(y, h), mirror(x, w));
        return p;
    };
    const auto pa = padded(a), pb = padded(b);
    double total = 0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = -r; i <= r; ++i)
                for (int j = -r; j <= r; ++j) {
                    const double k = w2[i + r][j + r] / wsum;
                    const double va = pa[static_cast<size_t>(y + r + i)][static_cast<size_t>(x + r + j)];
                    const double vb = pb[static_cast<size_t>(y + r + i)][static_cast<size_t>(x + r + j)];
                    mx += k * va;
                    my += k * vb;
                    xx += k * va * va;
                    yy += k * vb * vb;
                    xy += k * va * vb;
                }
            const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
            total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    return total / double(h * w);
}

FeatureMatrix gaussian_samples(std::mt19937& rng, int n, const std::vector<double>& mean, const std::vector<double>& sd) {
    std::normal_distribution<double> g(0.0, 1.0);
    FeatureMatrix m(n, static_cast<Eigen::Index>(mean.size()));
    for (int i = 0; i < n; ++i)
        for (size_t j = 0; j < mean.size(); ++j)
            m(i, static_cast<Eigen::Index>(j)) = mean[j] + sd[j] * g(rng);
    return m;
}

PhantomConfig eval_phantom() {
    PhantomConfig c;
    c.train_subjects = 3;
    c.test_subjects = 6;
    return c;
}

} // namespace

TEST_SUITE("evaluation") {

TEST_CASE("psnr closed forms") {
    const auto a = ImageGrid::constant(8, 8, 0.3f);
    CHECK(psnr(a, a) == kPsnrCapDb);
    const auto b = ImageGrid::constant(8, 8, 0.4f);
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
    CHECK(mse(a, b) == doctest::Approx(0.01).epsilon(1e-5));
    const auto zero = ImageGrid::constant(8, 8, 0.0f);
    const auto one = ImageGrid::constant(8, 8, 1.0f);
    CHECK(psnr(zero, one) == doctest::Approx(0.0));
}

TEST_CASE("ssim closed forms") {
    std::mt19937 rng(3);
    const auto img = random_image(rng, 16, 16);
    CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-12));
    const double c1 = 1e-4;
    CHECK(ssim(ImageGrid::constant(16, 16, 0.0f), ImageGrid::constant(16, 16, 1.0f)) ==
          doctest::Approx(c1 / (1 + c1)).epsilon(1e-9));
    CHECK_THROWS_AS(ssim(ImageGrid(4, 4), ImageGrid(4, 5)), UsageError);
}

TEST_CASE("ssim matches a direct windowed computation") {
    std::mt19937 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = random_image(rng, 12 + trial, 20 - trial);
        auto b = a;
        std::normal_distribution<float> noise(0.0f, 0.1f * float(trial + 1) / 10.0f);
        for (auto& p : b.pixels)
            p = std::clamp(p + noise(rng), 0.0f, 1.0f);
        CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-9));
        CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    }
}

TEST_CASE("frechet distance") {
    std::mt19937 rng(5);
    const auto a = gaussian_samples(rng, 400, {0, 0, 0}, {1, 1, 1});
    CHECK(std::abs(frechet_distance(a, a)) < 1e-6);

    // Against exact moments: |mu_a - mu_b|^2 + sum (s_a - s_b)^2 for diagonal covariances.
    const auto b = gaussian_samples(rng, 20000, {1, 0, 0}, {2, 1, 0.5});
    const auto c = gaussian_samples(rng, 20000, {0, 0, 0}, {1, 1, 1});
    const double expected = 1.0 + 1.0 + 0.0 + 0.25;
    CHECK(frechet_distance(b, c) == doctest::Approx(expected).epsilon(0.05));

    FeatureMatrix shifted = a;
    shifted.col(1).array() += 3.0;
    CHECK(frechet_distance(a, shifted) == doctest::Approx(9.0).epsilon(1e-6));

    CHECK_THROWS_AS(frechet_distance(a.topRows(3), a), UsageError);
    CHECK_THROWS_AS(frechet_distance(a, a.leftCols(2)), UsageError);
}

TEST_CASE("feature extractors") {
    std::vector<ImageGrid> imgs{ImageGrid(8, 8), ImageGrid(8, 8)};
    for (int64_t i = 0; i < 64; ++i)
        imgs[1].pixels[static_cast<size_t>(i)] = float(i);
    const auto f = pooled_pixel_features(imgs);
    CHECK(f.rows() == 2);
    CHECK(f.cols() == 4);
    CHECK(f(0, 0) == 0.0);
    // block means of 8 * row + col
    CHECK(f(1, 0) == doctest::Approx(8 * 1.5 + 1.5));
    CHECK(f(1, 3) == doctest::Approx(8 * 5.5 + 5.5));
    CHECK_THROWS_AS(make_feature_extractor("inception", nullptr), UsageError);
    CHECK_THROWS_AS(make_feature_extractor("latent", nullptr), UsageError);
}

TEST_CASE("stacking slices") {
    std::vector<ImageGrid> slices;
    for (int c = 0; c < 3; ++c)
        slices.push_back(ImageGrid::constant(4, 5, float(c)));
    const auto v = stack_slices(slices, 3);
    CHECK(v.depth == 3);
    CHECK(v.at(2, 4, 1) == 1.0f);
    CHECK(v.slice(2).pixels == slices[2].pixels);
    CHECK_THROWS_AS(stack_slices(slices, 4), UsageError);
}

TEST_CASE("segmentation recovers phantom region volumes") {
    const auto cfg = eval_phantom();
    const auto ds = generate_dataset(cfg);
    for (const auto& subject : ds.test) {
        for (const auto& scan : subject.scans) {
            const auto counts = segment_regions(scan.volume, scan.labels, cfg);
            for (size_t r = 0; r < kMeasuredRegions.size(); ++r) {
                const auto truth = double(scan.labels.count(static_cast<uint8_t>(kMeasuredRegions[r])));
                REQUIRE(truth > 0);
                INFO(subject.subject_id << " " << region_name(kMeasuredRegions[r]) << " " << counts[r]);
                CHECK(std::abs(double(counts[r]) - truth) <= 0.02 * truth);
            }
        }
    }
    const Volume zeros(cfg.height, cfg.width, cfg.depth, 0.0f);
    const auto none = segment_regions(zeros, ds.test[0].scans[0].labels, cfg);
    CHECK(none[0] == 0);
    CHECK(none[1] == 0);
    CHECK(none[2] == 0);
}

TEST_CASE("volumetric mae") {
    CHECK(volumetric_mae(100, 110, 105) == doctest::Approx(0.05));
    CHECK(volumetric_mae(100, 110, 110) == 0.0);
    CHECK(volumetric_mae(100, 90, 100) == doctest::Approx(0.1));
    for (double k : {0.5, 3.0, 17.0})
        CHECK(volumetric_mae(100 * k, 131 * k, 118 * k) == doctest::Approx(volumetric_mae(100, 131, 118)));
    CHECK_THROWS_AS(volumetric_mae(0, 1, 1), DataError);
}

TEST_CASE("summaries use the sample standard deviation") {
    const double v[] = {1.0, 2.0, 3.0, 4.0};
    const auto s = summarize(v);
    CHECK(s.count == 4);
    CHECK(s.mean == doctest::Approx(2.5));
    CHECK(s.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(summarize(std::span<const double>{}).count == 0);
}

TEST_CASE("perfect predictions score at the bounds") {
    const auto cfg = eval_phantom();
    const auto ds = generate_dataset(cfg);
    const auto pairs = evaluation_pairs(ds.test, 0);
    int64_t expected_pairs = 0;
    for (const auto& s : ds.test)
        expected_pairs += int64_t(s.scans.size() * (s.scans.size() - 1) / 2);
    REQUIRE(int64_t(pairs.size()) == expected_pairs);
    CHECK(evaluation_pairs(ds.test, 1).size() == ds.test.size());

    std::vector<std::vector<ImageGrid>> predicted;
    for (const auto& p : pairs) {
        const auto& vol = ds.test[p.subject].scans[size_t(p.follow_up_scan)].volume;
        std::vector<ImageGrid> slices;
        for (int64_t c = 0; c < vol.depth; ++c)
            slices.push_back(vol.slice(c));
        predicted.push_back(std::move(slices));
    }
    const auto report =
        score_predictions(ds.test, pairs, predicted, cfg, make_feature_extractor("pooled_pixels", nullptr), "pooled_pixels");
    CHECK(report.pairs.size() == pairs.size() * size_t(cfg.depth));
    CHECK(report.volumes.size() == pairs.size() * 3);
    for (const auto& rec : report.pairs) {
        CHECK(rec.psnr_db == kPsnrCapDb);
        CHECK(rec.ssim == doctest::Approx(1.0));
        CHECK(rec.mse == 0.0);
    }
    for (const auto& rec : report.volumes)
        CHECK(rec.mae == 0.0);
    REQUIRE(report.groups.size() == 2);
    CHECK(report.groups[0].group == "CN");
    CHECK(report.groups[1].group == "MCI&AD");

    // Aggregates are reproducible from the per-record rows.
    for (const auto& g : report.groups) {
        std::vector<double> ps;
        for (const auto& rec : report.pairs)
            if ((rec.disease == DiseaseState::CN) == (g.group == "CN"))
                ps.push_back(rec.psnr_db);
        CHECK(g.psnr_db.count == int64_t(ps.size()));
        CHECK(g.psnr_db.mean == doctest::Approx(summarize(ps).mean));
        CHECK(g.volumetric_mae[0].mean == 0.0);
        // pooled features are 64-dimensional; too few slices leaves a note instead
        if (g.fid_proxy)
            CHECK(std::abs(*g.fid_proxy) < 1e-6);
        else
            CHECK_FALSE(g.fid_note.empty());
    }

    const auto dir = fs::temp_directory_path() / "acd_eval_report";
    fs::remove_all(dir);
    write_report(report, dir / "report.json");
    CHECK(fs::exists(dir / "report.pairs.tsv"));
    CHECK(fs::exists(dir / "report.volumes.tsv"));
    std::ifstream in(dir / "report.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["pairs"].size() == report.pairs.size());
    CHECK(j["groups"][0]["volumetric_mae"].contains("hippocampus"));
    const auto cmp = compare_reports(report, "a", report, "b");
    CHECK_FALSE(cmp.empty());
    fs::remove_all(dir);

    const std::vector<std::vector<ImageGrid>> wrong(pairs.size());
    CHECK_THROWS_AS(score_predictions(ds.test, pairs, wrong, cfg, pooled_pixel_features, "pooled_pixels"), UsageError);
}

TEST_CASE("eval config validation") {
    EvalConfig c;
    CHECK_NOTHROW(c.validate());
    c.fid_extractor = "inception";
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = EvalConfig{};
    c.max_pairs_per_subject = -1;
    CHECK_THROWS_AS(c.validate(), UsageError);
}

}
