#include "acd/phantom.hpp"

#include "acd/container.hpp"
#include "acd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

namespace acd {

namespace fs = std::filesystem;

void PhantomConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok)
            throw UsageError("phantom config: " + msg);
    };
    require(height >= 8 && width >= 8 && depth >= 1, "volume must be at least 8x8x1");
    require(train_subjects >= 0 && test_subjects >= 0, "subject counts must be non-negative");
    require(min_scans >= 2 && max_scans >= min_scans, "need 2 <= min_scans <= max_scans");
    require(interval_sd >= 0 && interval_min > 0 && interval_max >= interval_min, "invalid interval distribution");
    require(interval_max * (max_scans - 1) < kMaxAge - kMinAge, "scan intervals cannot fit in the age range");
    for (int s = 0; s < 3; ++s) {
        require(ventricle_growth[static_cast<size_t>(s)] >= 0, "ventricle growth rates must be non-negative");
        require(atrophy[static_cast<size_t>(s)] >= 0 && atrophy[static_cast<size_t>(s)] * (kMaxAge - kMinAge) < 0.9,
                "atrophy rates must keep regions non-empty");
    }
    require(ventricle_growth[0] < ventricle_growth[1] && ventricle_growth[1] < ventricle_growth[2],
            "ventricle growth must be ordered CN < MCI < AD");
    require(atrophy[0] < atrophy[1] && atrophy[1] < atrophy[2], "atrophy must be ordered CN < MCI < AD");
    require(texture_amplitude >= 0, "texture_amplitude must be non-negative");
}

IntensityBand PhantomConfig::band(Region region) const {
    switch (region) {
    case Region::Ventricle:
        return ventricle_band;
    case Region::Hippocampus:
        return hippocampus_band;
    case Region::Amygdala:
        return amygdala_band;
    case Region::Tissue:
        return tissue_band;
    case Region::Outside:
        break;
    }
    throw UsageError("no intensity band for the outside region");
}

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

struct Ellipsoid {
    double cx, cy, cz;
    double ax, ay, az;

    double radius2(double x, double y, double z) const {
        const double u = (x - cx) / ax;
        const double v = (y - cy) / ay;
        const double w = (z - cz) / az;
        return u * u + v * v + w * w;
    }
    bool contains(double x, double y, double z) const { return radius2(x, y, z) <= 1.0; }
};

struct Wave {
    double fx, fy, fz, phase;
};

// Everything that stays fixed across a subject's scans. Coordinates are
// normalized so the volume spans [-1, 1] along each axis.
struct Identity {
    double cx, cy;
    Ellipsoid head;
    std::array<double, 3> contour_amp;
    std::array<double, 3> contour_phase;
    double ventricle_scale, hippocampus_scale, amygdala_scale;
    std::array<Wave, 4> texture;
};

Identity sample_identity(uint64_t identity_seed) {
    std::mt19937_64 rng(splitmix64(identity_seed ^ 0x1d3a7c5eull));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    Identity id{};
    id.cx = uniform(-0.03, 0.03);
    id.cy = uniform(-0.03, 0.03);
    const double scale = uniform(0.94, 1.03);
    id.head = {id.cx, id.cy, 0.0, 0.80 * scale * uniform(0.97, 1.03), 0.88 * scale * uniform(0.97, 1.03), 1.15};
    for (size_t k = 0; k < 3; ++k) {
        id.contour_amp[k] = uniform(0.0, 0.03);
        id.contour_phase[k] = uniform(0.0, 2.0 * std::numbers::pi);
    }
    id.ventricle_scale = uniform(0.9, 1.1);
    id.hippocampus_scale = uniform(0.9, 1.1);
    id.amygdala_scale = uniform(0.9, 1.1);
    for (auto& w : id.texture)
        w = {uniform(-6.0, 6.0), uniform(-6.0, 6.0), uniform(-3.0, 3.0), uniform(0.0, 2.0 * std::numbers::pi)};
    return id;
}

struct Anatomy {
    Identity id;
    Ellipsoid ventricle;
    std::array<Ellipsoid, 2> hippocampus;
    std::array<Ellipsoid, 2> amygdala;

    bool in_head(double x, double y, double z) const {
        const double theta = std::atan2(y - id.cy, x - id.cx);
        double bound = 1.0;
        for (size_t k = 0; k < 3; ++k)
            bound += id.contour_amp[k] * std::cos(static_cast<double>(k + 2) * theta + id.contour_phase[k]);
        return id.head.radius2(x, y, z) <= bound * bound;
    }

    Region classify(double x, double y, double z) const {
        if (!in_head(x, y, z))
            return Region::Outside;
        if (ventricle.contains(x, y, z))
            return Region::Ventricle;
        for (const auto& h : hippocampus)
            if (h.contains(x, y, z))
                return Region::Hippocampus;
        for (const auto& a : amygdala)
            if (a.contains(x, y, z))
                return Region::Amygdala;
        return Region::Tissue;
    }

    double texture(double x, double y, double z) const {
        double sum = 0.0;
        for (const auto& w : id.texture)
            sum += std::sin(w.fx * x + w.fy * y + w.fz * z + w.phase);
        return 0.5 * sum;
    }
};

Anatomy anatomy_at(const Identity& id, DiseaseState disease, double age, const PhantomConfig& config) {
    const auto s = static_cast<size_t>(disease);
    const double years = age - kMinAge;
    const double grow = 1.0 + config.ventricle_growth[s] * years;
    const double shrink = 1.0 - config.atrophy[s] * years;
    Anatomy a{id, {}, {}, {}};
    const double vs = id.ventricle_scale * grow;
    a.ventricle = {id.cx, id.cy - 0.06, 0.0, 0.19 * vs, 0.25 * vs, 0.40 * vs};
    const double hs = id.hippocampus_scale * shrink;
    const double as = id.amygdala_scale * shrink;
    for (int side = 0; side < 2; ++side) {
        const double sign = side == 0 ? -1.0 : 1.0;
        a.hippocampus[static_cast<size_t>(side)] = {id.cx + sign * 0.54, id.cy + 0.18, -0.15,
                                                    0.10 * hs,           0.18 * hs,    0.35 * hs};
        a.amygdala[static_cast<size_t>(side)] = {id.cx + sign * 0.28, id.cy + 0.47, -0.20,
                                                 0.11 * as,           0.11 * as,    0.30 * as};
    }
    return a;
}

constexpr int kSupersample = 5; // odd, so coverage never sits exactly at one half

Scan render_scan(const Anatomy& anatomy, double age, const PhantomConfig& config) {
    Scan scan;
    scan.age = age;
    scan.volume = Volume(config.height, config.width, config.depth);
    scan.labels = LabelVolume(config.height, config.width, config.depth);
    const double half_w = config.width / 2.0;
    const double half_h = config.height / 2.0;
    const double half_d = config.depth / 2.0;
    const int samples = kSupersample * kSupersample;
    const std::array<float, 5> intensity{0.0f, config.tissue_intensity, config.ventricle_intensity,
                                         config.hippocampus_intensity, config.amygdala_intensity};

    for (int c = 0; c < config.depth; ++c) {
        const double z = (c + 0.5 - half_d) / half_d;
        for (int row = 0; row < config.height; ++row) {
            for (int col = 0; col < config.width; ++col) {
                std::array<int, 5> cover{};
                for (int sy = 0; sy < kSupersample; ++sy) {
                    const double y = (row + (sy + 0.5) / kSupersample - half_h) / half_h;
                    for (int sx = 0; sx < kSupersample; ++sx) {
                        const double x = (col + (sx + 0.5) / kSupersample - half_w) / half_w;
                        ++cover[static_cast<size_t>(anatomy.classify(x, y, z))];
                    }
                }
                double value = 0.0;
                for (size_t r = 0; r < cover.size(); ++r)
                    value += cover[r] * static_cast<double>(intensity[r]);
                value /= samples;
                if (cover[static_cast<size_t>(Region::Tissue)] == samples) {
                    const double x = (col + 0.5 - half_w) / half_w;
                    const double y = (row + 0.5 - half_h) / half_h;
                    value += config.texture_amplitude * anatomy.texture(x, y, z);
                }
                scan.volume.at(row, col, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));

                Region label = Region::Outside;
                for (auto r : {Region::Ventricle, Region::Hippocampus, Region::Amygdala}) {
                    if (2 * cover[static_cast<size_t>(r)] > samples)
                        label = r;
                }
                if (label == Region::Outside && 2 * (samples - cover[0]) > samples)
                    label = Region::Tissue;
                scan.labels.at(row, col, c) = static_cast<uint8_t>(label);
            }
        }
    }
    return scan;
}

void check_ages(std::span<const double> ages) {
    if (ages.size() < 2)
        throw UsageError("a subject needs at least two scans");
    for (size_t i = 0; i < ages.size(); ++i) {
        if (!(ages[i] >= kMinAge && ages[i] <= kMaxAge))
            throw UsageError("scan age " + std::to_string(ages[i]) + " outside [63, 87]");
        if (i > 0 && !(ages[i] > ages[i - 1]))
            throw UsageError("scan ages must be strictly increasing");
    }
}

std::vector<double> sample_ages(uint64_t identity_seed, const PhantomConfig& config) {
    std::mt19937_64 rng(splitmix64(identity_seed ^ 0xa9e5c0deull));
    std::uniform_int_distribution<int> scans(config.min_scans, config.max_scans);
    std::normal_distribution<double> interval(config.interval_mean, config.interval_sd);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int count = scans(rng);
    std::vector<double> gaps;
    double span = 0.0;
    for (int k = 1; k < count; ++k) {
        gaps.push_back(std::clamp(interval(rng), config.interval_min, config.interval_max));
        span += gaps.back();
    }
    std::vector<double> ages{kMinAge + unit(rng) * (kMaxAge - kMinAge - span)};
    for (double g : gaps)
        ages.push_back(ages.back() + g);
    return ages;
}

std::vector<SubjectRecord> generate_cohort(const std::string& prefix, int count, uint64_t salt,
                                           const PhantomConfig& config) {
    std::vector<SubjectRecord> out;
    out.reserve(static_cast<size_t>(count));
    for (int k = 0; k < count; ++k) {
        const uint64_t identity_seed = splitmix64(config.seed * 0x100000001b3ull + salt + static_cast<uint64_t>(k));
        const auto disease = static_cast<DiseaseState>(k % kDiseaseStates);
        char id[32];
        std::snprintf(id, sizeof(id), "%s_%04d", prefix.c_str(), k);
        const auto ages = sample_ages(identity_seed, config);
        out.push_back(generate_subject(id, identity_seed, disease, ages, config));
    }
    return out;
}

} // namespace

SubjectRecord generate_subject(const std::string& subject_id, uint64_t identity_seed, DiseaseState disease,
                               std::span<const double> ages, const PhantomConfig& config) {
    config.validate();
    check_ages(ages);
    const auto identity = sample_identity(identity_seed);
    SubjectRecord record;
    record.subject_id = subject_id;
    record.identity_seed = identity_seed;
    record.disease = disease;
    for (double age : ages)
        record.scans.push_back(render_scan(anatomy_at(identity, disease, age, config), age, config));
    return record;
}

Dataset generate_dataset(const PhantomConfig& config) {
    config.validate();
    Dataset ds;
    ds.config = config;
    ds.train = generate_cohort("train", config.train_subjects, 0x7a11ull << 20, config);
    ds.test = generate_cohort("test", config.test_subjects, 0x7e57ull << 40, config);
    return ds;
}

PairingPolicy parse_pairing_policy(const std::string& text) {
    if (text == "all_ordered")
        return PairingPolicy::AllOrdered;
    if (text == "from_first_scan")
        return PairingPolicy::FromFirstScan;
    throw UsageError("unknown pairing policy '" + text + "' (expected all_ordered or from_first_scan)");
}

std::vector<PairSample> build_pairs(std::span<const SubjectRecord> subjects, int age_bins, PairingPolicy policy) {
    std::vector<PairSample> pairs;
    for (const auto& subject : subjects) {
        const size_t n = subject.scans.size();
        for (size_t i = 0; i < n; ++i) {
            if (policy == PairingPolicy::FromFirstScan && i > 0)
                break;
            for (size_t j = i + 1; j < n; ++j) {
                const auto& base = subject.scans[i];
                const auto& follow = subject.scans[j];
                const auto attrs = ProgressionAttributes::for_age(follow.age, subject.disease, age_bins);
                for (int64_t c = 0; c < base.volume.depth; ++c) {
                    PairSample p;
                    p.x_b = base.volume.slice(c);
                    p.x_f = follow.volume.slice(c);
                    p.attrs = attrs;
                    p.subject_id = subject.subject_id;
                    p.disease = subject.disease;
                    p.slice_index = static_cast<int>(c);
                    p.baseline_age = base.age;
                    p.follow_up_age = follow.age;
                    pairs.push_back(std::move(p));
                }
            }
        }
    }
    return pairs;
}

void write_subjects(std::span<const SubjectRecord> subjects, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& subject : subjects) {
        const auto subject_dir = dir / subject.subject_id;
        fs::create_directories(subject_dir);
        nlohmann::json manifest;
        manifest["subject_id"] = subject.subject_id;
        manifest["identity_seed"] = subject.identity_seed;
        manifest["disease_state"] = to_string(subject.disease);
        manifest["scans"] = nlohmann::json::array();
        for (size_t k = 0; k < subject.scans.size(); ++k) {
            const auto stem = "scan_" + std::to_string(k);
            write_volume(subject.scans[k].volume, subject_dir / (stem + ".vol"));
            write_labels(subject.scans[k].labels, subject_dir / (stem + ".lab"));
            manifest["scans"].push_back({{"age", subject.scans[k].age}, {"volume", stem + ".vol"}, {"labels", stem + ".lab"}});
        }
        std::ofstream out(subject_dir / "manifest.json");
        out << manifest.dump(2) << '\n';
        if (!out)
            throw DataError("failed writing manifest for " + subject.subject_id);
    }
}

namespace {

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

SubjectRecord read_subject(const fs::path& subject_dir) {
    const auto manifest = read_json(subject_dir / "manifest.json");
    SubjectRecord record;
    try {
        record.subject_id = manifest.at("subject_id").get<std::string>();
        record.identity_seed = manifest.at("identity_seed").get<uint64_t>();
        record.disease = parse_disease_state(manifest.at("disease_state").get<std::string>());
        for (const auto& entry : manifest.at("scans")) {
            Scan scan;
            scan.age = entry.at("age").get<double>();
            scan.volume = read_volume(subject_dir / entry.at("volume").get<std::string>());
            scan.labels = read_labels(subject_dir / entry.at("labels").get<std::string>());
            record.scans.push_back(std::move(scan));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError((subject_dir / "manifest.json").string() + ": " + e.what());
    } catch (const UsageError& e) {
        throw DataError((subject_dir / "manifest.json").string() + ": " + e.what());
    }
    if (record.scans.size() < 2)
        throw DataError(record.subject_id + ": fewer than two scans");
    return record;
}

} // namespace

std::vector<SubjectRecord> read_subjects(const fs::path& dir) {
    if (!fs::is_directory(dir))
        throw DataError("subject directory " + dir.string() + " does not exist");
    std::vector<fs::path> subject_dirs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory())
            subject_dirs.push_back(entry.path());
    }
    std::sort(subject_dirs.begin(), subject_dirs.end());
    std::vector<SubjectRecord> out;
    for (const auto& d : subject_dirs)
        out.push_back(read_subject(d));
    return out;
}

void write_dataset(const Dataset& dataset, const fs::path& root) {
    fs::create_directories(root);
    write_subjects(dataset.train, root / "train");
    write_subjects(dataset.test, root / "test");
    nlohmann::json index;
    index["format_version"] = 1;
    index["config"] = to_json(dataset.config);
    index["train"] = nlohmann::json::array();
    index["test"] = nlohmann::json::array();
    for (const auto& s : dataset.train)
        index["train"].push_back(s.subject_id);
    for (const auto& s : dataset.test)
        index["test"].push_back(s.subject_id);
    std::ofstream out(root / "dataset.json");
    out << index.dump(2) << '\n';
    if (!out)
        throw DataError("failed writing " + (root / "dataset.json").string());
}

Dataset read_dataset(const fs::path& root) {
    const auto index = read_json(root / "dataset.json");
    if (index.value("format_version", 0) != 1)
        throw DataError((root / "dataset.json").string() + ": unsupported format_version");
    Dataset ds;
    try {
        ds.config = phantom_config_from_json(index.at("config"));
    } catch (const UsageError& e) {
        throw DataError((root / "dataset.json").string() + ": " + e.what());
    }
    auto load = [&](const char* split) {
        std::vector<SubjectRecord> out;
        for (const auto& id : index.at(split))
            out.push_back(read_subject(root / split / id.get<std::string>()));
        return out;
    };
    ds.train = load("train");
    ds.test = load("test");
    return ds;
}

} // namespace acd
