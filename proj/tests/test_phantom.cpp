#include "acd/container.hpp"
#include "acd/errors.hpp"
#include "acd/phantom.hpp"

#include <doctest.h>

#include <filesystem>
#include <cstring>
#include <fstream>

using namespace acd;
namespace fs = std::filesystem;

namespace {

PhantomConfig small_config() {
    PhantomConfig c;
    c.train_subjects = 4;
    c.test_subjects = 2;
    return c;
}

int64_t slice_count(const LabelVolume& labels, int64_t c, Region r) {
    int64_t n = 0;
    for (int64_t y = 0; y < labels.height; ++y)
        for (int64_t x = 0; x < labels.width; ++x)
            n += labels.at(y, x, c) == static_cast<uint8_t>(r);
    return n;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("acd_test_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_SUITE("phantom_data") {

TEST_CASE("subjects are deterministic and in range") {
    const auto cfg = small_config();
    const double ages[] = {66.0, 69.5, 72.0};
    const auto a = generate_subject("s", 42, DiseaseState::MCI, ages, cfg);
    const auto b = generate_subject("s", 42, DiseaseState::MCI, ages, cfg);
    REQUIRE(a.scans.size() == 3);
    for (size_t k = 0; k < a.scans.size(); ++k) {
        CHECK(a.scans[k].volume.voxels == b.scans[k].volume.voxels);
        CHECK(a.scans[k].labels.labels == b.scans[k].labels.labels);
        CHECK(a.scans[k].age == ages[k]);
        for (float v : a.scans[k].volume.voxels)
            REQUIRE((v >= 0.0f && v <= 1.0f));
        for (uint8_t l : a.scans[k].labels.labels)
            REQUIRE(l <= static_cast<uint8_t>(Region::Amygdala));
    }
}

TEST_CASE("age validation") {
    const auto cfg = small_config();
    const double too_young[] = {60.0, 65.0};
    const double not_increasing[] = {70.0, 70.0};
    const double single[] = {70.0};
    CHECK_THROWS_AS(generate_subject("s", 1, DiseaseState::CN, too_young, cfg), UsageError);
    CHECK_THROWS_AS(generate_subject("s", 1, DiseaseState::CN, not_increasing, cfg), UsageError);
    CHECK_THROWS_AS(generate_subject("s", 1, DiseaseState::CN, single, cfg), UsageError);
}

TEST_CASE("disease drives ventricle growth") {
    const auto cfg = small_config();
    const double ages[] = {70.0, 73.0};
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        const auto ad = generate_subject("ad", seed, DiseaseState::AD, ages, cfg);
        const auto cn = generate_subject("cn", seed, DiseaseState::CN, ages, cfg);
        const auto v = static_cast<uint8_t>(Region::Ventricle);
        const auto ad0 = ad.scans[0].labels.count(v), ad1 = ad.scans[1].labels.count(v);
        const auto cn0 = cn.scans[0].labels.count(v), cn1 = cn.scans[1].labels.count(v);
        CHECK(ad1 > ad0);
        CHECK(ad1 - ad0 > cn1 - cn0);
    }
}

TEST_CASE("region areas change monotonically with age and identity is stable") {
    const auto cfg = small_config();
    const double ages[] = {64.0, 68.0, 73.0, 79.0, 86.0};
    for (auto state : {DiseaseState::CN, DiseaseState::MCI, DiseaseState::AD}) {
        const auto s = generate_subject("m", 9 + static_cast<uint64_t>(state), state, ages, cfg);
        for (size_t k = 1; k < s.scans.size(); ++k) {
            const auto& prev = s.scans[k - 1].labels;
            const auto& next = s.scans[k].labels;
            for (int64_t c = 0; c < cfg.depth; ++c) {
                CHECK(slice_count(next, c, Region::Ventricle) >= slice_count(prev, c, Region::Ventricle));
                CHECK(slice_count(next, c, Region::Hippocampus) <= slice_count(prev, c, Region::Hippocampus));
                CHECK(slice_count(next, c, Region::Amygdala) <= slice_count(prev, c, Region::Amygdala));
            }
            int64_t inter = 0, uni = 0;
            for (size_t i = 0; i < prev.labels.size(); ++i) {
                const bool a = prev.labels[i] != 0, b = next.labels[i] != 0;
                inter += a && b;
                uni += a || b;
            }
            CHECK(double(inter) / double(uni) >= 0.98);
        }
    }
}

TEST_CASE("cohorts follow the configured scan statistics") {
    PhantomConfig cfg;
    cfg.train_subjects = 30;
    cfg.test_subjects = 3;
    const auto ds = generate_dataset(cfg);
    REQUIRE(ds.train.size() == 30);
    CHECK(ds.train[0].subject_id == "train_0000");
    CHECK(ds.test[2].subject_id == "test_0002");
    for (size_t k = 0; k < ds.train.size(); ++k) {
        const auto& s = ds.train[k];
        CHECK(static_cast<int>(s.disease) == static_cast<int>(k % 3));
        CHECK(s.scans.size() >= 2);
        CHECK(s.scans.size() <= 3);
        for (size_t i = 1; i < s.scans.size(); ++i) {
            const double gap = s.scans[i].age - s.scans[i - 1].age;
            CHECK(gap >= 1.0);
            CHECK(gap <= 6.0);
        }
        CHECK(s.scans.front().age >= kMinAge);
        CHECK(s.scans.back().age <= kMaxAge);
    }
    const auto again = generate_dataset(cfg);
    CHECK(again.test[1].scans[0].volume.voxels == ds.test[1].scans[0].volume.voxels);
}

TEST_CASE("pair construction") {
    PhantomConfig cfg = small_config();
    const double two[] = {65.0, 68.0};
    const auto s2 = generate_subject("a", 1, DiseaseState::AD, two, cfg);
    const std::vector<SubjectRecord> one_subject{s2};
    const auto pairs = build_pairs(one_subject, 8);
    CHECK(pairs.size() == 16);
    for (size_t c = 0; c < pairs.size(); ++c) {
        CHECK(pairs[c].slice_index == static_cast<int>(c));
        CHECK(pairs[c].x_b.pixels == s2.scans[0].volume.slice(static_cast<int64_t>(c)).pixels);
        CHECK(pairs[c].x_f.pixels == s2.scans[1].volume.slice(static_cast<int64_t>(c)).pixels);
        CHECK(pairs[c].follow_up_age > pairs[c].baseline_age);
        CHECK(pairs[c].attrs.age_bin_index() == age_to_bin(68.0, 8));
        CHECK(pairs[c].attrs.disease() == DiseaseState::AD);
    }

    cfg.depth = 1;
    const double three[] = {65.0, 68.0, 71.0};
    const std::vector<SubjectRecord> thin{generate_subject("b", 2, DiseaseState::CN, three, cfg)};
    CHECK(build_pairs(thin, 8).size() == 3);
    CHECK(build_pairs(thin, 8, PairingPolicy::FromFirstScan).size() == 2);
    CHECK_THROWS_AS(parse_pairing_policy("random"), UsageError);
}

TEST_CASE("dataset round trip is bitwise exact") {
    const auto ds = generate_dataset(small_config());
    const auto root = scratch("roundtrip");
    write_dataset(ds, root);
    const auto back = read_dataset(root);
    REQUIRE(back.train.size() == ds.train.size());
    REQUIRE(back.test.size() == ds.test.size());
    for (size_t i = 0; i < ds.train.size(); ++i) {
        const auto& a = ds.train[i];
        const auto& b = back.train[i];
        CHECK(a.subject_id == b.subject_id);
        CHECK(a.identity_seed == b.identity_seed);
        CHECK(a.disease == b.disease);
        REQUIRE(a.scans.size() == b.scans.size());
        for (size_t k = 0; k < a.scans.size(); ++k) {
            CHECK(a.scans[k].age == b.scans[k].age);
            CHECK(std::memcmp(a.scans[k].volume.voxels.data(), b.scans[k].volume.voxels.data(),
                              a.scans[k].volume.voxels.size() * sizeof(float)) == 0);
            CHECK(a.scans[k].labels.labels == b.scans[k].labels.labels);
        }
    }
    CHECK(back.config.seed == ds.config.seed);
    fs::remove_all(root);
}

TEST_CASE("volume container header and corruption") {
    const auto dir = scratch("container");
    fs::create_directories(dir);
    Volume v(32, 32, 16, 0.5f);
    write_volume(v, dir / "v.vol");
    const auto bytes = read_file_bytes(dir / "v.vol");
    REQUIRE(bytes.size() == 16 + 32 * 32 * 16 * 4);
    const unsigned char header[] = {'A', 'C', 'D', '1', 0x20, 0, 0, 0, 0x20, 0, 0, 0, 0x10, 0, 0, 0};
    CHECK(std::equal(std::begin(header), std::end(header), bytes.begin()));

    {
        std::ofstream out(dir / "short.vol", std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), 1000);
    }
    try {
        read_volume(dir / "short.vol");
        FAIL("truncated volume was accepted");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("short.vol") != std::string::npos);
        CHECK(msg.find(std::to_string(bytes.size())) != std::string::npos);
    }

    auto corrupt = bytes;
    corrupt[0] = 'X';
    {
        std::ofstream out(dir / "bad.vol", std::ios::binary);
        out.write(reinterpret_cast<const char*>(corrupt.data()), static_cast<std::streamsize>(corrupt.size()));
    }
    CHECK_THROWS_AS(read_volume(dir / "bad.vol"), DataError);
    CHECK_THROWS_AS(read_labels(dir / "v.vol"), DataError);
    fs::remove_all(dir);
}

}
