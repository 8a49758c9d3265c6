#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "owps/config.hpp"
#include "owps/data.hpp"
#include "owps/postprocess.hpp"
#include "support.hpp"

using namespace owps;
using namespace owps::data;
using testing_support::Gen;

namespace fs = std::filesystem;

namespace {

BinaryMask union_of_instances(const InstanceMap& m) {
    BinaryMask out(m.height, m.width);
    for (std::size_t i = 0; i < m.labels.size(); ++i) out.data[i] = m.labels[i] > 0 ? 1 : 0;
    return out;
}

// Direct scan: a labelled pixel with a differing in-image 4-neighbour.
BinaryMask brute_boundary(const InstanceMap& m) {
    BinaryMask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (!m.at(y, x)) continue;
            const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
            for (int k = 0; k < 4; ++k) {
                if (ny[k] < 0 || ny[k] >= m.height || nx[k] < 0 || nx[k] >= m.width) continue;
                if (m.at(ny[k], nx[k]) != m.at(y, x)) out.at(y, x) = 1;
            }
        }
    }
    return out;
}

BinaryMask brute_edge(const InstanceMap& m, int w) {
    const auto b = brute_boundary(m);
    BinaryMask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            for (int dy = -(w - 1); dy <= w - 1; ++dy)
                for (int dx = -(w - 1); dx <= w - 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < m.height && xx >= 0 && xx < m.width && b.at(yy, xx)) out.at(y, x) = 1;
                }
    return out;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("owps_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

bool same_sample(const Sample& a, const Sample& b) {
    return a.image.data == b.image.data && a.region_mask == b.region_mask && a.edge_mask == b.edge_mask &&
           a.instance_map == b.instance_map && a.true_count == b.true_count;
}

}  // namespace

TEST(EdgeLabels, SquarePerimeter) {
    InstanceMap m(10, 10);
    for (int y = 2; y < 8; ++y)
        for (int x = 2; x < 8; ++x) m.at(y, x) = 1;
    m.count = 1;
    const auto e = derive_edge_labels(m, 1);
    EXPECT_EQ(e.popcount(), 20u);
    EXPECT_EQ(e, brute_boundary(m));
    EXPECT_EQ(derive_edge_labels(InstanceMap(8, 8), 2).popcount(), 0u);
    EXPECT_THROW(derive_edge_labels(m, 0), Error);
}

TEST(EdgeLabels, AbuttingInstancesMarkTheSeam) {
    InstanceMap m(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) m.at(y, x) = x < 4 ? 1 : 2;
    m.count = 2;
    const auto e = derive_edge_labels(m, 1);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) EXPECT_EQ(e.at(y, x), (x == 3 || x == 4) ? 1 : 0) << y << "," << x;
    }
    EXPECT_EQ(union_of_instances(m).popcount(), 64u);
}

TEST(EdgeLabels, RandomMapsMatchBruteForce) {
    Gen g(1);
    for (int trial = 0; trial < 50; ++trial) {
        InstanceMap m(g.integer(3, 16), g.integer(3, 16));
        for (auto& v : m.labels) v = static_cast<std::uint16_t>(g.coin(0.4) ? 0 : g.integer(1, 3));
        const int w = g.integer(1, 3);
        const auto e = derive_edge_labels(m, w);
        EXPECT_EQ(e, brute_edge(m, w));
        bool any = false;
        for (auto v : m.labels) any = any || v;
        if (any && m.height * m.width > 1) {
            // Nonempty unless the whole image is one label.
            bool uniform = std::all_of(m.labels.begin(), m.labels.end(), [&](auto v) { return v == m.labels[0]; });
            if (!uniform) EXPECT_GT(e.popcount(), 0u);
        }
    }
}

TEST(Generator, DeterministicAndCountsByConstruction) {
    SyntheticSceneConfig cfg;
    EXPECT_TRUE(same_sample(generate_scene(cfg, 11), generate_scene(cfg, 11)));
    EXPECT_FALSE(same_sample(generate_scene(cfg, 11), generate_scene(cfg, 12)));
    cfg.k_min = cfg.k_max = 3;
    for (std::uint64_t s = 0; s < 10; ++s) EXPECT_EQ(generate_scene(cfg, s).true_count, 3);
}

TEST(Generator, SampleInvariants) {
    SyntheticSceneConfig cfg;
    cfg.overlap_prob = 0.5f;
    const auto samples = generate_dataset(cfg, 40, 3);
    double edge = 0, region = 0;
    for (const auto& s : samples) {
        EXPECT_EQ(s.region_mask, union_of_instances(s.instance_map));
        EXPECT_TRUE(std::all_of(s.edge_mask.data.begin(), s.edge_mask.data.end(), [](auto v) { return v <= 1; }));
        const auto dilated = post::dilate(s.region_mask, 3);
        for (std::size_t i = 0; i < s.edge_mask.data.size(); ++i) {
            if (s.edge_mask.data[i]) EXPECT_TRUE(dilated.data[i]);
        }
        EXPECT_EQ(s.true_count, s.instance_map.count);
        EXPECT_GE(s.true_count, cfg.k_min);
        EXPECT_LE(s.true_count, cfg.k_max);
        for (int label = 1; label <= s.true_count; ++label) {
            BinaryMask own(s.instance_map.height, s.instance_map.width);
            for (std::size_t i = 0; i < own.data.size(); ++i) own.data[i] = s.instance_map.labels[i] == label;
            EXPECT_EQ(testing_support::flood_fill_labels(own).count, 1);
        }
        EXPECT_GT(s.edge_mask.popcount(), 0u);
        for (float v : s.image.data) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
        edge += static_cast<double>(s.edge_mask.popcount());
        region += static_cast<double>(s.region_mask.popcount());
    }
    EXPECT_LT(edge / region, 0.25);
}

TEST(Generator, DefaultConfigKeepsEdgesImbalanced) {
    const auto samples = generate_dataset(SyntheticSceneConfig{}, 100, 8);
    double edge = 0, region = 0;
    for (const auto& s : samples) {
        edge += static_cast<double>(s.edge_mask.popcount());
        region += static_cast<double>(s.region_mask.popcount());
    }
    EXPECT_LT(edge / region, 0.25);
}

TEST(Generator, ConfigValidation) {
    SyntheticSceneConfig cfg;
    cfg.k_min = 0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = {};
    cfg.axis_min = 1.0f;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = {};
    cfg.overlap_prob = 1.5f;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = {};
    cfg.k_max = 1;
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(Augment, InvolutionsAndRotations) {
    const auto s = generate_scene(SyntheticSceneConfig{}, 5);
    EXPECT_TRUE(same_sample(apply_geometry(apply_geometry(s, true, false, 0), true, false, 0), s));
    EXPECT_TRUE(same_sample(apply_geometry(apply_geometry(s, false, true, 0), false, true, 0), s));
    Sample r = s;
    for (int i = 0; i < 4; ++i) r = apply_geometry(r, false, false, 1);
    EXPECT_TRUE(same_sample(r, s));
    EXPECT_FALSE(same_sample(apply_geometry(s, false, false, 1), s));
    // One counter-clockwise turn moves the top-right pixel to the top-left.
    const auto turned = apply_geometry(s, false, false, 1);
    EXPECT_EQ(turned.instance_map.at(0, 0), s.instance_map.at(0, s.image.width - 1));
    EXPECT_EQ(turned.image.at(1, 0, 0), s.image.at(1, 0, s.image.width - 1));
}

TEST(Augment, NonSquareRotationSwapsExtents) {
    SyntheticSceneConfig cfg;
    cfg.height = 48;
    cfg.width = 64;
    cfg.axis_max = 10.0f;
    const auto s = generate_scene(cfg, 2);
    const auto t = apply_geometry(s, true, false, 3);
    EXPECT_EQ(t.image.height, 64);
    EXPECT_EQ(t.image.width, 48);
    EXPECT_EQ(t.region_mask, union_of_instances(t.instance_map));
    EXPECT_EQ(t.edge_mask, derive_edge_labels(t.instance_map, cfg.edge_width));
}

TEST(Augment, PreservesLabelsAndCounts) {
    const auto samples = generate_dataset(SyntheticSceneConfig{}, 10, 4);
    Gen g(2);
    for (const auto& s : samples) {
        for (int k = 0; k < 5; ++k) {
            const auto a = augment(s, g.bits());
            EXPECT_EQ(a.region_mask, union_of_instances(a.instance_map));
            EXPECT_EQ(a.edge_mask, derive_edge_labels(a.instance_map, 1));
            EXPECT_EQ(a.true_count, s.true_count);
            EXPECT_EQ(a.region_mask.popcount(), s.region_mask.popcount());
            for (float v : a.image.data) {
                ASSERT_GE(v, 0.0f);
                ASSERT_LE(v, 1.0f);
            }
        }
        const auto seed = g.bits();
        EXPECT_TRUE(same_sample(augment(s, seed), augment(s, seed)));
    }
}

TEST(Augment, ContrastAboutMean) {
    Image im(2, 2);
    for (int c = 0; c < 3; ++c) {
        im.at(c, 0, 0) = 0.2f;
        im.at(c, 0, 1) = 0.4f;
        im.at(c, 1, 0) = 0.6f;
        im.at(c, 1, 1) = 0.8f;
    }
    const auto out = apply_photometric(im, 1.2f, 0.0f, 0);
    EXPECT_NEAR(out.at(0, 0, 0), 0.5f - 1.2f * 0.3f, 1e-6);
    EXPECT_NEAR(out.at(2, 1, 1), 0.5f + 1.2f * 0.3f, 1e-6);
    const auto flat = apply_photometric(im, 1.0f, 0.0f, 0);
    for (std::size_t i = 0; i < im.data.size(); ++i) EXPECT_NEAR(flat.data[i], im.data[i], 1e-6);
}

TEST(DatasetIo, RoundTrip) {
    const auto dir = temp_dir("roundtrip");
    const auto samples = generate_dataset(SyntheticSceneConfig{}, 6, 9);
    write_dataset(dir, samples, scene_to_json(SyntheticSceneConfig{}), 9);
    const auto back = read_dataset(dir).samples;
    ASSERT_EQ(back.size(), samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        EXPECT_EQ(back[i].region_mask, samples[i].region_mask);
        EXPECT_EQ(back[i].edge_mask, samples[i].edge_mask);
        EXPECT_EQ(back[i].instance_map, samples[i].instance_map);
        EXPECT_EQ(back[i].true_count, samples[i].true_count);
        for (std::size_t j = 0; j < samples[i].image.data.size(); ++j) {
            EXPECT_LE(std::abs(back[i].image.data[j] - samples[i].image.data[j]), 0.5f / 255.0f + 1e-6f);
        }
    }
    // Manifest count equals the number of files per directory.
    for (const char* sub : {"images", "region", "edge", "instance"}) {
        const auto n = std::distance(fs::directory_iterator(dir / sub), fs::directory_iterator{});
        EXPECT_EQ(n, 6) << sub;
    }
    fs::remove_all(dir);
}

TEST(DatasetIo, MissingAndCorruptManifests) {
    const auto dir = temp_dir("empty");
    fs::create_directories(dir);
    try {
        read_dataset(dir);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Io);
        EXPECT_NE(std::string(e.what()).find("manifest.json"), std::string::npos);
    }
    std::ofstream(dir / "manifest.json") << "{ not json";
    try {
        read_dataset(dir);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Corrupt);
        EXPECT_NE(std::string(e.what()).find(dir.string()), std::string::npos);
    }
    std::ofstream(dir / "manifest.json") << R"({"size":[64,64],"count":1,"samples":[{"id":"0000","true_count":2}]})";
    EXPECT_THROW(read_dataset(dir), Error);
    fs::remove_all(dir);
}
