#include "owps/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "owps/error.hpp"
#include "owps/postprocess.hpp"

namespace owps::data {

namespace {

using Rng = std::mt19937_64;

float uniform(Rng& rng, float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
bool coin(Rng& rng, float p) { return uniform(rng, 0.0f, 1.0f) < p; }

struct Ellipse {
    float cx, cy, a, b, theta;

    // Squared normalized radius; <= 1 inside.
    float radius2(float x, float y) const {
        const float dx = x - cx, dy = y - cy;
        const float c = std::cos(theta), s = std::sin(theta);
        const float u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
        return u * u + v * v;
    }
    float half_extent_x() const {
        const float c = std::cos(theta), s = std::sin(theta);
        return std::sqrt(a * a * c * c + b * b * s * s);
    }
    float half_extent_y() const {
        const float c = std::cos(theta), s = std::sin(theta);
        return std::sqrt(a * a * s * s + b * b * c * c);
    }
};

bool fits(const Ellipse& e, int h, int w) {
    const float ex = e.half_extent_x(), ey = e.half_extent_y();
    return e.cx - ex >= 1.0f && e.cx + ex <= static_cast<float>(w) - 2.0f && e.cy - ey >= 1.0f &&
           e.cy + ey <= static_cast<float>(h) - 2.0f;
}

std::vector<Ellipse> draw_layout(const SyntheticSceneConfig& cfg, Rng& rng) {
    const int k = uniform_int(rng, cfg.k_min, cfg.k_max);
    std::vector<Ellipse> out;
    for (int i = 0; i < k; ++i) {
        for (int attempt = 0; attempt < 200; ++attempt) {
            Ellipse e{};
            e.a = uniform(rng, cfg.axis_min, cfg.axis_max);
            e.b = std::max(cfg.axis_min, e.a * uniform(rng, 0.55f, 1.0f));
            e.theta = uniform(rng, 0.0f, std::numbers::pi_v<float>);
            if (!out.empty() && coin(rng, cfg.overlap_prob)) {
                const Ellipse& anchor = out[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(out.size()) - 1))];
                const float phi = uniform(rng, 0.0f, 2.0f * std::numbers::pi_v<float>);
                const float dist = 0.5f * (anchor.a + anchor.b + e.a + e.b) * 0.5f * uniform(rng, 1.0f, 1.6f);
                e.cx = anchor.cx + dist * std::cos(phi);
                e.cy = anchor.cy + dist * std::sin(phi);
            } else {
                e.cx = uniform(rng, 0.0f, static_cast<float>(cfg.width - 1));
                e.cy = uniform(rng, 0.0f, static_cast<float>(cfg.height - 1));
            }
            if (fits(e, cfg.height, cfg.width)) {
                out.push_back(e);
                break;
            }
        }
        if (static_cast<int>(out.size()) != i + 1) return {};
    }
    return out;
}

InstanceMap paint(const std::vector<Ellipse>& layout, int h, int w, std::vector<int>& full_area) {
    InstanceMap map(h, w);
    full_area.assign(layout.size(), 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (std::size_t i = 0; i < layout.size(); ++i) {
                if (layout[i].radius2(static_cast<float>(x), static_cast<float>(y)) <= 1.0f) {
                    map.at(y, x) = static_cast<std::uint16_t>(i + 1);
                    ++full_area[i];
                }
            }
        }
    }
    map.count = static_cast<int>(layout.size());
    return map;
}

bool acceptable(const SyntheticSceneConfig& cfg, const InstanceMap& map, const std::vector<int>& full_area) {
    const int k = map.count;
    for (int label = 1; label <= k; ++label) {
        BinaryMask own(map.height, map.width);
        for (std::size_t i = 0; i < own.data.size(); ++i) own.data[i] = map.labels[i] == label ? 1 : 0;
        const auto visible = static_cast<float>(own.popcount());
        if (visible < cfg.min_visible * static_cast<float>(full_area[static_cast<std::size_t>(label - 1)])) return false;
        if (post::connected_components(own).count != 1) return false;
    }
    const BinaryMask region = region_from_instances(map);
    const BinaryMask edge = derive_edge_labels(map, cfg.edge_width);
    return post::connected_components(post::morph_open(post::subtract_edge(region, edge))).count == k;
}

Image render(const SyntheticSceneConfig& cfg, const std::vector<Ellipse>& layout, const InstanceMap& map, Rng& rng) {
    const int h = cfg.height, w = cfg.width;
    std::array<float, 3> bg{};
    for (float& c : bg) c = uniform(rng, cfg.background_range[0], cfg.background_range[1]);
    const float amp = uniform(rng, 0.0f, cfg.gradient_max);
    const float psi = uniform(rng, 0.0f, 2.0f * std::numbers::pi_v<float>);
    std::vector<std::array<float, 3>> colors(layout.size());
    for (auto& col : colors) {
        const float scale = uniform(rng, cfg.foreground_scale[0], cfg.foreground_scale[1]);
        for (int c = 0; c < 3; ++c) col[static_cast<std::size_t>(c)] = bg[static_cast<std::size_t>(c)] * scale + uniform(rng, -cfg.color_jitter, cfg.color_jitter);
    }
    std::normal_distribution<float> noise(0.0f, 1.0f);
    Image image(h, w);
    const float half_w = 0.5f * static_cast<float>(w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float ramp = ((static_cast<float>(x) - half_w) * std::cos(psi) + (static_cast<float>(y) - 0.5f * static_cast<float>(h)) * std::sin(psi)) / half_w;
            const float light = 1.0f + amp * ramp;
            const int label = map.at(y, x);
            for (int c = 0; c < 3; ++c) {
                float v;
                if (label == 0) {
                    v = bg[static_cast<std::size_t>(c)];
                } else {
                    const auto idx = static_cast<std::size_t>(label - 1);
                    const float r2 = std::min(1.0f, layout[idx].radius2(static_cast<float>(x), static_cast<float>(y)));
                    v = colors[idx][static_cast<std::size_t>(c)] * (1.0f - cfg.rim_darkening * r2 * r2);
                }
                image.at(c, y, x) = v * light;
            }
        }
    }
    for (float& v : image.data) v = std::clamp(v + cfg.noise * noise(rng), 0.0f, 1.0f);
    return image;
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

template <typename T>
std::vector<T> transform_plane(const std::vector<T>& src, int h, int w, bool flip_h, bool flip_v, int turns, int& out_h,
                               int& out_w) {
    std::vector<T> cur = src;
    int ch = h, cw = w;
    if (flip_h || flip_v) {
        std::vector<T> next(cur.size());
        for (int y = 0; y < ch; ++y) {
            for (int x = 0; x < cw; ++x) {
                const int sy = flip_v ? ch - 1 - y : y, sx = flip_h ? cw - 1 - x : x;
                next[static_cast<std::size_t>(y * cw + x)] = cur[static_cast<std::size_t>(sy * cw + sx)];
            }
        }
        cur.swap(next);
    }
    for (int t = 0; t < ((turns % 4) + 4) % 4; ++t) {
        // Counter-clockwise: new(y, x) = old(x, w - 1 - y).
        std::vector<T> next(cur.size());
        const int nh = cw, nw = ch;
        for (int y = 0; y < nh; ++y) {
            for (int x = 0; x < nw; ++x) next[static_cast<std::size_t>(y * nw + x)] = cur[static_cast<std::size_t>(x * cw + (cw - 1 - y))];
        }
        cur.swap(next);
        ch = nh;
        cw = nw;
    }
    out_h = ch;
    out_w = cw;
    return cur;
}

}  // namespace

void SyntheticSceneConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw Error(ErrorKind::InvalidConfig, "data." + field + ": " + why);
    };
    if (height < 8 || width < 8) fail("size", "extents must be at least 8");
    if (k_min < 1) fail("k_min", "must be >= 1");
    if (k_max < k_min) fail("k_max", "must be >= k_min");
    if (k_max > 65535) fail("k_max", "must fit a 16-bit label");
    if (axis_min < 2.0f) fail("axis_min", "must be >= 2 px");
    if (axis_max < axis_min) fail("axis_max", "must be >= axis_min");
    if (2.0f * axis_max + 4.0f > static_cast<float>(std::min(height, width))) fail("axis_max", "particles cannot fit the image");
    if (!(overlap_prob >= 0.0f && overlap_prob <= 1.0f)) fail("overlap_prob", "must lie in [0, 1]");
    if (!(min_visible >= 0.0f && min_visible <= 1.0f)) fail("min_visible", "must lie in [0, 1]");
    if (!(background_range[0] >= 0.0f && background_range[0] <= background_range[1] && background_range[1] <= 1.0f)) {
        fail("background_range", "must be an ordered pair in [0, 1]");
    }
    if (!(foreground_scale[0] >= 0.0f && foreground_scale[0] <= foreground_scale[1])) fail("foreground_scale", "must be an ordered non-negative pair");
    if (!(gradient_max >= 0.0f && gradient_max < 1.0f)) fail("gradient_max", "must lie in [0, 1)");
    if (!(color_jitter >= 0.0f)) fail("color_jitter", "must be >= 0");
    if (!(rim_darkening >= 0.0f && rim_darkening <= 1.0f)) fail("rim_darkening", "must lie in [0, 1]");
    if (!(noise >= 0.0f)) fail("noise", "must be >= 0");
    if (edge_width < 1) fail("edge_width", "must be >= 1");
}

BinaryMask region_from_instances(const InstanceMap& instances) {
    BinaryMask mask(instances.height, instances.width);
    for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = instances.labels[i] ? 1 : 0;
    return mask;
}

BinaryMask derive_edge_labels(const InstanceMap& instances, int width) {
    if (width < 1) throw Error(ErrorKind::InvalidConfig, "edge width must be >= 1");
    const int h = instances.height, w = instances.width;
    BinaryMask boundary(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto label = instances.at(y, x);
            if (!label) continue;
            const bool differs = (y > 0 && instances.at(y - 1, x) != label) || (y + 1 < h && instances.at(y + 1, x) != label) ||
                                 (x > 0 && instances.at(y, x - 1) != label) || (x + 1 < w && instances.at(y, x + 1) != label);
            boundary.at(y, x) = differs ? 1 : 0;
        }
    }
    return width == 1 ? boundary : post::dilate(boundary, 2 * width - 1);
}

Sample generate_scene(const SyntheticSceneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const auto layout = draw_layout(cfg, rng);
        if (layout.empty()) continue;
        std::vector<int> full_area;
        InstanceMap map = paint(layout, cfg.height, cfg.width, full_area);
        if (!acceptable(cfg, map, full_area)) continue;
        Sample s;
        s.image = render(cfg, layout, map, rng);
        s.region_mask = region_from_instances(map);
        s.edge_mask = derive_edge_labels(map, cfg.edge_width);
        s.true_count = map.count;
        s.instance_map = std::move(map);
        return s;
    }
    throw Error(ErrorKind::InvalidConfig, "could not place a valid scene in 1000 attempts; loosen axis or overlap settings");
}

std::vector<Sample> generate_dataset(const SyntheticSceneConfig& cfg, int count, std::uint64_t seed) {
    if (count < 1) throw Error(ErrorKind::InvalidConfig, "dataset size must be >= 1");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(generate_scene(cfg, splitmix(seed + static_cast<std::uint64_t>(i))));
    return out;
}

Sample apply_geometry(const Sample& s, bool flip_h, bool flip_v, int quarter_turns) {
    Sample out;
    const int h = s.image.height, w = s.image.width;
    int nh = h, nw = w;
    out.image = Image(h, w);
    std::vector<float> channel(static_cast<std::size_t>(h * w));
    std::vector<float> all;
    for (int c = 0; c < 3; ++c) {
        std::copy_n(s.image.data.begin() + static_cast<std::ptrdiff_t>(c) * h * w, h * w, channel.begin());
        auto t = transform_plane(channel, h, w, flip_h, flip_v, quarter_turns, nh, nw);
        all.insert(all.end(), t.begin(), t.end());
    }
    out.image.height = nh;
    out.image.width = nw;
    out.image.data = std::move(all);
    out.region_mask.data = transform_plane(s.region_mask.data, h, w, flip_h, flip_v, quarter_turns, nh, nw);
    out.region_mask.height = nh;
    out.region_mask.width = nw;
    out.edge_mask.data = transform_plane(s.edge_mask.data, h, w, flip_h, flip_v, quarter_turns, nh, nw);
    out.edge_mask.height = nh;
    out.edge_mask.width = nw;
    out.instance_map.labels = transform_plane(s.instance_map.labels, h, w, flip_h, flip_v, quarter_turns, nh, nw);
    out.instance_map.height = nh;
    out.instance_map.width = nw;
    out.instance_map.count = s.instance_map.count;
    out.true_count = s.true_count;
    return out;
}

Image apply_photometric(const Image& image, float contrast, float noise_sigma, std::uint64_t noise_seed) {
    Image out = image;
    const std::size_t plane = static_cast<std::size_t>(image.height * image.width);
    for (int c = 0; c < 3; ++c) {
        auto begin = out.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(c) * plane);
        double sum = 0.0;
        for (std::size_t i = 0; i < plane; ++i) sum += begin[static_cast<std::ptrdiff_t>(i)];
        const auto m = static_cast<float>(sum / static_cast<double>(plane));
        for (std::size_t i = 0; i < plane; ++i) {
            float& v = begin[static_cast<std::ptrdiff_t>(i)];
            v = m + contrast * (v - m);
        }
    }
    if (noise_sigma > 0.0f) {
        Rng rng(noise_seed);
        std::normal_distribution<float> noise(0.0f, noise_sigma);
        for (float& v : out.data) v += noise(rng);
    }
    for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

Sample augment(const Sample& sample, std::uint64_t seed, const AugmentConfig& cfg) {
    Rng rng(seed);
    const bool flip_h = coin(rng, 0.5f);
    const bool flip_v = coin(rng, 0.5f);
    const int turns = uniform_int(rng, 0, 3);
    const float contrast = uniform(rng, cfg.contrast_lo, cfg.contrast_hi);
    const float sigma = uniform(rng, 0.0f, cfg.noise_max);
    const std::uint64_t noise_seed = rng();
    Sample out = apply_geometry(sample, cfg.flips && flip_h, cfg.flips && flip_v, cfg.rotations ? turns : 0);
    out.image = apply_photometric(out.image, contrast, sigma, noise_seed);
    return out;
}

namespace {

std::string sample_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples, const std::string& cfg_json,
                   std::uint64_t seed) {
    namespace fs = std::filesystem;
    if (samples.empty()) throw Error(ErrorKind::InvalidConfig, "refusing to write an empty dataset");
    std::error_code ec;
    for (const char* sub : {"images", "region", "edge", "instance"}) {
        fs::create_directories(dir / sub, ec);
        if (ec) throw Error(ErrorKind::Io, "cannot create " + (dir / sub).string() + ": " + ec.message());
    }
    nlohmann::ordered_json manifest;
    manifest["format"] = "owps-dataset";
    manifest["version"] = 1;
    manifest["size"] = {samples.front().image.height, samples.front().image.width};
    manifest["count"] = samples.size();
    manifest["seed"] = seed;
    manifest["config"] = cfg_json.empty() ? nlohmann::ordered_json::object() : nlohmann::ordered_json::parse(cfg_json);
    auto& entries = manifest["samples"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        const std::string id = sample_id(i);
        png::write_rgb8(dir / "images" / (id + ".png"), s.image);
        png::write_mask(dir / "region" / (id + ".png"), s.region_mask);
        png::write_mask(dir / "edge" / (id + ".png"), s.edge_mask);
        png::write_instances(dir / "instance" / (id + ".png"), s.instance_map);
        entries.push_back({{"id", id}, {"true_count", s.true_count}});
    }
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::Io, "cannot write " + (dir / "manifest.json").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw Error(ErrorKind::Io, "missing dataset manifest: " + manifest_path.string());
    Dataset ds;
    ds.manifest_text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    nlohmann::json manifest;
    std::vector<std::string> ids;
    std::vector<int> counts;
    int h = 0, w = 0;
    try {
        manifest = nlohmann::json::parse(ds.manifest_text);
        h = manifest.at("size").at(0).get<int>();
        w = manifest.at("size").at(1).get<int>();
        const auto n = manifest.at("count").get<std::size_t>();
        const auto& entries = manifest.at("samples");
        if (entries.size() != n) throw Error(ErrorKind::Corrupt, "sample list length differs from count");
        for (const auto& e : entries) {
            ids.push_back(e.at("id").get<std::string>());
            counts.push_back(e.at("true_count").get<int>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Corrupt, manifest_path.string() + ": " + e.what());
    } catch (const Error& e) {
        throw Error(ErrorKind::Corrupt, manifest_path.string() + ": " + e.what());
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        Sample s;
        s.image = png::read_rgb8(dir / "images" / (ids[i] + ".png"));
        s.region_mask = png::read_mask(dir / "region" / (ids[i] + ".png"));
        s.edge_mask = png::read_mask(dir / "edge" / (ids[i] + ".png"));
        s.instance_map = png::read_instances(dir / "instance" / (ids[i] + ".png"));
        s.true_count = counts[i];
        const bool sizes_ok = s.image.height == h && s.image.width == w && s.region_mask.height == h &&
                              s.region_mask.width == w && s.edge_mask.height == h && s.edge_mask.width == w &&
                              s.instance_map.height == h && s.instance_map.width == w;
        if (!sizes_ok) throw Error(ErrorKind::Corrupt, "sample " + ids[i] + " in " + dir.string() + " does not match the manifest size");
        if (s.instance_map.count != s.true_count) {
            throw Error(ErrorKind::Corrupt, "sample " + ids[i] + " in " + dir.string() + ": instance map holds " +
                                                std::to_string(s.instance_map.count) + " labels, manifest says " +
                                                std::to_string(s.true_count));
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace owps::data
