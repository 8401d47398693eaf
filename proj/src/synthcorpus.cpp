#include "camo/synthcorpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "camo/image_io.hpp"
#include "camo/maskops.hpp"

namespace camo::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Rgb {
    double r, g, b;
};

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

void put(RgbImage& img, int y, int x, const Rgb& c) {
    const int64_t hw = static_cast<int64_t>(img.height()) * img.width();
    const int64_t i = static_cast<int64_t>(y) * img.width() + x;
    img.chw.data[i] = std::clamp(c.r, 0.0, 1.0);
    img.chw.data[hw + i] = std::clamp(c.g, 0.0, 1.0);
    img.chw.data[2 * hw + i] = std::clamp(c.b, 0.0, 1.0);
}

// Coarse random grid, bilinearly interpolated. Band-limited on purpose so the
// autoencoder can reconstruct it.
RgbImage value_noise(Rng& rng, int size, int cell, const Rgb& lo, const Rgb& hi) {
    const int gw = size / cell + 2;
    std::vector<double> grid(static_cast<size_t>(gw) * gw);
    for (auto& v : grid) v = rng.uniform();
    RgbImage img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double fy = static_cast<double>(y) / cell, fx = static_cast<double>(x) / cell;
            const int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
            const double ty = fy - iy, tx = fx - ix;
            const double v00 = grid[iy * gw + ix], v01 = grid[iy * gw + ix + 1];
            const double v10 = grid[(iy + 1) * gw + ix], v11 = grid[(iy + 1) * gw + ix + 1];
            const double v = (v00 * (1 - tx) + v01 * tx) * (1 - ty) +
                             (v10 * (1 - tx) + v11 * tx) * ty;
            put(img, y, x, lerp(lo, hi, v));
        }
    return img;
}

RgbImage stripes(Rng& rng, int size, const Rgb& a, const Rgb& b, bool horizontal) {
    const double period = rng.uniform(10.0, 18.0);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    RgbImage img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = horizontal ? y : x;
            const double t = 0.5 + 0.5 * std::sin(2.0 * M_PI * u / period + phase);
            put(img, y, x, lerp(a, b, t));
        }
    return img;
}

RgbImage blocks(Rng& rng, int size, int block, const std::vector<Rgb>& palette) {
    const int gb = (size + block - 1) / block;
    std::vector<int> pick(static_cast<size_t>(gb) * gb);
    for (auto& v : pick) v = rng.uniform_int(static_cast<int>(palette.size()));
    RgbImage img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            put(img, y, x, palette[pick[(y / block) * gb + x / block]]);
    return img;
}

RgbImage gradient(Rng& rng, int size, const Rgb& top, const Rgb& bottom) {
    const double tilt = rng.uniform(-0.15, 0.15);
    RgbImage img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double t = (static_cast<double>(y) / (size - 1)) + tilt * (static_cast<double>(x) / size);
            t = std::clamp(t, 0.0, 1.0);
            put(img, y, x, lerp(top, bottom, t));
        }
    return img;
}

RgbImage scene_background(Rng& rng, const std::string& scene, int size) {
    const int family = rng.uniform_int(2);
    if (scene == "urban") {
        if (family == 0)
            return blocks(rng, size, 8,
                          {{0.62, 0.60, 0.58}, {0.72, 0.70, 0.66}, {0.55, 0.56, 0.60}, {0.78, 0.74, 0.68}});
        return value_noise(rng, size, 10, {0.52, 0.52, 0.54}, {0.76, 0.74, 0.70});
    }
    if (scene == "rural") {
        if (family == 0) return value_noise(rng, size, 8, {0.12, 0.38, 0.10}, {0.38, 0.62, 0.22});
        return blocks(rng, size, 16,
                      {{0.18, 0.45, 0.12}, {0.42, 0.58, 0.18}, {0.55, 0.52, 0.20}, {0.25, 0.50, 0.16}});
    }
    if (scene == "road") {
        RgbImage img = (family == 0)
                           ? gradient(rng, size, {0.30, 0.30, 0.32}, {0.42, 0.42, 0.44})
                           : value_noise(rng, size, 6, {0.28, 0.28, 0.30}, {0.44, 0.44, 0.46});
        // lane marking
        const int lane = 6 + rng.uniform_int(size - 12);
        for (int y = 0; y < size; ++y)
            for (int x = std::max(0, lane - 1); x <= std::min(size - 1, lane + 1); ++x)
                put(img, y, x, {0.85, 0.80, 0.35});
        return img;
    }
    if (scene == "sky") {
        RgbImage img = gradient(rng, size, {0.35, 0.58, 0.88}, {0.62, 0.78, 0.95});
        if (family == 1) {
            // soft cloud blobs
            for (int k = 0; k < 3; ++k) {
                const double cx = rng.uniform(8.0, size - 8.0), cy = rng.uniform(8.0, size - 8.0);
                const double rad = rng.uniform(6.0, 12.0);
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                        const double wgt = std::exp(-d2 / (2.0 * rad * rad));
                        const int64_t hw = static_cast<int64_t>(size) * size;
                        const int64_t i = static_cast<int64_t>(y) * size + x;
                        for (int c = 0; c < 3; ++c) {
                            double& v = img.chw.data[c * hw + i];
                            v = std::clamp(v + wgt * (0.96 - v), 0.0, 1.0);
                        }
                    }
            }
        }
        return img;
    }
    if (scene == "lake") {
        if (family == 0) return stripes(rng, size, {0.08, 0.32, 0.45}, {0.16, 0.45, 0.58}, true);
        return value_noise(rng, size, 12, {0.06, 0.28, 0.42}, {0.18, 0.42, 0.55});
    }
    throw ValidationError("unknown scene_label: " + scene);
}

const std::vector<Rgb>& vehicle_palette() {
    static const std::vector<Rgb> p = {
        {0.85, 0.12, 0.10},  // red
        {0.95, 0.55, 0.08},  // orange
        {0.55, 0.15, 0.75},  // violet
        {0.93, 0.85, 0.12},  // yellow
    };
    return p;
}

struct RoundedRect {
    double cx, cy, half_w, half_h, radius;

    bool contains(double px, double py) const {
        const double dx = std::max(std::abs(px - cx) - (half_w - radius), 0.0);
        const double dy = std::max(std::abs(py - cy) - (half_h - radius), 0.0);
        return dx * dx + dy * dy <= radius * radius;
    }
};

Mask rasterize(const RoundedRect& rr, int size) {
    Mask m(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            m.hw.at(y, x) = rr.contains(x + 0.5, y + 0.5) ? 1.0 : 0.0;
    return m;
}

RgbImage vehicle_texture(Rng& rng, const RoundedRect& rr, int size) {
    const Rgb body = vehicle_palette()[rng.uniform_int(static_cast<int>(vehicle_palette().size()))];
    const double grade = rng.uniform(0.35, 0.55);
    RgbImage img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double yr = std::clamp((y + 0.5 - (rr.cy - rr.half_h)) / (2.0 * rr.half_h), 0.0, 1.0);
            const double xr = std::clamp((x + 0.5 - (rr.cx - rr.half_w)) / (2.0 * rr.half_w), 0.0, 1.0);
            double s = 1.0 - grade * yr;  // top-lit shading
            // darker cabin band
            if (yr > 0.28 && yr < 0.52 && xr > 0.18 && xr < 0.82) s *= 0.55;
            put(img, y, x, {body.r * s, body.g * s, body.b * s});
        }
    return img;
}

Mask concept_mask(Rng& rng, int size) {
    const double fw = rng.uniform(0.62, 0.82), fh = rng.uniform(0.62, 0.82);
    RoundedRect rr;
    rr.cx = size / 2.0 + rng.uniform(-2.0, 2.0);
    rr.cy = size / 2.0 + rng.uniform(-2.0, 2.0);
    rr.half_w = fw * size / 2.0;
    rr.half_h = fh * size / 2.0;
    rr.radius = 0.25 * std::min(rr.half_w, rr.half_h);
    return rasterize(rr, size);
}

RgbImage concept_texture(Rng& rng, const std::string& name, int size) {
    if (name == "building")
        return blocks(rng, size, 6, {{0.60, 0.58, 0.55}, {0.74, 0.70, 0.64}, {0.50, 0.52, 0.57}});
    if (name == "grass") return value_noise(rng, size, 6, {0.10, 0.40, 0.08}, {0.30, 0.60, 0.18});
    if (name == "tree") return value_noise(rng, size, 5, {0.05, 0.25, 0.06}, {0.16, 0.42, 0.12});
    if (name == "sky") return gradient(rng, size, {0.40, 0.62, 0.90}, {0.66, 0.80, 0.96});
    if (name == "water") return stripes(rng, size, {0.07, 0.30, 0.44}, {0.15, 0.44, 0.57}, true);
    throw ValidationError("unknown concept_name: " + name);
}

uint64_t str_hash(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Box tight_box(const Mask& m) {
    int x0 = m.width(), y0 = m.height(), x1 = -1, y1 = -1;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m.hw.at(y, x) != 0.0) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) throw ValidationError("tight_box: empty mask");
    return Box{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
               static_cast<double>(y1 - y0 + 1)};
}

}  // namespace

const std::vector<std::string>& scene_types() {
    static const std::vector<std::string> s = {"urban", "rural", "road", "sky", "lake"};
    return s;
}

const std::vector<std::string>& concept_names() {
    static const std::vector<std::string> s = {"building", "grass", "tree", "sky", "water"};
    return s;
}

const std::map<std::string, std::string>& default_scene_concepts() {
    static const std::map<std::string, std::string> m = {{"urban", "building"},
                                                         {"rural", "grass"},
                                                         {"road", "tree"},
                                                         {"sky", "sky"},
                                                         {"lake", "water"}};
    return m;
}

RgbImage gen_background(uint64_t seed, const std::string& scene_label,
                        const CorpusParams& params) {
    Rng rng(mix_seed(seed, str_hash(scene_label) ^ 0xb6c0f1u));
    return io::quantize8(scene_background(rng, scene_label, params.image_size));
}

SceneParts gen_scene_parts(uint64_t seed, const std::string& scene_label,
                           const CorpusParams& params) {
    if (std::find(scene_types().begin(), scene_types().end(), scene_label) == scene_types().end())
        throw ValidationError("gen_scene: unknown scene_label: " + scene_label);
    const int size = params.image_size;

    Rng bg_rng(mix_seed(seed, str_hash(scene_label)));
    RgbImage background = scene_background(bg_rng, scene_label, size);

    Rng pose_rng(mix_seed(seed, str_hash(scene_label) ^ 0x7e11c1eULL));
    RoundedRect rr;
    const double vw = pose_rng.uniform(16.0, 26.0);
    const double vh = pose_rng.uniform(12.0, 18.0);
    rr.half_w = vw / 2.0;
    rr.half_h = vh / 2.0;
    rr.radius = 0.30 * std::min(rr.half_w, rr.half_h);
    rr.cx = pose_rng.uniform(rr.half_w + 2.0, size - rr.half_w - 2.0);
    rr.cy = pose_rng.uniform(rr.half_h + 2.0, size - rr.half_h - 2.0);

    SceneParts parts;
    parts.mask = rasterize(rr, size);
    parts.background = io::quantize8(background);
    parts.vehicle_layer = io::quantize8(vehicle_texture(pose_rng, rr, size));
    return parts;
}

SceneRecord gen_scene(uint64_t seed, const std::string& scene_label, const CorpusParams& params) {
    SceneParts parts = gen_scene_parts(seed, scene_label, params);
    SceneRecord rec;
    rec.image = maskops::composite(parts.vehicle_layer, parts.background, parts.mask);
    rec.vehicle_mask = parts.mask;
    rec.box = tight_box(parts.mask);
    rec.scene_label = scene_label;
    rec.objects = {"vehicle", default_scene_concepts().at(scene_label)};
    rec.seed = seed;
    std::string objs;
    for (size_t i = 0; i < rec.objects.size(); ++i)
        objs += (i ? ", " : "") + rec.objects[i];
    rec.prompt = "an image of " + scene_label + " area with " + objs;
    rec.checksum = io::pixel_crc32(rec.image, rec.vehicle_mask);
    return rec;
}

ConceptExemplar gen_concept_exemplar(uint64_t seed, const std::string& scene_label,
                                     const std::string& concept_name, int size) {
    if (std::find(scene_types().begin(), scene_types().end(), scene_label) == scene_types().end())
        throw ValidationError("gen_concept_exemplar: unknown scene_label: " + scene_label);
    if (std::find(concept_names().begin(), concept_names().end(), concept_name) ==
        concept_names().end())
        throw ValidationError("gen_concept_exemplar: unknown concept_name: " + concept_name);
    Rng rng(mix_seed(seed, str_hash(scene_label + "/" + concept_name)));
    ConceptExemplar ex;
    ex.image = io::quantize8(concept_texture(rng, concept_name, size));
    ex.concept_mask = concept_mask(rng, size);
    ex.concept_name = concept_name;
    ex.scene_label = scene_label;
    return ex;
}

std::vector<const SceneRecord*> Corpus::split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw ValidationError("corpus: unknown split: " + name);
    std::vector<const SceneRecord*> out;
    out.reserve(it->second.second);
    for (int i = 0; i < it->second.second; ++i) out.push_back(&records[it->second.first + i]);
    return out;
}

Corpus build_corpus(const CorpusParams& params) {
    Corpus c;
    c.params = params;
    // Splits are disjoint by seed range: each split draws seeds from its own
    // offset block.
    const struct {
        const char* name;
        int count;
        uint64_t offset;
    } defs[] = {{"train", params.train_count, 0},
                {"val", params.val_count, 1000000},
                {"test", params.test_count, 2000000}};
    int index = 0;
    for (const auto& d : defs) {
        c.splits[d.name] = {index, d.count};
        for (int i = 0; i < d.count; ++i, ++index) {
            const uint64_t seed = params.base_seed + d.offset + static_cast<uint64_t>(i);
            const std::string& scene = scene_types()[i % scene_types().size()];
            SceneRecord rec = gen_scene(seed, scene, params);
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%06d", index);
            rec.id = buf;
            c.records.push_back(std::move(rec));
        }
    }
    return c;
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    fs::create_directories(fs::path(dir) / "meta");
    for (const auto& rec : corpus.records) {
        io::write_png_rgb8((fs::path(dir) / "images" / (rec.id + ".png")).string(), rec.image);
        io::write_png_gray8((fs::path(dir) / "masks" / (rec.id + ".png")).string(),
                            rec.vehicle_mask);
        json meta;
        meta["id"] = rec.id;
        meta["scene_label"] = rec.scene_label;
        meta["objects"] = rec.objects;
        meta["box"] = {rec.box.x, rec.box.y, rec.box.w, rec.box.h};
        meta["seed"] = rec.seed;
        meta["prompt"] = rec.prompt;
        meta["checksum"] = rec.checksum;
        std::ofstream mf(fs::path(dir) / "meta" / (rec.id + ".json"));
        mf << meta.dump(2) << "\n";
    }
    json manifest;
    manifest["format_version"] = 1;
    manifest["generator_params"] = {{"image_size", corpus.params.image_size},
                                    {"train_count", corpus.params.train_count},
                                    {"val_count", corpus.params.val_count},
                                    {"test_count", corpus.params.test_count},
                                    {"base_seed", corpus.params.base_seed}};
    json splits;
    for (const auto& [name, fc] : corpus.splits)
        splits[name] = {{"first", fc.first}, {"count", fc.second}};
    manifest["splits"] = splits;
    manifest["record_count"] = corpus.records.size();
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

Corpus read_corpus(const std::string& dir) {
    Corpus c;
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream mf(mpath);
    if (!mf) {
        // An empty directory is an empty corpus.
        if (fs::exists(dir) && fs::is_directory(dir) && fs::is_empty(dir)) return c;
        throw LoadError("read_corpus: missing manifest " + mpath.string());
    }
    json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw LoadError("read_corpus: corrupt manifest: " + std::string(e.what()));
    }
    const auto& gp = manifest.at("generator_params");
    c.params.image_size = gp.at("image_size").get<int>();
    c.params.train_count = gp.at("train_count").get<int>();
    c.params.val_count = gp.at("val_count").get<int>();
    c.params.test_count = gp.at("test_count").get<int>();
    c.params.base_seed = gp.at("base_seed").get<uint64_t>();
    for (const auto& [name, fc] : manifest.at("splits").items())
        c.splits[name] = {fc.at("first").get<int>(), fc.at("count").get<int>()};

    const size_t count = manifest.at("record_count").get<size_t>();
    c.records.reserve(count);
    for (size_t k = 0; k < count; ++k) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%06zu", k);
        const std::string id = buf;
        SceneRecord rec;
        rec.id = id;
        rec.image = io::read_png_rgb8((fs::path(dir) / "images" / (id + ".png")).string());
        rec.vehicle_mask = io::read_png_gray8((fs::path(dir) / "masks" / (id + ".png")).string());
        const fs::path metap = fs::path(dir) / "meta" / (id + ".json");
        std::ifstream metaf(metap);
        if (!metaf) throw LoadError("read_corpus: missing meta " + metap.string());
        json meta;
        try {
            metaf >> meta;
        } catch (const std::exception& e) {
            throw LoadError("read_corpus: corrupt meta for record " + id + ": " + e.what());
        }
        rec.scene_label = meta.at("scene_label").get<std::string>();
        rec.objects = meta.at("objects").get<std::vector<std::string>>();
        const auto bx = meta.at("box").get<std::vector<double>>();
        rec.box = Box{bx[0], bx[1], bx[2], bx[3]};
        rec.seed = meta.at("seed").get<uint64_t>();
        rec.prompt = meta.at("prompt").get<std::string>();
        rec.checksum = meta.at("checksum").get<uint32_t>();
        const uint32_t actual = io::pixel_crc32(rec.image, rec.vehicle_mask);
        if (actual != rec.checksum)
            throw LoadError("read_corpus: checksum mismatch for record " + id);
        c.records.push_back(std::move(rec));
    }
    return c;
}

uint64_t corpus_manifest_hash(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw LoadError("corpus_manifest_hash: missing manifest in " + dir);
    std::string all((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
    return str_hash(all) ^ 0x5eedULL;
}

}  // namespace camo::corpus
