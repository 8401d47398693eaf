#pragma once

#include <map>
#include <string>
#include <vector>

#include "camo/image.hpp"

namespace camo::corpus {

// One synthetic image with its vehicle mask, label, objects and provenance.
struct SceneRecord {
    std::string id;
    RgbImage image;
    Mask vehicle_mask;
    Box box;  // tight bounding box of the mask, pixel coordinates
    std::string scene_label;
    std::vector<std::string> objects;
    uint64_t seed = 0;
    std::string prompt;
    uint32_t checksum = 0;
};

struct ConceptExemplar {
    RgbImage image;
    Mask concept_mask;
    std::string concept_name;
    std::string scene_label;
};

struct CorpusParams {
    int image_size = 64;
    int train_count = 2000;
    int val_count = 200;
    int test_count = 200;
    uint64_t base_seed = 1234;

    bool operator==(const CorpusParams&) const = default;
};

const std::vector<std::string>& scene_types();
const std::vector<std::string>& concept_names();
// Default scene -> concept pairing used for the scene-level strategy.
const std::map<std::string, std::string>& default_scene_concepts();

struct SceneParts {
    RgbImage background;
    RgbImage vehicle_layer;
    Mask mask;
};

// Deterministic generation: identical (seed, scene_label, params) give
// byte-identical results. All layers are quantized to the 8-bit grid before
// compositing, so image == composite(vehicle_layer, background, mask) exactly.
SceneParts gen_scene_parts(uint64_t seed, const std::string& scene_label,
                           const CorpusParams& params);
SceneRecord gen_scene(uint64_t seed, const std::string& scene_label, const CorpusParams& params);

// Background-only texture of the given scene type (used by the
// cross-background evaluation).
RgbImage gen_background(uint64_t seed, const std::string& scene_label,
                        const CorpusParams& params);

ConceptExemplar gen_concept_exemplar(uint64_t seed, const std::string& scene_label,
                                     const std::string& concept_name, int size = 64);

struct Corpus {
    CorpusParams params;
    std::vector<SceneRecord> records;
    // split name -> (first index, count); splits are disjoint seed ranges.
    std::map<std::string, std::pair<int, int>> splits;

    std::vector<const SceneRecord*> split(const std::string& name) const;
};

Corpus build_corpus(const CorpusParams& params);

// Directory layout: images/{id}.png, masks/{id}.png, meta/{id}.json,
// manifest.json.
void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus read_corpus(const std::string& dir);

uint64_t corpus_manifest_hash(const std::string& dir);

}  // namespace camo::corpus
