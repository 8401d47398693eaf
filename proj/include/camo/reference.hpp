#pragma once

#include <map>

#include "camo/backend.hpp"

namespace camo::reference {

enum class Mode { image_level, scene_level };

struct StrategyConfig {
    Mode mode = Mode::scene_level;
    int dilation_kernel_px = 9;  // image-level annulus width at 64x64
    std::map<std::string, std::string> scene_concept_map;
    uint64_t exemplar_seed = 7;
};

Mode mode_from_string(const std::string& s);
std::string mode_to_string(Mode m);

// Style exemplar for one record: image-level takes the dilated annulus around
// the vehicle; scene-level takes the shared concept exemplar of the record's
// scene type.
std::pair<RgbImage, Mask> select_reference(const corpus::SceneRecord& record,
                                           const StrategyConfig& cfg);

backend::Conditioning build_conditioning(const corpus::SceneRecord& record,
                                         const StrategyConfig& cfg);

}  // namespace camo::reference
