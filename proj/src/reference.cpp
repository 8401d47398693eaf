#include "camo/reference.hpp"

#include "camo/colorspace.hpp"
#include "camo/maskops.hpp"

namespace camo::reference {

Mode mode_from_string(const std::string& s) {
    if (s == "image_level") return Mode::image_level;
    if (s == "scene_level") return Mode::scene_level;
    throw ValidationError("strategy: unknown mode " + s);
}

std::string mode_to_string(Mode m) {
    return m == Mode::image_level ? "image_level" : "scene_level";
}

std::pair<RgbImage, Mask> select_reference(const corpus::SceneRecord& record,
                                           const StrategyConfig& cfg) {
    if (cfg.mode == Mode::image_level) {
        Mask m_s = maskops::annulus(record.vehicle_mask, cfg.dilation_kernel_px);
        if (m_s.count() == 0)
            throw ValidationError("select_reference: empty annulus (degenerate reference)");
        return {record.image, std::move(m_s)};
    }
    auto it = cfg.scene_concept_map.find(record.scene_label);
    if (it == cfg.scene_concept_map.end())
        throw ValidationError("select_reference: scene label not in concept map: " +
                              record.scene_label);
    corpus::ConceptExemplar ex = corpus::gen_concept_exemplar(
        cfg.exemplar_seed, record.scene_label, it->second, record.image.height());
    return {std::move(ex.image), std::move(ex.concept_mask)};
}

backend::Conditioning build_conditioning(const corpus::SceneRecord& record,
                                         const StrategyConfig& cfg) {
    auto [x_s, m_s] = select_reference(record, cfg);
    backend::Conditioning cond;
    cond.l_channel = colorspace::normalized_l(record.image);
    const int64_t hw = static_cast<int64_t>(x_s.height()) * x_s.width();
    RgbImage ref(x_s.height(), x_s.width());
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            ref.chw.data[c * hw + i] = x_s.chw.data[c * hw + i] * m_s.hw.data[i];
    cond.ref_area = std::move(ref);
    cond.vehicle_mask = record.vehicle_mask;
    if (cfg.mode == Mode::image_level) {
        RgbImage bg(record.image.height(), record.image.width());
        const int64_t ihw = static_cast<int64_t>(record.image.height()) * record.image.width();
        for (int c = 0; c < 3; ++c)
            for (int64_t i = 0; i < ihw; ++i)
                bg.chw.data[c * ihw + i] =
                    record.image.chw.data[c * ihw + i] * (1.0 - record.vehicle_mask.hw.data[i]);
        cond.background = std::move(bg);
    }
    return cond;
}

}  // namespace camo::reference
