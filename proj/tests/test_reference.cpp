#include <doctest.h>

#include "camo/maskops.hpp"
#include "camo/reference.hpp"

using namespace camo;
namespace rf = camo::reference;

TEST_SUITE_BEGIN("reference");

namespace {

corpus::SceneRecord record_for(const std::string& scene, uint64_t seed = 3) {
    corpus::CorpusParams p;
    return corpus::gen_scene(seed, scene, p);
}

rf::StrategyConfig image_cfg(int kernel = 9) {
    rf::StrategyConfig cfg;
    cfg.mode = rf::Mode::image_level;
    cfg.dilation_kernel_px = kernel;
    return cfg;
}

rf::StrategyConfig scene_cfg() {
    rf::StrategyConfig cfg;
    cfg.mode = rf::Mode::scene_level;
    cfg.scene_concept_map = corpus::default_scene_concepts();
    cfg.exemplar_seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("image-level reference is the dilated annulus") {
    corpus::SceneRecord rec = record_for("road");
    auto [x_s, m_s] = rf::select_reference(rec, image_cfg());
    Mask expect = maskops::annulus(rec.vehicle_mask, 9);
    CHECK(m_s.hw.max_abs_diff(expect.hw) == 0.0);
    CHECK(x_s.chw.max_abs_diff(rec.image.chw) == 0.0);

    // disjoint от the vehicle mask
    for (size_t i = 0; i < m_s.hw.data.size(); ++i)
        CHECK(m_s.hw.data[i] * rec.vehicle_mask.hw.data[i] == 0.0);

    // kernel 1 dilation is the identity -> empty annulus -> degenerate
    CHECK_THROWS_AS(rf::select_reference(rec, image_cfg(1)), ValidationError);
}

TEST_CASE("scene-level reference is shared across records of a scene") {
    corpus::SceneRecord a = record_for("rural", 3);
    corpus::SceneRecord b = record_for("rural", 4);
    auto [xa, ma] = rf::select_reference(a, scene_cfg());
    auto [xb, mb] = rf::select_reference(b, scene_cfg());
    CHECK(xa.chw.max_abs_diff(xb.chw) == 0.0);
    CHECK(ma.hw.max_abs_diff(mb.hw) == 0.0);

    rf::StrategyConfig missing = scene_cfg();
    missing.scene_concept_map.erase("rural");
    CHECK_THROWS_AS(rf::select_reference(a, missing), ValidationError);
}

TEST_CASE("select_reference is deterministic per (record, cfg)") {
    corpus::SceneRecord rec = record_for("lake", 9);
    for (const auto& cfg : {image_cfg(), scene_cfg()}) {
        auto [x1, m1] = rf::select_reference(rec, cfg);
        auto [x2, m2] = rf::select_reference(rec, cfg);
        CHECK(x1.chw.max_abs_diff(x2.chw) == 0.0);
        CHECK(m1.hw.max_abs_diff(m2.hw) == 0.0);
    }
}

TEST_CASE("conditioning bundle contents") {
    corpus::SceneRecord rec = record_for("sky", 11);

    backend::Conditioning scene_cond = rf::build_conditioning(rec, scene_cfg());
    CHECK(!scene_cond.background.has_value());
    for (double v : scene_cond.l_channel.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    backend::Conditioning img_cond = rf::build_conditioning(rec, image_cfg());
    REQUIRE(img_cond.background.has_value());
    // background equals the complement-mask composite
    const int64_t hw = static_cast<int64_t>(rec.image.height()) * rec.image.width();
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            CHECK(img_cond.background->chw.data[c * hw + i] ==
                  rec.image.chw.data[c * hw + i] * (1.0 - rec.vehicle_mask.hw.data[i]));

    // ref_area is zero outside the reference mask
    auto [x_s, m_s] = rf::select_reference(rec, image_cfg());
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            if (m_s.hw.data[i] == 0.0) CHECK(img_cond.ref_area.chw.data[c * hw + i] == 0.0);
}

TEST_SUITE_END();
