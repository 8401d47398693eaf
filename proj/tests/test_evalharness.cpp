#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "camo/evalharness.hpp"
#include "camo/image_io.hpp"
#include "camo/maskops.hpp"
#include "tiny_stack.hpp"

using namespace camo;
namespace ev = camo::eval;
namespace fs = std::filesystem;
using nlohmann::json;

TEST_SUITE_BEGIN("evalharness");

namespace {

RgbImage random_image(int h, int w, Rng& rng) {
    RgbImage img(h, w);
    for (auto& v : img.chw.data) v = rng.uniform();
    return img;
}

backend::Denoiser quick_model(camo::testing::TinyStack& ts) {
    backend::DenoiserConfig dcfg{4, 16, false, 32, 6};
    backend::Denoiser model(dcfg, 1717);
    auto in = [&] {
        pipeline::StageInputs i;
        i.corpus = &ts.corpus;
        i.ae = &ts.ae;
        i.critic_model = &ts.critic_model;
        i.sched = ts.sched;
        i.strategy = camo::testing::scene_strategy();
        return i;
    }();
    config::StageSection scfg;
    scfg.weights = {5.0, 1.0, 0.0, 0.0, 0.0};
    scfg.iterations = 30;
    scfg.batch = 2;
    scfg.seed = 81;
    scfg.checkpoint_every = 0;
    fs::remove_all("runs_test/eval_model");
    const std::string ckpt =
        pipeline::train_stage(pipeline::Stage::no_box, in, scfg, "runs_test/eval_model");
    model.load(ckpt);
    return model;
}

}  // namespace

TEST_CASE("ssim identity, symmetry, constant-patch closed form, errors") {
    Rng rng(1);
    RgbImage a = random_image(16, 16, rng);
    RgbImage b = random_image(16, 16, rng);
    CHECK(std::abs(ev::ssim(a, a) - 1.0) <= 1e-9);
    CHECK(std::abs(ev::ssim(a, b) - ev::ssim(b, a)) <= 1e-9);

    RgbImage ca(12, 12), cb(12, 12);
    std::fill(ca.chw.data.begin(), ca.chw.data.end(), 0.2);
    std::fill(cb.chw.data.begin(), cb.chw.data.end(), 0.8);
    // closed form for constant patches: (2ab + C1) / (a^2 + b^2 + C1)
    const double ya = 0.2, yb = 0.8, c1 = 0.01 * 0.01;
    const double expect = (2 * ya * yb + c1) / (ya * ya + yb * yb + c1);
    CHECK(ev::ssim(ca, cb) == doctest::Approx(expect).epsilon(1e-9));

    RgbImage small(8, 8);
    CHECK_THROWS_AS(ev::ssim(small, small), ValidationError);
    CHECK_THROWS_AS(ev::ssim(a, RgbImage(16, 17)), ValidationError);
}

TEST_CASE("vehicle crop") {
    Rng rng(2);
    RgbImage img = random_image(64, 64, rng);

    Box box{10, 20, 8, 6};
    RgbImage crop = ev::vehicle_crop(img, box, 0.0);
    CHECK(crop.width() == 8);
    CHECK(crop.height() == 6);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 8; ++x)
            CHECK(crop.chw.at(0, y, x) == img.chw.at(0, y + 20, x + 10));

    Box corner{0, 0, 10, 10};
    RgbImage cc = ev::vehicle_crop(img, corner, 0.2);
    CHECK(cc.width() == 12);  // clamped left at 0, extended right
    CHECK(cc.height() == 12);

    for (int trial = 0; trial < 20; ++trial) {
        Box rb{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 20), rng.uniform(4, 20)};
        RgbImage rc = ev::vehicle_crop(img, rb, 0.1);
        const int x0 = std::max(0, static_cast<int>(std::floor(rb.x - 0.1 * rb.w)));
        const int y0 = std::max(0, static_cast<int>(std::floor(rb.y - 0.1 * rb.h)));
        const int x1 = std::min(64, static_cast<int>(std::ceil(rb.x + rb.w + 0.1 * rb.w)));
        const int y1 = std::min(64, static_cast<int>(std::ceil(rb.y + rb.h + 0.1 * rb.h)));
        CHECK(rc.width() == x1 - x0);
        CHECK(rc.height() == y1 - y0);
        CHECK(rc.chw.at(1, 0, 0) == img.chw.at(1, y0, x0));
    }
    CHECK_THROWS_AS(ev::vehicle_crop(img, Box{5, 5, 0, 4}, 0.1), ValidationError);
}

TEST_CASE("defense filters") {
    RgbImage flat(16, 16);
    std::fill(flat.chw.data.begin(), flat.chw.data.end(), 0.42);
    RgbImage bf = ev::bilateral_filter(flat);
    CHECK(bf.chw.max_abs_diff(flat.chw) <= 1e-12);

    Rng rng(3);
    RgbImage probe = random_image(8, 8, rng);
    RgbImage got = ev::nlm_denoise(probe, 3, 7, 0.1);
    // direct patch-weighted-mean oracle
    auto clampi = [](int v, int lo, int hi) { return std::min(hi, std::max(lo, v)); };
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double wsum = 0, acc[3] = {0, 0, 0};
            for (int qy = y - 3; qy <= y + 3; ++qy)
                for (int qx = x - 3; qx <= x + 3; ++qx) {
                    const int cy = clampi(qy, 0, 7), cx = clampi(qx, 0, 7);
                    double d2 = 0;
                    for (int oy = -1; oy <= 1; ++oy)
                        for (int ox = -1; ox <= 1; ++ox)
                            for (int c = 0; c < 3; ++c) {
                                const double dpx =
                                    probe.chw.at(c, clampi(y + oy, 0, 7), clampi(x + ox, 0, 7)) -
                                    probe.chw.at(c, clampi(cy + oy, 0, 7), clampi(cx + ox, 0, 7));
                                d2 += dpx * dpx;
                            }
                    d2 /= 27.0;
                    const double w = std::exp(-d2 / 0.01);
                    wsum += w;
                    for (int c = 0; c < 3; ++c) acc[c] += w * probe.chw.at(c, cy, cx);
                }
            for (int c = 0; c < 3; ++c)
                CHECK(got.chw.at(c, y, x) == doctest::Approx(acc[c] / wsum).epsilon(1e-12));
        }

    CHECK(ev::apply_defense(probe, "none").chw.max_abs_diff(probe.chw) == 0.0);
    CHECK_THROWS_AS(ev::apply_defense(probe, "blur"), ValidationError);
}

TEST_CASE("evaluate: rows recompute exactly from persisted artifacts") {
    auto& ts = camo::testing::tiny_stack();
    backend::Denoiser model = quick_model(ts);

    ev::EvalContext ctx;
    ctx.corpus = &ts.corpus;
    ctx.ae = &ts.ae;
    ctx.model = &model;
    ctx.detectors = {{"white", &ts.det_white}, {"black", &ts.det_black}};
    ctx.sched = ts.sched;
    ctx.strategy = camo::testing::scene_strategy();
    ctx.sample_steps = 4;
    ctx.max_images = 6;
    ctx.seed = 17;
    ctx.config_hash = 99;
    ctx.corpus_hash = 98;

    fs::remove_all("runs_test/eval_out");
    ev::EvalReport report = ev::evaluate(ctx, "runs_test/eval_out");
    REQUIRE(report.rows.size() == 2);
    for (const auto& row : report.rows) {
        CHECK(row.ap50_clean >= 0.0);
        CHECK(row.ap50_clean <= 1.0);
        CHECK(row.asr >= 0.0);
        CHECK(row.asr <= 1.0);
        CHECK(row.ssim_mean >= -1.0);
        CHECK(row.ssim_mean <= 1.0);
    }

    // AP50 recomputation from the persisted detection sets (oracle route)
    for (const auto& row : report.rows) {
        auto clean = detect::read_detection_sets("runs_test/eval_out/detections_clean_" +
                                                 row.detector_id + ".jsonl");
        auto attacked = detect::read_detection_sets("runs_test/eval_out/detections_attacked_" +
                                                    row.detector_id + ".jsonl");
        CHECK(detect::ap50(std::span<const detect::DetectionSet>(clean)) == row.ap50_clean);
        CHECK(detect::ap50(std::span<const detect::DetectionSet>(attacked)) == row.ap50_attacked);
    }

    // the report on disk matches the returned one
    ev::EvalReport loaded = ev::read_report("runs_test/eval_out/eval.json");
    REQUIRE(loaded.rows.size() == report.rows.size());
    for (size_t i = 0; i < loaded.rows.size(); ++i) {
        CHECK(loaded.rows[i].ap50_clean == report.rows[i].ap50_clean);
        CHECK(loaded.rows[i].ap50_attacked == report.rows[i].ap50_attacked);
        CHECK(loaded.rows[i].asr == report.rows[i].asr);
    }
    CHECK(!ev::render_table(report).empty());
}

TEST_CASE("identity attack is self-consistent through report recomputation") {
    // Synthetic artifacts where the attacked detections equal the clean ones.
    const std::string dir = "runs_test/identity_eval";
    fs::remove_all(dir);
    fs::create_directories(dir);
    Rng rng(5);
    std::vector<detect::DetectionSet> sets;
    for (int i = 0; i < 6; ++i) {
        detect::DetectionSet s;
        s.image_id = "im" + std::to_string(i);
        Box gt{10.0 + i, 12.0, 10, 8};
        s.ground_truth = {gt};
        if (i % 3 != 0) s.detections.push_back({gt, 0.5 + 0.08 * i});
        sets.push_back(std::move(s));
    }
    detect::write_detection_sets(dir + "/detections_clean_d.jsonl", sets);
    detect::write_detection_sets(dir + "/detections_attacked_d.jsonl", sets);
    {
        std::ofstream pf(dir + "/per_image.jsonl");
        for (int i = 0; i < 6; ++i)
            pf << json{{"id", sets[i].image_id}, {"ssim", 1.0}, {"latency_s", 0.01}}.dump()
               << "\n";
    }
    const double thr = 0.55;
    ev::EvalReport report = ev::recompute_report(dir, {"d"}, {thr}, "scene_level");
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].ap50_clean == report.rows[0].ap50_attacked);
    CHECK(report.rows[0].ssim_mean == 1.0);
    CHECK(report.rows[0].asr == detect::attack_success_rate(sets, thr));
}

TEST_CASE("defense none is identical to the plain evaluation") {
    auto& ts = camo::testing::tiny_stack();
    backend::Denoiser model = quick_model(ts);
    ev::EvalContext ctx;
    ctx.corpus = &ts.corpus;
    ctx.ae = &ts.ae;
    ctx.model = &model;
    ctx.detectors = {{"white", &ts.det_white}};
    ctx.sched = ts.sched;
    ctx.strategy = camo::testing::scene_strategy();
    ctx.sample_steps = 3;
    ctx.max_images = 4;
    ctx.seed = 18;

    fs::remove_all("runs_test/ev_plain");
    fs::remove_all("runs_test/ev_none");
    ev::EvalReport plain = ev::evaluate(ctx, "runs_test/ev_plain");
    ev::EvalReport none = ev::evaluate_defended(ctx, "runs_test/ev_none", "none");
    REQUIRE(plain.rows.size() == none.rows.size());
    for (size_t i = 0; i < plain.rows.size(); ++i) {
        CHECK(plain.rows[i].ap50_clean == none.rows[i].ap50_clean);
        CHECK(plain.rows[i].ap50_attacked == none.rows[i].ap50_attacked);
        CHECK(plain.rows[i].ssim_mean == none.rows[i].ssim_mean);
        CHECK(plain.rows[i].asr == none.rows[i].asr);
    }
    CHECK_THROWS_AS(ev::evaluate_defended(ctx, "runs_test/ev_bad", "blur"), ValidationError);
}

TEST_CASE("cross-background transfer") {
    auto& ts = camo::testing::tiny_stack();
    backend::Denoiser model = quick_model(ts);
    ev::EvalContext ctx;
    ctx.corpus = &ts.corpus;
    ctx.ae = &ts.ae;
    ctx.model = &model;
    ctx.detectors = {{"white", &ts.det_white}};
    ctx.sched = ts.sched;
    ctx.strategy = camo::testing::scene_strategy();
    ctx.sample_steps = 3;
    ctx.max_images = 2;
    ctx.seed = 19;

    fs::remove_all("runs_test/ev_xbg0");
    ev::EvalReport empty = ev::evaluate_cross_background(ctx, "runs_test/ev_xbg0", 0);
    CHECK(empty.rows.empty());

    fs::remove_all("runs_test/ev_xbg");
    ev::EvalReport rep = ev::evaluate_cross_background(ctx, "runs_test/ev_xbg", 2);
    REQUIRE(rep.rows.size() == 1);
    CHECK(rep.rows[0].ap50_clean >= 0.0);

    // vehicle pixels identical across the synthetic composites
    const auto* rec = ts.corpus.split("test")[0];
    auto inf = pipeline::infer(model, ts.ae, *rec, ctx.strategy, ctx.sched, 3, 19);
    RgbImage bg0 = corpus::gen_background(mix_seed(rec->seed, 0xb6 + 0), rec->scene_label,
                                          ts.corpus.params);
    RgbImage bg1 = corpus::gen_background(mix_seed(rec->seed, 0xb6 + 1), rec->scene_label,
                                          ts.corpus.params);
    RgbImage c0 = maskops::composite(inf.composited, bg0, rec->vehicle_mask);
    RgbImage c1 = maskops::composite(inf.composited, bg1, rec->vehicle_mask);
    const int64_t hw = 64 * 64;
    bool bg_differs = false;
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i) {
            if (rec->vehicle_mask.hw.data[i] != 0.0)
                CHECK(c0.chw.data[c * hw + i] == c1.chw.data[c * hw + i]);
            else if (c0.chw.data[c * hw + i] != c1.chw.data[c * hw + i])
                bg_differs = true;
        }
    CHECK(bg_differs);

    // image-level checkpoints are rejected
    ctx.strategy.mode = reference::Mode::image_level;
    CHECK_THROWS_AS(ev::evaluate_cross_background(ctx, "runs_test/ev_xbg2", 2), ValidationError);
    ctx.strategy.mode = reference::Mode::scene_level;
    CHECK_THROWS_AS(ev::evaluate_cross_background(ctx, "runs_test/ev_xbg3", -1),
                    ValidationError);
}

TEST_SUITE_END();
