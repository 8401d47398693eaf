#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "camo/pipeline.hpp"
#include "tiny_stack.hpp"

using namespace camo;
namespace fs = std::filesystem;
using nlohmann::json;

TEST_SUITE_BEGIN("pipeline");

namespace {

config::StageSection short_stage(int iterations, uint64_t seed) {
    config::StageSection s;
    s.weights = {5.0, 1.0, 0.0, 2.0, 1.0};
    s.learning_rate = 1e-4;
    s.iterations = iterations;
    s.batch = 2;
    s.seed = seed;
    s.checkpoint_every = 0;
    return s;
}

pipeline::StageInputs inputs_for(camo::testing::TinyStack& ts, const detect::Detector* det) {
    pipeline::StageInputs in;
    in.corpus = &ts.corpus;
    in.ae = &ts.ae;
    in.critic_model = &ts.critic_model;
    in.detector = det;
    in.sched = ts.sched;
    in.strategy = camo::testing::scene_strategy();
    in.config_hash = 7777;
    return in;
}

std::vector<json> read_loss_log(const std::string& run_dir) {
    std::ifstream f(fs::path(run_dir) / "losses.jsonl");
    REQUIRE(f.is_open());
    std::vector<json> lines;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) lines.push_back(json::parse(line));
    return lines;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.is_open());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("stage-1 run: artifacts, loss reconstruction, determinism") {
    auto& ts = camo::testing::tiny_stack();
    auto in = inputs_for(ts, nullptr);
    auto scfg = short_stage(12, 71);

    fs::remove_all("runs_test/s1a");
    fs::remove_all("runs_test/s1b");
    const std::string final_a = pipeline::train_stage(pipeline::Stage::no_box, in, scfg,
                                                      "runs_test/s1a");
    CHECK(fs::exists(fs::path("runs_test/s1a") / "config.json"));
    CHECK(fs::exists(fs::path(final_a) / "manifest.json"));
    CHECK(fs::exists(fs::path("runs_test/s1a") / "probe" / "final.json"));

    auto lines = read_loss_log("runs_test/s1a");
    REQUIRE(lines.size() == 12);
    for (const auto& l : lines) {
        const auto& t = l.at("terms");
        // no detector-dependent terms in stage 1
        CHECK(t.at("adv").get<double>() == 0.0);
        CHECK(t.at("color").get<double>() == 0.0);
        const double recomputed = 5.0 * t.at("struct").get<double>() +
                                  1.0 * t.at("style").get<double>();
        CHECK(l.at("total").get<double>() == doctest::Approx(recomputed).epsilon(1e-9));
    }

    // byte-identical loss stream across identical runs
    pipeline::train_stage(pipeline::Stage::no_box, in, scfg, "runs_test/s1b");
    CHECK(slurp("runs_test/s1a/losses.jsonl") == slurp("runs_test/s1b/losses.jsonl"));
}

TEST_CASE("loss toggles reduce training to structure-only and it improves") {
    auto& ts = camo::testing::tiny_stack();
    auto in = inputs_for(ts, nullptr);

    auto scfg = short_stage(0, 72);
    scfg.toggles.style = false;
    scfg.toggles.background = false;
    fs::remove_all("runs_test/tog0");
    const std::string init_ckpt =
        pipeline::train_stage(pipeline::Stage::no_box, in, scfg, "runs_test/tog0");
    backend::DenoiserConfig dcfg{4, 16, false, 32, 6};
    backend::Denoiser init_model(dcfg, 0);
    init_model.load(init_ckpt);
    const double struct_before = pipeline::probe_metrics(init_model, in).struct_loss;

    scfg.iterations = 120;
    fs::remove_all("runs_test/tog1");
    const std::string trained_ckpt =
        pipeline::train_stage(pipeline::Stage::no_box, in, scfg, "runs_test/tog1");
    auto lines = read_loss_log("runs_test/tog1");
    for (const auto& l : lines) {
        CHECK(l.at("terms").at("style").get<double>() == 0.0);
        CHECK(l.at("terms").at("background").get<double>() == 0.0);
    }
    backend::Denoiser trained_model(dcfg, 0);
    trained_model.load(trained_ckpt);
    const double struct_after = pipeline::probe_metrics(trained_model, in).struct_loss;
    CHECK(struct_after < struct_before);
}

TEST_CASE("stage-2 requires its prerequisites") {
    auto& ts = camo::testing::tiny_stack();
    auto scfg = short_stage(4, 73);
    auto in_nodet = inputs_for(ts, nullptr);
    CHECK_THROWS_AS(pipeline::train_stage(pipeline::Stage::white_box, in_nodet, scfg,
                                          "runs_test/bad", "runs_test/s1a/checkpoints/final"),
                    NotReadyError);
    auto in = inputs_for(ts, &ts.det_white);
    CHECK_THROWS_AS(pipeline::train_stage(pipeline::Stage::white_box, in, scfg,
                                          "runs_test/bad", ""),
                    NotReadyError);
    // beta coupling enforced at the pipeline level too
    auto bad = scfg;
    bad.weights.beta = 1.0;
    CHECK_THROWS_AS(pipeline::train_stage(pipeline::Stage::no_box, in_nodet, bad,
                                          "runs_test/bad"),
                    ValidationError);
}

TEST_CASE("stage-2 run: full objective, frozen copy, zero-weight reduction") {
    auto& ts = camo::testing::tiny_stack();
    auto in = inputs_for(ts, &ts.det_white);
    const uint64_t det_hash = ts.det_white.hash();

    auto scfg = short_stage(10, 74);
    fs::remove_all("runs_test/s2");
    const std::string final_dir = pipeline::train_stage(
        pipeline::Stage::white_box, in, scfg, "runs_test/s2", "runs_test/s1a/checkpoints/final");
    CHECK(ts.det_white.hash() == det_hash);

    auto lines = read_loss_log("runs_test/s2");
    for (const auto& l : lines) {
        const auto& t = l.at("terms");
        CHECK(t.at("adv").get<double>() > 0.0);
        CHECK(t.at("color").get<double>() >= 0.0);
        const double recomputed =
            5.0 * t.at("struct").get<double>() + 1.0 * t.at("style").get<double>() +
            1.0 * t.at("adv").get<double>() + 2.0 * t.at("color").get<double>();
        CHECK(l.at("total").get<double>() == doctest::Approx(recomputed).epsilon(1e-9));
    }

    // gamma = lambda = 0 reduces the total to the stage-1 objective per step
    auto zero = short_stage(5, 75);
    zero.weights.gamma = 0.0;
    zero.weights.lambda = 0.0;
    fs::remove_all("runs_test/s2zero");
    pipeline::train_stage(pipeline::Stage::white_box, in, zero, "runs_test/s2zero",
                          "runs_test/s1a/checkpoints/final");
    for (const auto& l : read_loss_log("runs_test/s2zero")) {
        const auto& t = l.at("terms");
        const double li = 5.0 * t.at("struct").get<double>() + 1.0 * t.at("style").get<double>();
        CHECK(l.at("total").get<double>() == doctest::Approx(li).epsilon(1e-9));
    }

    // checkpoint is consumable by the inference path
    backend::DenoiserConfig dcfg{4, 16, false, 32, 6};
    backend::Denoiser model(dcfg, 0);
    model.load(final_dir);
    const auto* rec = ts.corpus.split("test")[0];
    auto r1 = pipeline::infer(model, ts.ae, *rec, in.strategy, ts.sched, 5, 99);
    auto r2 = pipeline::infer(model, ts.ae, *rec, in.strategy, ts.sched, 5, 99);
    CHECK(r1.composited.chw.max_abs_diff(r2.composited.chw) == 0.0);
    // composited equals the record outside the vehicle mask, exactly
    const int64_t hw = 64 * 64;
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            if (rec->vehicle_mask.hw.data[i] == 0.0)
                CHECK(r1.composited.chw.data[c * hw + i] == rec->image.chw.data[c * hw + i]);
}

TEST_CASE("one-stage run never produces a color term") {
    auto& ts = camo::testing::tiny_stack();
    auto in = inputs_for(ts, &ts.det_white);
    auto scfg = short_stage(8, 76);
    fs::remove_all("runs_test/one");
    const std::string final_dir =
        pipeline::train_stage(pipeline::Stage::one_stage, in, scfg, "runs_test/one");
    for (const auto& l : read_loss_log("runs_test/one"))
        CHECK(l.at("terms").at("color").get<double>() == 0.0);

    backend::DenoiserConfig dcfg{4, 16, false, 32, 6};
    backend::Denoiser model(dcfg, 0);
    model.load(final_dir);  // consumable by the same inference path
    const auto* rec = ts.corpus.split("test")[1];
    auto r = pipeline::infer(model, ts.ae, *rec, in.strategy, ts.sched, 3, 5);
    CHECK(r.camouflaged.chw.all_finite());
}

TEST_CASE("denoiser checkpoint round trip preserves forward outputs") {
    auto& ts = camo::testing::tiny_stack();
    backend::DenoiserConfig dcfg{4, 16, false, 32, 6};
    backend::Denoiser model(dcfg, 4242);
    Rng rng(1);
    Tensor zt = Tensor::randn({1, 4, 16, 16}, rng);
    Tensor cond = Tensor::randn({1, 5, 16, 16}, rng);
    fs::remove_all("runs_test/dn_ckpt");
    model.save("runs_test/dn_ckpt", 1);
    Tensor before = model.forward(zt, 0.25, cond);  // post-save (quantized) weights
    backend::Denoiser loaded(dcfg, 0);
    loaded.load("runs_test/dn_ckpt");
    CHECK(loaded.forward(zt, 0.25, cond).max_abs_diff(before) == 0.0);
    (void)ts;
}

TEST_SUITE_END();
