#include "camo/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

#include "camo/synthcorpus.hpp"

namespace camo::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
    if (!j.is_object()) throw ValidationError("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key))
            throw ValidationError("config: unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_weights(const json& j, losses::LossWeights& w) {
    reject_unknown(j, {"struct", "alpha", "beta", "gamma", "lambda"}, "weights");
    if (j.contains("struct")) w.struct_w = j.at("struct").get<double>();
    opt(j, "alpha", w.alpha);
    opt(j, "beta", w.beta);
    opt(j, "gamma", w.gamma);
    opt(j, "lambda", w.lambda);
}

void parse_toggles(const json& j, ToggleSection& t) {
    reject_unknown(j, {"struct", "style", "background", "color", "adv"}, "loss_toggles");
    if (j.contains("struct")) t.struct_t = j.at("struct").get<bool>();
    opt(j, "style", t.style);
    opt(j, "background", t.background);
    opt(j, "color", t.color);
    opt(j, "adv", t.adv);
}

void parse_stage(const json& j, StageSection& s, const std::string& where) {
    reject_unknown(j,
                   {"weights", "learning_rate", "iterations", "batch", "seed",
                    "checkpoint_every", "loss_toggles", "init_checkpoint", "detector_checkpoint"},
                   where);
    if (j.contains("weights")) parse_weights(j.at("weights"), s.weights);
    opt(j, "learning_rate", s.learning_rate);
    opt(j, "iterations", s.iterations);
    opt(j, "batch", s.batch);
    opt(j, "seed", s.seed);
    opt(j, "checkpoint_every", s.checkpoint_every);
    if (j.contains("loss_toggles")) parse_toggles(j.at("loss_toggles"), s.toggles);
    opt(j, "init_checkpoint", s.init_checkpoint);
    opt(j, "detector_checkpoint", s.detector_checkpoint);
}

json weights_json(const losses::LossWeights& w) {
    return {{"struct", w.struct_w}, {"alpha", w.alpha}, {"beta", w.beta},
            {"gamma", w.gamma},     {"lambda", w.lambda}};
}

json toggles_json(const ToggleSection& t) {
    return {{"struct", t.struct_t}, {"style", t.style}, {"background", t.background},
            {"color", t.color},     {"adv", t.adv}};
}

json stage_json(const StageSection& s) {
    return {{"weights", weights_json(s.weights)},
            {"learning_rate", s.learning_rate},
            {"iterations", s.iterations},
            {"batch", s.batch},
            {"seed", s.seed},
            {"checkpoint_every", s.checkpoint_every},
            {"loss_toggles", toggles_json(s.toggles)},
            {"init_checkpoint", s.init_checkpoint},
            {"detector_checkpoint", s.detector_checkpoint}};
}

}  // namespace

reference::StrategyConfig StrategySection::to_strategy() const {
    reference::StrategyConfig s;
    s.mode = reference::mode_from_string(mode);
    s.dilation_kernel_px = dilation_kernel_px;
    s.scene_concept_map = scene_concept_map;
    s.exemplar_seed = exemplar_seed;
    return s;
}

RunConfig default_config() {
    RunConfig c;
    c.strategy.scene_concept_map = corpus::default_scene_concepts();
    // Stage presets follow the published training tables, scaled to the toy
    // model (scene-level: beta = 0).
    c.stage1.weights = {5.0, 1.0, 0.0, 0.0, 0.0};
    c.stage1.seed = 21;
    c.stage1.init_checkpoint = "runs/base";
    c.stage2.weights = {5.0, 1.0, 0.0, 2.0, 1.0};
    c.stage2.seed = 22;
    c.stage2.init_checkpoint = "runs/stage1/checkpoints/final";
    c.stage2.detector_checkpoint = "runs/detector_white";
    c.eval.detectors = {{"white", "runs/detector_white"}, {"black", "runs/detector_black"}};
    return c;
}

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ValidationError(std::string("config: parse error: ") + e.what());
    }
    reject_unknown(j, {"corpus", "backend", "critic", "detector", "strategy", "stage1", "stage2",
                       "eval"},
                   "top level");
    RunConfig c = default_config();

    if (j.contains("corpus")) {
        const auto& s = j.at("corpus");
        reject_unknown(s, {"dir", "image_size", "train_count", "val_count", "test_count",
                           "base_seed"},
                       "corpus");
        opt(s, "dir", c.corpus.dir);
        opt(s, "image_size", c.corpus.image_size);
        opt(s, "train_count", c.corpus.train_count);
        opt(s, "val_count", c.corpus.val_count);
        opt(s, "test_count", c.corpus.test_count);
        opt(s, "base_seed", c.corpus.base_seed);
    }
    if (j.contains("backend")) {
        const auto& s = j.at("backend");
        reject_unknown(s,
                       {"mode", "timesteps", "beta_start", "beta_end", "rectflow_target",
                        "sample_steps", "rectflow_sample_steps", "latent_channels", "ae_base",
                        "ae_iterations", "ae_batch", "ae_lr", "ae_seed", "ae_checkpoint",
                        "base_iterations", "base_batch", "base_lr", "base_seed",
                        "base_checkpoint"},
                       "backend");
        opt(s, "mode", c.backend.mode);
        opt(s, "timesteps", c.backend.timesteps);
        opt(s, "beta_start", c.backend.beta_start);
        opt(s, "beta_end", c.backend.beta_end);
        opt(s, "rectflow_target", c.backend.rectflow_target);
        opt(s, "sample_steps", c.backend.sample_steps);
        opt(s, "rectflow_sample_steps", c.backend.rectflow_sample_steps);
        opt(s, "latent_channels", c.backend.latent_channels);
        opt(s, "ae_base", c.backend.ae_base);
        opt(s, "ae_iterations", c.backend.ae_iterations);
        opt(s, "ae_batch", c.backend.ae_batch);
        opt(s, "ae_lr", c.backend.ae_lr);
        opt(s, "ae_seed", c.backend.ae_seed);
        opt(s, "ae_checkpoint", c.backend.ae_checkpoint);
        opt(s, "base_iterations", c.backend.base_iterations);
        opt(s, "base_batch", c.backend.base_batch);
        opt(s, "base_lr", c.backend.base_lr);
        opt(s, "base_seed", c.backend.base_seed);
        opt(s, "base_checkpoint", c.backend.base_checkpoint);
    }
    if (j.contains("critic")) {
        const auto& s = j.at("critic");
        reject_unknown(s, {"classes", "iterations", "batch", "lr", "seed", "checkpoint"},
                       "critic");
        opt(s, "classes", c.critic.classes);
        opt(s, "iterations", c.critic.iterations);
        opt(s, "batch", c.critic.batch);
        opt(s, "lr", c.critic.lr);
        opt(s, "seed", c.critic.seed);
        opt(s, "checkpoint", c.critic.checkpoint);
    }
    if (j.contains("detector")) {
        const auto& s = j.at("detector");
        reject_unknown(s,
                       {"variant", "grid", "iterations", "batch", "lr", "pos_weight", "seed",
                        "checkpoint"},
                       "detector");
        opt(s, "variant", c.detector.variant);
        opt(s, "grid", c.detector.grid);
        opt(s, "iterations", c.detector.iterations);
        opt(s, "batch", c.detector.batch);
        opt(s, "lr", c.detector.lr);
        opt(s, "pos_weight", c.detector.pos_weight);
        opt(s, "seed", c.detector.seed);
        opt(s, "checkpoint", c.detector.checkpoint);
    }
    if (j.contains("strategy")) {
        const auto& s = j.at("strategy");
        reject_unknown(s, {"mode", "dilation_kernel_px", "scene_concept_map", "exemplar_seed"},
                       "strategy");
        opt(s, "mode", c.strategy.mode);
        opt(s, "dilation_kernel_px", c.strategy.dilation_kernel_px);
        if (s.contains("scene_concept_map"))
            c.strategy.scene_concept_map =
                s.at("scene_concept_map").get<std::map<std::string, std::string>>();
        opt(s, "exemplar_seed", c.strategy.exemplar_seed);
    }
    if (j.contains("stage1")) parse_stage(j.at("stage1"), c.stage1, "stage1");
    if (j.contains("stage2")) parse_stage(j.at("stage2"), c.stage2, "stage2");
    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        reject_unknown(s,
                       {"split", "checkpoint", "detectors", "defense", "n_backgrounds",
                        "detect_conf", "nms_iou", "ssim_margin", "seed", "max_images",
                        "report_inputs"},
                       "eval");
        opt(s, "split", c.eval.split);
        opt(s, "checkpoint", c.eval.checkpoint);
        if (s.contains("detectors")) {
            c.eval.detectors.clear();
            for (const auto& d : s.at("detectors")) {
                reject_unknown(d, {"id", "checkpoint"}, "eval.detectors[]");
                c.eval.detectors.push_back(
                    {d.at("id").get<std::string>(), d.at("checkpoint").get<std::string>()});
            }
        }
        opt(s, "defense", c.eval.defense);
        opt(s, "n_backgrounds", c.eval.n_backgrounds);
        opt(s, "detect_conf", c.eval.detect_conf);
        opt(s, "nms_iou", c.eval.nms_iou);
        opt(s, "ssim_margin", c.eval.ssim_margin);
        opt(s, "seed", c.eval.seed);
        opt(s, "max_images", c.eval.max_images);
        if (s.contains("report_inputs"))
            c.eval.report_inputs = s.at("report_inputs").get<std::vector<std::string>>();
    }
    validate(c);
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

std::string dump_config(const RunConfig& c) {
    json j;
    j["corpus"] = {{"dir", c.corpus.dir},
                   {"image_size", c.corpus.image_size},
                   {"train_count", c.corpus.train_count},
                   {"val_count", c.corpus.val_count},
                   {"test_count", c.corpus.test_count},
                   {"base_seed", c.corpus.base_seed}};
    j["backend"] = {{"mode", c.backend.mode},
                    {"timesteps", c.backend.timesteps},
                    {"beta_start", c.backend.beta_start},
                    {"beta_end", c.backend.beta_end},
                    {"rectflow_target", c.backend.rectflow_target},
                    {"sample_steps", c.backend.sample_steps},
                    {"rectflow_sample_steps", c.backend.rectflow_sample_steps},
                    {"latent_channels", c.backend.latent_channels},
                    {"ae_base", c.backend.ae_base},
                    {"ae_iterations", c.backend.ae_iterations},
                    {"ae_batch", c.backend.ae_batch},
                    {"ae_lr", c.backend.ae_lr},
                    {"ae_seed", c.backend.ae_seed},
                    {"ae_checkpoint", c.backend.ae_checkpoint},
                    {"base_iterations", c.backend.base_iterations},
                    {"base_batch", c.backend.base_batch},
                    {"base_lr", c.backend.base_lr},
                    {"base_seed", c.backend.base_seed},
                    {"base_checkpoint", c.backend.base_checkpoint}};
    j["critic"] = {{"classes", c.critic.classes},   {"iterations", c.critic.iterations},
                   {"batch", c.critic.batch},       {"lr", c.critic.lr},
                   {"seed", c.critic.seed},         {"checkpoint", c.critic.checkpoint}};
    j["detector"] = {{"variant", c.detector.variant},       {"grid", c.detector.grid},
                     {"iterations", c.detector.iterations}, {"batch", c.detector.batch},
                     {"lr", c.detector.lr},                 {"pos_weight", c.detector.pos_weight},
                     {"seed", c.detector.seed},             {"checkpoint", c.detector.checkpoint}};
    j["strategy"] = {{"mode", c.strategy.mode},
                     {"dilation_kernel_px", c.strategy.dilation_kernel_px},
                     {"scene_concept_map", c.strategy.scene_concept_map},
                     {"exemplar_seed", c.strategy.exemplar_seed}};
    j["stage1"] = stage_json(c.stage1);
    j["stage2"] = stage_json(c.stage2);
    json dets = json::array();
    for (const auto& d : c.eval.detectors)
        dets.push_back({{"id", d.id}, {"checkpoint", d.checkpoint}});
    j["eval"] = {{"split", c.eval.split},
                 {"checkpoint", c.eval.checkpoint},
                 {"detectors", dets},
                 {"defense", c.eval.defense},
                 {"n_backgrounds", c.eval.n_backgrounds},
                 {"detect_conf", c.eval.detect_conf},
                 {"nms_iou", c.eval.nms_iou},
                 {"ssim_margin", c.eval.ssim_margin},
                 {"seed", c.eval.seed},
                 {"max_images", c.eval.max_images},
                 {"report_inputs", c.eval.report_inputs}};
    return j.dump(2);
}

uint64_t config_hash(const RunConfig& cfg) {
    const std::string s = dump_config(cfg);
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

void validate(const RunConfig& c) {
    if (c.backend.mode != "diffusion" && c.backend.mode != "rectflow")
        throw ValidationError("config: backend.mode must be diffusion or rectflow");
    if (c.backend.rectflow_target != "z0_minus_eps" && c.backend.rectflow_target != "eps_minus_z0")
        throw ValidationError("config: bad backend.rectflow_target");
    if (c.eval.defense != "none" && c.eval.defense != "nlm" && c.eval.defense != "bilateral")
        throw ValidationError("config: eval.defense must be none, nlm, or bilateral");
    reference::mode_from_string(c.strategy.mode);
    // beta = 0 iff scene-level (both stage objectives).
    const bool scene = c.strategy.mode == "scene_level";
    for (const StageSection* s : {&c.stage1, &c.stage2}) {
        if (scene && s->weights.beta != 0.0)
            throw ValidationError("config: beta must be 0 for the scene-level strategy");
        if (!scene && s->weights.beta == 0.0)
            throw ValidationError("config: beta must be nonzero for the image-level strategy");
        if (s->weights.struct_w < 0 || s->weights.alpha < 0 || s->weights.beta < 0 ||
            s->weights.gamma < 0 || s->weights.lambda < 0)
            throw ValidationError("config: loss weights must be nonnegative");
    }
}

}  // namespace camo::config
