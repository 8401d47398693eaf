#pragma once

#include <map>
#include <string>
#include <vector>

#include "camo/losses.hpp"
#include "camo/reference.hpp"

namespace camo::config {

struct CorpusSection {
    std::string dir = "runs/corpus";
    int image_size = 64;
    int train_count = 2000;
    int val_count = 200;
    int test_count = 200;
    uint64_t base_seed = 1234;
};

struct BackendSection {
    std::string mode = "diffusion";  // diffusion | rectflow
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::string rectflow_target = "z0_minus_eps";  // | eps_minus_z0
    int sample_steps = 30;
    int rectflow_sample_steps = 28;
    int latent_channels = 4;
    int ae_base = 24;
    int ae_iterations = 2500;
    int ae_batch = 8;
    double ae_lr = 1.5e-3;
    uint64_t ae_seed = 11;
    std::string ae_checkpoint = "runs/ae";
    // denoising-pretrained base model the stages fine-tune
    int base_iterations = 2500;
    int base_batch = 8;
    double base_lr = 1e-3;
    uint64_t base_seed = 12;
    std::string base_checkpoint = "runs/base";
};

struct CriticSection {
    int classes = 5;
    int iterations = 1500;
    int batch = 8;
    double lr = 1e-3;
    uint64_t seed = 13;
    std::string checkpoint = "runs/critic";
};

struct DetectorSection {
    std::string variant = "wide_shallow";  // | narrow_deep
    int grid = 8;
    int iterations = 3000;
    int batch = 8;
    double lr = 1e-3;
    double pos_weight = 8.0;
    uint64_t seed = 17;
    std::string checkpoint = "runs/detector_white";
};

struct StrategySection {
    std::string mode = "scene_level";
    int dilation_kernel_px = 9;
    std::map<std::string, std::string> scene_concept_map;  // defaults filled in
    uint64_t exemplar_seed = 7;

    reference::StrategyConfig to_strategy() const;
};

struct ToggleSection {
    bool struct_t = true;
    bool style = true;
    bool background = true;
    bool color = true;
    bool adv = true;
};

struct StageSection {
    losses::LossWeights weights;
    double learning_rate = 1e-4;
    int iterations = 3000;
    int batch = 4;
    uint64_t seed = 21;
    int checkpoint_every = 1000;
    ToggleSection toggles;
    std::string init_checkpoint;      // stage 2 only: stage-1 checkpoint
    std::string detector_checkpoint;  // stage 2 / one-stage
};

struct DetectorRef {
    std::string id;
    std::string checkpoint;
};

struct EvalSection {
    std::string split = "test";
    std::string checkpoint = "runs/stage2/checkpoints/final";
    std::vector<DetectorRef> detectors;
    std::string defense = "none";  // none | nlm | bilateral
    int n_backgrounds = 5;
    double detect_conf = 0.05;
    double nms_iou = 0.5;
    double ssim_margin = 0.1;
    uint64_t seed = 99;
    int max_images = 0;  // 0 = whole split
    std::vector<std::string> report_inputs;
};

struct RunConfig {
    CorpusSection corpus;
    BackendSection backend;
    CriticSection critic;
    DetectorSection detector;
    StrategySection strategy;
    StageSection stage1;
    StageSection stage2;
    EvalSection eval;
};

RunConfig default_config();
// Strict parse: unknown keys anywhere are rejected with a validation error.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& text);
std::string dump_config(const RunConfig& cfg);
uint64_t config_hash(const RunConfig& cfg);

// Cross-section invariants (e.g. beta = 0 iff scene-level).
void validate(const RunConfig& cfg);

}  // namespace camo::config
