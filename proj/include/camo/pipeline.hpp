#pragma once

#include "camo/config.hpp"
#include "camo/losses.hpp"

namespace camo::pipeline {

enum class Stage { no_box, white_box, one_stage };

std::string stage_to_string(Stage s);

// Trained prerequisites shared by the stage trainers.
struct StageInputs {
    const corpus::Corpus* corpus = nullptr;
    const backend::Autoencoder* ae = nullptr;
    const critic::Critic* critic_model = nullptr;
    const detect::Detector* detector = nullptr;  // white_box / one_stage
    backend::NoiseSchedule sched;
    reference::StrategyConfig strategy;
    uint64_t config_hash = 0;
};

backend::DenoiserConfig make_denoiser_config(const config::RunConfig& cfg);
backend::NoiseSchedule make_schedule(const config::RunConfig& cfg);
int sample_steps_for(const config::RunConfig& cfg);

// Runs one training stage. Writes into run_dir: config.json (the stage
// section), losses.jsonl, checkpoints/step_{n}/ and checkpoints/final/,
// probe/step_{n}.json. Returns the final checkpoint path.
// init_checkpoint: required for white_box (the stage-1 model; a frozen copy
// of it provides the color-consistency reference).
std::string train_stage(Stage stage, const StageInputs& in, const config::StageSection& scfg,
                        const std::string& run_dir, const std::string& init_checkpoint = "");

struct InferResult {
    RgbImage camouflaged;
    RgbImage composited;
};

InferResult infer(const backend::Denoiser& model, const backend::Autoencoder& ae,
                  const corpus::SceneRecord& record, const reference::StrategyConfig& strategy,
                  const backend::NoiseSchedule& sched, int steps, uint64_t seed);

// Probe metrics evaluated on a fixed batch with fixed noise, comparable
// across runs and checkpoints.
struct ProbeMetrics {
    double struct_loss = 0;
    double style_loss = 0;
    double background_loss = 0;
    double mean_vehicle_confidence = 0;  // -1 when no detector given
};

ProbeMetrics probe_metrics(const backend::Denoiser& model, const StageInputs& in);

}  // namespace camo::pipeline
