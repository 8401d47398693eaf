#pragma once

#include "camo/pipeline.hpp"

namespace camo::eval {

// Grayscale SSIM (BT.601 luma), 11x11 Gaussian window sigma=1.5, K1=0.01,
// K2=0.03, dynamic range 1, averaged over fully-valid window positions.
double ssim(const RgbImage& a, const RgbImage& b);

// Box expanded by a relative margin on every side, clamped to the frame.
RgbImage vehicle_crop(const RgbImage& img, const Box& box, double margin);

// Preprocessing defenses (pinned parameters; see README).
RgbImage nlm_denoise(const RgbImage& img, int patch = 3, int search = 7, double h = 0.1);
RgbImage bilateral_filter(const RgbImage& img, double sigma_space = 2.0,
                          double sigma_color = 0.1);
RgbImage apply_defense(const RgbImage& img, const std::string& defense);

struct EvalRow {
    std::string detector_id;
    std::string strategy;
    double ap50_clean = 0;
    double ap50_attacked = 0;
    double ssim_mean = 0;
    double asr = 0;
    double latency_mean_s = 0;
    double latency_std_s = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    uint64_t config_hash = 0;
    std::map<std::string, uint64_t> checkpoint_hashes;
    uint64_t corpus_manifest_hash = 0;
};

struct EvalContext {
    const corpus::Corpus* corpus = nullptr;
    const backend::Autoencoder* ae = nullptr;
    const backend::Denoiser* model = nullptr;
    std::vector<std::pair<std::string, const detect::Detector*>> detectors;
    backend::NoiseSchedule sched;
    reference::StrategyConfig strategy;
    int sample_steps = 30;
    double detect_conf = 0.05;
    double nms_iou = 0.5;
    double ssim_margin = 0.1;
    uint64_t seed = 99;
    int max_images = 0;  // 0 = whole split
    std::string split = "test";
    uint64_t config_hash = 0;
    uint64_t corpus_hash = 0;
};

// Full measurement protocol: per test record, sample and composite, run each
// detector on clean and (optionally defended) composited images, and
// aggregate AP50 / SSIM / ASR / latency. Per-image artifacts are persisted
// under out_dir and the report rows are recomputed from them.
EvalReport evaluate(const EvalContext& ctx, const std::string& out_dir,
                    const std::string& defense = "none");

EvalReport evaluate_defended(const EvalContext& ctx, const std::string& out_dir,
                             const std::string& defense);

// Rebuilds report rows purely from the artifacts persisted under out_dir
// (per_image.jsonl plus the per-detector detection files). evaluate() uses
// this same path, so reports always recompute exactly.
EvalReport recompute_report(const std::string& out_dir, const std::vector<std::string>& det_ids,
                            const std::vector<double>& thresholds, const std::string& strategy);

// Re-composites each camouflaged vehicle onto n fresh backgrounds of its
// scene type and evaluates clean vs camouflaged AP50 on the composites.
EvalReport evaluate_cross_background(const EvalContext& ctx, const std::string& out_dir,
                                     int n_backgrounds);

void write_report(const EvalReport& report, const std::string& json_path);
EvalReport read_report(const std::string& json_path);
std::string render_table(const EvalReport& report);

}  // namespace camo::eval
