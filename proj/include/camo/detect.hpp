#pragma once

#include <span>

#include "camo/backend.hpp"

namespace camo::detect {

struct Detection {
    Box box;
    double confidence = 0;  // softmax vehicle probability
};

// Scored boxes for one image, plus its ground-truth boxes.
struct DetectionSet {
    std::string image_id;
    std::vector<Detection> detections;
    std::vector<Box> ground_truth;
};

struct DetectorConfig {
    std::string arch_variant = "wide_shallow";  // or "narrow_deep"
    int image_size = 64;
    int grid = 8;

    bool operator==(const DetectorConfig&) const = default;
};

// Single-class grid detector: per-cell (background, vehicle) logits and box
// offsets (cx, cy, w, h) relative to the cell.
class Detector {
  public:
    Detector(DetectorConfig cfg, uint64_t init_seed);

    // cls logits [N,2,G,G] and box params [N,4,G,G] (pre-sigmoid).
    std::pair<Var, Var> heads_v(const Var& img) const;
    Var cls_logits_v(const Var& img) const { return heads_v(img).first; }

    const DetectorConfig& config() const { return cfg_; }
    bool trained() const { return trained_; }
    void set_trained(bool v) { trained_ = v; }

    nn::ParamMap params() const;
    void save(const std::string& dir, uint64_t config_hash) const;
    void load(const std::string& dir);
    uint64_t hash() const { return nn::param_hash(params()); }

  private:
    DetectorConfig cfg_;
    bool trained_ = false;
    std::vector<nn::Conv2d> backbone_;
    nn::Conv2d cls_head_, box_head_;
};

struct DetectorTrainStats {
    double final_loss = 0;
};

DetectorTrainStats train_detector(Detector& model, const corpus::Corpus& corpus, int iterations,
                                  int batch, double lr, double pos_weight, uint64_t seed,
                                  const std::string& log_path = "");

// Greedy NMS; keeps the highest-confidence box and suppresses overlaps with
// IoU > nms_iou.
std::vector<Detection> nms(std::vector<Detection> dets, double nms_iou);

DetectionSet detect_boxes(const Detector& model, const RgbImage& img, double conf_threshold,
                          double nms_iou);

// Grid cells whose center pixel lies inside the mask, as (gy, gx) pairs.
std::vector<std::pair<int, int>> cells_in_mask(const Mask& m, int grid);

struct LogitSelection {
    std::vector<std::array<double, 2>> logits;  // (background, vehicle) per cell
    std::vector<std::pair<int, int>> cells;
    int background_label = 0;
};

// Logits of every cell whose center lies inside the mask, paired with the
// background target.
LogitSelection adversarial_logit_selection(const Detector& model, const RgbImage& x_comp,
                                           const Mask& m);

// All-point interpolated average precision at IoU >= 0.5.
double ap50(const DetectionSet& ds);
double ap50(std::span<const DetectionSet> sets);

// Threshold (over distinct confidences) maximizing F1 at IoU >= 0.5; ties go
// to the higher threshold. A detection counts as kept when conf >= threshold.
double f1_optimal_threshold(const std::vector<DetectionSet>& validation_sets);

// Fraction of ground-truth vehicles with no kept detection (conf >= threshold
// and IoU >= 0.5 against the ground-truth box).
double attack_success_rate(const std::vector<DetectionSet>& camouflaged_sets, double threshold);

// JSON-lines serialization, one image per line.
void write_detection_sets(const std::string& path, const std::vector<DetectionSet>& sets);
std::vector<DetectionSet> read_detection_sets(const std::string& path);

}  // namespace camo::detect
