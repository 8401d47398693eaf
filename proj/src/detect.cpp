#include "camo/detect.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

namespace camo::detect {

using nlohmann::json;

Detector::Detector(DetectorConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg.image_size % cfg.grid != 0 || cfg.image_size / cfg.grid != 8)
        throw ValidationError("Detector: grid must be image_size/8");
    Rng rng(init_seed);
    if (cfg.arch_variant == "wide_shallow") {
        backbone_.emplace_back(3, 24, 3, 2, 1, rng);
        backbone_.emplace_back(24, 32, 3, 2, 1, rng);
        backbone_.emplace_back(32, 48, 3, 2, 1, rng);
        backbone_.emplace_back(48, 48, 3, 1, 1, rng);
    } else if (cfg.arch_variant == "narrow_deep") {
        backbone_.emplace_back(3, 12, 3, 2, 1, rng);
        backbone_.emplace_back(12, 12, 3, 1, 1, rng);
        backbone_.emplace_back(12, 20, 3, 2, 1, rng);
        backbone_.emplace_back(20, 20, 3, 1, 1, rng);
        backbone_.emplace_back(20, 28, 3, 2, 1, rng);
        backbone_.emplace_back(28, 28, 3, 1, 1, rng);
        backbone_.emplace_back(28, 28, 3, 1, 1, rng);
    } else {
        throw ValidationError("Detector: unknown arch_variant " + cfg.arch_variant);
    }
    const int feat = cfg.arch_variant == "wide_shallow" ? 48 : 28;
    cls_head_ = nn::Conv2d(feat, 2, 1, 1, 0, rng);
    box_head_ = nn::Conv2d(feat, 4, 1, 1, 0, rng);
}

std::pair<Var, Var> Detector::heads_v(const Var& img) const {
    if (img->val.rank() != 4 || img->val.shape[1] != 3 ||
        img->val.shape[2] != cfg_.image_size || img->val.shape[3] != cfg_.image_size)
        throw ValidationError("Detector: input shape mismatch");
    Var h = img;
    for (const auto& conv : backbone_) h = silu(conv(h));
    return {cls_head_(h), box_head_(h)};
}

nn::ParamMap Detector::params() const {
    nn::ParamMap m;
    for (size_t i = 0; i < backbone_.size(); ++i) {
        m.push_back({"bb" + std::to_string(i) + ".w", backbone_[i].w});
        m.push_back({"bb" + std::to_string(i) + ".b", backbone_[i].b});
    }
    m.push_back({"cls.w", cls_head_.w});
    m.push_back({"cls.b", cls_head_.b});
    m.push_back({"box.w", box_head_.w});
    m.push_back({"box.b", box_head_.b});
    return m;
}

void Detector::save(const std::string& dir, uint64_t config_hash) const {
    nn::save_checkpoint(dir, params(), config_hash, "detector_" + cfg_.arch_variant);
}

void Detector::load(const std::string& dir) {
    nn::load_checkpoint(dir, params(), "detector_" + cfg_.arch_variant);
    trained_ = true;
}

DetectorTrainStats train_detector(Detector& model, const corpus::Corpus& corpus, int iterations,
                                  int batch, double lr, double pos_weight, uint64_t seed,
                                  const std::string& log_path) {
    auto train = corpus.split("train");
    if (train.empty()) throw ValidationError("train_detector: empty corpus");
    const int size = corpus.params.image_size;
    const int G = model.config().grid;
    const int cell = size / G;

    nn::Adam opt(model.params(), lr);
    Rng rng(seed);
    std::ofstream log;
    if (!log_path.empty()) log.open(log_path);

    DetectorTrainStats stats;
    for (int it = 0; it < iterations; ++it) {
        Tensor x({batch, 3, size, size});
        std::vector<int> cls_labels(static_cast<size_t>(batch) * G * G, 0);
        std::vector<double> weights(static_cast<size_t>(batch) * G * G, 1.0);
        std::vector<std::array<int, 3>> pos_cells;
        std::vector<double> box_targets;
        for (int b = 0; b < batch; ++b) {
            const auto* rec = train[rng.uniform_int(static_cast<int>(train.size()))];
            std::copy(rec->image.chw.data.begin(), rec->image.chw.data.end(),
                      x.data.begin() + static_cast<int64_t>(b) * 3 * size * size);
            const double cx = rec->box.x + rec->box.w / 2.0;
            const double cy = rec->box.y + rec->box.h / 2.0;
            const int gx = std::min(G - 1, static_cast<int>(cx / cell));
            const int gy = std::min(G - 1, static_cast<int>(cy / cell));
            cls_labels[(static_cast<size_t>(b) * G + gy) * G + gx] = 1;
            weights[(static_cast<size_t>(b) * G + gy) * G + gx] = pos_weight;
            pos_cells.push_back({b, gy, gx});
            box_targets.push_back(cx / cell - gx);
            box_targets.push_back(cy / cell - gy);
            box_targets.push_back(rec->box.w / size);
            box_targets.push_back(rec->box.h / size);
        }
        auto [cls, box] = model.heads_v(constant(x));
        Var ce = softmax_ce_rows(channels_to_rows(cls), cls_labels);
        double wsum = 0.0;
        for (double w : weights) wsum += w;
        Var cls_loss = affine(sum_all(scale_rows(ce, weights)), 1.0 / wsum, 0.0);

        Var pred_box = sigmoid(gather_cells(box, pos_cells));
        Tensor tgt({batch, 4});
        tgt.data = box_targets;
        Var bd = sub(pred_box, constant(tgt));
        Var box_loss = mean_all(mul(bd, bd));

        Var loss = add(cls_loss, affine(box_loss, 5.0, 0.0));
        stats.final_loss = loss->val.data[0];
        if (!std::isfinite(stats.final_loss))
            throw NumericalError("train_detector: loss is not finite");
        opt.zero_grad();
        backward(loss);
        opt.step();
        if (log.is_open() && it % 100 == 99) log << it << " " << stats.final_loss << "\n";
    }
    model.set_trained(true);
    return stats;
}

std::vector<Detection> nms(std::vector<Detection> dets, double nms_iou) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    std::vector<Detection> kept;
    std::vector<bool> removed(dets.size(), false);
    for (size_t i = 0; i < dets.size(); ++i) {
        if (removed[i]) continue;
        kept.push_back(dets[i]);
        for (size_t j = i + 1; j < dets.size(); ++j)
            if (!removed[j] && iou(dets[i].box, dets[j].box) > nms_iou) removed[j] = true;
    }
    return kept;
}

DetectionSet detect_boxes(const Detector& model, const RgbImage& img, double conf_threshold,
                          double nms_iou) {
    if (!model.trained()) throw NotReadyError("detect_boxes: model not trained");
    const int size = model.config().image_size;
    const int G = model.config().grid;
    const int cell = size / G;
    Tensor x({1, 3, size, size});
    x.data = img.chw.data;
    auto [cls, box] = model.heads_v(constant(x));

    std::vector<Detection> dets;
    for (int gy = 0; gy < G; ++gy)
        for (int gx = 0; gx < G; ++gx) {
            const double l0 = cls->val.at(0, 0, gy, gx), l1 = cls->val.at(0, 1, gy, gx);
            const double p = 1.0 / (1.0 + std::exp(l0 - l1));
            if (!(p > conf_threshold)) continue;
            auto sg = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
            const double cx = (gx + sg(box->val.at(0, 0, gy, gx))) * cell;
            const double cy = (gy + sg(box->val.at(0, 1, gy, gx))) * cell;
            const double w = sg(box->val.at(0, 2, gy, gx)) * size;
            const double h = sg(box->val.at(0, 3, gy, gx)) * size;
            double x0 = std::clamp(cx - w / 2.0, 0.0, static_cast<double>(size));
            double y0 = std::clamp(cy - h / 2.0, 0.0, static_cast<double>(size));
            double x1 = std::clamp(cx + w / 2.0, 0.0, static_cast<double>(size));
            double y1 = std::clamp(cy + h / 2.0, 0.0, static_cast<double>(size));
            if (x1 - x0 <= 0.0 || y1 - y0 <= 0.0) continue;
            dets.push_back({Box{x0, y0, x1 - x0, y1 - y0}, p});
        }
    DetectionSet ds;
    ds.detections = nms(std::move(dets), nms_iou);
    return ds;
}

std::vector<std::pair<int, int>> cells_in_mask(const Mask& m, int grid) {
    if (m.height() % grid != 0 || m.width() % grid != 0)
        throw ValidationError("cells_in_mask: mask not divisible by grid");
    const int ch = m.height() / grid, cw = m.width() / grid;
    std::vector<std::pair<int, int>> cells;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx)
            if (m.hw.at(gy * ch + ch / 2, gx * cw + cw / 2) != 0.0) cells.push_back({gy, gx});
    return cells;
}

LogitSelection adversarial_logit_selection(const Detector& model, const RgbImage& x_comp,
                                           const Mask& m) {
    if (m.count() == 0) throw ValidationError("adversarial_logit_selection: empty mask");
    if (!model.trained()) throw NotReadyError("adversarial_logit_selection: model not trained");
    const int size = model.config().image_size;
    Tensor x({1, 3, size, size});
    x.data = x_comp.chw.data;
    Var cls = model.cls_logits_v(constant(x));
    LogitSelection sel;
    sel.cells = cells_in_mask(m, model.config().grid);
    for (auto [gy, gx] : sel.cells)
        sel.logits.push_back({cls->val.at(0, 0, gy, gx), cls->val.at(0, 1, gy, gx)});
    return sel;
}

namespace {

struct Flat {
    double conf;
    int set;
    int idx;
};

// Greedy confidence-descending matching; returns tp flags in processing
// order plus total ground truth count.
std::vector<char> greedy_match(std::span<const DetectionSet> sets, const std::vector<Flat>& order,
                               int* total_gt) {
    *total_gt = 0;
    for (const auto& s : sets) *total_gt += static_cast<int>(s.ground_truth.size());
    std::vector<std::vector<bool>> used(sets.size());
    for (size_t i = 0; i < sets.size(); ++i) used[i].assign(sets[i].ground_truth.size(), false);
    std::vector<char> tp(order.size(), 0);
    for (size_t k = 0; k < order.size(); ++k) {
        const auto& f = order[k];
        const auto& gt = sets[f.set].ground_truth;
        const auto& det = sets[f.set].detections[f.idx];
        double best = -1.0;
        int best_j = -1;
        for (size_t j = 0; j < gt.size(); ++j) {
            if (used[f.set][j]) continue;
            const double v = iou(det.box, gt[j]);
            if (v >= 0.5 && v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0) {
            used[f.set][best_j] = true;
            tp[k] = 1;
        }
    }
    return tp;
}

std::vector<Flat> flatten_sorted(std::span<const DetectionSet> sets) {
    std::vector<Flat> order;
    for (size_t s = 0; s < sets.size(); ++s)
        for (size_t i = 0; i < sets[s].detections.size(); ++i)
            order.push_back({sets[s].detections[i].confidence, static_cast<int>(s),
                             static_cast<int>(i)});
    std::stable_sort(order.begin(), order.end(),
                     [](const Flat& a, const Flat& b) { return a.conf > b.conf; });
    return order;
}

}  // namespace

double ap50(std::span<const DetectionSet> sets) {
    auto order = flatten_sorted(sets);
    int total_gt = 0;
    auto tp = greedy_match(sets, order, &total_gt);
    if (total_gt == 0) return order.empty() ? 1.0 : 0.0;
    // Cumulative PR points, emitted only where the confidence strictly drops
    // (tied detections cannot be separated by any threshold), then all-point
    // interpolation over the precision envelope.
    const size_t n = order.size();
    std::vector<double> prec, rec;
    int ctp = 0;
    for (size_t k = 0; k < n; ++k) {
        ctp += tp[k];
        if (k + 1 < n && order[k + 1].conf == order[k].conf) continue;
        prec.push_back(static_cast<double>(ctp) / static_cast<double>(k + 1));
        rec.push_back(static_cast<double>(ctp) / total_gt);
    }
    double ap = 0.0, pmax = 0.0;
    for (size_t k = prec.size(); k-- > 0;) {
        pmax = std::max(pmax, prec[k]);
        const double r_prev = k == 0 ? 0.0 : rec[k - 1];
        ap += (rec[k] - r_prev) * pmax;
    }
    return ap;
}

double ap50(const DetectionSet& ds) { return ap50(std::span<const DetectionSet>(&ds, 1)); }

double f1_optimal_threshold(const std::vector<DetectionSet>& validation_sets) {
    std::vector<double> confs;
    for (const auto& s : validation_sets)
        for (const auto& d : s.detections) confs.push_back(d.confidence);
    if (confs.empty()) throw ValidationError("f1_optimal_threshold: no detections");
    std::sort(confs.begin(), confs.end(), std::greater<double>());
    confs.erase(std::unique(confs.begin(), confs.end()), confs.end());

    std::span<const DetectionSet> sets(validation_sets.data(), validation_sets.size());
    double best_f1 = -1.0, best_thr = confs.front();
    for (double thr : confs) {  // descending: first max wins => higher threshold on ties
        std::vector<DetectionSet> kept(validation_sets.size());
        for (size_t s = 0; s < validation_sets.size(); ++s) {
            kept[s].ground_truth = validation_sets[s].ground_truth;
            for (const auto& d : validation_sets[s].detections)
                if (d.confidence >= thr) kept[s].detections.push_back(d);
        }
        auto order = flatten_sorted(kept);
        int total_gt = 0;
        auto tp = greedy_match(kept, order, &total_gt);
        int ctp = 0;
        for (char t : tp) ctp += t;
        const int fp = static_cast<int>(order.size()) - ctp;
        const int fn = total_gt - ctp;
        const double denom = 2.0 * ctp + fp + fn;
        const double f1 = denom > 0.0 ? 2.0 * ctp / denom : 0.0;
        if (f1 > best_f1) {
            best_f1 = f1;
            best_thr = thr;
        }
    }
    return best_thr;
}

double attack_success_rate(const std::vector<DetectionSet>& camouflaged_sets, double threshold) {
    int total = 0, detected = 0;
    for (const auto& s : camouflaged_sets)
        for (const auto& gt : s.ground_truth) {
            ++total;
            for (const auto& d : s.detections)
                if (d.confidence >= threshold && iou(d.box, gt) >= 0.5) {
                    ++detected;
                    break;
                }
        }
    if (total == 0) throw ValidationError("attack_success_rate: empty set");
    return 1.0 - static_cast<double>(detected) / total;
}

void write_detection_sets(const std::string& path, const std::vector<DetectionSet>& sets) {
    std::ofstream f(path);
    if (!f) throw LoadError("write_detection_sets: cannot open " + path);
    for (const auto& s : sets) {
        json line;
        line["image_id"] = s.image_id;
        json dets = json::array();
        for (const auto& d : s.detections)
            dets.push_back({{"box", {d.box.x, d.box.y, d.box.w, d.box.h}},
                            {"confidence", d.confidence}});
        line["detections"] = dets;
        json gts = json::array();
        for (const auto& g : s.ground_truth) gts.push_back({g.x, g.y, g.w, g.h});
        line["ground_truth"] = gts;
        f << line.dump() << "\n";
    }
}

std::vector<DetectionSet> read_detection_sets(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw LoadError("read_detection_sets: cannot open " + path);
    std::vector<DetectionSet> sets;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        DetectionSet s;
        s.image_id = j.at("image_id").get<std::string>();
        for (const auto& d : j.at("detections")) {
            const auto b = d.at("box").get<std::vector<double>>();
            s.detections.push_back({Box{b[0], b[1], b[2], b[3]}, d.at("confidence").get<double>()});
        }
        for (const auto& g : j.at("ground_truth")) {
            const auto b = g.get<std::vector<double>>();
            s.ground_truth.push_back(Box{b[0], b[1], b[2], b[3]});
        }
        sets.push_back(std::move(s));
    }
    return sets;
}

}  // namespace camo::detect
