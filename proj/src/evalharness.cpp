#include "camo/evalharness.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "camo/maskops.hpp"

namespace camo::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Tensor luma(const RgbImage& img) {
    const int h = img.height(), w = img.width();
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor y({h, w});
    for (int64_t i = 0; i < hw; ++i)
        y.data[i] = 0.299 * img.chw.data[i] + 0.587 * img.chw.data[hw + i] +
                    0.114 * img.chw.data[2 * hw + i];
    return y;
}

}  // namespace

double ssim(const RgbImage& a, const RgbImage& b) {
    if (a.height() != b.height() || a.width() != b.width())
        throw ValidationError("ssim: shape mismatch");
    const int win = 11;
    if (a.height() < win || a.width() < win)
        throw ValidationError("ssim: image smaller than the 11x11 window");
    const double sigma = 1.5, k1 = 0.01, k2 = 0.03;
    const double c1 = k1 * k1, c2 = k2 * k2;  // dynamic range 1

    double kernel[win][win];
    double ksum = 0.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            const double dy = i - 5, dx = j - 5;
            kernel[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            ksum += kernel[i][j];
        }
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) kernel[i][j] /= ksum;

    Tensor ya = luma(a), yb = luma(b);
    const int h = a.height(), w = a.width();
    double acc = 0.0;
    int count = 0;
    for (int y = 5; y < h - 5; ++y)
        for (int x = 5; x < w - 5; ++x) {
            double m1 = 0, m2 = 0, s1 = 0, s2 = 0, s12 = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const double va = ya.at(y + i - 5, x + j - 5);
                    const double vb = yb.at(y + i - 5, x + j - 5);
                    const double k = kernel[i][j];
                    m1 += k * va;
                    m2 += k * vb;
                    s1 += k * va * va;
                    s2 += k * vb * vb;
                    s12 += k * va * vb;
                }
            s1 -= m1 * m1;
            s2 -= m2 * m2;
            s12 -= m1 * m2;
            acc += ((2 * m1 * m2 + c1) * (2 * s12 + c2)) /
                   ((m1 * m1 + m2 * m2 + c1) * (s1 + s2 + c2));
            ++count;
        }
    return acc / count;
}

RgbImage vehicle_crop(const RgbImage& img, const Box& box, double margin) {
    if (box.w <= 0 || box.h <= 0) throw ValidationError("vehicle_crop: degenerate box");
    int x0 = static_cast<int>(std::floor(box.x - margin * box.w));
    int y0 = static_cast<int>(std::floor(box.y - margin * box.h));
    int x1 = static_cast<int>(std::ceil(box.x + box.w + margin * box.w));
    int y1 = static_cast<int>(std::ceil(box.y + box.h + margin * box.h));
    x0 = std::max(0, x0);
    y0 = std::max(0, y0);
    x1 = std::min(img.width(), x1);
    y1 = std::min(img.height(), y1);
    if (x1 <= x0 || y1 <= y0) throw ValidationError("vehicle_crop: empty crop");
    RgbImage out(y1 - y0, x1 - x0);
    const int64_t ihw = static_cast<int64_t>(img.height()) * img.width();
    const int64_t ohw = static_cast<int64_t>(out.height()) * out.width();
    for (int c = 0; c < 3; ++c)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                out.chw.data[c * ohw + static_cast<int64_t>(y - y0) * out.width() + (x - x0)] =
                    img.chw.data[c * ihw + static_cast<int64_t>(y) * img.width() + x];
    return out;
}

RgbImage nlm_denoise(const RgbImage& img, int patch, int search, double h) {
    const int H = img.height(), W = img.width();
    const int pr = patch / 2, sr = search / 2;
    const int64_t hw = static_cast<int64_t>(H) * W;
    RgbImage out(H, W);
    auto clampi = [](int v, int lo, int hi) { return std::min(hi, std::max(lo, v)); };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double wsum = 0.0, acc[3] = {0, 0, 0};
            for (int qy = y - sr; qy <= y + sr; ++qy)
                for (int qx = x - sr; qx <= x + sr; ++qx) {
                    const int cy = clampi(qy, 0, H - 1), cx = clampi(qx, 0, W - 1);
                    double d2 = 0.0;
                    for (int oy = -pr; oy <= pr; ++oy)
                        for (int ox = -pr; ox <= pr; ++ox) {
                            const int py = clampi(y + oy, 0, H - 1),
                                      px = clampi(x + ox, 0, W - 1);
                            const int ry = clampi(cy + oy, 0, H - 1),
                                      rx = clampi(cx + ox, 0, W - 1);
                            for (int c = 0; c < 3; ++c) {
                                const double d =
                                    img.chw.data[c * hw + static_cast<int64_t>(py) * W + px] -
                                    img.chw.data[c * hw + static_cast<int64_t>(ry) * W + rx];
                                d2 += d * d;
                            }
                        }
                    d2 /= 3.0 * patch * patch;
                    const double wgt = std::exp(-d2 / (h * h));
                    wsum += wgt;
                    for (int c = 0; c < 3; ++c)
                        acc[c] += wgt * img.chw.data[c * hw + static_cast<int64_t>(cy) * W + cx];
                }
            for (int c = 0; c < 3; ++c)
                out.chw.data[c * hw + static_cast<int64_t>(y) * W + x] =
                    std::clamp(acc[c] / wsum, 0.0, 1.0);
        }
    return out;
}

RgbImage bilateral_filter(const RgbImage& img, double sigma_space, double sigma_color) {
    const int H = img.height(), W = img.width();
    const int r = static_cast<int>(std::ceil(2.0 * sigma_space));
    const int64_t hw = static_cast<int64_t>(H) * W;
    RgbImage out(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double wsum = 0.0, acc[3] = {0, 0, 0};
            const double p0 = img.chw.data[static_cast<int64_t>(y) * W + x];
            const double p1 = img.chw.data[hw + static_cast<int64_t>(y) * W + x];
            const double p2 = img.chw.data[2 * hw + static_cast<int64_t>(y) * W + x];
            for (int qy = std::max(0, y - r); qy <= std::min(H - 1, y + r); ++qy)
                for (int qx = std::max(0, x - r); qx <= std::min(W - 1, x + r); ++qx) {
                    const double q0 = img.chw.data[static_cast<int64_t>(qy) * W + qx];
                    const double q1 = img.chw.data[hw + static_cast<int64_t>(qy) * W + qx];
                    const double q2 = img.chw.data[2 * hw + static_cast<int64_t>(qy) * W + qx];
                    const double ds = (qy - y) * (qy - y) + (qx - x) * (qx - x);
                    const double dc =
                        (q0 - p0) * (q0 - p0) + (q1 - p1) * (q1 - p1) + (q2 - p2) * (q2 - p2);
                    const double wgt = std::exp(-ds / (2 * sigma_space * sigma_space)) *
                                       std::exp(-dc / (2 * sigma_color * sigma_color));
                    wsum += wgt;
                    acc[0] += wgt * q0;
                    acc[1] += wgt * q1;
                    acc[2] += wgt * q2;
                }
            out.chw.data[static_cast<int64_t>(y) * W + x] = std::clamp(acc[0] / wsum, 0.0, 1.0);
            out.chw.data[hw + static_cast<int64_t>(y) * W + x] =
                std::clamp(acc[1] / wsum, 0.0, 1.0);
            out.chw.data[2 * hw + static_cast<int64_t>(y) * W + x] =
                std::clamp(acc[2] / wsum, 0.0, 1.0);
        }
    return out;
}

RgbImage apply_defense(const RgbImage& img, const std::string& defense) {
    if (defense == "none") return img;
    if (defense == "nlm") return nlm_denoise(img);
    if (defense == "bilateral") return bilateral_filter(img);
    throw ValidationError("apply_defense: unknown defense " + defense);
}

namespace {

std::vector<detect::DetectionSet> clean_val_sets(const EvalContext& ctx,
                                                 const detect::Detector& det) {
    auto val = ctx.corpus->split("val");
    std::vector<detect::DetectionSet> sets;
    for (const auto* rec : val) {
        detect::DetectionSet s = detect::detect_boxes(det, rec->image, ctx.detect_conf,
                                                      ctx.nms_iou);
        s.image_id = rec->id;
        s.ground_truth = {rec->box};
        sets.push_back(std::move(s));
    }
    return sets;
}

}  // namespace

EvalReport recompute_report(const std::string& out_dir, const std::vector<std::string>& det_ids,
                            const std::vector<double>& thresholds,
                            const std::string& strategy) {
    EvalReport report;
    std::vector<double> latencies;
    std::vector<double> ssims;
    {
        std::ifstream pf(fs::path(out_dir) / "per_image.jsonl");
        std::string line;
        while (std::getline(pf, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            latencies.push_back(j.at("latency_s").get<double>());
            ssims.push_back(j.at("ssim").get<double>());
        }
    }
    double lat_mean = 0, lat_std = 0, ssim_mean = 0;
    if (!latencies.empty()) {
        for (double v : latencies) lat_mean += v;
        lat_mean /= latencies.size();
        for (double v : latencies) lat_std += (v - lat_mean) * (v - lat_mean);
        lat_std = std::sqrt(lat_std / latencies.size());
        for (double v : ssims) ssim_mean += v;
        ssim_mean /= ssims.size();
    }

    for (size_t d = 0; d < det_ids.size(); ++d) {
        auto clean = detect::read_detection_sets(
            (fs::path(out_dir) / ("detections_clean_" + det_ids[d] + ".jsonl")).string());
        auto attacked = detect::read_detection_sets(
            (fs::path(out_dir) / ("detections_attacked_" + det_ids[d] + ".jsonl")).string());
        EvalRow row;
        row.detector_id = det_ids[d];
        row.strategy = strategy;
        row.ap50_clean = detect::ap50(std::span<const detect::DetectionSet>(clean));
        row.ap50_attacked = detect::ap50(std::span<const detect::DetectionSet>(attacked));
        row.asr = detect::attack_success_rate(attacked, thresholds[d]);
        row.ssim_mean = ssim_mean;
        row.latency_mean_s = lat_mean;
        row.latency_std_s = lat_std;
        report.rows.push_back(std::move(row));
    }
    return report;
}

EvalReport evaluate(const EvalContext& ctx, const std::string& out_dir,
                    const std::string& defense) {
    if (!ctx.corpus || !ctx.ae || !ctx.model || ctx.detectors.empty())
        throw NotReadyError("evaluate: missing artifacts");
    if (!ctx.ae->trained()) throw NotReadyError("evaluate: autoencoder not trained");
    if (defense != "none" && defense != "nlm" && defense != "bilateral")
        throw ValidationError("evaluate: unknown defense " + defense);
    fs::create_directories(out_dir);

    auto records = ctx.corpus->split(ctx.split);
    if (ctx.max_images > 0 && static_cast<int>(records.size()) > ctx.max_images)
        records.resize(ctx.max_images);

    // F1-optimal thresholds on the clean validation split, per detector.
    std::vector<std::string> det_ids;
    std::vector<double> thresholds;
    for (const auto& [id, det] : ctx.detectors) {
        det_ids.push_back(id);
        thresholds.push_back(detect::f1_optimal_threshold(clean_val_sets(ctx, *det)));
    }

    std::vector<std::vector<detect::DetectionSet>> clean_sets(ctx.detectors.size());
    std::vector<std::vector<detect::DetectionSet>> attacked_sets(ctx.detectors.size());
    std::ofstream per_image(fs::path(out_dir) / "per_image.jsonl");

    for (const auto* rec : records) {
        const auto t0 = std::chrono::steady_clock::now();
        pipeline::InferResult inf = pipeline::infer(*ctx.model, *ctx.ae, *rec, ctx.strategy,
                                                    ctx.sched, ctx.sample_steps, ctx.seed);
        const double latency =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        RgbImage defended = apply_defense(inf.composited, defense);
        const double s = ssim(vehicle_crop(rec->image, rec->box, ctx.ssim_margin),
                              vehicle_crop(inf.composited, rec->box, ctx.ssim_margin));

        for (size_t d = 0; d < ctx.detectors.size(); ++d) {
            detect::DetectionSet ds_clean = detect::detect_boxes(*ctx.detectors[d].second,
                                                                 rec->image, ctx.detect_conf,
                                                                 ctx.nms_iou);
            ds_clean.image_id = rec->id;
            ds_clean.ground_truth = {rec->box};
            clean_sets[d].push_back(std::move(ds_clean));

            detect::DetectionSet ds_att = detect::detect_boxes(*ctx.detectors[d].second,
                                                               defended, ctx.detect_conf,
                                                               ctx.nms_iou);
            ds_att.image_id = rec->id;
            ds_att.ground_truth = {rec->box};
            attacked_sets[d].push_back(std::move(ds_att));
        }
        json line;
        line["id"] = rec->id;
        line["ssim"] = s;
        line["latency_s"] = latency;
        per_image << line.dump() << "\n";
    }
    per_image.close();

    for (size_t d = 0; d < ctx.detectors.size(); ++d) {
        detect::write_detection_sets(
            (fs::path(out_dir) / ("detections_clean_" + det_ids[d] + ".jsonl")).string(),
            clean_sets[d]);
        detect::write_detection_sets(
            (fs::path(out_dir) / ("detections_attacked_" + det_ids[d] + ".jsonl")).string(),
            attacked_sets[d]);
    }

    EvalReport report = recompute_report(out_dir, det_ids, thresholds,
                                         reference::mode_to_string(ctx.strategy.mode));
    report.config_hash = ctx.config_hash;
    report.corpus_manifest_hash = ctx.corpus_hash;
    write_report(report, (fs::path(out_dir) / "eval.json").string());
    std::ofstream tf(fs::path(out_dir) / "report.txt");
    tf << render_table(report);
    return report;
}

EvalReport evaluate_defended(const EvalContext& ctx, const std::string& out_dir,
                             const std::string& defense) {
    return evaluate(ctx, out_dir, defense);
}

EvalReport evaluate_cross_background(const EvalContext& ctx, const std::string& out_dir,
                                     int n_backgrounds) {
    if (n_backgrounds < 0) throw ValidationError("evaluate_cross_background: bad n_backgrounds");
    if (ctx.strategy.mode != reference::Mode::scene_level)
        throw ValidationError("evaluate_cross_background: requires a scene-level checkpoint");
    if (!ctx.corpus || !ctx.ae || !ctx.model || ctx.detectors.empty())
        throw NotReadyError("evaluate_cross_background: missing artifacts");
    fs::create_directories(out_dir);

    EvalReport report;
    report.config_hash = ctx.config_hash;
    report.corpus_manifest_hash = ctx.corpus_hash;
    if (n_backgrounds == 0) {
        write_report(report, (fs::path(out_dir) / "eval.json").string());
        return report;
    }

    auto records = ctx.corpus->split(ctx.split);
    if (ctx.max_images > 0 && static_cast<int>(records.size()) > ctx.max_images)
        records.resize(ctx.max_images);

    const auto& [det_id, det] = ctx.detectors.front();
    const double threshold = detect::f1_optimal_threshold(clean_val_sets(ctx, *det));

    std::vector<detect::DetectionSet> clean_sets, attacked_sets;
    std::vector<double> latencies, ssims;
    for (const auto* rec : records) {
        const auto t0 = std::chrono::steady_clock::now();
        pipeline::InferResult inf = pipeline::infer(*ctx.model, *ctx.ae, *rec, ctx.strategy,
                                                    ctx.sched, ctx.sample_steps, ctx.seed);
        latencies.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        for (int k = 0; k < n_backgrounds; ++k) {
            RgbImage bg = corpus::gen_background(mix_seed(rec->seed, 0xb6 + k), rec->scene_label,
                                                 ctx.corpus->params);
            RgbImage clean_comp = maskops::composite(rec->image, bg, rec->vehicle_mask);
            RgbImage att_comp = maskops::composite(inf.composited, bg, rec->vehicle_mask);

            detect::DetectionSet cs = detect::detect_boxes(*det, clean_comp, ctx.detect_conf,
                                                           ctx.nms_iou);
            cs.image_id = rec->id + "_bg" + std::to_string(k);
            cs.ground_truth = {rec->box};
            clean_sets.push_back(std::move(cs));

            detect::DetectionSet as = detect::detect_boxes(*det, att_comp, ctx.detect_conf,
                                                           ctx.nms_iou);
            as.image_id = rec->id + "_bg" + std::to_string(k);
            as.ground_truth = {rec->box};
            attacked_sets.push_back(std::move(as));

            ssims.push_back(ssim(vehicle_crop(clean_comp, rec->box, ctx.ssim_margin),
                                 vehicle_crop(att_comp, rec->box, ctx.ssim_margin)));
        }
    }
    detect::write_detection_sets(
        (fs::path(out_dir) / ("detections_clean_" + det_id + ".jsonl")).string(), clean_sets);
    detect::write_detection_sets(
        (fs::path(out_dir) / ("detections_attacked_" + det_id + ".jsonl")).string(),
        attacked_sets);

    EvalRow row;
    row.detector_id = det_id;
    row.strategy = reference::mode_to_string(ctx.strategy.mode);
    row.ap50_clean = detect::ap50(std::span<const detect::DetectionSet>(clean_sets));
    row.ap50_attacked = detect::ap50(std::span<const detect::DetectionSet>(attacked_sets));
    row.asr = detect::attack_success_rate(attacked_sets, threshold);
    for (double v : ssims) row.ssim_mean += v;
    row.ssim_mean /= ssims.empty() ? 1.0 : ssims.size();
    for (double v : latencies) row.latency_mean_s += v;
    row.latency_mean_s /= latencies.empty() ? 1.0 : latencies.size();
    double var = 0;
    for (double v : latencies) var += (v - row.latency_mean_s) * (v - row.latency_mean_s);
    row.latency_std_s = latencies.empty() ? 0.0 : std::sqrt(var / latencies.size());
    report.rows.push_back(std::move(row));

    write_report(report, (fs::path(out_dir) / "eval.json").string());
    std::ofstream tf(fs::path(out_dir) / "report.txt");
    tf << render_table(report);
    return report;
}

void write_report(const EvalReport& report, const std::string& json_path) {
    json j;
    j["config_hash"] = report.config_hash;
    j["corpus_manifest_hash"] = report.corpus_manifest_hash;
    json hashes;
    for (const auto& [k, v] : report.checkpoint_hashes) hashes[k] = v;
    j["checkpoint_hashes"] = hashes;
    json rows = json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"detector", r.detector_id},
                        {"strategy", r.strategy},
                        {"ap50_clean", r.ap50_clean},
                        {"ap50_attacked", r.ap50_attacked},
                        {"ssim_mean", r.ssim_mean},
                        {"asr", r.asr},
                        {"latency_mean_s", r.latency_mean_s},
                        {"latency_std_s", r.latency_std_s}});
    j["rows"] = rows;
    std::ofstream f(json_path);
    if (!f) throw LoadError("write_report: cannot open " + json_path);
    f << j.dump(2) << "\n";
}

EvalReport read_report(const std::string& json_path) {
    std::ifstream f(json_path);
    if (!f) throw LoadError("read_report: cannot open " + json_path);
    json j;
    f >> j;
    EvalReport r;
    r.config_hash = j.value("config_hash", uint64_t{0});
    r.corpus_manifest_hash = j.value("corpus_manifest_hash", uint64_t{0});
    if (j.contains("checkpoint_hashes"))
        for (const auto& [k, v] : j.at("checkpoint_hashes").items())
            r.checkpoint_hashes[k] = v.get<uint64_t>();
    for (const auto& row : j.at("rows")) {
        EvalRow er;
        er.detector_id = row.at("detector").get<std::string>();
        er.strategy = row.at("strategy").get<std::string>();
        er.ap50_clean = row.at("ap50_clean").get<double>();
        er.ap50_attacked = row.at("ap50_attacked").get<double>();
        er.ssim_mean = row.at("ssim_mean").get<double>();
        er.asr = row.at("asr").get<double>();
        er.latency_mean_s = row.at("latency_mean_s").get<double>();
        er.latency_std_s = row.at("latency_std_s").get<double>();
        r.rows.push_back(std::move(er));
    }
    return r;
}

std::string render_table(const EvalReport& report) {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-10s %-12s %11s %14s %8s %8s %14s\n", "detector",
                  "strategy", "AP50_clean", "AP50_attacked", "SSIM", "ASR", "latency(s)");
    out += buf;
    out += std::string(81, '-') + "\n";
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%-10s %-12s %11.3f %14.3f %8.3f %8.3f %8.3f+-%.3f\n",
                      r.detector_id.c_str(), r.strategy.c_str(), r.ap50_clean, r.ap50_attacked,
                      r.ssim_mean, r.asr, r.latency_mean_s, r.latency_std_s);
        out += buf;
    }
    return out;
}

}  // namespace camo::eval
