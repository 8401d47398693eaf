#include <doctest.h>

#include <filesystem>

#include "camo/detect.hpp"
#include "gradcheck.hpp"

using namespace camo;
namespace dt = camo::detect;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("detect");

namespace {

dt::DetectionSet make_set(std::vector<dt::Detection> dets, std::vector<Box> gts,
                          const std::string& id = "img") {
    dt::DetectionSet s;
    s.image_id = id;
    s.detections = std::move(dets);
    s.ground_truth = std::move(gts);
    return s;
}

// Independent NMS reference: repeatedly take the highest-confidence surviving
// detection and delete everything it overlaps.
std::vector<dt::Detection> nms_oracle(std::vector<dt::Detection> dets, double thr) {
    std::vector<dt::Detection> kept;
    std::vector<bool> alive(dets.size(), true);
    while (true) {
        int best = -1;
        for (size_t i = 0; i < dets.size(); ++i)
            if (alive[i] && (best < 0 || dets[i].confidence > dets[best].confidence))
                best = static_cast<int>(i);
        if (best < 0) break;
        kept.push_back(dets[best]);
        alive[best] = false;
        for (size_t i = 0; i < dets.size(); ++i)
            if (alive[i] && iou(dets[best].box, dets[i].box) > thr) alive[i] = false;
    }
    return kept;
}

// Exhaustive PR enumeration: sweep every distinct confidence as a threshold,
// compute precision/recall by greedy matching among kept detections, then
// integrate the precision envelope.
double ap50_oracle(const std::vector<dt::DetectionSet>& sets) {
    int total_gt = 0;
    std::vector<double> confs;
    for (const auto& s : sets) {
        total_gt += static_cast<int>(s.ground_truth.size());
        for (const auto& d : s.detections) confs.push_back(d.confidence);
    }
    if (total_gt == 0) return confs.empty() ? 1.0 : 0.0;
    std::sort(confs.begin(), confs.end(), std::greater<double>());
    confs.erase(std::unique(confs.begin(), confs.end()), confs.end());

    std::vector<double> precs, recs;
    for (double thr : confs) {
        int tp = 0, fp = 0;
        for (const auto& s : sets) {
            std::vector<dt::Detection> kept;
            for (const auto& d : s.detections)
                if (d.confidence >= thr) kept.push_back(d);
            std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
                return a.confidence > b.confidence;
            });
            std::vector<bool> used(s.ground_truth.size(), false);
            for (const auto& d : kept) {
                double best = -1;
                int bj = -1;
                for (size_t j = 0; j < s.ground_truth.size(); ++j) {
                    if (used[j]) continue;
                    const double v = iou(d.box, s.ground_truth[j]);
                    if (v >= 0.5 && v > best) {
                        best = v;
                        bj = static_cast<int>(j);
                    }
                }
                if (bj >= 0) {
                    used[bj] = true;
                    ++tp;
                } else {
                    ++fp;
                }
            }
        }
        precs.push_back(tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0);
        recs.push_back(static_cast<double>(tp) / total_gt);
    }
    double ap = 0.0, pmax = 0.0;
    for (size_t k = precs.size(); k-- > 0;) {
        pmax = std::max(pmax, precs[k]);
        const double r_prev = k == 0 ? 0.0 : recs[k - 1];
        ap += (recs[k] - r_prev) * pmax;
    }
    return ap;
}

std::vector<dt::DetectionSet> random_sets(Rng& rng, int n_sets) {
    std::vector<dt::DetectionSet> sets;
    for (int s = 0; s < n_sets; ++s) {
        dt::DetectionSet ds;
        ds.image_id = "im" + std::to_string(s);
        const int ngt = rng.uniform_int(3);
        for (int g = 0; g < ngt; ++g)
            ds.ground_truth.push_back(Box{rng.uniform(0, 40), rng.uniform(0, 40),
                                          rng.uniform(6, 20), rng.uniform(6, 20)});
        const int nd = rng.uniform_int(5);
        for (int d = 0; d < nd; ++d) {
            Box b;
            if (!ds.ground_truth.empty() && rng.uniform() < 0.6) {
                const Box& gt = ds.ground_truth[rng.uniform_int(
                    static_cast<int>(ds.ground_truth.size()))];
                b = Box{gt.x + rng.uniform(-4, 4), gt.y + rng.uniform(-4, 4),
                        gt.w * rng.uniform(0.7, 1.3), gt.h * rng.uniform(0.7, 1.3)};
            } else {
                b = Box{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 16),
                        rng.uniform(4, 16)};
            }
            ds.detections.push_back({b, rng.uniform()});
        }
        sets.push_back(std::move(ds));
    }
    return sets;
}

}  // namespace

TEST_CASE("nms basics and oracle equivalence") {
    Box b{10, 10, 10, 10};
    auto kept = dt::nms({{b, 0.9}, {b, 0.8}}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].confidence == 0.9);

    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<dt::Detection> dets;
        const int n = 1 + rng.uniform_int(12);
        for (int i = 0; i < n; ++i)
            dets.push_back({Box{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 20),
                                rng.uniform(4, 20)},
                            rng.uniform()});
        auto a = dt::nms(dets, 0.5);
        auto b2 = nms_oracle(dets, 0.5);
        REQUIRE(a.size() == b2.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].confidence == b2[i].confidence);
            CHECK(a[i].box.x == b2[i].box.x);
        }
        // survivors pairwise IoU <= threshold
        for (size_t i = 0; i < a.size(); ++i)
            for (size_t j = i + 1; j < a.size(); ++j)
                CHECK(iou(a[i].box, a[j].box) <= 0.5);
    }
}

TEST_CASE("ap50 on the documented examples") {
    Box gt{10, 10, 10, 10};
    // IoU 0.9-ish: shifted by half a pixel
    auto s_hit = make_set({{Box{10.5, 10, 10, 10}, 0.9}}, {gt});
    CHECK(dt::ap50(s_hit) == 1.0);
    auto s_miss = make_set({{Box{16, 16, 10, 10}, 0.9}}, {gt});
    CHECK(iou(Box{16, 16, 10, 10}, gt) < 0.5);
    CHECK(dt::ap50(s_miss) == 0.0);

    // 2 GT, 3 mixed detections
    Box gt2{30, 30, 8, 8};
    auto s_mixed = make_set(
        {{Box{10, 10, 10, 10}, 0.95}, {Box{40, 5, 6, 6}, 0.8}, {Box{30, 31, 8, 8}, 0.6}},
        {gt, gt2});
    CHECK(dt::ap50(s_mixed) == doctest::Approx(ap50_oracle({s_mixed})).epsilon(1e-12));

    // edge cases
    CHECK(dt::ap50(make_set({}, {})) == 1.0);
    CHECK(dt::ap50(make_set({{gt, 0.5}}, {})) == 0.0);
}

TEST_CASE("ap50 matches the exhaustive PR oracle on random sets") {
    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        auto sets = random_sets(rng, 1 + rng.uniform_int(4));
        const double a = dt::ap50(std::span<const dt::DetectionSet>(sets));
        const double b = ap50_oracle(sets);
        CHECK(std::abs(a - b) <= 1e-9);
    }
}

TEST_CASE("ap50 invariant to monotone confidence rescaling") {
    Rng rng(23);
    auto sets = random_sets(rng, 4);
    const double before = dt::ap50(std::span<const dt::DetectionSet>(sets));
    for (auto& s : sets)
        for (auto& d : s.detections) d.confidence = std::tanh(3.0 * d.confidence) * 0.5 + 0.2;
    const double after = dt::ap50(std::span<const dt::DetectionSet>(sets));
    CHECK(before == doctest::Approx(after).epsilon(1e-12));
}

TEST_CASE("f1 threshold: recall-maximizing when everything is correct") {
    Box gt{10, 10, 10, 10};
    std::vector<dt::DetectionSet> sets = {
        make_set({{gt, 0.9}}, {gt}, "a"),
        make_set({{gt, 0.4}}, {gt}, "b"),
        make_set({{gt, 0.7}}, {gt}, "c"),
    };
    CHECK(dt::f1_optimal_threshold(sets) == 0.4);
    CHECK_THROWS_AS(dt::f1_optimal_threshold({make_set({}, {gt})}), ValidationError);
}

TEST_CASE("f1 threshold matches the exhaustive sweep on a synthetic case") {
    Box gt{10, 10, 10, 10};
    Box far{40, 40, 8, 8};
    // two true positives (0.9, 0.6) and three false positives (0.8, 0.5, 0.3)
    std::vector<dt::DetectionSet> sets = {
        make_set({{gt, 0.9}, {far, 0.8}, {far, 0.5}}, {gt}, "a"),
        make_set({{gt, 0.6}, {far, 0.3}}, {gt}, "b"),
    };
    // exhaustive sweep oracle
    double best_f1 = -1, best_thr = 0;
    for (double thr : {0.9, 0.8, 0.6, 0.5, 0.3}) {
        int tp = 0, fp = 0, fn = 0;
        for (const auto& s : sets) {
            bool matched = false;
            for (const auto& d : s.detections) {
                if (d.confidence < thr) continue;
                if (!matched && iou(d.box, s.ground_truth[0]) >= 0.5)
                    matched = true;
                else
                    ++fp;
            }
            tp += matched;
            fn += !matched;
        }
        const double f1 = 2.0 * tp / (2.0 * tp + fp + fn);
        if (f1 > best_f1) {
            best_f1 = f1;
            best_thr = thr;
        }
    }
    CHECK(dt::f1_optimal_threshold(sets) == best_thr);
}

TEST_CASE("attack success rate") {
    Box gt{10, 10, 10, 10};
    std::vector<dt::DetectionSet> all_below = {make_set({{gt, 0.2}, {gt, 0.1}}, {gt})};
    CHECK(dt::attack_success_rate(all_below, 0.5) == 1.0);
    std::vector<dt::DetectionSet> all_above = {make_set({{gt, 0.9}}, {gt}),
                                               make_set({{gt, 0.8}}, {gt})};
    CHECK(dt::attack_success_rate(all_above, 0.5) == 0.0);

    // mixed counting oracle
    Box far{40, 40, 8, 8};
    std::vector<dt::DetectionSet> mixed = {
        make_set({{gt, 0.9}}, {gt}),          // detected
        make_set({{far, 0.9}}, {gt}),         // high conf but wrong place
        make_set({{gt, 0.3}}, {gt}),          // below threshold
        make_set({}, {gt}),                   // nothing
    };
    CHECK(dt::attack_success_rate(mixed, 0.5) == doctest::Approx(3.0 / 4.0));
    CHECK_THROWS_AS(dt::attack_success_rate({}, 0.5), ValidationError);
}

TEST_CASE("cell selection inside masks") {
    Mask m(64, 64);
    // exactly one cell center: cell (2,3) has center pixel (20, 28)
    m.hw.at(20, 28) = 1.0;
    auto cells = dt::cells_in_mask(m, 8);
    REQUIRE(cells.size() == 1);
    CHECK(cells[0].first == 2);
    CHECK(cells[0].second == 3);

    Mask full(64, 64);
    std::fill(full.hw.data.begin(), full.hw.data.end(), 1.0);
    CHECK(dt::cells_in_mask(full, 8).size() == 64);

    // random mask: per-cell point-in-mask oracle
    Rng rng(25);
    Mask rnd(64, 64);
    for (auto& v : rnd.hw.data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto got = dt::cells_in_mask(rnd, 8);
    std::vector<std::pair<int, int>> expect;
    for (int gy = 0; gy < 8; ++gy)
        for (int gx = 0; gx < 8; ++gx)
            if (rnd.hw.at(gy * 8 + 4, gx * 8 + 4) != 0.0) expect.push_back({gy, gx});
    CHECK(got == expect);
}

TEST_CASE("adversarial logit selection and empty-mask rejection") {
    dt::DetectorConfig cfg;
    dt::Detector det(cfg, 31);
    det.set_trained(true);
    Rng rng(32);
    RgbImage img(64, 64);
    for (auto& v : img.chw.data) v = rng.uniform();
    Mask m(64, 64);
    for (int y = 8; y < 24; ++y)
        for (int x = 8; x < 24; ++x) m.hw.at(y, x) = 1.0;
    auto sel = dt::adversarial_logit_selection(det, img, m);
    CHECK(sel.background_label == 0);
    CHECK(sel.logits.size() == dt::cells_in_mask(m, 8).size());

    Mask empty(64, 64);
    CHECK_THROWS_AS(dt::adversarial_logit_selection(det, img, empty), ValidationError);
}

TEST_CASE("detector logits differentiable w.r.t. the input image") {
    dt::DetectorConfig cfg;
    cfg.image_size = 8;
    cfg.grid = 1;
    dt::Detector det(cfg, 33);
    Rng rng(34);
    Tensor x({1, 3, 8, 8});
    for (auto& v : x.data) v = rng.uniform();
    const double err = camo::testing::gradcheck(
        [&](const Var& v) { return mean_all(det.cls_logits_v(v)); }, x);
    CHECK(err < 1e-3);
}

TEST_CASE("detect_boxes thresholds and training determinism") {
    corpus::CorpusParams p;
    p.train_count = 40;
    p.val_count = 10;
    p.test_count = 5;
    corpus::Corpus c = corpus::build_corpus(p);
    dt::DetectorConfig cfg;
    dt::Detector det(cfg, 41);
    auto s1 = dt::train_detector(det, c, 60, 4, 1e-3, 8.0, 42);
    dt::Detector det2(cfg, 41);
    auto s2 = dt::train_detector(det2, c, 60, 4, 1e-3, 8.0, 42);
    CHECK(s1.final_loss == s2.final_loss);
    CHECK(det.hash() == det2.hash());

    auto ds = dt::detect_boxes(det, c.records[0].image, 1.0, 0.5);
    CHECK(ds.detections.empty());

    dt::Detector untrained(cfg, 43);
    CHECK_THROWS_AS(dt::detect_boxes(untrained, c.records[0].image, 0.5, 0.5), NotReadyError);

    CHECK_THROWS_AS(dt::train_detector(det, corpus::Corpus{}, 10, 4, 1e-3, 8.0, 1),
                    ValidationError);
}

TEST_CASE("detection set serialization round trip") {
    Rng rng(51);
    auto sets = random_sets(rng, 5);
    const std::string path = "test_sets.jsonl";
    dt::write_detection_sets(path, sets);
    auto back = dt::read_detection_sets(path);
    REQUIRE(back.size() == sets.size());
    for (size_t s = 0; s < sets.size(); ++s) {
        CHECK(back[s].image_id == sets[s].image_id);
        REQUIRE(back[s].detections.size() == sets[s].detections.size());
        for (size_t i = 0; i < sets[s].detections.size(); ++i) {
            CHECK(back[s].detections[i].confidence == sets[s].detections[i].confidence);
            CHECK(back[s].detections[i].box.x == sets[s].detections[i].box.x);
            CHECK(back[s].detections[i].box.w == sets[s].detections[i].box.w);
        }
        REQUIRE(back[s].ground_truth.size() == sets[s].ground_truth.size());
    }
    std::filesystem::remove(path);
}

TEST_SUITE_END();
