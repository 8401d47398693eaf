#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "camo/backend.hpp"
#include "camo/colorspace.hpp"
#include "camo/detect.hpp"
#include "camo/evalharness.hpp"
#include "camo/maskops.hpp"
#include "camo/synthcorpus.hpp"

namespace py = pybind11;
using namespace camo;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;
using PyDet = std::pair<std::vector<double>, double>;          // (box[4], confidence)
using PyImage = std::pair<std::vector<PyDet>, std::vector<std::vector<double>>>;

RgbImage image_from_hwc(const Arr& a) {
    if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("expected an [H,W,3] array");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    RgbImage img(h, w);
    auto r = a.unchecked<3>();
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.chw.data[c * hw + static_cast<int64_t>(y) * w + x] = r(y, x, c);
    return img;
}

py::array hwc_from_chw(const Tensor& chw) {
    const int c = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
    py::array_t<double> out({h, w, c});
    auto rw = out.mutable_unchecked<3>();
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                rw(y, x, ch) = chw.data[ch * hw + static_cast<int64_t>(y) * w + x];
    return out;
}

Mask mask_from_hw(const Arr& a) {
    if (a.ndim() != 2) throw ValidationError("expected an [H,W] array");
    Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    auto r = a.unchecked<2>();
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) m.hw.at(y, x) = r(y, x);
    m.validate();
    return m;
}

py::array hw_array(const Tensor& hw) {
    py::array_t<double> out({hw.shape[0], hw.shape[1]});
    std::copy(hw.data.begin(), hw.data.end(), out.mutable_data());
    return out;
}

Tensor latent_from(const Arr& a) {
    if (a.ndim() != 3) throw ValidationError("expected a [C,h,w] array");
    Tensor t({static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
              static_cast<int>(a.shape(2))});
    std::copy(a.data(), a.data() + t.numel(), t.data.begin());
    return t;
}

py::array latent_array(const Tensor& t) {
    py::array_t<double> out({t.shape[0], t.shape[1], t.shape[2]});
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

backend::NoiseSchedule schedule_from(const std::string& mode, int timesteps, double beta_start,
                                     double beta_end, const std::string& rectflow_target) {
    if (mode == "diffusion")
        return backend::NoiseSchedule::diffusion_linear(timesteps, beta_start, beta_end);
    if (mode == "rectflow")
        return backend::NoiseSchedule::rectflow(rectflow_target == "eps_minus_z0"
                                                    ? backend::RectflowTarget::eps_minus_z0
                                                    : backend::RectflowTarget::z0_minus_eps);
    throw ValidationError("mode must be diffusion or rectflow");
}

detect::DetectionSet set_from(const PyImage& img) {
    detect::DetectionSet s;
    for (const auto& [b, conf] : img.first) {
        if (b.size() != 4) throw ValidationError("boxes are [x,y,w,h]");
        s.detections.push_back({Box{b[0], b[1], b[2], b[3]}, conf});
    }
    for (const auto& b : img.second) {
        if (b.size() != 4) throw ValidationError("boxes are [x,y,w,h]");
        s.ground_truth.push_back(Box{b[0], b[1], b[2], b[3]});
    }
    return s;
}

std::vector<detect::DetectionSet> sets_from(const std::vector<PyImage>& images) {
    std::vector<detect::DetectionSet> sets;
    for (const auto& img : images) sets.push_back(set_from(img));
    return sets;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "camokit core operations";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<NotReadyError>(m, "NotReadyError", PyExc_RuntimeError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    // colorspace
    m.def("rgb_to_lab", [](const Arr& a) {
        return hwc_from_chw(colorspace::rgb_to_lab(image_from_hwc(a)).chw);
    });
    m.def("lab_to_rgb", [](const Arr& a) {
        if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("expected [H,W,3]");
        LabImage lab(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
        auto r = a.unchecked<3>();
        const int64_t hw = static_cast<int64_t>(lab.height()) * lab.width();
        for (int y = 0; y < lab.height(); ++y)
            for (int x = 0; x < lab.width(); ++x)
                for (int c = 0; c < 3; ++c)
                    lab.chw.data[c * hw + static_cast<int64_t>(y) * lab.width() + x] =
                        r(y, x, c);
        return hwc_from_chw(colorspace::lab_to_rgb(lab).chw);
    });
    m.def("normalized_l", [](const Arr& a) {
        return hw_array(colorspace::normalized_l(image_from_hwc(a)));
    });
    m.def("normalized_ab", [](const Arr& a) {
        return hwc_from_chw(colorspace::normalized_ab(image_from_hwc(a)));
    });

    // maskops
    m.def("dilate", [](const Arr& mask, int k) {
        return hw_array(maskops::dilate(mask_from_hw(mask), k).hw);
    });
    m.def("annulus", [](const Arr& mask, int k) {
        return hw_array(maskops::annulus(mask_from_hw(mask), k).hw);
    });
    m.def("downsample_mask", [](const Arr& mask, int factor) {
        return hw_array(maskops::downsample_mask(mask_from_hw(mask), factor).hw);
    });
    m.def("binarize", [](const Arr& fm, double thr) {
        FractionalMask f(static_cast<int>(fm.shape(0)), static_cast<int>(fm.shape(1)));
        std::copy(fm.data(), fm.data() + f.hw.numel(), f.hw.data.begin());
        return hw_array(maskops::binarize(f, thr).hw);
    });
    m.def("composite", [](const Arr& fg, const Arr& bg, const Arr& mask) {
        return hwc_from_chw(
            maskops::composite(image_from_hwc(fg), image_from_hwc(bg), mask_from_hw(mask)).chw);
    });

    // noise schedule operations
    m.def(
        "forward_noise",
        [](const Arr& z0, double t, const Arr& eps, const std::string& mode, int timesteps,
           double beta_start, double beta_end, const std::string& rectflow_target) {
            auto sched = schedule_from(mode, timesteps, beta_start, beta_end, rectflow_target);
            return latent_array(
                backend::forward_noise(latent_from(z0), t, latent_from(eps), sched));
        },
        py::arg("z0"), py::arg("t"), py::arg("eps"), py::arg("mode") = "diffusion",
        py::arg("timesteps") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02,
        py::arg("rectflow_target") = "z0_minus_eps");
    m.def(
        "one_step_estimate",
        [](const Arr& zt, double t, const Arr& pred, const std::string& mode, int timesteps,
           double beta_start, double beta_end, const std::string& rectflow_target) {
            auto sched = schedule_from(mode, timesteps, beta_start, beta_end, rectflow_target);
            return latent_array(
                backend::one_step_estimate(latent_from(zt), t, latent_from(pred), sched));
        },
        py::arg("zt"), py::arg("t"), py::arg("pred"), py::arg("mode") = "diffusion",
        py::arg("timesteps") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02,
        py::arg("rectflow_target") = "z0_minus_eps");

    // detection metrics
    m.def("nms", [](const std::vector<PyDet>& dets, double iou_thr) {
        auto kept = detect::nms(set_from({dets, {}}).detections, iou_thr);
        std::vector<PyDet> out;
        for (const auto& d : kept)
            out.push_back({{d.box.x, d.box.y, d.box.w, d.box.h}, d.confidence});
        return out;
    });
    m.def("ap50", [](const std::vector<PyImage>& images) {
        auto sets = sets_from(images);
        return detect::ap50(std::span<const detect::DetectionSet>(sets));
    });
    m.def("f1_optimal_threshold", [](const std::vector<PyImage>& images) {
        return detect::f1_optimal_threshold(sets_from(images));
    });
    m.def("attack_success_rate", [](const std::vector<PyImage>& images, double threshold) {
        return detect::attack_success_rate(sets_from(images), threshold);
    });

    // evaluation utilities
    m.def("ssim", [](const Arr& a, const Arr& b) {
        return eval::ssim(image_from_hwc(a), image_from_hwc(b));
    });
    m.def(
        "nlm_denoise",
        [](const Arr& a, int patch, int search, double h) {
            return hwc_from_chw(eval::nlm_denoise(image_from_hwc(a), patch, search, h).chw);
        },
        py::arg("img"), py::arg("patch") = 3, py::arg("search") = 7, py::arg("h") = 0.1);
    m.def(
        "bilateral_filter",
        [](const Arr& a, double sigma_space, double sigma_color) {
            return hwc_from_chw(
                eval::bilateral_filter(image_from_hwc(a), sigma_space, sigma_color).chw);
        },
        py::arg("img"), py::arg("sigma_space") = 2.0, py::arg("sigma_color") = 0.1);

    // synthetic corpus
    m.def("scene_types", [] { return corpus::scene_types(); });
    m.def(
        "gen_scene",
        [](uint64_t seed, const std::string& scene, int image_size) {
            corpus::CorpusParams p;
            p.image_size = image_size;
            corpus::SceneRecord rec = corpus::gen_scene(seed, scene, p);
            py::dict d;
            d["image"] = hwc_from_chw(rec.image.chw);
            d["mask"] = hw_array(rec.vehicle_mask.hw);
            d["box"] = py::make_tuple(rec.box.x, rec.box.y, rec.box.w, rec.box.h);
            d["scene_label"] = rec.scene_label;
            d["objects"] = rec.objects;
            d["prompt"] = rec.prompt;
            d["seed"] = rec.seed;
            return d;
        },
        py::arg("seed"), py::arg("scene"), py::arg("image_size") = 64);
    m.def(
        "gen_concept_exemplar",
        [](uint64_t seed, const std::string& scene, const std::string& concept_name, int size) {
            corpus::ConceptExemplar ex =
                corpus::gen_concept_exemplar(seed, scene, concept_name, size);
            py::dict d;
            d["image"] = hwc_from_chw(ex.image.chw);
            d["mask"] = hw_array(ex.concept_mask.hw);
            d["concept_name"] = ex.concept_name;
            d["scene_label"] = ex.scene_label;
            return d;
        },
        py::arg("seed"), py::arg("scene"), py::arg("concept_name"), py::arg("size") = 64);
}
