#include "camo/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>

#include "camo/colorspace.hpp"
#include "camo/maskops.hpp"

namespace camo::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

std::string stage_to_string(Stage s) {
    switch (s) {
        case Stage::no_box: return "no_box";
        case Stage::white_box: return "white_box";
        case Stage::one_stage: return "one_stage";
    }
    return "?";
}

backend::DenoiserConfig make_denoiser_config(const config::RunConfig& cfg) {
    backend::DenoiserConfig d;
    d.latent_channels = cfg.backend.latent_channels;
    d.latent_size = cfg.corpus.image_size / 4;
    d.use_background = cfg.strategy.mode == "image_level";
    return d;
}

backend::NoiseSchedule make_schedule(const config::RunConfig& cfg) {
    if (cfg.backend.mode == "diffusion")
        return backend::NoiseSchedule::diffusion_linear(cfg.backend.timesteps,
                                                        cfg.backend.beta_start,
                                                        cfg.backend.beta_end);
    return backend::NoiseSchedule::rectflow(cfg.backend.rectflow_target == "z0_minus_eps"
                                                ? backend::RectflowTarget::z0_minus_eps
                                                : backend::RectflowTarget::eps_minus_z0);
}

int sample_steps_for(const config::RunConfig& cfg) {
    return cfg.backend.mode == "diffusion" ? cfg.backend.sample_steps
                                           : cfg.backend.rectflow_sample_steps;
}

namespace {

// Everything constant per record during stage training.
struct RecordCache {
    Tensor cond;         // [K,h,w]
    Tensor z0;           // [C,h,w]
    Tensor x0_l;         // [H,W] normalized L
    Tensor x0_bg;        // [3,H,W] x0*(1-m)
    Tensor inv_mask_px;  // [H,W]
    Tensor inv_mask_lat; // [h,w] 1 - fractional downsampled mask
    const losses::StyleRef* style_ref = nullptr;
    losses::StyleRef own_style_ref;
    losses::BackgroundRef bg_ref;
    bool has_bg_ref = false;
};

struct FreezeGuard {
    std::vector<std::pair<Var, bool>> saved;
    explicit FreezeGuard(const std::vector<nn::ParamMap>& maps) {
        for (const auto& pm : maps)
            for (const auto& [name, p] : pm) {
                (void)name;
                saved.push_back({p, p->requires_grad});
                p->requires_grad = false;
            }
    }
    ~FreezeGuard() {
        for (auto& [p, v] : saved) p->requires_grad = v;
    }
};

Tensor normalized_ab_batch(const Tensor& x) {
    const int N = x.shape[0], H = x.shape[2], W = x.shape[3];
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor out({N, 2, H, W});
    for (int n = 0; n < N; ++n) {
        const double* p = x.ptr() + static_cast<int64_t>(n) * 3 * hw;
        double* o = out.ptr() + static_cast<int64_t>(n) * 2 * hw;
        for (int64_t i = 0; i < hw; ++i) {
            const double rgb[3] = {p[i], p[hw + i], p[2 * hw + i]};
            double lab[3];
            lab_from_rgb_pixel(rgb, lab);
            o[i] = (lab[1] + 128.0) / 255.0;
            o[hw + i] = (lab[2] + 128.0) / 255.0;
        }
    }
    return out;
}

RecordCache build_cache(const corpus::SceneRecord& rec, const StageInputs& in,
                        std::map<std::string, losses::StyleRef>& scene_refs, bool want_bg_ref) {
    RecordCache c;
    const int factor = in.ae->config().factor;
    const int h = rec.image.height() / factor;
    backend::Conditioning cond = reference::build_conditioning(rec, in.strategy);
    c.cond = backend::conditioning_maps(cond, h, h);
    c.z0 = in.ae->encode_image(rec.image);
    c.x0_l = colorspace::normalized_l(rec.image);

    const int64_t hw = static_cast<int64_t>(rec.image.height()) * rec.image.width();
    c.x0_bg = Tensor({3, rec.image.height(), rec.image.width()});
    for (int ch = 0; ch < 3; ++ch)
        for (int64_t i = 0; i < hw; ++i)
            c.x0_bg.data[ch * hw + i] =
                rec.image.chw.data[ch * hw + i] * (1.0 - rec.vehicle_mask.hw.data[i]);
    c.inv_mask_px = Tensor({rec.image.height(), rec.image.width()});
    for (int64_t i = 0; i < hw; ++i) c.inv_mask_px.data[i] = 1.0 - rec.vehicle_mask.hw.data[i];
    FractionalMask md = maskops::downsample_mask(rec.vehicle_mask, factor);
    c.inv_mask_lat = Tensor({md.height(), md.width()});
    for (size_t i = 0; i < md.hw.data.size(); ++i)
        c.inv_mask_lat.data[i] = 1.0 - md.hw.data[i];

    if (in.strategy.mode == reference::Mode::scene_level) {
        auto it = scene_refs.find(rec.scene_label);
        if (it == scene_refs.end()) {
            auto [x_s, m_s] = reference::select_reference(rec, in.strategy);
            it = scene_refs
                     .emplace(rec.scene_label,
                              losses::style_reference(*in.critic_model, *in.ae, x_s, m_s))
                     .first;
        }
        c.style_ref = &it->second;
    } else {
        auto [x_s, m_s] = reference::select_reference(rec, in.strategy);
        c.own_style_ref = losses::style_reference(*in.critic_model, *in.ae, x_s, m_s);
        c.style_ref = &c.own_style_ref;
    }
    if (want_bg_ref) {
        c.bg_ref = losses::background_reference(*in.ae, rec.image, rec.vehicle_mask);
        c.has_bg_ref = true;
    }
    return c;
}

}  // namespace

std::string train_stage(Stage stage, const StageInputs& in, const config::StageSection& scfg,
                        const std::string& run_dir, const std::string& init_checkpoint) {
    if (!in.corpus) throw ValidationError("train_stage: missing corpus");
    if (!in.ae || !in.ae->trained())
        throw NotReadyError("train_stage: autoencoder checkpoint missing or untrained");
    if (!in.critic_model || !in.critic_model->trained())
        throw NotReadyError("train_stage: critic checkpoint missing or untrained");
    const bool needs_detector = stage != Stage::no_box;
    if (needs_detector && (!in.detector || !in.detector->trained()))
        throw NotReadyError("train_stage: detector checkpoint missing or untrained");
    if (stage == Stage::white_box && init_checkpoint.empty())
        throw NotReadyError("train_stage: white_box requires a stage-1 checkpoint");

    auto train = in.corpus->split("train");
    if (train.empty()) throw ValidationError("train_stage: empty train split");
    if (in.strategy.mode == reference::Mode::scene_level && scfg.weights.beta != 0.0)
        throw ValidationError("train_stage: beta must be 0 under the scene-level strategy");
    if (in.strategy.mode == reference::Mode::image_level && scfg.weights.beta == 0.0)
        throw ValidationError("train_stage: beta must be nonzero under the image-level strategy");

    config::ToggleSection tog = scfg.toggles;
    if (stage == Stage::no_box) {
        tog.color = false;
        tog.adv = false;
    }
    if (stage == Stage::one_stage) tog.color = false;  // no frozen reference exists
    const bool use_bg = tog.background && scfg.weights.beta != 0.0;

    backend::DenoiserConfig dcfg;
    dcfg.latent_channels = in.ae->config().latent_channels;
    dcfg.latent_size = in.corpus->params.image_size / in.ae->config().factor;
    dcfg.use_background = in.strategy.mode == reference::Mode::image_level;

    backend::Denoiser model(dcfg, mix_seed(scfg.seed, 0xd0c5ULL));
    std::optional<backend::Denoiser> frozen;
    if (stage == Stage::white_box) {
        model.load(init_checkpoint);
        frozen.emplace(dcfg, 0);
        frozen->load(init_checkpoint);
        nn::set_requires_grad(frozen->params(), false);
    } else if (!init_checkpoint.empty()) {
        // no_box / one_stage fine-tune the pretrained base when one is given
        model.load(init_checkpoint);
    }

    std::vector<nn::ParamMap> freeze = {in.ae->params(), in.critic_model->params()};
    if (needs_detector) freeze.push_back(in.detector->params());
    FreezeGuard guard(std::move(freeze));
    const uint64_t detector_hash_before = needs_detector ? in.detector->hash() : 0;
    const uint64_t frozen_hash_before = frozen ? frozen->hash() : 0;

    fs::create_directories(fs::path(run_dir) / "checkpoints");
    fs::create_directories(fs::path(run_dir) / "probe");
    {
        json meta;
        meta["stage"] = stage_to_string(stage);
        meta["config_hash"] = in.config_hash;
        meta["weights"] = {{"struct", scfg.weights.struct_w}, {"alpha", scfg.weights.alpha},
                           {"beta", scfg.weights.beta},       {"gamma", scfg.weights.gamma},
                           {"lambda", scfg.weights.lambda}};
        meta["learning_rate"] = scfg.learning_rate;
        meta["iterations"] = scfg.iterations;
        meta["batch"] = scfg.batch;
        meta["seed"] = scfg.seed;
        meta["strategy"] = reference::mode_to_string(in.strategy.mode);
        meta["init_checkpoint"] = init_checkpoint;
        std::ofstream cf(fs::path(run_dir) / "config.json");
        cf << meta.dump(2) << "\n";
    }

    std::vector<std::unique_ptr<RecordCache>> caches(train.size());
    std::map<std::string, losses::StyleRef> scene_refs;
    auto cache_of = [&](int i) -> RecordCache& {
        if (!caches[i]) caches[i] = std::make_unique<RecordCache>(
                            build_cache(*train[i], in, scene_refs, use_bg));
        return *caches[i];
    };

    const int N = scfg.batch;
    const int H = in.corpus->params.image_size;
    const int h = dcfg.latent_size;
    const int C = dcfg.latent_channels;
    const int K = backend::conditioning_channels(dcfg.use_background);
    const int64_t HW = static_cast<int64_t>(H) * H;
    const int64_t hw = static_cast<int64_t>(h) * h;

    nn::Adam opt(model.params(), scfg.learning_rate);
    Rng rng(scfg.seed);
    std::ofstream log(fs::path(run_dir) / "losses.jsonl");
    if (!log) throw LoadError("train_stage: cannot open losses.jsonl in " + run_dir);

    auto save_ckpt = [&](const std::string& name) {
        const std::string dir = (fs::path(run_dir) / "checkpoints" / name).string();
        model.save(dir, in.config_hash);
        ProbeMetrics pm = probe_metrics(model, in);
        json pj;
        pj["struct_loss"] = pm.struct_loss;
        pj["style_loss"] = pm.style_loss;
        pj["background_loss"] = pm.background_loss;
        pj["mean_vehicle_confidence"] = pm.mean_vehicle_confidence;
        std::ofstream pf(fs::path(run_dir) / "probe" / (name + ".json"));
        pf << pj.dump(2) << "\n";
        return dir;
    };

    for (int step = 0; step < scfg.iterations; ++step) {
        // Linear decay to lr/5 over the run.
        opt.set_lr(scfg.learning_rate *
                   (1.0 - 0.8 * step / std::max(1, scfg.iterations - 1)));
        // Draw the batch, one shared t, and per-sample noise.
        std::vector<int> pick(N);
        for (int b = 0; b < N; ++b) pick[b] = rng.uniform_int(static_cast<int>(train.size()));
        const double t = in.sched.mode == backend::Mode::diffusion
                             ? 1.0 + rng.uniform_int(in.sched.timesteps())
                             : rng.uniform();

        Tensor zt_b({N, C, h, h});
        Tensor cond_b({N, K, h, h});
        Tensor x0_l_b({N, 1, H, H});
        Tensor masks_b({N, 1, H, H});
        Tensor x0_bg_b({N, 3, H, H});
        Tensor inv_px_b({N, 1, H, H});
        Tensor inv_lat_b({N, 1, h, h});
        Tensor zb_ref_b({N, C, h, h});
        std::vector<const Mask*> mask_ptrs(N);
        std::vector<const losses::StyleRef*> ref_ptrs(N);
        for (int b = 0; b < N; ++b) {
            RecordCache& rc = cache_of(pick[b]);
            const corpus::SceneRecord& rec = *train[pick[b]];
            Tensor eps = Tensor::randn({C, h, h}, rng);
            Tensor zt = backend::forward_noise(rc.z0, t, eps, in.sched);
            std::copy(zt.data.begin(), zt.data.end(), zt_b.data.begin() + b * C * hw);
            std::copy(rc.cond.data.begin(), rc.cond.data.end(),
                      cond_b.data.begin() + b * K * hw);
            std::copy(rc.x0_l.data.begin(), rc.x0_l.data.end(),
                      x0_l_b.data.begin() + b * HW);
            std::copy(rec.vehicle_mask.hw.data.begin(), rec.vehicle_mask.hw.data.end(),
                      masks_b.data.begin() + b * HW);
            std::copy(rc.x0_bg.data.begin(), rc.x0_bg.data.end(),
                      x0_bg_b.data.begin() + b * 3 * HW);
            std::copy(rc.inv_mask_px.data.begin(), rc.inv_mask_px.data.end(),
                      inv_px_b.data.begin() + b * HW);
            std::copy(rc.inv_mask_lat.data.begin(), rc.inv_mask_lat.data.end(),
                      inv_lat_b.data.begin() + b * hw);
            if (rc.has_bg_ref)
                std::copy(rc.bg_ref.masked_latent.data.begin(), rc.bg_ref.masked_latent.data.end(),
                          zb_ref_b.data.begin() + b * C * hw);
            mask_ptrs[b] = &rec.vehicle_mask;
            ref_ptrs[b] = rc.style_ref;
        }
        // Pre-mask the structure target so the difference is confined to the
        // mask on both sides.
        for (int64_t i = 0; i < static_cast<int64_t>(N) * HW; ++i)
            x0_l_b.data[i] *= masks_b.data[i];

        Var pred = model.forward_v(constant(zt_b), backend::normalize_t(t, in.sched), cond_b);
        Var z0_hat = backend::one_step_estimate_v(zt_b, t, pred, in.sched);
        Var x_hat = in.ae->decode_v(z0_hat);

        losses::LossReport report;
        Var total;
        auto add_term = [&](const std::string& name, const Var& v, double w) {
            report.terms.push_back({name, v ? v->val.data[0] : 0.0});
            if (v && w != 0.0) {
                Var scaled = affine(v, w, 0.0);
                total = total ? add(total, scaled) : scaled;
            }
        };

        Var mask_const = constant(masks_b);
        add_term("struct", tog.struct_t ? losses::struct_loss_v(x_hat, x0_l_b, masks_b) : nullptr,
                 scfg.weights.struct_w);
        add_term("style",
                 tog.style
                     ? losses::style_loss_v(*in.critic_model, *in.ae, x_hat, mask_ptrs, ref_ptrs)
                     : nullptr,
                 scfg.weights.alpha);
        add_term("background",
                 use_bg ? losses::background_loss_v(*in.critic_model, *in.ae, x_hat, inv_px_b,
                                                    inv_lat_b, zb_ref_b)
                        : nullptr,
                 scfg.weights.beta);

        Var x_comp;
        if (tog.adv && needs_detector) {
            x_comp = add(mul_mask(x_hat, mask_const), constant(x0_bg_b));
            add_term("adv", losses::adversarial_loss_v(*in.detector, x_comp, mask_ptrs),
                     scfg.weights.lambda);
        } else {
            add_term("adv", nullptr, 0.0);
        }

        if (tog.color && frozen) {
            Var pred_f =
                frozen->forward_v(constant(zt_b), backend::normalize_t(t, in.sched), cond_b);
            Tensor z0_f = backend::one_step_estimate(zt_b, t, pred_f->val, in.sched);
            Tensor x_i = in.ae->decode_v(constant(z0_f))->val;
            Tensor ab_f = normalized_ab_batch(x_i);
            add_term("color", losses::color_consistency_loss_v(x_hat, ab_f, masks_b),
                     scfg.weights.gamma);
        } else {
            add_term("color", nullptr, 0.0);
        }

        // Total must reconstruct from terms and weights.
        double recomputed = 0.0;
        const double ws[] = {scfg.weights.struct_w, scfg.weights.alpha, scfg.weights.beta,
                             scfg.weights.lambda, scfg.weights.gamma};
        for (size_t k = 0; k < report.terms.size(); ++k)
            recomputed += ws[k] * report.terms[k].second;
        report.total = total ? total->val.data[0] : 0.0;
        if (std::abs(report.total - recomputed) > 1e-6)
            throw NumericalError("train_stage: loss total does not reconstruct from terms");
        if (!std::isfinite(report.total)) {
            json diag;
            diag["step"] = step;
            for (auto& [k, v] : report.terms) diag[k] = v;
            throw NumericalError("train_stage: non-finite loss at step " +
                                 std::to_string(step) + ": " + diag.dump());
        }

        json line;
        line["step"] = step;
        json terms;
        for (auto& [k, v] : report.terms) terms[k] = v;
        line["terms"] = terms;
        line["total"] = report.total;
        log << line.dump() << "\n";

        if (total) {
            opt.zero_grad();
            backward(total);
            opt.step();
        }

        if (scfg.checkpoint_every > 0 && (step + 1) % scfg.checkpoint_every == 0 &&
            step + 1 < scfg.iterations)
            save_ckpt("step_" + std::to_string(step + 1));
    }
    const std::string final_dir = save_ckpt("final");

    if (needs_detector && in.detector->hash() != detector_hash_before)
        throw std::logic_error("train_stage: detector parameters changed during training");
    if (frozen && frozen->hash() != frozen_hash_before)
        throw std::logic_error("train_stage: frozen stage-1 copy changed during training");
    return final_dir;
}

InferResult infer(const backend::Denoiser& model, const backend::Autoencoder& ae,
                  const corpus::SceneRecord& record, const reference::StrategyConfig& strategy,
                  const backend::NoiseSchedule& sched, int steps, uint64_t seed) {
    backend::Conditioning cond = reference::build_conditioning(record, strategy);
    InferResult r;
    r.camouflaged = backend::sample(model, ae, cond, sched, steps, mix_seed(seed, record.seed));
    r.composited = maskops::composite(r.camouflaged, record.image, record.vehicle_mask);
    return r;
}

ProbeMetrics probe_metrics(const backend::Denoiser& model, const StageInputs& in) {
    auto val = in.corpus->split("val");
    const int n_probe = std::min<int>(8, static_cast<int>(val.size()));
    if (n_probe == 0) throw ValidationError("probe_metrics: empty val split");

    const int factor = in.ae->config().factor;
    const int H = in.corpus->params.image_size, h = H / factor;
    const int C = in.ae->config().latent_channels;
    const int K = backend::conditioning_channels(model.config().use_background);
    const int64_t HW = static_cast<int64_t>(H) * H, hw = static_cast<int64_t>(h) * h;
    const double t = in.sched.mode == backend::Mode::diffusion
                         ? std::floor(in.sched.timesteps() / 2.0)
                         : 0.5;

    Tensor zt_b({n_probe, C, h, h}), cond_b({n_probe, K, h, h});
    Tensor x0_l_b({n_probe, 1, H, H}), masks_b({n_probe, 1, H, H});
    std::vector<const Mask*> mask_ptrs(n_probe);
    std::vector<const losses::StyleRef*> ref_ptrs(n_probe);
    std::map<std::string, losses::StyleRef> scene_refs;
    std::vector<std::unique_ptr<RecordCache>> caches(n_probe);

    for (int b = 0; b < n_probe; ++b) {
        const corpus::SceneRecord& rec = *val[b];
        caches[b] = std::make_unique<RecordCache>(build_cache(rec, in, scene_refs, false));
        Rng erng(mix_seed(0x9e0be5ULL, rec.seed));
        Tensor eps = Tensor::randn({C, h, h}, erng);
        Tensor zt = backend::forward_noise(caches[b]->z0, t, eps, in.sched);
        std::copy(zt.data.begin(), zt.data.end(), zt_b.data.begin() + b * C * hw);
        std::copy(caches[b]->cond.data.begin(), caches[b]->cond.data.end(),
                  cond_b.data.begin() + b * K * hw);
        std::copy(caches[b]->x0_l.data.begin(), caches[b]->x0_l.data.end(),
                  x0_l_b.data.begin() + b * HW);
        std::copy(rec.vehicle_mask.hw.data.begin(), rec.vehicle_mask.hw.data.end(),
                  masks_b.data.begin() + b * HW);
        mask_ptrs[b] = &rec.vehicle_mask;
        ref_ptrs[b] = caches[b]->style_ref;
    }
    for (int64_t i = 0; i < static_cast<int64_t>(n_probe) * HW; ++i)
        x0_l_b.data[i] *= masks_b.data[i];

    FreezeGuard guard({model.params(), in.ae->params(), in.critic_model->params()});
    Var pred = model.forward_v(constant(zt_b), backend::normalize_t(t, in.sched), cond_b);
    Var z0_hat = backend::one_step_estimate_v(zt_b, t, pred, in.sched);
    Var x_hat = in.ae->decode_v(z0_hat);

    ProbeMetrics pm;
    pm.struct_loss = losses::struct_loss_v(x_hat, x0_l_b, masks_b)->val.data[0];
    pm.style_loss =
        losses::style_loss_v(*in.critic_model, *in.ae, x_hat, mask_ptrs, ref_ptrs)->val.data[0];
    pm.background_loss = 0.0;
    pm.mean_vehicle_confidence = -1.0;

    if (in.detector && in.detector->trained()) {
        FreezeGuard dguard({in.detector->params()});
        Tensor comp = x_hat->val;
        for (int b = 0; b < n_probe; ++b) {
            const corpus::SceneRecord& rec = *val[b];
            for (int c = 0; c < 3; ++c)
                for (int64_t i = 0; i < HW; ++i) {
                    const double m = rec.vehicle_mask.hw.data[i];
                    double& v = comp.data[(static_cast<int64_t>(b) * 3 + c) * HW + i];
                    v = v * m + rec.image.chw.data[c * HW + i] * (1.0 - m);
                }
        }
        Var cls = in.detector->cls_logits_v(constant(comp));
        double acc = 0.0;
        int count = 0;
        for (int b = 0; b < n_probe; ++b) {
            for (auto [gy, gx] : detect::cells_in_mask(*mask_ptrs[b], in.detector->config().grid)) {
                const double l0 = cls->val.at(b, 0, gy, gx), l1 = cls->val.at(b, 1, gy, gx);
                acc += 1.0 / (1.0 + std::exp(l0 - l1));
                ++count;
            }
        }
        pm.mean_vehicle_confidence = count ? acc / count : 0.0;
    }
    return pm;
}

}  // namespace camo::pipeline
