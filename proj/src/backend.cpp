#include "camo/backend.hpp"

#include <json.hpp>

#include <chrono>
#include <fstream>

namespace camo::backend {

NoiseSchedule NoiseSchedule::diffusion_linear(int timesteps, double beta_start, double beta_end) {
    if (timesteps < 1) throw ValidationError("NoiseSchedule: timesteps must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw ValidationError("NoiseSchedule: bad beta range");
    NoiseSchedule s;
    s.mode = Mode::diffusion;
    s.alpha_bar.resize(timesteps);
    double prod = 1.0;
    for (int i = 0; i < timesteps; ++i) {
        const double beta =
            timesteps == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * i / (timesteps - 1.0);
        prod *= 1.0 - beta;
        s.alpha_bar[i] = prod;
    }
    // Monotonicity and range are structural here, but validate anyway so a
    // hand-constructed schedule cannot slip through.
    for (int i = 0; i < timesteps; ++i) {
        if (!(s.alpha_bar[i] > 0.0 && s.alpha_bar[i] <= 1.0))
            throw ValidationError("NoiseSchedule: alpha_bar outside (0,1]");
        if (i > 0 && !(s.alpha_bar[i] < s.alpha_bar[i - 1]))
            throw ValidationError("NoiseSchedule: alpha_bar not strictly decreasing");
    }
    return s;
}

NoiseSchedule NoiseSchedule::rectflow(RectflowTarget target) {
    NoiseSchedule s;
    s.mode = Mode::rectflow;
    s.rf_target = target;
    return s;
}

double NoiseSchedule::alpha_bar_at(int t) const {
    if (mode != Mode::diffusion) throw ValidationError("alpha_bar_at: not a diffusion schedule");
    if (t < 1 || t > timesteps()) throw ValidationError("alpha_bar_at: t out of range");
    return alpha_bar[t - 1];
}

void NoiseSchedule::validate_t(double t) const {
    if (mode == Mode::diffusion) {
        if (t != std::floor(t) || t < 1 || t > timesteps())
            throw ValidationError("schedule: diffusion t must be an integer in [1,T]");
    } else {
        if (!(t >= 0.0 && t <= 1.0))
            throw ValidationError("schedule: rectflow t must lie in [0,1]");
    }
}

Tensor forward_noise(const Tensor& z0, double t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!z0.same_shape(eps)) throw ValidationError("forward_noise: shape mismatch");
    sched.validate_t(t);
    Tensor out = z0;
    if (sched.mode == Mode::diffusion) {
        const double ab = sched.alpha_bar_at(static_cast<int>(t));
        const double ka = std::sqrt(ab), ke = std::sqrt(1.0 - ab);
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = ka * z0.data[i] + ke * eps.data[i];
    } else {
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = (1.0 - t) * z0.data[i] + t * eps.data[i];
    }
    return out;
}

Tensor one_step_estimate(const Tensor& zt, double t, const Tensor& pred,
                         const NoiseSchedule& sched) {
    if (!zt.same_shape(pred)) throw ValidationError("one_step_estimate: shape mismatch");
    sched.validate_t(t);
    Tensor out = zt;
    if (sched.mode == Mode::diffusion) {
        const double ab = sched.alpha_bar_at(static_cast<int>(t));
        if (ab == 0.0) throw NumericalError("one_step_estimate: alpha_bar is zero");
        const double inv = 1.0 / std::sqrt(ab), ke = std::sqrt(1.0 - ab);
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = (zt.data[i] - ke * pred.data[i]) * inv;
    } else {
        const double sign = sched.rf_target == RectflowTarget::z0_minus_eps ? 1.0 : -1.0;
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = zt.data[i] + sign * t * pred.data[i];
    }
    return out;
}

Var one_step_estimate_v(const Tensor& zt, double t, const Var& pred,
                        const NoiseSchedule& sched) {
    if (!zt.same_shape(pred->val)) throw ValidationError("one_step_estimate: shape mismatch");
    sched.validate_t(t);
    if (sched.mode == Mode::diffusion) {
        const double ab = sched.alpha_bar_at(static_cast<int>(t));
        if (ab == 0.0) throw NumericalError("one_step_estimate: alpha_bar is zero");
        const double inv = 1.0 / std::sqrt(ab), ke = std::sqrt(1.0 - ab);
        Tensor zts = zt;
        for (auto& v : zts.data) v *= inv;
        return add(constant(std::move(zts)), affine(pred, -ke * inv, 0.0));
    }
    const double sign = sched.rf_target == RectflowTarget::z0_minus_eps ? 1.0 : -1.0;
    return add(constant(zt), affine(pred, sign * t, 0.0));
}

Tensor true_prediction_target(const Tensor& z0, const Tensor& eps, double t,
                              const NoiseSchedule& sched) {
    sched.validate_t(t);
    Tensor out = z0;
    if (sched.mode == Mode::diffusion) {
        out = eps;
    } else {
        const double sign = sched.rf_target == RectflowTarget::z0_minus_eps ? 1.0 : -1.0;
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = sign * (z0.data[i] - eps.data[i]);
    }
    return out;
}

double normalize_t(double t, const NoiseSchedule& sched) {
    return sched.mode == Mode::diffusion ? t / sched.timesteps() : t;
}

// ---------------------------------------------------------------- autoencoder

Autoencoder::Autoencoder(AutoencoderConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg.factor != 4) throw ValidationError("Autoencoder: only factor 4 is configured");
    Rng rng(init_seed);
    const int b = cfg.base;
    // Keep the full-resolution layers narrow; nearly all capacity lives at
    // latent resolution.
    e1_ = nn::Conv2d(3, 16, 3, 2, 1, rng);
    e2_ = nn::Conv2d(16, 32, 3, 2, 1, rng);
    e3_ = nn::Conv2d(32, 2 * b, 3, 1, 1, rng);
    e4_ = nn::Conv2d(2 * b, 2 * b, 3, 1, 1, rng);
    e5_ = nn::Conv2d(2 * b, cfg.latent_channels, 1, 1, 0, rng);
    d1_ = nn::Conv2d(cfg.latent_channels, 2 * b, 3, 1, 1, rng);
    d2_ = nn::Conv2d(2 * b, 32, 3, 1, 1, rng);
    d3_ = nn::Conv2d(32, 16, 3, 1, 1, rng);
    d4_ = nn::Conv2d(16, 8, 3, 1, 1, rng);
    d5_ = nn::Conv2d(8, 3, 3, 1, 1, rng);
}

Var Autoencoder::encode_v(const Var& x) const {
    Var h = silu(e1_(x));
    h = silu(e2_(h));
    h = silu(e3_(h));
    h = silu(e4_(h));
    return e5_(h);
}

Var Autoencoder::decode_v(const Var& z) const {
    Var h = silu(d1_(z));
    h = silu(d2_(h));
    h = silu(d3_(upsample2x(h)));
    h = silu(d4_(upsample2x(h)));
    return sigmoid(d5_(h));
}

Tensor Autoencoder::encode(const Tensor& x) const {
    if (!trained_) throw NotReadyError("Autoencoder::encode: model not trained");
    if (x.rank() != 4 || x.shape[1] != 3) throw ValidationError("encode: expected [N,3,H,W]");
    return encode_v(constant(x))->val;
}

Tensor Autoencoder::decode(const Tensor& z) const {
    if (!trained_) throw NotReadyError("Autoencoder::decode: model not trained");
    if (z.rank() != 4 || z.shape[1] != cfg_.latent_channels)
        throw ValidationError("decode: expected [N,C,h,w]");
    return decode_v(constant(z))->val;
}

Tensor Autoencoder::encode_image(const RgbImage& img) const {
    Tensor x({1, 3, img.height(), img.width()});
    x.data = img.chw.data;
    Tensor z = encode(x);
    Tensor out({z.shape[1], z.shape[2], z.shape[3]});
    out.data = z.data;
    return out;
}

RgbImage Autoencoder::decode_latent(const Tensor& z_chw) const {
    Tensor z({1, z_chw.shape[0], z_chw.shape[1], z_chw.shape[2]});
    z.data = z_chw.data;
    Tensor x = decode(z);
    RgbImage img(x.shape[2], x.shape[3]);
    img.chw.data = x.data;
    return img;
}

nn::ParamMap Autoencoder::params() const {
    nn::ParamMap m;
    const nn::Conv2d* layers[] = {&e1_, &e2_, &e3_, &e4_, &e5_, &d1_, &d2_, &d3_, &d4_, &d5_};
    const char* names[] = {"enc1", "enc2", "enc3", "enc4", "enc_out",
                           "dec1", "dec2", "dec3", "dec4", "dec_out"};
    for (int i = 0; i < 10; ++i) {
        m.push_back({std::string(names[i]) + ".w", layers[i]->w});
        m.push_back({std::string(names[i]) + ".b", layers[i]->b});
    }
    return m;
}

void Autoencoder::save(const std::string& dir, uint64_t config_hash) const {
    nn::save_checkpoint(dir, params(), config_hash, "autoencoder");
}

void Autoencoder::load(const std::string& dir) {
    nn::load_checkpoint(dir, params(), "autoencoder");
    trained_ = true;
}

double psnr_db(const RgbImage& a, const RgbImage& b) {
    if (a.height() != b.height() || a.width() != b.width())
        throw ValidationError("psnr_db: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.chw.data.size(); ++i) {
        const double d = a.chw.data[i] - b.chw.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.chw.data.size());
    if (mse <= 0.0) return 99.0;
    return -10.0 * std::log10(mse);
}

AeTrainStats train_autoencoder(Autoencoder& ae, const corpus::Corpus& corpus, int iterations,
                               int batch, double lr, uint64_t seed, const std::string& log_path) {
    auto train = corpus.split("train");
    if (train.empty()) throw ValidationError("train_autoencoder: empty train split");
    const int size = corpus.params.image_size;

    nn::Adam opt(ae.params(), lr);
    Rng rng(seed);
    std::ofstream log;
    if (!log_path.empty()) log.open(log_path);

    double last = 0.0;
    for (int it = 0; it < iterations; ++it) {
        // Linear decay to lr/10 over the run.
        opt.set_lr(lr * (1.0 - 0.9 * it / std::max(1, iterations - 1)));
        Tensor x({batch, 3, size, size});
        for (int b = 0; b < batch; ++b) {
            const auto* rec = train[rng.uniform_int(static_cast<int>(train.size()))];
            std::copy(rec->image.chw.data.begin(), rec->image.chw.data.end(),
                      x.data.begin() + static_cast<int64_t>(b) * 3 * size * size);
        }
        Var xin = constant(x);
        Var recon = ae.decode_v(ae.encode_v(xin));
        Var diff = sub(recon, xin);
        Var loss = mean_all(mul(diff, diff));
        last = loss->val.data[0];
        if (!std::isfinite(last)) throw NumericalError("train_autoencoder: loss is not finite");
        opt.zero_grad();
        backward(loss);
        opt.step();
        if (log.is_open() && (it % 50 == 0 || it == iterations - 1))
            log << it << " " << last << "\n";
    }
    ae.set_trained(true);

    AeTrainStats stats;
    stats.final_loss = last;
    auto val = corpus.split("val");
    double acc = 0.0;
    int n = 0;
    for (const auto* rec : val) {
        Tensor z = ae.encode_image(rec->image);
        RgbImage recon = ae.decode_latent(z);
        acc += psnr_db(recon, rec->image);
        ++n;
        if (n >= 64) break;  // enough for a stable estimate
    }
    stats.val_psnr_db = n ? acc / n : 0.0;
    return stats;
}

// --------------------------------------------------------------- conditioning

int conditioning_channels(bool use_background) { return use_background ? 8 : 5; }

Tensor conditioning_maps(const Conditioning& cond, int latent_h, int latent_w) {
    const int K = conditioning_channels(cond.background.has_value());
    Tensor out({K, latent_h, latent_w});
    const int64_t hw = static_cast<int64_t>(latent_h) * latent_w;
    Tensor l = nearest_resize(cond.l_channel, latent_h, latent_w);
    std::copy(l.data.begin(), l.data.end(), out.data.begin());
    for (int c = 0; c < 3; ++c) {
        Tensor ch({cond.ref_area.height(), cond.ref_area.width()});
        const int64_t ihw = static_cast<int64_t>(ch.shape[0]) * ch.shape[1];
        std::copy(cond.ref_area.chw.data.begin() + c * ihw,
                  cond.ref_area.chw.data.begin() + (c + 1) * ihw, ch.data.begin());
        Tensor r = nearest_resize(ch, latent_h, latent_w);
        std::copy(r.data.begin(), r.data.end(), out.data.begin() + (1 + c) * hw);
    }
    Tensor m = nearest_resize(cond.vehicle_mask.hw, latent_h, latent_w);
    std::copy(m.data.begin(), m.data.end(), out.data.begin() + 4 * hw);
    if (cond.background) {
        for (int c = 0; c < 3; ++c) {
            Tensor ch({cond.background->height(), cond.background->width()});
            const int64_t ihw = static_cast<int64_t>(ch.shape[0]) * ch.shape[1];
            std::copy(cond.background->chw.data.begin() + c * ihw,
                      cond.background->chw.data.begin() + (c + 1) * ihw, ch.data.begin());
            Tensor r = nearest_resize(ch, latent_h, latent_w);
            std::copy(r.data.begin(), r.data.end(), out.data.begin() + (5 + c) * hw);
        }
    }
    return out;
}

// ------------------------------------------------------------------- denoiser

Denoiser::Denoiser(DenoiserConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    Rng rng(init_seed);
    const int cin = cfg.latent_channels + conditioning_channels(cfg.use_background) +
                    cfg.time_channels;
    const int b = cfg.base;
    e1_ = nn::Conv2d(cin, b, 3, 1, 1, rng);
    e2_ = nn::Conv2d(b, b + 16, 3, 2, 1, rng);
    m1_ = nn::Conv2d(b + 16, b + 16, 3, 1, 1, rng);
    d1_ = nn::Conv2d(2 * b + 16, b, 3, 1, 1, rng);
    out_ = nn::Conv2d(b, cfg.latent_channels, 3, 1, 1, rng);
}

Tensor Denoiser::stack_cond(const Tensor& cond, int batch) {
    if (cond.rank() != 3) throw ValidationError("stack_cond: expected [K,h,w]");
    Tensor out({batch, cond.shape[0], cond.shape[1], cond.shape[2]});
    for (int n = 0; n < batch; ++n)
        std::copy(cond.data.begin(), cond.data.end(),
                  out.data.begin() + static_cast<int64_t>(n) * cond.numel());
    return out;
}

Var Denoiser::forward_v(const Var& zt, double t_norm, const Tensor& cond) const {
    if (zt->val.rank() != 4 || zt->val.shape[1] != cfg_.latent_channels)
        throw ValidationError("Denoiser: latent shape mismatch");
    const int N = zt->val.shape[0], h = zt->val.shape[2], w = zt->val.shape[3];
    if (h != cfg_.latent_size || w != cfg_.latent_size)
        throw ValidationError("Denoiser: latent size mismatch");
    if (cond.rank() != 4 || cond.shape[0] != N ||
        cond.shape[1] != conditioning_channels(cfg_.use_background) || cond.shape[2] != h ||
        cond.shape[3] != w)
        throw ValidationError("Denoiser: conditioning map shape mismatch");

    // Per-sample conditioning plus sinusoidal time channels.
    const int K = cond.shape[1], E = cfg_.time_channels;
    Tensor extra({N, K + E, h, w});
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int n = 0; n < N; ++n) {
        std::copy(cond.data.begin() + static_cast<int64_t>(n) * K * hw,
                  cond.data.begin() + static_cast<int64_t>(n + 1) * K * hw,
                  extra.data.begin() + static_cast<int64_t>(n) * (K + E) * hw);
        for (int e = 0; e < E; ++e) {
            const double freq = M_PI * std::pow(4.0, e / 2);
            const double v = (e % 2 == 0) ? std::sin(t_norm * freq) : std::cos(t_norm * freq);
            double* p = extra.data.data() + (static_cast<int64_t>(n) * (K + E) + K + e) * hw;
            std::fill(p, p + hw, v);
        }
    }
    Var x = concat_ch({zt, constant(std::move(extra))});
    Var enc1 = silu(e1_(x));
    Var enc2 = silu(e2_(enc1));
    Var mid = silu(m1_(enc2));
    Var up = upsample2x(mid);
    Var dec = silu(d1_(concat_ch({up, enc1})));
    return out_(dec);
}

Tensor Denoiser::forward(const Tensor& zt, double t_norm, const Tensor& cond) const {
    return forward_v(constant(zt), t_norm, cond)->val;
}

nn::ParamMap Denoiser::params() const {
    nn::ParamMap m;
    const nn::Conv2d* layers[] = {&e1_, &e2_, &m1_, &d1_, &out_};
    const char* names[] = {"enc1", "enc2", "mid", "dec1", "out"};
    for (int i = 0; i < 5; ++i) {
        m.push_back({std::string(names[i]) + ".w", layers[i]->w});
        m.push_back({std::string(names[i]) + ".b", layers[i]->b});
    }
    return m;
}

void Denoiser::save(const std::string& dir, uint64_t config_hash) const {
    nn::save_checkpoint(dir, params(), config_hash, "denoiser");
}

void Denoiser::load(const std::string& dir) { nn::load_checkpoint(dir, params(), "denoiser"); }

PretrainStats pretrain_denoiser(Denoiser& model, const corpus::Corpus& corpus,
                                const Autoencoder& ae, const CondBuilder& cond_maps_of,
                                const NoiseSchedule& sched, int iterations, int batch, double lr,
                                uint64_t seed, const std::string& log_path) {
    if (!ae.trained()) throw NotReadyError("pretrain_denoiser: autoencoder not trained");
    auto train = corpus.split("train");
    if (train.empty()) throw ValidationError("pretrain_denoiser: empty train split");

    const int C = model.config().latent_channels;
    const int h = model.config().latent_size;
    const int K = conditioning_channels(model.config().use_background);
    const int64_t hw = static_cast<int64_t>(h) * h;

    // Latents and conditioning maps are constant per record.
    std::vector<Tensor> z_cache(train.size()), cond_cache(train.size());
    std::vector<bool> cached(train.size(), false);

    nn::Adam opt(model.params(), lr);
    Rng rng(seed);
    std::ofstream log;
    if (!log_path.empty()) log.open(log_path);

    PretrainStats stats;
    for (int it = 0; it < iterations; ++it) {
        opt.set_lr(lr * (1.0 - 0.9 * it / std::max(1, iterations - 1)));
        const double t = sched.mode == Mode::diffusion
                             ? 1.0 + rng.uniform_int(sched.timesteps())
                             : rng.uniform();
        Tensor zt_b({batch, C, h, h}), cond_b({batch, K, h, h}), target_b({batch, C, h, h});
        for (int b = 0; b < batch; ++b) {
            const int i = rng.uniform_int(static_cast<int>(train.size()));
            if (!cached[i]) {
                z_cache[i] = ae.encode_image(train[i]->image);
                cond_cache[i] = cond_maps_of(*train[i]);
                cached[i] = true;
            }
            Tensor eps = Tensor::randn({C, h, h}, rng);
            Tensor zt = forward_noise(z_cache[i], t, eps, sched);
            Tensor target = true_prediction_target(z_cache[i], eps, t, sched);
            std::copy(zt.data.begin(), zt.data.end(), zt_b.data.begin() + b * C * hw);
            std::copy(target.data.begin(), target.data.end(),
                      target_b.data.begin() + b * C * hw);
            std::copy(cond_cache[i].data.begin(), cond_cache[i].data.end(),
                      cond_b.data.begin() + b * K * hw);
        }
        Var pred = model.forward_v(constant(zt_b), normalize_t(t, sched), cond_b);
        Var diff = sub(pred, constant(target_b));
        Var loss = mean_all(mul(diff, diff));
        stats.final_loss = loss->val.data[0];
        if (!std::isfinite(stats.final_loss))
            throw NumericalError("pretrain_denoiser: loss is not finite");
        opt.zero_grad();
        backward(loss);
        opt.step();
        if (log.is_open() && (it % 100 == 99 || it == iterations - 1))
            log << it << " " << stats.final_loss << "\n";
    }
    return stats;
}

// -------------------------------------------------------------------- sampler

RgbImage sample(const Denoiser& model, const Autoencoder& ae, const Conditioning& cond,
                const NoiseSchedule& sched, int steps, uint64_t seed) {
    if (steps < 1) throw ValidationError("sample: steps must be >= 1");
    if (!ae.trained()) throw NotReadyError("sample: autoencoder not trained");
    const int h = model.config().latent_size, w = h;
    const int C = model.config().latent_channels;
    Tensor cmaps = Denoiser::stack_cond(conditioning_maps(cond, h, w), 1);

    Rng rng(mix_seed(seed, 0x5a3c1e9fULL));
    Tensor z = Tensor::randn({1, C, h, w}, rng);

    Tensor z0_hat;
    if (sched.mode == Mode::diffusion) {
        const int T = sched.timesteps();
        std::vector<int> ts(steps);
        for (int i = 0; i < steps; ++i) {
            ts[i] = static_cast<int>(std::llround(static_cast<double>(T) * (steps - i) / steps));
            ts[i] = std::max(1, std::min(T, ts[i]));
        }
        for (int i = 0; i < steps; ++i) {
            const int t = ts[i];
            Tensor pred = model.forward(z, normalize_t(t, sched), cmaps);
            z0_hat = one_step_estimate(z, t, pred, sched);
            if (i + 1 < steps) {
                const double abn = sched.alpha_bar_at(ts[i + 1]);
                const double ka = std::sqrt(abn), ke = std::sqrt(1.0 - abn);
                for (size_t k = 0; k < z.data.size(); ++k)
                    z.data[k] = ka * z0_hat.data[k] + ke * pred.data[k];
            }
        }
    } else {
        for (int i = 0; i < steps; ++i) {
            const double t = 1.0 - static_cast<double>(i) / steps;
            Tensor pred = model.forward(z, t, cmaps);
            z0_hat = one_step_estimate(z, t, pred, sched);
            const double tn = 1.0 - static_cast<double>(i + 1) / steps;
            if (i + 1 < steps) {
                // eps_hat from the interpolation, then re-noise to t_next.
                for (size_t k = 0; k < z.data.size(); ++k) {
                    const double eps_hat = (z.data[k] - (1.0 - t) * z0_hat.data[k]) / t;
                    z.data[k] = (1.0 - tn) * z0_hat.data[k] + tn * eps_hat;
                }
            }
        }
    }
    Tensor x = ae.decode(z0_hat);
    RgbImage img(x.shape[2], x.shape[3]);
    img.chw.data = x.data;
    return img;
}

}  // namespace camo::backend
