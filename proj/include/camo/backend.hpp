#pragma once

#include <functional>
#include <optional>
#include <string>

#include "camo/image.hpp"
#include "camo/nn.hpp"
#include "camo/synthcorpus.hpp"

namespace camo::backend {

enum class Mode { diffusion, rectflow };

// Appendix-mode prediction target. The self-consistent pairing with the
// one-step estimate z_hat = z_t + t*pred is (z0 - eps), which is the default;
// (eps - z0) flips the sign of the estimate.
enum class RectflowTarget { z0_minus_eps, eps_minus_z0 };

struct NoiseSchedule {
    Mode mode = Mode::diffusion;
    std::vector<double> alpha_bar;  // diffusion: index t-1 holds alpha_bar_t
    RectflowTarget rf_target = RectflowTarget::z0_minus_eps;

    static NoiseSchedule diffusion_linear(int timesteps, double beta_start, double beta_end);
    static NoiseSchedule rectflow(RectflowTarget target = RectflowTarget::z0_minus_eps);

    int timesteps() const { return static_cast<int>(alpha_bar.size()); }
    // t is 1-based.
    double alpha_bar_at(int t) const;
    void validate_t(double t) const;
};

// Forward process. For diffusion t must be integral in [1,T]; for rectified
// flow t lies in [0,1].
Tensor forward_noise(const Tensor& z0, double t, const Tensor& eps, const NoiseSchedule& sched);

// Closed-form recovery of z0 from (z_t, prediction).
Tensor one_step_estimate(const Tensor& zt, double t, const Tensor& pred,
                         const NoiseSchedule& sched);
// Autodiff version; zt is a constant, gradient flows through pred.
Var one_step_estimate_v(const Tensor& zt, double t, const Var& pred, const NoiseSchedule& sched);

// The prediction target whose one-step inversion recovers z0 exactly.
Tensor true_prediction_target(const Tensor& z0, const Tensor& eps, double t,
                              const NoiseSchedule& sched);

// ---------------------------------------------------------------- autoencoder

struct AutoencoderConfig {
    int image_size = 64;
    int latent_channels = 4;
    int factor = 4;  // spatial downsampling
    int base = 24;

    bool operator==(const AutoencoderConfig&) const = default;
};

class Autoencoder {
  public:
    Autoencoder(AutoencoderConfig cfg, uint64_t init_seed);

    Var encode_v(const Var& x) const;  // [N,3,H,W] -> [N,C,h,w]
    Var decode_v(const Var& z) const;  // sigmoid output in (0,1)

    // Forward-only conveniences; require a trained (or loaded) model.
    Tensor encode(const Tensor& x_nchw) const;
    Tensor decode(const Tensor& z_nchw) const;
    Tensor encode_image(const RgbImage& img) const;    // [C,h,w]
    RgbImage decode_latent(const Tensor& z_chw) const;

    const AutoencoderConfig& config() const { return cfg_; }
    bool trained() const { return trained_; }
    void set_trained(bool v) { trained_ = v; }

    nn::ParamMap params() const;
    void save(const std::string& dir, uint64_t config_hash) const;
    void load(const std::string& dir);

  private:
    AutoencoderConfig cfg_;
    bool trained_ = false;
    nn::Conv2d e1_, e2_, e3_, e4_, e5_;
    nn::Conv2d d1_, d2_, d3_, d4_, d5_;
};

struct AeTrainStats {
    double final_loss = 0;
    double val_psnr_db = 0;
};

AeTrainStats train_autoencoder(Autoencoder& ae, const corpus::Corpus& corpus, int iterations,
                               int batch, double lr, uint64_t seed,
                               const std::string& log_path = "");

double psnr_db(const RgbImage& a, const RgbImage& b);

// --------------------------------------------------------------- conditioning

// Conditioning bundle for one record (Fig. 2(c) layout): the luminance map,
// the masked reference area, the vehicle mask, and (image-level only) the
// masked background.
struct Conditioning {
    Tensor l_channel;  // [H,W] in [0,1]
    RgbImage ref_area;
    Mask vehicle_mask;
    std::optional<RgbImage> background;

    void validate() const {
        if (background.has_value() == false) return;
    }
};

// Channel layout of the conditioning maps fed to the denoiser, resampled to
// latent resolution: L(1) + ref(3) + mask(1) [+ background(3)].
Tensor conditioning_maps(const Conditioning& cond, int latent_h, int latent_w);
int conditioning_channels(bool use_background);

// ------------------------------------------------------------------- denoiser

struct DenoiserConfig {
    int latent_channels = 4;
    int latent_size = 16;
    bool use_background = false;
    int base = 32;
    int time_channels = 6;

    bool operator==(const DenoiserConfig&) const = default;
};

class Denoiser {
  public:
    Denoiser(DenoiserConfig cfg, uint64_t init_seed);

    // t_norm in [0,1]; cond constant [N,K,h,w] (per-sample conditioning maps).
    Var forward_v(const Var& zt, double t_norm, const Tensor& cond) const;
    Tensor forward(const Tensor& zt, double t_norm, const Tensor& cond) const;
    // Stacks a single [K,h,w] conditioning map across a batch.
    static Tensor stack_cond(const Tensor& cond, int batch);

    const DenoiserConfig& config() const { return cfg_; }
    nn::ParamMap params() const;
    void save(const std::string& dir, uint64_t config_hash) const;
    void load(const std::string& dir);
    uint64_t hash() const { return nn::param_hash(params()); }

  private:
    DenoiserConfig cfg_;
    nn::Conv2d e1_, e2_, m1_, d1_, out_;
};

// Deterministic sampling: DDIM-style (eta=0) subsequence for diffusion,
// uniform-t Euler integration for rectified flow. Returns the decoded image.
RgbImage sample(const Denoiser& model, const Autoencoder& ae, const Conditioning& cond,
                const NoiseSchedule& sched, int steps, uint64_t seed);

struct PretrainStats {
    double final_loss = 0;
};

// Standard denoising pretraining (prediction-target MSE over uniform t) of
// the conditional base model the stages fine-tune; the toy stand-in for the
// pretrained generative backbone. Conditioning maps are built per record via
// the provided builder so the strategy decides the channel layout.
using CondBuilder = std::function<Tensor(const corpus::SceneRecord&)>;
PretrainStats pretrain_denoiser(Denoiser& model, const corpus::Corpus& corpus,
                                const Autoencoder& ae, const CondBuilder& cond_maps_of,
                                const NoiseSchedule& sched, int iterations, int batch, double lr,
                                uint64_t seed, const std::string& log_path = "");

// Normalized time fed to the denoiser embedding.
double normalize_t(double t, const NoiseSchedule& sched);

}  // namespace camo::backend
