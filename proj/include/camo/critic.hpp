#pragma once

#include "camo/backend.hpp"

namespace camo::critic {

struct CriticConfig {
    int latent_channels = 4;
    int latent_size = 16;
    int classes = 5;
    int c1 = 24, c2 = 48, c3 = 96;

    bool operator==(const CriticConfig&) const = default;
};

// Latent feature network standing in for a perceptual backbone: a 3-stage
// convolutional classifier over latents whose intermediate feature maps feed
// the style and background losses.
class Critic {
  public:
    Critic(CriticConfig cfg, uint64_t init_seed);

    // Per-stage feature maps at latent resolution, /2 and /4.
    std::vector<Var> features_v(const Var& z) const;
    std::vector<Tensor> features(const Tensor& z_nchw) const;
    Var logits_v(const Var& z) const;  // [N,classes]

    const CriticConfig& config() const { return cfg_; }
    bool trained() const { return trained_; }
    void set_trained(bool v) { trained_ = v; }

    nn::ParamMap params() const;
    void save(const std::string& dir, uint64_t config_hash) const;
    void load(const std::string& dir);

  private:
    CriticConfig cfg_;
    bool trained_ = false;
    nn::Conv2d s1a_, s1b_, s2a_, s2b_, s3a_, s3b_;
    nn::Linear head_;
};

// Mean squared latent difference plus the sum over stages of mean squared
// channelwise unit-normalized feature differences (uniform stage weights).
double latent_perceptual_distance(const Critic& model, const Tensor& z1, const Tensor& z2);
Var latent_perceptual_distance_v(const Critic& model, const Var& z1, const Var& z2);

// Differentiable cutout: zeroes one axis-aligned rectangle.
Tensor cutout_mask(int h, int w, Rng& rng, int min_side, int max_side);

struct CriticTrainStats {
    double final_train_accuracy = 0;
    double heldout_accuracy = 0;
    double final_loss = 0;
};

// Trains the scene classifier on masked latents with random differentiable
// cutout. Requires a trained autoencoder.
CriticTrainStats train_critic(Critic& model, const corpus::Corpus& corpus,
                              const backend::Autoencoder& ae, int iterations, int batch,
                              double lr, uint64_t seed, const std::string& log_path = "");

}  // namespace camo::critic
