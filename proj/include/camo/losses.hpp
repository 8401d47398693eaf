#pragma once

#include <optional>

#include "camo/critic.hpp"
#include "camo/detect.hpp"

namespace camo::losses {

// Coefficients of the two stage objectives. struct_w scales the structure
// term (the published training tables weight it explicitly); alpha, beta
// weight style and background in stage 1; lambda and gamma weight the
// adversarial and color-consistency terms added in stage 2.
struct LossWeights {
    double struct_w = 1.0;
    double alpha = 0.0;
    double beta = 0.0;
    double gamma = 0.0;
    double lambda = 0.0;
};

struct LossReport {
    std::vector<std::pair<std::string, double>> terms;
    double total = 0.0;
};

// --------------------------------------------------------- batched Var core

// Average squared L-channel difference inside the mask, per sample, averaged
// over the batch. x0_l holds the normalized L of the clean image, [N,1,H,W].
Var struct_loss_v(const Var& x_hat, const Tensor& x0_l, const Tensor& masks);

// Reference side of the style objective, constant during training: per-stage
// in-mask feature means of the encoded masked exemplar.
struct StyleRef {
    std::vector<std::vector<double>> stage_means;
};
StyleRef style_reference(const critic::Critic& model, const backend::Autoencoder& encoder,
                         const RgbImage& x_s, const Mask& m_s);

Var style_loss_v(const critic::Critic& model, const backend::Autoencoder& encoder,
                 const Var& x_hat, const std::vector<const Mask*>& m_x,
                 const std::vector<const StyleRef*>& refs);

// Cached constants for the clean-background side of the background loss.
struct BackgroundRef {
    Tensor masked_latent;  // [C,h,w] = E(x0*(1-m)) * (1-m_down)
};
BackgroundRef background_reference(const backend::Autoencoder& encoder, const RgbImage& x0,
                                   const Mask& m);

Var background_loss_v(const critic::Critic& model, const backend::Autoencoder& encoder,
                      const Var& x_hat, const Tensor& inv_masks_px, const Tensor& inv_masks_lat,
                      const Tensor& zb_ref);

// Mean squared normalized-AB difference inside the mask. x_stage1_ab holds
// the normalized AB of the frozen stage-1 output, [N,2,H,W].
Var color_consistency_loss_v(const Var& x_stage2, const Tensor& x_stage1_ab,
                             const Tensor& masks);

// Mean background cross-entropy over grid cells whose centers lie inside the
// mask, per sample, averaged over the batch.
Var adversarial_loss_v(const detect::Detector& model, const Var& x_comp,
                       const std::vector<const Mask*>& masks);

// ------------------------------------------------------ single-sample API

double struct_loss(const RgbImage& x0, const RgbImage& x_hat, const Mask& m);
double style_loss(const critic::Critic& model, const RgbImage& x_hat, const Mask& m_x,
                  const RgbImage& x_s, const Mask& m_s, const backend::Autoencoder& encoder);
double background_loss(const critic::Critic& model, const RgbImage& x0, const RgbImage& x_hat,
                       const Mask& m, const backend::Autoencoder& encoder);
double color_consistency_loss(const RgbImage& x_stage1, const RgbImage& x_stage2, const Mask& m);
double adversarial_loss(const detect::Detector& model, const RgbImage& x_comp, const Mask& m);

// L_i = struct_w*L_struct + alpha*L_s + beta*L_b
double combine_stage1(std::optional<double> struct_term, std::optional<double> style_term,
                      std::optional<double> background_term, const LossWeights& w);
// L_a = L_i + lambda*L_adv + gamma*L_c
double combine_stage2(std::optional<double> struct_term, std::optional<double> style_term,
                      std::optional<double> background_term, std::optional<double> color_term,
                      std::optional<double> adv_term, const LossWeights& w);

// Normalized L of an image as a [1,H,W]-style grid tensor ([H,W]).
Tensor image_normalized_l(const RgbImage& img);
// Normalized AB as [2,H,W].
Tensor image_normalized_ab(const RgbImage& img);

}  // namespace camo::losses
