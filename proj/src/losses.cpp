#include "camo/losses.hpp"

#include "camo/colorspace.hpp"
#include "camo/maskops.hpp"

namespace camo::losses {

namespace {

Tensor stack_masks(const std::vector<const Mask*>& masks) {
    const int N = static_cast<int>(masks.size());
    const int H = masks[0]->height(), W = masks[0]->width();
    Tensor out({N, 1, H, W});
    for (int n = 0; n < N; ++n)
        std::copy(masks[n]->hw.data.begin(), masks[n]->hw.data.end(),
                  out.data.begin() + static_cast<int64_t>(n) * H * W);
    return out;
}

// Normalized L of a Var image as [N,1,H,W].
Var normalized_l_v(const Var& x) {
    return affine(slice_ch(rgb_to_lab_v(x), 0, 1), 0.01, 0.0);
}

// Normalized AB of a Var image as [N,2,H,W].
Var normalized_ab_v(const Var& x) {
    return affine(slice_ch(rgb_to_lab_v(x), 1, 2), 1.0 / 255.0, 128.0 / 255.0);
}

std::vector<double> mask_counts(const Tensor& masks) {
    const int N = masks.shape[0];
    const int64_t HW = static_cast<int64_t>(masks.shape[2]) * masks.shape[3];
    std::vector<double> counts(N, 0.0);
    for (int n = 0; n < N; ++n) {
        double c = 0.0;
        for (int64_t i = 0; i < HW; ++i) c += masks.data[n * HW + i] != 0.0 ? 1.0 : 0.0;
        counts[n] = c;
    }
    return counts;
}

Var x4(const RgbImage& img) {
    Tensor t({1, 3, img.height(), img.width()});
    t.data = img.chw.data;
    return constant(std::move(t));
}

// Region-membership mask at a coarser feature resolution: a cell is selected
// when any latent cell it covers is selected. Plain subsampling would drop
// thin regions at the /4 stage.
Tensor coarsen_selection(const Tensor& sel, int fh, int fw) {
    const int lh = sel.shape[0], lw = sel.shape[1];
    Tensor out({fh, fw});
    for (int y = 0; y < fh; ++y)
        for (int x = 0; x < fw; ++x) {
            const int y0 = y * lh / fh, y1 = (y + 1) * lh / fh;
            const int x0 = x * lw / fw, x1 = (x + 1) * lw / fw;
            double v = 0.0;
            for (int yy = y0; yy < std::max(y1, y0 + 1) && v == 0.0; ++yy)
                for (int xx = x0; xx < std::max(x1, x0 + 1) && v == 0.0; ++xx)
                    v = sel.data[static_cast<size_t>(yy) * lw + xx];
            out.at(y, x) = v;
        }
    return out;
}

}  // namespace

Tensor image_normalized_l(const RgbImage& img) { return colorspace::normalized_l(img); }
Tensor image_normalized_ab(const RgbImage& img) { return colorspace::normalized_ab(img); }

Var struct_loss_v(const Var& x_hat, const Tensor& x0_l, const Tensor& masks) {
    auto counts = mask_counts(masks);
    std::vector<double> inv(counts.size());
    for (size_t n = 0; n < counts.size(); ++n) {
        if (counts[n] == 0.0) throw ValidationError("struct_loss: empty mask");
        inv[n] = 1.0 / counts[n];
    }
    Var l_hat = normalized_l_v(x_hat);
    Var d = sub(mul_mask(l_hat, constant(masks)),
                constant([&] {
                    Tensor t = x0_l;
                    const int64_t sz = t.numel();
                    for (int64_t i = 0; i < sz; ++i) t.data[i] *= masks.data[i];
                    return t;
                }()));
    Var per = scale_rows(row_sum(spatial_sum(mul(d, d))), inv);
    return mean_all(per);
}

StyleRef style_reference(const critic::Critic& model, const backend::Autoencoder& encoder,
                         const RgbImage& x_s, const Mask& m_s) {
    if (!model.trained()) throw NotReadyError("style_reference: critic not trained");
    if (m_s.count() == 0) throw ValidationError("style_reference: empty mask");
    const int factor = encoder.config().factor;
    RgbImage masked(x_s.height(), x_s.width());
    const int64_t hw = static_cast<int64_t>(x_s.height()) * x_s.width();
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            masked.chw.data[c * hw + i] = x_s.chw.data[c * hw + i] * m_s.hw.data[i];
    Tensor z = encoder.encode_image(masked);
    FractionalMask md = maskops::downsample_mask(m_s, factor);
    const int lh = md.height(), lw = md.width();
    for (int c = 0; c < z.shape[0]; ++c)
        for (int64_t i = 0; i < static_cast<int64_t>(lh) * lw; ++i)
            z.data[c * lh * lw + i] *= md.hw.data[i];
    Mask sel = maskops::binarize(md, 0.5);

    Tensor zb({1, z.shape[0], lh, lw});
    zb.data = z.data;
    // Channelwise unit-normalized features, matching the perceptual-distance
    // convention, so style magnitudes are comparable across stages.
    auto feats_v = model.features_v(constant(zb));
    std::vector<Tensor> feats;
    for (auto& f : feats_v) feats.push_back(channel_unit_norm(f)->val);
    StyleRef ref;
    for (const auto& f : feats) {
        const int C = f.shape[1], fh = f.shape[2], fw = f.shape[3];
        Tensor smask = coarsen_selection(sel.hw, fh, fw);
        double count = 0.0;
        for (double v : smask.data) count += v;
        if (count == 0.0)
            throw ValidationError("style_reference: mask degenerates to zero at a critic stage");
        std::vector<double> means(C, 0.0);
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t i = 0; i < static_cast<int64_t>(fh) * fw; ++i)
                acc += f.data[c * fh * fw + i] * smask.data[i];
            means[c] = acc / count;
        }
        ref.stage_means.push_back(std::move(means));
    }
    return ref;
}

Var style_loss_v(const critic::Critic& model, const backend::Autoencoder& encoder,
                 const Var& x_hat, const std::vector<const Mask*>& m_x,
                 const std::vector<const StyleRef*>& refs) {
    const int N = x_hat->val.shape[0];
    if (static_cast<int>(m_x.size()) != N || static_cast<int>(refs.size()) != N)
        throw ValidationError("style_loss: batch size mismatch");
    const int factor = encoder.config().factor;

    Tensor px_masks = stack_masks(m_x);
    std::vector<FractionalMask> mdown;
    std::vector<Mask> sel;
    for (int n = 0; n < N; ++n) {
        if (m_x[n]->count() == 0) throw ValidationError("style_loss: empty mask");
        mdown.push_back(maskops::downsample_mask(*m_x[n], factor));
        sel.push_back(maskops::binarize(mdown.back(), 0.5));
    }
    const int lh = mdown[0].height(), lw = mdown[0].width();
    Tensor lat_masks({N, 1, lh, lw});
    for (int n = 0; n < N; ++n)
        std::copy(mdown[n].hw.data.begin(), mdown[n].hw.data.end(),
                  lat_masks.data.begin() + static_cast<int64_t>(n) * lh * lw);

    Var z = encoder.encode_v(mul_mask(x_hat, constant(px_masks)));
    Var zm = mul_mask(z, constant(lat_masks));
    auto feats = model.features_v(zm);
    for (auto& f : feats) f = channel_unit_norm(f);

    Var total;
    for (size_t l = 0; l < feats.size(); ++l) {
        const int C = feats[l]->val.shape[1], fh = feats[l]->val.shape[2],
                  fw = feats[l]->val.shape[3];
        Tensor smasks({N, 1, fh, fw});
        std::vector<double> inv_counts(N);
        Tensor ref_means({N, C});
        for (int n = 0; n < N; ++n) {
            Tensor sm = coarsen_selection(sel[n].hw, fh, fw);
            double count = 0.0;
            for (double v : sm.data) count += v;
            if (count == 0.0)
                throw ValidationError("style_loss: mask degenerates to zero at a critic stage");
            inv_counts[n] = 1.0 / count;
            std::copy(sm.data.begin(), sm.data.end(),
                      smasks.data.begin() + static_cast<int64_t>(n) * fh * fw);
            const auto& means = refs[n]->stage_means.at(l);
            std::copy(means.begin(), means.end(), ref_means.data.begin() + static_cast<int64_t>(n) * C);
        }
        Var region_mean =
            scale_rows(spatial_sum(mul_mask(feats[l], constant(smasks))), inv_counts);
        Var diff = abs_v(sub(region_mean, constant(ref_means)));
        Var per = row_sum(diff);  // [N]
        total = total ? add(total, per) : per;
    }
    return mean_all(total);
}

BackgroundRef background_reference(const backend::Autoencoder& encoder, const RgbImage& x0,
                                   const Mask& m) {
    const int factor = encoder.config().factor;
    const int64_t hw = static_cast<int64_t>(x0.height()) * x0.width();
    RgbImage masked(x0.height(), x0.width());
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            masked.chw.data[c * hw + i] = x0.chw.data[c * hw + i] * (1.0 - m.hw.data[i]);
    Tensor z = encoder.encode_image(masked);
    FractionalMask md = maskops::downsample_mask(m, factor);
    const int lh = md.height(), lw = md.width();
    for (int c = 0; c < z.shape[0]; ++c)
        for (int64_t i = 0; i < static_cast<int64_t>(lh) * lw; ++i)
            z.data[c * lh * lw + i] *= (1.0 - md.hw.data[i]);
    return BackgroundRef{std::move(z)};
}

Var background_loss_v(const critic::Critic& model, const backend::Autoencoder& encoder,
                      const Var& x_hat, const Tensor& inv_masks_px, const Tensor& inv_masks_lat,
                      const Tensor& zb_ref) {
    // Degenerate if the complement vanishes for any sample.
    for (double c : mask_counts(inv_masks_px))
        if (c == 0.0) throw ValidationError("background_loss: full-frame vehicle mask");
    Var zb_hat = mul_mask(encoder.encode_v(mul_mask(x_hat, constant(inv_masks_px))),
                          constant(inv_masks_lat));
    return critic::latent_perceptual_distance_v(model, zb_hat, constant(zb_ref));
}

Var color_consistency_loss_v(const Var& x_stage2, const Tensor& x_stage1_ab,
                             const Tensor& masks) {
    auto counts = mask_counts(masks);
    std::vector<double> inv(counts.size());
    for (size_t n = 0; n < counts.size(); ++n) {
        if (counts[n] == 0.0) throw ValidationError("color_consistency_loss: empty mask");
        inv[n] = 1.0 / counts[n];
    }
    const int N = masks.shape[0];
    const int64_t HW = static_cast<int64_t>(masks.shape[2]) * masks.shape[3];
    Tensor ref = x_stage1_ab;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < 2; ++c)
            for (int64_t i = 0; i < HW; ++i)
                ref.data[(static_cast<int64_t>(n) * 2 + c) * HW + i] *= masks.data[n * HW + i];
    Var ab2 = mul_mask(normalized_ab_v(x_stage2), constant(masks));
    Var d = sub(ab2, constant(std::move(ref)));
    Var per = scale_rows(row_sum(spatial_sum(mul(d, d))), inv);
    return mean_all(per);
}

Var adversarial_loss_v(const detect::Detector& model, const Var& x_comp,
                       const std::vector<const Mask*>& masks) {
    const int N = x_comp->val.shape[0];
    if (static_cast<int>(masks.size()) != N)
        throw ValidationError("adversarial_loss: batch size mismatch");
    std::vector<std::array<int, 3>> idx;
    std::vector<int> seg_sizes;
    for (int n = 0; n < N; ++n) {
        auto cells = detect::cells_in_mask(*masks[n], model.config().grid);
        if (cells.empty()) throw ValidationError("adversarial_loss: empty logit selection");
        for (auto [gy, gx] : cells) idx.push_back({n, gy, gx});
        seg_sizes.push_back(static_cast<int>(cells.size()));
    }
    Var cls = model.cls_logits_v(x_comp);
    Var rows = bg_ce_rows(gather_cells(cls, idx));
    return mean_all(segment_mean(rows, seg_sizes));
}

// ------------------------------------------------------- single-sample API

double struct_loss(const RgbImage& x0, const RgbImage& x_hat, const Mask& m) {
    if (x0.height() != x_hat.height() || x0.width() != x_hat.width() ||
        m.height() != x0.height() || m.width() != x0.width())
        throw ValidationError("struct_loss: shape mismatch");
    if (m.count() == 0) throw ValidationError("struct_loss: empty mask");
    Tensor l0 = image_normalized_l(x0);
    Tensor l0n({1, 1, x0.height(), x0.width()});
    l0n.data = l0.data;
    Tensor masks({1, 1, m.height(), m.width()});
    masks.data = m.hw.data;
    return struct_loss_v(x4(x_hat), l0n, masks)->val.data[0];
}

double style_loss(const critic::Critic& model, const RgbImage& x_hat, const Mask& m_x,
                  const RgbImage& x_s, const Mask& m_s, const backend::Autoencoder& encoder) {
    if (!model.trained()) throw NotReadyError("style_loss: critic not trained");
    StyleRef ref = style_reference(model, encoder, x_s, m_s);
    return style_loss_v(model, encoder, x4(x_hat), {&m_x}, {&ref})->val.data[0];
}

double background_loss(const critic::Critic& model, const RgbImage& x0, const RgbImage& x_hat,
                       const Mask& m, const backend::Autoencoder& encoder) {
    if (!model.trained()) throw NotReadyError("background_loss: critic not trained");
    const int factor = encoder.config().factor;
    BackgroundRef ref = background_reference(encoder, x0, m);
    Tensor inv_px({1, 1, m.height(), m.width()});
    for (size_t i = 0; i < m.hw.data.size(); ++i) inv_px.data[i] = 1.0 - m.hw.data[i];
    FractionalMask md = maskops::downsample_mask(m, factor);
    Tensor inv_lat({1, 1, md.height(), md.width()});
    for (size_t i = 0; i < md.hw.data.size(); ++i) inv_lat.data[i] = 1.0 - md.hw.data[i];
    Tensor zb({1, ref.masked_latent.shape[0], ref.masked_latent.shape[1],
               ref.masked_latent.shape[2]});
    zb.data = ref.masked_latent.data;
    return background_loss_v(model, encoder, x4(x_hat), inv_px, inv_lat, zb)->val.data[0];
}

double color_consistency_loss(const RgbImage& x_stage1, const RgbImage& x_stage2, const Mask& m) {
    if (x_stage1.height() != x_stage2.height() || x_stage1.width() != x_stage2.width())
        throw ValidationError("color_consistency_loss: shape mismatch");
    if (m.count() == 0) throw ValidationError("color_consistency_loss: empty mask");
    Tensor ab1 = image_normalized_ab(x_stage1);
    Tensor ab1n({1, 2, x_stage1.height(), x_stage1.width()});
    ab1n.data = ab1.data;
    Tensor masks({1, 1, m.height(), m.width()});
    masks.data = m.hw.data;
    return color_consistency_loss_v(x4(x_stage2), ab1n, masks)->val.data[0];
}

double adversarial_loss(const detect::Detector& model, const RgbImage& x_comp, const Mask& m) {
    if (!model.trained()) throw NotReadyError("adversarial_loss: detector not trained");
    return adversarial_loss_v(model, x4(x_comp), {&m})->val.data[0];
}

double combine_stage1(std::optional<double> struct_term, std::optional<double> style_term,
                      std::optional<double> background_term, const LossWeights& w) {
    if (!struct_term || !style_term || !background_term)
        throw ValidationError("combine_stage1: missing term");
    return w.struct_w * *struct_term + w.alpha * *style_term + w.beta * *background_term;
}

double combine_stage2(std::optional<double> struct_term, std::optional<double> style_term,
                      std::optional<double> background_term, std::optional<double> color_term,
                      std::optional<double> adv_term, const LossWeights& w) {
    if (!color_term || !adv_term) throw ValidationError("combine_stage2: missing term");
    return combine_stage1(struct_term, style_term, background_term, w) +
           w.lambda * *adv_term + w.gamma * *color_term;
}

}  // namespace camo::losses
