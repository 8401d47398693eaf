#include "camo/critic.hpp"

#include <algorithm>
#include <fstream>

namespace camo::critic {

Critic::Critic(CriticConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg.classes < 2) throw ValidationError("Critic: needs at least 2 classes");
    Rng rng(init_seed);
    s1a_ = nn::Conv2d(cfg.latent_channels, cfg.c1, 3, 1, 1, rng);
    s1b_ = nn::Conv2d(cfg.c1, cfg.c1, 3, 1, 1, rng);
    s2a_ = nn::Conv2d(cfg.c1, cfg.c2, 3, 2, 1, rng);
    s2b_ = nn::Conv2d(cfg.c2, cfg.c2, 3, 1, 1, rng);
    s3a_ = nn::Conv2d(cfg.c2, cfg.c3, 3, 2, 1, rng);
    s3b_ = nn::Conv2d(cfg.c3, cfg.c3, 3, 1, 1, rng);
    head_ = nn::Linear(cfg.c3, cfg.classes, rng);
}

std::vector<Var> Critic::features_v(const Var& z) const {
    if (z->val.rank() != 4 || z->val.shape[1] != cfg_.latent_channels)
        throw ValidationError("Critic::features: latent shape mismatch");
    Var f1 = silu(s1b_(silu(s1a_(z))));
    Var f2 = silu(s2b_(silu(s2a_(f1))));
    Var f3 = silu(s3b_(silu(s3a_(f2))));
    return {f1, f2, f3};
}

std::vector<Tensor> Critic::features(const Tensor& z) const {
    if (!trained_) throw NotReadyError("Critic::features: model not trained");
    auto fs = features_v(constant(z));
    std::vector<Tensor> out;
    for (auto& f : fs) out.push_back(f->val);
    return out;
}

Var Critic::logits_v(const Var& z) const {
    auto fs = features_v(z);
    Var pooled = scale_rows(spatial_sum(fs[2]),
                            std::vector<double>(z->val.shape[0],
                                                1.0 / (fs[2]->val.shape[2] * fs[2]->val.shape[3])));
    return head_(pooled);
}

nn::ParamMap Critic::params() const {
    nn::ParamMap m;
    const nn::Conv2d* layers[] = {&s1a_, &s1b_, &s2a_, &s2b_, &s3a_, &s3b_};
    const char* names[] = {"s1a", "s1b", "s2a", "s2b", "s3a", "s3b"};
    for (int i = 0; i < 6; ++i) {
        m.push_back({std::string(names[i]) + ".w", layers[i]->w});
        m.push_back({std::string(names[i]) + ".b", layers[i]->b});
    }
    m.push_back({"head.w", head_.w});
    m.push_back({"head.b", head_.b});
    return m;
}

void Critic::save(const std::string& dir, uint64_t config_hash) const {
    nn::save_checkpoint(dir, params(), config_hash, "critic");
}

void Critic::load(const std::string& dir) {
    nn::load_checkpoint(dir, params(), "critic");
    trained_ = true;
}

double latent_perceptual_distance(const Critic& model, const Tensor& z1, const Tensor& z2) {
    if (!model.trained()) throw NotReadyError("latent_perceptual_distance: model not trained");
    return latent_perceptual_distance_v(model, constant(z1), constant(z2))->val.data[0];
}

Var latent_perceptual_distance_v(const Critic& model, const Var& z1, const Var& z2) {
    if (!z1->val.same_shape(z2->val))
        throw ValidationError("latent_perceptual_distance: shape mismatch");
    Var d = sub(z1, z2);
    Var total = mean_all(mul(d, d));
    auto f1 = model.features_v(z1);
    auto f2 = model.features_v(z2);
    for (size_t l = 0; l < f1.size(); ++l) {
        Var n1 = channel_unit_norm(f1[l]);
        Var n2 = channel_unit_norm(f2[l]);
        Var fd = sub(n1, n2);
        total = add(total, mean_all(mul(fd, fd)));
    }
    return total;
}

Tensor cutout_mask(int h, int w, Rng& rng, int min_side, int max_side) {
    Tensor m = Tensor::full({h, w}, 1.0);
    const int ch = min_side + rng.uniform_int(std::max(1, max_side - min_side + 1));
    const int cw = min_side + rng.uniform_int(std::max(1, max_side - min_side + 1));
    const int y0 = rng.uniform_int(std::max(1, h - ch + 1));
    const int x0 = rng.uniform_int(std::max(1, w - cw + 1));
    for (int y = y0; y < std::min(h, y0 + ch); ++y)
        for (int x = x0; x < std::min(w, x0 + cw); ++x) m.at(y, x) = 0.0;
    return m;
}

CriticTrainStats train_critic(Critic& model, const corpus::Corpus& corpus,
                              const backend::Autoencoder& ae, int iterations, int batch,
                              double lr, uint64_t seed, const std::string& log_path) {
    if (!ae.trained()) throw NotReadyError("train_critic: autoencoder not trained");
    const auto& scenes = corpus::scene_types();
    auto label_of = [&scenes](const std::string& s) {
        return static_cast<int>(std::find(scenes.begin(), scenes.end(), s) - scenes.begin());
    };

    auto train = corpus.split("train");
    if (train.empty()) throw ValidationError("train_critic: empty train split");

    // Latent cache: full image and background-masked variants.
    const int lh = model.config().latent_size, lw = lh;
    std::vector<Tensor> z_full(train.size()), z_bg(train.size());
    std::vector<int> labels(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
        const auto* rec = train[i];
        z_full[i] = ae.encode_image(rec->image);
        RgbImage bgm(rec->image.height(), rec->image.width());
        const int64_t hw = static_cast<int64_t>(rec->image.height()) * rec->image.width();
        for (int c = 0; c < 3; ++c)
            for (int64_t k = 0; k < hw; ++k)
                bgm.chw.data[c * hw + k] =
                    rec->image.chw.data[c * hw + k] * (1.0 - rec->vehicle_mask.hw.data[k]);
        z_bg[i] = ae.encode_image(bgm);
        labels[i] = label_of(rec->scene_label);
    }

    nn::Adam opt(model.params(), lr);
    Rng rng(seed);
    std::ofstream log;
    if (!log_path.empty()) log.open(log_path);

    CriticTrainStats stats;
    int correct = 0, seen = 0;
    const int C = model.config().latent_channels;
    for (int it = 0; it < iterations; ++it) {
        Tensor zb({batch, C, lh, lw});
        Tensor masks({batch, 1, lh, lw});
        std::vector<int> yb(batch);
        for (int b = 0; b < batch; ++b) {
            const int i = rng.uniform_int(static_cast<int>(train.size()));
            const Tensor& z = rng.uniform() < 0.5 ? z_full[i] : z_bg[i];
            std::copy(z.data.begin(), z.data.end(),
                      zb.data.begin() + static_cast<int64_t>(b) * C * lh * lw);
            yb[b] = labels[i];
            Tensor m = cutout_mask(lh, lw, rng, 3, 6);
            std::copy(m.data.begin(), m.data.end(),
                      masks.data.begin() + static_cast<int64_t>(b) * lh * lw);
        }
        Var z_in = mul_mask(constant(zb), constant(masks));
        Var logits = model.logits_v(z_in);
        Var loss = mean_all(softmax_ce_rows(logits, yb));
        stats.final_loss = loss->val.data[0];
        if (!std::isfinite(stats.final_loss))
            throw NumericalError("train_critic: loss is not finite");

        for (int b = 0; b < batch; ++b) {
            int arg = 0;
            for (int k = 1; k < model.config().classes; ++k)
                if (logits->val.data[b * model.config().classes + k] >
                    logits->val.data[b * model.config().classes + arg])
                    arg = k;
            correct += (arg == yb[b]);
            ++seen;
        }
        opt.zero_grad();
        backward(loss);
        opt.step();
        if (it % 100 == 99) {
            if (log.is_open()) log << it << " " << stats.final_loss << " "
                                   << static_cast<double>(correct) / seen << "\n";
            stats.final_train_accuracy = static_cast<double>(correct) / seen;
            correct = 0;
            seen = 0;
        }
    }
    model.set_trained(true);

    auto val = corpus.split("val");
    int ok = 0, n = 0;
    for (const auto* rec : val) {
        Tensor z = ae.encode_image(rec->image);
        Tensor zb({1, C, lh, lw});
        zb.data = z.data;
        Var logits = model.logits_v(constant(zb));
        int arg = 0;
        for (int k = 1; k < model.config().classes; ++k)
            if (logits->val.data[k] > logits->val.data[arg]) arg = k;
        ok += (arg == label_of(rec->scene_label));
        ++n;
    }
    stats.heldout_accuracy = n ? static_cast<double>(ok) / n : 0.0;
    return stats;
}

}  // namespace camo::critic
