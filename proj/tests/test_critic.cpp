#include <doctest.h>

#include "camo/critic.hpp"
#include "gradcheck.hpp"

using namespace camo;

TEST_SUITE_BEGIN("critic");

TEST_CASE("feature stage shapes follow the architecture contract") {
    critic::CriticConfig cfg;
    critic::Critic model(cfg, 1);
    Rng rng(2);
    Tensor z = Tensor::randn({2, 4, 16, 16}, rng);
    auto feats = model.features_v(constant(z));
    REQUIRE(feats.size() == 3);
    CHECK(feats[0]->val.shape == std::vector<int>{2, 24, 16, 16});
    CHECK(feats[1]->val.shape == std::vector<int>{2, 48, 8, 8});
    CHECK(feats[2]->val.shape == std::vector<int>{2, 96, 4, 4});

    model.set_trained(true);
    auto f1 = model.features(z);
    auto f2 = model.features(z);
    for (size_t l = 0; l < f1.size(); ++l) CHECK(f1[l].max_abs_diff(f2[l]) == 0.0);

    CHECK_THROWS_AS(critic::Critic(critic::CriticConfig{4, 16, 1, 24, 48, 96}, 1),
                    ValidationError);
}

TEST_CASE("feature gradient w.r.t. the latent matches finite differences") {
    critic::CriticConfig cfg;
    cfg.c1 = 8;
    cfg.c2 = 12;
    cfg.c3 = 16;
    critic::Critic model(cfg, 3);
    Rng rng(4);
    Tensor z = Tensor::randn({1, 4, 8, 8}, rng);
    const double err = camo::testing::gradcheck(
        [&](const Var& v) {
            auto feats = model.features_v(v);
            Var acc;
            for (auto& f : feats) {
                Var m = mean_all(f);
                acc = acc ? add(acc, m) : m;
            }
            return acc;
        },
        z);
    CHECK(err < 1e-3);
}

TEST_CASE("latent perceptual distance axioms") {
    critic::CriticConfig cfg;
    critic::Critic model(cfg, 5);
    model.set_trained(true);
    Rng rng(6);
    Tensor z1 = Tensor::randn({1, 4, 16, 16}, rng);
    Tensor z2 = Tensor::randn({1, 4, 16, 16}, rng);

    CHECK(critic::latent_perceptual_distance(model, z1, z1) == 0.0);
    CHECK(critic::latent_perceptual_distance(model, z1, z2) ==
          critic::latent_perceptual_distance(model, z2, z1));
    CHECK(critic::latent_perceptual_distance(model, z1, z2) > 0.0);

    Tensor z3 = z1;
    z3.data[17] += 1e-4;
    CHECK(critic::latent_perceptual_distance(model, z1, z3) > 0.0);

    Tensor bad = Tensor::randn({1, 4, 8, 8}, rng);
    CHECK_THROWS_AS(critic::latent_perceptual_distance(model, z1, bad), ValidationError);
}

TEST_CASE("cutout changes exactly one rectangle and passes gradients elsewhere") {
    Rng rng(7);
    Tensor m = critic::cutout_mask(16, 16, rng, 3, 6);
    // find the zero region and verify it is one axis-aligned rectangle
    int y0 = 16, y1 = -1, x0 = 16, x1 = -1;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            if (m.at(y, x) == 0.0) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    REQUIRE(y1 >= y0);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            CHECK(m.at(y, x) == ((y >= y0 && y <= y1 && x >= x0 && x <= x1) ? 0.0 : 1.0));

    // gradients flow through non-cut cells unchanged
    Tensor z = Tensor::randn({1, 1, 16, 16}, rng);
    Tensor m4({1, 1, 16, 16});
    m4.data = m.data;
    Var zin = param(z);
    Var masked = mul_mask(zin, constant(m4));
    backward(sum_all(masked));
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            CHECK(zin->grad.at(0, 0, y, x) == m.at(y, x));
}

TEST_CASE("training is reproducible and learns the tiny task") {
    corpus::CorpusParams p;
    p.train_count = 40;
    p.val_count = 10;
    p.test_count = 5;
    corpus::Corpus c = corpus::build_corpus(p);
    backend::AutoencoderConfig acfg;
    backend::Autoencoder ae(acfg, 9);
    backend::train_autoencoder(ae, c, 80, 4, 2e-3, 7);

    critic::CriticConfig ccfg;
    ccfg.c1 = 12;
    ccfg.c2 = 16;
    ccfg.c3 = 24;
    critic::Critic m1(ccfg, 11);
    auto s1 = critic::train_critic(m1, c, ae, 80, 8, 1e-3, 13);
    critic::Critic m2(ccfg, 11);
    auto s2 = critic::train_critic(m2, c, ae, 80, 8, 1e-3, 13);
    CHECK(s1.final_loss == s2.final_loss);
    CHECK(s1.heldout_accuracy == s2.heldout_accuracy);
    CHECK(std::abs(s1.final_train_accuracy - s2.final_train_accuracy) <= 0.01);
    CHECK(std::isfinite(s1.final_loss));
}

TEST_SUITE_END();
