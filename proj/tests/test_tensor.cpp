#include <doctest.h>

#include "camo/nn.hpp"
#include "gradcheck.hpp"

using namespace camo;
using camo::testing::gradcheck;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("elementwise ops and their gradients") {
    Rng rng(42);
    Tensor a = Tensor::randn({2, 3, 4, 4}, rng);

    CHECK(gradcheck([](const Var& x) { return sum_all(mul(x, x)); }, a) < 1e-6);
    CHECK(gradcheck([](const Var& x) { return mean_all(silu(x)); }, a) < 1e-6);
    CHECK(gradcheck([](const Var& x) { return mean_all(sigmoid(x)); }, a) < 1e-6);
    CHECK(gradcheck([](const Var& x) { return sum_all(affine(x, 2.5, -1.0)); }, a) < 1e-6);

    Tensor b = Tensor::randn({2, 3, 4, 4}, rng);
    CHECK(gradcheck([&](const Var& x) { return sum_all(mul(x, constant(b))); }, a) < 1e-6);
    CHECK(gradcheck([&](const Var& x) { return sum_all(sub(x, constant(b))); }, a) < 1e-6);
    CHECK(gradcheck([&](const Var& x) { return sum_all(add(x, constant(b))); }, a) < 1e-6);
}

TEST_CASE("abs gradient away from the kink") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 5}, rng);
    for (auto& v : a.data)
        if (std::abs(v) < 0.1) v += 0.5;  // keep clear of zero
    CHECK(gradcheck([](const Var& x) { return sum_all(abs_v(x)); }, a) < 1e-6);
}

TEST_CASE("mask broadcast multiply") {
    Rng rng(3);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor m({2, 1, 4, 4});
    for (auto& v : m.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    CHECK(gradcheck([&](const Var& v) { return sum_all(mul_mask(v, constant(m))); }, x) < 1e-6);
    // gradient w.r.t. the mask too
    CHECK(gradcheck([&](const Var& v) { return sum_all(mul_mask(constant(x), v)); }, m) < 1e-6);
}

TEST_CASE("conv2d matches a direct loop and is differentiable") {
    Rng rng(11);
    Tensor x = Tensor::randn({2, 3, 6, 6}, rng);
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
    Tensor b = Tensor::randn({4}, rng);

    Var y = conv2d(constant(x), constant(w), constant(b), 1, 1);
    // direct convolution oracle
    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 4; ++co)
            for (int oy = 0; oy < 6; ++oy)
                for (int ox = 0; ox < 6; ++ox) {
                    double acc = b.data[co];
                    for (int ci = 0; ci < 3; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int iy = oy - 1 + ky, ix = ox - 1 + kx;
                                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
                                acc += x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                    CHECK(y->val.at(n, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
                }

    CHECK(gradcheck([&](const Var& v) {
              return mean_all(conv2d(v, constant(w), constant(b), 1, 1));
          }, x) < 1e-6);
    CHECK(gradcheck([&](const Var& v) {
              return mean_all(conv2d(constant(x), v, constant(b), 1, 1));
          }, w) < 1e-6);
    CHECK(gradcheck([&](const Var& v) {
              return mean_all(conv2d(constant(x), constant(w), v, 1, 1));
          }, b) < 1e-6);

    // strided
    CHECK(gradcheck([&](const Var& v) {
              return mean_all(conv2d(v, constant(w), constant(b), 2, 1));
          }, x) < 1e-6);
}

TEST_CASE("linear, reductions, upsample, concat, slice") {
    Rng rng(17);
    Tensor x = Tensor::randn({3, 5}, rng);
    Tensor w = Tensor::randn({4, 5}, rng);
    Tensor b = Tensor::randn({4}, rng);
    CHECK(gradcheck([&](const Var& v) { return mean_all(linear(v, constant(w), constant(b))); },
                    x) < 1e-6);
    CHECK(gradcheck([&](const Var& v) { return mean_all(linear(constant(x), v, constant(b))); },
                    w) < 1e-6);

    Tensor t = Tensor::randn({2, 3, 4, 4}, rng);
    CHECK(gradcheck([](const Var& v) { return mean_all(spatial_sum(v)); }, t) < 1e-6);
    CHECK(gradcheck([](const Var& v) { return mean_all(upsample2x(v)); }, t) < 1e-6);
    CHECK(gradcheck([](const Var& v) { return mean_all(slice_ch(v, 1, 2)); }, t) < 1e-6);
    CHECK(gradcheck([&](const Var& v) { return mean_all(concat_ch({v, constant(t)})); }, t) <
          1e-6);
    CHECK(gradcheck([](const Var& v) { return mean_all(row_sum(spatial_sum(v))); }, t) < 1e-6);
    CHECK(gradcheck([](const Var& v) {
              return mean_all(scale_rows(spatial_sum(v), {0.5, -2.0}));
          }, t) < 1e-6);
}

TEST_CASE("softmax cross-entropy and background CE") {
    Rng rng(23);
    Tensor logits = Tensor::randn({6, 5}, rng);
    std::vector<int> labels = {0, 4, 2, 1, 3, 2};
    CHECK(gradcheck([&](const Var& v) { return mean_all(softmax_ce_rows(v, labels)); }, logits) <
          1e-6);

    Tensor l2 = Tensor::randn({4, 2}, rng);
    CHECK(gradcheck([](const Var& v) { return mean_all(bg_ce_rows(v)); }, l2) < 1e-6);

    // known values
    Tensor probe = Tensor::from({2, 2}, {0.0, 0.0, 0.0, 2.0});
    Var ce = bg_ce_rows(constant(probe));
    CHECK(ce->val.data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(ce->val.data[1] == doctest::Approx(std::log(1.0 + std::exp(2.0))).epsilon(1e-12));
}

TEST_CASE("gather, segment mean, channels_to_rows, unit norm") {
    Rng rng(29);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    std::vector<std::array<int, 3>> idx = {{0, 1, 2}, {1, 3, 0}, {0, 0, 0}};
    CHECK(gradcheck([&](const Var& v) { return mean_all(gather_cells(v, idx)); }, x) < 1e-6);

    Tensor r = Tensor::randn({7}, rng);
    CHECK(gradcheck([](const Var& v) { return mean_all(segment_mean(v, {3, 4})); }, r) < 1e-6);

    CHECK(gradcheck([](const Var& v) { return mean_all(channels_to_rows(v)); }, x) < 1e-6);
    CHECK(gradcheck([](const Var& v) { return mean_all(channel_unit_norm(v)); }, x) < 1e-6);

    // unit norm actually normalizes
    Var n = channel_unit_norm(constant(x));
    for (int nn = 0; nn < 2; ++nn)
        for (int yy = 0; yy < 4; ++yy)
            for (int xx = 0; xx < 4; ++xx) {
                double ss = 0;
                for (int c = 0; c < 3; ++c) ss += n->val.at(nn, c, yy, xx) * n->val.at(nn, c, yy, xx);
                CHECK(ss == doctest::Approx(1.0).epsilon(1e-9));
            }
}

TEST_CASE("adam reduces a quadratic") {
    Rng rng(5);
    Var p = param(Tensor::randn({8}, rng));
    nn::Adam opt({{"p", p}}, 0.05);
    double first = 0;
    for (int it = 0; it < 200; ++it) {
        Var loss = sum_all(mul(p, p));
        if (it == 0) first = loss->val.data[0];
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    Var fin = sum_all(mul(p, p));
    CHECK(fin->val.data[0] < first * 1e-2);
}

TEST_CASE("backward accumulates through shared subgraphs") {
    Tensor x0 = Tensor::from({2}, {1.5, -0.5});
    Var x = param(x0);
    Var y = add(mul(x, x), mul(x, x));  // 2x^2
    Var s = sum_all(y);
    backward(s);
    CHECK(x->grad.data[0] == doctest::Approx(4.0 * 1.5));
    CHECK(x->grad.data[1] == doctest::Approx(4.0 * -0.5));
}

TEST_CASE("nearest resize on plain grids") {
    Tensor g = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor up = nearest_resize(g, 4, 4);
    CHECK(up.at(0, 0) == 1);
    CHECK(up.at(0, 3) == 2);
    CHECK(up.at(3, 0) == 3);
    CHECK(up.at(3, 3) == 4);
    Tensor down = nearest_resize(up, 2, 2);
    CHECK(down.max_abs_diff(g) == 0.0);
}

TEST_SUITE_END();
