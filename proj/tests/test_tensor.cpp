#include <doctest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "rpnet/tensor.hpp"
#include "support/fd.hpp"
#include "support/oracles.hpp"
#include "support/util.hpp"

using namespace rpnet;
using testutil::rand_tensor;

TEST_CASE("conv2d scalar scaling and identity") {
    Tensor in = Tensor::full({2, 2, 1}, 1.0);
    Tensor k = Tensor::from({1, 1, 1, 1}, {2.0});
    Tensor out = conv2d(in, k, 1, 0, 1);
    REQUIRE(out.shape() == std::vector<int>{2, 2, 1});
    for (Real v : out.values()) CHECK(v == doctest::Approx(2.0));

    Rng rng(11);
    Tensor x = rand_tensor({5, 4, 3}, rng);
    Tensor ident = Tensor::from({1, 1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor y = conv2d(x, ident, 1, 0, 1);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d matches direct loop oracle across groups") {
    Rng rng(42);
    for (int groups : {1, 2, 4}) {
        for (int trial = 0; trial < 30; ++trial) {
            Tensor in = rand_tensor({5, 5, 4}, rng);
            const int cout = 4;
            Tensor k = rand_tensor({3, 3, 4 / groups, cout}, rng);
            const int stride = 1 + (trial % 2);
            const int pad = trial % 3;
            if (5 + 2 * pad < 3) continue;
            Tensor out = conv2d(in, k, stride, pad, groups);
            auto ref = oracle::conv2d_direct(in.values(), 5, 5, 4, k.values(), 3, 3, 4 / groups,
                                             cout, stride, pad, groups);
            REQUIRE(out.numel() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i)
                CHECK(std::abs(out.values()[i] - ref[i]) < 1e-6);
        }
    }
}

TEST_CASE("grouped conv equals split-conv-concat") {
    Rng rng(7);
    const int G = 4, D = 8, COUT = 8;
    Tensor in = rand_tensor({6, 6, D}, rng);
    Tensor k = rand_tensor({3, 3, D / G, COUT}, rng);
    Tensor full = conv2d(in, k, 1, 1, G);

    const int Cg = D / G, Coutg = COUT / G;
    for (int g = 0; g < G; ++g) {
        std::vector<Real> ing(std::size_t(6 * 6 * Cg));
        for (int p = 0; p < 36; ++p)
            for (int c = 0; c < Cg; ++c)
                ing[std::size_t(p * Cg + c)] = in.values()[std::size_t(p * D + g * Cg + c)];
        std::vector<Real> kg(std::size_t(3 * 3 * Cg * Coutg));
        for (int t = 0; t < 9 * Cg; ++t)
            for (int j = 0; j < Coutg; ++j)
                kg[std::size_t(t * Coutg + j)] = k.values()[std::size_t(t * COUT + g * Coutg + j)];
        Tensor outg = conv2d(Tensor::from({6, 6, Cg}, ing), Tensor::from({3, 3, Cg, Coutg}, kg),
                             1, 1, 1);
        for (int p = 0; p < 36; ++p)
            for (int j = 0; j < Coutg; ++j)
                CHECK(std::abs(outg.values()[std::size_t(p * Coutg + j)] -
                               full.values()[std::size_t(p * COUT + g * Coutg + j)]) < 1e-6);
    }
}

TEST_CASE("conv2d rejects inconsistent shapes") {
    Tensor in = Tensor::full({4, 4, 3}, 1.0);
    Tensor k = Tensor::from({1, 1, 2, 1}, {1.0, 1.0});
    CHECK_THROWS_AS(conv2d(in, k, 1, 0, 1), std::invalid_argument);
    Tensor k2 = Tensor::full({3, 3, 3, 5}, 0.1);
    CHECK_THROWS_AS(conv2d(in, k2, 1, 0, 5), std::invalid_argument);  // 3 % 5 != 0
}

TEST_CASE("relu, gap, channel_max basics") {
    Tensor t = Tensor::from({3}, {-1, 0, 2});
    Tensor r = relu(t);
    CHECK(r.values() == std::vector<Real>{0, 0, 2});

    Tensor c = Tensor::full({4, 5, 3}, 2.5);
    Tensor g = gap(c);
    REQUIRE(g.shape() == std::vector<int>{3});
    for (Real v : g.values()) CHECK(v == doctest::Approx(2.5));

    Rng rng(3);
    Tensor m = rand_tensor({3, 3, 5}, rng);
    Tensor cm = channel_max(m);
    auto ref = oracle::channel_max_direct(m.values(), 3, 3, 5);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(cm.values()[i] == ref[i]);
}

TEST_CASE("binary ops reject shape mismatch; empty shapes rejected") {
    Tensor a = Tensor::full({2, 2}, 1.0);
    Tensor b = Tensor::full({2, 3}, 1.0);
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::zeros({0, 2}), std::invalid_argument);
}

TEST_CASE("backward on linear graph gives data as gradient") {
    Tensor w = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    Tensor x = Tensor::from({3}, {3.0, 4.0, 5.0});
    Tensor loss = reduce_sum(mul(w, x));
    backward(loss);
    REQUIRE(w.has_grad());
    CHECK(w.grad() == std::vector<Real>{3.0, 4.0, 5.0});
}

TEST_CASE("dead relu blocks gradient") {
    Tensor w = Tensor::from({3}, {-1.0, -0.5, -2.0}, true);
    Tensor loss = reduce_sum(relu(w));
    backward(loss);
    CHECK(w.grad() == std::vector<Real>{0, 0, 0});
}

TEST_CASE("backward errors: non-scalar and detached losses") {
    Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor y = relu(w);
    CHECK_THROWS_AS(backward(y), std::runtime_error);

    Tensor c = Tensor::from({2}, {1.0, 2.0});  // no requires_grad anywhere
    Tensor z = reduce_sum(c);
    CHECK_THROWS_AS(backward(z), std::runtime_error);
}

TEST_CASE("backward consumes the tape") {
    Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor loss = reduce_sum(mul(w, w));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), std::runtime_error);
}

TEST_CASE("non-finite op output raises") {
    Tensor a = Tensor::from({1}, {1.0});
    Tensor z = Tensor::from({1}, {0.0});
    CHECK_THROWS_AS(div_by_scalar(a, z), std::runtime_error);
}

TEST_CASE("finite differences on a composite graph") {
    Rng rng(99);
    Tensor in = rand_tensor({6, 6, 2}, rng, 0.1, 1.0);
    Tensor k1 = rand_tensor({3, 3, 2, 4}, rng, -0.5, 0.5, true);
    Tensor b1 = rand_tensor({4}, rng, -0.1, 0.1, true);
    Tensor theta = rand_tensor({4, 3}, rng, -0.5, 0.5, true);
    std::vector<Real> labels{1, 0, 1};

    auto forward = [&]() {
        Tensor f = relu(bias_add(conv2d(in, k1, 1, 1, 1), b1));
        Tensor v = linear_vec(gap(f), theta);
        return multilabel_bce(v, labels);
    };
    auto rep = fd::check(forward, {k1, b1, theta});
    CHECK(rep.checked > 80);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("finite differences per op") {
    Rng rng(123);

    SUBCASE("mul/add/scale chain (linear in each input)") {
        Tensor a = rand_tensor({4, 3}, rng, -1, 1, true);
        Tensor b = rand_tensor({4, 3}, rng, -1, 1, true);
        auto fwd = [&]() { return reduce_sum(add(scale(mul(a, b), 1.7), sub(a, b))); };
        CHECK(fd::check(fwd, {a, b}).max_rel_err < 1e-4);
    }
    SUBCASE("sigmoid") {
        Tensor a = rand_tensor({5}, rng, -2, 2, true);
        auto fwd = [&]() { return reduce_sum(sigmoid(a)); };
        CHECK(fd::check(fwd, {a}).max_rel_err < 1e-3);
    }
    SUBCASE("conv2d with groups and stride") {
        Tensor in = rand_tensor({5, 5, 4}, rng, -1, 1, true);
        Tensor k = rand_tensor({3, 3, 2, 4}, rng, -1, 1, true);
        auto fwd = [&]() { return reduce_sum(conv2d(in, k, 2, 1, 2)); };
        CHECK(fd::check(fwd, {in, k}).max_rel_err < 1e-4);
    }
    SUBCASE("channel_max routes to argmax") {
        Tensor in = rand_tensor({4, 4, 3}, rng, -1, 1, true);
        auto fwd = [&]() { return reduce_sum(channel_max(in)); };
        CHECK(fd::check(fwd, {in}).max_rel_err < 1e-3);
    }
    SUBCASE("global_max and div_by_scalar") {
        Tensor in = rand_tensor({4, 4, 2}, rng, 0.1, 1.0, true);
        auto fwd = [&]() { return reduce_sum(div_by_scalar(in, global_max(in))); };
        CHECK(fd::check(fwd, {in}).max_rel_err < 1e-3);
    }
    SUBCASE("cosine_map both sides") {
        Tensor t = rand_tensor({3, 3, 6}, rng, 0.2, 1.0, true);
        Tensor p = rand_tensor({6}, rng, 0.2, 1.0, true);
        auto fwd = [&]() { return reduce_sum(cosine_map(t, p)); };
        CHECK(fd::check(fwd, {t, p}).max_rel_err < 1e-3);
    }
    SUBCASE("pointwise_max over three maps") {
        Tensor a = rand_tensor({4, 4, 1}, rng, -1, 1, true);
        Tensor b = rand_tensor({4, 4, 1}, rng, -1, 1, true);
        Tensor c = rand_tensor({4, 4, 1}, rng, -1, 1, true);
        auto fwd = [&]() { return reduce_sum(pointwise_max({a, b, c})); };
        CHECK(fd::check(fwd, {a, b, c}).max_rel_err < 1e-3);
    }
    SUBCASE("mul_by_map broadcast") {
        Tensor f = rand_tensor({4, 4, 3}, rng, -1, 1, true);
        Tensor m = rand_tensor({4, 4, 1}, rng, -1, 1, true);
        auto fwd = [&]() { return reduce_sum(mul_by_map(f, m)); };
        CHECK(fd::check(fwd, {f, m}).max_rel_err < 1e-4);
    }
    SUBCASE("masked_spatial_mean") {
        Tensor f = rand_tensor({4, 4, 3}, rng, -1, 1, true);
        std::vector<Real> mv(16, 0.0);
        for (std::size_t i = 0; i < mv.size(); i += 3) mv[i] = 1.0;
        Tensor m = Tensor::from({4, 4, 1}, mv);
        auto fwd = [&]() { return reduce_sum(masked_spatial_mean(f, m)); };
        CHECK(fd::check(fwd, {f}).max_rel_err < 1e-4);
    }
    SUBCASE("smooth2d_reflect") {
        Tensor map = rand_tensor({5, 5, 1}, rng, -1, 1, true);
        std::vector<Real> prof{0.25, 0.5, 0.25};
        auto fwd = [&]() { return reduce_sum(mul(smooth2d_reflect(map, prof), map)); };
        CHECK(fd::check(fwd, {map}).max_rel_err < 1e-3);
    }
    SUBCASE("normalize_channel_max") {
        Tensor a = rand_tensor({4, 4, 2}, rng, 0.1, 1.0, true);
        auto fwd = [&]() { return reduce_sum(normalize_channel_max(a, Real(1e-8))); };
        CHECK(fd::check(fwd, {a}).max_rel_err < 1e-3);
    }
    SUBCASE("linear_vec and bias_add") {
        Tensor x = rand_tensor({5}, rng, -1, 1, true);
        Tensor w = rand_tensor({5, 3}, rng, -1, 1, true);
        Tensor b = rand_tensor({3}, rng, -1, 1, true);
        auto fwd = [&]() { return reduce_sum(bias_add(linear_vec(x, w), b)); };
        CHECK(fd::check(fwd, {x, w, b}).max_rel_err < 1e-4);
    }
}

TEST_CASE("ops are bit-deterministic") {
    Rng rng1(5), rng2(5);
    Tensor a1 = rand_tensor({7, 7, 4}, rng1);
    Tensor k1 = rand_tensor({3, 3, 2, 8}, rng1);
    Tensor a2 = rand_tensor({7, 7, 4}, rng2);
    Tensor k2 = rand_tensor({3, 3, 2, 8}, rng2);
    Tensor o1 = conv2d(a1, k1, 2, 1, 2);
    Tensor o2 = conv2d(a2, k2, 2, 1, 2);
    REQUIRE(o1.numel() == o2.numel());
    CHECK(std::memcmp(o1.values().data(), o2.values().data(),
                      o1.numel() * sizeof(Real)) == 0);
}

TEST_CASE("gradient reaches every requires_grad leaf") {
    Rng rng(17);
    Tensor a = rand_tensor({3, 3, 2}, rng, 0.1, 1.0, true);
    Tensor b = rand_tensor({2}, rng, 0.1, 1.0, true);
    Tensor f = bias_add(a, b);
    Tensor loss = reduce_sum(mul(f, f));
    backward(loss);
    CHECK(a.has_grad());
    CHECK(b.has_grad());
}
