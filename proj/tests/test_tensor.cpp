#include <doctest.h>

#include <cmath>
#include <numeric>

#include "grad_suite.hpp"
#include "tnr/optim.hpp"

using namespace tnr;
using tnr::test::DTensor;
using tnr::test::gradcheck;
using tnr::test::random_tensor;

namespace {

constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

using tnr::test::distinct;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("conv2d examples") {
    Tensor<float> x({1, 1, 3, 3}, 1.0f), k({1, 1, 3, 3}, 1.0f), b({1}, 0.0f);
    auto y = conv2d(x, k, b, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y[4] == 9.0f);
    CHECK(y[0] == 4.0f);

    Rng rng(3);
    for (std::size_t ks : {1u, 3u, 5u}) {
        Tensor<float> in({2, 1, 6, 7});
        for (auto& v : in.data()) v = static_cast<float>(rng.uniform());
        Tensor<float> id({1, 1, ks, ks}, 0.0f);
        id[(ks * ks) / 2] = 1.0f;
        auto out = conv2d(in, id, Tensor<float>({1}, 0.0f), 1, ks / 2);
        CHECK(std::equal(out.data().begin(), out.data().end(), in.data().begin()));
    }

    Tensor<float> zero({1, 2, 4, 4}, 0.0f), kk({3, 2, 3, 3}, 0.7f), bb({3}, std::vector<float>{0.5f, -1.0f, 2.0f});
    auto z = conv2d(zero, kk, bb, 1, 1);
    for (std::size_t f = 0; f < 3; ++f)
        for (std::size_t i = 0; i < 16; ++i) CHECK(z[f * 16 + i] == bb[f]);
}

TEST_CASE("conv2d shape errors name the extents") {
    Tensor<float> x({1, 2, 5, 5}), k({1, 3, 3, 3}), b({1});
    CHECK_THROWS_AS(conv2d(x, k, b, 1, 1), ShapeError);
    try {
        conv2d(x, k, b, 1, 1);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
    }
    Tensor<float> even({1, 2, 2, 2});
    CHECK_THROWS_AS(conv2d(x, even, b, 1, 0), std::invalid_argument);
    // (5 + 0 - 3) / 2 is not integral
    Tensor<float> k2({1, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(Tensor<float>({1, 2, 6, 6}), k2, b, 2, 0), ShapeError);
}

TEST_CASE("direct 3x3 path matches the generic path") {
    // Same kernel embedded in a 5x5 with zeros runs the generic path.
    for (int seed = 0; seed < 6; ++seed) {
        Rng rng(100 + seed);
        const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 5), f = pick(rng, 1, 6);
        const std::size_t h = pick(rng, 2, 20), w = pick(rng, 2, 20);
        DTensor x = random_tensor({n, c, h, w}, rng), k3 = random_tensor({f, c, 3, 3}, rng), b = random_tensor({f}, rng);
        DTensor k5({f, c, 5, 5}, 0.0);
        for (std::size_t q = 0; q < f * c; ++q)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) k5[q * 25 + (i + 1) * 5 + j + 1] = k3[q * 9 + i * 3 + j];
        auto a = conv2d(x, k3, b, 1, 1);
        auto g = conv2d(x, k5, b, 1, 2);
        REQUIRE(a.shape() == g.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(g[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul examples") {
    Tensor<float> id({2, 2}, std::vector<float>{1, 0, 0, 1}), m({2, 2}, std::vector<float>{1, 2, 3, 4});
    auto r = matmul(id, m);
    CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{1, 2, 3, 4});
    auto d = matmul(Tensor<float>({1, 2}, std::vector<float>{1, 2}), Tensor<float>({2, 1}, std::vector<float>{3, 4}));
    CHECK(d.item() == 11.0f);
    auto z = matmul(Tensor<float>({3, 2}, 0.0f), m);
    for (auto v : z.data()) CHECK(v == 0.0f);
    CHECK_THROWS_AS(matmul(Tensor<float>({2, 3}), m), ShapeError);
}

TEST_CASE("pointwise and pooling examples") {
    auto r = relu(Tensor<float>({3}, std::vector<float>{-1, 0, 2}));
    CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{0, 0, 2});
    auto p = maxpool2(Tensor<float>({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
    CHECK(p.shape() == Shape{1, 1, 1, 1});
    CHECK(p.item() == 4.0f);
    auto u = upsample_nearest2(Tensor<float>({1, 1, 1, 1}, std::vector<float>{5}));
    CHECK(u.shape() == Shape{1, 1, 2, 2});
    for (auto v : u.data()) CHECK(v == 5.0f);
    CHECK_THROWS_AS(maxpool2(Tensor<float>({1, 1, 3, 2})), ShapeError);
    auto g = global_avg_pool(Tensor<float>({1, 2, 2, 2}, std::vector<float>{1, 2, 3, 4, 0, 0, 0, 8}));
    CHECK(g.shape() == Shape{1, 2});
    CHECK(g[0] == 2.5f);
    CHECK(g[1] == 2.0f);
}

TEST_CASE("maxpool ties route the gradient to the first element") {
    Tensor<double> x({1, 1, 2, 2}, 3.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> y;
    {
        TapeScope<double> s(tape);
        y = sum(maxpool2(x));
    }
    tape.backward(y);
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("dropout") {
    Tensor<float> ones({100000}, 1.0f);
    CHECK(dropout(ones, 0.0, 1, true).same_storage(ones));
    CHECK(dropout(ones, 0.5, 1, false).same_storage(ones));
    auto d = dropout(ones, 0.5, 42, true);
    std::size_t zeros = 0;
    for (auto v : d.data()) {
        CHECK((v == 0.0f || v == 2.0f));
        zeros += v == 0.0f;
    }
    CHECK(std::abs(static_cast<double>(zeros) / 1e5 - 0.5) <= 0.01);
    auto again = dropout(ones, 0.5, 42, true);
    CHECK(std::equal(d.data().begin(), d.data().end(), again.data().begin()));
    CHECK_THROWS_AS(dropout(ones, 1.0, 1, true), std::invalid_argument);
    CHECK_THROWS_AS(dropout(ones, -0.1, 1, true), std::invalid_argument);
}

TEST_CASE("softmax cross entropy") {
    const std::vector<int> zero{0};
    CHECK(softmax_cross_entropy(Tensor<double>({1, 2}, 0.0), zero, 0.0).item() == doctest::Approx(std::log(2.0)));
    for (double eps : {0.0, 0.1, 0.5, 0.9}) {
        for (int label = 0; label < 10; ++label) {
            const std::vector<int> l{label, 9 - label};
            const double v = softmax_cross_entropy(Tensor<float>({2, 10}, 3.25f), l, eps).item();
            CHECK(std::abs(v - std::log(10.0)) <= 1e-6);
        }
    }
    const double tiny = softmax_cross_entropy(Tensor<double>({1, 2}, std::vector<double>{10, -10}), zero, 0.0).item();
    CHECK(tiny == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
    CHECK(tiny == doctest::Approx(2.06e-9).epsilon(0.01));
    const std::vector<int> bad{2};
    CHECK_THROWS_AS(softmax_cross_entropy(Tensor<float>({1, 2}), bad, 0.0), std::out_of_range);
    const std::vector<int> neg{-1};
    CHECK_THROWS_AS(softmax_cross_entropy(Tensor<float>({1, 2}), neg, 0.0), std::out_of_range);

    Rng rng(9);
    for (int s = 0; s < 50; ++s) {
        auto z = random_tensor({3, 5}, rng, -20, 20);
        const std::vector<int> l{0, 2, 4};
        CHECK(softmax_cross_entropy(z, l, rng.uniform(0, 0.99)).item() >= 0.0);
    }
}

TEST_CASE("total variation") {
    CHECK(total_variation(Tensor<float>({1, 1, 2, 2}, std::vector<float>{0, 1, 0, 1})).item() == 2.0f);
    CHECK(total_variation(Tensor<float>({2, 3, 4, 5}, 0.3f)).item() == 0.0f);
    Rng rng(4);
    for (int s = 0; s < 20; ++s) {
        auto x = random_tensor({2, 2, 5, 4}, rng, 0, 1);
        auto shifted = x.clone();
        for (auto& v : shifted.data()) v += 0.25;
        const double a = total_variation(x).item(), b = total_variation(shifted).item();
        CHECK(a >= 0.0);
        CHECK(a == doctest::Approx(b).epsilon(1e-12));
    }
    CHECK_THROWS_AS(total_variation(Tensor<float>({1, 1, 1, 4})), ShapeError);
}

TEST_CASE("reconstruction loss") {
    Rng rng(5);
    auto x = random_tensor({2, 1, 5, 5}, rng, 0, 1);
    CHECK(reconstruction_loss(x, x, 0.0).item() == 0.0);

    Tensor<double> a({1, 1, 5, 5}, 0.6), zero({1, 1, 5, 5}, 0.0);
    CHECK(reconstruction_loss(a, zero, 0.0).item() == doctest::Approx(3.0));
    CHECK(reconstruction_loss(a, zero, 0.1).item() == doctest::Approx(3.0));
    CHECK(reconstruction_loss(a, zero, 0.0, RecNorm::squared_l2).item() == doctest::Approx(9.0));
    CHECK_THROWS_AS(reconstruction_loss(a, Tensor<double>({1, 1, 5, 4}), 0.1), ShapeError);

    // zero residual: norm gradient is defined as zero
    auto y = x.clone();
    y.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> l;
    {
        TapeScope<double> s(tape);
        l = reconstruction_loss(y, x, 0.0);
    }
    tape.backward(l);
    for (auto g : y.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward examples") {
    Tensor<double> x({2, 3}, 0.5);
    x.set_requires_grad(true);
    {
        Tape<double> tape;
        Tensor<double> l;
        {
            TapeScope<double> s(tape);
            l = sum(x);
        }
        tape.backward(l);
        for (auto g : x.grad()) CHECK(g == 1.0);
    }
    Tensor<double> v({2}, std::vector<double>{1, 2});
    v.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> l;
    {
        TapeScope<double> s(tape);
        l = sum(mul(v, v));
    }
    tape.backward(l);
    CHECK(v.grad()[0] == 2.0);
    CHECK(v.grad()[1] == 4.0);
    // repeated backward accumulates
    tape.backward(l);
    CHECK(v.grad()[0] == 4.0);
    CHECK(v.grad()[1] == 8.0);

    Tensor<double> nonscalar;
    {
        TapeScope<double> s(tape);
        nonscalar = mul(v, v);
    }
    CHECK_THROWS(tape.backward(nonscalar));
}

TEST_CASE("shared subexpressions accumulate like a duplicated graph") {
    Rng rng(12);
    for (int s = 0; s < 20; ++s) {
        auto x0 = random_tensor({3, 4}, rng);
        auto w0 = random_tensor({4, 2}, rng);
        auto run = [&](bool shared) {
            auto x = x0.clone();
            auto w = w0.clone();
            x.set_requires_grad(true);
            w.set_requires_grad(true);
            Tape<double> tape;
            Tensor<double> l;
            {
                TapeScope<double> sc(tape);
                if (shared) {
                    auto h = sigmoid(matmul(x, w));
                    l = sum(add(mul(h, h), h));
                } else {
                    auto h1 = sigmoid(matmul(x, w)), h2 = sigmoid(matmul(x, w)), h3 = sigmoid(matmul(x, w));
                    l = sum(add(mul(h1, h2), h3));
                }
            }
            tape.backward(l);
            return std::pair{std::vector<double>(x.grad().begin(), x.grad().end()),
                             std::vector<double>(w.grad().begin(), w.grad().end())};
        };
        auto [xa, wa] = run(true);
        auto [xb, wb] = run(false);
        for (std::size_t i = 0; i < xa.size(); ++i) CHECK(xa[i] == doctest::Approx(xb[i]).epsilon(1e-12));
        for (std::size_t i = 0; i < wa.size(); ++i) CHECK(wa[i] == doctest::Approx(wb[i]).epsilon(1e-12));
    }
}

TEST_CASE("adam") {
    Tensor<double> p({3}, std::vector<double>{1, -2, 3});
    AdamState<double> st;
    st.hyper.weight_decay = 0.0;
    std::vector<Tensor<double>> ps{p};
    p.zero_grad();
    for (int i = 0; i < 5; ++i) adam_step(ps, st);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -2.0);
    CHECK(p[2] == 3.0);
    CHECK(st.step == 5);

    Tensor<double> t({1}, 0.0);
    std::vector<Tensor<double>> ts{t};
    AdamState<double> s1;
    s1.hyper = {0.1, 0.9, 0.999, 1e-8, 0.0};
    t.grad()[0] = 1.0;
    adam_step(ts, s1);
    CHECK(std::abs(t[0] + 0.1) <= 1e-6);
    const double before = t[0];
    adam_step(ts, s1);
    CHECK(std::abs(t[0] - before) <= 0.1 * (1 + 1e-6));

    std::vector<Tensor<double>> wrong{Tensor<double>({2})};
    CHECK_THROWS_AS(adam_step(wrong, s1), ShapeError);
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 10, 1e-3) == 1e-3);
    CHECK(cosine_lr(5, 10, 1e-3) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(cosine_lr(199, 200, 1e-3) == doctest::Approx(6.168e-8).epsilon(1e-3));
    CHECK_THROWS_AS(cosine_lr(10, 10, 1e-3), std::out_of_range);
    CHECK_THROWS_AS(cosine_lr(-1, 10, 1e-3), std::out_of_range);
}

TEST_CASE("finite difference gradients") {
    const auto results = tnr::test::grad_suite(kSeeds);
    CHECK(results.size() == 19);
    for (const auto& [op, r] : results) {
        INFO(op);
        CHECK(r.shapes >= kSeeds);
        CHECK(r.checked > 0);
        CHECK(r.max_rel_error <= kTol);
    }
}

}  // TEST_SUITE
