#include <catch2/catch_amalgamated.hpp>

#include "calrank/autodiff.hpp"
#include "calrank/util.hpp"

#include <cmath>

using namespace calrank;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, bool rg = true, double scale = 1.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, scale);
    return Tensor::from(std::move(shape), std::move(v), rg);
}

} // namespace

TEST_CASE("masked_softmax matches hand-derived values") {
    SECTION("symmetric pair with one forbidden entry") {
        auto y = masked_softmax(Tensor::vec({0.0, 0.0, 123.0}), {1, 1, 0});
        CHECK(y.values()[0] == Catch::Approx(0.5).margin(1e-12));
        CHECK(y.values()[1] == Catch::Approx(0.5).margin(1e-12));
        CHECK(y.values()[2] == 0.0); // exactly zero
    }
    SECTION("all permitted equals plain softmax") {
        auto y = masked_softmax(Tensor::vec({1.0, 2.0, 3.0}), {1, 1, 1});
        // direct evaluation of exp/sum
        double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
        CHECK(y.values()[0] == Catch::Approx(std::exp(1.0) / z).epsilon(1e-12));
        CHECK(y.values()[1] == Catch::Approx(std::exp(2.0) / z).epsilon(1e-12));
        CHECK(y.values()[2] == Catch::Approx(std::exp(3.0) / z).epsilon(1e-12));
        CHECK(y.values()[0] == Catch::Approx(0.09003).margin(5e-6));
        CHECK(y.values()[1] == Catch::Approx(0.24473).margin(5e-6));
        CHECK(y.values()[2] == Catch::Approx(0.66524).margin(5e-6));
    }
    SECTION("singleton normalisation") {
        for (double x : {-50.0, 0.0, 3.25, 88.0}) {
            auto y = masked_softmax(Tensor::vec({x}), {1});
            CHECK(y.values()[0] == 1.0);
        }
    }
    SECTION("empty attention row is an error") {
        CHECK_THROWS_WITH(masked_softmax(Tensor::vec({1.0, 2.0}), {0, 0}),
                          Catch::Matchers::ContainsSubstring("empty attention row"));
    }
    SECTION("forbidden entries exactly zero, permitted positive, sums to one") {
        Rng rng(7);
        for (int trial = 0; trial < 50; ++trial) {
            std::size_t n = 1 + rng.below(12);
            std::vector<double> logits(n);
            std::vector<std::uint8_t> permit(n);
            bool any = false;
            for (std::size_t i = 0; i < n; ++i) {
                logits[i] = rng.normal(0.0, 5.0);
                permit[i] = rng.uniform01() < 0.6 ? 1 : 0;
                any |= permit[i] != 0;
            }
            if (!any) permit[rng.below(n)] = 1;
            auto y = masked_softmax(Tensor::vec(logits), permit);
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (permit[i]) {
                    CHECK(y.values()[i] > 0.0);
                } else {
                    CHECK(y.values()[i] == 0.0);
                }
                sum += y.values()[i];
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("layer_norm matches hand-derived values") {
    auto ones = Tensor::vec({1.0, 1.0, 1.0});
    auto zeros = Tensor::vec({0.0, 0.0, 0.0});
    SECTION("constant input maps to bias") {
        auto y = layer_norm(Tensor::vec({4.2, 4.2, 4.2}), ones, zeros, 1e-5);
        for (double v : y.values()) CHECK(v == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("already standardised input is preserved as eps tends to zero") {
        auto y = layer_norm(Tensor::vec({-1.0, 1.0}), Tensor::vec({1.0, 1.0}), Tensor::vec({0.0, 0.0}), 1e-15);
        CHECK(y.values()[0] == Catch::Approx(-1.0).epsilon(1e-7));
        CHECK(y.values()[1] == Catch::Approx(1.0).epsilon(1e-7));
    }
    SECTION("population statistics") {
        // mean 2, population variance 8/3
        auto y = layer_norm(Tensor::vec({0.0, 2.0, 4.0}), ones, zeros, 0.0);
        double sd = std::sqrt(8.0 / 3.0);
        CHECK(y.values()[0] == Catch::Approx(-2.0 / sd).epsilon(1e-12));
        CHECK(y.values()[0] == Catch::Approx(-1.2247).margin(5e-5));
        CHECK(y.values()[1] == Catch::Approx(0.0).margin(1e-12));
        CHECK(y.values()[2] == Catch::Approx(1.2247).margin(5e-5));
    }
}

TEST_CASE("backprop basics") {
    SECTION("d(x*x)/dx at 3 is 6") {
        auto x = Tensor::scalar(3.0, true);
        auto loss = mul(x, x);
        loss.backward();
        CHECK(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));
    }
    SECTION("softmax output sums to a constant, so gradients vanish") {
        auto l = Tensor::vec({0.3, -1.2, 2.0}, true);
        auto loss = sum_all(masked_softmax(l, {1, 1, 1}));
        loss.backward();
        for (double g : l.grad()) CHECK(std::abs(g) < 1e-12);
    }
    SECTION("non-scalar loss is rejected") {
        auto x = Tensor::vec({1.0, 2.0}, true);
        CHECK_THROWS_AS(add(x, x).backward(), std::invalid_argument);
    }
    SECTION("repeated backward accumulates") {
        auto x = Tensor::scalar(2.0, true);
        auto loss = mul(x, x);
        loss.backward();
        loss.zero_grad();
        loss.backward();
        CHECK(x.grad()[0] == Catch::Approx(8.0));
    }
}

TEST_CASE("finite_diff_check harness") {
    SECTION("quadratic is exact under central differences") {
        auto x = Tensor::scalar(3.0);
        double err = finite_diff_check<double>([](const Tensor& t) { return mul(t, t); }, x, 1e-5);
        CHECK(err < 1e-8);
    }
    SECTION("layer_norm then sum of squares") {
        Rng rng(11);
        auto x = random_tensor(rng, {8});
        auto g = Tensor::vec(std::vector<double>(8, 1.0));
        auto b = Tensor::vec(std::vector<double>(8, 0.0));
        double err = finite_diff_check<double>(
            [&](const Tensor& t) {
                auto y = layer_norm(t, g, b, 1e-5);
                return sum_all(mul(y, y));
            },
            x, 1e-5);
        CHECK(err < 1e-4);
    }
    SECTION("constant function reports zero error") {
        auto x = Tensor::vec({1.0, 2.0});
        double err = finite_diff_check<double>([](const Tensor&) { return Tensor::scalar(5.0); }, x, 1e-5);
        CHECK(err == 0.0);
    }
    SECTION("non-finite value names the coordinate") {
        CHECK_THROWS_WITH(finite_diff_check<double>(
                              [](const Tensor& t) { return sum_all(exp(t)); }, Tensor::vec({710.0}), 1e-5),
                          Catch::Matchers::ContainsSubstring("coordinate"));
    }
}

TEST_CASE("gradient checks for every primitive") {
    // relative error < 1e-4 on random inputs, 5 seeds, sizes <= 16
    const double step = 1e-5;
    const double tol = 1e-4;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        auto x = random_tensor(rng, {3, 4});
        auto y = random_tensor(rng, {3, 4});
        auto w = random_tensor(rng, {4, 5});
        auto v = random_tensor(rng, {12});

        auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f, const Tensor& at) {
            INFO(name << " seed " << seed);
            CHECK(finite_diff_check<double>(f, at, step) < tol);
        };

        check("add", [&](const Tensor& t) { return sum_all(mul(add(t, y), add(t, y))); }, x);
        check("sub", [&](const Tensor& t) { return sum_all(mul(sub(t, y), sub(t, y))); }, x);
        check("mul", [&](const Tensor& t) { return sum_all(mul(t, y)); }, x);
        check("scale", [&](const Tensor& t) { return sum_all(scale(t, 2.5)); }, x);
        check("exp", [&](const Tensor& t) { return sum_all(exp(t)); }, x);
        check("log", [&](const Tensor& t) { return sum_all(log(exp(t))); }, x);
        check("softplus", [&](const Tensor& t) { return sum_all(softplus(t)); }, x);
        check("gelu", [&](const Tensor& t) { return sum_all(gelu(t)); }, x);
        check("sum_all", [&](const Tensor& t) { return sum_all(t); }, x);
        check("mean_all", [&](const Tensor& t) { return mean_all(mul(t, t)); }, x);
        check("var_all", [&](const Tensor& t) { return var_all(t); }, v);
        check("matmul_lhs", [&](const Tensor& t) { return sum_all(mul(matmul(t, w), matmul(t, w))); }, x);
        check("matmul_rhs", [&](const Tensor& t) { return sum_all(mul(matmul(x, t), matmul(x, t))); }, w);
        check("transpose", [&](const Tensor& t) { return sum_all(mul(transpose(t), transpose(t))); }, x);
        check("gather_rows", [&](const Tensor& t) {
            auto g = gather_rows(t, {0, 2, 2, 1});
            return sum_all(mul(g, g));
        }, x);
        check("concat", [&](const Tensor& t) {
            auto c = concat<double>({t, y, t});
            return sum_all(mul(c, c));
        }, x);
        check("concat_cols", [&](const Tensor& t) {
            auto c = concat_cols<double>({t, y, t});
            return sum_all(mul(c, c));
        }, x);
        check("slice2d", [&](const Tensor& t) {
            auto s = slice(t, 1, 2, 1, 3);
            return sum_all(mul(s, s));
        }, x);
        check("slice1d", [&](const Tensor& t) {
            auto s = slice(t, 3, 6);
            return sum_all(mul(s, s));
        }, v);
        check("reshape", [&](const Tensor& t) {
            auto r = reshape(t, {4, 3});
            return sum_all(mul(r, r));
        }, x);
        check("add_rowvec_x", [&](const Tensor& t) {
            auto b = Tensor::vec({0.5, -1.0, 2.0, 0.25});
            auto s = add_rowvec(t, b);
            return sum_all(mul(s, s));
        }, x);
        check("add_rowvec_b", [&](const Tensor& t) {
            auto s = add_rowvec(x, t);
            return sum_all(mul(s, s));
        }, random_tensor(rng, {4}));
        check("masked_softmax", [&](const Tensor& t) {
            auto s = masked_softmax(t, {1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1});
            auto sm = mul(s, s);
            return sum_all(mul(sm, s)); // cubic keeps gradients non-trivial
        }, v);
        check("masked_softmax_rows", [&](const Tensor& t) {
            std::vector<std::uint8_t> permit(12, 1);
            permit[1] = 0; permit[6] = 0; permit[11] = 0;
            auto s = masked_softmax_rows(t, permit);
            return sum_all(mul(mul(s, s), s));
        }, random_tensor(rng, {3, 4}));
        check("layer_norm_x", [&](const Tensor& t) {
            auto g = Tensor::vec({1.1, 0.9, 1.2, 0.8, 1.0, 1.3, 0.7, 1.0, 1.0, 1.0, 1.0, 1.0});
            auto b = Tensor::vec({0.1, -0.2, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0});
            auto s = layer_norm(t, g, b, 1e-5);
            return sum_all(mul(s, s));
        }, v);
        check("layer_norm_gain", [&](const Tensor& t) {
            auto s = layer_norm(v, t, Tensor::vec(std::vector<double>(12, 0.0)), 1e-5);
            return sum_all(mul(s, s));
        }, random_tensor(rng, {12}));
        check("layer_norm_rows", [&](const Tensor& t) {
            auto g = Tensor::vec({1.1, 0.9, 1.2, 0.8});
            auto b = Tensor::vec({0.1, -0.2, 0.0, 0.3});
            auto s = layer_norm_rows(t, g, b, 1e-5);
            return sum_all(mul(s, s));
        }, x);
        check("rope", [&](const Tensor& t) {
            auto r = rope(t, {0, 3, 3}, 2);
            return sum_all(mul(r, r));
        }, x);
    }
}

TEST_CASE("forward determinism") {
    auto run = [] {
        Rng rng(99);
        auto x = random_tensor(rng, {4, 4});
        auto w = random_tensor(rng, {4, 4});
        auto h = gelu(matmul(x, w));
        auto y = layer_norm_rows(h, Tensor::vec({1.0, 1.0, 1.0, 1.0}), Tensor::vec({0.0, 0.0, 0.0, 0.0}), 1e-5);
        return sum_all(mul(y, y)).value();
    };
    double a = run();
    double b = run();
    CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("float instantiation works end to end") {
    using TF = TensorT<float>;
    auto x = TF::vec({1.0f, 2.0f, 3.0f}, true);
    auto y = masked_softmax(x, {1, 1, 1});
    auto loss = sum_all(mul(y, y));
    loss.backward();
    CHECK(std::isfinite(loss.value()));
    CHECK(x.grad().size() == 3);
}
