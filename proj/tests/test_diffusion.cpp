#include <catch2/catch_amalgamated.hpp>

#include "mmtryon/diffusion.hpp"

using namespace mmtryon;
using namespace mmtryon::diffusion;

TEST_CASE("make_schedule: single-step linear collapses to 1 - beta_1") {
    auto s = make_schedule(1, ScheduleKind::linear);
    REQUIRE(s.alpha.size() == 1);
    REQUIRE(s.alpha[0] == Catch::Approx(1.0 - 1e-4).epsilon(1e-12));
}

TEST_CASE("make_schedule: 1000-step linear endpoint vs brute-force product") {
    auto s = make_schedule(1000, ScheduleKind::linear);
    for (size_t i = 1; i < s.alpha.size(); ++i) REQUIRE(s.alpha[i] < s.alpha[i - 1]);
    // independent cumulative product in extended precision
    long double acc = 1.0L;
    for (int t = 0; t < 1000; ++t) {
        long double beta = 1e-4L + (2e-2L - 1e-4L) * t / 999.0L;
        acc *= (1.0L - beta);
    }
    REQUIRE(s.alpha[999] == Catch::Approx(static_cast<double>(acc)).epsilon(1e-10));
    REQUIRE(s.alpha[999] < 0.01);
}

TEST_CASE("make_schedule: cosine bounds and monotonicity") {
    auto s = make_schedule(10, ScheduleKind::cosine);
    double prev = 1.0;
    for (double a : s.alpha) {
        REQUIRE(a > 1e-5);
        REQUIRE(a <= 1.0);
        REQUIRE(a <= prev);
        prev = a;
    }
}

TEST_CASE("make_schedule: zero steps rejected") {
    REQUIRE_THROWS_AS(make_schedule(0, ScheduleKind::linear), std::invalid_argument);
}

TEST_CASE("forward_diffuse endpoint behavior") {
    RandomStream rs(5);
    auto z0 = Tensor<double>::randn({1, 4, 4}, rs);
    auto eps = Tensor<double>::randn({1, 4, 4}, rs);

    SECTION("alpha = 1 returns z0 exactly") {
        NoiseSchedule s{1, {1.0}};
        auto zt = forward_diffuse_tensor(z0, 0, eps, s);
        for (int64_t i = 0; i < zt.numel(); ++i) REQUIRE(zt.data()[i] == z0.data()[i]);
    }
    SECTION("alpha -> 0 limit approaches pure noise") {
        NoiseSchedule s{1, {1e-12}};
        auto zt = forward_diffuse_tensor(z0, 0, eps, s);
        for (int64_t i = 0; i < zt.numel(); ++i)
            REQUIRE(std::fabs(zt.data()[i] - eps.data()[i]) < 1e-5);
    }
    SECTION("alpha = 0.25 against hand-evaluated scalar form") {
        NoiseSchedule s{1, {0.25}};
        auto ones = Tensor<double>::full({1, 4, 4}, 1.0);
        auto zt = forward_diffuse_tensor(ones, 0, eps, s);
        for (int64_t i = 0; i < zt.numel(); ++i) {
            double expect = 0.5 * 1.0 + std::sqrt(0.75) * eps.data()[i];
            REQUIRE(zt.data()[i] == Catch::Approx(expect).epsilon(1e-12));
        }
    }
    SECTION("shape and range errors") {
        NoiseSchedule s{2, {0.9, 0.5}};
        auto bad = Tensor<double>::randn({1, 2, 2}, rs);
        REQUIRE_THROWS_AS(forward_diffuse_tensor(z0, 0, bad, s), std::invalid_argument);
        REQUIRE_THROWS_AS(forward_diffuse_tensor(z0, 2, eps, s), std::invalid_argument);
        REQUIRE_THROWS_AS(forward_diffuse_tensor(z0, -1, eps, s), std::invalid_argument);
    }
}

TEST_CASE("forward_diffuse is linear in z0 and eps") {
    RandomStream rs(6);
    NoiseSchedule s{1, {0.37}};
    auto a = Tensor<double>::randn({2, 3, 3}, rs);
    auto b = Tensor<double>::randn({2, 3, 3}, rs);
    auto e1 = Tensor<double>::randn({2, 3, 3}, rs);
    auto e2 = Tensor<double>::randn({2, 3, 3}, rs);
    auto zero = Tensor<double>::zeros({2, 3, 3});

    auto lhs = forward_diffuse_tensor(add(a, b), 0, e1, s);
    auto rhs = add(forward_diffuse_tensor(a, 0, e1, s), forward_diffuse_tensor(b, 0, zero, s));
    for (int64_t i = 0; i < lhs.numel(); ++i)
        REQUIRE(lhs.data()[i] == Catch::Approx(rhs.data()[i]).margin(1e-12));

    auto lhs2 = forward_diffuse_tensor(a, 0, add(e1, e2), s);
    auto rhs2 = add(forward_diffuse_tensor(a, 0, e1, s), forward_diffuse_tensor(zero, 0, e2, s));
    for (int64_t i = 0; i < lhs2.numel(); ++i)
        REQUIRE(lhs2.data()[i] == Catch::Approx(rhs2.data()[i]).margin(1e-12));
}

TEST_CASE("forward_diffuse Monte-Carlo statistics match Eq-1 moments") {
    RandomStream rs(42);
    NoiseSchedule sched{4, {0.95, 0.6, 0.35, 0.1}};
    auto z0 = Tensor<double>::randn({1, 4, 4}, rs);
    const int N = 12000;
    int t = 2;
    double a = sched.alpha[static_cast<size_t>(t)];

    int64_t n = z0.numel();
    std::vector<double> sum(static_cast<size_t>(n), 0.0), sumsq(static_cast<size_t>(n), 0.0);
    for (int k = 0; k < N; ++k) {
        auto eps = Tensor<double>::randn({1, 4, 4}, rs);
        auto zt = forward_diffuse_tensor(z0, t, eps, sched);
        for (int64_t i = 0; i < n; ++i) {
            sum[static_cast<size_t>(i)] += zt.data()[i];
            sumsq[static_cast<size_t>(i)] += zt.data()[i] * zt.data()[i];
        }
    }
    double se = std::sqrt(1.0 - a) / std::sqrt(static_cast<double>(N));
    int within3 = 0;
    double mean_dev = 0.0, mean_var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double m = sum[static_cast<size_t>(i)] / N;
        double dev = std::fabs(m - std::sqrt(a) * z0.data()[i]);
        if (dev <= 3.0 * se) ++within3;
        REQUIRE(dev <= 4.5 * se);  // hard cap even for the tails
        mean_dev += dev / se;
        double var = sumsq[static_cast<size_t>(i)] / N - m * m;
        mean_var += var;
    }
    REQUIRE(within3 >= static_cast<int>(0.98 * n));
    REQUIRE(mean_dev / n <= 1.6);  // E|N(0,1)| is about 0.8
    mean_var /= static_cast<double>(n);
    REQUIRE(mean_var == Catch::Approx(1.0 - a).epsilon(0.05));
}

TEST_CASE("denoising_loss examples and properties") {
    auto a = Tensor<double>::from_data({2}, {3.0, 4.0});
    auto zero = Tensor<double>::zeros({2});
    REQUIRE(denoising_loss(a, a).item() == 0.0);
    REQUIRE(denoising_loss(zero, a).item() == Catch::Approx(12.5));

    auto b = a.detached();
    for (int64_t i = 0; i < b.numel(); ++i) b.data()[i] += 1.0;
    REQUIRE(denoising_loss(b, a).item() == Catch::Approx(1.0));

    RandomStream rs(9);
    for (int k = 0; k < 20; ++k) {
        auto p = Tensor<double>::randn({3, 3}, rs);
        auto q = Tensor<double>::randn({3, 3}, rs);
        double l = denoising_loss(p, q).item();
        REQUIRE(l >= 0.0);
        if (l == 0.0) REQUIRE(p.values() == q.values());
    }
    REQUIRE_THROWS_AS(denoising_loss(a, Tensor<double>::zeros({3})), std::invalid_argument);
}

TEST_CASE("sampler: oracle denoiser inverts forward diffusion in one step") {
    RandomStream rs(11);
    auto sched = make_schedule(100, ScheduleKind::linear);
    auto z0 = Tensor<double>::randn({2, 4, 4}, rs);
    auto eps = Tensor<double>::randn({2, 4, 4}, rs);
    int t = 60;
    auto zt = forward_diffuse_tensor(z0, t, eps, sched);

    DenoiseFn<double> oracle = [&](const Tensor<double>&, int) { return eps; };
    auto rec = sample<double>(oracle, sched, 1, 0.0, 0, z0.shape(),
                              SampleInit<double>{zt, t});
    for (int64_t i = 0; i < rec.numel(); ++i)
        REQUIRE(std::fabs(rec.data()[i] - z0.data()[i]) < 1e-5);
}

TEST_CASE("sampler: determinism and eta behavior") {
    auto sched = make_schedule(50, ScheduleKind::cosine);
    // fixed quasi-model: eps_hat = 0.1 * z
    DenoiseFn<double> model = [](const Tensor<double>& z, int) {
        Tensor<double> out(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i) out.data()[i] = 0.1 * z.data()[i];
        return out;
    };
    auto a = sample<double>(model, sched, 10, 0.0, 77, Shape{1, 4, 4});
    auto b = sample<double>(model, sched, 10, 0.0, 77, Shape{1, 4, 4});
    REQUIRE(a.values() == b.values());  // bit-identical

    auto c = sample<double>(model, sched, 10, 1.0, 77, Shape{1, 4, 4});
    REQUIRE(c.all_finite());
    REQUIRE(a.all_finite());
    double diff = 0;
    for (int64_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::fabs(a.data()[i] - c.data()[i]));
    REQUIRE(diff > 0.0);
}

TEST_CASE("sampler: non-finite model output raises NumericalError with step index") {
    auto sched = make_schedule(10, ScheduleKind::linear);
    DenoiseFn<double> bad = [](const Tensor<double>& z, int) {
        Tensor<double> out(z.shape());
        out.data()[0] = std::numeric_limits<double>::quiet_NaN();
        return out;
    };
    try {
        sample<double>(bad, sched, 4, 0.0, 1, Shape{1, 2, 2});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        REQUIRE(std::string(e.what()).find("step") != std::string::npos);
    }
}
