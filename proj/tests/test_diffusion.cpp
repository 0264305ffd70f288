#include "acd/diffusion.hpp"
#include "acd/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace acd;

namespace {

ImageGrid random_grid(std::mt19937& rng, int64_t h, int64_t w, float lo = 0.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> u(lo, hi);
    ImageGrid g(h, w);
    for (auto& p : g.pixels)
        p = u(rng);
    return g;
}

ImageGrid normal_grid(std::mt19937& rng, int64_t h, int64_t w) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    ImageGrid g(h, w, 0.0f, false);
    for (auto& p : g.pixels)
        p = n(rng);
    return g;
}

} // namespace

TEST_SUITE("diffusion") {

TEST_CASE("linear schedule with one step") {
    const auto s = make_schedule("linear", 1);
    REQUIRE(s.steps() == 1);
    CHECK(s.alpha(0) == 1.0);
    CHECK(s.alpha(1) == doctest::Approx(1.0 - 1e-4).epsilon(1e-15));
}

TEST_CASE("linear schedule matches an independent cumulative product") {
    const int T = 1000;
    const auto s = make_schedule("linear", T);
    long double prod = 1.0L;
    for (int t = 1; t <= T; ++t) {
        const long double beta = 1e-4L + (0.02L - 1e-4L) * (t - 1) / (T - 1);
        prod *= 1.0L - beta;
        CHECK(std::abs(s.alpha(t) - static_cast<double>(prod)) < 1e-12);
    }
    CHECK(s.alpha(T) < 1e-3);
}

TEST_CASE("schedules satisfy their invariants") {
    for (const char* name : {"linear", "cosine"}) {
        for (int T : {1, 2, 3, 10, 50, 1000, 4000}) {
            const auto s = make_schedule(name, T);
            CHECK(s.alpha(0) == 1.0);
            CHECK(s.alpha(T) > 0.0);
            CHECK(s.alpha(1) <= 1.0);
            for (int t = 2; t <= T; ++t)
                REQUIRE(s.alpha(t) < s.alpha(t - 1));
        }
    }
}

TEST_CASE("cosine schedule follows the squared cosine form") {
    const int T = 100;
    const auto s = make_schedule("cosine", T);
    auto f = [&](int t) {
        const double c = std::cos((t / double(T) + 0.008) / 1.008 * M_PI / 2);
        return c * c;
    };
    for (int t = 1; t < T; ++t)
        CHECK(s.alpha(t) == doctest::Approx(f(t) / f(0)).epsilon(1e-9));
}

TEST_CASE("schedule errors") {
    CHECK_THROWS_AS(make_schedule("quadratic", 10), UsageError);
    CHECK_THROWS_AS(make_schedule("linear", 0), UsageError);
    CHECK_THROWS_AS(NoiseSchedule("bad", {1.0, 0.5, 0.6}), UsageError);
    CHECK_THROWS_AS(NoiseSchedule("bad", {0.9, 0.5}), UsageError);
    CHECK_THROWS_AS(NoiseSchedule("bad", {1.0, 0.0}), UsageError);
}

TEST_CASE("forward diffusion closed forms") {
    std::mt19937 rng(1);
    const auto x0 = random_grid(rng, 8, 8);
    const auto eps = normal_grid(rng, 8, 8);
    const auto s = make_schedule("linear", 10);

    const auto same = forward_diffuse(x0, 0, eps, s);
    CHECK(same.pixels == x0.pixels);

    const NoiseSchedule quarter("quarter", {1.0, 0.25});
    const auto out = forward_diffuse(ImageGrid(4, 4, 1.0f), 1, ImageGrid(4, 4, 1.0f), quarter);
    for (float v : out.pixels)
        CHECK(v == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-6));
    CHECK_FALSE(out.clean);

    const NoiseSchedule vanishing("vanishing", {1.0, 1e-30});
    const auto pure = forward_diffuse(x0, 1, eps, vanishing);
    for (size_t i = 0; i < pure.pixels.size(); ++i)
        CHECK(pure.pixels[i] == doctest::Approx(eps.pixels[i]).epsilon(1e-6));

    CHECK_THROWS_AS(forward_diffuse(x0, 11, eps, s), UsageError);
    CHECK_THROWS_AS(forward_diffuse(x0, 1, ImageGrid(4, 8), s), UsageError);
}

TEST_CASE("forward diffusion is linear in (x0, eps)") {
    std::mt19937 rng(2);
    const auto s = make_schedule("cosine", 50);
    auto x0 = torch::rand({3, 1, 8, 8}, torch::kDouble);
    auto eps = torch::randn({3, 1, 8, 8}, torch::kDouble);
    for (double a : {-2.0, 0.5, 3.0}) {
        auto lhs = forward_diffuse(a * x0, 17, a * eps, s);
        auto rhs = a * forward_diffuse(x0, 17, eps, s);
        CHECK((lhs - rhs).abs().max().item<double>() < 1e-12);
    }
}

TEST_CASE("batched forward diffusion uses one step per sample") {
    const auto s = make_schedule("linear", 100);
    auto x0 = torch::rand({4, 1, 8, 8});
    auto eps = torch::randn({4, 1, 8, 8});
    auto t = torch::tensor({0, 5, 50, 100}, torch::kLong);
    auto batched = forward_diffuse(x0, t, eps, s);
    for (int i = 0; i < 4; ++i) {
        auto single = forward_diffuse(x0[i], static_cast<int>(t[i].item<int64_t>()), eps[i], s);
        CHECK((batched[i] - single).abs().max().item<float>() < 1e-6f);
    }
}

TEST_CASE("reverse step closed forms") {
    std::mt19937 rng(3);
    const auto s = make_schedule("linear", 100);
    const auto x_t = normal_grid(rng, 8, 8);
    const auto x0_hat = random_grid(rng, 8, 8);

    const auto to_zero = ddim_reverse_step(x_t, x0_hat, {40, 0}, s);
    CHECK(to_zero.pixels == x0_hat.pixels);
    CHECK(to_zero.clean);

    const auto zero_pred = ddim_reverse_step(x_t, ImageGrid(8, 8, 0.0f), {40, 25}, s);
    const double factor = std::sqrt((1 - s.alpha(25)) / (1 - s.alpha(40)));
    for (size_t i = 0; i < x_t.pixels.size(); ++i)
        CHECK(zero_pred.pixels[i] == doctest::Approx(factor * x_t.pixels[i]).epsilon(1e-6));
}

TEST_CASE("reverse step with the true x0 lands on the forward marginal") {
    std::mt19937 rng(4);
    const auto s = make_schedule("cosine", 200);
    for (int trial = 0; trial < 10; ++trial) {
        auto x0 = torch::rand({2, 1, 8, 8}, torch::kDouble);
        auto eps = torch::randn({2, 1, 8, 8}, torch::kDouble);
        const int t_from = 1 + static_cast<int>(rng() % 200);
        const int t_to = static_cast<int>(rng() % static_cast<unsigned>(t_from));
        auto x_t = forward_diffuse(x0, t_from, eps, s);
        auto step = ddim_reverse_step(x_t, x0, {t_from, t_to}, s);
        auto expected = std::sqrt(s.alpha(t_to)) * x0 + std::sqrt(1 - s.alpha(t_to)) * eps;
        CHECK((step - expected).abs().max().item<double>() < 1e-10);
    }
}

TEST_CASE("reverse step rejects invalid index pairs") {
    const auto s = make_schedule("linear", 10);
    ImageGrid a(4, 4), b(4, 4);
    CHECK_THROWS_AS(ddim_reverse_step(a, b, {0, 0}, s), UsageError);
    CHECK_THROWS_AS(ddim_reverse_step(a, b, {5, 5}, s), UsageError);
    CHECK_THROWS_AS(ddim_reverse_step(a, b, {11, 3}, s), UsageError);
    CHECK_THROWS_AS(ddim_reverse_step(a, b, {5, -1}, s), UsageError);
    CHECK_THROWS_AS(ddim_reverse_step(a, ImageGrid(4, 5), {5, 1}, s), UsageError);
}

TEST_CASE("full oracle chain recovers x0") {
    std::mt19937 rng(5);
    for (const char* name : {"linear", "cosine"}) {
        const auto s = make_schedule(name, 1000);
        const auto x0 = random_grid(rng, 16, 16);
        auto x = normal_grid(rng, 16, 16);
        for (int t = 1000; t >= 1; --t)
            x = ddim_reverse_step(x, x0, {t, t - 1}, s);
        double worst = 0;
        for (size_t i = 0; i < x.pixels.size(); ++i)
            worst = std::max(worst, double(std::abs(x.pixels[i] - x0.pixels[i])));
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("inference subsequences") {
    for (int T : {1, 2, 7, 10, 100, 1000}) {
        for (int T_s = 1; T_s <= std::min(T, 120); ++T_s) {
            const auto steps = inference_timesteps(T, T_s);
            REQUIRE(steps.size() == static_cast<size_t>(T_s) + 1);
            CHECK(steps.front() == T);
            CHECK(steps.back() == 0);
            for (size_t k = 1; k < steps.size(); ++k)
                REQUIRE(steps[k] < steps[k - 1]);
        }
    }
    CHECK(inference_timesteps(1000, 1) == std::vector<int>{1000, 0});
    CHECK(inference_timesteps(10, 5) == std::vector<int>{10, 8, 6, 4, 2, 0});
    CHECK_THROWS_AS(inference_timesteps(10, 0), UsageError);
    CHECK_THROWS_AS(inference_timesteps(10, 11), UsageError);
}

TEST_CASE("diffusion operations are bitwise deterministic") {
    std::mt19937 rng(6);
    const auto s = make_schedule("linear", 100);
    const auto x0 = random_grid(rng, 8, 8);
    const auto eps = normal_grid(rng, 8, 8);
    CHECK(forward_diffuse(x0, 33, eps, s).pixels == forward_diffuse(x0, 33, eps, s).pixels);
    CHECK(ddim_reverse_step(eps, x0, {33, 12}, s).pixels == ddim_reverse_step(eps, x0, {33, 12}, s).pixels);
}

}
