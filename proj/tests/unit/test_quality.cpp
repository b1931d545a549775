#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"

#include "petsynth/common/error.hpp"
#include "petsynth/quality/quality.hpp"

using namespace petsynth;
using namespace petsynth::quality;
using namespace petsynth::testing;

namespace {

nd::Tensor random_image(nd::Shape s, std::uint64_t seed) {
    nd::Tensor t(std::move(s));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto &v : t.values()) v = u(rng);
    return t;
}


} // namespace

TEST_CASE("mse and psnr") {
    auto x = random_image({5, 7}, 1);
    CHECK(mse(x, x) == 0.0);
    nd::Tensor y = x;
    for (auto &v : y.values()) v += 2.0f;
    CHECK(mse(y, x) == doctest::Approx(4.0).epsilon(1e-6));

    auto z = random_image({3, 4, 5}, 2);
    auto w = random_image({3, 4, 5}, 3);
    double naive = 0;
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 4; ++b)
            for (int c = 0; c < 5; ++c) {
                const double d = static_cast<double>(z[(a * 4 + b) * 5 + c]) - w[(a * 4 + b) * 5 + c];
                naive += d * d;
            }
    CHECK(mse(z, w) == doctest::Approx(naive / 60.0).epsilon(1e-12));
    CHECK_THROWS_AS(mse(x, z), DomainError);

    CHECK(std::isinf(psnr(x, x)));
    nd::Tensor zero({100}, 0.0f), tenth({100}, 0.1f);
    CHECK(psnr(tenth, zero, 1.0) == doctest::Approx(20.0).epsilon(1e-6));
    CHECK(psnr(z, w, 2.0) - psnr(z, w, 1.0) == doctest::Approx(20.0 * std::log10(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(psnr(z, w, 0.0), DomainError);

    double prev = std::numeric_limits<double>::infinity();
    for (int k = 1; k < 10; ++k) {
        nd::Tensor off({10}, 0.05f * k);
        const double p = psnr(off, nd::Tensor({10}, 0.0f));
        CHECK(p < prev);
        prev = p;
    }
}

TEST_CASE("ssim") {
    auto x = random_image({20, 24}, 4);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    auto v = random_image({9, 14, 13}, 5);
    CHECK(ssim(v, v) == doctest::Approx(1.0).epsilon(1e-12));

    nd::Tensor cb({16, 16}), inv({16, 16});
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) {
            cb[r * 16 + c] = static_cast<float>((r + c) % 2);
            inv[r * 16 + c] = 1.0f - cb[r * 16 + c];
        }
    const double neg = ssim(cb, inv);
    CHECK(neg < -0.5);
    CHECK(neg == doctest::Approx(ssim_oracle_2d(cb, inv, 11, 1.5)).epsilon(1e-9));

    auto y = random_image({20, 24}, 6);
    for (auto &t : y.values()) t = 0.5f * t + 0.3f;
    CHECK(ssim(x, y) == doctest::Approx(ssim_oracle_2d(x, y, 11, 1.5)).epsilon(1e-9));
    CHECK(std::fabs(ssim(x, y) - ssim(y, x)) < 1e-7);

    // Short axis: the window shrinks to the axis length.
    auto s1 = random_image({6, 30}, 7), s2 = random_image({6, 30}, 8);
    CHECK(ssim(s1, s2) == doctest::Approx(ssim_oracle_2d(s1, s2, 11, 1.5)).epsilon(1e-9));

    SsimOptions global;
    global.global = true;
    for (double a : {0.2, 0.5, 0.9})
        for (double b : {0.1, 0.7}) {
            nd::Tensor ca({8, 8}, static_cast<float>(a)), cbv({8, 8}, static_cast<float>(b));
            const double fa = static_cast<float>(a), fb = static_cast<float>(b);
            const double c1 = 1e-4, c2 = 9e-4;
            const double want = (2 * fa * fb + c1) * c2 / ((fa * fa + fb * fb + c1) * c2);
            CHECK(ssim(ca, cbv, global) == doctest::Approx(want).epsilon(1e-9));
        }
}

TEST_CASE("perceptual feature distance") {
    FeatureMetricSpec spec;
    spec.initialize();
    auto a = random_image({6, 20, 20}, 9);
    auto b = random_image({6, 20, 20}, 10);
    CHECK(lpips(a, a, spec) == 0.0);
    const double ab = lpips(a, b, spec);
    CHECK(ab > 0.0);
    CHECK(ab == doctest::Approx(lpips(b, a, spec)).epsilon(1e-12));

    FeatureMetricSpec again;
    again.initialize();
    CHECK(lpips(a, b, again) == ab);

    FeatureMetricSpec zero;
    for (int c : zero.channels) zero.layer_weights.emplace_back(static_cast<size_t>(c), 0.0f);
    zero.initialize();
    CHECK(lpips(a, b, zero) == 0.0);

    // (3,4)/5 vs (4,3)/5 -> squared distance 0.2^2 + 0.2^2.
    std::vector<nd::Tensor> fx{nd::Tensor({2, 1, 1}, {3.0f, 4.0f})}, fy{nd::Tensor({2, 1, 1}, {4.0f, 3.0f})};
    CHECK(feature_distance(fx, fy, {}) == doctest::Approx(0.08).epsilon(1e-6));
    CHECK(feature_distance(fx, fy, {{1.0f, 1.0f}}) == doctest::Approx(0.08).epsilon(1e-6));
    CHECK(feature_distance(fx, fy, {{0.0f, 0.0f}}) == 0.0);

    // Single images are accepted too.
    auto i1 = random_image({17, 19}, 11);
    CHECK(lpips(i1, i1, spec) == 0.0);
}

TEST_CASE("wilcoxon signed-rank test") {
    std::vector<double> b{1, 2, 3, 4, 5, 6}, a;
    for (size_t i = 0; i < b.size(); ++i) a.push_back(b[i] + 0.1 * (i + 1));
    auto r = wilcoxon_signed_rank(a, b);
    CHECK(r.statistic == 21.0);
    CHECK(r.exact);
    CHECK(r.p_value == doctest::Approx(0.03125).epsilon(1e-12));
    auto r2 = wilcoxon_signed_rank(b, a);
    CHECK(r2.statistic == 0.0);
    CHECK(r2.p_value == doctest::Approx(0.03125).epsilon(1e-12));

    std::vector<double> m1{1, 2, 3, 4}, m2{2, 1, 4, 3};
    CHECK(wilcoxon_signed_rank(m1, m2).p_value == 1.0);
    CHECK_THROWS_WITH_AS(wilcoxon_signed_rank(m1, m1), "degenerate paired sample", DomainError);

    // Exact p vs brute-force enumeration, with ties.
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 3 + trial % 10;
        std::vector<double> x(n), y(n);
        std::uniform_int_distribution<int> u(-4, 4);
        for (int i = 0; i < n; ++i) {
            x[i] = u(rng);
            y[i] = u(rng);
        }
        std::vector<double> d;
        for (int i = 0; i < n; ++i)
            if (x[i] != y[i]) d.push_back(x[i] - y[i]);
        if (d.empty()) continue;
        auto res = wilcoxon_signed_rank(x, y);
        // Midranks computed independently.
        std::vector<double> ranks(d.size());
        double w = 0;
        for (size_t i = 0; i < d.size(); ++i) {
            int less = 0, eq = 0;
            for (size_t j = 0; j < d.size(); ++j) {
                if (std::fabs(d[j]) < std::fabs(d[i])) ++less;
                if (std::fabs(d[j]) == std::fabs(d[i])) ++eq;
            }
            ranks[i] = less + (eq + 1) / 2.0;
            if (d[i] > 0) w += ranks[i];
        }
        CHECK(res.statistic == doctest::Approx(w));
        CHECK(res.p_value == doctest::Approx(wilcoxon_brute(ranks, w)).epsilon(1e-12));
        CHECK(res.p_value > 0.0);
        CHECK(res.p_value <= 1.0);

        // Shifting both members of each pair leaves the test unchanged.
        auto xs = x, ys = y;
        for (int i = 0; i < n; ++i) {
            xs[i] += 7.0 * i;
            ys[i] += 7.0 * i;
        }
        CHECK(wilcoxon_signed_rank(xs, ys).statistic == res.statistic);
    }

    // n = 35: normal approximation vs exact distribution.
    for (int trial = 0; trial < 20; ++trial) {
        std::normal_distribution<double> nd(0.2, 1.0);
        std::vector<double> x(35), y(35, 0.0);
        for (auto &v : x) v = nd(rng);
        auto res = wilcoxon_signed_rank(x, y);
        CHECK_FALSE(res.exact);
        std::vector<double> ranks;
        std::vector<double> ax;
        for (double v : x) ax.push_back(std::fabs(v));
        for (double v : ax) {
            int less = 0;
            for (double u2 : ax)
                if (u2 < v) ++less;
            ranks.push_back(less + 1);
        }
        CHECK(std::fabs(res.p_value - wilcoxon_exact_p(ranks, res.statistic)) < 0.01);
    }
}

TEST_CASE("metric report aggregates") {
    MetricReport rep;
    rep.entries = {{"a", 1, 10, 0.5, 0.1}, {"b", 3, 20, 0.7, 0.3}};
    CHECK(rep.mse().mean == 2.0);
    CHECK(rep.mse().std == doctest::Approx(std::sqrt(2.0)));
    CHECK(rep.psnr().mean == 15.0);
    CHECK(rep.ssim().mean == doctest::Approx(0.6));
    CHECK(rep.lpips().std == doctest::Approx(std::sqrt(0.02)));
    CHECK(summarize({4.0}).std == 0.0);
}
