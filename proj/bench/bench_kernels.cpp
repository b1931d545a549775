// Serial reference vs OpenMP implementations of the hot kernels.
// Usage: petsynth_bench [--reps N] [--threads T]

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "petsynth/anomaly/anomaly.hpp"
#include "petsynth/kernels/conv.hpp"
#include "petsynth/ocsvm/ocsvm.hpp"
#include "petsynth/phantom/phantom.hpp"
#include "petsynth/uad/uad.hpp"

using namespace petsynth;

namespace {

double best_ms(int reps, const std::function<void()> &f) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

double max_diff(const std::vector<float> &a, const std::vector<float> &b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::fabs(a[i] - b[i])));
    return m;
}

void row(const std::string &name, double serial, double parallel, double diff) {
    std::printf("%-34s %11.2f %11.2f %8.2fx %12.3g\n", name.c_str(), serial, parallel, serial / parallel, diff);
}

std::vector<float> random_vec(size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> v(n);
    for (auto &x : v) x = g(rng);
    return v;
}

void bench_conv(const std::string &name, const kernels::ConvGeometry &g, int reps) {
    const auto x = random_vec(static_cast<size_t>(g.batch * g.in_channels * g.in_plane()), 1);
    const auto w = random_vec(static_cast<size_t>(g.weight_count()), 2);
    const auto b = random_vec(static_cast<size_t>(g.out_channels), 3);
    const size_t ny = static_cast<size_t>(g.batch * g.out_channels * g.out_plane());
    std::vector<float> y1(ny), y2(ny);
    const double s = best_ms(reps, [&] { kernels::reference::conv_forward(g, x.data(), w.data(), b.data(), y1.data()); });
    const double p = best_ms(reps, [&] { kernels::conv_forward(g, x.data(), w.data(), b.data(), y2.data()); });
    row(name + " fwd", s, p, max_diff(y1, y2));

    const auto dy = random_vec(ny, 4);
    std::vector<float> dw1(w.size()), dw2(w.size()), db1(b.size()), db2(b.size());
    const double sb = best_ms(reps, [&] {
        std::fill(dw1.begin(), dw1.end(), 0.0f);
        std::fill(db1.begin(), db1.end(), 0.0f);
        kernels::reference::conv_backward_params(g, x.data(), dy.data(), dw1.data(), db1.data());
    });
    const double pb = best_ms(reps, [&] {
        std::fill(dw2.begin(), dw2.end(), 0.0f);
        std::fill(db2.begin(), db2.end(), 0.0f);
        kernels::conv_backward_params(g, x.data(), dy.data(), dw2.data(), db2.data());
    });
    row(name + " dW", sb, pb, max_diff(dw1, dw2));
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Serial reference vs parallel kernels"};
    int reps = 3, threads = 0;
    app.add_option("--reps", reps, "Repetitions (best time reported)")->check(CLI::PositiveNumber);
    app.add_option("--threads", threads, "OpenMP threads (0 = default)")->check(CLI::NonNegativeNumber);
    CLI11_PARSE(app, argc, argv);
    if (threads > 0) omp_set_num_threads(threads);

    std::printf("threads: %d\n", omp_get_max_threads());
    std::printf("%-34s %11s %11s %9s %12s\n", "kernel", "serial ms", "parallel ms", "speedup", "max |diff|");

    bench_conv("conv3d 16->32 16^3 k3", kernels::ConvGeometry::make(2, 16, 32, {16, 16, 16}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}), reps);
    bench_conv("conv2d uad 2->32 15^2 s2 b256",
               kernels::ConvGeometry::make(256, 2, 32, {1, 15, 15}, {1, 3, 3}, {1, 2, 2}, {0, 0, 0}), reps);

    phantom::PhantomSpec ps;
    ps.dims = {32, 32, 24};
    std::vector<uad::LatentMap> maps;
    const uad::SiameseAE model(3);
    uad::LatentMap zs, zp;
    for (int s = 0; s < 8; ++s) {
        ps.seed = static_cast<std::uint64_t>(s + 1);
        const auto o = phantom::generate(ps);
        const auto t1 = uad::normalize_clipped(o.t1), pet = uad::normalize_clipped(o.pet);
        if (s == 0) {
            const double se = best_ms(1, [&] { zs = uad::encode_volume_serial(model, t1, pet); });
            const double pe = best_ms(1, [&] { zp = uad::encode_volume(model, t1, pet); });
            row("encode_volume", se, pe, max_diff(zs.z, zp.z));
        }
        maps.push_back(uad::encode_volume(model, t1, pet));
    }

    ocsvm::FitOptions opt;
    opt.nu = 0.2;
    ocsvm::ModelBank bs, bp;
    const double sf = best_ms(reps, [&] { bs = ocsvm::fit_bank_serial(maps, opt); });
    const double pf = best_ms(reps, [&] { bp = ocsvm::fit_bank(maps, opt); });
    double rho = 0.0;
    for (size_t i = 0; i < bs.size(); ++i) rho = std::max(rho, std::fabs(bs.models[i].rho - bp.models[i].rho));
    row("ocsvm fit_bank", sf, pf, rho);

    vol::Volume3D ss, sp;
    const double ssc = best_ms(reps, [&] { ss = anomaly::score_map_serial(bp, maps[0]); });
    const double psc = best_ms(reps, [&] { sp = anomaly::score_map(bp, maps[0]); });
    row("score_map", ssc, psc, max_diff(ss.data, sp.data));

    const auto stats = anomaly::fit_voxel_stats(maps);
    double ms = 0.0, mp = 0.0;
    const double smd = best_ms(reps, [&] { ms = anomaly::mahalanobis_raw_serial(stats, maps[1]); });
    const double pmd = best_ms(reps, [&] { mp = anomaly::mahalanobis_raw(stats, maps[1]); });
    row("mahalanobis_raw", smd, pmd, std::fabs(ms - mp));
    return 0;
}
