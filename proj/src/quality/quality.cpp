#include "petsynth/quality/quality.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "petsynth/common/error.hpp"
#include "petsynth/kernels/conv.hpp"

namespace petsynth::quality {

namespace {

void require_same(const nd::Tensor &x, const nd::Tensor &y, const char *op) {
    if (x.shape() != y.shape())
        throw DomainError(std::string(op) + ": shape mismatch " + nd::shape_str(x.shape()) + " vs " +
                          nd::shape_str(y.shape()));
}

std::array<std::int64_t, 3> dims3(const nd::Tensor &t) {
    std::array<std::int64_t, 3> d{1, 1, 1};
    const auto &s = t.shape();
    std::vector<std::int64_t> core;
    for (auto v : s)
        if (v != 1 || !core.empty()) core.push_back(v);
    if (core.size() > 3) throw DomainError("ssim: arrays of rank > 3 are not supported");
    std::copy(core.begin(), core.end(), d.begin() + static_cast<long>(3 - core.size()));
    return d;
}

std::vector<double> window_taps(std::int64_t len, double sigma) {
    std::vector<double> w(static_cast<size_t>(len));
    const double c = (len - 1) / 2.0;
    double sum = 0.0;
    for (std::int64_t i = 0; i < len; ++i) {
        w[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += w[i];
    }
    for (auto &v : w) v /= sum;
    return w;
}

// "Valid" separable correlation along one axis of a (d0, d1, d2) buffer, x fastest at axis 2.
std::vector<double> filter_axis(const std::vector<double> &in, std::array<std::int64_t, 3> &d, int axis,
                                const std::vector<double> &k) {
    auto od = d;
    od[axis] = d[axis] - static_cast<std::int64_t>(k.size()) + 1;
    std::vector<double> out(static_cast<size_t>(od[0] * od[1] * od[2]));
    const std::int64_t in_stride = axis == 2 ? 1 : axis == 1 ? d[2] : d[1] * d[2];
    for (std::int64_t a = 0; a < od[0]; ++a)
        for (std::int64_t b = 0; b < od[1]; ++b)
            for (std::int64_t c = 0; c < od[2]; ++c) {
                const std::int64_t base = (a * d[1] + b) * d[2] + c;
                double acc = 0.0;
                for (size_t t = 0; t < k.size(); ++t) acc += k[t] * in[static_cast<size_t>(base + t * in_stride)];
                out[static_cast<size_t>((a * od[1] + b) * od[2] + c)] = acc;
            }
    d = od;
    return out;
}

} // namespace

nd::Tensor as_tensor(const vol::Volume3D &v) {
    v.validate();
    return nd::Tensor({v.dims[2], v.dims[1], v.dims[0]}, v.data);
}

double mse(const nd::Tensor &x, const nd::Tensor &y) {
    require_same(x, y, "mse");
    if (x.numel() == 0) throw DomainError("mse: empty input");
    double s = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(x[i]) - y[i];
        s += d * d;
    }
    return s / static_cast<double>(x.numel());
}

double psnr(const nd::Tensor &x, const nd::Tensor &y, double max_x) {
    if (!(max_x > 0.0)) throw DomainError("psnr: max_x must be positive");
    const double m = mse(x, y);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(max_x / std::sqrt(m));
}

double ssim(const nd::Tensor &x, const nd::Tensor &y, const SsimOptions &opt) {
    require_same(x, y, "ssim");
    const double c1 = (0.01 * opt.dynamic_range) * (0.01 * opt.dynamic_range);
    const double c2 = (0.03 * opt.dynamic_range) * (0.03 * opt.dynamic_range);
    const auto n = x.numel();
    auto formula = [&](double mx, double my, double vx, double vy, double cxy) {
        return ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    };
    if (opt.global) {
        double mx = 0.0, my = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            mx += x[i];
            my += y[i];
        }
        mx /= n;
        my /= n;
        double vx = 0.0, vy = 0.0, cxy = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            vx += (x[i] - mx) * (x[i] - mx);
            vy += (y[i] - my) * (y[i] - my);
            cxy += (x[i] - mx) * (y[i] - my);
        }
        return formula(mx, my, vx / n, vy / n, cxy / n);
    }
    const auto d = dims3(x);
    std::array<std::vector<double>, 5> fields;
    for (auto &f : fields) f.resize(static_cast<size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double a = x[i], b = y[i];
        fields[0][i] = a;
        fields[1][i] = b;
        fields[2][i] = a * a;
        fields[3][i] = b * b;
        fields[4][i] = a * b;
    }
    std::array<std::int64_t, 3> od = d;
    for (auto &f : fields) {
        auto cur = d;
        for (int a = 0; a < 3; ++a) {
            if (d[a] == 1) continue;
            f = filter_axis(f, cur, a, window_taps(std::min<std::int64_t>(opt.window, d[a]), opt.sigma));
        }
        od = cur;
    }
    const std::int64_t m = od[0] * od[1] * od[2];
    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        const double mx = fields[0][i], my = fields[1][i];
        const double vx = fields[2][i] - mx * mx;
        const double vy = fields[3][i] - my * my;
        const double cxy = fields[4][i] - mx * my;
        total += formula(mx, my, vx, vy, cxy);
    }
    return total / static_cast<double>(m);
}

void FeatureMetricSpec::initialize() {
    if (channels.size() != strides.size()) throw DomainError("feature metric: channels/strides length mismatch");
    layers.clear();
    std::mt19937_64 rng(seed);
    int cin = 1;
    for (size_t l = 0; l < channels.size(); ++l) {
        Layer L{cin, channels[l], strides[l], {}, {}};
        std::normal_distribution<float> normal(0.0f, static_cast<float>(std::sqrt(2.0 / (cin * 9))));
        L.w.resize(static_cast<size_t>(L.out_channels) * cin * 9);
        for (auto &v : L.w) v = normal(rng);
        L.b.assign(static_cast<size_t>(L.out_channels), 0.0f);
        layers.push_back(std::move(L));
        cin = channels[l];
    }
    if (!layer_weights.empty()) {
        if (layer_weights.size() != layers.size()) throw DomainError("feature metric: need one weight vector per layer");
        for (size_t l = 0; l < layers.size(); ++l)
            if (static_cast<int>(layer_weights[l].size()) != layers[l].out_channels)
                throw DomainError("feature metric: layer weight length must equal channel count");
    }
}

std::vector<nd::Tensor> extract_features(const FeatureMetricSpec &spec, const nd::Tensor &slices) {
    if (!spec.initialized()) throw DomainError("feature metric used before initialize()");
    if (slices.rank() != 4 || slices.dim(1) != 1) throw DomainError("extract_features: expected (N, 1, H, W) input");
    std::vector<nd::Tensor> out;
    const nd::Tensor *cur = &slices;
    for (const auto &L : spec.layers) {
        const auto g = kernels::ConvGeometry::make(cur->dim(0), L.in_channels, L.out_channels,
                                                   {1, cur->dim(2), cur->dim(3)}, {1, 3, 3}, {1, L.stride, L.stride},
                                                   {0, 1, 1});
        nd::Tensor y({g.batch, g.out_channels, g.out_size[1], g.out_size[2]});
        kernels::conv_forward(g, cur->data(), L.w.data(), L.b.data(), y.data());
        for (auto &v : y.values()) v = std::max(v, 0.0f);
        out.push_back(std::move(y));
        cur = &out.back();
    }
    return out;
}

double feature_distance(const std::vector<nd::Tensor> &fx, const std::vector<nd::Tensor> &fy,
                        const std::vector<std::vector<float>> &weights) {
    if (fx.size() != fy.size()) throw DomainError("feature_distance: layer count mismatch");
    double total = 0.0;
    for (size_t l = 0; l < fx.size(); ++l) {
        require_same(fx[l], fy[l], "feature_distance");
        const auto C = fx[l].dim(0);
        const auto hw = fx[l].numel() / C;
        const std::vector<float> *w = weights.empty() ? nullptr : &weights.at(l);
        double layer = 0.0;
        for (std::int64_t p = 0; p < hw; ++p) {
            double nx = 0.0, ny = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                nx += static_cast<double>(fx[l][c * hw + p]) * fx[l][c * hw + p];
                ny += static_cast<double>(fy[l][c * hw + p]) * fy[l][c * hw + p];
            }
            nx = std::sqrt(nx) + 1e-10;
            ny = std::sqrt(ny) + 1e-10;
            for (std::int64_t c = 0; c < C; ++c) {
                const double wc = w ? (*w)[static_cast<size_t>(c)] : 1.0;
                const double diff = wc * (fy[l][c * hw + p] / ny - fx[l][c * hw + p] / nx);
                layer += diff * diff;
            }
        }
        total += layer / static_cast<double>(hw);
    }
    return total;
}

double lpips(const nd::Tensor &x, const nd::Tensor &y, const FeatureMetricSpec &spec) {
    require_same(x, y, "lpips");
    if (x.rank() != 2 && x.rank() != 3) throw DomainError("lpips: expected (H, W) or (D, H, W) input");
    const std::int64_t depth = x.rank() == 3 ? x.dim(0) : 1;
    const std::int64_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    const std::int64_t plane = H * W;
    constexpr std::int64_t kChunk = 16;
    double total = 0.0;
    for (std::int64_t z0 = 0; z0 < depth; z0 += kChunk) {
        const std::int64_t nz = std::min(kChunk, depth - z0);
        nd::Tensor bx({nz, 1, H, W}), by({nz, 1, H, W});
        for (std::int64_t i = 0; i < nz * plane; ++i) {
            bx[i] = 2.0f * x[z0 * plane + i] - 1.0f;
            by[i] = 2.0f * y[z0 * plane + i] - 1.0f;
        }
        const auto fx = extract_features(spec, bx);
        const auto fy = extract_features(spec, by);
        for (std::int64_t s = 0; s < nz; ++s) {
            std::vector<nd::Tensor> sx, sy;
            for (size_t l = 0; l < fx.size(); ++l) {
                const auto C = fx[l].dim(1), h = fx[l].dim(2), w = fx[l].dim(3);
                const auto n = C * h * w;
                sx.emplace_back(nd::Shape{C, h, w},
                                std::vector<float>(fx[l].data() + s * n, fx[l].data() + (s + 1) * n));
                sy.emplace_back(nd::Shape{C, h, w},
                                std::vector<float>(fy[l].data() + s * n, fy[l].data() + (s + 1) * n));
            }
            total += feature_distance(sx, sy, spec.layer_weights);
        }
    }
    return total / static_cast<double>(depth);
}

double wilcoxon_exact_p(const std::vector<double> &ranks, double w_plus) {
    // Doubled midranks are integers, so the null distribution is a subset-sum count.
    std::vector<int> r2;
    int total = 0;
    for (double r : ranks) {
        r2.push_back(static_cast<int>(std::lround(2.0 * r)));
        total += r2.back();
    }
    std::vector<double> count(static_cast<size_t>(total + 1), 0.0);
    count[0] = 1.0;
    int reach = 0;
    for (int r : r2) {
        for (int s = reach; s >= 0; --s)
            if (count[s] != 0.0) count[s + r] += count[s];
        reach += r;
    }
    const double all = std::ldexp(1.0, static_cast<int>(ranks.size()));
    const int w2 = static_cast<int>(std::lround(2.0 * w_plus));
    double lower = 0.0, upper = 0.0;
    for (int s = 0; s <= total; ++s) {
        if (s <= w2) lower += count[s];
        if (s >= w2) upper += count[s];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double> &a, const std::vector<double> &b) {
    if (a.size() != b.size()) throw DomainError("wilcoxon: paired samples differ in length");
    std::vector<double> d;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) d.push_back(a[i] - b[i]);
    if (d.empty()) throw DomainError("degenerate paired sample");
    const size_t n = d.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t i, size_t j) { return std::fabs(d[i]) < std::fabs(d[j]); });
    std::vector<double> rank(n);
    double tie_term = 0.0;
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j + 1 < n && std::fabs(d[order[j + 1]]) == std::fabs(d[order[i]])) ++j;
        const double mid = (i + j + 2) / 2.0;
        for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }
    WilcoxonResult res;
    res.n = static_cast<int>(n);
    for (size_t i = 0; i < n; ++i)
        if (d[i] > 0) res.statistic += rank[i];
    if (res.n <= kWilcoxonExactLimit) {
        res.exact = true;
        res.p_value = wilcoxon_exact_p(rank, res.statistic);
        return res;
    }
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) {
        res.p_value = 1.0;
        return res;
    }
    const double z = std::max(0.0, std::fabs(res.statistic - mean) - 0.5) / std::sqrt(var);
    res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    return res;
}

Summary summarize(const std::vector<double> &v) {
    Summary s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double acc = 0.0;
        for (double x : v) acc += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(acc / static_cast<double>(v.size() - 1));
    }
    return s;
}

namespace {
template <class F>
Summary column(const std::vector<MetricEntry> &e, F f) {
    std::vector<double> v;
    for (const auto &x : e) v.push_back(f(x));
    return summarize(v);
}
} // namespace

Summary MetricReport::mse() const { return column(entries, [](const MetricEntry &e) { return e.mse; }); }
Summary MetricReport::psnr() const { return column(entries, [](const MetricEntry &e) { return e.psnr; }); }
Summary MetricReport::ssim() const { return column(entries, [](const MetricEntry &e) { return e.ssim; }); }
Summary MetricReport::lpips() const { return column(entries, [](const MetricEntry &e) { return e.lpips; }); }

MetricEntry evaluate_pair(const std::string &name, const vol::Volume3D &pred, const vol::Volume3D &truth,
                          const FeatureMetricSpec &spec, const SsimOptions &ssim_opt) {
    if (pred.dims != truth.dims) throw DomainError("metrics: volume dims differ for '" + name + "'");
    const auto x = as_tensor(pred);
    const auto y = as_tensor(truth);
    MetricEntry e;
    e.name = name;
    e.mse = mse(x, y);
    e.psnr = psnr(x, y, ssim_opt.dynamic_range);
    e.ssim = ssim(x, y, ssim_opt);
    e.lpips = lpips(x, y, spec);
    return e;
}

} // namespace petsynth::quality
