#include "petsynth/volume/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "petsynth/common/binio.hpp"
#include "petsynth/common/error.hpp"

namespace petsynth::vol {

Volume3D::Volume3D(Dims d, Spacing s, float fill) : dims(d), spacing(s) {
    for (int v : d)
        if (v <= 0) throw DomainError("volume dims must be positive");
    data.assign(static_cast<size_t>(size()), fill);
}

void Volume3D::validate() const {
    if (static_cast<std::int64_t>(data.size()) != size()) throw DomainError("volume data length does not match dims");
    if (mask && static_cast<std::int64_t>(mask->size()) != size())
        throw DomainError("volume mask length does not match dims");
}

Volume3D load_volume(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open volume: " + path.string());
    binio::Reader r(is, path.string());
    r.expect_magic("RV01");
    Volume3D v;
    std::uint64_t n = 1;
    for (int a = 0; a < 3; ++a) {
        const auto d = r.get<std::uint32_t>();
        if (d == 0 || d > (1u << 16)) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": dim overflow");
        n *= d;
        v.dims[a] = static_cast<int>(d);
    }
    if (n > (1ull << 31)) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": dim overflow");
    for (int a = 0; a < 3; ++a) v.spacing[a] = r.get<float>();
    const auto flags = r.get<std::uint8_t>();
    if (flags & ~1u) throw FormatError(FormatErrorKind::Malformed, path.string() + ": unknown flag bits");
    v.data.resize(n);
    r.get_into(std::span<float>(v.data));
    if (flags & 1u) {
        std::vector<std::uint8_t> m(n);
        r.get_into(std::span<std::uint8_t>(m));
        for (auto &b : m)
            if (b > 1) throw FormatError(FormatErrorKind::Malformed, path.string() + ": mask byte not 0/1");
        v.mask = std::move(m);
    }
    return v;
}

void store_volume(const Volume3D &vol, const std::filesystem::path &path) {
    vol.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open volume for writing: " + path.string());
    binio::Writer w(os);
    w.magic("RV01");
    for (int d : vol.dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float s : vol.spacing) w.put<float>(s);
    w.put<std::uint8_t>(vol.mask ? 1 : 0);
    w.put_span<float>(vol.data);
    if (vol.mask) w.put_span<std::uint8_t>(*vol.mask);
    if (!w.ok()) throw IoError("failed writing volume: " + path.string());
}

Volume3D minmax_normalize(const Volume3D &vol) {
    vol.validate();
    float lo = std::numeric_limits<float>::infinity();
    float hi = -lo;
    for (std::int64_t i = 0; i < vol.size(); ++i) {
        if (!vol.in_mask(i)) continue;
        lo = std::min(lo, vol.data[i]);
        hi = std::max(hi, vol.data[i]);
    }
    if (!(hi > lo)) throw DomainError("degenerate intensity range");
    Volume3D out = vol;
    const double scale = 1.0 / (static_cast<double>(hi) - lo);
    for (auto &v : out.data) v = static_cast<float>((static_cast<double>(v) - lo) * scale);
    // Pin the extremes exactly; double rounding can leave 1 - ulp.
    for (std::int64_t i = 0; i < vol.size(); ++i) {
        if (vol.data[i] == lo) out.data[i] = 0.0f;
        if (vol.data[i] == hi) out.data[i] = 1.0f;
    }
    return out;
}

std::vector<int> triplet_origins(int nz) {
    if (nz < 3) throw DomainError("extract_triplets: need at least 3 slices, got " + std::to_string(nz));
    std::vector<int> z;
    for (int k = 0; k + 3 <= nz; k += 3) z.push_back(k);
    if (nz % 3 != 0) z.push_back(nz - 3);
    return z;
}

TripletStack extract_triplets(const Volume3D &vol) {
    vol.validate();
    const auto [nx, ny, nz] = vol.dims;
    TripletStack st;
    st.source_dims = vol.dims;
    st.spacing = vol.spacing;
    st.z0 = triplet_origins(nz);
    const std::int64_t plane = static_cast<std::int64_t>(nx) * ny;
    for (int z : st.z0) {
        nd::Tensor t({3, ny, nx});
        std::copy_n(vol.data.begin() + z * plane, 3 * plane, t.data());
        st.triplets.push_back(std::move(t));
    }
    return st;
}

Volume3D stitch_triplets(const TripletStack &layout, const std::vector<nd::Tensor> &predicted) {
    if (predicted.size() != layout.z0.size())
        throw DomainError("stitch_triplets: expected " + std::to_string(layout.z0.size()) + " triplets, got " +
                          std::to_string(predicted.size()));
    const auto [nx, ny, nz] = layout.source_dims;
    const std::int64_t plane = static_cast<std::int64_t>(nx) * ny;
    Volume3D out(layout.source_dims, layout.spacing);
    for (size_t k = 0; k < predicted.size(); ++k) {
        if (predicted[k].shape() != nd::Shape{3, ny, nx})
            throw DomainError("stitch_triplets: triplet " + std::to_string(k) + " has shape " +
                              nd::shape_str(predicted[k].shape()));
        // Later triplets overwrite, so overlapped tail slices come from the final one.
        std::copy_n(predicted[k].data(), 3 * plane, out.data.begin() + layout.z0[k] * plane);
    }
    (void)nz;
    return out;
}

std::vector<int> grid_origins(int d, int p, int s, char axis) {
    if (p <= 0 || s <= 0) throw DomainError("patch size and stride must be positive");
    if (d < p || (d - p) % s != 0)
        throw DomainError(std::string("extract_patches: axis ") + axis + " of length " + std::to_string(d) +
                          " does not fit patch " + std::to_string(p) + " with stride " + std::to_string(s));
    std::vector<int> o;
    for (int v = 0; v + p <= d; v += s) o.push_back(v);
    return o;
}

std::vector<std::array<int, 3>> patch_origins(const Dims &dims, int p, int s) {
    const auto ox = grid_origins(dims[0], p, s, 'x');
    const auto oy = grid_origins(dims[1], p, s, 'y');
    const auto oz = grid_origins(dims[2], p, s, 'z');
    std::vector<std::array<int, 3>> out;
    out.reserve(ox.size() * oy.size() * oz.size());
    for (int z : oz)
        for (int y : oy)
            for (int x : ox) out.push_back({x, y, z});
    return out;
}

PatchSet patch_layout(const Dims &dims, const Spacing &spacing, int p, int s) {
    PatchSet ps;
    ps.origins = patch_origins(dims, p, s);
    ps.patch_size = p;
    ps.stride = s;
    ps.source_dims = dims;
    ps.spacing = spacing;
    return ps;
}

PatchSet extract_patches(const Volume3D &vol, int p, int s) {
    vol.validate();
    PatchSet ps = patch_layout(vol.dims, vol.spacing, p, s);
    ps.patches.reserve(ps.origins.size());
    for (const auto &o : ps.origins) {
        nd::Tensor t({p, p, p});
        float *dst = t.data();
        for (int z = 0; z < p; ++z)
            for (int y = 0; y < p; ++y) {
                const float *src = &vol.data[static_cast<size_t>(vol.index(o[0], o[1] + y, o[2] + z))];
                dst = std::copy_n(src, p, dst);
            }
        ps.patches.push_back(std::move(t));
    }
    return ps;
}

int stitch_owner(int c, int p, int n) {
    const int half = p / 2;
    const int q = p / 4;
    const int i = c < q ? 0 : (c - q) / half;
    return std::clamp(i, 0, n - 1);
}

Volume3D stitch_patches(const PatchSet &layout, const std::vector<nd::Tensor> &predicted) {
    const int p = layout.patch_size;
    if (p % 4 != 0 || layout.stride != p / 2)
        throw DomainError("stitch_patches: requires stride p/2 with p divisible by 4 (p=" + std::to_string(p) +
                          ", s=" + std::to_string(layout.stride) + ")");
    if (predicted.size() != layout.origins.size())
        throw DomainError("stitch_patches: missing patch (expected " + std::to_string(layout.origins.size()) +
                          ", got " + std::to_string(predicted.size()) + ")");
    for (size_t k = 0; k < predicted.size(); ++k)
        if (predicted[k].shape() != nd::Shape{p, p, p})
            throw DomainError("stitch_patches: patch " + std::to_string(k) + " has shape " +
                              nd::shape_str(predicted[k].shape()));
    const Dims &d = layout.source_dims;
    std::array<int, 3> n{};
    for (int a = 0; a < 3; ++a) n[a] = (d[a] - p) / layout.stride + 1;
    if (static_cast<size_t>(n[0]) * n[1] * n[2] != layout.origins.size())
        throw DomainError("stitch_patches: layout does not match a full grid");

    Volume3D out(d, layout.spacing);
    std::array<std::vector<int>, 3> owner;
    for (int a = 0; a < 3; ++a) {
        owner[a].resize(static_cast<size_t>(d[a]));
        for (int c = 0; c < d[a]; ++c) owner[a][c] = stitch_owner(c, p, n[a]);
    }
    const int s = layout.stride;
#pragma omp parallel for schedule(static)
    for (int z = 0; z < d[2]; ++z) {
        const int iz = owner[2][z];
        for (int y = 0; y < d[1]; ++y) {
            const int iy = owner[1][y];
            for (int x = 0; x < d[0]; ++x) {
                const int ix = owner[0][x];
                const auto &patch = predicted[static_cast<size_t>(ix + n[0] * (iy + n[1] * iz))];
                const int lx = x - ix * s, ly = y - iy * s, lz = z - iz * s;
                out.at(x, y, z) = patch[lx + p * (ly + static_cast<std::int64_t>(p) * lz)];
            }
        }
    }
    return out;
}

std::vector<float> gaussian_kernel(double sigma) {
    if (sigma <= 0.0) return {1.0f};
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    std::vector<float> out(k.size());
    for (size_t i = 0; i < k.size(); ++i) out[i] = static_cast<float>(k[i] / sum);
    return out;
}

namespace {

// One separable pass along `axis`, replicating edge voxels.
void smooth_axis(const std::vector<float> &in, std::vector<float> &out, const Dims &d, int axis,
                 const std::vector<float> &k) {
    const int radius = static_cast<int>(k.size() / 2);
    const std::int64_t stride = axis == 0 ? 1 : axis == 1 ? d[0] : static_cast<std::int64_t>(d[0]) * d[1];
    const int len = d[axis];
    const int u0 = axis == 0 ? 1 : 0;
    const int u1 = axis == 2 ? 1 : 2;
    const int nu = d[u0], nv = d[u1];
    const std::int64_t su = u0 == 0 ? 1 : d[0];
    const std::int64_t sv = u1 == 2 ? static_cast<std::int64_t>(d[0]) * d[1] : d[0];
#pragma omp parallel for schedule(static)
    for (int v = 0; v < nv; ++v) {
        for (int u = 0; u < nu; ++u) {
            const std::int64_t base = u * su + v * sv;
            for (int c = 0; c < len; ++c) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t) {
                    const int cc = std::clamp(c + t, 0, len - 1);
                    acc += static_cast<double>(k[t + radius]) * in[static_cast<size_t>(base + cc * stride)];
                }
                out[static_cast<size_t>(base + c * stride)] = static_cast<float>(acc);
            }
        }
    }
}

} // namespace

Volume3D gaussian_smooth(const Volume3D &vol, double fwhm_mm) {
    if (!(fwhm_mm >= 0.0)) throw DomainError("gaussian_smooth: fwhm must be non-negative");
    vol.validate();
    if (fwhm_mm == 0.0) return vol;
    const double fwhm_to_sigma = 2.0 * std::sqrt(2.0 * std::log(2.0));
    Volume3D out = vol;
    std::vector<float> tmp(out.data.size());
    for (int a = 0; a < 3; ++a) {
        if (vol.spacing[a] <= 0.0f) throw DomainError("gaussian_smooth: spacing must be positive");
        const auto k = gaussian_kernel(fwhm_mm / (fwhm_to_sigma * vol.spacing[a]));
        if (k.size() == 1) continue;
        smooth_axis(out.data, tmp, vol.dims, a, k);
        out.data.swap(tmp);
    }
    return out;
}

namespace {

struct Cdf {
    double lo = 0.0, width = 0.0;
    std::vector<double> edge; // kHistogramBins + 1 cumulative fractions
};

Cdf masked_cdf(const Volume3D &v, const char *which) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < v.size(); ++i) {
        if (!v.in_mask(i)) continue;
        lo = std::min(lo, static_cast<double>(v.data[i]));
        hi = std::max(hi, static_cast<double>(v.data[i]));
        ++count;
    }
    if (!(hi > lo)) throw DomainError(std::string("histogram_match: ") + which + " is constant over its mask");
    Cdf c;
    c.lo = lo;
    c.width = (hi - lo) / kHistogramBins;
    std::vector<std::int64_t> h(kHistogramBins, 0);
    for (std::int64_t i = 0; i < v.size(); ++i) {
        if (!v.in_mask(i)) continue;
        const int b = std::min(kHistogramBins - 1, static_cast<int>((v.data[i] - lo) / c.width));
        ++h[static_cast<size_t>(b)];
    }
    c.edge.assign(kHistogramBins + 1, 0.0);
    std::int64_t run = 0;
    for (int b = 0; b < kHistogramBins; ++b) {
        run += h[b];
        c.edge[b + 1] = static_cast<double>(run) / count;
    }
    c.edge[kHistogramBins] = 1.0;
    return c;
}

} // namespace

Volume3D histogram_match(const Volume3D &src, const Volume3D &ref) {
    src.validate();
    ref.validate();
    const Cdf cs = masked_cdf(src, "source");
    const Cdf cr = masked_cdf(ref, "reference");
    Volume3D out = src;
    for (std::int64_t i = 0; i < src.size(); ++i) {
        if (!src.in_mask(i)) continue;
        const double t = (src.data[i] - cs.lo) / cs.width;
        const int b = std::clamp(static_cast<int>(t), 0, kHistogramBins - 1);
        const double frac = std::clamp(t - b, 0.0, 1.0);
        const double u = cs.edge[b] + frac * (cs.edge[b + 1] - cs.edge[b]);
        const auto it = std::upper_bound(cr.edge.begin(), cr.edge.end(), u);
        const int k = static_cast<int>(it - cr.edge.begin()) - 1;
        double value;
        if (k >= kHistogramBins) {
            value = cr.lo + cr.width * kHistogramBins;
        } else {
            const double f = (u - cr.edge[k]) / (cr.edge[k + 1] - cr.edge[k]);
            value = cr.lo + cr.width * (k + f);
        }
        out.data[i] = static_cast<float>(value);
    }
    return out;
}

} // namespace petsynth::vol
