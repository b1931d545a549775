#include "petsynth/anomaly/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <json.hpp>

#include "petsynth/common/error.hpp"

namespace petsynth::anomaly {

namespace {

constexpr int D = uad::kLatentDim;

std::int64_t linear(const vol::Dims &d, const std::array<int, 3> &v) {
    return v[0] + static_cast<std::int64_t>(d[0]) * (v[1] + static_cast<std::int64_t>(d[1]) * v[2]);
}

std::int64_t voxel_count(const vol::Dims &d) {
    return static_cast<std::int64_t>(d[0]) * d[1] * d[2];
}

} // namespace

// ---- ood mse ---------------------------------------------------------------------------------

double ood_mse(const PatchReconstructor &rec, const vol::Volume3D &t1, const vol::Volume3D &pet,
               const OodMseOptions &opt) {
    if (t1.dims != pet.dims) throw DomainError("ood_mse: T1 and PET dimensions differ");
    if (opt.batch < 1) throw DomainError("ood_mse: batch must be positive");
    const auto valid = uad::valid_centers(t1);
    std::vector<std::int64_t> pool;
    for (size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) pool.push_back(static_cast<std::int64_t>(i));
    if (pool.empty()) throw DomainError("mask too small for any 15x15 patch");

    size_t take = pool.size();
    if (opt.samples > 0 && static_cast<size_t>(opt.samples) < pool.size()) {
        take = static_cast<size_t>(opt.samples);
        std::mt19937_64 rng(opt.seed);
        for (size_t k = 0; k < take; ++k) {
            std::uniform_int_distribution<size_t> pick(k, pool.size() - 1);
            std::swap(pool[k], pool[pick(rng)]);
        }
        pool.resize(take);
        std::sort(pool.begin(), pool.end());
    }

    const std::int64_t plane = static_cast<std::int64_t>(t1.dims[0]) * t1.dims[1];
    constexpr std::int64_t per_channel = uad::kPatch * uad::kPatch;
    constexpr std::int64_t per_patch = uad::kChannels * per_channel;
    double sum = 0.0;
    for (size_t start = 0; start < take; start += static_cast<size_t>(opt.batch)) {
        const size_t count = std::min(take - start, static_cast<size_t>(opt.batch));
        nd::Tensor batch({static_cast<std::int64_t>(count), uad::kChannels, uad::kPatch, uad::kPatch});
        for (size_t b = 0; b < count; ++b) {
            const std::int64_t i = pool[start + b];
            const int z = static_cast<int>(i / plane);
            const int y = static_cast<int>((i % plane) / t1.dims[0]);
            const int x = static_cast<int>(i % t1.dims[0]);
            const auto p = uad::extract_patch(t1, pet, x, y, z);
            std::copy(p.values().begin(), p.values().end(), batch.values().begin() + static_cast<std::ptrdiff_t>(b * per_patch));
        }
        const nd::Tensor out = rec(batch);
        if (out.shape() != batch.shape()) throw DomainError("ood_mse: reconstruction has shape " + nd::shape_str(out.shape()));
        for (size_t b = 0; b < count; ++b) {
            double patch = 0.0;
            for (int c = 0; c < uad::kChannels; ++c) {
                double se = 0.0;
                const std::int64_t off = static_cast<std::int64_t>(b) * per_patch + c * per_channel;
                for (std::int64_t k = 0; k < per_channel; ++k) {
                    const double d = static_cast<double>(out[off + k]) - batch[off + k];
                    se += d * d;
                }
                patch += se / per_channel;
            }
            sum += patch / uad::kChannels;
        }
    }
    return sum / static_cast<double>(take);
}

double ood_mse(const uad::SiameseAE &model, const vol::Volume3D &t1, const vol::Volume3D &pet, const OodMseOptions &opt) {
    return ood_mse([&](const nd::Tensor &b) { return model.reconstruct(b); }, t1, pet, opt);
}

// ---- voxel statistics ------------------------------------------------------------------------

std::vector<std::int32_t> VoxelStats::lookup() const {
    std::vector<std::int32_t> out(static_cast<size_t>(voxel_count(dims)), -1);
    for (size_t i = 0; i < voxels.size(); ++i) out[static_cast<size_t>(linear(dims, voxels[i]))] = static_cast<std::int32_t>(i);
    return out;
}

std::vector<double> VoxelStats::covariance(size_t i) const {
    const double *L = chol.data() + i * kPacked;
    auto at = [L](int r, int c) { return L[r * (r + 1) / 2 + c]; };
    std::vector<double> s(static_cast<size_t>(D * D));
    for (int r = 0; r < D; ++r)
        for (int c = 0; c <= r; ++c) {
            double acc = 0.0;
            for (int k = 0; k <= c; ++k) acc += at(r, k) * at(c, k);
            if (r == c) acc -= eps[i];
            s[static_cast<size_t>(r * D + c)] = s[static_cast<size_t>(c * D + r)] = acc;
        }
    return s;
}

double VoxelStats::distance(size_t i, const float *z) const {
    const double *L = chol.data() + i * kPacked;
    const double *mu = mean.data() + i * D;
    double y[D];
    double q = 0.0;
    const double *row = L;
    for (int r = 0; r < D; ++r) {
        double acc = static_cast<double>(z[r]) - mu[r];
        for (int k = 0; k < r; ++k) acc -= row[k] * y[k];
        y[r] = acc / row[r];
        q += y[r] * y[r];
        row += r + 1;
    }
    return q;
}

namespace {

VoxelStats fit_impl(const std::vector<const uad::LatentMap *> &training, const StatsOptions &opt) {
    if (training.size() < 2) throw DomainError("voxel statistics need at least 2 training maps");
    if (!(opt.eps_scale >= 0.0) || !(opt.eps_floor > 0.0)) throw DomainError("voxel statistics: bad regularization");
    VoxelStats st;
    st.dims = training.front()->dims;
    for (const auto *m : training)
        if (m->dims != st.dims) throw DomainError("latent maps have different dimensions");

    std::vector<std::vector<std::int32_t>> lut;
    std::vector<std::uint32_t> cover(static_cast<size_t>(voxel_count(st.dims)), 0);
    for (const auto *m : training) {
        lut.push_back(m->lookup());
        for (const auto &v : m->voxels) ++cover[static_cast<size_t>(linear(st.dims, v))];
    }
    std::vector<std::int64_t> where;
    for (size_t i = 0; i < cover.size(); ++i)
        if (cover[i] >= 2) where.push_back(static_cast<std::int64_t>(i));
    if (where.empty()) throw DomainError("no voxel is covered by two training maps");

    const size_t n = where.size();
    st.voxels.resize(n);
    st.count.resize(n);
    st.mean.assign(n * D, 0.0);
    st.eps.assign(n, 0.0);
    st.chol.assign(n * kPacked, 0.0);
    const std::int64_t nx = st.dims[0], ny = st.dims[1];

    bool failed = false;
#pragma omp parallel for schedule(dynamic, 64)
    for (std::int64_t k = 0; k < static_cast<std::int64_t>(n); ++k) {
        const std::int64_t li = where[static_cast<size_t>(k)];
        st.voxels[static_cast<size_t>(k)] = {static_cast<int>(li % nx), static_cast<int>((li / nx) % ny),
                                             static_cast<int>(li / (nx * ny))};
        std::vector<const float *> zs;
        for (size_t s = 0; s < training.size(); ++s) {
            const auto at = lut[s][static_cast<size_t>(li)];
            if (at >= 0) zs.push_back(training[s]->latent(static_cast<size_t>(at)));
        }
        const double N = static_cast<double>(zs.size());
        st.count[static_cast<size_t>(k)] = static_cast<std::uint32_t>(zs.size());
        Eigen::Matrix<double, D, 1> mu = Eigen::Matrix<double, D, 1>::Zero();
        for (const float *z : zs)
            for (int r = 0; r < D; ++r) mu[r] += z[r];
        mu /= N;
        Eigen::Matrix<double, D, D> S = Eigen::Matrix<double, D, D>::Zero();
        for (const float *z : zs) {
            Eigen::Matrix<double, D, 1> d;
            for (int r = 0; r < D; ++r) d[r] = z[r] - mu[r];
            S.selfadjointView<Eigen::Lower>().rankUpdate(d);
        }
        S = S.selfadjointView<Eigen::Lower>();
        S /= (N - 1.0);
        const double e = std::max(opt.eps_scale * S.trace() / D, opt.eps_floor);
        S.diagonal().array() += e;
        Eigen::LLT<Eigen::Matrix<double, D, D>> llt(S);
        if (llt.info() != Eigen::Success) {
#pragma omp atomic write
            failed = true;
            continue;
        }
        const auto L = llt.matrixL().toDenseMatrix();
        double *out = st.chol.data() + static_cast<size_t>(k) * kPacked;
        for (int r = 0; r < D; ++r)
            for (int c = 0; c <= r; ++c) *out++ = L(r, c);
        std::copy(mu.data(), mu.data() + D, st.mean.data() + static_cast<size_t>(k) * D);
        st.eps[static_cast<size_t>(k)] = e;
    }
    if (failed) throw DomainError("regularized covariance is not positive definite");
    return st;
}


double raw_impl(const VoxelStats &stats, const uad::LatentMap &map, bool parallel) {
    if (map.dims != stats.dims) throw DomainError("latent map and voxel statistics have different dimensions");
    const auto lut = stats.lookup();
    const std::int64_t n = static_cast<std::int64_t>(map.size());
    std::vector<double> d(map.size(), std::numeric_limits<double>::quiet_NaN());
#pragma omp parallel for schedule(static) if (parallel)
    for (std::int64_t i = 0; i < n; ++i) {
        const auto s = lut[static_cast<size_t>(linear(map.dims, map.voxels[static_cast<size_t>(i)]))];
        if (s >= 0) d[static_cast<size_t>(i)] = stats.distance(static_cast<size_t>(s), map.latent(static_cast<size_t>(i)));
    }
    double sum = 0.0;
    size_t used = 0;
    for (double v : d)
        if (!std::isnan(v)) {
            sum += v;
            ++used;
        }
    if (used == 0) throw DomainError("latent map shares no voxel with the voxel statistics");
    return sum / static_cast<double>(used);
}

} // namespace

double mahalanobis_raw(const VoxelStats &stats, const uad::LatentMap &map) { return raw_impl(stats, map, true); }
double mahalanobis_raw_serial(const VoxelStats &stats, const uad::LatentMap &map) { return raw_impl(stats, map, false); }

VoxelStats fit_voxel_stats(const std::vector<uad::LatentMap> &training, const StatsOptions &opt) {
    std::vector<const uad::LatentMap *> ptr;
    for (const auto &m : training) ptr.push_back(&m);
    return fit_impl(ptr, opt);
}

std::vector<double> mahalanobis_raw_loo(const std::vector<uad::LatentMap> &training, const StatsOptions &opt) {
    if (training.size() < 3) throw DomainError("leave-one-out distances need at least 3 training maps");
    std::vector<double> out;
    for (size_t i = 0; i < training.size(); ++i) {
        std::vector<const uad::LatentMap *> rest;
        for (size_t j = 0; j < training.size(); ++j)
            if (j != i) rest.push_back(&training[j]);
        out.push_back(raw_impl(fit_impl(rest, opt), training[i], true));
    }
    return out;
}

double normalize_dm(double raw, const IdRange &r) {
    const double den = 2.0 * r.max - r.min;
    if (!(den > 0.0)) throw DomainError("degenerate in-distribution distance range");
    return (raw - r.min) / den;
}

double mahalanobis_dm(const VoxelStats &stats, const uad::LatentMap &map, const IdRange &range) {
    return normalize_dm(mahalanobis_raw(stats, map), range);
}

IdRange normalize_report(std::vector<OodRow> &rows, const std::string &id_cohort) {
    IdRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto &row : rows)
        if (row.cohort == id_cohort) {
            r.min = std::min(r.min, row.dm_raw);
            r.max = std::max(r.max, row.dm_raw);
        }
    if (!std::isfinite(r.min)) throw DomainError("no rows in cohort '" + id_cohort + "'");
    for (auto &row : rows) row.dm_normalized = normalize_dm(row.dm_raw, r);
    return r;
}

void write_ood_csv(const std::vector<OodRow> &rows, const std::filesystem::path &path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os.precision(9);
    os << "subject,cohort,mse,dm_raw,dm_normalized\n";
    for (const auto &r : rows) os << r.subject << ',' << r.cohort << ',' << r.mse << ',' << r.dm_raw << ',' << r.dm_normalized << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

// ---- score maps ------------------------------------------------------------------------------

namespace {

vol::Volume3D score_impl(const ocsvm::ModelBank &bank, const uad::LatentMap &map, bool parallel) {
    if (bank.dims != map.dims) throw DomainError("model bank and latent map have different dimensions");
    vol::Volume3D out(map.dims, {1.0f, 1.0f, 1.0f});
    out.mask = std::vector<std::uint8_t>(out.data.size(), 0);
    const auto lut = bank.lookup();
    const std::int64_t n = static_cast<std::int64_t>(map.size());
    std::int64_t hits = 0;
#pragma omp parallel for schedule(static) reduction(+ : hits) if (parallel)
    for (std::int64_t i = 0; i < n; ++i) {
        const auto li = linear(map.dims, map.voxels[static_cast<size_t>(i)]);
        const auto m = lut[static_cast<size_t>(li)];
        if (m < 0) continue;
        out.data[static_cast<size_t>(li)] = static_cast<float>(
            bank.models[static_cast<size_t>(m)].decision({map.latent(static_cast<size_t>(i)), static_cast<size_t>(D)}));
        (*out.mask)[static_cast<size_t>(li)] = 1;
        ++hits;
    }
    if (hits == 0) throw DomainError("model bank and latent map share no voxel");
    return out;
}

} // namespace

vol::Volume3D score_map(const ocsvm::ModelBank &bank, const uad::LatentMap &map) { return score_impl(bank, map, true); }
vol::Volume3D score_map_serial(const ocsvm::ModelBank &bank, const uad::LatentMap &map) {
    return score_impl(bank, map, false);
}

// ---- clusters --------------------------------------------------------------------------------

namespace {

std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
    if (connectivity != 6 && connectivity != 26) throw DomainError("connectivity must be 6 or 26");
    std::vector<std::array<int, 3>> out;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int m = std::abs(dx) + std::abs(dy) + std::abs(dz);
                if (m == 0 || (connectivity == 6 && m > 1)) continue;
                out.push_back({dx, dy, dz});
            }
    return out;
}

template <class F>
void for_neighbors(const vol::Dims &d, std::int64_t i, const std::vector<std::array<int, 3>> &offs, F &&f) {
    const std::int64_t nx = d[0], ny = d[1];
    const int x = static_cast<int>(i % nx), y = static_cast<int>((i / nx) % ny), z = static_cast<int>(i / (nx * ny));
    for (const auto &o : offs) {
        const int a = x + o[0], b = y + o[1], c = z + o[2];
        if (a < 0 || b < 0 || c < 0 || a >= d[0] || b >= d[1] || c >= d[2]) continue;
        f(a + nx * (b + ny * c));
    }
}

struct DisjointSet {
    std::vector<std::int64_t> parent;
    std::int64_t find(std::int64_t a) {
        while (parent[static_cast<size_t>(a)] != a) {
            parent[static_cast<size_t>(a)] = parent[static_cast<size_t>(parent[static_cast<size_t>(a)])];
            a = parent[static_cast<size_t>(a)];
        }
        return a;
    }
    bool unite(std::int64_t a, std::int64_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (b < a) std::swap(a, b);
        parent[static_cast<size_t>(b)] = a;
        return true;
    }
};

} // namespace

std::vector<std::vector<std::int64_t>> connected_components(const vol::Dims &dims, const std::vector<std::uint8_t> &keep,
                                                            int connectivity) {
    if (static_cast<std::int64_t>(keep.size()) != voxel_count(dims)) throw DomainError("selection size does not match dimensions");
    const auto offs = neighbor_offsets(connectivity);
    std::vector<std::uint8_t> seen(keep.size(), 0);
    std::vector<std::vector<std::int64_t>> out;
    std::vector<std::int64_t> stack;
    for (std::int64_t s = 0; s < static_cast<std::int64_t>(keep.size()); ++s) {
        if (!keep[static_cast<size_t>(s)] || seen[static_cast<size_t>(s)]) continue;
        std::vector<std::int64_t> comp;
        stack.assign(1, s);
        seen[static_cast<size_t>(s)] = 1;
        while (!stack.empty()) {
            const auto i = stack.back();
            stack.pop_back();
            comp.push_back(i);
            for_neighbors(dims, i, offs, [&](std::int64_t j) {
                if (keep[static_cast<size_t>(j)] && !seen[static_cast<size_t>(j)]) {
                    seen[static_cast<size_t>(j)] = 1;
                    stack.push_back(j);
                }
            });
        }
        std::sort(comp.begin(), comp.end());
        out.push_back(std::move(comp));
    }
    return out;
}

std::vector<Cluster> rank_clusters(std::vector<Cluster> c) {
    const size_t n = c.size();
    for (const auto &k : c)
        if (k.voxels.empty()) throw DomainError("empty cluster");
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    auto by_size = [&](size_t a, size_t b) {
        if (c[a].size() != c[b].size()) return c[a].size() > c[b].size();
        if (c[a].mean_score != c[b].mean_score) return c[a].mean_score < c[b].mean_score;
        return c[a].voxels.front() < c[b].voxels.front();
    };
    auto by_score = [&](size_t a, size_t b) {
        if (c[a].mean_score != c[b].mean_score) return c[a].mean_score < c[b].mean_score;
        if (c[a].size() != c[b].size()) return c[a].size() > c[b].size();
        return c[a].voxels.front() < c[b].voxels.front();
    };
    std::sort(idx.begin(), idx.end(), by_size);
    for (size_t r = 0; r < n; ++r) c[idx[r]].size_rank = static_cast<int>(r + 1);
    std::sort(idx.begin(), idx.end(), by_score);
    for (size_t r = 0; r < n; ++r) c[idx[r]].score_rank = static_cast<int>(r + 1);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        const int sa = c[a].size_rank + c[a].score_rank, sb = c[b].size_rank + c[b].score_rank;
        if (sa != sb) return sa < sb;
        return by_score(a, b);
    });
    std::vector<Cluster> out;
    out.reserve(n);
    for (size_t r = 0; r < n; ++r) {
        out.push_back(std::move(c[idx[r]]));
        out.back().rank = static_cast<int>(r + 1);
    }
    return out;
}

ClusterReport extract_clusters(const vol::Volume3D &scores, int target_n, int connectivity) {
    if (target_n < 1) throw DomainError("target cluster count must be positive");
    const auto offs = neighbor_offsets(connectivity);
    const auto &d = scores.dims;
    std::vector<std::int64_t> cand;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(scores.data.size()); ++i)
        if (scores.in_mask(i) && scores.data[static_cast<size_t>(i)] < 0.0f) cand.push_back(i);
    std::sort(cand.begin(), cand.end(), [&](std::int64_t a, std::int64_t b) {
        const float sa = scores.data[static_cast<size_t>(a)], sb = scores.data[static_cast<size_t>(b)];
        return sa != sb ? sa < sb : a < b;
    });

    // Sweep from the most negative value; equal scores enter together.
    DisjointSet ds;
    ds.parent.resize(scores.data.size());
    std::vector<std::uint8_t> in(scores.data.size(), 0);
    std::int64_t components = 0;
    size_t kept = 0;
    ClusterReport rep;
    rep.dims = d;
    rep.threshold = 0.0;
    while (kept < cand.size()) {
        const float level = scores.data[static_cast<size_t>(cand[kept])];
        size_t end = kept;
        while (end < cand.size() && scores.data[static_cast<size_t>(cand[end])] == level) ++end;
        std::int64_t next = components;
        for (size_t k = kept; k < end; ++k) {
            const auto i = cand[k];
            ds.parent[static_cast<size_t>(i)] = i;
            in[static_cast<size_t>(i)] = 1;
            ++next;
            for_neighbors(d, i, offs, [&](std::int64_t j) {
                if (in[static_cast<size_t>(j)] && ds.unite(i, j)) --next;
            });
        }
        if (next > target_n) {
            for (size_t k = kept; k < end; ++k) in[static_cast<size_t>(cand[k])] = 0;
            rep.threshold = kept == 0 ? std::nextafter(static_cast<double>(level), -std::numeric_limits<double>::infinity())
                                      : static_cast<double>(scores.data[static_cast<size_t>(cand[kept - 1])]);
            break;
        }
        components = next;
        kept = end;
    }

    for (auto &comp : connected_components(d, in, connectivity)) {
        Cluster c;
        double s = 0.0;
        c.lo = {d[0], d[1], d[2]};
        c.hi = {-1, -1, -1};
        for (auto i : comp) {
            s += scores.data[static_cast<size_t>(i)];
            const std::array<int, 3> p{static_cast<int>(i % d[0]), static_cast<int>((i / d[0]) % d[1]),
                                       static_cast<int>(i / (static_cast<std::int64_t>(d[0]) * d[1]))};
            for (int a = 0; a < 3; ++a) {
                c.lo[a] = std::min(c.lo[a], p[a]);
                c.hi[a] = std::max(c.hi[a], p[a]);
            }
        }
        c.mean_score = s / static_cast<double>(comp.size());
        c.voxels = std::move(comp);
        rep.clusters.push_back(std::move(c));
    }
    rep.clusters = rank_clusters(std::move(rep.clusters));
    return rep;
}

vol::Volume3D label_map(const ClusterReport &report, const vol::Spacing &spacing) {
    vol::Volume3D out(report.dims, spacing);
    for (const auto &c : report.clusters)
        for (auto i : c.voxels) out.data[static_cast<size_t>(i)] = static_cast<float>(c.rank);
    return out;
}

void write_cluster_json(const ClusterReport &report, const std::filesystem::path &path) {
    nlohmann::ordered_json j;
    j["dims"] = report.dims;
    j["threshold"] = report.threshold;
    auto arr = nlohmann::ordered_json::array();
    for (const auto &c : report.clusters) {
        nlohmann::ordered_json e;
        e["rank"] = c.rank;
        e["size"] = c.size();
        e["mean_score"] = c.mean_score;
        e["size_rank"] = c.size_rank;
        e["score_rank"] = c.score_rank;
        e["bbox_min"] = c.lo;
        e["bbox_max"] = c.hi;
        arr.push_back(std::move(e));
    }
    j["clusters"] = std::move(arr);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

DetectionSummary evaluate_detection(const std::vector<ClusterReport> &reports, const std::vector<SubjectTruth> &truth) {
    if (reports.size() != truth.size()) throw DomainError("one cluster report is needed per subject");
    DetectionSummary s;
    double rank_sum = 0.0;
    for (size_t k = 0; k < truth.size(); ++k) {
        const auto &rep = reports[k];
        std::vector<std::int32_t> owner(static_cast<size_t>(voxel_count(rep.dims)), 0);
        for (const auto &c : rep.clusters)
            for (auto i : c.voxels) owner[static_cast<size_t>(i)] = c.rank;
        for (size_t l = 0; l < truth[k].lesion_masks.size(); ++l) {
            const auto &m = truth[k].lesion_masks[l];
            if (m.dims != rep.dims) throw DomainError("lesion mask dimensions do not match the score map");
            LesionVerdict v{truth[k].subject, static_cast<int>(l), false, 0};
            bool any = false;
            for (size_t i = 0; i < m.data.size(); ++i) {
                if (m.data[i] <= 0.5f) continue;
                any = true;
                const int r = owner[i];
                if (r > 0 && (v.rank == 0 || r < v.rank)) v.rank = r;
            }
            if (!any) throw DomainError("empty lesion mask for " + truth[k].subject);
            v.detected = v.rank > 0;
            if (v.detected) {
                ++s.detected;
                rank_sum += v.rank;
            }
            ++s.total;
            s.lesions.push_back(std::move(v));
        }
    }
    s.sensitivity = s.total ? static_cast<double>(s.detected) / s.total : 0.0;
    s.mean_rank = s.detected ? rank_sum / s.detected : 0.0;
    return s;
}

void write_detection_csv(const DetectionSummary &s, const std::filesystem::path &path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << "subject,lesion,detected,rank\n";
    for (const auto &v : s.lesions) os << v.subject << ',' << v.lesion << ',' << (v.detected ? 1 : 0) << ',' << v.rank << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

} // namespace petsynth::anomaly
