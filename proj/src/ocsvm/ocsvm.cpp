#include "petsynth/ocsvm/ocsvm.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>

#include "petsynth/common/binio.hpp"
#include "petsynth/common/error.hpp"

namespace petsynth::ocsvm {

namespace {

double sq_dist(const float *a, const float *b, int dim) {
    double acc = 0.0;
    for (int k = 0; k < dim; ++k) {
        const double d = static_cast<double>(a[k]) - b[k];
        acc += d * d;
    }
    return acc;
}

constexpr double kKeepAlpha = 1e-10;

} // namespace

double Model::decision(std::span<const float> z) const {
    if (static_cast<int>(z.size()) != dim) {
        throw DomainError("ocsvm decision: query has dimension " + std::to_string(z.size()) + ", model expects " +
                          std::to_string(dim));
    }
    double acc = 0.0;
    for (size_t i = 0; i < index.size(); ++i)
        acc += alpha[i] * std::exp(-gamma * sq_dist(sv.data() + i * static_cast<size_t>(dim), z.data(), dim));
    return acc - rho;
}

double default_gamma(std::span<const float> x, size_t n, int dim) {
    if (n == 0 || dim < 1) return 1.0;
    // mean over dimensions of the per-dimension variance across samples
    double var = 0.0;
    for (int d = 0; d < dim; ++d) {
        double mean = 0.0;
        for (size_t i = 0; i < n; ++i) mean += x[i * dim + d];
        mean /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) var += (x[i * dim + d] - mean) * (x[i * dim + d] - mean);
    }
    var /= static_cast<double>(n) * dim;
    if (!(var > 1e-30)) return 1.0;
    return 1.0 / (dim * var);
}

Model fit(std::span<const float> x, size_t n, int dim, const FitOptions &opt, FitInfo *info, Workspace *ws) {
    if (n < 2) throw DomainError("ocsvm fit: need at least 2 training points");
    if (dim < 1 || x.size() != n * static_cast<size_t>(dim)) throw DomainError("ocsvm fit: data size mismatch");
    if (!(opt.nu > 0.0 && opt.nu <= 1.0)) throw DomainError("ocsvm fit: nu must lie in (0, 1]");
    if (opt.nu * static_cast<double>(n) < 1.0 - 1e-12) throw DomainError("nu too small for N");
    for (float v : x)
        if (!std::isfinite(v)) throw DomainError("ocsvm fit: non-finite latent values");
    const double gamma = opt.gamma > 0.0 ? opt.gamma : default_gamma(x, n, dim);
    if (!std::isfinite(gamma)) throw DomainError("ocsvm fit: invalid gamma");

    Workspace local;
    Workspace &w = ws ? *ws : local;
    w.kernel.resize(n * n);
    w.grad.assign(n, 0.0);
    w.alpha.assign(n, 0.0);
    double *K = w.kernel.data();
    double *G = w.grad.data();
    double *a = w.alpha.data();
    for (size_t i = 0; i < n; ++i) {
        K[i * n + i] = 1.0;
        for (size_t j = i + 1; j < n; ++j) {
            const double k = std::exp(-gamma * sq_dist(&x[i * dim], &x[j * dim], dim));
            K[i * n + j] = k;
            K[j * n + i] = k;
        }
    }

    const double C = 1.0 / (opt.nu * static_cast<double>(n));
    size_t full = std::min(n, static_cast<size_t>(std::floor(1.0 / C + 1e-9)));
    while (full > 0 && 1.0 - static_cast<double>(full) * C < -1e-15) --full;
    for (size_t i = 0; i < full; ++i) a[i] = C;
    if (full < n) a[full] = std::max(0.0, 1.0 - static_cast<double>(full) * C);
    for (size_t j = 0; j < n; ++j)
        if (a[j] != 0.0)
            for (size_t i = 0; i < n; ++i) G[i] += K[i * n + j] * a[j];

    auto select = [&](size_t &up, size_t &down) {
        double gmin = std::numeric_limits<double>::infinity(), gmax = -gmin;
        up = down = n;
        for (size_t i = 0; i < n; ++i) {
            if (a[i] < C && G[i] < gmin) {
                gmin = G[i];
                up = i;
            }
            if (a[i] > 0.0 && G[i] > gmax) {
                gmax = G[i];
                down = i;
            }
        }
        return (up == n || down == n) ? 0.0 : gmax - gmin;
    };

    int iter = 0;
    double violation = 0.0;
    for (; iter < opt.max_iter; ++iter) {
        size_t i, j;
        violation = select(i, j);
        if (violation < opt.tol) break;
        double quad = K[i * n + i] + K[j * n + j] - 2.0 * K[i * n + j];
        if (quad <= 1e-12) quad = 1e-12;
        double t = violation / quad;
        bool i_full = false, j_empty = false;
        if (t >= C - a[i]) {
            t = C - a[i];
            i_full = true;
        }
        if (t >= a[j]) {
            t = a[j];
            j_empty = true;
            i_full = i_full && t == C - a[i];
        }
        a[i] = i_full ? C : a[i] + t;
        a[j] = j_empty ? 0.0 : a[j] - t;
        for (size_t k = 0; k < n; ++k) G[k] += t * (K[k * n + i] - K[k * n + j]);
    }
    if (iter == opt.max_iter) {
        size_t i, j;
        violation = select(i, j);
    }

    // Fresh gradient for rho and the objective.
    std::fill(G, G + n, 0.0);
    for (size_t j = 0; j < n; ++j)
        if (a[j] != 0.0)
            for (size_t i = 0; i < n; ++i) G[i] += K[i * n + j] * a[j];

    double free_sum = 0.0;
    size_t free_n = 0;
    double lb = -std::numeric_limits<double>::infinity(), ub = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < n; ++i) {
        if (a[i] > 0.0 && a[i] < C) {
            free_sum += G[i];
            ++free_n;
        } else if (a[i] >= C) {
            lb = std::max(lb, G[i]);
        } else {
            ub = std::min(ub, G[i]);
        }
    }
    Model m;
    m.dim = dim;
    m.gamma = gamma;
    m.nu = opt.nu;
    m.n_train = static_cast<std::uint32_t>(n);
    if (free_n > 0) m.rho = free_sum / static_cast<double>(free_n);
    else if (std::isfinite(lb) && std::isfinite(ub)) m.rho = 0.5 * (lb + ub);
    else m.rho = std::isfinite(lb) ? lb : ub;

    for (size_t i = 0; i < n; ++i) {
        if (a[i] <= kKeepAlpha) continue;
        m.index.push_back(static_cast<std::uint32_t>(i));
        m.alpha.push_back(a[i]);
        m.sv.insert(m.sv.end(), &x[i * dim], &x[i * dim] + dim);
    }
    if (info) {
        info->alpha.assign(a, a + n);
        double obj = 0.0;
        for (size_t i = 0; i < n; ++i) obj += a[i] * G[i];
        info->objective = 0.5 * obj;
        info->max_violation = violation;
        info->iterations = iter;
    }
    return m;
}

std::vector<std::int32_t> ModelBank::lookup() const {
    std::vector<std::int32_t> out(static_cast<size_t>(dims[0]) * dims[1] * dims[2], -1);
    for (size_t i = 0; i < voxels.size(); ++i) {
        const auto &v = voxels[i];
        out[static_cast<size_t>(v[0] + static_cast<std::int64_t>(dims[0]) * (v[1] + static_cast<std::int64_t>(dims[1]) * v[2]))] =
            static_cast<std::int32_t>(i);
    }
    return out;
}

namespace {

struct BankPlan {
    ModelBank bank;
    std::vector<std::vector<std::int32_t>> rows; // per voxel: row in each map, -1 when absent
};

BankPlan plan_bank(const std::vector<uad::LatentMap> &maps, const FitOptions &opt) {
    if (maps.size() < 2) throw DomainError("fit_bank: need at least 2 training latent maps");
    BankPlan p;
    p.bank.dims = maps[0].dims;
    std::vector<std::vector<std::int32_t>> lookups;
    for (const auto &m : maps) {
        if (m.dims != p.bank.dims) throw DomainError("fit_bank: latent maps differ in volume shape");
        lookups.push_back(m.lookup());
    }
    const auto &d = p.bank.dims;
    const size_t nvox = lookups[0].size();
    for (size_t v = 0; v < nvox; ++v) {
        std::vector<std::int32_t> r(maps.size());
        size_t count = 0;
        for (size_t s = 0; s < maps.size(); ++s) {
            r[s] = lookups[s][v];
            count += r[s] >= 0;
        }
        if (count < 2 || opt.nu * static_cast<double>(count) < 1.0 - 1e-12) continue;
        const auto i = static_cast<std::int64_t>(v);
        p.bank.voxels.push_back({static_cast<int>(i % d[0]), static_cast<int>((i / d[0]) % d[1]),
                                 static_cast<int>(i / (static_cast<std::int64_t>(d[0]) * d[1]))});
        p.rows.push_back(std::move(r));
    }
    p.bank.models.resize(p.bank.voxels.size());
    return p;
}

void fit_voxel(const std::vector<uad::LatentMap> &maps, const std::vector<std::int32_t> &rows, const FitOptions &opt,
               std::vector<float> &buf, Workspace &ws, Model &out) {
    buf.clear();
    std::vector<std::uint32_t> subject;
    for (size_t s = 0; s < maps.size(); ++s) {
        if (rows[s] < 0) continue;
        const float *z = maps[s].latent(static_cast<size_t>(rows[s]));
        buf.insert(buf.end(), z, z + uad::kLatentDim);
        subject.push_back(static_cast<std::uint32_t>(s));
    }
    out = fit(buf, subject.size(), uad::kLatentDim, opt, nullptr, &ws);
    for (auto &i : out.index) i = subject[i];
}

} // namespace

ModelBank fit_bank(const std::vector<uad::LatentMap> &maps, const FitOptions &opt) {
    auto p = plan_bank(maps, opt);
    const auto n = static_cast<std::int64_t>(p.bank.voxels.size());
    std::exception_ptr err;
#pragma omp parallel
    {
        std::vector<float> buf;
        Workspace ws;
#pragma omp for schedule(dynamic, 64)
        for (std::int64_t v = 0; v < n; ++v) {
            try {
                fit_voxel(maps, p.rows[static_cast<size_t>(v)], opt, buf, ws, p.bank.models[static_cast<size_t>(v)]);
            } catch (...) {
#pragma omp critical
                err = std::current_exception();
            }
        }
    }
    if (err) std::rethrow_exception(err);
    return std::move(p.bank);
}

ModelBank fit_bank_serial(const std::vector<uad::LatentMap> &maps, const FitOptions &opt) {
    auto p = plan_bank(maps, opt);
    std::vector<float> buf;
    Workspace ws;
    for (size_t v = 0; v < p.bank.voxels.size(); ++v) fit_voxel(maps, p.rows[v], opt, buf, ws, p.bank.models[v]);
    return std::move(p.bank);
}

void store_bank(const ModelBank &bank, const std::filesystem::path &path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open model bank for writing: " + path.string());
    binio::Writer w(os);
    w.magic("OCS1");
    for (int a = 0; a < 3; ++a) w.put<std::uint32_t>(static_cast<std::uint32_t>(bank.dims[a]));
    const int dim = bank.models.empty() ? uad::kLatentDim : bank.models[0].dim;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
    w.put<std::uint64_t>(bank.voxels.size());
    for (size_t v = 0; v < bank.voxels.size(); ++v) {
        const auto &m = bank.models[v];
        if (m.dim != dim) throw DomainError("store_bank: models differ in dimension");
        for (int a = 0; a < 3; ++a) w.put<std::int32_t>(bank.voxels[v][a]);
        w.put<std::uint32_t>(m.n_train);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(m.index.size()));
        w.put<double>(m.rho);
        w.put<double>(m.gamma);
        w.put<double>(m.nu);
        for (size_t i = 0; i < m.index.size(); ++i) {
            w.put<std::uint32_t>(m.index[i]);
            w.put<double>(m.alpha[i]);
        }
        w.put_span<float>(m.sv);
    }
    if (!w.ok()) throw IoError("failed writing model bank: " + path.string());
}

ModelBank load_bank(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open model bank: " + path.string());
    binio::Reader r(is, path.string());
    r.expect_magic("OCS1");
    ModelBank b;
    std::uint64_t total = 1;
    for (int a = 0; a < 3; ++a) {
        const auto d = r.get<std::uint32_t>();
        if (d == 0 || d > 65536) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": dim overflow");
        b.dims[a] = static_cast<int>(d);
        total *= d;
    }
    const auto dim = r.get<std::uint32_t>();
    if (dim == 0 || dim > 4096) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": latent dim overflow");
    const auto n = r.get<std::uint64_t>();
    if (n > total) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": voxel count exceeds volume");
    b.voxels.resize(n);
    b.models.resize(n);
    for (std::uint64_t v = 0; v < n; ++v) {
        for (int a = 0; a < 3; ++a) {
            const auto c = r.get<std::int32_t>();
            if (c < 0 || c >= b.dims[a]) throw FormatError(FormatErrorKind::Malformed, path.string() + ": voxel outside volume");
            b.voxels[v][a] = c;
        }
        auto &m = b.models[v];
        m.dim = static_cast<int>(dim);
        m.n_train = r.get<std::uint32_t>();
        const auto nsv = r.get<std::uint32_t>();
        if (nsv > m.n_train) throw FormatError(FormatErrorKind::Malformed, path.string() + ": more support vectors than points");
        m.rho = r.get<double>();
        m.gamma = r.get<double>();
        m.nu = r.get<double>();
        m.index.resize(nsv);
        m.alpha.resize(nsv);
        for (std::uint32_t i = 0; i < nsv; ++i) {
            m.index[i] = r.get<std::uint32_t>();
            m.alpha[i] = r.get<double>();
        }
        m.sv.resize(static_cast<size_t>(nsv) * dim);
        r.get_into(std::span<float>(m.sv));
    }
    return b;
}

} // namespace petsynth::ocsvm
