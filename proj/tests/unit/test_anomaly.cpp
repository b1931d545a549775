#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <map>
#include <set>

#include <json.hpp>

#include "doctest.h"

#include "petsynth/anomaly/anomaly.hpp"
#include "petsynth/common/error.hpp"
#include "petsynth/phantom/phantom.hpp"

using namespace petsynth;
using namespace petsynth::anomaly;

namespace {

constexpr int D = uad::kLatentDim;

std::filesystem::path tmp_dir() {
    auto d = std::filesystem::temp_directory_path() / "petsynth_anomaly_test";
    std::filesystem::create_directories(d);
    return d;
}

// Latent map over every voxel of a small grid.
uad::LatentMap random_map(vol::Dims d, std::uint64_t seed, float scale = 1.0f, float shift = 0.0f) {
    uad::LatentMap m;
    m.dims = d;
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(shift, scale);
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) m.voxels.push_back({x, y, z});
    m.z.resize(m.voxels.size() * D);
    for (auto &v : m.z) v = g(rng);
    return m;
}

std::int64_t lin(const vol::Dims &d, int x, int y, int z) { return x + static_cast<std::int64_t>(d[0]) * (y + d[1] * z); }

// Cube of side `s` at origin (x, y, z) filled with `value`.
void fill_box(vol::Volume3D &v, int x, int y, int z, int s, float value) {
    for (int c = z; c < z + s; ++c)
        for (int b = y; b < y + s; ++b)
            for (int a = x; a < x + s; ++a) v.at(a, b, c) = value;
}

Cluster make_cluster(std::vector<std::int64_t> voxels, double mean) {
    Cluster c;
    std::sort(voxels.begin(), voxels.end());
    c.voxels = std::move(voxels);
    c.mean_score = mean;
    return c;
}

} // namespace

// ---- ood mse ---------------------------------------------------------------------------------

TEST_CASE("ood mse of stub reconstructors") {
    phantom::PhantomSpec s;
    s.dims = {24, 24, 24};
    const auto p = phantom::generate(s);
    const auto t1 = uad::normalize_clipped(p.t1), pet = uad::normalize_clipped(p.pet);
    CHECK(ood_mse([](const nd::Tensor &b) { return b; }, t1, pet) == 0.0);
    const double shifted = ood_mse(
        [](const nd::Tensor &b) {
            nd::Tensor o = b;
            for (std::int64_t i = 0; i < o.numel(); ++i) o[i] += 0.1f;
            return o;
        },
        t1, pet, {200, 3, 64});
    CHECK(shifted == doctest::Approx(0.01).epsilon(1e-5));
    CHECK_THROWS_AS(ood_mse([](const nd::Tensor &) { return nd::Tensor({1, 2, 15, 15}); }, t1, pet), DomainError);
}

TEST_CASE("ood mse of a random model matches a direct patch loop") {
    phantom::PhantomSpec s;
    s.dims = {24, 24, 20};
    const auto p = phantom::generate(s);
    const auto t1 = uad::normalize_clipped(p.t1), pet = uad::normalize_clipped(p.pet);
    const uad::SiameseAE model(5);

    const auto &d = t1.dims;
    const int h = uad::kHalf;
    double sum = 0.0;
    int n = 0;
    for (int z = 0; z < d[2]; ++z)
        for (int y = h; y < d[1] - h; ++y)
            for (int x = h; x < d[0] - h; ++x) {
                if (!t1.in_mask(t1.index(x, y, z))) continue;
                nd::Tensor patch({1, 2, uad::kPatch, uad::kPatch});
                for (int b = 0; b < uad::kPatch; ++b)
                    for (int a = 0; a < uad::kPatch; ++a) {
                        patch[b * uad::kPatch + a] = t1.at(x - h + a, y - h + b, z);
                        patch[uad::kPatch * uad::kPatch + b * uad::kPatch + a] = pet.at(x - h + a, y - h + b, z);
                    }
                const auto r = model.reconstruct(patch);
                double ch[2] = {0, 0};
                for (int c = 0; c < 2; ++c)
                    for (int k = 0; k < uad::kPatch * uad::kPatch; ++k) {
                        const std::int64_t i = c * uad::kPatch * uad::kPatch + k;
                        ch[c] += std::pow(static_cast<double>(r[i]) - patch[i], 2);
                    }
                sum += 0.5 * (ch[0] + ch[1]) / (uad::kPatch * uad::kPatch);
                ++n;
            }
    REQUIRE(n > 0);
    const double got = ood_mse(model, t1, pet, {0, 1, 97});
    CHECK(got == doctest::Approx(sum / n).epsilon(1e-5));
}

// ---- voxel statistics ------------------------------------------------------------------------

TEST_CASE("identical subjects give zero covariance and the shared mean") {
    const auto m = random_map({2, 2, 1}, 3);
    const auto st = fit_voxel_stats({m, m, m});
    REQUIRE(st.size() == 4);
    for (size_t i = 0; i < st.size(); ++i) {
        CHECK(st.count[i] == 3);
        CHECK(st.eps[i] > 0.0);
        for (int k = 0; k < D; ++k) CHECK(st.mean[i * D + k] == doctest::Approx(m.latent(i)[k]).epsilon(1e-12));
        for (double v : st.covariance(i)) CHECK(std::fabs(v) < 1e-12);
        CHECK(st.distance(i, m.latent(i)) == doctest::Approx(0.0));
    }
}

TEST_CASE("latents z and -z give zero mean and covariance 2 z z'") {
    const auto a = random_map({1, 1, 1}, 8);
    auto b = a;
    for (auto &v : b.z) v = -v;
    const auto st = fit_voxel_stats({a, b});
    const float *z = a.latent(0);
    for (int k = 0; k < D; ++k) CHECK(st.mean[k] == 0.0);
    const auto S = st.covariance(0);
    double tr = 0.0;
    for (int r = 0; r < D; ++r) {
        tr += 2.0 * z[r] * z[r];
        for (int c = 0; c < D; ++c) CHECK(S[r * D + c] == doctest::Approx(2.0 * z[r] * z[c]).epsilon(1e-10).scale(1.0));
    }
    CHECK(st.eps[0] == doctest::Approx(1e-3 * tr / D));
}

TEST_CASE("covariance matches a two-pass oracle") {
    std::vector<uad::LatentMap> maps;
    for (int s = 0; s < 5; ++s) maps.push_back(random_map({3, 2, 2}, 100 + s, 1.0f + 0.3f * s, 0.5f));
    const auto st = fit_voxel_stats(maps);
    REQUIRE(st.size() == 12);
    double worst = 0.0;
    for (size_t i = 0; i < st.size(); ++i) {
        std::vector<double> mu(D, 0.0);
        for (const auto &m : maps)
            for (int k = 0; k < D; ++k) mu[k] += m.latent(i)[k];
        for (auto &v : mu) v /= 5.0;
        const auto S = st.covariance(i);
        for (int r = 0; r < D; ++r) {
            worst = std::max(worst, std::fabs(st.mean[i * D + r] - mu[r]));
            for (int c = 0; c < D; ++c) {
                double acc = 0.0;
                for (const auto &m : maps) acc += (m.latent(i)[r] - mu[r]) * (m.latent(i)[c] - mu[c]);
                worst = std::max(worst, std::fabs(S[r * D + c] - acc / 4.0));
            }
        }
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("voxel statistics validation") {
    const auto m = random_map({2, 2, 2}, 1);
    CHECK_THROWS_AS(fit_voxel_stats({m}), DomainError);
    CHECK_THROWS_AS(fit_voxel_stats({m, random_map({2, 2, 3}, 2)}), DomainError);
    // Voxels covered by a single map get no statistics.
    auto partial = random_map({2, 2, 2}, 3);
    partial.voxels.resize(3);
    partial.z.resize(3 * D);
    const auto st = fit_voxel_stats({m, partial});
    CHECK(st.size() == 3);
}

TEST_CASE("Mahalanobis distance") {
    std::vector<uad::LatentMap> maps;
    for (int s = 0; s < 6; ++s) maps.push_back(random_map({3, 3, 2}, 40 + s));
    const auto st = fit_voxel_stats(maps);

    SUBCASE("zero at the mean") {
        uad::LatentMap at_mean = maps[0];
        for (size_t i = 0; i < at_mean.size(); ++i)
            for (int k = 0; k < D; ++k) at_mean.z[i * D + k] = static_cast<float>(st.mean[i * D + k]);
        const double raw = mahalanobis_raw(st, at_mean);
        CHECK(raw < 1e-6);
        const IdRange r{1.0, 3.0};
        CHECK(mahalanobis_dm(st, at_mean, r) == doctest::Approx((raw - 1.0) / 5.0));
    }

    SUBCASE("identity factor gives the squared Euclidean distance") {
        VoxelStats id = st;
        std::fill(id.chol.begin(), id.chol.end(), 0.0);
        for (size_t i = 0; i < id.size(); ++i)
            for (int r = 0; r < D; ++r) id.chol[i * kPacked + r * (r + 1) / 2 + r] = 1.0;
        const auto probe = random_map({3, 3, 2}, 77);
        double total = 0.0;
        for (size_t i = 0; i < id.size(); ++i) {
            double e = 0.0;
            for (int k = 0; k < D; ++k) {
                const double dk = static_cast<double>(probe.latent(i)[k]) - id.mean[i * D + k];
                e += dk * dk;
            }
            CHECK(id.distance(i, probe.latent(i)) == e);
            total += e;
        }
        CHECK(mahalanobis_raw_serial(id, probe) == doctest::Approx(total / id.size()).epsilon(1e-14));
    }

    SUBCASE("explicit inverse oracle") {
        const auto probe = random_map({3, 3, 2}, 99, 1.5f);
        double sum = 0.0;
        for (size_t i = 0; i < st.size(); ++i) {
            const auto S = st.covariance(i);
            Eigen::MatrixXd A(D, D);
            for (int r = 0; r < D; ++r)
                for (int c = 0; c < D; ++c) A(r, c) = S[r * D + c] + (r == c ? st.eps[i] : 0.0);
            Eigen::VectorXd d(D);
            for (int k = 0; k < D; ++k) d[k] = probe.latent(i)[k] - st.mean[i * D + k];
            const double oracle = d.dot(A.inverse() * d);
            CHECK(st.distance(i, probe.latent(i)) == doctest::Approx(oracle).epsilon(1e-8));
            sum += oracle;
        }
        CHECK(mahalanobis_raw(st, probe) == doctest::Approx(sum / st.size()).epsilon(1e-8));
        CHECK(mahalanobis_raw(st, probe) == mahalanobis_raw_serial(st, probe));
    }
}

TEST_CASE("leave-one-out distances refit without the subject") {
    std::vector<uad::LatentMap> maps;
    for (int s = 0; s < 5; ++s) maps.push_back(random_map({3, 2, 2}, 140 + s));
    const auto loo = mahalanobis_raw_loo(maps);
    REQUIRE(loo.size() == maps.size());
    const auto full = fit_voxel_stats(maps);
    for (size_t i = 0; i < maps.size(); ++i) {
        std::vector<uad::LatentMap> rest;
        for (size_t j = 0; j < maps.size(); ++j)
            if (j != i) rest.push_back(maps[j]);
        CHECK(loo[i] == mahalanobis_raw(fit_voxel_stats(rest), maps[i]));
        // a subject is closer to statistics that include it
        CHECK(mahalanobis_raw(full, maps[i]) < loo[i]);
    }
    CHECK_THROWS_AS(mahalanobis_raw_loo({maps[0], maps[1]}), DomainError);
}

TEST_CASE("normalization puts the training cohort in [0, 0.5] and is monotone") {
    std::vector<OodRow> rows = {{"a", "train", 0, 3.0, 0}, {"b", "train", 0, 5.0, 0}, {"c", "train", 0, 4.0, 0},
                                {"d", "patient", 0, 9.0, 0}, {"e", "control", 0, 2.0, 0}};
    const auto r = normalize_report(rows, "train");
    CHECK(r.min == 3.0);
    CHECK(r.max == 5.0);
    for (const auto &row : rows)
        if (row.cohort == "train") {
            CHECK(row.dm_normalized >= 0.0);
            CHECK(row.dm_normalized <= 0.5);
        }
    CHECK(rows[0].dm_normalized == 0.0);
    CHECK(rows[1].dm_normalized == doctest::Approx(2.0 / 7.0));
    CHECK(rows[3].dm_normalized == doctest::Approx(6.0 / 7.0));
    CHECK(rows[4].dm_normalized < 0.0);
    double prev = -1e9;
    for (double raw = 0.0; raw < 20.0; raw += 0.5) {
        const double v = normalize_dm(raw, r);
        CHECK(v > prev);
        prev = v;
    }
    CHECK_THROWS_AS(normalize_report(rows, "nobody"), DomainError);
    CHECK_THROWS_AS(normalize_dm(1.0, {0.0, 0.0}), DomainError);

    const auto path = tmp_dir() / "ood.csv";
    write_ood_csv(rows, path);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    CHECK(header == "subject,cohort,mse,dm_raw,dm_normalized");
}

// ---- score maps ------------------------------------------------------------------------------

TEST_CASE("score maps over training subjects respect the nu fraction") {
    const vol::Dims d{3, 3, 2};
    std::vector<uad::LatentMap> maps;
    for (int s = 0; s < 20; ++s) maps.push_back(random_map(d, 500 + s));
    ocsvm::FitOptions opt;
    opt.nu = 0.1;
    const auto bank = ocsvm::fit_bank(maps, opt);
    size_t inliers = 0, total = 0;
    for (const auto &m : maps) {
        const auto sm = score_map(bank, m);
        for (size_t i = 0; i < sm.data.size(); ++i) {
            ++total;
            if (sm.data[i] >= -1e-6f) ++inliers;
        }
        const auto ref = score_map_serial(bank, m);
        CHECK(std::ranges::equal(sm.data, ref.data));
    }
    CHECK(static_cast<double>(inliers) / total >= 1.0 - opt.nu);

    const auto a = score_map(bank, maps[3]);
    const auto b = score_map(bank, maps[3]);
    CHECK(std::ranges::equal(a.data, b.data));
}

TEST_CASE("constant stub bank and missing voxels") {
    const vol::Dims d{4, 3, 2};
    ocsvm::ModelBank bank;
    bank.dims = d;
    ocsvm::Model stub;
    stub.dim = D;
    stub.rho = 1.0;
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 4; ++x)
                if (!(x == 0 && y == 0)) {
                    bank.voxels.push_back({x, y, z});
                    bank.models.push_back(stub);
                }
    const auto m = random_map(d, 4);
    const auto sm = score_map(bank, m);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(sm.data.size()); ++i) {
        if (i % 12 == 0) {
            CHECK_FALSE(sm.in_mask(i));
        } else {
            CHECK(sm.in_mask(i));
            CHECK(sm.data[static_cast<size_t>(i)] == -1.0f);
        }
    }
    CHECK_THROWS_AS(score_map(bank, random_map({4, 3, 3}, 1)), DomainError);
    ocsvm::ModelBank empty;
    empty.dims = d;
    CHECK_THROWS_AS(score_map(empty, m), DomainError);
}

// ---- clusters --------------------------------------------------------------------------------

TEST_CASE("corner contact is one cluster under 26- and two under 6-connectivity") {
    vol::Volume3D s({5, 5, 5}, {1, 1, 1});
    s.at(1, 1, 1) = -1.0f;
    s.at(2, 2, 2) = -1.0f;
    CHECK(extract_clusters(s, 10, 26).clusters.size() == 1);
    CHECK(extract_clusters(s, 10, 6).clusters.size() == 2);
    CHECK_THROWS_AS(extract_clusters(s, 10, 18), DomainError);
    CHECK_THROWS_AS(extract_clusters(s, 0), DomainError);
}

TEST_CASE("single blob and empty maps") {
    vol::Volume3D s({8, 8, 8}, {1, 1, 1}, 0.5f);
    const auto none = extract_clusters(s);
    CHECK(none.clusters.empty());
    fill_box(s, 2, 2, 2, 3, -0.7f);
    const auto one = extract_clusters(s);
    REQUIRE(one.clusters.size() == 1);
    CHECK(one.clusters[0].rank == 1);
    CHECK(one.clusters[0].size() == 27);
    CHECK(one.clusters[0].mean_score == doctest::Approx(-0.7));
    CHECK(one.clusters[0].lo == std::array<int, 3>{2, 2, 2});
    CHECK(one.clusters[0].hi == std::array<int, 3>{4, 4, 4});
    CHECK(one.threshold == 0.0);
    // Masked-out voxels never enter.
    s.mask = std::vector<std::uint8_t>(s.data.size(), 0);
    CHECK(extract_clusters(s).clusters.empty());
}

TEST_CASE("twelve separated blobs tighten to ten") {
    vol::Volume3D s({24, 24, 6}, {1, 1, 1}, 0.2f);
    // Blob k has score -(k + 1) / 12; the two least negative must be dropped.
    for (int k = 0; k < 12; ++k) fill_box(s, 1 + 6 * (k % 4), 1 + 6 * ((k / 4) % 4), 2, 2, -(k + 1) / 12.0f);
    const auto rep = extract_clusters(s, 10);
    REQUIRE(rep.clusters.size() == 10);
    CHECK(rep.threshold == doctest::Approx(-3.0 / 12.0));
    std::set<double> means;
    for (const auto &c : rep.clusters) {
        CHECK(c.size() == 8);
        means.insert(c.mean_score);
    }
    CHECK(*means.rbegin() == doctest::Approx(-3.0 / 12.0));
    for (int k = 0; k < 10; ++k) CHECK(rep.clusters[k].rank == k + 1);
    CHECK(rep.clusters[0].mean_score == doctest::Approx(-1.0));
    CHECK(extract_clusters(s, 12).clusters.size() == 12);
    CHECK(extract_clusters(s, 1).clusters.size() == 1);
}

TEST_CASE("components match an independent reverse-order union-find") {
    const vol::Dims d{14, 13, 11};
    std::mt19937_64 rng(21);
    std::bernoulli_distribution on(0.3);
    std::vector<std::uint8_t> keep(static_cast<size_t>(d[0] * d[1] * d[2]));
    for (auto &k : keep) k = on(rng);
    for (int conn : {6, 26}) {
        const auto comps = connected_components(d, keep, conn);
        std::vector<std::int64_t> parent(keep.size());
        for (size_t i = 0; i < parent.size(); ++i) parent[i] = static_cast<std::int64_t>(i);
        auto find = [&](std::int64_t a) {
            while (parent[a] != a) a = parent[a];
            return a;
        };
        for (int z = d[2] - 1; z >= 0; --z)
            for (int y = d[1] - 1; y >= 0; --y)
                for (int x = d[0] - 1; x >= 0; --x) {
                    const auto i = lin(d, x, y, z);
                    if (!keep[i]) continue;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const int m = std::abs(dx) + std::abs(dy) + std::abs(dz);
                                if (m == 0 || (conn == 6 && m > 1)) continue;
                                const int a = x + dx, b = y + dy, c = z + dz;
                                if (a < 0 || b < 0 || c < 0 || a >= d[0] || b >= d[1] || c >= d[2]) continue;
                                const auto j = lin(d, a, b, c);
                                if (keep[j]) parent[find(i)] = find(j);
                            }
                }
        std::map<std::int64_t, std::vector<std::int64_t>> groups;
        for (size_t i = 0; i < keep.size(); ++i)
            if (keep[i]) groups[find(static_cast<std::int64_t>(i))].push_back(static_cast<std::int64_t>(i));
        std::set<std::vector<std::int64_t>> oracle, got(comps.begin(), comps.end());
        for (auto &[r, g] : groups) oracle.insert(g);
        CHECK(got == oracle);
    }
}

TEST_CASE("rank combination") {
    SUBCASE("dominant cluster ranks first") {
        auto r = rank_clusters({make_cluster({1, 2}, -0.2), make_cluster({10, 11, 12, 13}, -0.9), make_cluster({20}, -0.5)});
        CHECK(r[0].voxels.front() == 10);
        for (int k = 0; k < 3; ++k) CHECK(r[k].rank == k + 1);
    }
    SUBCASE("equal combined rank goes to the more negative cluster") {
        // A: size rank 1, score rank 2; B: size rank 2, score rank 1.
        auto r = rank_clusters({make_cluster({0, 1, 2, 3, 4}, -0.3), make_cluster({50, 51}, -0.8)});
        CHECK(r[0].voxels.front() == 50);
        CHECK(r[0].size_rank == 2);
        CHECK(r[0].score_rank == 1);
        CHECK(r[1].size_rank == 1);
    }
    SUBCASE("identical clusters order by voxel index") {
        auto r = rank_clusters({make_cluster({30, 31}, -0.5), make_cluster({5, 6}, -0.5), make_cluster({17, 18}, -0.5)});
        CHECK(r[0].voxels.front() == 5);
        CHECK(r[1].voxels.front() == 17);
        CHECK(r[2].voxels.front() == 30);
    }
}

TEST_CASE("label map and JSON report") {
    vol::Volume3D s({10, 10, 4}, {1, 1, 1}, 0.1f);
    fill_box(s, 0, 0, 0, 2, -0.9f);
    fill_box(s, 5, 5, 1, 3, -0.4f);
    const auto rep = extract_clusters(s);
    REQUIRE(rep.clusters.size() == 2);
    const auto lm = label_map(rep, {2, 2, 2});
    CHECK(lm.spacing[0] == 2.0f);
    CHECK(lm.at(6, 6, 2) == static_cast<float>(rep.clusters[0].voxels.front() == lin(s.dims, 5, 5, 1) ? 1 : 2));
    CHECK(lm.at(9, 0, 0) == 0.0f);
    std::set<float> labels(lm.data.begin(), lm.data.end());
    CHECK(labels == std::set<float>{0.0f, 1.0f, 2.0f});

    const auto path = tmp_dir() / "clusters.json";
    write_cluster_json(rep, path);
    std::ifstream is(path);
    const auto j = nlohmann::json::parse(is);
    REQUIRE(j["clusters"].size() == 2);
    CHECK(j["clusters"][0]["rank"] == 1);
    CHECK(j["clusters"][0]["size"].get<int>() == static_cast<int>(rep.clusters[0].size()));
    CHECK(j["clusters"][1]["bbox_max"].size() == 3);
}

// ---- detection ------------------------------------------------------------------------------

TEST_CASE("detection basics") {
    const vol::Dims d{10, 10, 10};
    vol::Volume3D lesion(d, {1, 1, 1});
    fill_box(lesion, 2, 2, 2, 2, 1.0f);
    std::vector<std::int64_t> vox;
    for (std::int64_t i = 0; i < 1000; ++i)
        if (lesion.data[i] > 0) vox.push_back(i);

    ClusterReport exact{d, -0.1, {make_cluster(vox, -1.0)}};
    exact.clusters = rank_clusters(exact.clusters);
    auto s = evaluate_detection({exact}, {{"p", {lesion}}});
    CHECK(s.detected == 1);
    CHECK(s.lesions[0].rank == 1);

    ClusterReport far{d, -0.1, rank_clusters({make_cluster({lin(d, 8, 8, 8)}, -1.0)})};
    s = evaluate_detection({far}, {{"p", {lesion}}});
    CHECK(s.detected == 0);
    CHECK_FALSE(s.lesions[0].detected);
    CHECK(s.sensitivity == 0.0);
    CHECK(s.mean_rank == 0.0);

    CHECK_THROWS_AS(evaluate_detection({far}, {{"p", {vol::Volume3D(d, {1, 1, 1})}}}), DomainError);
    CHECK_THROWS_AS(evaluate_detection({far, far}, {{"p", {lesion}}}), DomainError);
}

TEST_CASE("planted suite: 14 of 19 lesions at known ranks") {
    const vol::Dims d{30, 8, 8};
    // Subjects with 3, 3, 3, 3, 3, 2, 2 lesions; planted rank per lesion, 0 = missed.
    const std::vector<std::vector<int>> planted = {{1, 2, 0}, {1, 0, 3}, {2, 1, 3}, {0, 5, 1}, {4, 1, 0},
                                                   {1, 10}, {0, 2}};
    std::vector<ClusterReport> reports;
    std::vector<SubjectTruth> truth;
    int expected_hits = 0, rank_sum = 0, lesions = 0;
    for (size_t s = 0; s < planted.size(); ++s) {
        SubjectTruth t{"s" + std::to_string(s), {}};
        std::vector<Cluster> clusters;
        // Filler clusters far from the lesions occupy the ranks not planted.
        for (int k = 0; k < 10; ++k) clusters.push_back(make_cluster({lin(d, 3 * k, 7, 7)}, 0.0));
        for (size_t l = 0; l < planted[s].size(); ++l) {
            vol::Volume3D m(d, {1, 1, 1});
            fill_box(m, 2 + 9 * static_cast<int>(l), 1, 1, 3, 1.0f);
            t.lesion_masks.push_back(m);
            ++lesions;
            if (planted[s][l] > 0) {
                ++expected_hits;
                rank_sum += planted[s][l];
            }
        }
        // Assign ranks directly: the planted cluster touches one lesion voxel.
        ClusterReport rep{d, -0.1, {}};
        int next_filler = 0;
        for (int r = 1; r <= 10; ++r) {
            Cluster c;
            for (size_t l = 0; l < planted[s].size(); ++l)
                if (planted[s][l] == r) c = make_cluster({lin(d, 3 + 9 * static_cast<int>(l), 2, 2)}, -1.0);
            if (c.voxels.empty()) c = clusters[static_cast<size_t>(next_filler++)];
            c.rank = r;
            rep.clusters.push_back(c);
        }
        reports.push_back(rep);
        truth.push_back(t);
    }
    REQUIRE(lesions == 19);
    REQUIRE(expected_hits == 14);
    const auto s = evaluate_detection(reports, truth);
    CHECK(s.total == 19);
    CHECK(s.detected == 14);
    CHECK(s.sensitivity == doctest::Approx(14.0 / 19.0));
    CHECK(s.mean_rank == doctest::Approx(rank_sum / 14.0));
    CHECK(s.mean_rank == doctest::Approx(37.0 / 14.0));
    for (size_t k = 0, s_i = 0; s_i < planted.size(); ++s_i)
        for (size_t l = 0; l < planted[s_i].size(); ++l, ++k) CHECK(s.lesions[k].rank == planted[s_i][l]);

    const auto path = tmp_dir() / "detections.csv";
    write_detection_csv(s, path);
    std::ifstream is(path);
    std::string line;
    int rows = -1;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 19);
}

TEST_CASE("sensitivity never drops as the cluster budget grows") {
    const vol::Dims d{32, 32, 16};
    vol::Volume3D s(d, {1, 1, 1});
    std::mt19937_64 rng(9);
    std::normal_distribution<float> g(0.3f, 0.4f);
    for (auto &v : s.data) v = g(rng);
    std::vector<vol::Volume3D> masks;
    for (int k = 0; k < 6; ++k) {
        vol::Volume3D m(d, {1, 1, 1});
        const int x = 3 + 5 * k, y = 4 + 4 * k;
        fill_box(m, x, y, 6, 3, 1.0f);
        for (int c = 6; c < 9; ++c)
            for (int b = y; b < y + 3; ++b)
                for (int a = x; a < x + 3; ++a) s.at(a, b, c) -= 0.5f + 0.1f * k;
        masks.push_back(m);
    }
    double prev = -1.0;
    for (int n = 1; n <= 40; ++n) {
        const auto rep = extract_clusters(s, n);
        CHECK(rep.clusters.size() <= static_cast<size_t>(n));
        const auto e = evaluate_detection({rep}, {{"x", masks}});
        CHECK(e.sensitivity >= prev);
        prev = e.sensitivity;
    }
}
