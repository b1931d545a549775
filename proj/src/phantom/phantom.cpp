#include "petsynth/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "petsynth/common/error.hpp"

namespace petsynth::phantom {

namespace {

constexpr int kMinDim = 16;
constexpr std::uint64_t kTemplateSeed = 0x5eed7e3;
constexpr double kPhaseJitter = 0.25;

struct Wave {
    double amp, m, n, p, q;
    double operator()(double theta, double phi) const { return amp * std::sin(m * theta + p) * std::sin(n * phi + q); }
};

struct Blob {
    std::array<double, 3> c, r;
    bool contains(double x, double y, double z) const {
        const double a = (x - c[0]) / r[0], b = (y - c[1]) / r[1], d = (z - c[2]) / r[2];
        return a * a + b * b + d * d <= 1.0;
    }
};

struct Anatomy {
    std::array<double, 3> center, semi;
    std::vector<Wave> outer, sulci;
    std::vector<Blob> ventricles, deep;
    double csf_rim, gm_inner;
    // PET gain field
    std::array<double, 3> f1, f2, ph1, ph2;
};

void check_spec(const PhantomSpec &s) {
    for (int a = 0; a < 3; ++a) {
        if (s.dims[a] < kMinDim) throw DomainError("phantom: dims must be >= " + std::to_string(kMinDim));
        if (!(s.spacing[a] > 0.0f)) throw DomainError("phantom: spacing must be positive");
    }
    if (!(s.noise_sigma >= 0.0) || !(s.pet_fwhm_mm >= 0.0)) throw DomainError("phantom: negative noise or fwhm");
    if (!(s.gain_amplitude >= 0.0 && s.gain_amplitude < 0.5)) throw DomainError("phantom: gain amplitude out of range");
}

Anatomy draw_anatomy(const PhantomSpec &s) {
    std::mt19937_64 rng(s.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    Anatomy a;
    for (int k = 0; k < 3; ++k) {
        a.center[k] = 0.5 * (s.dims[k] - 1) + 0.03 * s.dims[k] * u(rng);
        a.semi[k] = 0.42 * s.dims[k] * (1.0 + 0.06 * u(rng));
    }
    // Folding follows a shared template with small per-subject phase shifts, so voxels roughly
    // correspond across subjects (as after spatial normalization).
    std::mt19937_64 tpl(kTemplateSeed);
    for (int k = 0; k < 3; ++k) {
        const double m = 2.0 + k + std::round(u(tpl)), p = phase(tpl), q = phase(tpl);
        a.outer.push_back({0.02 + 0.01 * u(rng), m, 2.0 + k, p + kPhaseJitter * u(rng), q + kPhaseJitter * u(rng)});
    }
    for (int k = 0; k < 4; ++k) {
        const double m = 5.0 + 2 * k + std::round(u(tpl)), p = phase(tpl), q = phase(tpl);
        a.sulci.push_back({0.035 + 0.01 * u(rng), m, 4.0 + 2 * k, p + kPhaseJitter * u(rng), q + kPhaseJitter * u(rng)});
    }
    a.csf_rim = 0.92 + 0.01 * u(rng);
    a.gm_inner = 0.72 + 0.03 * u(rng);
    const auto &c = a.center;
    const auto &r = a.semi;
    for (int side : {-1, 1}) {
        a.ventricles.push_back({{c[0] + side * 0.11 * r[0] * (1 + 0.1 * u(rng)), c[1] + 0.05 * r[1] * u(rng), c[2] + 0.05 * r[2]},
                                {0.07 * r[0] * (1 + 0.15 * u(rng)), 0.24 * r[1] * (1 + 0.1 * u(rng)), 0.12 * r[2] * (1 + 0.1 * u(rng))}});
        a.deep.push_back({{c[0] + side * 0.3 * r[0] * (1 + 0.08 * u(rng)), c[1] + 0.08 * r[1] * u(rng), c[2] - 0.05 * r[2]},
                          {0.11 * r[0] * (1 + 0.1 * u(rng)), 0.15 * r[1] * (1 + 0.1 * u(rng)), 0.13 * r[2] * (1 + 0.1 * u(rng))}});
    }
    for (int k = 0; k < 3; ++k) {
        a.f1[k] = 0.6 + 0.4 * u(rng);
        a.f2[k] = 1.2 + 0.4 * u(rng);
        a.ph1[k] = phase(rng);
        a.ph2[k] = phase(rng);
    }
    return a;
}

std::uint8_t label_at(const Anatomy &a, double x, double y, double z) {
    const double ux = (x - a.center[0]) / a.semi[0], uy = (y - a.center[1]) / a.semi[1], uz = (z - a.center[2]) / a.semi[2];
    const double r = std::sqrt(ux * ux + uy * uy + uz * uz);
    double theta = 0.0, phi = 0.0;
    if (r > 0.0) {
        theta = std::acos(std::clamp(uz / r, -1.0, 1.0));
        phi = std::atan2(uy, ux);
    }
    double outer = 1.0;
    for (const auto &w : a.outer) outer += w(theta, phi);
    const double rho = r / outer;
    if (rho > 1.0) return Background;
    if (rho > a.csf_rim) return Csf;
    double inner = a.gm_inner;
    for (const auto &w : a.sulci) inner += w(theta, phi);
    if (rho > inner) return Gray;
    for (const auto &b : a.ventricles)
        if (b.contains(x, y, z)) return Csf;
    for (const auto &b : a.deep)
        if (b.contains(x, y, z)) return DeepGray;
    return White;
}

std::vector<std::uint8_t> labels_of(const Anatomy &a, const vol::Dims &d) {
    std::vector<std::uint8_t> out(static_cast<size_t>(d[0]) * d[1] * d[2]);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x)
                out[static_cast<size_t>(x + static_cast<std::int64_t>(d[0]) * (y + static_cast<std::int64_t>(d[1]) * z))] =
                    label_at(a, x, y, z);
    return out;
}

constexpr float kT1[5] = {0.0f, 0.2f, 0.55f, 0.85f, 0.65f};
constexpr float kPet[5] = {0.0f, 0.05f, 0.9f, 0.35f, 0.8f};

// Background beyond the blurred head stays exactly zero.
void add_noise_and_clamp(std::vector<float> &v, double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    for (auto &x : v) {
        const double e = sigma > 0.0 ? n(rng) : 0.0;
        if (x > 1e-3f) x = static_cast<float>(std::clamp(x + e, 0.0, 1.0));
        else x = 0.0f;
    }
}

// Every lattice point of the sphere, in or out of the volume. Out-of-volume points get index -1.
std::vector<std::int64_t> sphere_lattice(const vol::Dims &d, const vol::Spacing &s, const std::array<double, 3> &c,
                                         double radius_mm) {
    std::array<int, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
        lo[a] = static_cast<int>(std::floor(c[a] - radius_mm / s[a]));
        hi[a] = static_cast<int>(std::ceil(c[a] + radius_mm / s[a]));
    }
    std::vector<std::int64_t> out;
    const double r2 = radius_mm * radius_mm;
    for (int z = lo[2]; z <= hi[2]; ++z)
        for (int y = lo[1]; y <= hi[1]; ++y)
            for (int x = lo[0]; x <= hi[0]; ++x) {
                const double dx = (x - c[0]) * s[0], dy = (y - c[1]) * s[1], dz = (z - c[2]) * s[2];
                if (dx * dx + dy * dy + dz * dz > r2) continue;
                const bool in = x >= 0 && y >= 0 && z >= 0 && x < d[0] && y < d[1] && z < d[2];
                out.push_back(in ? x + static_cast<std::int64_t>(d[0]) * (y + static_cast<std::int64_t>(d[1]) * z) : -1);
            }
    return out;
}

bool sphere_fits(const std::vector<std::int64_t> &pts, const std::vector<std::uint8_t> &labels) {
    if (pts.empty()) return false;
    for (auto i : pts)
        if (i < 0 || labels[static_cast<size_t>(i)] == Background) return false;
    return true;
}

} // namespace

std::vector<std::uint8_t> tissue_labels(const PhantomSpec &spec) {
    check_spec(spec);
    return labels_of(draw_anatomy(spec), spec.dims);
}

std::vector<std::int64_t> sphere_voxels(const vol::Dims &dims, const vol::Spacing &spacing,
                                        const std::array<double, 3> &center, double radius_mm) {
    auto pts = sphere_lattice(dims, spacing, center, radius_mm);
    std::erase(pts, -1);
    return pts;
}

PhantomOutput generate(const PhantomSpec &spec) {
    check_spec(spec);
    const Anatomy a = draw_anatomy(spec);
    PhantomOutput out;
    out.tissue = labels_of(a, spec.dims);
    const auto n = out.tissue.size();

    std::vector<std::uint8_t> mask(n);
    for (size_t i = 0; i < n; ++i) mask[i] = out.tissue[i] != Background;

    vol::Volume3D t1(spec.dims, spec.spacing), pet(spec.dims, spec.spacing);
    for (size_t i = 0; i < n; ++i) {
        t1.data[i] = kT1[out.tissue[i]];
        pet.data[i] = kPet[out.tissue[i]];
    }
    const double vox = (spec.spacing[0] + spec.spacing[1] + spec.spacing[2]) / 3.0;
    t1 = vol::gaussian_smooth(t1, vox);
    pet = vol::gaussian_smooth(pet, spec.pet_fwhm_mm);

    const auto &d = spec.dims;
    const double amp = spec.gain_amplitude;
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const double p[3] = {static_cast<double>(x) / d[0], static_cast<double>(y) / d[1], static_cast<double>(z) / d[2]};
                double s1 = 0.0, s2 = 0.0;
                for (int k = 0; k < 3; ++k) {
                    s1 += std::sin(2.0 * std::numbers::pi * a.f1[k] * p[k] + a.ph1[k]);
                    s2 += std::sin(2.0 * std::numbers::pi * a.f2[k] * p[k] + a.ph2[k]);
                }
                const double gain = 1.0 + amp * (0.7 * s1 + 0.3 * s2) / 3.0;
                auto &v = pet.at(x, y, z);
                v = static_cast<float>(v * gain);
            }
    add_noise_and_clamp(t1.data, spec.noise_sigma, spec.seed ^ 0x7431ull);
    add_noise_and_clamp(pet.data, spec.noise_sigma, spec.seed ^ 0x9e7ull);

    for (const auto &les : spec.lesions) {
        if (!(les.depth >= 0.0 && les.depth <= 1.0)) throw DomainError("phantom: lesion depth must lie in [0, 1]");
        if (!(les.radius_mm > 0.0)) throw DomainError("phantom: lesion radius must be positive");
        const auto pts = sphere_lattice(d, spec.spacing, les.center, les.radius_mm);
        if (!sphere_fits(pts, out.tissue)) throw DomainError("phantom: lesion outside mask");
        vol::Volume3D m(d, spec.spacing);
        const float scale = static_cast<float>(1.0 - les.depth);
        for (auto i : pts) {
            m.data[static_cast<size_t>(i)] = 1.0f;
            pet.data[static_cast<size_t>(i)] *= scale;
        }
        out.lesion_masks.push_back(std::move(m));
    }

    t1.mask = mask;
    pet.mask = std::move(mask);
    out.t1 = std::move(t1);
    out.pet = std::move(pet);
    return out;
}

std::vector<Lesion> place_lesions(const PhantomSpec &anatomy, int count, double radius_mm, double depth,
                                  std::uint64_t seed) {
    if (count < 0) throw DomainError("place_lesions: negative count");
    if (count == 0) return {};
    const auto labels = tissue_labels(anatomy);
    std::vector<std::int64_t> gray;
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == Gray) gray.push_back(static_cast<std::int64_t>(i));
    if (gray.empty()) throw DomainError("place_lesions: phantom has no gray matter");
    const auto &d = anatomy.dims;
    const auto &s = anatomy.spacing;
    const double min_gap = 2.0 * radius_mm + 2.0 * std::max({s[0], s[1], s[2]});
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, gray.size() - 1);
    std::vector<Lesion> out;
    for (int attempt = 0; attempt < 50000 && static_cast<int>(out.size()) < count; ++attempt) {
        const auto i = gray[pick(rng)];
        const std::array<double, 3> c{static_cast<double>(i % d[0]), static_cast<double>((i / d[0]) % d[1]),
                                      static_cast<double>(i / (static_cast<std::int64_t>(d[0]) * d[1]))};
        bool clear = true;
        for (const auto &o : out) {
            double dist2 = 0.0;
            for (int k = 0; k < 3; ++k) dist2 += std::pow((c[k] - o.center[k]) * s[k], 2);
            if (dist2 < min_gap * min_gap) clear = false;
        }
        if (!clear) continue;
        const auto pts = sphere_lattice(d, s, c, radius_mm);
        if (!sphere_fits(pts, labels)) continue;
        size_t gm = 0;
        for (auto p : pts) gm += labels[static_cast<size_t>(p)] == Gray || labels[static_cast<size_t>(p)] == DeepGray;
        if (gm * 5 < pts.size() * 2) continue; // at least 40% gray matter
        out.push_back({c, radius_mm, depth});
    }
    if (static_cast<int>(out.size()) < count) throw DomainError("place_lesions: could not fit the requested lesions");
    return out;
}

size_t Manifest::lesion_count() const {
    size_t n = 0;
    for (const auto &s : subjects) n += s.lesion_masks.size();
    return n;
}

std::vector<const SubjectRecord *> Manifest::cohort(const std::string &name) const {
    std::vector<const SubjectRecord *> out;
    for (const auto &s : subjects)
        if (s.cohort == name) out.push_back(&s);
    return out;
}

std::uint64_t subject_seed(std::uint64_t base_seed, const std::string &cohort, int index) {
    if (cohort == "control") return base_seed + static_cast<std::uint64_t>(index);
    if (cohort == "patient") return base_seed + 1000003ull + static_cast<std::uint64_t>(index);
    throw DomainError("subject_seed: unknown cohort '" + cohort + "'");
}

Manifest generate_cohort(const CohortSpec &spec, const std::filesystem::path &out_dir) {
    const int nc = spec.controls, np = spec.patients.patients;
    if (nc < 0 || np < 0 || nc + np < 1) throw DomainError("generate_cohort: need at least one subject");
    if (np > 0 && spec.patients.lesions < np) throw DomainError("generate_cohort: every patient needs a lesion");
    if (np == 0 && spec.patients.lesions > 0) throw DomainError("generate_cohort: lesions requested without patients");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    Manifest m;
    m.subjects.resize(static_cast<size_t>(nc + np));
    char buf[32];
    for (int i = 0; i < nc + np; ++i) {
        auto &r = m.subjects[static_cast<size_t>(i)];
        const bool patient = i >= nc;
        const int j = patient ? i - nc : i;
        std::snprintf(buf, sizeof buf, "%s_%03d", patient ? "patient" : "control", j);
        r.id = buf;
        r.cohort = patient ? "patient" : "control";
        r.seed = subject_seed(spec.base_seed, r.cohort, j);
    }

    std::vector<std::exception_ptr> errors(m.subjects.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (int i = 0; i < nc + np; ++i) {
        auto &r = m.subjects[static_cast<size_t>(i)];
        try {
            PhantomSpec ps = spec.base;
            ps.seed = r.seed;
            ps.lesions.clear();
            if (r.cohort == "patient") {
                const int j = i - nc;
                const int k = spec.patients.lesions / np + (j < spec.patients.lesions % np ? 1 : 0);
                ps.lesions = place_lesions(ps, k, spec.patients.radius_mm, spec.patients.depth, r.seed ^ 0x1e5105ull);
            }
            auto out = generate(ps);
            r.lesions = ps.lesions;
            r.t1 = r.id + "_t1.rv";
            r.pet = r.id + "_pet.rv";
            vol::store_volume(out.t1, out_dir / r.t1);
            vol::store_volume(out.pet, out_dir / r.pet);
            for (size_t k = 0; k < out.lesion_masks.size(); ++k) {
                r.lesion_masks.emplace_back(r.id + "_lesion" + std::to_string(k) + ".rv");
                vol::store_volume(out.lesion_masks[k], out_dir / r.lesion_masks.back());
            }
        } catch (...) {
            errors[static_cast<size_t>(i)] = std::current_exception();
        }
    }
    for (auto &e : errors)
        if (e) std::rethrow_exception(e);

    write_manifest(m, out_dir / "manifest.json");
    for (auto &r : m.subjects) {
        r.t1 = out_dir / r.t1;
        r.pet = out_dir / r.pet;
        for (auto &p : r.lesion_masks) p = out_dir / p;
    }
    return m;
}

void write_manifest(const Manifest &m, const std::filesystem::path &path) {
    nlohmann::ordered_json subjects = nlohmann::ordered_json::array();
    for (const auto &r : m.subjects) {
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["cohort"] = r.cohort;
        j["seed"] = r.seed;
        j["t1"] = r.t1.generic_string();
        j["pet"] = r.pet.generic_string();
        j["lesion_masks"] = nlohmann::ordered_json::array();
        for (const auto &p : r.lesion_masks) j["lesion_masks"].push_back(p.generic_string());
        j["lesions"] = nlohmann::ordered_json::array();
        for (const auto &l : r.lesions)
            j["lesions"].push_back({{"center", l.center}, {"radius_mm", l.radius_mm}, {"depth", l.depth}});
        subjects.push_back(std::move(j));
    }
    nlohmann::ordered_json root;
    root["subjects"] = std::move(subjects);
    root["lesion_count"] = m.lesion_count();
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest " + path.string());
    os << root.dump(2) << "\n";
    if (!os) throw IoError("failed writing manifest " + path.string());
}

Manifest read_manifest(const std::filesystem::path &path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest " + path.string());
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception &e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
    const auto base = path.parent_path();
    auto resolve = [&](const std::string &p) {
        std::filesystem::path q(p);
        return q.is_absolute() ? q : base / q;
    };
    Manifest m;
    try {
        for (const auto &j : root.at("subjects")) {
            SubjectRecord r;
            r.id = j.at("id").get<std::string>();
            r.cohort = j.at("cohort").get<std::string>();
            r.seed = j.value("seed", std::uint64_t{0});
            r.t1 = resolve(j.at("t1").get<std::string>());
            r.pet = resolve(j.at("pet").get<std::string>());
            for (const auto &p : j.at("lesion_masks")) r.lesion_masks.push_back(resolve(p.get<std::string>()));
            if (j.contains("lesions"))
                for (const auto &l : j["lesions"])
                    r.lesions.push_back({l.at("center").get<std::array<double, 3>>(), l.at("radius_mm").get<double>(),
                                         l.at("depth").get<double>()});
            m.subjects.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception &e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
    return m;
}

} // namespace petsynth::phantom
