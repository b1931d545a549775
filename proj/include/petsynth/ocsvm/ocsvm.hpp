#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "petsynth/uad/uad.hpp"
#include "petsynth/volume/volume.hpp"

namespace petsynth::ocsvm {

// nu-one-class SVM, RBF kernel. Dual: min 1/2 a'Ka  s.t. 0 <= a_i <= 1/(nu N), sum a = 1.
struct Model {
    int dim = 0;
    double rho = 0.0, gamma = 1.0, nu = 0.05;
    std::uint32_t n_train = 0;
    std::vector<std::uint32_t> index; // training rows kept as support vectors (alpha > 1e-10)
    std::vector<double> alpha;
    std::vector<float> sv; // index.size() x dim

    // sum_i alpha_i exp(-gamma |x_i - z|^2) - rho; negative on the outlier side.
    double decision(std::span<const float> z) const;
    size_t support_size() const { return index.size(); }
};

struct FitOptions {
    double nu = 0.05;
    double gamma = 0.0; // <= 0: 1 / (dim * var), var = mean per-dimension variance of the training rows
    double tol = 1e-6;  // maximal KKT violation at exit
    int max_iter = 100000;
};

struct FitInfo {
    std::vector<double> alpha; // all N coefficients
    double objective = 0.0;    // 1/2 a'Ka
    double max_violation = 0.0;
    int iterations = 0;
};

// Reusable per-thread buffers.
struct Workspace {
    std::vector<double> kernel, grad, alpha;
};

double default_gamma(std::span<const float> x, size_t n, int dim);

// x: n x dim row-major.
Model fit(std::span<const float> x, size_t n, int dim, const FitOptions &opt, FitInfo *info = nullptr,
          Workspace *ws = nullptr);

// One model per voxel covered by enough training maps (count * nu >= 1 and count >= 2).
struct ModelBank {
    vol::Dims dims{0, 0, 0};
    std::vector<std::array<int, 3>> voxels;
    std::vector<Model> models;

    size_t size() const { return voxels.size(); }
    std::vector<std::int32_t> lookup() const;
};

// Parallel across voxels; fit_bank_serial is the single-threaded reference.
ModelBank fit_bank(const std::vector<uad::LatentMap> &maps, const FitOptions &opt);
ModelBank fit_bank_serial(const std::vector<uad::LatentMap> &maps, const FitOptions &opt);

// OCS1: "OCS1" | u32 nx ny nz | u32 dim | u64 voxels | per voxel:
//   i32 x y z | u32 n_train | u32 nsv | f64 rho | f64 gamma | f64 nu | nsv x (u32 index, f64 alpha) | nsv x dim f32
void store_bank(const ModelBank &bank, const std::filesystem::path &path);
ModelBank load_bank(const std::filesystem::path &path);

} // namespace petsynth::ocsvm
