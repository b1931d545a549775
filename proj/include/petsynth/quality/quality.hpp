#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petsynth/ndtensor/tensor.hpp"
#include "petsynth/volume/volume.hpp"

namespace petsynth::quality {

// (nz, ny, nx) view of a volume's data.
nd::Tensor as_tensor(const vol::Volume3D &v);

double mse(const nd::Tensor &x, const nd::Tensor &y);
// +infinity when the images are identical.
double psnr(const nd::Tensor &x, const nd::Tensor &y, double max_x = 1.0);

struct SsimOptions {
    double dynamic_range = 1.0;
    int window = 11;        // taps per axis, shortened on axes smaller than this
    double sigma = 1.5;     // in samples
    bool global = false;    // single window over the whole array, uniform weights
};
// Works on arrays of rank 1 to 3 (leading unit axes are ignored).
double ssim(const nd::Tensor &x, const nd::Tensor &y, const SsimOptions &opt = {});

// Fixed-seed stand-in for a pretrained perceptual network: three 3x3 conv + ReLU layers on 2D slices.
// Absolute values are not comparable to published LPIPS numbers.
struct FeatureMetricSpec {
    std::uint64_t seed = 20211;
    std::vector<int> channels{8, 16, 32};
    std::vector<int> strides{1, 2, 2};
    std::vector<std::vector<float>> layer_weights; // per layer, per channel; empty means all ones

    struct Layer {
        int in_channels, out_channels, stride;
        std::vector<float> w, b;
    };
    std::vector<Layer> layers;

    // Draws conv weights from the seed. Must be called before use.
    void initialize();
    bool initialized() const { return !layers.empty(); }
};

// Per-layer activations for a batch of 2D slices: each tensor is (N, C, H, W).
std::vector<nd::Tensor> extract_features(const FeatureMetricSpec &spec, const nd::Tensor &slices);

// sum_l 1/(H_l W_l) sum_hw || w_l * (unit(fy) - unit(fx)) ||^2 for a single sample, features (C, H, W).
double feature_distance(const std::vector<nd::Tensor> &fx, const std::vector<nd::Tensor> &fy,
                        const std::vector<std::vector<float>> &weights);

// Images (H, W) or volumes (D, H, W); volumes average the distance over transverse slices.
double lpips(const nd::Tensor &x, const nd::Tensor &y, const FeatureMetricSpec &spec);

struct WilcoxonResult {
    double statistic = 0.0; // W+ (sum of ranks of positive differences)
    double p_value = 1.0;   // two-tailed
    int n = 0;              // pairs after dropping zero differences
    bool exact = false;
};
constexpr int kWilcoxonExactLimit = 20;
WilcoxonResult wilcoxon_signed_rank(const std::vector<double> &a, const std::vector<double> &b);
// Exact two-tailed p for any n via the rank-sum distribution; used internally for n <= 20.
double wilcoxon_exact_p(const std::vector<double> &ranks, double w_plus);

struct MetricEntry {
    std::string name;
    double mse = 0.0, psnr = 0.0, ssim = 0.0, lpips = 0.0;
};

struct Summary {
    double mean = 0.0, std = 0.0;
};

struct MetricReport {
    std::vector<MetricEntry> entries;
    Summary mse() const;
    Summary psnr() const;
    Summary ssim() const;
    Summary lpips() const;
};

// Mean and sample standard deviation (n - 1; zero for a single value).
Summary summarize(const std::vector<double> &v);

MetricEntry evaluate_pair(const std::string &name, const vol::Volume3D &pred, const vol::Volume3D &truth,
                          const FeatureMetricSpec &spec, const SsimOptions &ssim_opt = {});

} // namespace petsynth::quality
