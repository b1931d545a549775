#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "petsynth/ndtensor/graph.hpp"
#include "petsynth/volume/volume.hpp"

namespace petsynth::uad {

constexpr int kPatch = 15;
constexpr int kHalf = kPatch / 2;
constexpr int kLatentDim = 64;
constexpr int kChannels = 2; // T1, PET

// Values clipped at the given upper quantile of the masked voxels, then mapped min -> 0, quantile -> 1.
// The quantile is the nearest-rank order statistic: sorted[ceil(q * n) - 1].
vol::Volume3D normalize_clipped(const vol::Volume3D &v, double quantile = 0.99);

// Mask voxels whose in-plane 15x15 neighborhood lies inside the volume.
std::vector<std::uint8_t> valid_centers(const vol::Volume3D &t1);

// (2, 15, 15) patch centered at (x, y) of slice z; no bounds padding.
nd::Tensor extract_patch(const vol::Volume3D &t1, const vol::Volume3D &pet, int x, int y, int z);

struct SubjectVolumes {
    vol::Volume3D t1, pet; // normalized
};

// Patches for every subject at shared locations. Sample k of subject s is patch(k, s).
struct PatchBank {
    int subjects = 0;
    std::vector<std::array<int, 3>> locations;
    std::vector<float> data; // [location][subject][channel][15][15]

    size_t size() const { return locations.size(); }
    nd::Tensor patch(size_t location, int subject) const;
    const float *raw(size_t location, int subject) const;
};

// `per_subject` locations drawn uniformly (without replacement) from the centers valid in every subject.
PatchBank sample_training_patches(const std::vector<SubjectVolumes> &subjects, int per_subject, std::uint64_t seed);

struct UadLoss {
    double total = 0.0;
    double rec1 = 0.0, rec2 = 0.0; // branch reconstruction MSE
    double sim = 0.0;              // mean (1 - cos) between branch latents
};

// Shared encoder/decoder: 15 -> 7 -> 3 -> 1 (64 channels) and back. One parameter set serves both branches.
class SiameseAE {
public:
    explicit SiameseAE(std::uint64_t seed = 1);

    nd::ParameterStore &params() { return *store_; }
    const nd::ParameterStore &params() const { return *store_; }

    nd::Var encode(nd::Graph &g, nd::Var x, bool trainable) const;
    nd::Var decode(nd::Graph &g, nd::Var z, bool trainable) const;

    // (B, 2, 15, 15) -> (B, 64)
    nd::Tensor encode(const nd::Tensor &batch) const;
    // (B, 2, 15, 15) -> (B, 2, 15, 15)
    nd::Tensor reconstruct(const nd::Tensor &batch) const;

    // Both branches through the same weights; alpha weights the similarity term.
    UadLoss loss(nd::Graph &g, nd::Var x1, nd::Var x2, double alpha, bool trainable, nd::Var *total = nullptr) const;

    void save(const std::filesystem::path &path) const;
    static SiameseAE load(const std::filesystem::path &path);

private:
    std::unique_ptr<nd::ParameterStore> store_;
};

struct UadTrainConfig {
    int steps = 2000;
    int batch = 32;
    double lr = 1e-3;
    double alpha = 0.1;
    double val_fraction = 0.1; // of locations; 0 validates on the training locations
    int eval_every = 100;
    std::uint64_t seed = 1;
};

struct UadTrainResult {
    std::vector<UadLoss> steps;
    std::vector<std::pair<int, double>> validation; // (step, reconstruction loss)
    int best_step = -1;
    double best_val = 0.0;
};

// Pairs two different subjects at the same location per sample (the same subject when only one exists).
// Keeps the parameters with the lowest validation reconstruction loss.
UadTrainResult train_siamese(SiameseAE &model, const PatchBank &bank, const UadTrainConfig &config);

struct LatentMap {
    vol::Dims dims{0, 0, 0};
    std::vector<std::array<int, 3>> voxels; // x, y, z in scan order
    std::vector<float> z;                   // voxels.size() x 64

    size_t size() const { return voxels.size(); }
    const float *latent(size_t i) const { return z.data() + i * kLatentDim; }
    // Position of voxel index (x + nx*(y + ny*z)) in `voxels`, or -1.
    std::vector<std::int32_t> lookup() const;
};

// Encodes every valid voxel. Parallel over voxel chunks; encode_volume_serial is the reference.
LatentMap encode_volume(const SiameseAE &model, const vol::Volume3D &t1, const vol::Volume3D &pet, int chunk = 512);
LatentMap encode_volume_serial(const SiameseAE &model, const vol::Volume3D &t1, const vol::Volume3D &pet);

// LAT1: "LAT1" | u32 nx ny nz | u64 count | count x (i32 x y z | f32 z[64])
void store_latents(const LatentMap &m, const std::filesystem::path &path);
LatentMap load_latents(const std::filesystem::path &path);

} // namespace petsynth::uad
