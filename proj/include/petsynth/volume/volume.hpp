#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "petsynth/ndtensor/tensor.hpp"

namespace petsynth::vol {

using Dims = std::array<int, 3>;
using Spacing = std::array<float, 3>;

// Scalar field with x fastest: index = x + nx * (y + ny * z).
struct Volume3D {
    Dims dims{0, 0, 0};
    Spacing spacing{1.0f, 1.0f, 1.0f};
    std::vector<float> data;
    std::optional<std::vector<std::uint8_t>> mask;

    Volume3D() = default;
    Volume3D(Dims d, Spacing s, float fill = 0.0f);

    std::int64_t size() const { return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2]; }
    std::int64_t index(int x, int y, int z) const {
        return x + static_cast<std::int64_t>(dims[0]) * (y + static_cast<std::int64_t>(dims[1]) * z);
    }
    float &at(int x, int y, int z) { return data[static_cast<size_t>(index(x, y, z))]; }
    float at(int x, int y, int z) const { return data[static_cast<size_t>(index(x, y, z))]; }
    bool in_mask(std::int64_t i) const { return !mask || (*mask)[static_cast<size_t>(i)] != 0; }

    // Throws DomainError when buffer lengths disagree with dims.
    void validate() const;
};

// RV01: "RV01" | u32 nx ny nz | f32 spacing x3 | u8 flags (bit0 mask) | f32 data | u8 mask
Volume3D load_volume(const std::filesystem::path &path);
void store_volume(const Volume3D &vol, const std::filesystem::path &path);

// Affine map so min over the mask is 0 and max is 1. Applied to every voxel.
Volume3D minmax_normalize(const Volume3D &vol);

struct TripletStack {
    std::vector<nd::Tensor> triplets; // each (3, ny, nx)
    std::vector<int> z0;              // first slice of each triplet
    Dims source_dims{0, 0, 0};
    Spacing spacing{1.0f, 1.0f, 1.0f};
};

// ceil(nz/3) triplets at z = 0, 3, 6, ... with the last one re-anchored at nz - 3.
std::vector<int> triplet_origins(int nz);
TripletStack extract_triplets(const Volume3D &vol);
// Slice z is owned by the last triplet that contains it.
Volume3D stitch_triplets(const TripletStack &layout, const std::vector<nd::Tensor> &predicted);

struct PatchSet {
    std::vector<nd::Tensor> patches; // each (p, p, p) as (z, y, x)
    std::vector<std::array<int, 3>> origins;
    int patch_size = 0;
    int stride = 0;
    Dims source_dims{0, 0, 0};
    Spacing spacing{1.0f, 1.0f, 1.0f};
};

// Grid origins along one axis; throws naming `axis` when (d - p) is not divisible by s.
std::vector<int> grid_origins(int d, int p, int s, char axis);
std::vector<std::array<int, 3>> patch_origins(const Dims &dims, int p, int s);
PatchSet extract_patches(const Volume3D &vol, int p, int s);
// Layout only: origins without copying data.
PatchSet patch_layout(const Dims &dims, const Spacing &spacing, int p, int s);
// Requires s == p / 2 and p divisible by 4. Each voxel comes from the patch whose central crop holds it,
// or from the nearest patch along each axis in the uncovered outer shell.
Volume3D stitch_patches(const PatchSet &layout, const std::vector<nd::Tensor> &predicted);
// Index of the owning origin along one axis, for n origins spaced p/2 apart.
int stitch_owner(int c, int p, int n);

std::vector<float> gaussian_kernel(double sigma_voxels);
Volume3D gaussian_smooth(const Volume3D &vol, double fwhm_mm);

constexpr int kHistogramBins = 256;
// Remaps voxels inside src's mask so their distribution matches ref over ref's mask.
Volume3D histogram_match(const Volume3D &src, const Volume3D &ref);

} // namespace petsynth::vol
