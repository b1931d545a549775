#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "petsynth/volume/volume.hpp"

namespace petsynth::phantom {

enum Tissue : std::uint8_t { Background = 0, Csf = 1, Gray = 2, White = 3, DeepGray = 4 };

struct Lesion {
    std::array<double, 3> center{0, 0, 0}; // voxel coordinates (x, y, z)
    double radius_mm = 4.0;
    double depth = 0.3; // PET inside the sphere is scaled by (1 - depth)
};

struct PhantomSpec {
    vol::Dims dims{48, 48, 48};
    vol::Spacing spacing{1.0f, 1.0f, 1.0f};
    std::uint64_t seed = 1;
    double noise_sigma = 0.01;
    double pet_fwhm_mm = 2.5;
    double gain_amplitude = 0.1; // PET gain field stays in [1 - a, 1 + a]
    std::vector<Lesion> lesions;
};

struct PhantomOutput {
    vol::Volume3D t1, pet;
    std::vector<vol::Volume3D> lesion_masks; // 0/1 per lesion
    std::vector<std::uint8_t> tissue;
};

// Deterministic in the spec. Anatomy depends only on (dims, spacing, seed), so a patient and its
// control twin share T1 exactly. Throws DomainError when a lesion sphere leaves the brain mask.
PhantomOutput generate(const PhantomSpec &spec);

// Tissue label per voxel (Background outside the brain). Depends only on (dims, spacing, seed).
std::vector<std::uint8_t> tissue_labels(const PhantomSpec &spec);

// Voxels inside a sphere of radius_mm around center (ties at the boundary included).
std::vector<std::int64_t> sphere_voxels(const vol::Dims &dims, const vol::Spacing &spacing,
                                        const std::array<double, 3> &center, double radius_mm);

struct LesionPolicy {
    int patients = 0;
    int lesions = 0; // distributed round-robin, at least one per patient
    double depth = 0.3;
    double radius_mm = 4.0;
};

struct CohortSpec {
    int controls = 4;
    LesionPolicy patients;
    std::uint64_t base_seed = 1;
    PhantomSpec base; // dims, spacing, noise; seed and lesions are filled per subject
};

struct SubjectRecord {
    std::string id;
    std::string cohort; // "control" or "patient"
    std::uint64_t seed = 0;
    std::filesystem::path t1, pet;
    std::vector<std::filesystem::path> lesion_masks;
    std::vector<Lesion> lesions;
};

struct Manifest {
    std::vector<SubjectRecord> subjects;
    size_t lesion_count() const;
    std::vector<const SubjectRecord *> cohort(const std::string &name) const;
};

// Seeds for subject i: controls use base_seed + i; patients use base_seed + 1000003 + j.
std::uint64_t subject_seed(std::uint64_t base_seed, const std::string &cohort, int index);

// Picks lesion centers whose spheres fit inside the brain and overlap gray matter; deterministic in seed.
std::vector<Lesion> place_lesions(const PhantomSpec &anatomy, int count, double radius_mm, double depth,
                                  std::uint64_t seed);

// Writes every subject (RV01) and manifest.json into out_dir.
Manifest generate_cohort(const CohortSpec &spec, const std::filesystem::path &out_dir);

void write_manifest(const Manifest &m, const std::filesystem::path &path);
// Relative paths are resolved against the manifest's directory.
Manifest read_manifest(const std::filesystem::path &path);

} // namespace petsynth::phantom
