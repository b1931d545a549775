#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "petsynth/ocsvm/ocsvm.hpp"
#include "petsynth/uad/uad.hpp"
#include "petsynth/volume/volume.hpp"

namespace petsynth::anomaly {

// ---- global reconstruction error -------------------------------------------------------------

// Maps a (B, 2, 15, 15) batch to its reconstruction.
using PatchReconstructor = std::function<nd::Tensor(const nd::Tensor &)>;

struct OodMseOptions {
    int samples = 2000; // patch centers drawn from the valid voxels; <= 0 uses all of them
    std::uint64_t seed = 1;
    int batch = 256;
};

// Mean over sampled patches of the two per-channel reconstruction MSEs, averaged.
double ood_mse(const PatchReconstructor &rec, const vol::Volume3D &t1, const vol::Volume3D &pet,
               const OodMseOptions &opt = {});
double ood_mse(const uad::SiameseAE &model, const vol::Volume3D &t1, const vol::Volume3D &pet,
               const OodMseOptions &opt = {});

// ---- Mahalanobis distance ----------------------------------------------------------------------

struct StatsOptions {
    double eps_scale = 1e-3;  // eps = eps_scale * trace(Sigma) / 64
    double eps_floor = 1e-10; // keeps a zero-covariance voxel positive definite
};

constexpr int kPacked = uad::kLatentDim * (uad::kLatentDim + 1) / 2;

// Per-voxel mean and Cholesky factor of Sigma + eps I, over the training maps covering the voxel (>= 2).
struct VoxelStats {
    vol::Dims dims{0, 0, 0};
    std::vector<std::array<int, 3>> voxels;
    std::vector<std::uint32_t> count; // subjects per voxel
    std::vector<double> mean;         // n x 64
    std::vector<double> eps;          // n
    std::vector<double> chol;         // n x kPacked, lower triangle row-major

    size_t size() const { return voxels.size(); }
    std::vector<std::int32_t> lookup() const;
    // Sigma (without eps) rebuilt from the factor, 64 x 64 row-major.
    std::vector<double> covariance(size_t i) const;
    // (z - mu)' (Sigma + eps I)^-1 (z - mu) at stats voxel i.
    double distance(size_t i, const float *z) const;
};

VoxelStats fit_voxel_stats(const std::vector<uad::LatentMap> &training, const StatsOptions &opt = {});

// Mean per-voxel distance over the map's voxels that have statistics.
double mahalanobis_raw(const VoxelStats &stats, const uad::LatentMap &map);
// Serial reference of mahalanobis_raw.
double mahalanobis_raw_serial(const VoxelStats &stats, const uad::LatentMap &map);

// Distance of each training map to statistics fitted on the others. In-sample distances are
// bounded by about N when N < 64 and say little about unseen subjects.
std::vector<double> mahalanobis_raw_loo(const std::vector<uad::LatentMap> &training, const StatsOptions &opt = {});

struct IdRange {
    double min = 0.0, max = 0.0;
};
// (raw - min) / (2 max - min)
double normalize_dm(double raw, const IdRange &range);
double mahalanobis_dm(const VoxelStats &stats, const uad::LatentMap &map, const IdRange &range);

struct OodRow {
    std::string subject, cohort;
    double mse = 0.0, dm_raw = 0.0, dm_normalized = 0.0;
};

// Fills dm_normalized from the raw range of rows whose cohort equals `id_cohort`.
IdRange normalize_report(std::vector<OodRow> &rows, const std::string &id_cohort);
void write_ood_csv(const std::vector<OodRow> &rows, const std::filesystem::path &path);

// ---- per-voxel scores and clusters ------------------------------------------------------------

// Decision value per voxel; the mask marks voxels that have both a model and a latent.
vol::Volume3D score_map(const ocsvm::ModelBank &bank, const uad::LatentMap &map);
vol::Volume3D score_map_serial(const ocsvm::ModelBank &bank, const uad::LatentMap &map);

struct Cluster {
    std::vector<std::int64_t> voxels; // sorted linear indices
    double mean_score = 0.0;
    int size_rank = 0, score_rank = 0;
    int rank = 0;
    std::array<int, 3> lo{}, hi{}; // inclusive bounding box

    size_t size() const { return voxels.size(); }
};

struct ClusterReport {
    vol::Dims dims{0, 0, 0};
    double threshold = 0.0; // kept voxels score <= threshold (< 0 when threshold is 0)
    std::vector<Cluster> clusters; // ordered by rank
};

// Connected components of the voxels selected by `keep`; 26- or 6-connectivity.
std::vector<std::vector<std::int64_t>> connected_components(const vol::Dims &dims, const std::vector<std::uint8_t> &keep,
                                                            int connectivity = 26);

// Lowers the threshold through the negative scores, most negative first, and stops before the
// (target_n + 1)-th component would appear. The result is monotone in target_n.
ClusterReport extract_clusters(const vol::Volume3D &scores, int target_n = 10, int connectivity = 26);

// Ranks 1..n by the mean of the size rank and the negativity rank; ties go to the more negative mean,
// then the larger cluster, then the lowest voxel index. Sets rank fields and returns the new order.
std::vector<Cluster> rank_clusters(std::vector<Cluster> clusters);

// Cluster rank per voxel (0 = background).
vol::Volume3D label_map(const ClusterReport &report, const vol::Spacing &spacing = {1, 1, 1});
void write_cluster_json(const ClusterReport &report, const std::filesystem::path &path);

struct LesionVerdict {
    std::string subject;
    int lesion = 0;
    bool detected = false;
    int rank = 0; // best overlapping cluster rank; 0 when missed
};

struct DetectionSummary {
    std::vector<LesionVerdict> lesions;
    int detected = 0, total = 0;
    double sensitivity = 0.0;
    double mean_rank = 0.0; // over detected lesions; 0 when none
};

struct SubjectTruth {
    std::string subject;
    std::vector<vol::Volume3D> lesion_masks;
};

DetectionSummary evaluate_detection(const std::vector<ClusterReport> &reports, const std::vector<SubjectTruth> &truth);
void write_detection_csv(const DetectionSummary &s, const std::filesystem::path &path);

} // namespace petsynth::anomaly
