#pragma once

// Glue between the modules for the command-line recipes: cohort loading, UAD training,
// scoring and OOD reports.

#include <filesystem>
#include <string>
#include <vector>

#include "petsynth/anomaly/anomaly.hpp"
#include "petsynth/common/kvconfig.hpp"
#include "petsynth/ocsvm/ocsvm.hpp"
#include "petsynth/phantom/phantom.hpp"
#include "petsynth/synthesis/gan.hpp"
#include "petsynth/uad/uad.hpp"

namespace petsynth::pipeline {

// Both channels normalized with the clipped-quantile rule.
uad::SubjectVolumes load_subject(const phantom::SubjectRecord &r);

std::vector<const phantom::SubjectRecord *> select(const phantom::Manifest &m, const std::string &cohort);

// Writes the manifest with paths relative to its own directory.
void write_manifest_relative(phantom::Manifest m, const std::filesystem::path &path);

// ---- synthesis ----

struct GanRecipe {
    syn::GanConfig gan;
    syn::TrainConfig train;
    std::string cohort = "control";
    int val_subjects = 1; // last subjects of the cohort held out for validation
};
GanRecipe gan_recipe_from(KeyValueConfig &kv);

syn::TrainResult train_gan(syn::GanBundle &bundle, const phantom::Manifest &m, const GanRecipe &recipe);

// Replaces every PET in the manifest by its synthesis from T1; files go to out_dir.
phantom::Manifest synthesize_manifest(const syn::GanBundle &bundle, const phantom::Manifest &m,
                                      const vol::Volume3D &reference_pet, const std::filesystem::path &out_dir,
                                      const syn::SynthesisOptions &opt = {});

// ---- anomaly detection ----

struct UadRecipe {
    uad::UadTrainConfig train;
    int patches_per_subject = 400;
    ocsvm::FitOptions svm;
    anomaly::StatsOptions stats;
    anomaly::OodMseOptions mse;
    int target_clusters = 10;
    std::string cohort = "control";
    // Training subjects in the ID cohort get their distance to statistics fitted without them.
    bool id_leave_one_out = true;
};
UadRecipe uad_recipe_from(KeyValueConfig &kv);

struct UadModels {
    uad::SiameseAE model;
    ocsvm::ModelBank bank;
    std::vector<std::string> train_ids;
    std::vector<uad::LatentMap> train_latents;
};

UadModels train_uad(const std::vector<uad::SubjectVolumes> &subjects, const std::vector<std::string> &ids,
                    const UadRecipe &recipe, uad::UadTrainResult *log = nullptr);

// dir/uad.ndt, dir/bank.ocs, dir/latents/<id>.lat, dir/train_ids.txt
void save_models(const UadModels &m, const std::filesystem::path &dir);
UadModels load_models(const std::filesystem::path &dir);

struct SubjectScore {
    vol::Volume3D scores;
    anomaly::ClusterReport clusters;
};
SubjectScore score_subject(const UadModels &m, const uad::SubjectVolumes &s, int target_clusters = 10);

// One row per subject of every (label, manifest) pair; raw D_m normalized against `id_label`.
struct CohortInput {
    std::string label;
    phantom::Manifest manifest;
    std::string cohort; // subjects of this manifest cohort; empty = all
};
std::vector<anomaly::OodRow> ood_report(const UadModels &m, const std::vector<CohortInput> &cohorts,
                                        const UadRecipe &recipe, const std::string &id_label,
                                        anomaly::IdRange *range = nullptr);

} // namespace petsynth::pipeline
