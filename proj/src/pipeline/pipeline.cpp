#include "petsynth/pipeline/pipeline.hpp"

#include <algorithm>
#include <fstream>

#include "petsynth/common/error.hpp"
#include "petsynth/ndtensor/checkpoint.hpp"

namespace petsynth::pipeline {

namespace fs = std::filesystem;

uad::SubjectVolumes load_subject(const phantom::SubjectRecord &r) {
    auto t1 = vol::load_volume(r.t1);
    auto pet = vol::load_volume(r.pet);
    if (t1.dims != pet.dims) throw DomainError(r.id + ": T1 and PET dimensions differ");
    if (!pet.mask) pet.mask = t1.mask;
    return {uad::normalize_clipped(t1), uad::normalize_clipped(pet)};
}

std::vector<const phantom::SubjectRecord *> select(const phantom::Manifest &m, const std::string &cohort) {
    std::vector<const phantom::SubjectRecord *> out;
    for (const auto &s : m.subjects)
        if (cohort.empty() || cohort == "all" || s.cohort == cohort) out.push_back(&s);
    if (out.empty()) throw DomainError("manifest has no subjects in cohort '" + cohort + "'");
    return out;
}

void write_manifest_relative(phantom::Manifest m, const fs::path &path) {
    const auto base = fs::absolute(path).parent_path();
    auto rel = [&](const fs::path &p) { return fs::absolute(p).lexically_normal().lexically_relative(base); };
    for (auto &s : m.subjects) {
        s.t1 = rel(s.t1);
        s.pet = rel(s.pet);
        for (auto &l : s.lesion_masks) l = rel(l);
    }
    phantom::write_manifest(m, path);
}

// ---- synthesis ----

GanRecipe gan_recipe_from(KeyValueConfig &kv) {
    GanRecipe r;
    r.gan = syn::gan_config_from(kv);
    r.train = syn::train_config_from(kv, r.gan.mode);
    r.cohort = kv.get_string("cohort", r.cohort);
    r.val_subjects = kv.get_int("val_subjects", r.val_subjects);
    if (r.val_subjects < 0) throw DomainError("val_subjects must be >= 0");
    return r;
}

syn::TrainResult train_gan(syn::GanBundle &bundle, const phantom::Manifest &m, const GanRecipe &recipe) {
    const auto subjects = select(m, recipe.cohort);
    const size_t n_val = std::min(static_cast<size_t>(recipe.val_subjects), subjects.size() - 1);
    std::vector<vol::Volume3D> t1, pet, vt1, vpet;
    for (size_t i = 0; i < subjects.size(); ++i) {
        auto a = vol::load_volume(subjects[i]->t1);
        auto b = vol::load_volume(subjects[i]->pet);
        if (i + n_val < subjects.size()) {
            t1.push_back(std::move(a));
            pet.push_back(std::move(b));
        } else {
            vt1.push_back(std::move(a));
            vpet.push_back(std::move(b));
        }
    }
    const auto train = syn::make_dataset(bundle.config(), t1, pet);
    const auto val = syn::make_dataset(bundle.config(), vt1, vpet);
    return syn::train(bundle, train, val, recipe.train);
}

phantom::Manifest synthesize_manifest(const syn::GanBundle &bundle, const phantom::Manifest &m,
                                      const vol::Volume3D &reference_pet, const fs::path &out_dir,
                                      const syn::SynthesisOptions &opt) {
    fs::create_directories(out_dir);
    phantom::Manifest out = m;
    for (auto &s : out.subjects) {
        const auto t1 = vol::load_volume(s.t1);
        auto pet = syn::synthesize_volume(bundle, t1, reference_pet, opt);
        const fs::path path = out_dir / (s.id + "_pet_syn.rv");
        vol::store_volume(pet, path);
        s.pet = path;
    }
    return out;
}

// ---- anomaly detection ----

UadRecipe uad_recipe_from(KeyValueConfig &kv) {
    UadRecipe r;
    r.train.steps = kv.get_int("steps", r.train.steps);
    r.train.batch = kv.get_int("batch", r.train.batch);
    r.train.lr = kv.get_double("lr", r.train.lr);
    r.train.alpha = kv.get_double("alpha", r.train.alpha);
    r.train.val_fraction = kv.get_double("val_fraction", r.train.val_fraction);
    r.train.eval_every = kv.get_int("eval_every", r.train.eval_every);
    r.train.seed = kv.get_u64("seed", r.train.seed);
    r.patches_per_subject = kv.get_int("patches_per_subject", r.patches_per_subject);
    r.svm.nu = kv.get_double("nu", r.svm.nu);
    r.svm.gamma = kv.get_double("gamma", r.svm.gamma);
    r.stats.eps_scale = kv.get_double("eps_scale", r.stats.eps_scale);
    const auto idd = kv.get_string("id_distance", r.id_leave_one_out ? "loo" : "in_sample");
    if (idd != "loo" && idd != "in_sample") throw IoError("id_distance must be 'loo' or 'in_sample', got '" + idd + "'");
    r.id_leave_one_out = idd == "loo";
    r.mse.samples = kv.get_int("mse_samples", r.mse.samples);
    r.mse.seed = r.train.seed;
    r.target_clusters = kv.get_int("target_clusters", r.target_clusters);
    r.cohort = kv.get_string("cohort", r.cohort);
    return r;
}

UadModels train_uad(const std::vector<uad::SubjectVolumes> &subjects, const std::vector<std::string> &ids,
                    const UadRecipe &recipe, uad::UadTrainResult *log) {
    if (subjects.size() != ids.size()) throw DomainError("train_uad: one id per subject is required");
    UadModels m{uad::SiameseAE(recipe.train.seed), {}, ids, {}};
    const auto bank = uad::sample_training_patches(subjects, recipe.patches_per_subject, recipe.train.seed);
    auto res = uad::train_siamese(m.model, bank, recipe.train);
    if (log) *log = std::move(res);
    for (const auto &s : subjects) m.train_latents.push_back(uad::encode_volume(m.model, s.t1, s.pet));
    m.bank = ocsvm::fit_bank(m.train_latents, recipe.svm);
    if (m.bank.models.empty())
        throw DomainError("no voxel model was fitted; nu * subjects must be at least 1 (nu " +
                          std::to_string(recipe.svm.nu) + ", " + std::to_string(m.train_latents.size()) + " subjects)");
    return m;
}

void save_models(const UadModels &m, const fs::path &dir) {
    fs::create_directories(dir / "latents");
    m.model.save(dir / "uad.ndt");
    ocsvm::store_bank(m.bank, dir / "bank.ocs");
    std::ofstream ids(dir / "train_ids.txt", std::ios::trunc);
    if (!ids) throw IoError("cannot write " + (dir / "train_ids.txt").string());
    for (size_t i = 0; i < m.train_ids.size(); ++i) {
        ids << m.train_ids[i] << '\n';
        uad::store_latents(m.train_latents[i], dir / "latents" / (m.train_ids[i] + ".lat"));
    }
    if (!ids) throw IoError("failed writing " + (dir / "train_ids.txt").string());
}

UadModels load_models(const fs::path &dir) {
    UadModels m{uad::SiameseAE::load(dir / "uad.ndt"), ocsvm::load_bank(dir / "bank.ocs"), {}, {}};
    std::ifstream ids(dir / "train_ids.txt");
    if (!ids) throw IoError("cannot open " + (dir / "train_ids.txt").string());
    for (std::string id; std::getline(ids, id);) {
        if (id.empty()) continue;
        m.train_latents.push_back(uad::load_latents(dir / "latents" / (id + ".lat")));
        m.train_ids.push_back(id);
    }
    return m;
}

SubjectScore score_subject(const UadModels &m, const uad::SubjectVolumes &s, int target_clusters) {
    const auto z = uad::encode_volume(m.model, s.t1, s.pet);
    SubjectScore out;
    out.scores = anomaly::score_map(m.bank, z);
    out.scores.spacing = s.t1.spacing;
    out.clusters = anomaly::extract_clusters(out.scores, target_clusters);
    return out;
}

std::vector<anomaly::OodRow> ood_report(const UadModels &m, const std::vector<CohortInput> &cohorts,
                                        const UadRecipe &recipe, const std::string &id_label, anomaly::IdRange *range) {
    const auto stats = anomaly::fit_voxel_stats(m.train_latents, recipe.stats);
    std::vector<double> loo;
    if (recipe.id_leave_one_out && m.train_latents.size() >= 3) loo = anomaly::mahalanobis_raw_loo(m.train_latents, recipe.stats);
    std::vector<anomaly::OodRow> rows;
    for (const auto &c : cohorts)
        for (const auto *r : select(c.manifest, c.cohort)) {
            const auto s = load_subject(*r);
            const auto z = uad::encode_volume(m.model, s.t1, s.pet);
            const auto it = std::find(m.train_ids.begin(), m.train_ids.end(), r->id);
            const bool held = !loo.empty() && c.label == id_label && it != m.train_ids.end();
            const double raw = held ? loo[static_cast<size_t>(it - m.train_ids.begin())] : anomaly::mahalanobis_raw(stats, z);
            rows.push_back({r->id, c.label, anomaly::ood_mse(m.model, s.t1, s.pet, recipe.mse), raw, 0.0});
        }
    const auto rg = anomaly::normalize_report(rows, id_label);
    if (range) *range = rg;
    return rows;
}

} // namespace petsynth::pipeline
