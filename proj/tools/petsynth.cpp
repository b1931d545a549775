// petsynth: phantom generation, GAN training/synthesis, metrics and the anomaly-detection recipes.
// Exit codes: 0 success, 1 validation/domain error, 2 I/O or configuration error.

#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "petsynth/common/error.hpp"
#include "petsynth/pipeline/pipeline.hpp"
#include "petsynth/quality/quality.hpp"

namespace fs = std::filesystem;
using namespace petsynth;

namespace {

// Flags write into the same key space as the config file; flags win.
struct Settings {
    std::string config;
    std::map<std::string, std::string> overrides;

    void flag(CLI::App *app, const std::string &name, const std::string &key, const std::string &help) {
        app->add_option_function<std::string>(name, [this, key](const std::string &v) { overrides[key] = v; }, help);
    }

    KeyValueConfig load() const {
        KeyValueConfig kv = config.empty() ? KeyValueConfig{} : KeyValueConfig::load(config);
        for (const auto &[k, v] : overrides) kv.set(k, v);
        return kv;
    }
};

void finish(KeyValueConfig &kv, const fs::path &dir) {
    kv.reject_unknown();
    fs::create_directories(dir);
    kv.write_snapshot(dir / "config.resolved");
}

vol::Dims parse_dims(const std::string &s) {
    std::vector<int> v;
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ',');) {
        try {
            v.push_back(std::stoi(tok));
        } catch (const std::exception &) {
            throw IoError("dims: expected N or NX,NY,NZ, got '" + s + "'");
        }
    }
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw IoError("dims: expected N or NX,NY,NZ, got '" + s + "'");
}

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// ---- commands ---------------------------------------------------------------------------------

void run_phantom_gen(const Settings &st) {
    auto kv = st.load();
    phantom::CohortSpec cs;
    cs.controls = kv.get_int("n", 4);
    cs.patients.patients = kv.get_int("patients", 0);
    cs.patients.lesions = kv.get_int("lesions", cs.patients.patients);
    cs.patients.depth = kv.get_double("depth", 0.3);
    cs.patients.radius_mm = kv.get_double("radius_mm", 4.0);
    cs.base_seed = kv.get_u64("seed", 1);
    cs.base.dims = parse_dims(kv.get_string("dims", "48"));
    const float sp = static_cast<float>(kv.get_double("spacing", 1.0));
    cs.base.spacing = {sp, sp, sp};
    cs.base.noise_sigma = kv.get_double("noise_sigma", cs.base.noise_sigma);
    const fs::path out = kv.require_string("out");
    finish(kv, out);
    const auto m = phantom::generate_cohort(cs, out);
    std::printf("wrote %zu subjects, %zu lesion masks to %s\n", m.subjects.size(), m.lesion_count(), out.string().c_str());
}

void run_train_gan(const Settings &st) {
    auto kv = st.load();
    auto recipe = pipeline::gan_recipe_from(kv);
    const auto manifest = phantom::read_manifest(kv.require_string("manifest"));
    const fs::path out = kv.require_string("out");
    kv.get_string("reference_pet", "");
    recipe.train.out_dir = out;
    finish(kv, out);
    syn::GanBundle bundle(recipe.gan);
    const auto res = pipeline::train_gan(bundle, manifest, recipe);
    std::printf("trained %zu epochs; best epoch %d, validation SSIM %.4f\n", res.epochs.size(), res.best_epoch,
                res.best_val_ssim);
}

void run_synthesize(const Settings &st) {
    auto kv = st.load();
    const auto bundle = syn::GanBundle::load(kv.require_string("checkpoint"));
    const auto ref = vol::load_volume(kv.require_string("reference_pet"));
    syn::SynthesisOptions opt;
    opt.fwhm_mm = kv.get_double("fwhm_mm", opt.fwhm_mm);
    opt.batch = kv.get_int("batch", opt.batch);
    const fs::path out = kv.require_string("out");
    if (kv.has("manifest")) {
        const auto m = phantom::read_manifest(kv.require_string("manifest"));
        finish(kv, out);
        const auto syn_m = pipeline::synthesize_manifest(bundle, m, ref, out, opt);
        pipeline::write_manifest_relative(syn_m, out / "manifest.json");
        std::printf("synthesized %zu subjects into %s\n", syn_m.subjects.size(), out.string().c_str());
        return;
    }
    const auto t1 = vol::load_volume(kv.require_string("t1"));
    const fs::path dir = out.parent_path().empty() ? fs::path(".") : out.parent_path();
    kv.reject_unknown();
    fs::create_directories(dir);
    kv.write_snapshot(fs::path(out.string() + ".config.resolved"));
    vol::store_volume(syn::synthesize_volume(bundle, t1, ref, opt), out);
    std::printf("wrote %s\n", out.string().c_str());
}

void run_metrics(const Settings &st, const std::vector<std::string> &pred, const std::vector<std::string> &ref) {
    auto kv = st.load();
    const fs::path out = kv.require_string("out");
    finish(kv, out);
    if (pred.size() != ref.size() || pred.empty()) throw DomainError("metrics: --pred and --ref need the same non-zero count");
    quality::FeatureMetricSpec spec;
    spec.initialize();
    quality::MetricReport rep;
    std::string csv = "name,mse,psnr,ssim,lpips\n";
    for (size_t i = 0; i < pred.size(); ++i) {
        const auto p = vol::load_volume(pred[i]);
        const auto r = vol::load_volume(ref[i]);
        rep.entries.push_back(quality::evaluate_pair(fs::path(pred[i]).stem().string(), p, r, spec));
        const auto &e = rep.entries.back();
        csv += e.name + "," + num(e.mse) + "," + num(e.psnr) + "," + num(e.ssim) + "," + num(e.lpips) + "\n";
    }
    write_text(out / "metrics.csv", csv);
    nlohmann::ordered_json j;
    auto put = [&](const char *k, quality::Summary s) { j[k] = {{"mean", s.mean}, {"std", s.std}}; };
    put("mse", rep.mse());
    put("psnr", rep.psnr());
    put("ssim", rep.ssim());
    put("lpips", rep.lpips());
    write_text(out / "metrics.json", j.dump(2) + "\n");
    std::printf("ssim %.4f  psnr %.3f  mse %.6f  lpips %.4f\n", rep.ssim().mean, rep.psnr().mean, rep.mse().mean,
                rep.lpips().mean);
}

void run_train_uad(const Settings &st) {
    auto kv = st.load();
    const auto recipe = pipeline::uad_recipe_from(kv);
    const auto manifest = phantom::read_manifest(kv.require_string("manifest"));
    const int count = kv.get_int("count", 0);
    const fs::path out = kv.require_string("out");
    finish(kv, out);
    auto subjects = pipeline::select(manifest, recipe.cohort);
    if (count > 0 && static_cast<size_t>(count) < subjects.size()) subjects.resize(static_cast<size_t>(count));
    std::vector<uad::SubjectVolumes> vols;
    std::vector<std::string> ids;
    for (const auto *s : subjects) {
        vols.push_back(pipeline::load_subject(*s));
        ids.push_back(s->id);
    }
    uad::UadTrainResult log;
    const auto models = pipeline::train_uad(vols, ids, recipe, &log);
    pipeline::save_models(models, out);
    std::string csv = "step,val_rec\n";
    for (const auto &[step, v] : log.validation) csv += std::to_string(step) + "," + num(v) + "\n";
    write_text(out / "uad_log.csv", csv);
    std::printf("trained on %zu subjects; best step %d (val %.6f); %zu voxel models\n", ids.size(), log.best_step,
                log.best_val, models.bank.size());
}

void run_score(const Settings &st, const std::vector<std::string> &wanted) {
    auto kv = st.load();
    const auto models = pipeline::load_models(kv.require_string("bank"));
    const auto manifest = phantom::read_manifest(kv.require_string("manifest"));
    const auto cohort = kv.get_string("cohort", "all");
    const int target = kv.get_int("target_clusters", 10);
    const fs::path out = kv.require_string("out");
    finish(kv, out);
    const std::set<std::string> ids(wanted.begin(), wanted.end());
    int done = 0;
    for (const auto *r : pipeline::select(manifest, cohort)) {
        if (!ids.empty() && !ids.count("all") && !ids.count(r->id)) continue;
        const auto s = pipeline::load_subject(*r);
        const auto sc = pipeline::score_subject(models, s, target);
        vol::store_volume(sc.scores, out / (r->id + "_score.rv"));
        vol::store_volume(anomaly::label_map(sc.clusters, s.t1.spacing), out / (r->id + "_clusters.rv"));
        anomaly::write_cluster_json(sc.clusters, out / (r->id + "_clusters.json"));
        ++done;
    }
    if (done == 0) throw DomainError("score: no matching subject");
    std::printf("scored %d subjects into %s\n", done, out.string().c_str());
}

void run_ood(const Settings &st, const std::vector<std::string> &cohorts) {
    auto kv = st.load();
    const auto recipe = pipeline::uad_recipe_from(kv);
    const auto models = pipeline::load_models(kv.require_string("models"));
    const auto id_label = kv.get_string("id_label", "train-ID");
    const fs::path out = kv.require_string("out");
    finish(kv, out);
    if (cohorts.empty()) throw DomainError("ood: at least one --cohorts entry is required");
    std::vector<pipeline::CohortInput> in;
    for (const auto &c : cohorts) {
        // label=manifest[:cohort]
        const auto eq = c.find('=');
        if (eq == std::string::npos || eq == 0) throw IoError("ood: cohort entry must be label=manifest[:cohort], got '" + c + "'");
        std::string path = c.substr(eq + 1), sub;
        if (const auto colon = path.rfind(':');
            colon != std::string::npos && path.substr(colon + 1).find_first_of("/.") == std::string::npos) {
            sub = path.substr(colon + 1);
            path = path.substr(0, colon);
        }
        in.push_back({c.substr(0, eq), phantom::read_manifest(path), sub});
    }
    anomaly::IdRange range;
    const auto rows = pipeline::ood_report(models, in, recipe, id_label, &range);
    anomaly::write_ood_csv(rows, out / "ood.csv");
    std::map<std::string, std::pair<double, int>> mean;
    for (const auto &r : rows) {
        mean[r.cohort].first += r.dm_normalized;
        mean[r.cohort].second += 1;
    }
    std::printf("%s raw range [%.6g, %.6g]\n", id_label.c_str(), range.min, range.max);
    for (const auto &[label, v] : mean) std::printf("  %-14s mean normalized D_m %.4f (%d)\n", label.c_str(), v.first / v.second, v.second);
}

void run_detect(const Settings &st) {
    auto kv = st.load();
    const fs::path scores = kv.require_string("scores");
    const auto manifest = phantom::read_manifest(kv.require_string("truth"));
    const int target = kv.get_int("target_clusters", 10);
    const fs::path out = kv.require_string("out");
    finish(kv, out);
    std::vector<anomaly::ClusterReport> reports;
    std::vector<anomaly::SubjectTruth> truth;
    for (const auto &r : manifest.subjects) {
        if (r.lesion_masks.empty()) continue;
        reports.push_back(anomaly::extract_clusters(vol::load_volume(scores / (r.id + "_score.rv")), target));
        anomaly::SubjectTruth t{r.id, {}};
        for (const auto &p : r.lesion_masks) t.lesion_masks.push_back(vol::load_volume(p));
        truth.push_back(std::move(t));
    }
    if (truth.empty()) throw DomainError("detect: manifest has no lesions");
    const auto s = anomaly::evaluate_detection(reports, truth);
    anomaly::write_detection_csv(s, out / "detections.csv");
    nlohmann::ordered_json j;
    j["lesions"] = s.total;
    j["detected"] = s.detected;
    j["sensitivity"] = s.sensitivity;
    j["mean_rank"] = s.mean_rank;
    write_text(out / "detection_summary.json", j.dump(2) + "\n");
    std::printf("detected %d/%d lesions (sensitivity %.3f), mean rank %.2f\n", s.detected, s.total, s.sensitivity, s.mean_rank);
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"petsynth: T1 to PET synthesis and anomaly detection on phantom cohorts"};
    app.require_subcommand(1);
    int jobs = 0;
    app.add_option("--jobs", jobs, "Worker thread cap (0 = OpenMP default)")->check(CLI::NonNegativeNumber);

    std::map<std::string, Settings> st;
    auto with_config = [&](CLI::App *sub, const std::string &help) {
        sub->add_option("--config", st[sub->get_name()].config, help);
    };

    auto *pg = app.add_subcommand("phantom-gen", "Generate a phantom cohort (RV01 volumes + manifest.json)");
    {
        auto &s = st["phantom-gen"];
        with_config(pg, "Optional key-value config (keys as the flags, with '_' for '-')");
        s.flag(pg, "--n", "n", "Number of controls [4]");
        s.flag(pg, "--patients", "patients", "Number of patients [0]");
        s.flag(pg, "--lesions", "lesions", "Total lesions spread over patients [= patients]");
        s.flag(pg, "--depth", "depth", "Lesion hypometabolism depth [0.3]");
        s.flag(pg, "--radius-mm", "radius_mm", "Lesion radius in mm [4]");
        s.flag(pg, "--dims", "dims", "N or NX,NY,NZ [48]");
        s.flag(pg, "--spacing", "spacing", "Isotropic voxel spacing in mm [1]");
        s.flag(pg, "--noise-sigma", "noise_sigma", "Gaussian noise sigma [0.01]");
        s.flag(pg, "--seed", "seed", "Base seed [1]");
        s.flag(pg, "--out", "out", "Output directory (required)");
    }

    auto *tg = app.add_subcommand("train-gan", "Train a synthesis GAN on the manifest's paired T1/PET volumes");
    {
        auto &s = st["train-gan"];
        with_config(tg, "Key-value config: mode (3d|2.5d), variant (simple|simple+mse|cycle|cycle+mse), epochs, batch, lr, "
                        "lr_schedule (constant|linear-decay), beta1, lambda_cyc, lambda_mse, width_factor, n_blocks, d_layers, "
                        "patch_size, train_stride, steps_per_epoch, checkpoint_every, stop_ssim, eval_batch, seed, cohort, "
                        "val_subjects, manifest, out, reference_pet");
        s.flag(tg, "--manifest", "manifest", "Cohort manifest");
        s.flag(tg, "--out", "out", "Output directory for checkpoints and train_log.csv");
        s.flag(tg, "--epochs", "epochs", "Epoch count");
        s.flag(tg, "--steps-per-epoch", "steps_per_epoch", "Steps per epoch (0 = one pass)");
        s.flag(tg, "--seed", "seed", "Seed");
    }

    auto *sy = app.add_subcommand("synthesize", "Synthesize PET from T1 with a trained checkpoint");
    {
        auto &s = st["synthesize"];
        with_config(sy, "Optional key-value config");
        s.flag(sy, "--checkpoint", "checkpoint", "NDT1 GAN checkpoint (required)");
        s.flag(sy, "--t1", "t1", "Input T1 volume (single-volume mode)");
        s.flag(sy, "--manifest", "manifest", "Synthesize every subject; writes <out>/manifest.json");
        s.flag(sy, "--ref-pet", "reference_pet", "Histogram-matching reference PET (required)");
        s.flag(sy, "--fwhm-mm", "fwhm_mm", "Post-smoothing FWHM in mm [1.5]");
        s.flag(sy, "--out", "out", "Output volume (or directory with --manifest)");
    }

    std::vector<std::string> pred, ref;
    auto *me = app.add_subcommand("metrics", "MSE, PSNR, SSIM and LPIPS of predictions against references");
    {
        auto &s = st["metrics"];
        me->add_option("--pred", pred, "Predicted volumes")->required();
        me->add_option("--ref", ref, "Reference volumes, same order")->required();
        s.flag(me, "--out", "out", "Output directory for metrics.csv and metrics.json");
    }

    auto *tu = app.add_subcommand("train-uad", "Train the siamese autoencoder and per-voxel OC-SVM bank");
    {
        auto &s = st["train-uad"];
        with_config(tu, "Key-value config: steps, batch, lr, alpha, val_fraction, eval_every, seed, patches_per_subject, nu, "
                        "gamma, eps_scale, mse_samples, target_clusters, cohort, count, manifest, out");
        s.flag(tu, "--manifest", "manifest", "Training cohort manifest");
        s.flag(tu, "--cohort", "cohort", "Manifest cohort used for training [control]");
        s.flag(tu, "--count", "count", "Use the first N subjects of the cohort (0 = all)");
        s.flag(tu, "--steps", "steps", "Training steps [2000]");
        s.flag(tu, "--nu", "nu", "OC-SVM nu, needs nu * subjects >= 1 [0.05]");
        s.flag(tu, "--seed", "seed", "Seed [1]");
        s.flag(tu, "--out", "out", "Model directory");
    }

    std::vector<std::string> subjects;
    auto *sc = app.add_subcommand("score", "Per-voxel anomaly scores and ranked clusters");
    {
        auto &s = st["score"];
        with_config(sc, "Optional key-value config");
        s.flag(sc, "--bank", "bank", "Model directory from train-uad");
        s.flag(sc, "--manifest", "manifest", "Manifest with the subjects to score");
        sc->add_option("--subject", subjects, "Subject id(s) or 'all' [all]");
        s.flag(sc, "--cohort", "cohort", "Restrict to a manifest cohort [all]");
        s.flag(sc, "--target-clusters", "target_clusters", "Cluster budget [10]");
        s.flag(sc, "--out", "out", "Output directory");
    }

    std::vector<std::string> cohorts;
    auto *od = app.add_subcommand("ood", "Global reconstruction MSE and normalized Mahalanobis distance per subject");
    {
        auto &s = st["ood"];
        with_config(od, "Optional key-value config (eps_scale, mse_samples, seed, id_label, ...)");
        s.flag(od, "--models", "models", "Model directory from train-uad");
        od->add_option("--cohorts", cohorts, "label=manifest[:cohort] entries")->required();
        s.flag(od, "--id-label", "id_label", "Label whose raw range normalizes D_m [train-ID]");
        s.flag(od, "--id-distance", "id_distance", "Training subjects' distance: loo or in_sample [loo]");
        s.flag(od, "--seed", "seed", "Patch sampling seed for the MSE");
        s.flag(od, "--out", "out", "Output directory for ood.csv");
    }

    auto *de = app.add_subcommand("detect", "Cluster score maps and evaluate against lesion masks");
    {
        auto &s = st["detect"];
        with_config(de, "Optional key-value config");
        s.flag(de, "--scores", "scores", "Directory with <id>_score.rv maps");
        s.flag(de, "--truth", "truth", "Manifest with lesion masks");
        s.flag(de, "--target-clusters", "target_clusters", "Cluster budget [10]");
        s.flag(de, "--out", "out", "Output directory");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (jobs > 0) omp_set_num_threads(jobs);

    try {
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "phantom-gen") run_phantom_gen(st[cmd]);
        else if (cmd == "train-gan") run_train_gan(st[cmd]);
        else if (cmd == "synthesize") run_synthesize(st[cmd]);
        else if (cmd == "metrics") run_metrics(st[cmd], pred, ref);
        else if (cmd == "train-uad") run_train_uad(st[cmd]);
        else if (cmd == "score") run_score(st[cmd], subjects);
        else if (cmd == "ood") run_ood(st[cmd], cohorts);
        else if (cmd == "detect") run_detect(st[cmd]);
    } catch (const IoError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DomainError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
