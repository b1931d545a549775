#include "petsynth/synthesis/gan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "petsynth/common/error.hpp"
#include "petsynth/quality/quality.hpp"
#include "petsynth/synthesis/losses.hpp"

namespace petsynth::syn {

std::string to_string(Mode m) { return m == Mode::Slices25D ? "2.5d" : "3d"; }

std::string to_string(Variant v) {
    switch (v) {
    case Variant::Simple: return "simple";
    case Variant::SimpleMse: return "simple+mse";
    case Variant::Cycle: return "cycle";
    case Variant::CycleMse: return "cycle+mse";
    }
    return "?";
}

Mode parse_mode(const std::string &s) {
    if (s == "2.5d" || s == "2.5D") return Mode::Slices25D;
    if (s == "3d" || s == "3D" || s == "3d-patch") return Mode::Patch3D;
    throw IoError("unknown mode '" + s + "' (expected 2.5d or 3d)");
}

Variant parse_variant(const std::string &s) {
    if (s == "simple") return Variant::Simple;
    if (s == "simple+mse") return Variant::SimpleMse;
    if (s == "cycle") return Variant::Cycle;
    if (s == "cycle+mse") return Variant::CycleMse;
    throw IoError("unknown variant '" + s + "' (expected simple, simple+mse, cycle, cycle+mse)");
}

int GanConfig::base_width() const { return std::max(1, static_cast<int>(std::lround(64.0 * width_factor))); }

int GanConfig::resolved_blocks() const {
    if (n_blocks >= 0) return n_blocks;
    return mode == Mode::Slices25D ? 9 : 2;
}

int GanConfig::resolved_d_layers() const {
    if (d_layers > 0) return d_layers;
    return mode == Mode::Patch3D && patch_size < 32 ? 2 : 3;
}

void GanConfig::validate() const {
    if (!(width_factor > 0.0)) throw DomainError("width_factor must be positive");
    if (lambda_cyc < 0.0 || lambda_mse < 0.0) throw DomainError("loss weights must be non-negative");
    if (mode == Mode::Patch3D) {
        if (patch_size < 8 || patch_size % 4 != 0) throw DomainError("patch_size must be a multiple of 4 and >= 8");
        if (train_stride <= 0) throw DomainError("train_stride must be positive");
    }
}

GanBundle::GanBundle(const GanConfig &config) : config_(config) {
    config_.validate();
    build();
}

void GanBundle::build() {
    gen_store_ = std::make_unique<nd::ParameterStore>();
    disc_store_ = std::make_unique<nd::ParameterStore>();
    std::mt19937_64 rng(config_.seed);
    const GeneratorSpec gs{config_.spatial_dims(), config_.channels(), config_.base_width(), config_.resolved_blocks(),
                           2};
    const DiscriminatorSpec ds{config_.spatial_dims(), config_.channels(), config_.base_width(),
                               config_.resolved_d_layers()};
    g_b_ = std::make_unique<Generator>(*gen_store_, "G_B.", gs, rng);
    if (is_cycle(config_.variant)) g_a_ = std::make_unique<Generator>(*gen_store_, "G_A.", gs, rng);
    d_b_ = std::make_unique<Discriminator>(*disc_store_, "D_B.", ds, rng);
    if (is_cycle(config_.variant)) d_a_ = std::make_unique<Discriminator>(*disc_store_, "D_A.", ds, rng);
}

GanBundle GanBundle::identity_stub(Mode mode, int patch_size) {
    GanBundle b;
    b.config_.mode = mode;
    b.config_.patch_size = patch_size;
    b.identity_ = true;
    b.gen_store_ = std::make_unique<nd::ParameterStore>();
    b.disc_store_ = std::make_unique<nd::ParameterStore>();
    return b;
}

nd::Tensor GanBundle::generate(const nd::Tensor &batch) const {
    if (identity_) return batch;
    nd::Graph g;
    nd::Tensor in = batch;
    for (auto &v : in.values()) v = 2.0f * v - 1.0f;
    const auto y = g_b_->forward(g, g.constant(std::move(in)), false);
    nd::Tensor out = g.value(y);
    for (auto &v : out.values()) v = 0.5f * (v + 1.0f);
    return out;
}

namespace {
nd::Tensor scalar(double v) { return nd::Tensor({1}, {static_cast<float>(v)}); }

double meta(const nd::NamedTensors &e, const std::string &key) {
    const auto *t = nd::find_entry(e, "meta." + key);
    if (!t || t->numel() != 1) throw IoError("checkpoint is missing meta." + key);
    return (*t)[0];
}
} // namespace

nd::NamedTensors GanBundle::to_checkpoint() const {
    nd::NamedTensors out{{"meta.identity_stub", scalar(identity_ ? 1 : 0)},
                         {"meta.mode", scalar(config_.mode == Mode::Patch3D ? 1 : 0)},
                         {"meta.variant", scalar(static_cast<int>(config_.variant))},
                         {"meta.base_width", scalar(config_.base_width())},
                         {"meta.n_blocks", scalar(config_.resolved_blocks())},
                         {"meta.d_layers", scalar(config_.resolved_d_layers())},
                         {"meta.patch_size", scalar(config_.patch_size)},
                         {"meta.train_stride", scalar(config_.train_stride)},
                         {"meta.lambda_cyc", scalar(config_.lambda_cyc)},
                         {"meta.lambda_mse", scalar(config_.lambda_mse)}};
    for (const auto &e : nd::snapshot(*gen_store_)) out.push_back(e);
    for (const auto &e : nd::snapshot(*disc_store_)) out.push_back(e);
    return out;
}

GanBundle GanBundle::from_checkpoint(const nd::NamedTensors &entries) {
    const Mode mode = meta(entries, "mode") != 0.0 ? Mode::Patch3D : Mode::Slices25D;
    const int patch = static_cast<int>(meta(entries, "patch_size"));
    if (meta(entries, "identity_stub") != 0.0) return identity_stub(mode, patch);
    GanConfig c;
    c.mode = mode;
    const int variant = static_cast<int>(meta(entries, "variant"));
    if (variant < 0 || variant > 3) throw IoError("checkpoint has an unknown variant");
    c.variant = static_cast<Variant>(variant);
    c.width_factor = meta(entries, "base_width") / 64.0;
    c.n_blocks = static_cast<int>(meta(entries, "n_blocks"));
    c.d_layers = static_cast<int>(meta(entries, "d_layers"));
    c.patch_size = patch;
    c.train_stride = static_cast<int>(meta(entries, "train_stride"));
    c.lambda_cyc = meta(entries, "lambda_cyc");
    c.lambda_mse = meta(entries, "lambda_mse");
    GanBundle b(c);
    nd::restore(*b.gen_store_, entries);
    nd::restore(*b.disc_store_, entries);
    return b;
}

void GanBundle::save(const std::filesystem::path &path) const { nd::save_checkpoint(path, to_checkpoint()); }

GanBundle GanBundle::load(const std::filesystem::path &path) { return from_checkpoint(nd::load_checkpoint(path)); }

TrainConfig TrainConfig::defaults(Mode mode) {
    TrainConfig c;
    if (mode == Mode::Slices25D) {
        c.epochs = 200;
        c.batch_size = 5;
        c.schedule = LrSchedule::LinearDecay;
    } else {
        c.epochs = 100;
        c.batch_size = 10;
        c.schedule = LrSchedule::Constant;
    }
    return c;
}

double TrainConfig::lr_factor(int epoch) const {
    if (schedule == LrSchedule::Constant) return 1.0;
    // Constant for the first half, then linear to zero over the second half.
    const int hold = epochs / 2;
    const int decay = epochs - hold;
    if (epoch < hold || decay <= 0) return 1.0;
    return std::max(0.0, 1.0 - static_cast<double>(epoch - hold + 1) / decay);
}

PairedDataset make_dataset(const GanConfig &config, const std::vector<vol::Volume3D> &t1,
                           const std::vector<vol::Volume3D> &pet) {
    if (t1.size() != pet.size()) throw DomainError("make_dataset: T1 and PET lists differ in length");
    PairedDataset ds;
    for (size_t s = 0; s < t1.size(); ++s) {
        if (t1[s].dims != pet[s].dims) throw DomainError("make_dataset: T1/PET dims differ for subject " + std::to_string(s));
        if (config.mode == Mode::Slices25D) {
            auto ta = vol::extract_triplets(t1[s]);
            auto tb = vol::extract_triplets(pet[s]);
            for (auto &t : ta.triplets) ds.a.push_back(std::move(t));
            for (auto &t : tb.triplets) ds.b.push_back(std::move(t));
        } else {
            const int p = config.patch_size;
            auto pa = vol::extract_patches(t1[s], p, config.train_stride);
            auto pb = vol::extract_patches(pet[s], p, config.train_stride);
            for (auto &t : pa.patches) ds.a.push_back(t.reshaped({1, p, p, p}));
            for (auto &t : pb.patches) ds.b.push_back(t.reshaped({1, p, p, p}));
        }
    }
    return ds;
}

nd::Tensor stack_batch(const std::vector<nd::Tensor> &samples, const std::vector<size_t> &idx) {
    if (idx.empty()) throw DomainError("stack_batch: empty batch");
    const auto &first = samples.at(idx[0]);
    nd::Shape shape{static_cast<std::int64_t>(idx.size())};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    nd::Tensor out(shape);
    const auto n = first.numel();
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto &s = samples.at(idx[i]);
        if (s.shape() != first.shape()) throw DomainError("stack_batch: samples differ in shape");
        std::copy_n(s.data(), n, out.data() + static_cast<std::int64_t>(i) * n);
    }
    return out;
}

GanTrainer::GanTrainer(GanBundle &bundle, const TrainConfig &config)
    : bundle_(bundle),
      g_opt_(bundle.generator_params().all(), {config.lr, config.beta1, 0.999, 1e-8}),
      d_opt_(bundle.discriminator_params().all(), {config.lr, config.beta1, 0.999, 1e-8}) {
    if (bundle.is_identity_stub()) throw DomainError("cannot train an identity stub");
}

void GanTrainer::set_learning_rate(double lr) {
    g_opt_.set_learning_rate(lr);
    d_opt_.set_learning_rate(lr);
}

LossTerms GanTrainer::evaluate(const nd::Tensor &a, const nd::Tensor &b) { return run(a, b, false, false); }

LossTerms GanTrainer::step(const nd::Tensor &a, const nd::Tensor &b) { return run(a, b, true, true); }

LossTerms GanTrainer::step_discriminators(const nd::Tensor &a, const nd::Tensor &b) { return run(a, b, true, false); }

LossTerms GanTrainer::step_generators(const nd::Tensor &a, const nd::Tensor &b) { return run(a, b, false, true); }

namespace {
nd::Tensor to_signed(const nd::Tensor &t) {
    nd::Tensor out = t;
    for (auto &v : out.values()) v = 2.0f * v - 1.0f;
    return out;
}

void require_finite(double v, const char *what) {
    if (!std::isfinite(v)) throw DomainError(std::string("non-finite ") + what + " loss; aborting training");
}
} // namespace

LossTerms GanTrainer::run(const nd::Tensor &a, const nd::Tensor &b, bool update_d, bool update_g) {
    if (a.shape() != b.shape()) throw DomainError("gan step: domain batches differ in shape");
    const auto &cfg = bundle_.config();
    const bool cycle = is_cycle(cfg.variant);
    const bool mse = has_mse(cfg.variant);
    const Generator &gb = bundle_.G_B();
    const Generator *ga = bundle_.G_A();

    nd::Graph gg;
    const auto y_a = gg.constant(to_signed(a), "y_a");
    const auto y_b = gg.constant(to_signed(b), "y_b");
    const auto x_b = gb.forward(gg, y_a, update_g);
    nd::Var x_a;
    if (cycle) x_a = ga->forward(gg, y_b, update_g);

    LossTerms out;
    // Discriminators see detached fakes.
    {
        nd::Graph gd;
        auto loss = lsgan_discriminator_loss(gd, bundle_.D_B().forward(gd, gd.constant(gg.value(y_b)), update_d),
                                             bundle_.D_B().forward(gd, gd.constant(gg.value(x_b)), update_d));
        if (cycle) {
            auto la = lsgan_discriminator_loss(gd, bundle_.D_A()->forward(gd, gd.constant(gg.value(y_a)), update_d),
                                               bundle_.D_A()->forward(gd, gd.constant(gg.value(x_a)), update_d));
            loss = nd::add(gd, loss, la);
        }
        out.d = gd.value(loss)[0];
        require_finite(out.d, "discriminator");
        if (update_d) {
            bundle_.discriminator_params().zero_grad();
            gd.backward(loss);
            d_opt_.step();
        }
    }

    nd::Var adv = lsgan_generator_loss(gg, bundle_.D_B().forward(gg, x_b, false));
    if (cycle) adv = nd::add(gg, adv, lsgan_generator_loss(gg, bundle_.D_A()->forward(gg, x_a, false)));
    nd::Var total = adv;
    out.g_adv = gg.value(adv)[0];
    if (cycle) {
        const auto rec_a = ga->forward(gg, x_b, update_g);
        const auto rec_b = gb.forward(gg, x_a, update_g);
        const auto cyc = cycle_loss(gg, y_a, rec_a, y_b, rec_b);
        out.cyc = gg.value(cyc)[0];
        total = nd::add(gg, total, nd::affine(gg, cyc, static_cast<float>(cfg.lambda_cyc)));
    }
    if (mse) {
        const auto m = paired_mse_loss(gg, x_b, y_b);
        out.mse = gg.value(m)[0];
        total = nd::add(gg, total, nd::affine(gg, m, static_cast<float>(cfg.lambda_mse)));
    }
    out.g = gg.value(total)[0];
    require_finite(out.g, "generator");
    if (update_g) {
        bundle_.generator_params().zero_grad();
        gg.backward(total);
        g_opt_.step();
    }
    return out;
}

double validation_ssim(const GanBundle &bundle, const PairedDataset &data, int eval_batch) {
    if (data.size() == 0) throw DomainError("validation_ssim: empty dataset");
    double total = 0.0;
    std::int64_t count = 0;
    for (size_t s = 0; s < data.size(); s += static_cast<size_t>(eval_batch)) {
        std::vector<size_t> idx;
        for (size_t i = s; i < std::min(data.size(), s + static_cast<size_t>(eval_batch)); ++i) idx.push_back(i);
        const auto pred = bundle.generate(stack_batch(data.a, idx));
        const auto n = pred.numel() / static_cast<std::int64_t>(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            const auto &truth = data.b[idx[i]];
            if (bundle.config().mode == Mode::Slices25D) {
                const auto c = truth.dim(0), plane = truth.dim(1) * truth.dim(2);
                for (std::int64_t k = 0; k < c; ++k) {
                    nd::Tensor x({truth.dim(1), truth.dim(2)});
                    nd::Tensor y({truth.dim(1), truth.dim(2)});
                    std::copy_n(pred.data() + static_cast<std::int64_t>(i) * n + k * plane, plane, x.data());
                    std::copy_n(truth.data() + k * plane, plane, y.data());
                    total += quality::ssim(x, y);
                    ++count;
                }
            } else {
                nd::Tensor x(truth.shape());
                std::copy_n(pred.data() + static_cast<std::int64_t>(i) * n, n, x.data());
                total += quality::ssim(x, truth);
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

void write_epoch_csv(const std::filesystem::path &path, const std::vector<EpochLog> &log) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write training log: " + path.string());
    os << "epoch,steps,lr,L_D,L_G,L_adv,L_cyc,L_mse,val_ssim\n";
    os << std::setprecision(9);
    for (const auto &e : log)
        os << e.epoch << ',' << e.steps << ',' << e.lr << ',' << e.mean.d << ',' << e.mean.g << ',' << e.mean.g_adv
           << ',' << e.mean.cyc << ',' << e.mean.mse << ',' << e.val_ssim << '\n';
}

TrainResult train(GanBundle &bundle, const PairedDataset &train_set, const PairedDataset &val_set,
                  const TrainConfig &config) {
    if (train_set.size() == 0) throw DomainError("train: empty dataset");
    if (config.epochs <= 0 || config.batch_size <= 0) throw DomainError("train: epochs and batch size must be positive");
    const PairedDataset &val = val_set.size() ? val_set : train_set;
    if (!config.out_dir.empty()) std::filesystem::create_directories(config.out_dir);

    GanTrainer trainer(bundle, config);
    std::mt19937_64 rng(config.seed);
    std::vector<size_t> order(train_set.size());
    TrainResult res;
    nd::NamedTensors best;
    const size_t bs = std::min(static_cast<size_t>(config.batch_size), train_set.size());
    const int full_steps = static_cast<int>(train_set.size() / bs);
    const int steps = config.steps_per_epoch > 0 ? config.steps_per_epoch : full_steps;
    size_t cursor = order.size();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = config.lr * config.lr_factor(epoch);
        trainer.set_learning_rate(lr);
        EpochLog log;
        log.epoch = epoch + 1;
        log.lr = lr;
        for (int s = 0; s < steps; ++s) {
            if (cursor + bs > order.size()) {
                for (size_t i = 0; i < order.size(); ++i) order[i] = i;
                for (size_t i = order.size() - 1; i > 0; --i)
                    std::swap(order[i], order[std::uniform_int_distribution<size_t>(0, i)(rng)]);
                cursor = 0;
            }
            std::vector<size_t> idx(order.begin() + static_cast<long>(cursor),
                                    order.begin() + static_cast<long>(cursor + bs));
            cursor += bs;
            const auto t = trainer.step(stack_batch(train_set.a, idx), stack_batch(train_set.b, idx));
            res.steps.push_back(t);
            log.mean.d += t.d;
            log.mean.g += t.g;
            log.mean.g_adv += t.g_adv;
            log.mean.cyc += t.cyc;
            log.mean.mse += t.mse;
        }
        log.steps = steps;
        for (double *v : {&log.mean.d, &log.mean.g, &log.mean.g_adv, &log.mean.cyc, &log.mean.mse}) *v /= steps;
        log.val_ssim = validation_ssim(bundle, val, config.eval_batch);
        res.epochs.push_back(log);
        if (log.val_ssim > res.best_val_ssim) {
            res.best_val_ssim = log.val_ssim;
            res.best_epoch = log.epoch;
            best = bundle.to_checkpoint();
        }
        if (!config.out_dir.empty()) {
            write_epoch_csv(config.out_dir / "train_log.csv", res.epochs);
            if (config.checkpoint_every > 0 && log.epoch % config.checkpoint_every == 0) {
                std::ostringstream name;
                name << "epoch_" << std::setw(4) << std::setfill('0') << log.epoch << ".ndt";
                bundle.save(config.out_dir / name.str());
            }
        }
        if (config.stop_ssim > 0.0 && log.val_ssim >= config.stop_ssim) break;
    }
    if (!config.out_dir.empty()) bundle.save(config.out_dir / "last.ndt");
    nd::restore(bundle.generator_params(), best);
    nd::restore(bundle.discriminator_params(), best);
    if (!config.out_dir.empty()) bundle.save(config.out_dir / "best.ndt");
    return res;
}

vol::Volume3D synthesize_volume(const BatchGenerator &gen, Mode mode, int patch_size, const vol::Volume3D &t1,
                                const vol::Volume3D &reference_pet, const SynthesisOptions &opt) {
    t1.validate();
    const size_t batch = static_cast<size_t>(std::max(1, opt.batch));
    auto run = [&](const std::vector<nd::Tensor> &samples, const nd::Shape &in_shape) {
        std::vector<nd::Tensor> outs;
        for (size_t s = 0; s < samples.size(); s += batch) {
            std::vector<size_t> idx;
            std::vector<nd::Tensor> chunk;
            for (size_t i = s; i < std::min(samples.size(), s + batch); ++i) {
                idx.push_back(i - s);
                chunk.push_back(samples[i].reshaped(in_shape));
            }
            const auto y = gen(stack_batch(chunk, idx));
            const auto n = y.numel() / static_cast<std::int64_t>(idx.size());
            if (n != samples[s].numel()) throw DomainError("synthesize: generator changed the sample size");
            for (size_t i = 0; i < idx.size(); ++i) {
                nd::Tensor t(samples[s].shape());
                std::copy_n(y.data() + static_cast<std::int64_t>(i) * n, n, t.data());
                outs.push_back(std::move(t));
            }
        }
        return outs;
    };
    vol::Volume3D raw;
    if (mode == Mode::Slices25D) {
        const auto st = vol::extract_triplets(t1);
        raw = vol::stitch_triplets(st, run(st.triplets, st.triplets.at(0).shape()));
    } else {
        const int p = patch_size;
        const auto ps = vol::extract_patches(t1, p, p / 2);
        raw = vol::stitch_patches(ps, run(ps.patches, {1, p, p, p}));
    }
    raw.mask = t1.mask;
    auto out = vol::histogram_match(vol::gaussian_smooth(raw, opt.fwhm_mm), reference_pet);
    if (opt.zero_outside_mask && out.mask)
        for (size_t i = 0; i < out.data.size(); ++i)
            if (!(*out.mask)[i]) out.data[i] = 0.0f;
    return out;
}

vol::Volume3D synthesize_volume(const GanBundle &bundle, const vol::Volume3D &t1, const vol::Volume3D &reference_pet,
                                const SynthesisOptions &opt) {
    return synthesize_volume([&](const nd::Tensor &b) { return bundle.generate(b); }, bundle.config().mode,
                             bundle.config().patch_size, t1, reference_pet, opt);
}

GanConfig gan_config_from(KeyValueConfig &kv) {
    GanConfig c;
    c.mode = parse_mode(kv.get_string("mode", "3d"));
    c.variant = parse_variant(kv.get_string("variant", "cycle+mse"));
    c.lambda_cyc = kv.get_double("lambda_cyc", c.lambda_cyc);
    c.lambda_mse = kv.get_double("lambda_mse", c.lambda_mse);
    c.width_factor = kv.get_double("width_factor", c.width_factor);
    c.n_blocks = kv.get_int("n_blocks", c.n_blocks);
    c.d_layers = kv.get_int("d_layers", c.d_layers);
    c.patch_size = kv.get_int("patch_size", c.patch_size);
    c.train_stride = kv.get_int("train_stride", c.train_stride);
    c.seed = kv.get_u64("seed", c.seed);
    c.validate();
    return c;
}

TrainConfig train_config_from(KeyValueConfig &kv, Mode mode) {
    TrainConfig c = TrainConfig::defaults(mode);
    c.epochs = kv.get_int("epochs", c.epochs);
    c.batch_size = kv.get_int("batch", c.batch_size);
    c.lr = kv.get_double("lr", c.lr);
    c.beta1 = kv.get_double("beta1", c.beta1);
    const auto sched = kv.get_string("lr_schedule", c.schedule == LrSchedule::Constant ? "constant" : "linear-decay");
    if (sched == "constant") c.schedule = LrSchedule::Constant;
    else if (sched == "linear-decay") c.schedule = LrSchedule::LinearDecay;
    else throw IoError("unknown lr_schedule '" + sched + "'");
    c.seed = kv.get_u64("seed", c.seed);
    c.steps_per_epoch = kv.get_int("steps_per_epoch", c.steps_per_epoch);
    c.checkpoint_every = kv.get_int("checkpoint_every", c.checkpoint_every);
    c.stop_ssim = kv.get_double("stop_ssim", c.stop_ssim);
    c.eval_batch = kv.get_int("eval_batch", c.eval_batch);
    return c;
}

} // namespace petsynth::syn
