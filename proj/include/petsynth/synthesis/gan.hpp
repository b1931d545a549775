#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "petsynth/common/kvconfig.hpp"
#include "petsynth/ndtensor/adam.hpp"
#include "petsynth/ndtensor/checkpoint.hpp"
#include "petsynth/synthesis/networks.hpp"
#include "petsynth/volume/volume.hpp"

namespace petsynth::syn {

enum class Mode { Slices25D, Patch3D };
enum class Variant { Simple, SimpleMse, Cycle, CycleMse };

std::string to_string(Mode m);
std::string to_string(Variant v);
Mode parse_mode(const std::string &s);
Variant parse_variant(const std::string &s);
inline bool is_cycle(Variant v) { return v == Variant::Cycle || v == Variant::CycleMse; }
inline bool has_mse(Variant v) { return v == Variant::SimpleMse || v == Variant::CycleMse; }

struct GanConfig {
    Mode mode = Mode::Patch3D;
    Variant variant = Variant::CycleMse;
    double lambda_cyc = 10.0;
    double lambda_mse = 10.0;
    double width_factor = 0.25; // of the 64-filter reference width
    int n_blocks = -1;          // -1: 9 for slices, 2 for patches
    int d_layers = -1;          // -1: 3, or 2 for patches smaller than 32
    int patch_size = 16;
    int train_stride = 8;
    std::uint64_t seed = 1;

    int channels() const { return mode == Mode::Slices25D ? 3 : 1; }
    int spatial_dims() const { return mode == Mode::Slices25D ? 2 : 3; }
    int base_width() const;
    int resolved_blocks() const;
    int resolved_d_layers() const;
    void validate() const;
};

// G_B maps domain A (T1) to B (PET). Cycle variants also carry G_A and D_A.
// Generator and discriminator parameters live in separate stores.
class GanBundle {
public:
    explicit GanBundle(const GanConfig &config);
    // Pass-through model used to exercise the synthesis pipeline in isolation.
    static GanBundle identity_stub(Mode mode, int patch_size);

    const GanConfig &config() const { return config_; }
    bool is_identity_stub() const { return identity_; }

    Generator &G_B() const { return *g_b_; }
    Generator *G_A() const { return g_a_.get(); }
    Discriminator &D_B() const { return *d_b_; }
    Discriminator *D_A() const { return d_a_.get(); }
    nd::ParameterStore &generator_params() const { return *gen_store_; }
    nd::ParameterStore &discriminator_params() const { return *disc_store_; }

    // Batch (B, C, ...) with values in [0, 1] through G_B; result in [0, 1].
    nd::Tensor generate(const nd::Tensor &batch) const;

    nd::NamedTensors to_checkpoint() const;
    static GanBundle from_checkpoint(const nd::NamedTensors &entries);
    void save(const std::filesystem::path &path) const;
    static GanBundle load(const std::filesystem::path &path);

private:
    GanBundle() = default;
    void build();

    GanConfig config_;
    bool identity_ = false;
    std::unique_ptr<nd::ParameterStore> gen_store_, disc_store_;
    std::unique_ptr<Generator> g_b_, g_a_;
    std::unique_ptr<Discriminator> d_b_, d_a_;
};

enum class LrSchedule { Constant, LinearDecay };

struct TrainConfig {
    int epochs = 100;
    int batch_size = 10;
    double lr = 2e-4;
    double beta1 = 0.5;
    LrSchedule schedule = LrSchedule::Constant;
    std::uint64_t seed = 1;
    int steps_per_epoch = 0;   // 0: one pass over the training set
    int checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
    double stop_ssim = 0.0;    // stop once validation SSIM reaches this (0 disables)
    int eval_batch = 8;
    std::filesystem::path out_dir; // empty: no files written

    static TrainConfig defaults(Mode mode);
    // Learning-rate factor for a 0-based epoch.
    double lr_factor(int epoch) const;
};

struct PairedDataset {
    std::vector<nd::Tensor> a, b; // (C, spatial...) in [0, 1]
    size_t size() const { return a.size(); }
};

PairedDataset make_dataset(const GanConfig &config, const std::vector<vol::Volume3D> &t1,
                           const std::vector<vol::Volume3D> &pet);
nd::Tensor stack_batch(const std::vector<nd::Tensor> &samples, const std::vector<size_t> &idx);

struct LossTerms {
    double d = 0.0;     // discriminator total
    double g = 0.0;     // generator total as optimized
    double g_adv = 0.0; // adversarial generator terms
    double cyc = 0.0;   // unweighted cycle term
    double mse = 0.0;   // unweighted paired MSE
};

// Step-level access for tests: losses at the current parameters, and single updates.
class GanTrainer {
public:
    GanTrainer(GanBundle &bundle, const TrainConfig &config);
    LossTerms evaluate(const nd::Tensor &a, const nd::Tensor &b);
    // Discriminators first, then generators, on a batch in [0, 1].
    LossTerms step(const nd::Tensor &a, const nd::Tensor &b);
    // Half steps: only one side is updated.
    LossTerms step_discriminators(const nd::Tensor &a, const nd::Tensor &b);
    LossTerms step_generators(const nd::Tensor &a, const nd::Tensor &b);
    void set_learning_rate(double lr);

private:
    LossTerms run(const nd::Tensor &a, const nd::Tensor &b, bool update_d, bool update_g);

    GanBundle &bundle_;
    nd::Adam g_opt_, d_opt_;
};

// Mean SSIM of generated samples against targets: 2D per slice for triplets, 3D for patches.
double validation_ssim(const GanBundle &bundle, const PairedDataset &data, int eval_batch = 8);

struct EpochLog {
    int epoch = 0;
    int steps = 0;
    double lr = 0.0;
    LossTerms mean;
    double val_ssim = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    std::vector<LossTerms> steps;
    int best_epoch = -1;
    double best_val_ssim = -1.0;
};

// Trains in place and leaves the bundle at the best-validation epoch. An empty validation set
// falls back to the training set. Non-finite losses abort with DomainError.
TrainResult train(GanBundle &bundle, const PairedDataset &train_set, const PairedDataset &val_set,
                  const TrainConfig &config);

void write_epoch_csv(const std::filesystem::path &path, const std::vector<EpochLog> &log);

struct SynthesisOptions {
    double fwhm_mm = 1.5;
    int batch = 8;
    bool zero_outside_mask = true; // background outside the T1 brain mask set to 0
};

using BatchGenerator = std::function<nd::Tensor(const nd::Tensor &)>;

// extract -> generate -> stitch -> smooth -> histogram match against reference_pet, then
// (optionally) zero outside the T1 mask.
vol::Volume3D synthesize_volume(const BatchGenerator &gen, Mode mode, int patch_size, const vol::Volume3D &t1,
                                const vol::Volume3D &reference_pet, const SynthesisOptions &opt = {});
vol::Volume3D synthesize_volume(const GanBundle &bundle, const vol::Volume3D &t1, const vol::Volume3D &reference_pet,
                                const SynthesisOptions &opt = {});

// Reads the documented keys (mode, variant, epochs, batch, lr, lambda_cyc, lambda_mse, seed,
// width_factor, ...) from a key-value config.
GanConfig gan_config_from(KeyValueConfig &kv);
TrainConfig train_config_from(KeyValueConfig &kv, Mode mode);

} // namespace petsynth::syn
