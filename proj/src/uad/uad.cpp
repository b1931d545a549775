#include "petsynth/uad/uad.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>

#include "petsynth/common/binio.hpp"
#include "petsynth/common/error.hpp"
#include "petsynth/ndtensor/adam.hpp"
#include "petsynth/ndtensor/checkpoint.hpp"
#include "petsynth/ndtensor/ops.hpp"

namespace petsynth::uad {

vol::Volume3D normalize_clipped(const vol::Volume3D &v, double quantile) {
    v.validate();
    if (!(quantile > 0.0 && quantile <= 1.0)) throw DomainError("normalize: quantile must lie in (0, 1]");
    std::vector<float> vals;
    for (std::int64_t i = 0; i < v.size(); ++i)
        if (v.in_mask(i)) vals.push_back(v.data[static_cast<size_t>(i)]);
    if (vals.empty()) throw DomainError("normalize: empty mask");
    const auto n = vals.size();
    const size_t rank = std::max<size_t>(1, static_cast<size_t>(std::ceil(quantile * static_cast<double>(n))));
    std::nth_element(vals.begin(), vals.begin() + static_cast<long>(rank - 1), vals.end());
    const double hi = vals[rank - 1];
    const double lo = *std::min_element(vals.begin(), vals.end());
    if (!(hi > lo)) throw DomainError("normalize: degenerate intensity range below the clipping quantile");
    vol::Volume3D out = v;
    for (auto &x : out.data) x = static_cast<float>(std::clamp((x - lo) / (hi - lo), 0.0, 1.0));
    return out;
}

std::vector<std::uint8_t> valid_centers(const vol::Volume3D &t1) {
    t1.validate();
    const auto &d = t1.dims;
    std::vector<std::uint8_t> out(static_cast<size_t>(t1.size()), 0);
    for (int z = 0; z < d[2]; ++z)
        for (int y = kHalf; y < d[1] - kHalf; ++y)
            for (int x = kHalf; x < d[0] - kHalf; ++x) {
                const auto i = t1.index(x, y, z);
                out[static_cast<size_t>(i)] = t1.in_mask(i) ? 1 : 0;
            }
    return out;
}

namespace {

void copy_patch(const vol::Volume3D &t1, const vol::Volume3D &pet, int x, int y, int z, float *dst) {
    const vol::Volume3D *src[2] = {&t1, &pet};
    for (int c = 0; c < kChannels; ++c)
        for (int dy = -kHalf; dy <= kHalf; ++dy) {
            const float *row = src[c]->data.data() + src[c]->index(x - kHalf, y + dy, z);
            std::copy_n(row, kPatch, dst);
            dst += kPatch;
        }
}

void check_pair(const vol::Volume3D &t1, const vol::Volume3D &pet) {
    t1.validate();
    pet.validate();
    if (t1.dims != pet.dims) throw DomainError("T1 and PET volumes differ in shape");
}

constexpr std::int64_t kPatchValues = kChannels * kPatch * kPatch;

} // namespace

nd::Tensor extract_patch(const vol::Volume3D &t1, const vol::Volume3D &pet, int x, int y, int z) {
    check_pair(t1, pet);
    const auto &d = t1.dims;
    if (x < kHalf || y < kHalf || x >= d[0] - kHalf || y >= d[1] - kHalf || z < 0 || z >= d[2])
        throw DomainError("extract_patch: neighborhood leaves the volume");
    nd::Tensor t({kChannels, kPatch, kPatch});
    copy_patch(t1, pet, x, y, z, t.data());
    return t;
}

nd::Tensor PatchBank::patch(size_t location, int subject) const {
    nd::Tensor t({kChannels, kPatch, kPatch});
    std::copy_n(raw(location, subject), kPatchValues, t.data());
    return t;
}

const float *PatchBank::raw(size_t location, int subject) const {
    if (location >= locations.size() || subject < 0 || subject >= subjects) throw DomainError("patch bank index out of range");
    return data.data() + (location * static_cast<size_t>(subjects) + static_cast<size_t>(subject)) * kPatchValues;
}

PatchBank sample_training_patches(const std::vector<SubjectVolumes> &subjects, int per_subject, std::uint64_t seed) {
    if (subjects.empty()) throw DomainError("sample_training_patches: no subjects");
    if (per_subject < 1) throw DomainError("sample_training_patches: count must be positive");
    for (const auto &s : subjects) {
        check_pair(s.t1, s.pet);
        if (s.t1.dims != subjects[0].t1.dims) throw DomainError("sample_training_patches: subjects differ in shape");
    }
    auto valid = valid_centers(subjects[0].t1);
    for (size_t s = 1; s < subjects.size(); ++s) {
        const auto v = valid_centers(subjects[s].t1);
        for (size_t i = 0; i < valid.size(); ++i) valid[i] &= v[i];
    }
    std::vector<std::int64_t> pool;
    for (size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) pool.push_back(static_cast<std::int64_t>(i));
    if (pool.empty()) throw DomainError("sample_training_patches: mask too small for any 15x15 patch");
    const size_t count = std::min(pool.size(), static_cast<size_t>(per_subject));
    // partial Fisher-Yates
    std::mt19937_64 rng(seed);
    for (size_t k = 0; k < count; ++k) {
        std::uniform_int_distribution<size_t> pick(k, pool.size() - 1);
        std::swap(pool[k], pool[pick(rng)]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());

    PatchBank bank;
    bank.subjects = static_cast<int>(subjects.size());
    const auto &d = subjects[0].t1.dims;
    bank.data.resize(count * subjects.size() * kPatchValues);
    for (size_t k = 0; k < count; ++k) {
        const auto i = pool[k];
        const int x = static_cast<int>(i % d[0]), y = static_cast<int>((i / d[0]) % d[1]),
                  z = static_cast<int>(i / (static_cast<std::int64_t>(d[0]) * d[1]));
        bank.locations.push_back({x, y, z});
        for (size_t s = 0; s < subjects.size(); ++s)
            copy_patch(subjects[s].t1, subjects[s].pet, x, y, z,
                       bank.data.data() + (k * subjects.size() + s) * kPatchValues);
    }
    return bank;
}

namespace {

struct LayerDef {
    const char *name;
    int in, out, stride;
    bool transpose;
};

constexpr LayerDef kEncoder[] = {{"enc0", 2, 32, 2, false}, {"enc1", 32, 64, 2, false}, {"enc2", 64, 64, 1, false}};
constexpr LayerDef kDecoder[] = {{"dec0", 64, 64, 1, true}, {"dec1", 64, 32, 2, true}, {"dec2", 32, 2, 2, true}};

nd::Var layer(nd::Graph &g, nd::ParameterStore &store, const LayerDef &l, nd::Var x, bool trainable) {
    auto &w = store.at(std::string(l.name) + ".w");
    auto &b = store.at(std::string(l.name) + ".b");
    const auto wv = trainable ? g.parameter(w) : g.constant(w.value, w.name);
    const auto bv = trainable ? g.parameter(b) : g.constant(b.value, b.name);
    if (l.transpose) return nd::conv_transpose(g, x, wv, bv, {l.stride, 0, 0});
    return nd::conv(g, x, wv, bv, {l.stride, 0});
}

} // namespace

SiameseAE::SiameseAE(std::uint64_t seed) : store_(std::make_unique<nd::ParameterStore>()) {
    std::mt19937_64 rng(seed);
    auto add = [&](const LayerDef &l) {
        const nd::Shape shape = l.transpose ? nd::Shape{l.in, l.out, 3, 3} : nd::Shape{l.out, l.in, 3, 3};
        nd::Tensor w(shape);
        std::normal_distribution<float> n(0.0f, static_cast<float>(std::sqrt(2.0 / (l.in * 9))));
        for (auto &v : w.values()) v = n(rng);
        store_->add(std::string(l.name) + ".w", std::move(w));
        store_->add(std::string(l.name) + ".b", nd::Tensor({l.out}, 0.0f));
    };
    for (const auto &l : kEncoder) add(l);
    for (const auto &l : kDecoder) add(l);
}

nd::Var SiameseAE::encode(nd::Graph &g, nd::Var x, bool trainable) const {
    x = nd::leaky_relu(g, layer(g, *store_, kEncoder[0], x, trainable));
    x = nd::leaky_relu(g, layer(g, *store_, kEncoder[1], x, trainable));
    return layer(g, *store_, kEncoder[2], x, trainable);
}

nd::Var SiameseAE::decode(nd::Graph &g, nd::Var z, bool trainable) const {
    z = nd::leaky_relu(g, layer(g, *store_, kDecoder[0], z, trainable));
    z = nd::leaky_relu(g, layer(g, *store_, kDecoder[1], z, trainable));
    return nd::sigmoid(g, layer(g, *store_, kDecoder[2], z, trainable));
}

namespace {
void check_batch(const nd::Tensor &b) {
    if (b.rank() != 4 || b.dim(1) != kChannels || b.dim(2) != kPatch || b.dim(3) != kPatch)
        throw DomainError("autoencoder input must be (B, 2, 15, 15), got " + nd::shape_str(b.shape()));
}
} // namespace

nd::Tensor SiameseAE::encode(const nd::Tensor &batch) const {
    check_batch(batch);
    nd::Graph g;
    const auto z = encode(g, g.constant(batch), false);
    return g.value(z).reshaped({batch.dim(0), kLatentDim});
}

nd::Tensor SiameseAE::reconstruct(const nd::Tensor &batch) const {
    check_batch(batch);
    nd::Graph g;
    return g.value(decode(g, encode(g, g.constant(batch), false), false));
}

UadLoss SiameseAE::loss(nd::Graph &g, nd::Var x1, nd::Var x2, double alpha, bool trainable, nd::Var *total) const {
    const auto z1 = encode(g, x1, trainable), z2 = encode(g, x2, trainable);
    const auto rec1 = nd::mse(g, decode(g, z1, trainable), x1);
    const auto rec2 = nd::mse(g, decode(g, z2, trainable), x2);
    const auto sim = nd::mean(g, nd::affine(g, nd::cosine_similarity(g, z1, z2), -1.0f, 1.0f));
    const auto t = nd::add(g, nd::add(g, rec1, rec2), nd::affine(g, sim, static_cast<float>(alpha)));
    if (total) *total = t;
    return {g.value(t)[0], g.value(rec1)[0], g.value(rec2)[0], g.value(sim)[0]};
}

void SiameseAE::save(const std::filesystem::path &path) const {
    auto entries = nd::snapshot(*store_);
    entries.insert(entries.begin(), {"meta.latent_dim", nd::Tensor({1}, {static_cast<float>(kLatentDim)})});
    nd::save_checkpoint(path, entries);
}

SiameseAE SiameseAE::load(const std::filesystem::path &path) {
    const auto entries = nd::load_checkpoint(path);
    const auto *meta = nd::find_entry(entries, "meta.latent_dim");
    if (!meta || meta->numel() != 1 || (*meta)[0] != kLatentDim) throw IoError(path.string() + ": not an autoencoder checkpoint");
    SiameseAE m;
    nd::restore(*m.store_, entries);
    return m;
}

UadTrainResult train_siamese(SiameseAE &model, const PatchBank &bank, const UadTrainConfig &cfg) {
    if (bank.size() == 0 || bank.subjects < 1) throw DomainError("train_siamese: empty patch bank");
    if (cfg.steps < 0 || cfg.batch < 1 || cfg.eval_every < 1) throw DomainError("train_siamese: invalid config");
    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> order(bank.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    size_t n_val = 0;
    if (cfg.val_fraction > 0.0 && bank.size() >= 2)
        n_val = std::clamp<size_t>(static_cast<size_t>(std::lround(cfg.val_fraction * static_cast<double>(bank.size()))), 1,
                                   bank.size() - 1);
    std::vector<size_t> val(order.begin(), order.begin() + static_cast<long>(n_val));
    std::vector<size_t> train(order.begin() + static_cast<long>(n_val), order.end());
    if (val.empty()) val = train;

    auto validate = [&] {
        double acc = 0.0;
        std::int64_t n = 0;
        constexpr size_t kChunk = 256;
        std::vector<std::pair<size_t, int>> items;
        for (auto l : val)
            for (int s = 0; s < bank.subjects; ++s) items.emplace_back(l, s);
        for (size_t s = 0; s < items.size(); s += kChunk) {
            const size_t m = std::min(kChunk, items.size() - s);
            nd::Tensor batch({static_cast<std::int64_t>(m), kChannels, kPatch, kPatch});
            for (size_t k = 0; k < m; ++k)
                std::copy_n(bank.raw(items[s + k].first, items[s + k].second), kPatchValues,
                            batch.data() + static_cast<std::int64_t>(k) * kPatchValues);
            const auto rec = model.reconstruct(batch);
            for (std::int64_t i = 0; i < batch.numel(); ++i) {
                const double d = static_cast<double>(rec[i]) - batch[i];
                acc += d * d;
            }
            n += batch.numel();
        }
        return acc / static_cast<double>(n);
    };

    nd::Adam opt(model.params().all(), {cfg.lr, 0.9, 0.999, 1e-8});
    UadTrainResult res;
    auto best = nd::snapshot(model.params());
    res.best_val = validate();
    res.best_step = 0;
    res.validation.emplace_back(0, res.best_val);
    std::uniform_int_distribution<size_t> pick_loc(0, train.size() - 1);
    std::uniform_int_distribution<int> pick_sub(0, bank.subjects - 1);
    std::uniform_int_distribution<int> pick_other(0, std::max(0, bank.subjects - 2));
    const auto b = static_cast<std::int64_t>(cfg.batch);
    for (int step = 1; step <= cfg.steps; ++step) {
        nd::Tensor x1({b, kChannels, kPatch, kPatch}), x2({b, kChannels, kPatch, kPatch});
        for (std::int64_t k = 0; k < b; ++k) {
            const size_t loc = train[pick_loc(rng)];
            const int s1 = pick_sub(rng);
            int s2 = s1;
            if (bank.subjects > 1) {
                s2 = pick_other(rng);
                if (s2 >= s1) ++s2;
            }
            std::copy_n(bank.raw(loc, s1), kPatchValues, x1.data() + k * kPatchValues);
            std::copy_n(bank.raw(loc, s2), kPatchValues, x2.data() + k * kPatchValues);
        }
        nd::Graph g;
        nd::Var total;
        const auto l = model.loss(g, g.constant(std::move(x1)), g.constant(std::move(x2)), cfg.alpha, true, &total);
        if (!std::isfinite(l.total)) throw DomainError("train_siamese: non-finite loss at step " + std::to_string(step));
        model.params().zero_grad();
        g.backward(total);
        opt.step();
        res.steps.push_back(l);
        if (step % cfg.eval_every == 0 || step == cfg.steps) {
            const double v = validate();
            res.validation.emplace_back(step, v);
            if (v < res.best_val) {
                res.best_val = v;
                res.best_step = step;
                best = nd::snapshot(model.params());
            }
        }
    }
    nd::restore(model.params(), best);
    return res;
}

std::vector<std::int32_t> LatentMap::lookup() const {
    std::vector<std::int32_t> out(static_cast<size_t>(dims[0]) * dims[1] * dims[2], -1);
    for (size_t i = 0; i < voxels.size(); ++i) {
        const auto &v = voxels[i];
        out[static_cast<size_t>(v[0] + static_cast<std::int64_t>(dims[0]) * (v[1] + static_cast<std::int64_t>(dims[1]) * v[2]))] =
            static_cast<std::int32_t>(i);
    }
    return out;
}

namespace {

LatentMap layout(const vol::Volume3D &t1, const vol::Volume3D &pet) {
    check_pair(t1, pet);
    LatentMap m;
    m.dims = t1.dims;
    const auto valid = valid_centers(t1);
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x)
                if (valid[static_cast<size_t>(t1.index(x, y, z))]) m.voxels.push_back({x, y, z});
    m.z.assign(m.voxels.size() * kLatentDim, 0.0f);
    return m;
}

void encode_chunk(const SiameseAE &model, const vol::Volume3D &t1, const vol::Volume3D &pet, LatentMap &m, size_t begin,
                  size_t end) {
    nd::Tensor batch({static_cast<std::int64_t>(end - begin), kChannels, kPatch, kPatch});
    for (size_t i = begin; i < end; ++i) {
        const auto &v = m.voxels[i];
        copy_patch(t1, pet, v[0], v[1], v[2], batch.data() + static_cast<std::int64_t>(i - begin) * kPatchValues);
    }
    const auto z = model.encode(batch);
    std::copy_n(z.data(), z.numel(), m.z.data() + begin * kLatentDim);
}

} // namespace

LatentMap encode_volume(const SiameseAE &model, const vol::Volume3D &t1, const vol::Volume3D &pet, int chunk) {
    if (chunk < 1) throw DomainError("encode_volume: chunk must be positive");
    auto m = layout(t1, pet);
    const auto n = m.voxels.size();
    const auto c = static_cast<size_t>(chunk);
    const auto chunks = static_cast<std::int64_t>((n + c - 1) / c);
    std::exception_ptr err;
#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t k = 0; k < chunks; ++k) {
        try {
            encode_chunk(model, t1, pet, m, static_cast<size_t>(k) * c, std::min(n, static_cast<size_t>(k + 1) * c));
        } catch (...) {
#pragma omp critical
            err = std::current_exception();
        }
    }
    if (err) std::rethrow_exception(err);
    return m;
}

LatentMap encode_volume_serial(const SiameseAE &model, const vol::Volume3D &t1, const vol::Volume3D &pet) {
    auto m = layout(t1, pet);
    constexpr size_t c = 512;
    for (size_t b = 0; b < m.voxels.size(); b += c) encode_chunk(model, t1, pet, m, b, std::min(m.voxels.size(), b + c));
    return m;
}

void store_latents(const LatentMap &m, const std::filesystem::path &path) {
    if (m.z.size() != m.voxels.size() * kLatentDim) throw DomainError("latent map buffer size mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open latent map for writing: " + path.string());
    binio::Writer w(os);
    w.magic("LAT1");
    for (int a = 0; a < 3; ++a) w.put<std::uint32_t>(static_cast<std::uint32_t>(m.dims[a]));
    w.put<std::uint64_t>(m.voxels.size());
    for (size_t i = 0; i < m.voxels.size(); ++i) {
        for (int a = 0; a < 3; ++a) w.put<std::int32_t>(m.voxels[i][a]);
        w.put_span<float>(std::span<const float>(m.latent(i), kLatentDim));
    }
    if (!w.ok()) throw IoError("failed writing latent map: " + path.string());
}

LatentMap load_latents(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open latent map: " + path.string());
    binio::Reader r(is, path.string());
    r.expect_magic("LAT1");
    LatentMap m;
    std::uint64_t total = 1;
    for (int a = 0; a < 3; ++a) {
        const auto d = r.get<std::uint32_t>();
        if (d == 0 || d > 65536) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": dim overflow");
        m.dims[a] = static_cast<int>(d);
        total *= d;
    }
    const auto n = r.get<std::uint64_t>();
    if (n > total) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": voxel count exceeds volume");
    m.voxels.resize(n);
    m.z.resize(n * kLatentDim);
    for (std::uint64_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            const auto c = r.get<std::int32_t>();
            if (c < 0 || c >= m.dims[a]) throw FormatError(FormatErrorKind::Malformed, path.string() + ": voxel outside volume");
            m.voxels[i][a] = c;
        }
        r.get_into(std::span<float>(m.z.data() + i * kLatentDim, kLatentDim));
    }
    return m;
}

} // namespace petsynth::uad
