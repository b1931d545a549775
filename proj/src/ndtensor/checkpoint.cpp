#include "petsynth/ndtensor/checkpoint.hpp"

#include <fstream>

#include "petsynth/common/binio.hpp"
#include "petsynth/common/error.hpp"

namespace petsynth::nd {

void save_checkpoint(const std::filesystem::path &path, const NamedTensors &entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    binio::Writer w(os);
    w.magic("NDT1");
    w.put<std::uint64_t>(entries.size());
    for (const auto &[name, t] : entries) {
        w.put_string(name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
        w.put_span<float>(t.values());
    }
    if (!w.ok()) throw IoError("failed writing checkpoint: " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    binio::Reader r(is, path.string());
    r.expect_magic("NDT1");
    const auto count = r.get<std::uint64_t>();
    if (count > (1u << 20)) throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": parameter count overflow");
    NamedTensors out;
    for (std::uint64_t k = 0; k < count; ++k) {
        auto name = r.get_string();
        const auto rank = r.get<std::uint32_t>();
        if (rank == 0 || rank > 8) throw FormatError(FormatErrorKind::Malformed, path.string() + ": bad rank");
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = r.get<std::uint64_t>();
            if (d == 0 || d > (1ull << 32) || numel * d > (1ull << 32)) {
                throw FormatError(FormatErrorKind::DimOverflow, path.string() + ": dimension overflow");
            }
            numel *= d;
            shape.push_back(static_cast<std::int64_t>(d));
        }
        std::vector<float> values(numel);
        r.get_into(std::span<float>(values));
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return out;
}

NamedTensors snapshot(const ParameterStore &store, const std::string &prefix) {
    NamedTensors out;
    for (const auto *p : store.all()) out.emplace_back(prefix + p->name, p->value);
    return out;
}

const Tensor *find_entry(const NamedTensors &entries, const std::string &name) {
    for (const auto &[n, t] : entries)
        if (n == name) return &t;
    return nullptr;
}

void restore(ParameterStore &store, const NamedTensors &entries, const std::string &prefix) {
    for (auto *p : store.all()) {
        const Tensor *t = find_entry(entries, prefix + p->name);
        if (!t) throw IoError("checkpoint is missing parameter '" + prefix + p->name + "'");
        if (t->shape() != p->value.shape()) {
            throw IoError("checkpoint parameter '" + prefix + p->name + "' has shape " + shape_str(t->shape()) +
                          ", expected " + shape_str(p->value.shape()));
        }
        p->value = *t;
    }
}

} // namespace petsynth::nd
