#pragma once

// NDT1 parameter container:
//   "NDT1" | u64 count | count x ( u32 name_len | name bytes | u32 rank | rank x u64 dim | f32 values )
// All integers and floats little-endian.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "petsynth/ndtensor/graph.hpp"

namespace petsynth::nd {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::filesystem::path &path, const NamedTensors &entries);
NamedTensors load_checkpoint(const std::filesystem::path &path);

NamedTensors snapshot(const ParameterStore &store, const std::string &prefix = "");
// Copies every store parameter from `entries` (looked up as prefix + name). Shapes must match.
void restore(ParameterStore &store, const NamedTensors &entries, const std::string &prefix = "");

const Tensor *find_entry(const NamedTensors &entries, const std::string &name);

} // namespace petsynth::nd
