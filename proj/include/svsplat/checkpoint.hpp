#pragma once

#include "svsplat/config.hpp"
#include "svsplat/nn.hpp"
#include "svsplat/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace svsplat {

/// On-disk checkpoint: manifest.json (tensor name -> relative path, plus
/// the step count), config.txt snapshot, and one CTST file per parameter.
/// Loading and re-saving reproduces identical bytes.
struct CheckpointData {
    std::map<std::string, Tensor> tensors;
    Config config;
    int64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const CheckpointData& data);
CheckpointData load_checkpoint(const std::filesystem::path& dir);

template <typename T>
void save_params(const std::filesystem::path& dir, const Params<T>& params, const Config& cfg,
                 int64_t step) {
    CheckpointData data;
    data.config = cfg;
    data.step = step;
    for (const auto& [name, arr] : params.tensors)
        data.tensors.emplace(name, Tensor::from_array(arr, cfg.precision));
    save_checkpoint(dir, data);
}

template <typename T>
Params<T> load_params(const CheckpointData& data) {
    Params<T> p;
    for (const auto& [name, t] : data.tensors) p.tensors.emplace(name, t.template to_array<T>());
    return p;
}

} // namespace svsplat
