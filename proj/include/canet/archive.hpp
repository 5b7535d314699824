#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "canet/nn/graph.hpp"
#include "canet/tensor.hpp"

namespace canet {

// Single-file container: 8-byte magic, u32 format version, JSON header,
// then named float64 tensors in insertion order. All integers little-endian.
struct Archive {
    static constexpr std::uint32_t kVersion = 1;

    nlohmann::json header = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
    void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }
};

void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

// Copies every tensor whose name starts with `prefix` into the matching
// parameter. Missing or mis-shaped tensors raise DecodeError.
void load_parameters(nn::ParamSet& params, const Archive& archive, const std::string& prefix = "");
void store_parameters(const nn::ParamSet& params, Archive& archive, const std::string& prefix = "");

}  // namespace canet
