#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fastfit/denoiser.hpp"
#include "fastfit/tensor.hpp"

namespace fastfit {

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

// Container layout: u64 little-endian header length, JSON header, then a flat
// little-endian f32 buffer. The header lists every tensor with its name, shape
// and element offset, plus the total element count.
void write_container(const std::string& path, const nlohmann::json& meta, const std::vector<NamedTensor>& tensors);
std::pair<nlohmann::json, std::vector<NamedTensor>> read_container(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& config);
// Strict: unknown keys raise ConfigError. Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
void save_params(const DenoiserParams<T>& params, const std::string& path, const nlohmann::json& extra = {});
// Validates tensor names, shapes and the total buffer length against the stored config.
template <typename T>
DenoiserParams<T> load_params(const std::string& path, nlohmann::json* extra = nullptr);

// Raw little-endian tensor plus a "<path>.json" sidecar with dtype and shape.
void write_raw_tensor(const std::string& path, const Tensor<float>& t, const nlohmann::json& extra = {});
Tensor<float> read_raw_tensor(const std::string& path);

} // namespace fastfit
