#include "fastfit/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace fastfit {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr const char* kFormat = "fastfit-container";
constexpr int kVersion = 1;

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open '" + path + "' for writing");
    return out;
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Shape shape_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.empty() || j.size() > 3)
        throw IoError(where + ": bad shape");
    Shape s;
    for (const auto& d : j) {
        if (!d.is_number_unsigned())
            throw IoError(where + ": bad shape entry");
        s.push_back(d.get<std::size_t>());
    }
    return s;
}

} // namespace

void write_container(const std::string& path, const nlohmann::json& meta, const std::vector<NamedTensor>& tensors) {
    nlohmann::json header;
    header["format"] = kFormat;
    header["version"] = kVersion;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        header["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
        offset += t.value.size();
    }
    header["total"] = offset;
    const std::string text = header.dump();
    const std::uint64_t len = text.size();

    auto out = open_out(path);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.value.data()),
                  static_cast<std::streamsize>(t.value.size() * sizeof(float)));
    if (!out)
        throw IoError("write to '" + path + "' failed");
}

std::pair<nlohmann::json, std::vector<NamedTensor>> read_container(const std::string& path) {
    const std::string bytes = read_all(path);
    std::uint64_t len = 0;
    if (bytes.size() < sizeof len)
        throw IoError(path + ": truncated header");
    std::memcpy(&len, bytes.data(), sizeof len);
    if (len > bytes.size() - sizeof len)
        throw IoError(path + ": header length exceeds file size");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(sizeof len, len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed header: " + e.what());
    }
    if (header.value("format", "") != kFormat || header.value("version", 0) != kVersion)
        throw IoError(path + ": unsupported container format");

    const std::size_t body = sizeof len + len;
    const std::uint64_t total = header.at("total").get<std::uint64_t>();
    if (bytes.size() - body != total * sizeof(float))
        throw IoError(path + ": buffer holds " + std::to_string(bytes.size() - body) + " bytes, header declares " +
                      std::to_string(total * sizeof(float)));

    std::vector<NamedTensor> tensors;
    std::uint64_t expected = 0;
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        Shape shape = shape_from_json(e.at("shape"), path + ":" + name);
        const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
        const std::size_t n = shape_numel(shape);
        if (offset != expected || offset + n > total)
            throw IoError(path + ": tensor '" + name + "' has an inconsistent offset");
        Tensor<float> t(shape);
        std::memcpy(t.data(), bytes.data() + body + offset * sizeof(float), n * sizeof(float));
        tensors.push_back({name, std::move(t)});
        expected += n;
    }
    if (expected != total)
        throw IoError(path + ": tensors do not cover the buffer");
    return {header.at("meta"), std::move(tensors)};
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"width", c.width},
            {"heads", c.heads},
            {"blocks", c.blocks},
            {"grid_h", c.grid_h},
            {"grid_w", c.grid_w},
            {"latent_channels", c.latent_channels},
            {"categories", c.categories},
            {"t_max", c.t_max},
            {"class_embedding", c.class_embedding}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (!j.is_object())
        throw ConfigError("model config must be an object");
    ModelConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "width")
                c.width = v.get<std::size_t>();
            else if (key == "heads")
                c.heads = v.get<std::size_t>();
            else if (key == "blocks")
                c.blocks = v.get<std::size_t>();
            else if (key == "grid_h")
                c.grid_h = v.get<std::size_t>();
            else if (key == "grid_w")
                c.grid_w = v.get<std::size_t>();
            else if (key == "latent_channels")
                c.latent_channels = v.get<std::size_t>();
            else if (key == "categories")
                c.categories = v.get<std::vector<std::string>>();
            else if (key == "t_max")
                c.t_max = v.get<std::size_t>();
            else if (key == "class_embedding")
                c.class_embedding = v.get<bool>();
            else
                throw ConfigError("unknown key 'model." + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

template <typename T>
void save_params(const DenoiserParams<T>& params, const std::string& path, const nlohmann::json& extra) {
    std::vector<NamedTensor> tensors;
    params.for_each([&](const std::string& name, const Tensor<T>& t) {
        tensors.push_back({name, t.template cast<float>()});
    });
    nlohmann::json meta;
    meta["kind"] = "denoiser_params";
    meta["config"] = model_config_to_json(params.config);
    if (!extra.is_null())
        meta["extra"] = extra;
    write_container(path, meta, tensors);
}

template <typename T>
DenoiserParams<T> load_params(const std::string& path, nlohmann::json* extra) {
    auto [meta, tensors] = read_container(path);
    if (meta.value("kind", "") != "denoiser_params")
        throw IoError(path + ": not a weights file");
    ModelConfig config;
    try {
        config = model_config_from_json(meta.at("config"));
    } catch (const ConfigError& e) {
        throw IoError(path + ": " + e.what());
    }
    Rng unused(0);
    auto params = DenoiserParams<T>::init(config, unused);
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& t : tensors)
        by_name[t.name] = &t.value;
    std::size_t matched = 0;
    params.for_each([&](const std::string& name, Tensor<T>& t) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw IoError(path + ": missing tensor '" + name + "'");
        if (it->second->shape() != t.shape())
            throw IoError(path + ": tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                          ", expected " + shape_str(t.shape()));
        t = it->second->template cast<T>();
        ++matched;
    });
    if (matched != tensors.size())
        throw IoError(path + ": file holds tensors the model does not use");
    if (extra)
        *extra = meta.value("extra", nlohmann::json());
    return params;
}

void write_raw_tensor(const std::string& path, const Tensor<float>& t, const nlohmann::json& extra) {
    {
        auto out = open_out(path);
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!out)
            throw IoError("write to '" + path + "' failed");
    }
    nlohmann::json side = extra.is_null() ? nlohmann::json::object() : extra;
    side["dtype"] = "f32le";
    side["shape"] = t.shape();
    auto out = open_out(path + ".json");
    out << side.dump(2) << "\n";
}

Tensor<float> read_raw_tensor(const std::string& path) {
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(read_all(path + ".json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ".json: " + e.what());
    }
    if (side.value("dtype", "") != "f32le")
        throw IoError(path + ": unsupported dtype");
    Shape shape = shape_from_json(side.at("shape"), path);
    const std::string bytes = read_all(path);
    if (bytes.size() != shape_numel(shape) * sizeof(float))
        throw IoError(path + ": size does not match sidecar shape " + shape_str(shape));
    Tensor<float> t(shape);
    std::memcpy(t.data(), bytes.data(), bytes.size());
    return t;
}

template void save_params<float>(const DenoiserParams<float>&, const std::string&, const nlohmann::json&);
template void save_params<double>(const DenoiserParams<double>&, const std::string&, const nlohmann::json&);
template DenoiserParams<float> load_params<float>(const std::string&, nlohmann::json*);
template DenoiserParams<double> load_params<double>(const std::string&, nlohmann::json*);

} // namespace fastfit
