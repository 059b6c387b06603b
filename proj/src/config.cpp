#include "fastfit/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>

#include "fastfit/weights_io.hpp"

namespace fastfit {

namespace {

using Setter = std::function<void(const nlohmann::json&)>;

void apply_section(const nlohmann::json& j, const std::string& section, const std::map<std::string, Setter>& setters) {
    if (!j.is_object())
        throw ConfigError("'" + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        auto it = setters.find(key);
        if (it == setters.end())
            throw ConfigError("unknown key '" + section + "." + key + "'");
        try {
            it->second(value);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for '" + section + "." + key + "': " + e.what());
        }
    }
}

template <typename V>
Setter set(V& target) {
    return [&target](const nlohmann::json& v) { target = v.get<V>(); };
}

} // namespace

void RunConfig::validate() const {
    model.validate();
    sampler.validate(model.t_max);
    train.validate();
    if (bench.mode != "all")
        parse_mode(bench.mode);
    if (bench.runs < 10 || bench.warmup < 3 || bench.threads < 1)
        throw ConfigError("bench needs runs >= 10, warmup >= 3, threads >= 1");
    if (bench.refs > model.categories.size())
        throw ConfigError("bench.refs exceeds the category count");
    if (bench.ref_grid_h == 0 || bench.ref_grid_w == 0)
        throw ConfigError("bench reference grid must be non-empty");
    if (synthetic.min_refs < 1 || synthetic.max_refs < synthetic.min_refs ||
        synthetic.max_refs > std::min<std::size_t>(5, model.categories.size()))
        throw ConfigError("synthetic.min_refs/max_refs must satisfy 1 <= min <= max <= 5");
    if (synthetic.ref_grid_h == 0 || synthetic.ref_grid_w == 0)
        throw ConfigError("synthetic reference grid must be non-empty");
    if (model.latent_channels % 4 != 0)
        throw ConfigError("latent_channels must be a multiple of 4 (2x2 patches)");
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (!j.is_object())
        throw ConfigError("config root must be an object");
    std::string mode = mode_name(c.sampler.mode);
    apply_section(j, "config",
                  {{"seed", set(c.seed)},
                   {"model", [&](const nlohmann::json& v) { c.model = model_config_from_json(v); }},
                   {"sampler",
                    [&](const nlohmann::json& v) {
                        apply_section(v, "sampler",
                                      {{"steps", set(c.sampler.steps)},
                                       {"guidance", set(c.sampler.guidance)},
                                       {"cfg", set(c.sampler.cfg)},
                                       {"mode", set(mode)},
                                       {"eta", set(c.sampler.eta)}});
                    }},
                   {"bench",
                    [&](const nlohmann::json& v) {
                        apply_section(v, "bench",
                                      {{"mode", set(c.bench.mode)},
                                       {"runs", set(c.bench.runs)},
                                       {"warmup", set(c.bench.warmup)},
                                       {"threads", set(c.bench.threads)},
                                       {"refs", set(c.bench.refs)},
                                       {"ref_grid_h", set(c.bench.ref_grid_h)},
                                       {"ref_grid_w", set(c.bench.ref_grid_w)}});
                    }},
                   {"train",
                    [&](const nlohmann::json& v) {
                        apply_section(v, "train",
                                      {{"steps", set(c.train.steps)},
                                       {"batch", set(c.train.batch)},
                                       {"lr", set(c.train.lr)},
                                       {"rms_decay", set(c.train.rms_decay)},
                                       {"rms_eps", set(c.train.rms_eps)},
                                       {"ref_dropout", set(c.train.ref_dropout)},
                                       {"dataset", set(c.train.dataset)},
                                       {"eval_samples", set(c.train.eval_samples)},
                                       {"log_every", set(c.train.log_every)}});
                    }},
                   {"synthetic",
                    [&](const nlohmann::json& v) {
                        apply_section(v, "synthetic",
                                      {{"ref_grid_h", set(c.synthetic.ref_grid_h)},
                                       {"ref_grid_w", set(c.synthetic.ref_grid_w)},
                                       {"min_refs", set(c.synthetic.min_refs)},
                                       {"max_refs", set(c.synthetic.max_refs)},
                                       {"random_rectangles", set(c.synthetic.random_rectangles)},
                                       {"base_range", set(c.synthetic.base_range)},
                                       {"texture_range", set(c.synthetic.texture_range)}});
                    }},
                   {"paths", [&](const nlohmann::json& v) {
                        apply_section(v, "paths",
                                      {{"weights_in", set(c.paths.weights_in)},
                                       {"weights_out", set(c.paths.weights_out)},
                                       {"report_out", set(c.paths.report_out)},
                                       {"loss_csv", set(c.paths.loss_csv)},
                                       {"sample_out", set(c.paths.sample_out)}});
                    }}});
    c.sampler.mode = parse_mode(mode);
    c.sampler.seed = c.seed;
    c.validate();
    return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["model"] = model_config_to_json(c.model);
    j["sampler"] = {{"steps", c.sampler.steps},
                    {"guidance", c.sampler.guidance},
                    {"cfg", c.sampler.cfg},
                    {"mode", mode_name(c.sampler.mode)},
                    {"eta", c.sampler.eta}};
    j["bench"] = {{"mode", c.bench.mode},        {"runs", c.bench.runs}, {"warmup", c.bench.warmup},
                  {"threads", c.bench.threads},  {"refs", c.bench.refs}, {"ref_grid_h", c.bench.ref_grid_h},
                  {"ref_grid_w", c.bench.ref_grid_w}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch", c.train.batch},
                  {"lr", c.train.lr},
                  {"rms_decay", c.train.rms_decay},
                  {"rms_eps", c.train.rms_eps},
                  {"ref_dropout", c.train.ref_dropout},
                  {"dataset", c.train.dataset},
                  {"eval_samples", c.train.eval_samples},
                  {"log_every", c.train.log_every}};
    j["synthetic"] = {{"ref_grid_h", c.synthetic.ref_grid_h},
                      {"ref_grid_w", c.synthetic.ref_grid_w},
                      {"min_refs", c.synthetic.min_refs},
                      {"max_refs", c.synthetic.max_refs},
                      {"random_rectangles", c.synthetic.random_rectangles},
                      {"base_range", c.synthetic.base_range},
                      {"texture_range", c.synthetic.texture_range}};
    j["paths"] = {{"weights_in", c.paths.weights_in},
                  {"weights_out", c.paths.weights_out},
                  {"report_out", c.paths.report_out},
                  {"loss_csv", c.paths.loss_csv},
                  {"sample_out", c.paths.sample_out}};
    return j;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

void apply_seed_override(RunConfig& c) {
    const char* env = std::getenv("FASTFIT_SEED");
    if (!env || !*env)
        return;
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (errno != 0 || *end != '\0' || env[0] == '-')
        throw ConfigError(std::string("FASTFIT_SEED='") + env + "' is not an unsigned integer");
    c.seed = v;
    c.sampler.seed = v;
}

} // namespace fastfit
