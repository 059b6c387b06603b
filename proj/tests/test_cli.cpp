#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "fastfit/benchkit.hpp"
#include "fastfit/commands.hpp"
#include "fastfit/weights_io.hpp"

using namespace fastfit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("fastfit_cli_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& f) const { return (path / f).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream(path, std::ios::binary) << text;
}

int run(const std::string& args) {
    const std::string cmd = std::string(FASTFIT_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json small_config_json(const TempDir& dir) {
    return {{"seed", 3},
            {"model", {{"width", 16}, {"heads", 2}, {"blocks", 1}, {"grid_h", 4}, {"grid_w", 3}}},
            {"sampler", {{"steps", 4}}},
            {"bench", {{"refs", 2}, {"ref_grid_h", 4}, {"ref_grid_w", 3}}},
            {"train", {{"steps", 4}, {"batch", 2}, {"dataset", 8}, {"eval_samples", 2}, {"log_every", 1}}},
            {"synthetic", {{"ref_grid_h", 2}, {"ref_grid_w", 2}}},
            {"paths",
             {{"weights_out", dir / "w.bin"},
              {"report_out", dir / "report.json"},
              {"loss_csv", dir / "loss.csv"},
              {"sample_out", dir / "sample"}}}};
}

} // namespace

TEST_CASE("config round trip") {
    const RunConfig defaults = run_config_from_json(json::object());
    CHECK(run_config_to_json(run_config_from_json(run_config_to_json(defaults))) == run_config_to_json(defaults));

    TempDir dir("roundtrip");
    const json j = small_config_json(dir);
    const RunConfig c = run_config_from_json(j);
    CHECK(c.seed == 3);
    CHECK(c.model.width == 16);
    CHECK(c.train.batch == 2);
    const json emitted = run_config_to_json(c);
    CHECK(run_config_to_json(run_config_from_json(emitted)) == emitted);
    for (const auto& [section, values] : j.items())
        if (values.is_object())
            for (const auto& [key, v] : values.items())
                CHECK(emitted.at(section).at(key) == v);
}

TEST_CASE("config rejects unknown keys and invalid values") {
    CHECK_THROWS_AS(run_config_from_json({{"sed", 1}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"model", {{"widht", 8}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"sampler", {{"steps", "many"}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"sampler", {{"steps", 100}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"sampler", {{"eta", 0.3}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"model", {{"width", 10}, {"heads", 4}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"bench", {{"runs", 3}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json::array()), ConfigError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/fastfit.json"), ConfigError);
}

TEST_CASE("seed override from the environment") {
    RunConfig c;
    ::setenv("FASTFIT_SEED", "77", 1);
    apply_seed_override(c);
    CHECK(c.seed == 77);
    ::setenv("FASTFIT_SEED", "x1", 1);
    CHECK_THROWS_AS(apply_seed_override(c), ConfigError);
    ::unsetenv("FASTFIT_SEED");
    apply_seed_override(c);
    CHECK(c.seed == 77);
}

TEST_CASE("weights files") {
    TempDir dir("weights");
    ModelConfig m;
    m.width = 16;
    m.heads = 2;
    m.blocks = 1;
    Rng rng(1);
    const auto p = DenoiserParams<float>::init(m, rng);
    const auto path = dir / "w.bin";
    save_params(p, path, {{"note", "x"}});
    json extra;
    const auto back = load_params<float>(path, &extra);
    CHECK(back.fingerprint() == p.fingerprint());
    CHECK(back.config == m);
    CHECK(extra.at("note") == "x");

    const std::string bytes = slurp(path);
    spit(dir / "short.bin", bytes.substr(0, bytes.size() - 4));
    CHECK_THROWS_AS(load_params<float>(dir / "short.bin"), IoError);
    spit(dir / "long.bin", bytes + "abcd");
    CHECK_THROWS_AS(load_params<float>(dir / "long.bin"), IoError);
    spit(dir / "junk.bin", "not a weights file at all");
    CHECK_THROWS_AS(load_params<float>(dir / "junk.bin"), IoError);
    CHECK_THROWS_AS(load_params<float>(dir / "missing.bin"), IoError);

    std::vector<NamedTensor> wrong{{"in_w", Tensor<float>({3, 3})}};
    write_container(dir / "wrong.bin", {{"kind", "denoiser_params"}, {"config", model_config_to_json(m)}}, wrong);
    CHECK_THROWS_AS(load_params<float>(dir / "wrong.bin"), IoError);

    CHECK(model_config_from_json(model_config_to_json(m)) == m);
    CHECK_THROWS_AS(model_config_from_json({{"blocks", 1}, {"depth", 3}}), ConfigError);
}

TEST_CASE("raw tensors") {
    TempDir dir("raw");
    Tensor<float> t({2, 3}, {1.f, -2.f, 3.5f, 0.f, 1e-7f, -0.25f});
    write_raw_tensor(dir / "t.bin", t, {{"name", "t"}});
    CHECK(read_raw_tensor(dir / "t.bin") == t);
    const json side = json::parse(slurp(dir / "t.bin.json"));
    CHECK(side.at("dtype") == "f32le");
    CHECK(side.at("shape") == json::array({2, 3}));
    CHECK(slurp(dir / "t.bin").size() == 24);
    spit(dir / "t.bin", slurp(dir / "t.bin").substr(0, 20));
    CHECK_THROWS_AS(read_raw_tensor(dir / "t.bin"), IoError);
}

TEST_CASE("verify command") {
    TempDir dir("verify");
    RunConfig c = run_config_from_json(small_config_json(dir));
    std::ostringstream out;
    CHECK(cmd_verify(c, {}, out) == kExitOk);
    for (const char* suite : {"losslessness", "mask", "timestep-independence", "gradients"})
        CHECK(out.str().find(std::string("[PASS] ") + suite) != std::string::npos);

    std::ostringstream broken;
    CHECK(cmd_verify(c, VerifyArgs{true}, broken) == kExitVerifyFailed);
    CHECK(broken.str().find("[FAIL] mask") != std::string::npos);
}

TEST_CASE("bench command") {
    TempDir dir("bench");
    RunConfig c = run_config_from_json(small_config_json(dir));
    c.model.grid_h = 8;
    c.model.grid_w = 6;
    std::ostringstream out;
    CHECK(cmd_bench(c, {}, out) == kExitOk);
    const auto report = load_report_json(slurp(dir / "report.json"));
    CHECK(report.modes.size() == 3);
    BenchShape shape;
    shape.model = c.model;
    shape.ref_tokens.assign(2, 12);
    shape.steps = 4;
    const double cached = flops(shape, SampleMode::Cached).total;
    for (const auto& m : report.modes) {
        CHECK(m.flops == flops(shape, m.mode).total);
        CHECK(m.analytic_ratio == m.flops / cached);
    }

    BenchArgs one;
    one.mode = "cached";
    one.out = dir / "one.csv";
    std::ostringstream out2;
    CHECK(cmd_bench(c, one, out2) == kExitOk);
    std::istringstream csv(slurp(dir / "one.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    CHECK(line == "mode,runs,mean_s,stdev_s,flops,ratio");
    while (std::getline(csv, line))
        rows += !line.empty();
    CHECK(rows == 1);
}

TEST_CASE("train-demo and sample commands") {
    TempDir dir("train");
    RunConfig c = run_config_from_json(small_config_json(dir));
    std::ostringstream out;
    CHECK(cmd_train_demo(c, {}, out) == kExitOk);
    CHECK(fs::exists(dir / "w.bin"));
    const std::string full_curve = slurp(dir / "loss.csv");
    CHECK(full_curve.rfind("step,loss\n0,", 0) == 0);

    TrainArgs half;
    half.steps = 2;
    half.out = dir / "half.bin";
    half.loss_csv = dir / "half.csv";
    CHECK(cmd_train_demo(c, half, out) == kExitOk);
    TrainArgs resume;
    resume.resume = dir / "half.bin";
    resume.out = dir / "resumed.bin";
    resume.loss_csv = dir / "resumed.csv";
    CHECK(cmd_train_demo(c, resume, out) == kExitOk);
    CHECK(slurp(dir / "resumed.csv") == full_curve);
    CHECK(slurp(dir / "resumed.bin") == slurp(dir / "w.bin"));

    SampleArgs s;
    s.weights = dir / "w.bin";
    CHECK(cmd_sample(c, s, out) == kExitOk);
    const std::string z0 = slurp(dir / "sample_z0.bin");
    const std::string image = slurp(dir / "sample_image.bin");
    const json meta = json::parse(slurp(dir / "sample.json"));
    CHECK(meta.at("mode") == "cached");
    CHECK(meta.at("equivalence").at("cached_vs_uncached_max_abs_diff").get<double>() <= 1e-5);
    CHECK(meta.at("stats").at("cache_hash_before") == meta.at("stats").at("cache_hash_after"));
    CHECK(read_raw_tensor(dir / "sample_image.bin").shape() == Shape{8, 6, 3});

    CHECK(cmd_sample(c, s, out) == kExitOk);
    CHECK(slurp(dir / "sample_z0.bin") == z0);
    CHECK(slurp(dir / "sample_image.bin") == image);

    s.mode = "uncached";
    s.out = dir / "unc";
    CHECK(cmd_sample(c, s, out) == kExitOk);
    CHECK(json::parse(slurp(dir / "unc.json")).at("stats").at("joint_passes").get<int>() == 4);

    SampleArgs missing;
    CHECK_THROWS_AS(cmd_sample(c, missing, out), ConfigError);
    missing.weights = dir / "nope.bin";
    CHECK_THROWS_AS(cmd_sample(c, missing, out), IoError);

    RunConfig other = c;
    other.model.width = 32;
    CHECK_THROWS_AS(cmd_train_demo(other, resume, out), ConfigError);
}

TEST_CASE("executable exit codes") {
    TempDir dir("exe");
    const std::string cfg = dir / "cfg.json";
    spit(cfg, small_config_json(dir).dump());
    CHECK(run("--help") == 0);
    CHECK(run("") == 2);
    CHECK(run("frobnicate") == 2);
    CHECK(run("bench --runs") == 2);
    CHECK(run("-c " + dir / "missing.json" + " verify") == 2);
    spit(dir / "bad.json", R"({"model": {"widht": 3}})");
    CHECK(run("-c " + dir / "bad.json" + " verify") == 2);
    CHECK(run("-c " + cfg + " verify") == 0);
    CHECK(run("-c " + cfg + " verify --break-mask") == 1);
    CHECK(run("-c " + cfg + " sample --weights " + dir / "none.bin") == 2);

    ModelConfig m = run_config_from_json(small_config_json(dir)).model;
    Rng rng(2);
    auto p = DenoiserParams<float>::init(m, rng);
    p.out_b[0] = std::numeric_limits<float>::quiet_NaN();
    save_params(p, dir / "nan.bin");
    CHECK(run("-c " + cfg + " sample --weights " + dir / "nan.bin") == 3);
}
