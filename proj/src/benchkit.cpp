#include "fastfit/benchkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fastfit/refcache.hpp"

namespace fastfit {

std::size_t BenchShape::ref_total() const {
    return std::accumulate(ref_tokens.begin(), ref_tokens.end(), std::size_t{0});
}

namespace {

struct Terms {
    double d, e, cin, dl, blocks;
};

// Per-token projections of one block plus the per-segment modulation.
double block_dense(const Terms& m, double n) { return 2 * m.e * m.d + n * 5 * m.d * m.d; }

double segment_dense(const Terms& m, double n) { return n * m.cin * m.d + m.blocks * block_dense(m, n); }

double attention_pairs(double pairs, const Terms& m) { return m.blocks * 2 * m.d * pairs; }

double x_pass(const Terms& m, double nx, double keys) {
    return segment_dense(m, nx) + 2 * m.e * m.e + attention_pairs(nx * keys, m) + nx * m.d * m.dl;
}

} // namespace

FlopsBreakdown flops(const BenchShape& shape, SampleMode mode) {
    const auto& mc = shape.model;
    const Terms m{double(mc.width), double(mc.embed_dim()), double(mc.input_channels()), double(mc.latent_channels),
                  double(mc.blocks)};
    const double nx = double(mc.tokens());
    const double sr = double(shape.ref_total());
    double refs_dense = 0, refs_self = 0;
    for (auto n : shape.ref_tokens) {
        refs_dense += segment_dense(m, double(n));
        refs_self += double(n) * double(n);
    }

    FlopsBreakdown f;
    const double uncond = shape.cfg ? x_pass(m, nx, nx) : 0.0;
    switch (mode) {
    case SampleMode::Cached:
        f.one_time = refs_dense + attention_pairs(refs_self, m);
        f.per_step = x_pass(m, nx, nx + sr) + uncond;
        break;
    case SampleMode::UncachedJoint:
        f.per_step = x_pass(m, nx, nx + sr) + refs_dense + attention_pairs(refs_self, m) + uncond;
        break;
    case SampleMode::FullAttention: {
        const double l = nx + sr;
        f.per_step = x_pass(m, nx, l) + refs_dense + attention_pairs(sr * l, m) + uncond;
        break;
    }
    }
    f.total = f.one_time + double(shape.steps) * f.per_step;
    return f;
}

void BenchOptions::validate() const {
    if (runs < 10)
        throw ConfigError("bench.runs must be >= 10");
    if (warmup < 3)
        throw ConfigError("bench.warmup must be >= 3");
    if (threads < 1)
        throw ConfigError("bench.threads must be >= 1");
    if (modes.empty())
        throw ConfigError("no benchmark modes selected");
}

const ModeTiming* BenchReport::find(SampleMode mode) const {
    for (const auto& m : modes)
        if (m.mode == mode)
            return &m;
    return nullptr;
}

double timer_tick_seconds() {
    using Clock = std::chrono::steady_clock;
    auto best = Clock::duration::max();
    for (int i = 0; i < 200; ++i) {
        const auto a = Clock::now();
        auto b = Clock::now();
        while (b == a)
            b = Clock::now();
        best = std::min(best, b - a);
    }
    return std::chrono::duration<double>(best).count();
}

namespace {

struct BenchInputs {
    DenoiserParams<float> params;
    Tensor<float> z_T;
    PersonCondition<float> person;
    std::vector<ReferenceItem<float>> items;
};

BenchInputs make_inputs(const BenchShape& shape, std::uint64_t seed) {
    const auto& mc = shape.model;
    if (shape.ref_tokens.size() > mc.categories.size())
        throw ConfigError("more references than categories");
    Rng rng(seed);
    Rng prng = rng.fork(0);
    BenchInputs in{DenoiserParams<double>::init(mc, prng).cast<float>(), {}, {}, {}};
    Rng drng = rng.fork(1);
    in.z_T = gaussian<float>(drng, mc.tokens(), mc.latent_channels);
    in.person.mask = Tensor<float>({mc.tokens(), 1});
    for (std::size_t i = 0; i < mc.tokens(); ++i)
        in.person.mask(i, 0) = drng.bernoulli(0.3) ? 1.0f : 0.0f;
    in.person.composite = Tensor<float>({mc.tokens(), mc.latent_channels});
    for (auto& v : in.person.composite.values())
        v = static_cast<float>(drng.uniform(-1, 1));
    for (std::size_t k = 0; k < shape.ref_tokens.size(); ++k) {
        const std::size_t n = shape.ref_tokens[k];
        Tensor<float> lat({n, mc.latent_channels});
        for (auto& v : lat.values())
            v = static_cast<float>(drng.uniform(-1, 1));
        in.items.push_back({std::move(lat), k, n, 1});
    }
    return in;
}

struct Moments {
    double mean = 0, stdev = 0;
};

Moments moments(const std::vector<double>& xs) {
    Moments m;
    if (xs.empty())
        return m;
    m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
    double acc = 0;
    for (double x : xs)
        acc += (x - m.mean) * (x - m.mean);
    m.stdev = xs.size() > 1 ? std::sqrt(acc / double(xs.size() - 1)) : 0.0;
    return m;
}

} // namespace

BenchReport measure(const BenchShape& shape, const BenchOptions& options) {
    options.validate();
    shape.model.validate();
    const auto in = make_inputs(shape, options.seed);

    BenchReport report;
    report.tokens_x = shape.model.tokens();
    report.ref_tokens = shape.ref_tokens;
    report.width = shape.model.width;
    report.heads = shape.model.heads;
    report.blocks = shape.model.blocks;
    report.steps = shape.steps;
    report.cfg = shape.cfg;
    report.warmup = options.warmup;
    report.runs = options.runs;
    report.params = in.params.parameter_count();
    report.timer_tick_s = timer_tick_seconds();

    const std::size_t n_modes = options.modes.size();
    std::vector<std::vector<double>> totals(n_modes), steps(n_modes);
    std::vector<std::int64_t> peaks(n_modes, 0);
    for (std::size_t r = 0; r < options.warmup + options.runs; ++r) {
        for (std::size_t j = 0; j < n_modes; ++j) {
            const std::size_t idx = r % 2 == 0 ? j : n_modes - 1 - j;
            SamplerConfig sc;
            sc.steps = shape.steps;
            sc.cfg = shape.cfg;
            sc.guidance = options.guidance;
            sc.mode = options.modes[idx];
            WorkspaceMeter meter;
            const auto out = sample<float>(in.z_T, in.person, in.items, in.params, sc);
            peaks[idx] = std::max(peaks[idx], meter.peak_bytes());
            if (r < options.warmup)
                continue;
            totals[idx].push_back(out.stats.total_seconds);
            steps[idx].push_back(std::accumulate(out.stats.step_seconds.begin(), out.stats.step_seconds.end(), 0.0) /
                                 double(out.stats.step_seconds.size()));
        }
    }

    const double cached_flops = flops(shape, SampleMode::Cached).total;
    report.valid = true;
    for (std::size_t j = 0; j < n_modes; ++j) {
        ModeTiming mt;
        mt.mode = options.modes[j];
        mt.runs = totals[j].size();
        const auto tm = moments(totals[j]);
        const auto sm = moments(steps[j]);
        mt.mean_s = tm.mean;
        mt.stdev_s = tm.stdev;
        mt.step_mean_s = sm.mean;
        mt.step_stdev_s = sm.stdev;
        const auto f = flops(shape, mt.mode);
        mt.flops = f.total;
        mt.flops_per_step = f.per_step;
        mt.analytic_ratio = f.total / cached_flops;
        mt.peak_workspace_bytes = peaks[j];
        if (mt.step_mean_s < 100 * report.timer_tick_s)
            throw ArgumentError("timer resolution insufficient: per-step time " + std::to_string(mt.step_mean_s) +
                                " s is under 100 ticks of " + std::to_string(report.timer_tick_s) + " s");
        if (mt.stdev_s > 0.1 * mt.mean_s) {
            report.valid = false;
            report.note += mode_name(mt.mode) + ": stdev/mean " + std::to_string(mt.stdev_s / mt.mean_s) + " > 0.1; ";
        }
        report.modes.push_back(mt);
    }
    if (const ModeTiming* cached = report.find(SampleMode::Cached))
        for (auto& mt : report.modes)
            mt.ratio = mt.mean_s / cached->mean_s;

    if (options.threads > 1) {
        ReferenceKVCache<float> cache = precompute_cache<float>(in.items, in.params);
        SamplerConfig sc;
        sc.steps = shape.steps;
        sc.cfg = shape.cfg;
        sc.guidance = options.guidance;
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < options.threads; ++w)
            pool.emplace_back([&] {
                for (std::size_t r = 0; r < options.runs; ++r)
                    sample<float>(in.z_T, in.person, in.items, in.params, sc, &cache);
            });
        for (auto& th : pool)
            th.join();
        auto& tp = report.throughput;
        tp.threads = options.threads;
        tp.requests = options.threads * options.runs;
        tp.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        tp.requests_per_s = double(tp.requests) / tp.seconds;
    }
    return report;
}

ReportFormat parse_report_format(const std::string& name) {
    if (name == "json")
        return ReportFormat::Json;
    if (name == "csv")
        return ReportFormat::Csv;
    if (name == "md" || name == "markdown")
        return ReportFormat::Markdown;
    throw ArgumentError("unknown report format '" + name + "' (json|csv|markdown)");
}

ReportFormat report_format_for_path(const std::string& path) {
    const auto dot = path.rfind('.');
    if (dot == std::string::npos)
        throw ArgumentError("report path '" + path + "' has no format suffix (.json, .csv, .md)");
    return parse_report_format(path.substr(dot + 1));
}

namespace {

std::string variant_label(SampleMode mode) {
    switch (mode) {
    case SampleMode::Cached:
        return "FastFit (cached)";
    case SampleMode::UncachedJoint:
        return "w/o KV Cache";
    case SampleMode::FullAttention:
        return "w/ Full Attention";
    }
    return "?";
}

nlohmann::ordered_json to_json(const BenchReport& r) {
    nlohmann::ordered_json j;
    j["config"] = {{"tokens_x", r.tokens_x}, {"ref_tokens", r.ref_tokens}, {"width", r.width},
                   {"heads", r.heads},       {"blocks", r.blocks},         {"steps", r.steps},
                   {"cfg", r.cfg},           {"warmup", r.warmup},         {"runs", r.runs}};
    j["params"] = r.params;
    j["timer_tick_s"] = r.timer_tick_s;
    j["valid"] = r.valid;
    j["note"] = r.note;
    j["modes"] = nlohmann::ordered_json::array();
    for (const auto& m : r.modes)
        j["modes"].push_back({{"mode", mode_name(m.mode)},
                              {"runs", m.runs},
                              {"mean_s", m.mean_s},
                              {"stdev_s", m.stdev_s},
                              {"step_mean_s", m.step_mean_s},
                              {"step_stdev_s", m.step_stdev_s},
                              {"flops", m.flops},
                              {"flops_per_step", m.flops_per_step},
                              {"ratio", m.ratio},
                              {"analytic_ratio", m.analytic_ratio},
                              {"peak_workspace_bytes", m.peak_workspace_bytes}});
    if (r.throughput.threads > 0)
        j["throughput"] = {{"threads", r.throughput.threads},
                           {"requests", r.throughput.requests},
                           {"seconds", r.throughput.seconds},
                           {"requests_per_s", r.throughput.requests_per_s}};
    return j;
}

} // namespace

std::string emit_report(const BenchReport& r, ReportFormat format) {
    std::ostringstream out;
    switch (format) {
    case ReportFormat::Json:
        out << to_json(r).dump(2) << "\n";
        break;
    case ReportFormat::Csv:
        out << "mode,runs,mean_s,stdev_s,flops,ratio\n" << std::setprecision(9);
        for (const auto& m : r.modes)
            out << mode_name(m.mode) << ',' << m.runs << ',' << m.mean_s << ',' << m.stdev_s << ',' << m.flops << ','
                << m.ratio << '\n';
        break;
    case ReportFormat::Markdown:
        out << "| Variants | Time (s) | Step (ms) | FLOPs (MAC) | Speedup | Analytic |\n";
        out << "|---|---|---|---|---|---|\n";
        out << std::fixed;
        for (const auto& m : r.modes)
            out << "| " << variant_label(m.mode) << " | " << std::setprecision(3) << m.mean_s << " | "
                << std::setprecision(2) << m.step_mean_s * 1e3 << " | " << std::scientific << std::setprecision(3)
                << m.flops << std::fixed << " | " << std::setprecision(2) << m.ratio << "x | " << m.analytic_ratio
                << "x |\n";
        break;
    }
    return out.str();
}

BenchReport load_report_json(const std::string& text) {
    BenchReport r;
    try {
        const auto j = nlohmann::json::parse(text);
        const auto& c = j.at("config");
        r.tokens_x = c.at("tokens_x").get<std::size_t>();
        r.ref_tokens = c.at("ref_tokens").get<std::vector<std::size_t>>();
        r.width = c.at("width").get<std::size_t>();
        r.heads = c.at("heads").get<std::size_t>();
        r.blocks = c.at("blocks").get<std::size_t>();
        r.steps = c.at("steps").get<std::size_t>();
        r.cfg = c.at("cfg").get<bool>();
        r.warmup = c.at("warmup").get<std::size_t>();
        r.runs = c.at("runs").get<std::size_t>();
        r.params = j.at("params").get<std::size_t>();
        r.timer_tick_s = j.at("timer_tick_s").get<double>();
        r.valid = j.at("valid").get<bool>();
        r.note = j.at("note").get<std::string>();
        for (const auto& m : j.at("modes")) {
            ModeTiming mt;
            mt.mode = parse_mode(m.at("mode").get<std::string>());
            mt.runs = m.at("runs").get<std::size_t>();
            mt.mean_s = m.at("mean_s").get<double>();
            mt.stdev_s = m.at("stdev_s").get<double>();
            mt.step_mean_s = m.at("step_mean_s").get<double>();
            mt.step_stdev_s = m.at("step_stdev_s").get<double>();
            mt.flops = m.at("flops").get<double>();
            mt.flops_per_step = m.at("flops_per_step").get<double>();
            mt.ratio = m.at("ratio").get<double>();
            mt.analytic_ratio = m.at("analytic_ratio").get<double>();
            mt.peak_workspace_bytes = m.at("peak_workspace_bytes").get<std::int64_t>();
            r.modes.push_back(mt);
        }
        if (j.contains("throughput")) {
            const auto& t = j.at("throughput");
            r.throughput = {t.at("threads").get<std::size_t>(), t.at("requests").get<std::size_t>(),
                            t.at("seconds").get<double>(), t.at("requests_per_s").get<double>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed bench report: ") + e.what());
    }
    return r;
}

} // namespace fastfit
