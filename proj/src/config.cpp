#include "fdibench/config.hpp"

#include "fdibench/io.hpp"

#include <algorithm>
#include <cctype>

namespace fdibench::config {

using nlohmann::json;

void Config::apply_seed(std::uint64_t root) {
    seed = root;
    scenario.seed = root;
    suite.hyper.seed = derive_seed(root, "transformer-init");
    suite.train.seed = derive_seed(root, "transformer-train");
    benchmark.root_seed = root;
}

eval::BenchmarkSpec Config::benchmark_spec() const {
    eval::BenchmarkSpec b = benchmark;
    b.root_seed = seed;
    b.scenario = scenario;
    b.filter = filter;
    b.suite = suite;
    return b;
}

eval::Suite Config::resilience_suite() const {
    eval::SuiteConfig sc = suite;
    sc.target_far = resilience.target_far;
    return eval::prepare_suite(scenario.model, scenario.noise, {resilience.detector}, scenario, filter, sc, seed);
}

json to_json(const Config& c) {
    const auto& s = c.scenario;
    const auto& t = c.suite;
    json j;
    j["version"] = c.version;
    j["seed"] = c.seed;
    j["scenario"] = {{"model", to_string(s.model)},
                     {"noise", to_string(s.noise)},
                     {"attack", to_string(s.attack)},
                     {"steps", s.steps},
                     {"onset", s.onset},
                     {"attack_end", s.attack_end},
                     {"gps_std", s.gps_std},
                     {"camera_std", s.camera_std},
                     {"mag_std", s.mag_std},
                     {"process_std", s.process_std},
                     {"bias_sigmas", s.bias_sigmas},
                     {"ramp_steps", s.ramp_steps}};
    j["filter"] = {{"initial_covariance", c.filter.initial_covariance},
                   {"warmup_steps", c.filter.warmup_steps},
                   {"normalized", c.filter.normalized}};
    j["detectors"] = {
        {"selected", detect::detector_id(c.detector)},
        {"target_false_alarm", t.target_far},
        {"calibration_runs", t.calibration_runs},
        {"cusum", {{"drift", t.cusum.drift}, {"threshold", t.cusum.threshold}}},
        {"sprt", {{"alpha", t.sprt.alpha}, {"beta", t.sprt.beta}, {"mu1", t.sprt.mu1}}},
        {"bht", {{"window", t.bht.window}, {"prior", t.bht.prior}, {"mu1", t.bht.mu1}, {"threshold", t.bht.threshold}}},
        {"logreg",
         {{"iterations", t.logreg.iterations},
          {"step", t.logreg.step},
          {"l2", t.logreg.l2},
          {"history", t.logreg_history}}},
        {"transformer", {{"h_run", t.h_run}}}};
    j["training"] = {{"window", t.hyper.window},
                     {"d_model", t.hyper.d_model},
                     {"heads", t.hyper.heads},
                     {"layers", t.hyper.layers},
                     {"d_ff", t.hyper.d_ff},
                     {"epochs", t.train.epochs},
                     {"batch_size", t.train.batch_size},
                     {"stride", t.train.stride},
                     {"step", t.train.step},
                     {"clip_norm", t.train.clip_norm},
                     {"weight_rec", t.train.weights.rec},
                     {"weight_disc", t.train.weights.disc},
                     {"weight_cls", t.train.weights.cls},
                     {"reconstruct_attacked", t.train.weights.rec_on_attacked},
                     {"clean_runs", t.train_clean_runs},
                     {"labeled_runs", t.train_labeled_runs}};
    j["resilience"] = {{"enabled", c.resilience.enabled},
                       {"n_clean", c.resilience.n_clean},
                       {"detector", detect::detector_id(c.resilience.detector)},
                       {"target_false_alarm", c.resilience.target_far}};
    json models = json::array(), noises = json::array(), attacks = json::array(), dets = json::array();
    for (auto m : c.benchmark.models) models.push_back(to_string(m));
    for (auto n : c.benchmark.noises) noises.push_back(to_string(n));
    for (auto a : c.benchmark.attacks) attacks.push_back(to_string(a));
    for (auto d : c.benchmark.detectors) dets.push_back(detect::detector_id(d));
    j["benchmark"] = {{"models", models},
                      {"noises", noises},
                      {"attacks", attacks},
                      {"detectors", dets},
                      {"seeds", c.benchmark.seeds}};
    return j;
}

namespace {

long line_of(const std::string& text, const std::string& key) {
    const std::string quoted = "\"" + key + "\"";
    std::size_t pos = 0;
    while ((pos = text.find(quoted, pos)) != std::string::npos) {
        std::size_t after = pos + quoted.size();
        while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
        if (after < text.size() && text[after] == ':')
            return 1 + static_cast<long>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
        pos = after;
    }
    return 0;
}

struct Ctx {
    const std::string& text;
    const std::string& source;

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        const long line = line_of(text, key);
        throw ConfigError(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + msg);
    }
};

/// Overlays `user` on `defaults`, rejecting keys absent from the defaults.
void overlay(json& defaults, const json& user, const std::string& path, const Ctx& ctx) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string full = path.empty() ? it.key() : path + "." + it.key();
        if (!defaults.contains(it.key())) ctx.fail(it.key(), "unknown key '" + full + "'");
        auto& slot = defaults[it.key()];
        if (slot.is_object()) {
            if (!it->is_object()) ctx.fail(it.key(), "'" + full + "' must be an object");
            overlay(slot, *it, full, ctx);
            continue;
        }
        const bool ok = (slot.is_number() && it->is_number()) || (slot.is_boolean() && it->is_boolean()) ||
                        (slot.is_string() && it->is_string()) || (slot.is_array() && it->is_array());
        if (!ok) ctx.fail(it.key(), "'" + full + "' has the wrong type (expected " + slot.type_name() + ")");
        if (slot.is_number_integer() && !it->is_number_integer())
            ctx.fail(it.key(), "'" + full + "' must be an integer");
        if (slot.is_number_unsigned() && it->is_number_integer() && it->get<long long>() < 0)
            ctx.fail(it.key(), "'" + full + "' must be non-negative");
        slot = *it;
    }
}

template <typename F>
auto checked(const Ctx& ctx, const std::string& key, F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        ctx.fail(key, e.what());
    } catch (const ContractViolation& e) {
        ctx.fail(key, e.what());
    }
}

}  // namespace

namespace {

Config parse_checked(const std::string& text, const std::string& source) {
    const Ctx ctx{text, source};
    json user;
    try {
        user = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    if (!user.is_object()) throw ConfigError(source + ": top level must be an object");
    if (!user.contains("version")) throw ConfigError(source + ": missing mandatory 'version' field");
    if (!user["version"].is_number_integer() || user["version"].get<int>() != kConfigVersion)
        ctx.fail("version", "unsupported config version (expected " + std::to_string(kConfigVersion) + ")");

    Config c;
    json j = to_json(c);
    overlay(j, user, "", ctx);

    c.apply_seed(j["seed"].get<std::uint64_t>());
    const auto& s = j["scenario"];
    auto& sc = c.scenario;
    sc.model = checked(ctx, "model", [&] { return parse_model_id(s["model"].get<std::string>()); });
    sc.noise = checked(ctx, "noise", [&] { return parse_noise_family(s["noise"].get<std::string>()); });
    sc.attack = checked(ctx, "attack", [&] { return parse_attack_kind(s["attack"].get<std::string>()); });
    sc.steps = s["steps"];
    sc.onset = s["onset"];
    sc.attack_end = s["attack_end"];
    sc.gps_std = s["gps_std"];
    sc.camera_std = s["camera_std"];
    sc.mag_std = s["mag_std"];
    sc.process_std = s["process_std"];
    sc.bias_sigmas = s["bias_sigmas"];
    sc.ramp_steps = s["ramp_steps"];
    if (sc.steps < 1) ctx.fail("steps", "scenario.steps must be >= 1");

    const auto& f = j["filter"];
    c.filter.initial_covariance = f["initial_covariance"];
    c.filter.warmup_steps = f["warmup_steps"];
    c.filter.normalized = f["normalized"];
    if (!(c.filter.initial_covariance > 0.0)) ctx.fail("initial_covariance", "initial_covariance must be > 0");
    if (c.filter.warmup_steps < 0) ctx.fail("warmup_steps", "warmup_steps must be >= 0");

    const auto& d = j["detectors"];
    auto& t = c.suite;
    c.detector = checked(ctx, "selected", [&] { return detect::parse_detector_id(d["selected"].get<std::string>()); });
    t.target_far = d["target_false_alarm"];
    t.calibration_runs = d["calibration_runs"];
    t.cusum.drift = d["cusum"]["drift"];
    t.cusum.threshold = d["cusum"]["threshold"];
    t.sprt.alpha = d["sprt"]["alpha"];
    t.sprt.beta = d["sprt"]["beta"];
    t.sprt.mu1 = d["sprt"]["mu1"];
    t.bht.window = d["bht"]["window"];
    t.bht.prior = d["bht"]["prior"];
    t.bht.mu1 = d["bht"]["mu1"];
    t.bht.threshold = d["bht"]["threshold"];
    t.logreg.iterations = d["logreg"]["iterations"];
    t.logreg.step = d["logreg"]["step"];
    t.logreg.l2 = d["logreg"]["l2"];
    t.logreg_history = d["logreg"]["history"];
    t.h_run = d["transformer"]["h_run"];
    if (!(t.target_far > 0.0 && t.target_far < 1.0)) ctx.fail("target_false_alarm", "target_false_alarm must be in (0, 1)");
    if (!(t.sprt.alpha > 0.0 && t.sprt.alpha < 1.0 && t.sprt.beta > 0.0 && t.sprt.beta < 1.0))
        ctx.fail("sprt", "sprt alpha and beta must be in (0, 1)");
    if (!(t.bht.prior > 0.0 && t.bht.prior < 1.0)) ctx.fail("prior", "bht prior must be in (0, 1)");
    if (t.bht.window < 1) ctx.fail("window", "bht window must be >= 1");
    if (t.h_run < 1) ctx.fail("h_run", "h_run must be >= 1");

    const auto& tr = j["training"];
    t.hyper.window = tr["window"];
    t.hyper.d_model = tr["d_model"];
    t.hyper.heads = tr["heads"];
    t.hyper.layers = tr["layers"];
    t.hyper.d_ff = tr["d_ff"];
    t.train.epochs = tr["epochs"];
    t.train.batch_size = tr["batch_size"];
    t.train.stride = tr["stride"];
    t.train.step = tr["step"];
    t.train.clip_norm = tr["clip_norm"];
    t.train.weights.rec = tr["weight_rec"];
    t.train.weights.disc = tr["weight_disc"];
    t.train.weights.cls = tr["weight_cls"];
    t.train.weights.rec_on_attacked = tr["reconstruct_attacked"];
    t.train_clean_runs = tr["clean_runs"];
    t.train_labeled_runs = tr["labeled_runs"];
    checked(ctx, "training", [&] {
        t.hyper.validate();
        return 0;
    });
    if (t.train.epochs < 0 || t.train.batch_size < 1 || t.train.stride < 1)
        ctx.fail("training", "training epochs must be >= 0, batch_size and stride >= 1");

    const auto& r = j["resilience"];
    c.resilience.enabled = r["enabled"];
    c.resilience.n_clean = r["n_clean"];
    c.resilience.detector = checked(ctx, "detector", [&] { return detect::parse_detector_id(r["detector"].get<std::string>()); });
    c.resilience.target_far = r["target_false_alarm"];
    if (c.resilience.n_clean < 1) ctx.fail("n_clean", "n_clean must be >= 1");

    const auto& b = j["benchmark"];
    c.benchmark.models.clear();
    c.benchmark.noises.clear();
    c.benchmark.attacks.clear();
    c.benchmark.detectors.clear();
    for (const auto& v : b["models"]) c.benchmark.models.push_back(checked(ctx, "models", [&] { return parse_model_id(v.get<std::string>()); }));
    for (const auto& v : b["noises"])
        c.benchmark.noises.push_back(checked(ctx, "noises", [&] { return parse_noise_family(v.get<std::string>()); }));
    for (const auto& v : b["attacks"])
        c.benchmark.attacks.push_back(checked(ctx, "attacks", [&] { return parse_attack_kind(v.get<std::string>()); }));
    for (const auto& v : b["detectors"])
        c.benchmark.detectors.push_back(checked(ctx, "detectors", [&] { return detect::parse_detector_id(v.get<std::string>()); }));
    c.benchmark.seeds = b["seeds"];
    if (c.benchmark.seeds < 1) ctx.fail("seeds", "benchmark.seeds must be >= 1");
    return c;
}

}  // namespace

Config parse_config(const std::string& text, const std::string& source) {
    try {
        return parse_checked(text, source);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(source + ": " + e.what());
    }
}

Config load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path), path.string()); }

}  // namespace fdibench::config
