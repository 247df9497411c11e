#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "fdibench/eval.hpp"
#include "fdibench/resilience.hpp"

namespace fdibench::config {

inline constexpr int kConfigVersion = 1;

struct ResilienceSettings {
    bool enabled = false;
    int n_clean = 100;
    detect::DetectorKind detector = detect::DetectorKind::Cusum;
    double target_far = 1e-4;  // per-step false alarms of the masking detector
};

/// Every run is described by one document. All randomness derives from
/// `seed`: the scenario uses it directly, transformer initialization and
/// shuffling use derive_seed(seed, "transformer-init"/"transformer-train"),
/// and benchmark cells use derive_seed(seed, cell name).
struct Config {
    int version = kConfigVersion;
    std::uint64_t seed = 2024;
    eval::ScenarioSpec scenario;
    ekf::FilterConfig filter;
    detect::DetectorKind detector = detect::DetectorKind::Cusum;
    eval::SuiteConfig suite;
    ResilienceSettings resilience;
    eval::BenchmarkSpec benchmark;  // grid axes and seed count

    Config() { apply_seed(seed); }

    /// Propagates `seed` into the scenario and the derived sub-seeds.
    void apply_seed(std::uint64_t root);
    eval::BenchmarkSpec benchmark_spec() const;

    /// Masking detector for the configured scenario group, calibrated to
    /// resilience.target_far on that group's clean corpus.
    eval::Suite resilience_suite() const;
    resilience::ResilienceConfig resilience_config() const { return {resilience.enabled, resilience.n_clean}; }
};

/// Materialized document, every default included.
nlohmann::json to_json(const Config& cfg);

/// Throws ConfigError naming the line of the offending key for unknown
/// keys, type errors, or a missing/unsupported version.
Config parse_config(const std::string& text, const std::string& source = "<config>");
Config load_config(const std::filesystem::path& path);

}  // namespace fdibench::config
