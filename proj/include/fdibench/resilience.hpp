#pragma once

#include <string>
#include <vector>

#include "fdibench/detectors.hpp"
#include "fdibench/ekf.hpp"

namespace fdibench::resilience {

/// Per-channel fusion flag (true = fused).
struct SensorMask {
    std::vector<bool> fused;

    static SensorMask all(int channels) { return {std::vector<bool>(channels, true)}; }
    int masked_count() const;
};

enum class Action { Mask, Unmask };
std::string to_string(Action a);

struct Event {
    long k = 0;
    Action action = Action::Mask;
    std::string sensor;
    std::string detector;
    double score = 0.0;
};

/// A physical sensor: a named group of measurement channels that is masked
/// and reactivated as a unit.
struct Sensor {
    std::string name;
    std::vector<int> channels;
    bool maskable = false;
    bool masked = false;
    int clean_count = 0;
};

struct ResilienceState {
    SensorMask mask;
    std::vector<Sensor> sensors;
    int n_clean = 100;
    std::vector<Event> log;
    long last_k = -1;

    /// gps is the only maskable sensor; camera and magnetometer always fuse.
    static ResilienceState make(const sim::DynamicsModel& model, int n_clean = 100);
    bool any_masked() const;
};

/// Attacked verdict: every maskable sensor is masked (no-op if already) and
/// its clean counter reset. Clean verdict: each masked sensor's counter
/// increments; reaching n_clean unmasks it. Steps must strictly increase.
ResilienceState apply_verdict(ResilienceState state, const detect::DetectorVerdict& verdict, long k,
                              const std::string& detector = "");

struct ResilienceConfig {
    bool enabled = true;
    int n_clean = 100;
};

struct ResilientRun {
    sim::RunRecord run;
    ekf::ResidueSequence residues;  // shadow residues: all channels every step
    std::vector<Vec> estimates;     // posterior state after each update
    std::vector<bool> masked;       // any sensor masked during step k's update
    std::vector<Event> events;
    detect::VerdictStream verdicts;
};

/// Closed loop per step k: update with the current mask, detector step on
/// the shadow residue (skipped during warm-up), apply_verdict, predict. The
/// controller tracks waypoints on the true state, so the plant trajectory is
/// identical with resilience on or off.
ResilientRun resilient_run(const sim::Scenario& scenario, detect::StreamDetector& detector,
                           const ekf::FilterConfig& filter, const ResilienceConfig& cfg);

/// Same loop over an already simulated run.
ResilientRun resilient_filter(const sim::RunRecord& run, detect::StreamDetector& detector,
                              const ekf::FilterConfig& filter, const ResilienceConfig& cfg);

/// Root-mean-square position error of the estimates over [begin, end).
double position_rmse(const std::vector<Vec>& estimates, const std::vector<Vec>& truth, long begin, long end);

}  // namespace fdibench::resilience
