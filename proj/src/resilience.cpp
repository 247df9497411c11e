#include "fdibench/resilience.hpp"

#include <cmath>
#include <sstream>

namespace fdibench::resilience {

int SensorMask::masked_count() const {
    int n = 0;
    for (bool f : fused) n += f ? 0 : 1;
    return n;
}

std::string to_string(Action a) { return a == Action::Mask ? "mask" : "unmask"; }

ResilienceState ResilienceState::make(const sim::DynamicsModel& model, int n_clean) {
    if (n_clean < 1) throw ContractViolation("reactivation threshold N_clean must be >= 1");
    ResilienceState s;
    s.mask = SensorMask::all(model.meas_dim);
    s.n_clean = n_clean;
    auto group = [&](ChannelTag tag, const char* name, bool maskable) {
        Sensor sensor{name, {}, maskable};
        for (int i = 0; i < model.meas_dim; ++i)
            if (model.channels[i] == tag) sensor.channels.push_back(i);
        if (!sensor.channels.empty()) s.sensors.push_back(std::move(sensor));
    };
    group(ChannelTag::GpsPos, "gps", true);
    group(ChannelTag::CameraPos, "camera", false);
    group(ChannelTag::MagHeading, "mag", false);
    return s;
}

bool ResilienceState::any_masked() const { return mask.masked_count() > 0; }

ResilienceState apply_verdict(ResilienceState state, const detect::DetectorVerdict& verdict, long k,
                              const std::string& detector) {
    if (k <= state.last_k) {
        std::ostringstream os;
        os << "verdict for step " << k << " arrived after step " << state.last_k;
        throw ContractViolation(os.str());
    }
    state.last_k = k;
    for (auto& s : state.sensors) {
        if (!s.maskable) continue;
        if (verdict.attacked()) {
            s.clean_count = 0;
            if (s.masked) continue;
            s.masked = true;
            for (int c : s.channels) state.mask.fused[c] = false;
            state.log.push_back({k, Action::Mask, s.name, detector, verdict.score});
        } else if (s.masked && ++s.clean_count >= state.n_clean) {
            s.masked = false;
            s.clean_count = 0;
            for (int c : s.channels) state.mask.fused[c] = true;
            state.log.push_back({k, Action::Unmask, s.name, detector, verdict.score});
        }
    }
    return state;
}

ResilientRun resilient_filter(const sim::RunRecord& run, detect::StreamDetector& detector,
                              const ekf::FilterConfig& filter, const ResilienceConfig& cfg) {
    const auto& model = run.scenario.model;
    ResilientRun out;
    out.run = run;
    out.residues.channels = model.channels;
    out.residues.warmup_steps = filter.warmup_steps;
    out.residues.normalized = filter.normalized;
    out.residues.labels = run.labels;
    if (run.size() == 0) return out;

    ekf::ResidueFilter ekf(model, run.scenario.noise, run.states.front(), filter);
    auto state = ResilienceState::make(model, cfg.n_clean);
    const std::string id = detector.id();
    for (long k = 0; k < run.size(); ++k) {
        out.masked.push_back(state.any_masked());
        auto sample = ekf.update(k, run.measurements[k], state.mask.fused);
        out.estimates.push_back(ekf.state().x);

        detect::DetectorVerdict v;
        v.k = k;
        if (!sample.warmup) {
            v = detector.step(k, filter.normalized ? sample.r_norm : sample.r);
            if (cfg.enabled) state = apply_verdict(std::move(state), v, k, id);
        }
        out.verdicts.push_back(v);
        out.residues.samples.push_back(std::move(sample));
        ekf.predict(run.inputs[k]);
    }
    out.events = state.log;
    return out;
}

ResilientRun resilient_run(const sim::Scenario& scenario, detect::StreamDetector& detector,
                           const ekf::FilterConfig& filter, const ResilienceConfig& cfg) {
    return resilient_filter(sim::simulate_run(scenario), detector, filter, cfg);
}

double position_rmse(const std::vector<Vec>& estimates, const std::vector<Vec>& truth, long begin, long end) {
    if (estimates.size() != truth.size()) throw ContractViolation("estimate and truth lengths differ");
    end = std::min<long>(end, static_cast<long>(truth.size()));
    if (begin < 0 || begin >= end) throw ContractViolation("empty RMSE interval");
    double sum = 0.0;
    for (long k = begin; k < end; ++k) sum += (estimates[k].head<3>() - truth[k].head<3>()).squaredNorm();
    return std::sqrt(sum / static_cast<double>(end - begin));
}

}  // namespace fdibench::resilience
