#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fdibench/sim.hpp"

namespace fdibench::ekf {

struct EkfState {
    Vec x;
    Mat P;
};

/// One innovation sample. `r` and `S` always span every measurement channel,
/// including channels excluded from the state update.
struct ResidueSample {
    long k = 0;
    Vec r;       // y - g(x_prior)
    Mat S;       // H P_prior H^T + R
    Vec r_norm;  // S^{-1/2} r
    bool warmup = false;
};

struct FilterConfig {
    Vec init_offset;  // empty means zero
    double initial_covariance = 1.0;
    int warmup_steps = 20;
    bool normalized = true;  // detectors consume r_norm (true) or raw r (false)
};

/// Residues of one run, aligned step-for-step with its labels.
struct ResidueSequence {
    std::vector<ResidueSample> samples;
    std::vector<Label> labels;
    std::vector<ChannelTag> channels;
    int warmup_steps = 0;
    bool normalized = true;
    std::string source_digest;

    long size() const { return static_cast<long>(samples.size()); }
    int channel_count() const { return static_cast<int>(channels.size()); }
    /// Detector input at step k (normalized or raw per `normalized`).
    const Vec& input(long k) const { return normalized ? samples[k].r_norm : samples[k].r; }
    /// First step index available to detectors.
    long first_usable() const { return std::min<long>(warmup_steps, size()); }
};

/// Symmetric inverse square root S^{-1/2} via eigendecomposition with the
/// eigenvalues floored at 1e-12.
Mat inverse_sqrt(const Mat& S);

/// Generic linearized propagation: x = x_pred, P = F P F^T + Q (symmetrized).
EkfState propagate(const EkfState& est, const Vec& x_pred, const Mat& F, const Mat& Q);

struct UpdateResult {
    EkfState posterior;
    ResidueSample residue;
};

/// Generic Kalman correction restricted to `active` channels (Joseph form).
/// The returned residue covers all channels. `channel_names` is only used to
/// name the block in a numerical-failure message.
UpdateResult correct(const EkfState& prior, const Vec& innovation, const Mat& H, const Mat& R,
                     const std::vector<bool>& active, const std::vector<std::string>& channel_names = {});

EkfState ekf_predict(const sim::DynamicsModel& model, const EkfState& est, const Vec& u, const Mat& Q);

std::pair<EkfState, ResidueSample> ekf_update(const sim::DynamicsModel& model, const EkfState& est, const Vec& y,
                                              const Mat& R, const std::vector<bool>& active_mask);

/// Streaming filter over a fixed model: alternate `update` (step k) and
/// `predict` (with u_k). Used by generate_residues and the resilient loop.
class ResidueFilter {
public:
    ResidueFilter(sim::DynamicsModel model, const sim::NoiseModel& noise, const Vec& x0, const FilterConfig& cfg);

    ResidueSample update(long k, const Vec& y, const std::vector<bool>& active_mask);
    void predict(const Vec& u);

    const EkfState& state() const { return est_; }
    const sim::DynamicsModel& model() const { return model_; }

private:
    sim::DynamicsModel model_;
    Mat Q_;
    Mat R_;
    FilterConfig cfg_;
    EkfState est_;
};

/// Runs the filter over a whole run with every channel fused.
ResidueSequence generate_residues(const sim::RunRecord& run, const FilterConfig& cfg);

}  // namespace fdibench::ekf
