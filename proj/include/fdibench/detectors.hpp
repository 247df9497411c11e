#pragma once

#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fdibench/ekf.hpp"

namespace fdibench::detect {

enum class Decision { Clean, Attacked };

/// Per-step output shared by every detector. Classical detectors never fill
/// in an attack class.
struct DetectorVerdict {
    long k = 0;
    Decision decision = Decision::Clean;
    AttackKind attack_class = AttackKind::None;
    double score = 0.0;

    bool attacked() const { return decision == Decision::Attacked; }
};

using VerdictStream = std::vector<DetectorVerdict>;

enum class DetectorKind { Cusum, Sprt, Bht, LogReg, Transformer };

std::string detector_id(DetectorKind kind);
DetectorKind parse_detector_id(const std::string& id);
bool is_classical(DetectorKind kind);

// ---------------------------------------------------------------- CUSUM

struct CusumConfig {
    double drift = 1.0;       // nu
    double threshold = 10.0;  // h
};

struct CusumState {
    Vec g;  // per-channel statistic, >= 0
    double drift = 1.0;
    double threshold = 10.0;

    static CusumState make(int channels, const CusumConfig& cfg);
};

/// g+ = max(0, g + |r| - nu) per channel; alarm iff max g+ > h, after which
/// every channel restarts from zero.
std::pair<CusumState, DetectorVerdict> cusum_step(const CusumState& state, const Vec& r, long k = 0);

// ---------------------------------------------------------------- SPRT

struct SprtConfig {
    double alpha = 0.05;
    double beta = 0.05;
    double mu1 = 2.0;
    /// Replaces A = ln((1-beta)/alpha) when set (calibrated threshold).
    double upper_override = std::numeric_limits<double>::quiet_NaN();
};

struct SprtState {
    double llr = 0.0;
    double upper = 0.0;  // A
    double lower = 0.0;  // B
    double mu0 = 0.0;
    double mu1 = 2.0;

    static SprtState make(const SprtConfig& cfg);
};

/// Channel-summed Gaussian log-likelihood-ratio increment between N(mu1,1)
/// and N(mu0,1).
double sprt_increment(const SprtState& state, const Vec& r);

/// Lambda+ >= A: attacked, statistic restarts at 0. Lambda+ <= B: accept H0
/// and restart. Otherwise undecided, reported clean.
std::pair<SprtState, DetectorVerdict> sprt_step(const SprtState& state, const Vec& r, long k = 0);

// ---------------------------------------------------------------- BHT

struct BhtConfig {
    int window = 20;
    double prior = 0.5;  // pi_1
    double mu1 = 2.0;
    double threshold = 0.5;  // on the posterior
};

/// log P(H1|w)/P(H0|w) with N(mu1,1) vs N(0,1) likelihoods summed over
/// steps and channels.
double bht_log_odds(const BhtConfig& cfg, std::span<const Vec> window);
double bht_posterior(const BhtConfig& cfg, std::span<const Vec> window);

/// Verdict for a full window (length must equal cfg.window).
DetectorVerdict bht_window(const BhtConfig& cfg, std::span<const Vec> window, long k = 0);

// ---------------------------------------------------------------- logistic baseline

/// Learned stand-in for the SVM/CNN/LSTM rows: logistic regression on
/// [r_k, r_k^2, mean of the last `history` steps of r].
struct LogRegModel {
    int channels = 0;
    int history = 10;
    Vec feature_mean;   // standardization fitted on the training set
    Vec feature_scale;
    Vec weights;  // 3 * channels
    double bias = 0.0;
    double threshold = 0.5;

    int feature_count() const { return 3 * channels; }
    /// Features of the newest entry of `history_window` (oldest first).
    Vec features(std::span<const Vec> history_window) const;
    double probability(std::span<const Vec> history_window) const;
};

struct LogRegTraining {
    int iterations = 300;
    double step = 0.5;
    double l2 = 1e-4;
};

LogRegModel train_logreg(const std::vector<const ekf::ResidueSequence*>& labeled, const LogRegTraining& cfg,
                         int history = 10);

// ---------------------------------------------------------------- streaming

/// Step-at-a-time interface used by the resilient estimation loop.
class StreamDetector {
public:
    virtual ~StreamDetector() = default;
    virtual DetectorVerdict step(long k, const Vec& r) = 0;
    virtual std::string id() const = 0;
};

class CusumStream : public StreamDetector {
public:
    CusumStream(int channels, const CusumConfig& cfg) : state_(CusumState::make(channels, cfg)) {}
    DetectorVerdict step(long k, const Vec& r) override;
    std::string id() const override { return "CUSUM"; }

private:
    CusumState state_;
};

class SprtStream : public StreamDetector {
public:
    explicit SprtStream(const SprtConfig& cfg) : state_(SprtState::make(cfg)) {}
    DetectorVerdict step(long k, const Vec& r) override;
    std::string id() const override { return "SPRT"; }

private:
    SprtState state_;
};

/// Sliding-window BHT: each step evaluates the most recent `window` inputs.
class BhtStream : public StreamDetector {
public:
    explicit BhtStream(const BhtConfig& cfg) : cfg_(cfg) {}
    DetectorVerdict step(long k, const Vec& r) override;
    std::string id() const override { return "BHT"; }

private:
    BhtConfig cfg_;
    std::deque<Vec> buf_;
};

class LogRegStream : public StreamDetector {
public:
    explicit LogRegStream(LogRegModel model) : model_(std::move(model)) {}
    DetectorVerdict step(long k, const Vec& r) override;
    std::string id() const override { return "LogReg"; }

private:
    LogRegModel model_;
    std::deque<Vec> buf_;
};

// ---------------------------------------------------------------- sequences

/// Verdict streams over a residue sequence. Warm-up steps are emitted as
/// clean with score 0 and never touch detector state.
VerdictStream run_cusum(const ekf::ResidueSequence& seq, const CusumConfig& cfg);
VerdictStream run_sprt(const ekf::ResidueSequence& seq, const SprtConfig& cfg);
/// Tumbling windows of length L starting at the first usable step; the
/// window's verdict is assigned to each of its steps. A trailing partial
/// window is scored with the last L steps of the sequence.
VerdictStream run_bht(const ekf::ResidueSequence& seq, const BhtConfig& cfg);
VerdictStream run_logreg(const ekf::ResidueSequence& seq, const LogRegModel& model);

// ---------------------------------------------------------------- calibration

/// Smallest threshold t such that the fraction of `scores` strictly above t
/// is <= target. target >= 1 yields a threshold just below the minimum.
double calibrate_threshold(std::span<const double> scores, double target);

/// Per-step false-alarm rate of verdict streams over their usable steps.
double false_alarm_rate(const std::vector<VerdictStream>& streams, const std::vector<long>& first_usable);

struct Calibration {
    double threshold = 0.0;
    double achieved_rate = 0.0;
};

/// Starts from the order statistic of threshold-free `scores` and walks up
/// the candidate list until re-scoring with `rate_at(threshold)` meets the
/// target. Throws InfeasibleCalibration if no candidate does.
Calibration calibrate_with_rescoring(std::span<const double> scores, double target,
                                     const std::function<double(double)>& rate_at);

inline constexpr long kMinCalibrationSteps = 1000;

Calibration calibrate_cusum(const std::vector<const ekf::ResidueSequence*>& corpus, CusumConfig cfg, double target);
Calibration calibrate_sprt(const std::vector<const ekf::ResidueSequence*>& corpus, SprtConfig cfg, double target);
Calibration calibrate_bht(const std::vector<const ekf::ResidueSequence*>& corpus, BhtConfig cfg, double target);
Calibration calibrate_logreg(const std::vector<const ekf::ResidueSequence*>& corpus, LogRegModel model,
                             double target);

}  // namespace fdibench::detect
