#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fdibench/detectors.hpp"
#include "fdibench/transformer.hpp"

namespace fdibench::eval {

// ---------------------------------------------------------------- metrics

struct MetricsReport {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    std::optional<double> precision;  // TP/(TP+FP), undefined when no alarms
    std::optional<double> recall;     // TP/(TP+FN), undefined when no positives
    std::optional<double> f1;         // 2/(1/P + 1/R); 0 if P or R is 0
    std::optional<double> delay;      // steps from onset to first alarm at or after it
    std::optional<double> false_alarm_rate;  // FP/(FP+TN)
    bool episode_detected = false;

    long total() const { return tp + fp + fn + tn; }
};

/// Fills precision, recall, F1 and false-alarm rate from the counts.
MetricsReport from_counts(long tp, long fp, long fn, long tn);

/// Per-step confusion over steps k >= first. Any attack class counts as
/// positive.
MetricsReport precision_recall_f1(const detect::VerdictStream& verdicts, const std::vector<Label>& labels,
                                  long first = 0);

/// First attacked verdict at k >= k0 minus k0, where k0 is the first
/// attacked label. Throws if the labels contain no attack.
std::optional<long> detection_delay(const detect::VerdictStream& verdicts, const std::vector<Label>& labels,
                                    long first = 0);

/// Episode-level counts: the pre-onset segment is one negative (FP if it
/// holds any alarm), the attacked segment one positive (TP if detected).
MetricsReport episode_metrics(const detect::VerdictStream& verdicts, const std::vector<Label>& labels,
                              long first = 0);

/// Per-step metrics plus delay and episode flag, over k >= first.
MetricsReport evaluate(const detect::VerdictStream& verdicts, const std::vector<Label>& labels, long first);

// ---------------------------------------------------------------- scenario + suite

struct ScenarioSpec {
    ModelId model = ModelId::ModelI;
    NoiseFamily noise = NoiseFamily::Gaussian;
    AttackKind attack = AttackKind::None;
    long steps = 3000;
    std::uint64_t seed = 1;
    long onset = 1500;     // k0
    long attack_end = -1;  // -1 = persistent
    double gps_std = 0.5;
    double camera_std = 0.05;
    double mag_std = 0.02;
    double process_std = 0.01;
    double bias_sigmas = 5.0;  // AttackI bias in units of gps std
    long ramp_steps = 200;     // AttackII reaches bias_sigmas * gps std after this many steps

    sim::Scenario to_scenario() const;
};

struct SuiteConfig {
    detect::CusumConfig cusum;
    detect::SprtConfig sprt;
    detect::BhtConfig bht;
    detect::LogRegTraining logreg;
    int logreg_history = 10;
    transformer::Hyper hyper;  // channels are set from the model
    transformer::TrainConfig train;
    int h_run = 3;
    double target_far = 0.01;
    int calibration_runs = 4;
    int train_clean_runs = 2;
    int train_labeled_runs = 4;  // split evenly over AttackI and AttackII
};

/// Detectors of one (model, noise) group with thresholds calibrated on that
/// group's clean corpus.
struct Suite {
    ModelId model = ModelId::ModelI;
    NoiseFamily noise = NoiseFamily::Gaussian;
    std::vector<detect::DetectorKind> detectors;
    detect::CusumConfig cusum;
    detect::SprtConfig sprt;
    detect::BhtConfig bht;
    detect::LogRegModel logreg;
    std::optional<transformer::ModelParams> tf;
    double tau = 0.0;
    int h_run = 3;
    std::map<detect::DetectorKind, detect::Calibration> calibration;
    std::vector<transformer::EpochLog> train_log;
};

/// Residues of a simulated scenario.
ekf::ResidueSequence simulate_residues(const ScenarioSpec& spec, const ekf::FilterConfig& filter);

/// Clean calibration corpus and labeled/unlabeled training corpus are
/// simulated from sub-seeds of `root_seed`; the transformer and logistic
/// baseline are trained before calibration.
Suite prepare_suite(ModelId model, NoiseFamily noise, const std::vector<detect::DetectorKind>& detectors,
                    const ScenarioSpec& base, const ekf::FilterConfig& filter, const SuiteConfig& cfg,
                    std::uint64_t root_seed);

detect::VerdictStream run_detector(detect::DetectorKind kind, const Suite& suite, const ekf::ResidueSequence& seq);
std::unique_ptr<detect::StreamDetector> make_stream(detect::DetectorKind kind, const Suite& suite, int channels);

/// First step scored by every detector: warm-up plus the transformer's
/// W-1 uncovered prefix.
long evaluation_start(const ekf::FilterConfig& filter, const SuiteConfig& cfg);

// ---------------------------------------------------------------- benchmark

struct CellKey {
    ModelId model;
    NoiseFamily noise;
    AttackKind attack;

    std::string name() const;
};

struct BenchmarkSpec {
    std::vector<ModelId> models{ModelId::ModelI, ModelId::ModelII};
    std::vector<NoiseFamily> noises{NoiseFamily::Exponential, NoiseFamily::Laplacian};
    std::vector<AttackKind> attacks{AttackKind::AttackI, AttackKind::AttackII};
    std::vector<detect::DetectorKind> detectors{detect::DetectorKind::Cusum, detect::DetectorKind::Sprt,
                                                detect::DetectorKind::Bht, detect::DetectorKind::LogReg,
                                                detect::DetectorKind::Transformer};
    int seeds = 5;
    std::uint64_t root_seed = 2024;
    ScenarioSpec scenario;
    ekf::FilterConfig filter;
    SuiteConfig suite;

    void validate() const;
    std::vector<CellKey> cells() const;
};

struct SeedResult {
    std::uint64_t seed = 0;
    MetricsReport step;
    MetricsReport episode;
};

/// Per-step values are means over seeds; undefined seeds are skipped and
/// all-undefined stays undefined. Episode values come from counts pooled
/// over seeds, since a single run holds at most two episodes.
struct Aggregate {
    std::optional<double> precision, recall, f1;
    std::optional<double> episode_precision, episode_recall, episode_f1;
    std::optional<double> delay;
    std::optional<double> false_alarm_rate;
    int detected = 0;
    int seeds = 0;
};

struct CellResult {
    CellKey key;
    std::map<detect::DetectorKind, std::vector<SeedResult>> per_seed;
    std::map<detect::DetectorKind, Aggregate> mean;
    std::string error;  // non-empty if the cell failed

    bool ok() const { return error.empty(); }
};

struct BenchmarkResult {
    std::vector<CellResult> cells;
    std::vector<Suite> suites;
    std::vector<std::string> failures;
    double seconds = 0.0;
};

Aggregate aggregate(const std::vector<SeedResult>& seeds);

/// Groups are prepared first, then cells x seeds run on a pool of `jobs`
/// workers. Results are folded in fixed cell order, so output does not
/// depend on `jobs`.
BenchmarkResult run_benchmark(const BenchmarkSpec& spec, int jobs = 1);

/// One line of a comparison table.
struct TableRow {
    ModelId model;
    detect::DetectorKind detector;
    NoiseFamily noise;
    AttackKind attack;
    std::optional<double> precision, recall, f1;
};

enum class TableFormat { Csv, Text };

std::vector<TableRow> table_rows(const BenchmarkResult& result, bool episode = false);

/// Rows are detectors (classical, then learned, then transformer), columns
/// are noise x attack x {P, R, F1} groups. One block per model.
std::string emit_table(const std::vector<TableRow>& rows, TableFormat format);

/// Round-half-up to two decimals; undefined renders as an em-dash.
std::string format_metric(const std::optional<double>& v);

/// Per-seed raw metrics of one cell as CSV.
std::string cell_csv(const CellResult& cell);

}  // namespace fdibench::eval
