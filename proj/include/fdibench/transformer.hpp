#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fdibench/detectors.hpp"
#include "fdibench/ekf.hpp"

namespace fdibench::transformer {

inline constexpr int kClasses = 3;  // clean, AttackI, AttackII

struct Hyper {
    int window = 32;    // W
    int channels = 6;   // m
    int d_model = 32;   // d
    int heads = 2;      // h
    int layers = 2;
    int d_ff = 64;
    std::uint64_t seed = 7;

    void validate() const;
};

struct LayerParams {
    Mat Wq, Wk, Wv, Wo;  // d x d
    Vec bq, bk, bv, bo;
    Vec sigma_raw;  // per position; sigma = softplus(sigma_raw)
    Mat W1;         // d_ff x d
    Vec b1;
    Mat W2;  // d x d_ff
    Vec b2;
    Vec ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

/// Named view of one parameter block (column-major storage).
struct ParamBlock {
    std::string name;
    double* data;
    Eigen::Index size;
    bool prior_branch;  // sigma blocks: only feed the prior association
};

struct ModelParams {
    Hyper hyper;
    Mat embed;  // d x m
    Vec embed_bias;
    Mat positional;  // W x d, fixed sinusoidal, not trained
    std::vector<LayerParams> layers;
    Vec final_gain, final_bias;
    Mat recon;  // m x d
    Vec recon_bias;
    Mat cls;  // 3 x d
    Vec cls_bias;

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) projections, unit LayerNorm
    /// gains, sigma = W/4.
    static ModelParams init(const Hyper& hyper);
    /// Same shapes, every trainable entry zero.
    ModelParams zeros_like() const;

    /// Trainable blocks in checkpoint order: embed, embed_bias, then per
    /// layer Wq bq Wk bk Wv bv Wo bo sigma_raw W1 b1 W2 b2 ln1_gain ln1_bias
    /// ln2_gain ln2_bias, then final_gain final_bias recon recon_bias cls
    /// cls_bias.
    std::vector<ParamBlock> blocks();
    std::vector<ParamBlock> blocks() const;
    std::size_t parameter_count() const;
    Vec flatten() const;
    void assign(const Vec& flat);
};

Mat sinusoidal_encoding(int window, int d_model);
Vec sigma_of(const LayerParams& layer);

struct Window {
    Mat x;  // W x m
    bool labeled = false;
    Label cls = Label::Clean;
};

struct WindowBatch {
    std::vector<Window> windows;
};

/// Window class from its per-step labels: the attack class if any step is
/// attacked, else clean.
Label window_class(const std::vector<Label>& labels, long begin, long length);

/// Stride-`stride` windows over the usable part of a residue sequence.
std::vector<Window> make_windows(const ekf::ResidueSequence& seq, int window, int stride, bool labeled);

struct AttentionOutput {
    std::vector<std::vector<Mat>> series;  // [layer][head], W x W row-stochastic
    std::vector<Mat> prior;                // [layer], W x W row-stochastic
    Vec discrepancy;                       // W, averaged over heads and layers
};

struct WindowOutput {
    Mat reconstruction;  // W x m
    Vec scores;          // W, reconstruction error weighted by softmax(-discrepancy)
    Vec logits;          // 3
    AttentionOutput attention;
};

/// Linear projection plus positional encoding.
Mat embed_window(const ModelParams& params, const Mat& window);

/// Symmetrized KL, 0.5 * (KL(p||q) + KL(q||p)), from log-probabilities.
double symmetric_kl(const Vec& log_p, const Vec& log_q);

/// One anomaly-attention block applied to an encoded window (W x d).
/// Returns the block's output (after both residual + LayerNorm stages) and
/// fills `attention` with this layer's associations; `attention.discrepancy`
/// receives this layer's head-averaged discrepancy.
Mat anomaly_attention(const ModelParams& params, int layer, const Mat& encoded, AttentionOutput& attention);

std::vector<WindowOutput> forward(const ModelParams& params, const WindowBatch& batch);

struct LossWeights {
    double rec = 1.0;
    double disc = 0.1;
    double cls = 1.0;
    /// When false, windows labeled AttackI/AttackII are left out of the
    /// reconstruction term so the model only learns to reconstruct clean
    /// residues. They still enter the discrepancy and class terms.
    bool rec_on_attacked = false;
};

struct LossBreakdown {
    double rec = 0.0;   // mean squared error over reconstructed windows
    double disc = 0.0;  // mean association discrepancy
    double cls = 0.0;   // mean cross-entropy over labeled windows (0 if none)
    double total = 0.0; // rec*w.rec + disc*w.disc + cls*w.cls
};

LossBreakdown loss(const ModelParams& params, const WindowBatch& batch, const LossWeights& weights);

struct Gradient {
    ModelParams grad;
    LossBreakdown loss;
};

/// Reverse-mode gradient. The discrepancy term is minimax: parameters of the
/// series branch descend on +w.disc * disc with the prior held fixed, while
/// the prior scales (sigma_raw) receive the gradient of -w.disc * disc with
/// the series held fixed. Reconstruction and classification terms do not
/// depend on sigma.
Gradient grad(const ModelParams& params, const WindowBatch& batch, const LossWeights& weights);

struct TrainConfig {
    int epochs = 10;
    int batch_size = 16;
    int stride = 8;
    double step = 1e-3;
    double clip_norm = 5.0;
    LossWeights weights;
    std::uint64_t seed = 11;
};

struct EpochLog {
    int epoch = 0;
    LossBreakdown loss;
};

struct TrainingSequence {
    const ekf::ResidueSequence* sequence = nullptr;
    bool labeled = false;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochLog> log;
};

class TrainingDiverged : public NumericalFailure {
public:
    TrainingDiverged(const std::string& what, ModelParams last_finite)
        : NumericalFailure(what), last_finite_(std::move(last_finite)) {}
    const ModelParams& last_finite() const { return last_finite_; }

private:
    ModelParams last_finite_;
};

/// Mini-batch gradient descent with global-norm clipping. Requires at least
/// one labeled and one unlabeled sequence unless `allow_unbalanced`.
TrainResult train(const Hyper& hyper, const TrainConfig& cfg, const std::vector<TrainingSequence>& data,
                  bool allow_unbalanced = false);

/// Same loop starting from given parameters over prepared windows.
TrainResult train_windows(ModelParams params, const TrainConfig& cfg, const std::vector<Window>& windows);

/// Loss over a window set evaluated in batches of `batch_size`.
LossBreakdown evaluate_loss(const ModelParams& params, const std::vector<Window>& windows, const LossWeights& weights,
                            int batch_size = 16);

struct OnsetReport {
    std::optional<long> onset;
    AttackKind attack_class = AttackKind::None;
};

struct ScoreResult {
    detect::VerdictStream verdicts;
    std::vector<double> step_scores;  // 0 for warm-up steps
    OnsetReport onset;
};

/// Threshold + run-length rule: a step is attacked iff it belongs to a run of
/// at least `h_run` consecutive steps with score > tau (from `first` on).
std::vector<bool> run_length_decision(const std::vector<double>& scores, double tau, int h_run, long first = 0);

/// Per-step anomaly scores: mean of the step's per-position scores across all
/// stride-1 windows covering it. Also returns the class logits averaged the
/// same way.
void step_scores(const ModelParams& params, const ekf::ResidueSequence& seq, std::vector<double>& scores,
                 std::vector<Vec>& class_logits);

ScoreResult score_stream(const ModelParams& params, const ekf::ResidueSequence& seq, double tau, int h_run);

/// Causal variant for the resilient loop: each step scores the window that
/// ends at it and uses the score of its last position.
class TransformerStream : public detect::StreamDetector {
public:
    TransformerStream(const ModelParams& params, double tau, int h_run);
    detect::DetectorVerdict step(long k, const Vec& r) override;
    std::string id() const override { return "Transformer"; }

private:
    const ModelParams* params_;
    double tau_;
    int h_run_;
    std::vector<Vec> buf_;
    int above_ = 0;
};

/// Smallest tau whose per-step false-alarm rate under the run-length rule is
/// <= target on the clean corpus (exact re-scoring).
detect::Calibration calibrate_tau(const ModelParams& params, const std::vector<const ekf::ResidueSequence*>& corpus,
                                  int h_run, double target);

}  // namespace fdibench::transformer
