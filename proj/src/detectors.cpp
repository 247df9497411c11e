#include "fdibench/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fdibench::detect {

std::string detector_id(DetectorKind kind) {
    switch (kind) {
        case DetectorKind::Cusum: return "CUSUM";
        case DetectorKind::Sprt: return "SPRT";
        case DetectorKind::Bht: return "BHT";
        case DetectorKind::LogReg: return "LogReg";
        case DetectorKind::Transformer: return "Transformer";
    }
    return "?";
}

DetectorKind parse_detector_id(const std::string& id) {
    for (auto k : {DetectorKind::Cusum, DetectorKind::Sprt, DetectorKind::Bht, DetectorKind::LogReg,
                   DetectorKind::Transformer})
        if (detector_id(k) == id) return k;
    throw ConfigError("unknown detector '" + id + "'");
}

bool is_classical(DetectorKind kind) {
    return kind == DetectorKind::Cusum || kind == DetectorKind::Sprt || kind == DetectorKind::Bht;
}

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Clean verdicts for the warm-up prefix.
VerdictStream warmup_prefix(const ekf::ResidueSequence& seq) {
    VerdictStream out;
    out.reserve(seq.size());
    for (long k = 0; k < seq.first_usable(); ++k) out.push_back({k, Decision::Clean, AttackKind::None, 0.0});
    return out;
}

long total_usable(const std::vector<const ekf::ResidueSequence*>& corpus) {
    long n = 0;
    for (const auto* s : corpus) n += s->size() - s->first_usable();
    return n;
}

void require_corpus(const std::vector<const ekf::ResidueSequence*>& corpus) {
    const long n = total_usable(corpus);
    if (n < kMinCalibrationSteps) {
        std::ostringstream os;
        os << "calibration corpus has " << n << " usable steps, need at least " << kMinCalibrationSteps;
        throw ContractViolation(os.str());
    }
}

template <typename Runner>
std::vector<double> collect_scores(const std::vector<const ekf::ResidueSequence*>& corpus, Runner run) {
    std::vector<double> scores;
    for (const auto* s : corpus) {
        const auto v = run(*s);
        for (long k = s->first_usable(); k < s->size(); ++k) scores.push_back(v[k].score);
    }
    return scores;
}

template <typename Runner>
double rescored_rate(const std::vector<const ekf::ResidueSequence*>& corpus, Runner run) {
    std::vector<VerdictStream> streams;
    std::vector<long> first;
    for (const auto* s : corpus) {
        streams.push_back(run(*s));
        first.push_back(s->first_usable());
    }
    return false_alarm_rate(streams, first);
}

}  // namespace

// ---------------------------------------------------------------- CUSUM

CusumState CusumState::make(int channels, const CusumConfig& cfg) {
    if (!(cfg.threshold > 0.0)) throw ContractViolation("CUSUM threshold must be positive");
    if (!(cfg.drift >= 0.0)) throw ContractViolation("CUSUM drift must be >= 0");
    return {Vec::Zero(channels), cfg.drift, cfg.threshold};
}

std::pair<CusumState, DetectorVerdict> cusum_step(const CusumState& state, const Vec& r, long k) {
    if (r.size() != state.g.size()) throw ContractViolation("CUSUM input length does not match channel count");
    CusumState next = state;
    next.g = (state.g.array() + r.array().abs() - state.drift).max(0.0).matrix();
    DetectorVerdict v;
    v.k = k;
    v.score = next.g.size() ? next.g.maxCoeff() : 0.0;
    if (v.score > state.threshold) {
        v.decision = Decision::Attacked;
        next.g.setZero();
    }
    return {next, v};
}

// ---------------------------------------------------------------- SPRT

SprtState SprtState::make(const SprtConfig& cfg) {
    if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0 && cfg.beta > 0.0 && cfg.beta < 1.0))
        throw ContractViolation("SPRT error rates must lie in (0,1)");
    SprtState s;
    s.mu1 = cfg.mu1;
    if (s.mu1 == s.mu0) throw ContractViolation("SPRT requires mu1 != mu0");
    s.upper = std::isnan(cfg.upper_override) ? std::log((1.0 - cfg.beta) / cfg.alpha) : cfg.upper_override;
    s.lower = std::log(cfg.beta / (1.0 - cfg.alpha));
    return s;
}

double sprt_increment(const SprtState& s, const Vec& r) {
    // ln N(r; mu1, 1) - ln N(r; mu0, 1), summed over channels
    const double d = s.mu1 - s.mu0;
    return d * r.sum() - 0.5 * static_cast<double>(r.size()) * (s.mu1 * s.mu1 - s.mu0 * s.mu0);
}

std::pair<SprtState, DetectorVerdict> sprt_step(const SprtState& state, const Vec& r, long k) {
    SprtState next = state;
    next.llr = state.llr + sprt_increment(state, r);
    DetectorVerdict v;
    v.k = k;
    v.score = next.llr;
    if (next.llr >= state.upper) {
        v.decision = Decision::Attacked;
        next.llr = 0.0;
    } else if (next.llr <= state.lower) {
        next.llr = 0.0;
    }
    return {next, v};
}

// ---------------------------------------------------------------- BHT

double bht_log_odds(const BhtConfig& cfg, std::span<const Vec> window) {
    if (!(cfg.prior > 0.0 && cfg.prior < 1.0)) throw ContractViolation("BHT prior must lie in (0,1)");
    double lo = std::log(cfg.prior / (1.0 - cfg.prior));
    for (const auto& r : window) lo += cfg.mu1 * r.sum() - 0.5 * cfg.mu1 * cfg.mu1 * static_cast<double>(r.size());
    return lo;
}

double bht_posterior(const BhtConfig& cfg, std::span<const Vec> window) { return sigmoid(bht_log_odds(cfg, window)); }

DetectorVerdict bht_window(const BhtConfig& cfg, std::span<const Vec> window, long k) {
    if (cfg.window < 1) throw ContractViolation("BHT window length must be >= 1");
    if (static_cast<long>(window.size()) != cfg.window) {
        std::ostringstream os;
        os << "BHT window has " << window.size() << " samples, expected " << cfg.window;
        throw ContractViolation(os.str());
    }
    DetectorVerdict v;
    v.k = k;
    v.score = bht_posterior(cfg, window);
    if (v.score > cfg.threshold) v.decision = Decision::Attacked;
    return v;
}

// ---------------------------------------------------------------- logistic baseline

Vec LogRegModel::features(std::span<const Vec> hist) const {
    if (hist.empty()) throw ContractViolation("logistic features need at least one sample");
    const Vec& r = hist.back();
    Vec f(feature_count());
    f.segment(0, channels) = r;
    f.segment(channels, channels) = r.array().square().matrix();
    Vec mean = Vec::Zero(channels);
    for (const auto& h : hist) mean += h;
    f.segment(2 * channels, channels) = mean / static_cast<double>(hist.size());
    return f;
}

double LogRegModel::probability(std::span<const Vec> hist) const {
    const Vec z = (features(hist) - feature_mean).cwiseQuotient(feature_scale);
    return sigmoid(weights.dot(z) + bias);
}

LogRegModel train_logreg(const std::vector<const ekf::ResidueSequence*>& labeled, const LogRegTraining& cfg,
                         int history) {
    if (labeled.empty()) throw ContractViolation("logistic baseline needs at least one labeled sequence");
    LogRegModel model;
    model.channels = labeled.front()->channel_count();
    model.history = history;

    std::vector<Vec> feats;
    std::vector<double> target;
    for (const auto* seq : labeled) {
        std::vector<Vec> buf;
        for (long k = seq->first_usable(); k < seq->size(); ++k) {
            buf.push_back(seq->input(k));
            if (static_cast<int>(buf.size()) > history) buf.erase(buf.begin());
            feats.push_back(model.features(buf));
            target.push_back(seq->labels[k] == Label::Clean ? 0.0 : 1.0);
        }
    }
    const int nf = model.feature_count();
    const auto n = static_cast<double>(feats.size());
    model.feature_mean = Vec::Zero(nf);
    for (const auto& f : feats) model.feature_mean += f;
    model.feature_mean /= n;
    Vec var = Vec::Zero(nf);
    for (const auto& f : feats) var += (f - model.feature_mean).array().square().matrix();
    model.feature_scale = (var / n).cwiseSqrt().unaryExpr([](double s) { return s > 1e-12 ? s : 1.0; });
    for (auto& f : feats) f = (f - model.feature_mean).cwiseQuotient(model.feature_scale);

    model.weights = Vec::Zero(nf);
    model.bias = 0.0;
    for (int it = 0; it < cfg.iterations; ++it) {
        Vec gw = cfg.l2 * model.weights;
        double gb = 0.0;
        for (std::size_t i = 0; i < feats.size(); ++i) {
            const double err = sigmoid(model.weights.dot(feats[i]) + model.bias) - target[i];
            gw += (err / n) * feats[i];
            gb += err / n;
        }
        model.weights -= cfg.step * gw;
        model.bias -= cfg.step * gb;
    }
    return model;
}

// ---------------------------------------------------------------- streaming

DetectorVerdict CusumStream::step(long k, const Vec& r) {
    auto [next, v] = cusum_step(state_, r, k);
    state_ = std::move(next);
    return v;
}

DetectorVerdict SprtStream::step(long k, const Vec& r) {
    auto [next, v] = sprt_step(state_, r, k);
    state_ = next;
    return v;
}

DetectorVerdict BhtStream::step(long k, const Vec& r) {
    buf_.push_back(r);
    if (static_cast<int>(buf_.size()) > cfg_.window) buf_.pop_front();
    if (static_cast<int>(buf_.size()) < cfg_.window) return {k, Decision::Clean, AttackKind::None, 0.0};
    const std::vector<Vec> window(buf_.begin(), buf_.end());
    return bht_window(cfg_, window, k);
}

DetectorVerdict LogRegStream::step(long k, const Vec& r) {
    buf_.push_back(r);
    if (static_cast<int>(buf_.size()) > model_.history) buf_.pop_front();
    const std::vector<Vec> hist(buf_.begin(), buf_.end());
    DetectorVerdict v{k, Decision::Clean, AttackKind::None, model_.probability(hist)};
    if (v.score > model_.threshold) v.decision = Decision::Attacked;
    return v;
}

// ---------------------------------------------------------------- sequences

VerdictStream run_cusum(const ekf::ResidueSequence& seq, const CusumConfig& cfg) {
    VerdictStream out = warmup_prefix(seq);
    CusumStream det(seq.channel_count(), cfg);
    for (long k = seq.first_usable(); k < seq.size(); ++k) out.push_back(det.step(k, seq.input(k)));
    return out;
}

VerdictStream run_sprt(const ekf::ResidueSequence& seq, const SprtConfig& cfg) {
    VerdictStream out = warmup_prefix(seq);
    SprtStream det(cfg);
    for (long k = seq.first_usable(); k < seq.size(); ++k) out.push_back(det.step(k, seq.input(k)));
    return out;
}

VerdictStream run_bht(const ekf::ResidueSequence& seq, const BhtConfig& cfg) {
    if (cfg.window < 1) throw ContractViolation("BHT window length must be >= 1");
    VerdictStream out = warmup_prefix(seq);
    const long first = seq.first_usable();
    const long L = cfg.window;
    if (seq.size() - first < L) {
        for (long k = first; k < seq.size(); ++k) out.push_back({k, Decision::Clean, AttackKind::None, 0.0});
        return out;
    }
    std::vector<Vec> window(L);
    for (long start = first; start < seq.size(); start += L) {
        const long begin = std::min(start, seq.size() - L);
        for (long i = 0; i < L; ++i) window[i] = seq.input(begin + i);
        const DetectorVerdict v = bht_window(cfg, window, begin);
        for (long k = start; k < std::min(start + L, seq.size()); ++k) {
            DetectorVerdict vk = v;
            vk.k = k;
            out.push_back(vk);
        }
    }
    return out;
}

VerdictStream run_logreg(const ekf::ResidueSequence& seq, const LogRegModel& model) {
    VerdictStream out = warmup_prefix(seq);
    LogRegStream det(model);
    for (long k = seq.first_usable(); k < seq.size(); ++k) out.push_back(det.step(k, seq.input(k)));
    return out;
}

// ---------------------------------------------------------------- calibration

double calibrate_threshold(std::span<const double> scores, double target) {
    if (scores.empty()) throw ContractViolation("cannot calibrate on an empty score set");
    if (!(target >= 0.0)) throw ContractViolation("target false-alarm rate must be >= 0");
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    const auto allowed = static_cast<std::size_t>(std::floor(target * static_cast<double>(n) + 1e-9));
    if (allowed >= n) return std::nextafter(sorted.front(), -std::numeric_limits<double>::infinity());
    return sorted[n - 1 - allowed];
}

double false_alarm_rate(const std::vector<VerdictStream>& streams, const std::vector<long>& first_usable) {
    long alarms = 0, total = 0;
    for (std::size_t i = 0; i < streams.size(); ++i) {
        const long first = i < first_usable.size() ? first_usable[i] : 0;
        for (long k = first; k < static_cast<long>(streams[i].size()); ++k) {
            ++total;
            if (streams[i][k].attacked()) ++alarms;
        }
    }
    return total ? static_cast<double>(alarms) / static_cast<double>(total) : 0.0;
}

Calibration calibrate_with_rescoring(std::span<const double> scores, double target,
                                     const std::function<double(double)>& rate_at) {
    const double start = calibrate_threshold(scores, target);
    std::vector<double> candidates{start};
    for (double s : scores)
        if (s > start) candidates.push_back(s);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    double achieved = 1.0;
    for (double t : candidates) {
        achieved = rate_at(t);
        if (achieved <= target) return {t, achieved};
    }
    std::ostringstream os;
    os << "no threshold reaches false-alarm rate " << target << " (best achieved " << achieved << ")";
    throw InfeasibleCalibration(os.str(), achieved);
}

Calibration calibrate_cusum(const std::vector<const ekf::ResidueSequence*>& corpus, CusumConfig cfg, double target) {
    require_corpus(corpus);
    CusumConfig free_cfg = cfg;
    free_cfg.threshold = std::numeric_limits<double>::infinity();
    const auto scores = collect_scores(corpus, [&](const auto& s) { return run_cusum(s, free_cfg); });
    return calibrate_with_rescoring(scores, target, [&](double t) {
        CusumConfig c = cfg;
        // a threshold of exactly 0 is rejected by CusumState; the smallest
        // positive value alarms on the same steps
        c.threshold = std::max(t, std::numeric_limits<double>::denorm_min());
        return rescored_rate(corpus, [&](const auto& s) { return run_cusum(s, c); });
    });
}

Calibration calibrate_sprt(const std::vector<const ekf::ResidueSequence*>& corpus, SprtConfig cfg, double target) {
    require_corpus(corpus);
    SprtConfig free_cfg = cfg;
    free_cfg.upper_override = std::numeric_limits<double>::infinity();
    const auto scores = collect_scores(corpus, [&](const auto& s) { return run_sprt(s, free_cfg); });
    // SPRT alarms on Lambda >= A, the others on score > t.
    auto cal = calibrate_with_rescoring(scores, target, [&](double t) {
        SprtConfig c = cfg;
        c.upper_override = std::nextafter(t, std::numeric_limits<double>::infinity());
        return rescored_rate(corpus, [&](const auto& s) { return run_sprt(s, c); });
    });
    cal.threshold = std::nextafter(cal.threshold, std::numeric_limits<double>::infinity());
    return cal;
}

Calibration calibrate_bht(const std::vector<const ekf::ResidueSequence*>& corpus, BhtConfig cfg, double target) {
    require_corpus(corpus);
    const auto scores = collect_scores(corpus, [&](const auto& s) { return run_bht(s, cfg); });
    return calibrate_with_rescoring(scores, target, [&](double t) {
        BhtConfig c = cfg;
        c.threshold = t;
        return rescored_rate(corpus, [&](const auto& s) { return run_bht(s, c); });
    });
}

Calibration calibrate_logreg(const std::vector<const ekf::ResidueSequence*>& corpus, LogRegModel model,
                             double target) {
    require_corpus(corpus);
    const auto scores = collect_scores(corpus, [&](const auto& s) { return run_logreg(s, model); });
    return calibrate_with_rescoring(scores, target, [&](double t) {
        LogRegModel m = model;
        m.threshold = t;
        return rescored_rate(corpus, [&](const auto& s) { return run_logreg(s, m); });
    });
}

}  // namespace fdibench::detect
