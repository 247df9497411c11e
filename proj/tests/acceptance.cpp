// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Pass criterion numbers as arguments to
// run a subset, e.g. `acceptance 1 7`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fdibench/config.hpp"
#include "fdibench/io.hpp"

using namespace fdibench;

namespace {

// ---------------------------------------------------------------- tolerances

constexpr double kF1Tol = 1e-12;
constexpr double kKalmanRelTol = 1e-9;
constexpr double kKalmanSeconds = 1.0;
constexpr long kResidueSteps = 10000;
constexpr double kCovFrobeniusTol = 0.1;
constexpr double kLag1Tol = 0.05;
constexpr int kJacobianStates = 100;
constexpr double kJacobianRelTol = 1e-6;
constexpr int kGradConfigs = 10;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradSeconds = 30.0;
constexpr double kRowSumTol = 1e-6;
constexpr double kKlExampleTol = 1e-4;
constexpr double kBhtTol = 1e-9;
constexpr double kFreshFarFactor = 2.0;
constexpr double kMinTransformerF1 = 0.85;
constexpr int kMinCellsWon = 6;
constexpr double kBenchmarkSeconds = 600.0;
constexpr int kResilienceSeeds = 20;
constexpr double kRmseRatio = 0.3;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

int jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------- shared benchmark

const config::Config& defaults() {
    static const config::Config c;
    return c;
}

const eval::BenchmarkResult& benchmark() {
    static std::optional<eval::BenchmarkResult> result;
    if (!result) result = eval::run_benchmark(defaults().benchmark_spec(), jobs());
    return *result;
}

// ---------------------------------------------------------------- 1

Outcome c1_f1() {
    struct Counts {
        long tp, fp, fn;
    };
    double worst = 0.0;
    for (const auto& c : {Counts{8, 2, 1}, Counts{93, 7, 8}, Counts{1, 0, 0}, Counts{250, 31, 17}, Counts{3, 9, 5}}) {
        const auto r = eval::from_counts(c.tp, c.fp, c.fn, 0);
        const double p = double(c.tp) / double(c.tp + c.fp);
        const double rc = double(c.tp) / double(c.tp + c.fn);
        worst = std::max(worst, std::abs(*r.f1 - 2.0 * p * rc / (p + rc)));
    }
    // Reported values are rounded to two decimals: look for counts whose
    // rounded P and R are 0.92 and 0.93 and whose F1 rounds to 0.93.
    std::optional<std::string> witness;
    for (long tp = 1; tp <= 400 && !witness; ++tp)
        for (long fp = 0; fp <= tp && !witness; ++fp)
            for (long fn = 0; fn <= tp && !witness; ++fn) {
                const auto r = eval::from_counts(tp, fp, fn, 0);
                if (eval::format_metric(r.precision) == "0.92" && eval::format_metric(r.recall) == "0.93" &&
                    eval::format_metric(r.f1) == "0.93")
                    witness = "tp=" + std::to_string(tp) + " fp=" + std::to_string(fp) + " fn=" + std::to_string(fn);
            }
    Outcome o;
    o.pass = worst < kF1Tol && witness.has_value();
    o.detail = "max |F1 - 2PR/(P+R)| = " + fmt("%.3g", worst) + "; P=0.92 R=0.93 F1=0.93 consistent via " +
               witness.value_or("none");
    return o;
}

// ---------------------------------------------------------------- 2

Outcome c2_kalman() {
    const auto t0 = Clock::now();
    const double a = 0.95, c = 0.8, q = 0.09, r = 0.4;
    Rng rng(2);
    double x_true = 0.5, x_ref = 0.0, p_ref = 4.0;
    ekf::EkfState est{Vec::Zero(1), Mat::Constant(1, 1, 4.0)};
    const Mat A = Mat::Constant(1, 1, a), C = Mat::Constant(1, 1, c);
    const Mat Q = Mat::Constant(1, 1, q), R = Mat::Constant(1, 1, r);
    double worst = 0.0;
    auto rel = [](double u, double v) { return std::abs(u - v) / std::abs(v); };
    for (int k = 0; k < 1000; ++k) {
        const double y = c * x_true + std::sqrt(r) * rng.normal();
        const double s_ref = c * c * p_ref + r;
        const double g_ref = p_ref * c / s_ref;
        const double innov = y - c * x_ref;
        const double x_post = x_ref + g_ref * innov;
        const double p_post = (1.0 - g_ref * c) * p_ref;

        const auto upd = ekf::correct(est, Vec::Constant(1, y) - C * est.x, C, R, {true});
        const double gain = (upd.posterior.x[0] - est.x[0]) / upd.residue.r[0];
        worst = std::max({worst, rel(upd.residue.r[0], innov), rel(upd.residue.S(0, 0), s_ref), rel(gain, g_ref),
                          rel(upd.posterior.P(0, 0), p_post), rel(upd.posterior.x[0], x_post)});

        x_ref = a * x_post;
        p_ref = a * a * p_post + q;
        est = ekf::propagate(upd.posterior, A * upd.posterior.x, A, Q);
        x_true = a * x_true + std::sqrt(q) * rng.normal();
    }
    const double secs = seconds_since(t0);
    return {worst < kKalmanRelTol && secs < kKalmanSeconds,
            "max rel error " + fmt("%.3g", worst) + " over 1000 steps in " + fmt("%.4f", secs) + " s"};
}

// ---------------------------------------------------------------- 3

Outcome c3_residues() {
    eval::ScenarioSpec s = defaults().scenario;
    s.model = ModelId::ModelI;
    s.noise = NoiseFamily::Gaussian;
    s.attack = AttackKind::None;
    s.steps = kResidueSteps;
    const auto seq = eval::simulate_residues(s, defaults().filter);
    const int m = seq.channel_count();
    const long first = seq.first_usable();
    const long n = seq.size() - first;
    Vec mean = Vec::Zero(m);
    for (long k = first; k < seq.size(); ++k) mean += seq.input(k);
    mean /= double(n);
    Mat C = Mat::Zero(m, m);
    for (long k = first; k < seq.size(); ++k) {
        const Vec d = seq.input(k) - mean;
        C += d * d.transpose();
    }
    C /= double(n - 1);
    const double frob = (C - Mat::Identity(m, m)).norm();
    double worst_rho = 0.0;
    for (int i = 0; i < m; ++i) {
        double num = 0.0, den = 0.0;
        for (long k = first; k < seq.size(); ++k) {
            const double d = seq.input(k)[i] - mean[i];
            den += d * d;
            if (k + 1 < seq.size()) num += d * (seq.input(k + 1)[i] - mean[i]);
        }
        worst_rho = std::max(worst_rho, std::abs(num / den));
    }
    return {frob < kCovFrobeniusTol && worst_rho < kLag1Tol,
            "||cov - I||_F = " + fmt("%.4f", frob) + ", max |rho_1| = " + fmt("%.4f", worst_rho) + " over " +
                std::to_string(n) + " steps"};
}

// ---------------------------------------------------------------- 4

Outcome c4_jacobian() {
    const auto model = sim::DynamicsModel::make(ModelId::ModelII);
    Rng rng(44);
    double worst = 0.0;
    for (int t = 0; t < kJacobianStates; ++t) {
        Vec x(12), u(4);
        for (int i = 0; i < 12; ++i) x[i] = rng.uniform(-3.0, 3.0);
        for (int i = 6; i < 9; ++i) x[i] = rng.uniform(-1.3, 1.3);
        u << rng.uniform(0.0, 30.0), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2);
        const Mat F = sim::transition_jacobian(model, x, u);
        Mat Ffd(12, 12);
        const double h = 1e-6;
        for (int j = 0; j < 12; ++j) {
            Vec xp = x, xm = x;
            xp[j] += h;
            xm[j] -= h;
            Ffd.col(j) = (sim::transition(model, xp, u) - sim::transition(model, xm, u)) / (2.0 * h);
        }
        worst = std::max(worst, (F - Ffd).norm() / Ffd.norm());
    }
    return {worst < kJacobianRelTol, "max ||F - F_fd|| / ||F_fd|| = " + fmt("%.3g", worst) + " over " +
                                         std::to_string(kJacobianStates) + " states"};
}

// ---------------------------------------------------------------- 5

double gradient_error(const transformer::Hyper& hp, std::uint64_t seed, const transformer::LossWeights& lw) {
    using namespace transformer;
    Rng rng(seed);
    ModelParams p = ModelParams::init(hp);
    WindowBatch batch;
    for (int b = 0; b < 2; ++b) {
        Window w;
        w.x.resize(hp.window, hp.channels);
        for (int i = 0; i < hp.window; ++i)
            for (int j = 0; j < hp.channels; ++j) w.x(i, j) = rng.normal();
        w.labeled = b == 0 || rng.uniform() < 0.5;
        w.cls = static_cast<Label>(rng.below(3));
        batch.windows.push_back(w);
    }
    const Gradient g = grad(p, batch, lw);
    const auto gb = g.grad.blocks();
    auto pb = p.blocks();
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t b = 0; b < pb.size(); ++b)
        for (Eigen::Index i = 0; i < pb[b].size; ++i) {
            double& v = pb[b].data[i];
            const double saved = v;
            v = saved + h;
            const auto lp = loss(p, batch, lw);
            v = saved - h;
            const auto lm = loss(p, batch, lw);
            v = saved;
            // sigma ascends on the discrepancy, everything else descends on the total
            const double fd = pb[b].prior_branch ? -lw.disc * (lp.disc - lm.disc) / (2.0 * h)
                                                 : (lp.total - lm.total) / (2.0 * h);
            const double an = gb[b].data[i];
            worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
        }
    return worst;
}

Outcome c5_gradients() {
    const auto t0 = Clock::now();
    Rng pick(5);
    double worst = 0.0;
    for (int c = 0; c < kGradConfigs; ++c) {
        transformer::Hyper hp;
        hp.window = 4;
        hp.d_model = 4;
        hp.channels = 2 + static_cast<int>(pick.below(3));
        hp.heads = pick.below(2) ? 2 : 1;
        hp.layers = 1 + static_cast<int>(pick.below(2));
        hp.d_ff = 4 + 4 * static_cast<int>(pick.below(2));
        hp.seed = 70 + c;
        transformer::LossWeights lw;
        lw.disc = 0.05 + pick.uniform();
        lw.cls = 0.5 + pick.uniform();
        lw.rec_on_attacked = c % 2 == 0;
        worst = std::max(worst, gradient_error(hp, 900 + c, lw));
    }
    const double secs = seconds_since(t0);
    return {worst < kGradRelTol && secs < kGradSeconds,
            "max rel error " + fmt("%.3g", worst) + " over " + std::to_string(kGradConfigs) + " configs (W=4, d=4) in " +
                fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------- 6

Outcome c6_attention() {
    using namespace transformer;
    // rows on a default-size model fed with real residues
    eval::ScenarioSpec s = defaults().scenario;
    s.steps = 300;
    const auto seq = eval::simulate_residues(s, defaults().filter);
    Hyper hp = defaults().suite.hyper;
    hp.channels = seq.channel_count();
    const auto params = ModelParams::init(hp);
    WindowBatch batch;
    batch.windows = make_windows(seq, hp.window, 16, false);
    double worst_row = 0.0, min_disc = INFINITY;
    for (const auto& o : forward(params, batch)) {
        for (std::size_t l = 0; l < o.attention.series.size(); ++l) {
            for (const auto& a : o.attention.series[l])
                worst_row = std::max(worst_row, (a.rowwise().sum().array() - 1.0).abs().maxCoeff());
            worst_row =
                std::max(worst_row, (o.attention.prior[l].rowwise().sum().array() - 1.0).abs().maxCoeff());
        }
        min_disc = std::min(min_disc, o.attention.discrepancy.minCoeff());
    }

    Rng rng(6);
    double max_equal = 0.0;
    for (int t = 0; t < 200; ++t) {
        Vec p(hp.window);
        for (int i = 0; i < p.size(); ++i) p[i] = rng.uniform(1e-3, 1.0);
        p /= p.sum();
        Vec q(hp.window);
        for (int i = 0; i < q.size(); ++i) q[i] = rng.uniform(1e-3, 1.0);
        q /= q.sum();
        const Vec lp = p.array().log(), lq = q.array().log();
        min_disc = std::min(min_disc, symmetric_kl(lp, lq));
        max_equal = std::max(max_equal, std::abs(symmetric_kl(lp, lp)));
    }

    // W=2: series (0.9, 0.1), prior (0.5, 0.5)
    const double hand = 0.5 * ((0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5)) +
                               (0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1)));
    Vec series(2), prior(2);
    series << 0.9, 0.1;
    prior << 0.5, 0.5;
    const double got = symmetric_kl(series.array().log(), prior.array().log());
    const double one_sided = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);

    Outcome o;
    o.pass = worst_row < kRowSumTol && min_disc >= 0.0 && max_equal == 0.0 && std::abs(got - hand) < kKlExampleTol;
    o.detail = "max |row sum - 1| = " + fmt("%.2g", worst_row) + ", min discrepancy = " + fmt("%.3g", min_disc) +
               ", equal-input KL = " + fmt("%.1g", max_equal) + ", W=2 example = " + fmt("%.5f", got) +
               " (hand formula " + fmt("%.5f", hand) + "; the quoted 0.3680 equals KL(series||prior) = " +
               fmt("%.5f", one_sided) + ")";
    return o;
}

// ---------------------------------------------------------------- 7

Outcome c7_classical() {
    using namespace detect;
    // strict '>' alarm rule: first alarm at ceil(h/delta) for non-integer h/delta
    struct Case {
        double h, nu, level;
    };
    bool cusum_ok = true;
    int cases = 0;
    for (const auto& c : {Case{5.0, 0.5, 2.0}, Case{10.0, 1.0, 1.3}, Case{7.0, 0.2, 0.5}, Case{3.3, 0.0, 1.0},
                          Case{25.0, 1.0, 1.7}, Case{0.4, 0.1, 0.35}}) {
        const double delta = c.level - c.nu;
        auto st = CusumState::make(3, {c.nu, c.h});
        long first = -1;
        for (long n = 1; n <= 1000 && first < 0; ++n) {
            Vec r(3);
            r << c.level, -c.nu * 0.5, 0.0;
            auto [next, v] = cusum_step(st, r, n);
            st = next;
            if (v.attacked()) first = n;
        }
        cusum_ok = cusum_ok && first == static_cast<long>(std::ceil(c.h / delta));
        ++cases;
    }

    bool sprt_ok = true;
    int pairs = 0;
    for (double alpha = 0.005; alpha < 0.5; alpha += 0.035)
        for (double beta = 0.005; beta < 0.5; beta += 0.035) {
            const auto s = SprtState::make({alpha, beta, 2.0});
            sprt_ok = sprt_ok && s.lower < 0.0 && 0.0 < s.upper;
            ++pairs;
        }

    BhtConfig cfg;
    cfg.window = 10;
    cfg.mu1 = 2.0;
    cfg.prior = 0.5;
    Rng rng(7);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        cfg.prior = rng.uniform(0.05, 0.95);
        std::vector<Vec> w;
        double shift = rng.uniform(-0.5, 0.5);
        for (int i = 0; i < cfg.window; ++i) {
            Vec r(2);
            r << shift + 0.3 * rng.normal(), shift + 0.3 * rng.normal();
            w.push_back(r);
        }
        double l1 = 1.0, l0 = 1.0;
        for (const auto& r : w)
            for (int i = 0; i < r.size(); ++i) {
                l1 *= std::exp(-0.5 * (r[i] - cfg.mu1) * (r[i] - cfg.mu1)) / std::sqrt(2.0 * M_PI);
                l0 *= std::exp(-0.5 * r[i] * r[i]) / std::sqrt(2.0 * M_PI);
            }
        const double closed = cfg.prior * l1 / (cfg.prior * l1 + (1.0 - cfg.prior) * l0);
        worst = std::max(worst, std::abs(bht_posterior(cfg, w) - closed));
    }
    return {cusum_ok && sprt_ok && worst < kBhtTol,
            "CUSUM ceil(h/delta) " + std::string(cusum_ok ? "held" : "failed") + " on " + std::to_string(cases) +
                " cases, SPRT B<0<A " + (sprt_ok ? "held" : "failed") + " on " + std::to_string(pairs) +
                " (alpha,beta) pairs, BHT max |posterior - closed form| = " + fmt("%.3g", worst)};
}

// ---------------------------------------------------------------- 8

double corpus_rate(detect::DetectorKind det, const eval::Suite& suite, const std::vector<ekf::ResidueSequence>& seqs) {
    std::vector<detect::VerdictStream> streams;
    std::vector<long> first;
    for (const auto& s : seqs) {
        streams.push_back(eval::run_detector(det, suite, s));
        first.push_back(s.first_usable());
    }
    return detect::false_alarm_rate(streams, first);
}

Outcome c8_calibration() {
    const auto& cfg = defaults();
    const auto spec = cfg.benchmark_spec();
    const auto& result = benchmark();
    const double target = spec.suite.target_far;
    bool ok = !result.suites.empty();
    double worst_cal = 0.0, worst_fresh = 0.0;
    std::string worst_fresh_name;
    for (const auto& suite : result.suites) {
        const std::string group = to_string(suite.model) + "/" + to_string(suite.noise);
        auto corpus = [&](const std::string& tag) {
            std::vector<ekf::ResidueSequence> seqs;
            for (int i = 0; i < spec.suite.calibration_runs; ++i) {
                eval::ScenarioSpec s = spec.scenario;
                s.model = suite.model;
                s.noise = suite.noise;
                s.attack = AttackKind::None;
                s.seed = derive_seed(spec.root_seed, tag + "/" + group + "/" + std::to_string(i));
                seqs.push_back(eval::simulate_residues(s, spec.filter));
            }
            return seqs;
        };
        const auto calib = corpus("calibration");
        const auto fresh = corpus("acceptance-fresh");
        for (auto det : suite.detectors) {
            const double on_cal = corpus_rate(det, suite, calib);
            const double on_fresh = corpus_rate(det, suite, fresh);
            ok = ok && on_cal <= target && on_fresh <= kFreshFarFactor * target;
            worst_cal = std::max(worst_cal, on_cal);
            if (on_fresh >= worst_fresh) {
                worst_fresh = on_fresh;
                worst_fresh_name = group + "/" + detect::detector_id(det);
            }
        }
    }
    return {ok, "target " + fmt("%.3g", target) + ": max rate on calibration corpus " + fmt("%.5f", worst_cal) +
                    ", max on fresh corpus " + fmt("%.5f", worst_fresh) + " (" + worst_fresh_name + ")"};
}

// ---------------------------------------------------------------- 9

Outcome c9_benchmark() {
    const auto& result = benchmark();
    const double secs = result.seconds;
    bool floor_ok = result.failures.empty() && result.cells.size() == 8;
    int won = 0;
    std::ostringstream cells;
    double min_tf = INFINITY;
    for (const auto& cell : result.cells) {
        const auto tf = cell.mean.find(detect::DetectorKind::Transformer);
        if (tf == cell.mean.end() || !tf->second.f1) {
            floor_ok = false;
            continue;
        }
        const double f = *tf->second.f1;
        min_tf = std::min(min_tf, f);
        if (f < kMinTransformerF1) floor_ok = false;
        bool beats = true;
        double best_classical = 0.0;
        for (const auto& [det, agg] : cell.mean) {
            if (!detect::is_classical(det)) continue;
            const double other = agg.f1.value_or(0.0);
            best_classical = std::max(best_classical, other);
            if (f < other) beats = false;
        }
        won += beats;
        cells << " " << cell.key.name() << "=" << fmt("%.4f", f) << (beats ? ">=" : "<") << fmt("%.4f", best_classical);
    }
    const bool ok = floor_ok && won >= kMinCellsWon && secs < kBenchmarkSeconds;
    return {ok, "min transformer F1 " + fmt("%.4f", min_tf) + ", cells with F1 >= every classical: " +
                    std::to_string(won) + "/8, runtime " + fmt("%.1f", secs) + " s on " + std::to_string(jobs()) +
                    " thread(s);" + cells.str()};
}

// ---------------------------------------------------------------- 10

struct RmsePair {
    double on = 0.0, off = 0.0;
};

RmsePair resilience_rmse(const config::Config& c) {
    const auto suite = c.resilience_suite();
    RmsePair out;
    for (int i = 0; i < kResilienceSeeds; ++i) {
        eval::ScenarioSpec s = c.scenario;
        s.attack = AttackKind::AttackI;
        s.seed = derive_seed(c.seed, "acceptance-resilience/" + std::to_string(i));
        const auto run = sim::simulate_run(s.to_scenario());
        const int m = run.scenario.model.meas_dim;
        auto d_on = eval::make_stream(c.resilience.detector, suite, m);
        auto d_off = eval::make_stream(c.resilience.detector, suite, m);
        const auto on = resilience::resilient_filter(run, *d_on, c.filter, {true, c.resilience.n_clean});
        const auto off = resilience::resilient_filter(run, *d_off, c.filter, {false, c.resilience.n_clean});
        out.on += resilience::position_rmse(on.estimates, run.states, s.onset, s.steps);
        out.off += resilience::position_rmse(off.estimates, run.states, s.onset, s.steps);
    }
    out.on /= kResilienceSeeds;
    out.off /= kResilienceSeeds;
    return out;
}

Outcome c10_resilience() {
    config::Config c = defaults();
    c.resilience.enabled = true;
    const auto rm = resilience_rmse(c);
    const double ratio = rm.on / rm.off;

    // gated equality with a gps-free step, replayed on a ModelII run
    eval::ScenarioSpec s = c.scenario;
    s.model = ModelId::ModelII;
    s.attack = AttackKind::AttackI;
    s.steps = 2200;
    const auto run = sim::simulate_run(s.to_scenario());
    const auto& model = run.scenario.model;
    config::Config c2 = c;
    c2.scenario.model = ModelId::ModelII;
    const auto suite = c2.resilience_suite();
    auto det = eval::make_stream(c.resilience.detector, suite, model.meas_dim);
    const auto res = resilience::resilient_filter(run, *det, c.filter, {true, 50});
    const Mat Q = run.scenario.noise.process_covariance();
    const Mat R = run.scenario.noise.measurement_covariance();
    const Mat H = sim::observation_jacobian(model);
    const auto gps = model.gps_channels();
    std::vector<int> keep;
    for (int i = 0; i < model.meas_dim; ++i)
        if (!model.is_gps(i)) keep.push_back(i);
    const auto nk = static_cast<Eigen::Index>(keep.size());
    Mat Hs(nk, H.cols()), Rs(nk, nk);
    for (Eigen::Index i = 0; i < nk; ++i) {
        Hs.row(i) = H.row(keep[i]);
        for (Eigen::Index j = 0; j < nk; ++j) Rs(i, j) = R(keep[i], keep[j]);
    }
    ekf::EkfState est{run.states.front(), c.filter.initial_covariance * Mat::Identity(model.state_dim, model.state_dim)};
    bool gated_equal = true;
    long masked_steps = 0;
    for (long k = 0; k < run.size(); ++k) {
        const Vec innov = sim::measurement_difference(model, run.measurements[k], sim::observe(model, est.x));
        if (res.masked[k]) {
            ++masked_steps;
            Vec sub(nk);
            for (Eigen::Index i = 0; i < nk; ++i) sub[i] = innov[keep[i]];
            est = ekf::correct(est, sub, Hs, Rs, std::vector<bool>(nk, true)).posterior;
        } else {
            est = ekf::correct(est, innov, H, R, std::vector<bool>(model.meas_dim, true)).posterior;
        }
        for (int i = sim::kEuler; i < sim::kEuler + 3; ++i) est.x[i] = wrap_angle(est.x[i]);
        gated_equal = gated_equal && est.x == res.estimates[k];
        est = ekf::ekf_predict(model, est, run.inputs[k], Q);
    }
    gated_equal = gated_equal && masked_steps > 0;

    // liveness: masked, then clean verdicts from k=400 with N_clean=50
    auto st = resilience::ResilienceState::make(model, 50);
    long unmask_at = -1;
    for (long k = 0; k < 1000; ++k) {
        detect::DetectorVerdict v;
        v.k = k;
        if (k >= 200 && k < 400) v.decision = detect::Decision::Attacked;
        const bool was = st.any_masked();
        st = resilience::apply_verdict(std::move(st), v, k, "scripted");
        if (was && !st.any_masked()) unmask_at = k;
    }

    // for reference only: the same comparison with a noisier camera
    config::Config noisy = c;
    noisy.scenario.camera_std = 0.5;
    const auto rm_noisy = resilience_rmse(noisy);

    Outcome o;
    o.pass = ratio <= kRmseRatio && gated_equal && unmask_at == 449;
    o.detail = "RMSE enabled/disabled = " + fmt("%.4f", rm.on) + "/" + fmt("%.4f", rm.off) + " = " + fmt("%.3f", ratio) +
               " (" + std::to_string(kResilienceSeeds) + " seeds, camera std " + fmt("%.2f", c.scenario.camera_std) +
               "), gated step equality " + (gated_equal ? "exact" : "broken") + " over " +
               std::to_string(masked_steps) + " masked steps, unmask at " + std::to_string(unmask_at) +
               "; info: camera std 0.5 gives ratio " + fmt("%.3f", rm_noisy.on / rm_noisy.off);
    return o;
}

// ---------------------------------------------------------------- 11

std::map<std::string, std::string> pipeline_digests() {
    std::map<std::string, std::string> d;
    config::Config c = defaults();
    c.scenario.steps = 1200;
    c.scenario.onset = 700;
    c.scenario.model = ModelId::ModelII;
    c.scenario.noise = NoiseFamily::Laplacian;
    c.scenario.attack = AttackKind::AttackII;

    const auto run = sim::simulate_run(c.scenario.to_scenario());
    d["simulate"] = io::sha256_hex(io::run_csv(run));
    const auto seq = ekf::generate_residues(run, c.filter);
    d["residues"] = io::sha256_hex(io::residues_csv(seq) + io::residues_json(seq, c.scenario.model, true));

    eval::SuiteConfig sc = c.suite;
    sc.train.epochs = 2;
    sc.calibration_runs = 2;
    sc.train_labeled_runs = 2;
    sc.train_clean_runs = 1;
    const auto suite = eval::prepare_suite(c.scenario.model, c.scenario.noise,
                                           {detect::DetectorKind::Cusum, detect::DetectorKind::Sprt,
                                            detect::DetectorKind::Bht, detect::DetectorKind::LogReg,
                                            detect::DetectorKind::Transformer},
                                           c.scenario, c.filter, sc, c.seed);
    d["train"] = io::sha256_hex(io::checkpoint_bytes(*suite.tf));
    std::string thresholds;
    for (const auto& [det, cal] : suite.calibration)
        thresholds += detect::detector_id(det) + "," + io::number(cal.threshold) + "," + io::number(cal.achieved_rate) + "\n";
    thresholds += io::number(suite.tau) + "\n";
    d["calibrate"] = io::sha256_hex(thresholds);

    std::string verdicts;
    for (auto det : suite.detectors) verdicts += io::verdicts_csv(eval::run_detector(det, suite, seq), detect::detector_id(det));
    d["detect"] = io::sha256_hex(verdicts);

    auto stream = eval::make_stream(detect::DetectorKind::Cusum, suite, seq.channel_count());
    const auto res = resilience::resilient_filter(run, *stream, c.filter, {true, c.resilience.n_clean});
    d["resilience"] = io::sha256_hex(io::events_csv(res.events));

    eval::BenchmarkSpec spec = c.benchmark_spec();
    spec.models = {ModelId::ModelI};
    spec.seeds = 2;
    spec.scenario.model = ModelId::ModelI;
    spec.suite = sc;
    const auto bench = eval::run_benchmark(spec, jobs());
    std::string tables = eval::emit_table(eval::table_rows(bench), eval::TableFormat::Csv) +
                         eval::emit_table(eval::table_rows(bench, true), eval::TableFormat::Csv);
    for (const auto& cell : bench.cells) tables += eval::cell_csv(cell);
    d["benchmark"] = io::sha256_hex(tables);
    return d;
}

Outcome c11_determinism() {
    const auto a = pipeline_digests();
    const auto b = pipeline_digests();
    bool ok = a == b;
    std::string detail;
    for (const auto& [stage, digest] : a) {
        const bool same = b.at(stage) == digest;
        detail += stage + "=" + digest.substr(0, 12) + (same ? "" : "(differs)") + " ";
    }
    return {ok, "stages: " + detail};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> all{
        {1, "F1 arithmetic", c1_f1},
        {2, "EKF oracle equivalence", c2_kalman},
        {3, "residue statistics", c3_residues},
        {4, "Jacobian correctness", c4_jacobian},
        {5, "transformer gradient check", c5_gradients},
        {6, "attention invariants", c6_attention},
        {7, "classical detector analytics", c7_classical},
        {8, "calibration soundness", c8_calibration},
        {9, "benchmark ordering", c9_benchmark},
        {10, "resilience efficacy", c10_resilience},
        {11, "determinism", c11_determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
