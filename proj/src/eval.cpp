#include "fdibench/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace fdibench::eval {

using detect::DetectorKind;

// ---------------------------------------------------------------- metrics

MetricsReport from_counts(long tp, long fp, long fn, long tn) {
    if (tp < 0 || fp < 0 || fn < 0 || tn < 0) throw ContractViolation("confusion counts must be >= 0");
    MetricsReport r;
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    r.tn = tn;
    if (tp + fp > 0) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (r.precision && r.recall) {
        if (*r.precision > 0.0 && *r.recall > 0.0)
            r.f1 = 2.0 / (1.0 / *r.precision + 1.0 / *r.recall);
        else
            r.f1 = 0.0;
    }
    if (fp + tn > 0) r.false_alarm_rate = static_cast<double>(fp) / static_cast<double>(fp + tn);
    return r;
}

namespace {

void require_aligned(const detect::VerdictStream& verdicts, const std::vector<Label>& labels) {
    if (verdicts.size() != labels.size()) {
        std::ostringstream os;
        os << "verdict stream has " << verdicts.size() << " steps, labels have " << labels.size();
        throw ContractViolation(os.str());
    }
}

long onset_of(const std::vector<Label>& labels) {
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (labels[k] != Label::Clean) return static_cast<long>(k);
    return -1;
}

}  // namespace

MetricsReport precision_recall_f1(const detect::VerdictStream& verdicts, const std::vector<Label>& labels,
                                  long first) {
    require_aligned(verdicts, labels);
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t k = std::max<long>(first, 0); k < labels.size(); ++k) {
        const bool pos = labels[k] != Label::Clean;
        const bool alarm = verdicts[k].attacked();
        if (pos && alarm) ++tp;
        else if (!pos && alarm) ++fp;
        else if (pos) ++fn;
        else ++tn;
    }
    return from_counts(tp, fp, fn, tn);
}

std::optional<long> detection_delay(const detect::VerdictStream& verdicts, const std::vector<Label>& labels,
                                    long first) {
    require_aligned(verdicts, labels);
    const long k0 = onset_of(labels);
    if (k0 < 0) throw ContractViolation("labels contain no attack onset");
    for (long k = std::max(k0, first); k < static_cast<long>(verdicts.size()); ++k)
        if (verdicts[k].attacked()) return k - k0;
    return std::nullopt;
}

MetricsReport episode_metrics(const detect::VerdictStream& verdicts, const std::vector<Label>& labels, long first) {
    require_aligned(verdicts, labels);
    const long n = static_cast<long>(labels.size());
    const long k0 = onset_of(labels);
    long tp = 0, fp = 0, fn = 0, tn = 0;
    const long pre_end = k0 < 0 ? n : k0;
    if (pre_end > first) {
        bool alarm = false;
        for (long k = std::max(first, 0L); k < pre_end; ++k) alarm = alarm || verdicts[k].attacked();
        (alarm ? fp : tn) += 1;
    }
    if (k0 >= 0) {
        bool hit = false;
        for (long k = std::max(k0, first); k < n; ++k)
            if (labels[k] != Label::Clean && verdicts[k].attacked()) hit = true;
        (hit ? tp : fn) += 1;
    }
    auto r = from_counts(tp, fp, fn, tn);
    r.episode_detected = tp > 0;
    return r;
}

MetricsReport evaluate(const detect::VerdictStream& verdicts, const std::vector<Label>& labels, long first) {
    auto r = precision_recall_f1(verdicts, labels, first);
    if (onset_of(labels) >= 0) {
        if (const auto d = detection_delay(verdicts, labels, first)) {
            r.delay = static_cast<double>(*d);
            r.episode_detected = true;
        }
    }
    return r;
}

// ---------------------------------------------------------------- scenario + suite

sim::Scenario ScenarioSpec::to_scenario() const {
    sim::Scenario sc;
    sc.model = sim::DynamicsModel::make(model);
    sc.steps = steps;
    sc.seed = seed;
    const int m = sc.model.meas_dim;
    Vec meas_std(m);
    for (int i = 0; i < m; ++i) {
        switch (sc.model.channels[i]) {
            case ChannelTag::GpsPos: meas_std[i] = gps_std; break;
            case ChannelTag::CameraPos: meas_std[i] = camera_std; break;
            case ChannelTag::MagHeading: meas_std[i] = mag_std; break;
        }
    }
    sc.noise = sim::NoiseModel::from_std(noise, Vec::Constant(sc.model.state_dim, process_std), meas_std);
    sc.attack.kind = attack;
    if (attack != AttackKind::None) {
        sc.attack.mask.assign(m, false);
        sc.attack.start_step = onset;
        sc.attack.end_step = attack_end;
        sc.attack.bias = Vec::Zero(m);
        sc.attack.ramp_rate = Vec::Zero(m);
        const double magnitude = bias_sigmas * gps_std;
        if (ramp_steps < 1) throw ContractViolation("ramp_steps must be >= 1");
        for (int i = 0; i < m; ++i) {
            if (!sc.model.is_gps(i)) continue;
            sc.attack.mask[i] = true;
            sc.attack.bias[i] = magnitude;
            sc.attack.ramp_rate[i] = magnitude / static_cast<double>(ramp_steps);
        }
    }
    return sc;
}

ekf::ResidueSequence simulate_residues(const ScenarioSpec& spec, const ekf::FilterConfig& filter) {
    return ekf::generate_residues(sim::simulate_run(spec.to_scenario()), filter);
}

long evaluation_start(const ekf::FilterConfig& filter, const SuiteConfig& cfg) {
    return filter.warmup_steps + cfg.hyper.window - 1;
}

namespace {

std::string group_name(ModelId model, NoiseFamily noise) { return to_string(model) + "/" + to_string(noise); }

std::vector<const ekf::ResidueSequence*> pointers(const std::vector<ekf::ResidueSequence>& v) {
    std::vector<const ekf::ResidueSequence*> out;
    for (const auto& s : v) out.push_back(&s);
    return out;
}

bool wants(const std::vector<DetectorKind>& set, DetectorKind k) {
    return std::find(set.begin(), set.end(), k) != set.end();
}

}  // namespace

Suite prepare_suite(ModelId model, NoiseFamily noise, const std::vector<DetectorKind>& detectors,
                    const ScenarioSpec& base, const ekf::FilterConfig& filter, const SuiteConfig& cfg,
                    std::uint64_t root_seed) {
    Suite suite;
    suite.model = model;
    suite.noise = noise;
    suite.detectors = detectors;
    suite.h_run = cfg.h_run;
    const std::string group = group_name(model, noise);

    auto make = [&](AttackKind attack, const std::string& tag, int i) {
        ScenarioSpec s = base;
        s.model = model;
        s.noise = noise;
        s.attack = attack;
        s.seed = derive_seed(root_seed, tag + "/" + group + "/" + std::to_string(i));
        return simulate_residues(s, filter);
    };

    std::vector<ekf::ResidueSequence> calib;
    for (int i = 0; i < cfg.calibration_runs; ++i) calib.push_back(make(AttackKind::None, "calibration", i));
    const auto corpus = pointers(calib);

    std::vector<ekf::ResidueSequence> labeled, unlabeled;
    const bool learned = wants(detectors, DetectorKind::LogReg) || wants(detectors, DetectorKind::Transformer);
    if (learned) {
        for (int i = 0; i < cfg.train_labeled_runs; ++i)
            labeled.push_back(make(i % 2 == 0 ? AttackKind::AttackI : AttackKind::AttackII, "train-labeled", i));
        for (int i = 0; i < cfg.train_clean_runs; ++i) unlabeled.push_back(make(AttackKind::None, "train-clean", i));
    }

    if (wants(detectors, DetectorKind::Cusum)) {
        const auto c = detect::calibrate_cusum(corpus, cfg.cusum, cfg.target_far);
        suite.cusum = cfg.cusum;
        suite.cusum.threshold = c.threshold;
        suite.calibration[DetectorKind::Cusum] = c;
    }
    if (wants(detectors, DetectorKind::Sprt)) {
        const auto c = detect::calibrate_sprt(corpus, cfg.sprt, cfg.target_far);
        suite.sprt = cfg.sprt;
        suite.sprt.upper_override = c.threshold;
        suite.calibration[DetectorKind::Sprt] = c;
    }
    if (wants(detectors, DetectorKind::Bht)) {
        const auto c = detect::calibrate_bht(corpus, cfg.bht, cfg.target_far);
        suite.bht = cfg.bht;
        suite.bht.threshold = c.threshold;
        suite.calibration[DetectorKind::Bht] = c;
    }
    if (wants(detectors, DetectorKind::LogReg)) {
        suite.logreg = detect::train_logreg(pointers(labeled), cfg.logreg, cfg.logreg_history);
        const auto c = detect::calibrate_logreg(corpus, suite.logreg, cfg.target_far);
        suite.logreg.threshold = c.threshold;
        suite.calibration[DetectorKind::LogReg] = c;
    }
    if (wants(detectors, DetectorKind::Transformer)) {
        transformer::Hyper hp = cfg.hyper;
        hp.channels = sim::DynamicsModel::make(model).meas_dim;
        std::vector<transformer::TrainingSequence> data;
        for (const auto& s : labeled) data.push_back({&s, true});
        for (const auto& s : unlabeled) data.push_back({&s, false});
        auto trained = transformer::train(hp, cfg.train, data);
        suite.train_log = std::move(trained.log);
        suite.tf = std::move(trained.params);
        const auto c = transformer::calibrate_tau(*suite.tf, corpus, cfg.h_run, cfg.target_far);
        suite.tau = c.threshold;
        suite.calibration[DetectorKind::Transformer] = c;
    }
    return suite;
}

detect::VerdictStream run_detector(DetectorKind kind, const Suite& suite, const ekf::ResidueSequence& seq) {
    switch (kind) {
        case DetectorKind::Cusum: return detect::run_cusum(seq, suite.cusum);
        case DetectorKind::Sprt: return detect::run_sprt(seq, suite.sprt);
        case DetectorKind::Bht: return detect::run_bht(seq, suite.bht);
        case DetectorKind::LogReg: return detect::run_logreg(seq, suite.logreg);
        case DetectorKind::Transformer:
            if (!suite.tf) throw ContractViolation("transformer detector selected without trained parameters");
            return transformer::score_stream(*suite.tf, seq, suite.tau, suite.h_run).verdicts;
    }
    throw ContractViolation("unknown detector");
}

std::unique_ptr<detect::StreamDetector> make_stream(DetectorKind kind, const Suite& suite, int channels) {
    switch (kind) {
        case DetectorKind::Cusum: return std::make_unique<detect::CusumStream>(channels, suite.cusum);
        case DetectorKind::Sprt: return std::make_unique<detect::SprtStream>(suite.sprt);
        case DetectorKind::Bht: return std::make_unique<detect::BhtStream>(suite.bht);
        case DetectorKind::LogReg: return std::make_unique<detect::LogRegStream>(suite.logreg);
        case DetectorKind::Transformer:
            if (!suite.tf) throw ContractViolation("transformer detector selected without trained parameters");
            return std::make_unique<transformer::TransformerStream>(*suite.tf, suite.tau, suite.h_run);
    }
    throw ContractViolation("unknown detector");
}

// ---------------------------------------------------------------- benchmark

std::string CellKey::name() const { return to_string(model) + "/" + to_string(noise) + "/" + to_string(attack); }

void BenchmarkSpec::validate() const {
    if (models.empty() || noises.empty() || attacks.empty() || detectors.empty())
        throw ContractViolation("benchmark grid has an empty axis");
    if (seeds < 1) throw ContractViolation("benchmark needs at least one seed per cell");
    for (auto a : attacks)
        if (a == AttackKind::None) throw ContractViolation("benchmark attacks must be AttackI or AttackII");
    if (scenario.onset <= evaluation_start(filter, suite) || scenario.onset >= scenario.steps)
        throw ContractViolation("attack onset must fall inside the evaluated part of the run");
}

std::vector<CellKey> BenchmarkSpec::cells() const {
    std::vector<CellKey> out;
    for (auto m : models)
        for (auto n : noises)
            for (auto a : attacks) out.push_back({m, n, a});
    return out;
}

Aggregate aggregate(const std::vector<SeedResult>& seeds) {
    Aggregate a;
    a.seeds = static_cast<int>(seeds.size());
    auto mean = [&](auto get) -> std::optional<double> {
        double sum = 0.0;
        int n = 0;
        for (const auto& s : seeds)
            if (const auto v = get(s)) {
                sum += *v;
                ++n;
            }
        if (n == 0) return std::nullopt;
        return sum / n;
    };
    a.precision = mean([](const SeedResult& s) { return s.step.precision; });
    a.recall = mean([](const SeedResult& s) { return s.step.recall; });
    a.f1 = mean([](const SeedResult& s) { return s.step.f1; });
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (const auto& s : seeds) {
        tp += s.episode.tp;
        fp += s.episode.fp;
        fn += s.episode.fn;
        tn += s.episode.tn;
    }
    const auto pooled = from_counts(tp, fp, fn, tn);
    a.episode_precision = pooled.precision;
    a.episode_recall = pooled.recall;
    a.episode_f1 = pooled.f1;
    a.delay = mean([](const SeedResult& s) { return s.step.delay; });
    a.false_alarm_rate = mean([](const SeedResult& s) { return s.step.false_alarm_rate; });
    for (const auto& s : seeds) a.detected += s.step.episode_detected ? 1 : 0;
    return a;
}

namespace {

void run_pool(std::size_t tasks, int jobs, const std::function<void(std::size_t)>& body) {
    const auto workers = static_cast<std::size_t>(std::max(1, jobs));
    if (workers == 1 || tasks <= 1) {
        for (std::size_t i = 0; i < tasks; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, tasks); ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < tasks; i = next++) body(i);
        });
    for (auto& t : pool) t.join();
}

}  // namespace

BenchmarkResult run_benchmark(const BenchmarkSpec& spec, int jobs) {
    spec.validate();
    const auto t0 = std::chrono::steady_clock::now();
    BenchmarkResult result;

    struct Group {
        ModelId model;
        NoiseFamily noise;
        std::optional<Suite> suite;
        std::string error;
    };
    std::vector<Group> groups;
    for (auto m : spec.models)
        for (auto n : spec.noises) groups.push_back({m, n, std::nullopt, {}});

    run_pool(groups.size(), jobs, [&](std::size_t i) {
        auto& g = groups[i];
        try {
            g.suite = prepare_suite(g.model, g.noise, spec.detectors, spec.scenario, spec.filter, spec.suite,
                                    spec.root_seed);
        } catch (const std::exception& e) {
            g.error = e.what();
        }
    });

    const auto cells = spec.cells();
    auto group_of = [&](const CellKey& c) -> const Group& {
        for (const auto& g : groups)
            if (g.model == c.model && g.noise == c.noise) return g;
        throw InvalidState("cell without group");
    };

    struct Task {
        std::size_t cell;
        int seed_index;
        std::map<DetectorKind, SeedResult> out;
        std::string error;
    };
    std::vector<Task> tasks;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (int s = 0; s < spec.seeds; ++s) tasks.push_back({c, s, {}, {}});

    const long first = evaluation_start(spec.filter, spec.suite);
    run_pool(tasks.size(), jobs, [&](std::size_t i) {
        auto& t = tasks[i];
        const auto& key = cells[t.cell];
        const auto& g = group_of(key);
        if (!g.suite) return;
        try {
            ScenarioSpec s = spec.scenario;
            s.model = key.model;
            s.noise = key.noise;
            s.attack = key.attack;
            s.seed = derive_seed(spec.root_seed, "cell/" + key.name() + "/" + std::to_string(t.seed_index));
            const auto seq = simulate_residues(s, spec.filter);
            for (auto det : spec.detectors) {
                const auto verdicts = run_detector(det, *g.suite, seq);
                SeedResult r;
                r.seed = s.seed;
                r.step = evaluate(verdicts, seq.labels, first);
                r.episode = episode_metrics(verdicts, seq.labels, first);
                t.out[det] = r;
            }
        } catch (const std::exception& e) {
            t.error = e.what();
        }
    });

    for (std::size_t c = 0; c < cells.size(); ++c) {
        CellResult cell;
        cell.key = cells[c];
        const auto& g = group_of(cells[c]);
        if (!g.suite) cell.error = "group preparation failed: " + g.error;
        for (const auto& t : tasks) {
            if (t.cell != c) continue;
            if (!t.error.empty() && cell.error.empty())
                cell.error = "seed " + std::to_string(t.seed_index) + ": " + t.error;
            for (const auto& [det, r] : t.out) cell.per_seed[det].push_back(r);
        }
        if (cell.ok())
            for (const auto& [det, rs] : cell.per_seed) cell.mean[det] = aggregate(rs);
        else
            result.failures.push_back(cell.key.name() + ": " + cell.error);
        result.cells.push_back(std::move(cell));
    }
    for (auto& g : groups)
        if (g.suite) result.suites.push_back(std::move(*g.suite));
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// ---------------------------------------------------------------- tables

std::string format_metric(const std::optional<double>& v) {
    if (!v || !std::isfinite(*v)) return "—";
    // half-up; the small offset absorbs binary representation error (0.925 -> 0.93)
    const double r = std::floor(*v * 100.0 + 0.5 + 1e-9) / 100.0;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", r);
    return buf;
}

std::vector<TableRow> table_rows(const BenchmarkResult& result, bool episode) {
    std::vector<TableRow> rows;
    for (const auto& cell : result.cells)
        for (const auto& [det, a] : cell.mean) {
            TableRow r{cell.key.model, det, cell.key.noise, cell.key.attack, {}, {}, {}};
            if (episode) {
                r.precision = a.episode_precision;
                r.recall = a.episode_recall;
                r.f1 = a.episode_f1;
            } else {
                r.precision = a.precision;
                r.recall = a.recall;
                r.f1 = a.f1;
            }
            rows.push_back(r);
        }
    return rows;
}

namespace {

/// Display width in code points (the sentinel is one column, three bytes).
std::size_t width(const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80 ? 1 : 0;
    return w;
}

std::string pad(const std::string& s, std::size_t w, bool left) {
    const std::size_t n = width(s);
    if (n >= w) return s;
    return left ? s + std::string(w - n, ' ') : std::string(w - n, ' ') + s;
}

}  // namespace

std::string emit_table(const std::vector<TableRow>& rows, TableFormat format) {
    if (rows.empty()) throw ContractViolation("no reports to tabulate");
    std::vector<ModelId> models;
    std::vector<std::pair<NoiseFamily, AttackKind>> groups;
    std::vector<DetectorKind> dets;
    for (const auto& r : rows) {
        if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
        const auto grp = std::make_pair(r.noise, r.attack);
        if (std::find(groups.begin(), groups.end(), grp) == groups.end()) groups.push_back(grp);
        if (std::find(dets.begin(), dets.end(), r.detector) == dets.end()) dets.push_back(r.detector);
    }
    std::sort(models.begin(), models.end());
    std::sort(groups.begin(), groups.end());
    std::sort(dets.begin(), dets.end());  // enum order: CUSUM SPRT BHT LogReg Transformer

    auto find = [&](ModelId m, DetectorKind d, NoiseFamily n, AttackKind a) -> const TableRow* {
        for (const auto& r : rows)
            if (r.model == m && r.detector == d && r.noise == n && r.attack == a) return &r;
        return nullptr;
    };

    std::vector<std::vector<std::string>> lines;
    std::vector<std::string> header{"model", "detector"};
    for (const auto& [n, a] : groups)
        for (const char* metric : {"P", "R", "F1"})
            header.push_back(to_string(n) + "/" + to_string(a) + "/" + metric);
    lines.push_back(header);
    for (auto m : models)
        for (auto d : dets) {
            bool any = false;
            std::vector<std::string> line{to_string(m), detect::detector_id(d)};
            for (const auto& [n, a] : groups) {
                const auto* r = find(m, d, n, a);
                any = any || r;
                line.push_back(format_metric(r ? r->precision : std::nullopt));
                line.push_back(format_metric(r ? r->recall : std::nullopt));
                line.push_back(format_metric(r ? r->f1 : std::nullopt));
            }
            if (any) lines.push_back(std::move(line));
        }

    std::ostringstream os;
    if (format == TableFormat::Csv) {
        for (const auto& line : lines) {
            for (std::size_t i = 0; i < line.size(); ++i) os << (i ? "," : "") << line[i];
            os << "\n";
        }
        return os.str();
    }
    std::vector<std::size_t> w(header.size(), 0);
    for (const auto& line : lines)
        for (std::size_t i = 0; i < line.size(); ++i) w[i] = std::max(w[i], width(line[i]));
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const auto& line = lines[li];
        if (li > 1 && line[0] != lines[li - 1][0]) os << "\n";
        for (std::size_t i = 0; i < line.size(); ++i) os << (i ? "  " : "") << pad(line[i], w[i], i < 2);
        os << "\n";
    }
    return os.str();
}

std::string cell_csv(const CellResult& cell) {
    std::ostringstream os;
    os << "detector,seed,tp,fp,fn,tn,precision,recall,f1,delay,false_alarm_rate,episode_tp,episode_fp,episode_fn,"
          "episode_tn\n";
    auto num = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", *v);
        return std::string(buf);
    };
    for (const auto& [det, seeds] : cell.per_seed)
        for (const auto& s : seeds)
            os << detect::detector_id(det) << "," << s.seed << "," << s.step.tp << "," << s.step.fp << ","
               << s.step.fn << "," << s.step.tn << "," << num(s.step.precision) << "," << num(s.step.recall) << ","
               << num(s.step.f1) << "," << num(s.step.delay) << "," << num(s.step.false_alarm_rate) << ","
               << s.episode.tp << "," << s.episode.fp << "," << s.episode.fn << "," << s.episode.tn << "\n";
    return os.str();
}

}  // namespace fdibench::eval
