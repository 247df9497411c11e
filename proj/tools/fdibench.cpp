#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fdibench/config.hpp"
#include "fdibench/io.hpp"

namespace {

using namespace fdibench;
using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
    std::string config;
    std::string out;
    std::string corpus;
    std::string input;
    std::string checkpoint;
    std::string thresholds;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    bool unlabeled = false;
};

config::Config load(const Options& o) {
    auto c = config::load_config(o.config);
    if (o.seed) c.apply_seed(*o.seed);
    return c;
}

void emit(const fs::path& path, const std::string& bytes) {
    io::atomic_write(path, bytes);
    std::cout << path.string() << " sha256=" << io::sha256_hex(bytes) << "\n";
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

int cmd_simulate(const Options& o) {
    const auto c = load(o);
    const auto run = sim::simulate_run(c.scenario.to_scenario());
    auto seq = ekf::generate_residues(run, c.filter);
    const fs::path out(o.out);
    const std::string run_bytes = io::run_csv(run);
    seq.source_digest = io::sha256_hex(run_bytes);

    json meta;
    meta["format_version"] = io::kFormatVersion;
    meta["config"] = config::to_json(c);
    meta["steps"] = run.size();
    meta["digest"] = seq.source_digest;
    emit(out / "run.csv", run_bytes);
    emit(out / "run.json", dump(meta));
    emit(out / "residues.csv", io::residues_csv(seq));
    emit(out / "residues.json", io::residues_json(seq, c.scenario.model, !o.unlabeled));

    if (c.resilience.enabled) {
        const auto suite = c.resilience_suite();
        auto det = eval::make_stream(c.resilience.detector, suite, seq.channel_count());
        const auto res = resilience::resilient_filter(run, *det, c.filter, c.resilience_config());
        emit(out / "events.csv", io::events_csv(res.events));
        long masked = 0;
        for (bool m : res.masked) masked += m ? 1 : 0;
        const long begin = std::min<long>(c.scenario.onset, run.size() - 1);
        std::printf("masked_steps=%ld events=%zu position_rmse_from_onset=%.6g\n", masked, res.events.size(),
                    resilience::position_rmse(res.estimates, run.states, begin, run.size()));
    }
    return 0;
}

struct Corpus {
    std::vector<io::ResidueFile> files;
    std::vector<fs::path> paths;
};

Corpus load_corpus(const std::string& dir) {
    Corpus c;
    c.paths = io::find_residue_files(dir);
    if (c.paths.empty()) throw IoError("no *residues.csv files under " + dir);
    for (const auto& p : c.paths) c.files.push_back(io::read_residues(p));
    return c;
}

bool all_clean(const ekf::ResidueSequence& s) {
    for (auto l : s.labels)
        if (l != Label::Clean) return false;
    return true;
}

int cmd_train(const Options& o) {
    const auto c = load(o);
    const auto corpus = load_corpus(o.corpus);
    auto hp = c.suite.hyper;
    hp.channels = corpus.files.front().sequence.channel_count();
    std::vector<transformer::TrainingSequence> data;
    for (const auto& f : corpus.files) {
        if (f.sequence.channel_count() != hp.channels)
            throw ConfigError("corpus mixes sequences with different channel counts");
        data.push_back({&f.sequence, f.labeled});
    }
    const auto res = transformer::train(hp, c.suite.train, data);
    std::string log = "epoch,rec,disc,cls,total\n";
    for (const auto& e : res.log)
        log += std::to_string(e.epoch) + "," + io::number(e.loss.rec) + "," + io::number(e.loss.disc) + "," +
               io::number(e.loss.cls) + "," + io::number(e.loss.total) + "\n";
    const fs::path out(o.out);
    emit(out, io::checkpoint_bytes(res.params));
    emit(out.string() + ".log.csv", log);
    return 0;
}

json thresholds_json(const eval::Suite& s) {
    json j;
    j["format_version"] = io::kFormatVersion;
    for (const auto& [det, cal] : s.calibration)
        j["achieved_rate"][detect::detector_id(det)] = cal.achieved_rate;
    if (s.calibration.count(detect::DetectorKind::Cusum)) j["CUSUM"] = s.cusum.threshold;
    if (s.calibration.count(detect::DetectorKind::Sprt)) j["SPRT"] = s.sprt.upper_override;
    if (s.calibration.count(detect::DetectorKind::Bht)) j["BHT"] = s.bht.threshold;
    if (s.calibration.count(detect::DetectorKind::Transformer)) j["Transformer"] = s.tau;
    if (s.calibration.count(detect::DetectorKind::LogReg)) {
        const auto& m = s.logreg;
        j["LogReg"] = {{"threshold", m.threshold},
                       {"history", m.history},
                       {"bias", m.bias},
                       {"weights", std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size())},
                       {"feature_mean", std::vector<double>(m.feature_mean.data(),
                                                            m.feature_mean.data() + m.feature_mean.size())},
                       {"feature_scale", std::vector<double>(m.feature_scale.data(),
                                                             m.feature_scale.data() + m.feature_scale.size())}};
    }
    return j;
}

Vec to_vec(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Suite from config defaults, overridden by a thresholds document.
eval::Suite suite_from(const config::Config& c, const Options& o, int channels) {
    eval::Suite s;
    s.cusum = c.suite.cusum;
    s.sprt = c.suite.sprt;
    s.bht = c.suite.bht;
    s.h_run = c.suite.h_run;
    if (!o.checkpoint.empty()) s.tf = io::read_checkpoint(o.checkpoint);
    if (o.thresholds.empty()) return s;
    json t;
    try {
        t = json::parse(io::read_file(o.thresholds));
        if (t.contains("CUSUM")) s.cusum.threshold = t["CUSUM"];
        if (t.contains("SPRT")) s.sprt.upper_override = t["SPRT"];
        if (t.contains("BHT")) s.bht.threshold = t["BHT"];
        if (t.contains("Transformer")) s.tau = t["Transformer"];
        if (t.contains("LogReg")) {
            const auto& l = t["LogReg"];
            s.logreg.channels = channels;
            s.logreg.threshold = l.at("threshold");
            s.logreg.history = l.at("history");
            s.logreg.bias = l.at("bias");
            s.logreg.weights = to_vec(l.at("weights"));
            s.logreg.feature_mean = to_vec(l.at("feature_mean"));
            s.logreg.feature_scale = to_vec(l.at("feature_scale"));
            if (s.logreg.weights.size() != s.logreg.feature_count())
                throw ConfigError(o.thresholds + ": LogReg weights do not match the channel count");
        }
    } catch (const json::exception& e) {
        throw ConfigError(o.thresholds + ": " + e.what());
    }
    return s;
}

double threshold_of(const eval::Suite& s, detect::DetectorKind k) {
    switch (k) {
        case detect::DetectorKind::Cusum: return s.cusum.threshold;
        case detect::DetectorKind::Sprt: return s.sprt.upper_override;
        case detect::DetectorKind::Bht: return s.bht.threshold;
        case detect::DetectorKind::LogReg: return s.logreg.threshold;
        case detect::DetectorKind::Transformer: return s.tau;
    }
    return 0.0;
}

int cmd_calibrate(const Options& o) {
    const auto c = load(o);
    const auto corpus = load_corpus(o.corpus);
    std::vector<const ekf::ResidueSequence*> clean, labeled;
    for (const auto& f : corpus.files) {
        if (all_clean(f.sequence)) clean.push_back(&f.sequence);
        else if (f.labeled) labeled.push_back(&f.sequence);
    }
    if (clean.empty()) throw ConfigError("calibration corpus has no clean sequences");
    const int m = clean.front()->channel_count();
    auto s = suite_from(c, o, m);
    const double target = c.suite.target_far;
    auto note = [&](detect::DetectorKind k, const detect::Calibration& cal) { s.calibration[k] = cal; };

    auto cal = detect::calibrate_cusum(clean, c.suite.cusum, target);
    s.cusum.threshold = cal.threshold;
    note(detect::DetectorKind::Cusum, cal);
    cal = detect::calibrate_sprt(clean, c.suite.sprt, target);
    s.sprt.upper_override = cal.threshold;
    note(detect::DetectorKind::Sprt, cal);
    cal = detect::calibrate_bht(clean, c.suite.bht, target);
    s.bht.threshold = cal.threshold;
    note(detect::DetectorKind::Bht, cal);
    if (!labeled.empty()) {
        s.logreg = detect::train_logreg(labeled, c.suite.logreg, c.suite.logreg_history);
        cal = detect::calibrate_logreg(clean, s.logreg, target);
        s.logreg.threshold = cal.threshold;
        note(detect::DetectorKind::LogReg, cal);
    }
    if (s.tf) {
        cal = transformer::calibrate_tau(*s.tf, clean, c.suite.h_run, target);
        s.tau = cal.threshold;
        note(detect::DetectorKind::Transformer, cal);
    }
    for (const auto& [k, v] : s.calibration)
        std::cout << detect::detector_id(k) << " threshold=" << io::number(threshold_of(s, k))
                  << " achieved_rate=" << io::number(v.achieved_rate) << "\n";
    emit(o.out, dump(thresholds_json(s)));
    return 0;
}

int cmd_detect(const Options& o) {
    const auto c = load(o);
    fs::path input(o.input);
    if (input.filename() == "run.csv") input = input.parent_path() / "residues.csv";
    const auto file = io::read_residues(input);
    const auto& seq = file.sequence;
    const auto kind = c.detector;
    if (kind == detect::DetectorKind::Transformer && o.checkpoint.empty())
        throw ConfigError("the Transformer detector needs --checkpoint");
    if ((kind == detect::DetectorKind::Transformer || kind == detect::DetectorKind::LogReg) && o.thresholds.empty())
        throw ConfigError("the " + detect::detector_id(kind) + " detector needs --thresholds from `calibrate`");
    const auto suite = suite_from(c, o, seq.channel_count());
    if (kind == detect::DetectorKind::LogReg && suite.logreg.channels == 0)
        throw ConfigError("thresholds file has no LogReg model");

    const auto verdicts = eval::run_detector(kind, suite, seq);
    std::optional<long> onset;
    AttackKind cls = AttackKind::None;
    for (const auto& v : verdicts)
        if (v.attacked()) {
            onset = v.k;
            cls = v.attack_class;
            break;
        }
    std::optional<long> delay;
    bool attacked_labels = !all_clean(seq);
    if (attacked_labels) delay = eval::detection_delay(verdicts, seq.labels);

    long alarms = 0;
    for (const auto& v : verdicts) alarms += v.attacked() ? 1 : 0;
    emit(fs::path(o.out) / "verdicts.csv", io::verdicts_csv(verdicts, detect::detector_id(kind)));
    std::cout << "attacked_steps=" << alarms << "\n";
    std::cout << "onset=" << (onset ? std::to_string(*onset) : "none")
              << " delay=" << (delay ? std::to_string(*delay) : "none")
              << " class=" << (cls == AttackKind::None ? "none" : to_string(cls)) << "\n";
    return 0;
}

int cmd_benchmark(const Options& o) {
    const auto c = load(o);
    const fs::path out(o.out);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out.string());
    emit(out / "spec.json", dump(config::to_json(c)));

    const auto result = eval::run_benchmark(c.benchmark_spec(), o.jobs);
    for (const auto& cell : result.cells) {
        std::string name = cell.key.name();
        for (auto& ch : name)
            if (ch == '/') ch = '_';
        if (cell.ok()) emit(out / "cells" / (name + ".csv"), eval::cell_csv(cell));
    }

    const auto step_rows = eval::table_rows(result);
    const auto ep_rows = eval::table_rows(result, true);
    std::string text;
    if (!step_rows.empty()) {
        emit(out / "summary.csv", eval::emit_table(step_rows, eval::TableFormat::Csv));
        emit(out / "summary_episode.csv", eval::emit_table(ep_rows, eval::TableFormat::Csv));
        text += "per-step metrics (headline)\n\n" + eval::emit_table(step_rows, eval::TableFormat::Text);
        text += "\nper-episode metrics\n\n" + eval::emit_table(ep_rows, eval::TableFormat::Text);
    }
    if (!result.failures.empty()) {
        text += "\nfailed cells\n";
        for (const auto& f : result.failures) text += "  " + f + "\n";
    }
    emit(out / "summary.txt", text);
    std::cout << text;
    std::fprintf(stdout, "runtime_seconds=%.1f failed_cells=%zu\n", result.seconds, result.failures.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fdibench: FDI attack detection workbench"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub, bool out_required = true) {
        sub->add_option("--config", o.config, "config JSON")->required()->check(CLI::ExistingFile);
        auto* out = sub->add_option("--out", o.out, "output path");
        if (out_required) out->required();
        sub->add_option("--seed", o.seed, "root seed override");
    };
    auto* simulate = app.add_subcommand("simulate", "simulate a run and its EKF residues");
    common(simulate);
    simulate->add_flag("--unlabeled", o.unlabeled, "mark the residues as unlabeled for training");

    auto* train = app.add_subcommand("train", "train the transformer detector on a residue corpus");
    common(train);
    train->add_option("--corpus", o.corpus, "directory with *residues.csv files")->required();

    auto* calibrate = app.add_subcommand("calibrate", "calibrate detector thresholds on clean residues");
    common(calibrate);
    calibrate->add_option("--corpus", o.corpus, "directory with *residues.csv files")->required();
    calibrate->add_option("--checkpoint", o.checkpoint, "transformer checkpoint");

    auto* detect = app.add_subcommand("detect", "run the selected detector on a residue file");
    common(detect);
    detect->add_option("--input", o.input, "residues.csv (or run.csv next to it)")->required();
    detect->add_option("--checkpoint", o.checkpoint, "transformer checkpoint");
    detect->add_option("--thresholds", o.thresholds, "thresholds JSON written by calibrate");

    auto* bench = app.add_subcommand("benchmark", "run the benchmark grid");
    common(bench);
    bench->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*simulate) return cmd_simulate(o);
        if (*train) return cmd_train(o);
        if (*calibrate) return cmd_calibrate(o);
        if (*detect) return cmd_detect(o);
        if (*bench) return cmd_benchmark(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
