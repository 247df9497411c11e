#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fdibench/config.hpp"
#include "fdibench/io.hpp"

namespace py = pybind11;
using namespace fdibench;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMat stack(const std::vector<Vec>& rows) {
    RowMat out(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return out;
}

std::vector<std::string> label_names(const std::vector<Label>& labels) {
    std::vector<std::string> out;
    out.reserve(labels.size());
    for (auto l : labels) out.push_back(to_string(l));
    return out;
}

py::object metric(const std::optional<double>& v) { return v ? py::object(py::float_(*v)) : py::none(); }

py::dict report(const eval::MetricsReport& r) {
    py::dict d;
    d["tp"] = r.tp;
    d["fp"] = r.fp;
    d["fn"] = r.fn;
    d["tn"] = r.tn;
    d["precision"] = metric(r.precision);
    d["recall"] = metric(r.recall);
    d["f1"] = metric(r.f1);
    d["delay"] = metric(r.delay);
    d["false_alarm_rate"] = metric(r.false_alarm_rate);
    return d;
}

config::Config cfg(const std::string& json) { return config::parse_config(json, "<python>"); }

py::dict simulate(const std::string& json) {
    const auto c = cfg(json);
    const auto run = sim::simulate_run(c.scenario.to_scenario());
    const auto seq = ekf::generate_residues(run, c.filter);
    std::vector<Vec> r;
    for (long k = 0; k < seq.size(); ++k) r.push_back(seq.input(k));
    std::vector<std::string> channels;
    for (auto t : seq.channels) channels.push_back(to_string(t));
    py::dict d;
    d["states"] = stack(run.states);
    d["inputs"] = stack(run.inputs);
    d["measurements"] = stack(run.measurements);
    d["labels"] = label_names(run.labels);
    d["residues"] = stack(r);
    d["channels"] = channels;
    d["first_usable"] = seq.first_usable();
    d["digest"] = io::sha256_hex(io::run_csv(run));
    return d;
}

py::dict detect_run(const std::string& json, const std::string& detector) {
    const auto c = cfg(json);
    const auto kind = detect::parse_detector_id(detector);
    const auto suite =
        eval::prepare_suite(c.scenario.model, c.scenario.noise, {kind}, c.scenario, c.filter, c.suite, c.seed);
    const auto seq = eval::simulate_residues(c.scenario, c.filter);
    const auto verdicts = eval::run_detector(kind, suite, seq);
    std::vector<bool> attacked;
    std::vector<double> scores;
    for (const auto& v : verdicts) {
        attacked.push_back(v.attacked());
        scores.push_back(v.score);
    }
    py::dict d;
    d["attacked"] = attacked;
    d["scores"] = scores;
    d["labels"] = label_names(seq.labels);
    d["metrics"] = report(eval::evaluate(verdicts, seq.labels, eval::evaluation_start(c.filter, c.suite)));
    return d;
}

py::dict resilient(const std::string& json) {
    const auto c = cfg(json);
    const auto run = sim::simulate_run(c.scenario.to_scenario());
    const auto suite = c.resilience_suite();
    auto det = eval::make_stream(c.resilience.detector, suite, run.scenario.model.meas_dim);
    const auto res = resilience::resilient_filter(run, *det, c.filter, c.resilience_config());
    py::list events;
    for (const auto& e : res.events)
        events.append(py::make_tuple(e.k, resilience::to_string(e.action), e.sensor, e.detector, e.score));
    py::dict d;
    d["estimates"] = stack(res.estimates);
    d["states"] = stack(run.states);
    d["masked"] = res.masked;
    d["events"] = events;
    return d;
}

std::string benchmark(const std::string& json, int jobs) {
    const auto c = cfg(json);
    const auto result = eval::run_benchmark(c.benchmark_spec(), jobs);
    return eval::emit_table(eval::table_rows(result), eval::TableFormat::Csv);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "fdibench native core";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<NumericalFailure>(m, "NumericalFailure", base.ptr());

    m.def("default_config", [] { return config::to_json(config::Config{}).dump(); },
          "Materialized default config as a JSON string.");
    m.def("normalize_config", [](const std::string& json) { return config::to_json(cfg(json)).dump(); },
          py::arg("config"));
    m.def("simulate", &simulate, py::arg("config"),
          "Simulate the configured scenario. Returns truth, measurements, labels and residues.");
    m.def("detect", &detect_run, py::arg("config"), py::arg("detector"),
          "Calibrate one detector for the configured group and run it on the configured scenario.");
    m.def("resilient", &resilient, py::arg("config"), "Closed-loop run with sensor masking.");
    m.def("benchmark", &benchmark, py::arg("config"), py::arg("jobs") = 1, "Per-step summary table as CSV.");

    m.def("metrics", [](long tp, long fp, long fn, long tn) { return report(eval::from_counts(tp, fp, fn, tn)); },
          py::arg("tp"), py::arg("fp"), py::arg("fn"), py::arg("tn"));
    m.def("format_metric",
          [](std::optional<double> v) { return eval::format_metric(v); }, py::arg("value"));
    m.def("symmetric_kl",
          [](const Vec& p, const Vec& q) {
              if (p.size() != q.size() || p.size() == 0) throw ContractViolation("distributions differ in length");
              return transformer::symmetric_kl(p.array().log(), q.array().log());
          },
          py::arg("p"), py::arg("q"));
    m.def("sha256", [](const py::bytes& b) { return io::sha256_hex(std::string(b)); }, py::arg("data"));
    m.def("derive_seed", [](std::uint64_t root, const std::string& name) { return derive_seed(root, name); },
          py::arg("root"), py::arg("name"));
}
