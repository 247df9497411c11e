#include <doctest.h>

#include "fdibench/resilience.hpp"

using namespace fdibench;
using namespace fdibench::resilience;

namespace {

detect::DetectorVerdict verdict(long k, bool attacked) {
    detect::DetectorVerdict v;
    v.k = k;
    v.decision = attacked ? detect::Decision::Attacked : detect::Decision::Clean;
    v.score = attacked ? 1.0 : 0.0;
    return v;
}

// Scripted detector: attacked on [from, to).
class Scripted : public detect::StreamDetector {
public:
    Scripted(long from, long to) : from_(from), to_(to) {}
    detect::DetectorVerdict step(long k, const Vec&) override { return verdict(k, k >= from_ && k < to_); }
    std::string id() const override { return "Scripted"; }

private:
    long from_, to_;
};

}  // namespace

TEST_CASE("only gps is maskable") {
    const auto st = ResilienceState::make(sim::DynamicsModel::make(ModelId::ModelII), 50);
    REQUIRE(st.sensors.size() == 3);
    CHECK(st.sensors[0].name == "gps");
    CHECK(st.sensors[0].maskable);
    CHECK(st.sensors[0].channels == std::vector<int>{0, 1, 2});
    CHECK_FALSE(st.sensors[1].maskable);
    CHECK_FALSE(st.sensors[2].maskable);
    CHECK(st.mask.masked_count() == 0);
    CHECK(ResilienceState::make(sim::DynamicsModel::make(ModelId::ModelI)).sensors.size() == 2);
}

TEST_CASE("mask on the first attacked verdict, unmask on the n-th consecutive clean one") {
    auto st = ResilienceState::make(sim::DynamicsModel::make(ModelId::ModelI), 50);
    long masked_at = -1, unmasked_at = -1;
    for (long k = 0; k < 600; ++k) {
        const bool attacked = k >= 200 && k < 400;
        const bool before = st.any_masked();
        st = apply_verdict(std::move(st), verdict(k, attacked), k, "CUSUM");
        if (!before && st.any_masked() && masked_at < 0) masked_at = k;
        if (before && !st.any_masked()) unmasked_at = k;
    }
    CHECK(masked_at == 200);
    CHECK(unmasked_at == 449);
    REQUIRE(st.log.size() == 2);
    CHECK(st.log[0].action == Action::Mask);
    CHECK(st.log[0].k == 200);
    CHECK(st.log[0].sensor == "gps");
    CHECK(st.log[0].detector == "CUSUM");
    CHECK(st.log[1].action == Action::Unmask);
    CHECK(st.log[1].k == 449);
    CHECK(to_string(Action::Unmask) == "unmask");
}

TEST_CASE("an attacked verdict resets the clean counter") {
    auto st = ResilienceState::make(sim::DynamicsModel::make(ModelId::ModelI), 10);
    long k = 0;
    st = apply_verdict(std::move(st), verdict(k++, true), 0);
    for (int i = 0; i < 9; ++i) st = apply_verdict(std::move(st), verdict(k, false), k), ++k;
    CHECK(st.any_masked());
    st = apply_verdict(std::move(st), verdict(k, true), k), ++k;
    for (int i = 0; i < 9; ++i) st = apply_verdict(std::move(st), verdict(k, false), k), ++k;
    CHECK(st.any_masked());
    st = apply_verdict(std::move(st), verdict(k, false), k), ++k;
    CHECK_FALSE(st.any_masked());
    CHECK(st.log.size() == 2);  // repeated attacked verdicts do not log again
}

TEST_CASE("verdict steps must increase") {
    auto st = ResilienceState::make(sim::DynamicsModel::make(ModelId::ModelI), 10);
    st = apply_verdict(std::move(st), verdict(5, false), 5);
    CHECK_THROWS_AS(apply_verdict(st, verdict(5, false), 5), ContractViolation);
    CHECK_THROWS_AS(apply_verdict(st, verdict(4, false), 4), ContractViolation);
}

TEST_CASE("masked steps equal a gps-free filter step") {
    sim::Scenario sc;
    sc.steps = 600;
    sc.seed = 12;
    sc.noise = sim::NoiseModel::from_std(NoiseFamily::Gaussian, Vec::Constant(6, 0.01),
                                         (Vec(6) << 0.5, 0.5, 0.5, 0.05, 0.05, 0.05).finished());
    const auto run = sim::simulate_run(sc);
    ekf::FilterConfig fc;
    ResilienceConfig rc;
    rc.n_clean = 50;
    Scripted det(200, 400);
    const auto res = resilient_filter(run, det, fc, rc);
    REQUIRE(res.events.size() == 2);
    CHECK(res.events[0].k == 200);
    CHECK(res.events[1].k == 449);
    CHECK_FALSE(res.masked[200]);  // the mask applies from the next update on
    CHECK(res.masked[201]);
    CHECK(res.masked[449]);
    CHECK_FALSE(res.masked[450]);

    // Replay: before each masked update, build the gps-free measurement model
    // and correct with it directly.
    const auto& model = run.scenario.model;
    const Mat Q = run.scenario.noise.process_covariance();
    const Mat R = run.scenario.noise.measurement_covariance();
    const Mat H = sim::observation_jacobian(model);
    ekf::EkfState est{run.states.front(), fc.initial_covariance * Mat::Identity(6, 6)};
    int masked_steps = 0;
    for (long k = 0; k < run.size(); ++k) {
        const Vec innov = run.measurements[k] - sim::observe(model, est.x);
        if (res.masked[k]) {
            ++masked_steps;
            est = ekf::correct(est, innov.tail(3), H.bottomRows(3), R.bottomRightCorner(3, 3), {true, true, true})
                      .posterior;
        } else {
            est = ekf::correct(est, innov, H, R, std::vector<bool>(6, true)).posterior;
        }
        CHECK(est.x == res.estimates[k]);
        est = ekf::ekf_predict(model, est, run.inputs[k], Q);
    }
    CHECK(masked_steps == 249);

    // shadow residues keep every channel during masking
    CHECK(res.residues.samples[300].r.size() == 6);
}

TEST_CASE("disabled resilience never masks") {
    sim::Scenario sc;
    sc.steps = 300;
    sc.noise = sim::NoiseModel::from_std(NoiseFamily::Gaussian, Vec::Constant(6, 0.01), Vec::Constant(6, 0.1));
    Scripted det(100, 200);
    ResilienceConfig rc;
    rc.enabled = false;
    const auto res = resilient_run(sc, det, ekf::FilterConfig{}, rc);
    CHECK(res.events.empty());
    for (bool m : res.masked) CHECK_FALSE(m);
    CHECK(res.verdicts[150].attacked());
    CHECK_FALSE(res.verdicts[10].attacked());  // warm-up is not scored
}

TEST_CASE("position rmse") {
    std::vector<Vec> est{Vec::Zero(6), Vec::Zero(6)}, truth{Vec::Zero(6), Vec::Zero(6)};
    truth[1][0] = 3.0;
    truth[1][1] = 4.0;
    CHECK(position_rmse(est, truth, 0, 2) == doctest::Approx(std::sqrt(12.5)));
    CHECK(position_rmse(est, truth, 1, 2) == doctest::Approx(5.0));
    CHECK_THROWS_AS(position_rmse(est, truth, 2, 2), ContractViolation);
}
