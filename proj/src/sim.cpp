#include "fdibench/sim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fdibench {

std::string to_string(ModelId id) { return id == ModelId::ModelI ? "ModelI" : "ModelII"; }

std::string to_string(NoiseFamily f) {
    switch (f) {
        case NoiseFamily::Gaussian: return "Gaussian";
        case NoiseFamily::Exponential: return "Exponential";
        case NoiseFamily::Laplacian: return "Laplacian";
    }
    return "?";
}

std::string to_string(AttackKind a) {
    switch (a) {
        case AttackKind::None: return "None";
        case AttackKind::AttackI: return "AttackI";
        case AttackKind::AttackII: return "AttackII";
    }
    return "?";
}

std::string to_string(Label l) {
    switch (l) {
        case Label::Clean: return "clean";
        case Label::AttackI: return "AttackI";
        case Label::AttackII: return "AttackII";
    }
    return "?";
}

std::string to_string(ChannelTag t) {
    switch (t) {
        case ChannelTag::GpsPos: return "gps_pos";
        case ChannelTag::CameraPos: return "camera_pos";
        case ChannelTag::MagHeading: return "mag_heading";
    }
    return "?";
}

ModelId parse_model_id(const std::string& s) {
    if (s == "ModelI") return ModelId::ModelI;
    if (s == "ModelII") return ModelId::ModelII;
    throw ConfigError("unknown model id '" + s + "' (expected ModelI or ModelII)");
}

NoiseFamily parse_noise_family(const std::string& s) {
    if (s == "Gaussian") return NoiseFamily::Gaussian;
    if (s == "Exponential") return NoiseFamily::Exponential;
    if (s == "Laplacian") return NoiseFamily::Laplacian;
    throw ConfigError("unknown noise family '" + s + "'");
}

AttackKind parse_attack_kind(const std::string& s) {
    if (s == "None") return AttackKind::None;
    if (s == "AttackI") return AttackKind::AttackI;
    if (s == "AttackII") return AttackKind::AttackII;
    throw ConfigError("unknown attack id '" + s + "'");
}

Label parse_label(const std::string& s) {
    if (s == "clean") return Label::Clean;
    if (s == "AttackI") return Label::AttackI;
    if (s == "AttackII") return Label::AttackII;
    throw ContractViolation("unknown label '" + s + "'");
}

double wrap_angle(double a) {
    double w = std::remainder(a, 2.0 * M_PI);
    if (w <= -M_PI) w += 2.0 * M_PI;
    return w;
}

namespace sim {

namespace {

void require_dim(const Vec& v, int expected, const char* what) {
    if (v.size() != expected) {
        std::ostringstream os;
        os << what << ": expected length " << expected << ", got " << v.size();
        throw ContractViolation(os.str());
    }
}

void require_finite(const Vec& v, const char* what) {
    if (!v.allFinite()) throw InvalidState(std::string(what) + " contains non-finite entries");
}

Eigen::Vector3d thrust_direction(double roll, double pitch, double yaw) {
    const double cr = std::cos(roll), sr = std::sin(roll);
    const double cp = std::cos(pitch), sp = std::sin(pitch);
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    return {cy * sp * cr + sy * sr, sy * sp * cr - cy * sr, cp * cr};
}

}  // namespace

DynamicsModel DynamicsModel::make(ModelId id, double dt) {
    if (!(dt > 0.0)) throw ContractViolation("dt must be positive");
    DynamicsModel m;
    m.id = id;
    m.dt = dt;
    if (id == ModelId::ModelI) {
        m.state_dim = 6;
        m.input_dim = 3;
        m.meas_dim = 6;
        m.channels = {ChannelTag::GpsPos,    ChannelTag::GpsPos,    ChannelTag::GpsPos,
                      ChannelTag::CameraPos, ChannelTag::CameraPos, ChannelTag::CameraPos};
    } else {
        m.state_dim = 12;
        m.input_dim = 4;
        m.meas_dim = 7;
        m.channels = {ChannelTag::GpsPos,    ChannelTag::GpsPos,    ChannelTag::GpsPos,    ChannelTag::CameraPos,
                      ChannelTag::CameraPos, ChannelTag::CameraPos, ChannelTag::MagHeading};
    }
    return m;
}

std::vector<int> DynamicsModel::gps_channels() const {
    std::vector<int> out;
    for (int i = 0; i < meas_dim; ++i)
        if (is_gps(i)) out.push_back(i);
    return out;
}

Vec transition(const DynamicsModel& model, const Vec& x, const Vec& u) {
    require_dim(x, model.state_dim, "state");
    require_dim(u, model.input_dim, "control input");
    const double dt = model.dt;
    Vec next = x;
    if (model.id == ModelId::ModelI) {
        next.segment<3>(0) += dt * x.segment<3>(3);
        next.segment<3>(3) += dt * u.segment<3>(0);
        return next;
    }

    const double roll = x[kEuler], pitch = x[kEuler + 1], yaw = x[kEuler + 2];
    const double wp = x[kRates], wq = x[kRates + 1], wr = x[kRates + 2];
    const double thrust = u[0];

    next.segment<3>(kPos) += dt * x.segment<3>(kVel);

    Eigen::Vector3d accel = thrust_direction(roll, pitch, yaw) * (thrust / model.mass);
    accel.z() -= model.gravity;
    next.segment<3>(kVel) += dt * accel;

    const double sr = std::sin(roll), cr = std::cos(roll);
    const double tp = std::tan(pitch), cp = std::cos(pitch);
    next[kEuler] += dt * (wp + sr * tp * wq + cr * tp * wr);
    next[kEuler + 1] += dt * (cr * wq - sr * wr);
    next[kEuler + 2] += dt * (sr * wq + cr * wr) / cp;

    const auto& J = model.inertia;
    next[kRates] += dt * ((J.y() - J.z()) * wq * wr + u[1]) / J.x();
    next[kRates + 1] += dt * ((J.z() - J.x()) * wp * wr + u[2]) / J.y();
    next[kRates + 2] += dt * ((J.x() - J.y()) * wp * wq + u[3]) / J.z();
    return next;
}

Mat transition_jacobian(const DynamicsModel& model, const Vec& x, const Vec& u) {
    require_dim(x, model.state_dim, "state");
    require_dim(u, model.input_dim, "control input");
    const int n = model.state_dim;
    const double dt = model.dt;
    Mat F = Mat::Identity(n, n);
    if (model.id == ModelId::ModelI) {
        F.block<3, 3>(0, 3).diagonal().setConstant(dt);
        return F;
    }

    F.block<3, 3>(kPos, kVel).diagonal().setConstant(dt);

    const double roll = x[kEuler], pitch = x[kEuler + 1], yaw = x[kEuler + 2];
    const double wp = x[kRates], wq = x[kRates + 1], wr = x[kRates + 2];
    const double cr = std::cos(roll), sr = std::sin(roll);
    const double cp = std::cos(pitch), sp = std::sin(pitch);
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    const double a = u[0] / model.mass;

    // d(thrust direction)/d(roll, pitch, yaw)
    Eigen::Vector3d d_roll{-cy * sp * sr + sy * cr, -sy * sp * sr - cy * cr, -cp * sr};
    Eigen::Vector3d d_pitch{cy * cp * cr, sy * cp * cr, -sp * cr};
    Eigen::Vector3d d_yaw{-sy * sp * cr + cy * sr, cy * sp * cr + sy * sr, 0.0};
    F.block<3, 1>(kVel, kEuler) = dt * a * d_roll;
    F.block<3, 1>(kVel, kEuler + 1) = dt * a * d_pitch;
    F.block<3, 1>(kVel, kEuler + 2) = dt * a * d_yaw;

    const double tp = sp / cp;
    const double sec2 = 1.0 / (cp * cp);
    const double qs = sr * wq + cr * wr;  // appears in all three Euler rates
    const double qc = cr * wq - sr * wr;

    // roll rate = wp + tan(pitch) * qs
    F(kEuler, kEuler) += dt * tp * qc;
    F(kEuler, kEuler + 1) += dt * qs * sec2;
    F(kEuler, kRates) += dt;
    F(kEuler, kRates + 1) += dt * sr * tp;
    F(kEuler, kRates + 2) += dt * cr * tp;
    // pitch rate = qc
    F(kEuler + 1, kEuler) += dt * (-sr * wq - cr * wr);
    F(kEuler + 1, kRates + 1) += dt * cr;
    F(kEuler + 1, kRates + 2) += dt * -sr;
    // yaw rate = qs / cos(pitch)
    F(kEuler + 2, kEuler) += dt * qc / cp;
    F(kEuler + 2, kEuler + 1) += dt * qs * sp * sec2;
    F(kEuler + 2, kRates + 1) += dt * sr / cp;
    F(kEuler + 2, kRates + 2) += dt * cr / cp;

    const auto& J = model.inertia;
    const double cx = (J.y() - J.z()) / J.x();
    const double cyy = (J.z() - J.x()) / J.y();
    const double cz = (J.x() - J.y()) / J.z();
    F(kRates, kRates + 1) += dt * cx * wr;
    F(kRates, kRates + 2) += dt * cx * wq;
    F(kRates + 1, kRates) += dt * cyy * wr;
    F(kRates + 1, kRates + 2) += dt * cyy * wp;
    F(kRates + 2, kRates) += dt * cz * wq;
    F(kRates + 2, kRates + 1) += dt * cz * wp;

    if (!F.allFinite()) throw NumericalFailure("transition Jacobian has non-finite entries");
    return F;
}

Vec step_dynamics(const DynamicsModel& model, const Vec& x, const Vec& u, const Vec& w) {
    require_dim(x, model.state_dim, "state");
    require_dim(u, model.input_dim, "control input");
    require_dim(w, model.state_dim, "process noise");
    require_finite(x, "state");
    require_finite(u, "control input");
    require_finite(w, "process noise");
    Vec next = transition(model, x, u) + w;
    if (model.id == ModelId::ModelII)
        for (int i = kEuler; i < kEuler + 3; ++i) next[i] = wrap_angle(next[i]);
    return next;
}

Vec observe(const DynamicsModel& model, const Vec& x) {
    require_dim(x, model.state_dim, "state");
    Vec y(model.meas_dim);
    y.segment<3>(0) = x.segment<3>(kPos);
    y.segment<3>(3) = x.segment<3>(kPos);
    if (model.id == ModelId::ModelII) y[6] = x[kEuler + 2];
    return y;
}

Mat observation_jacobian(const DynamicsModel& model) {
    Mat H = Mat::Zero(model.meas_dim, model.state_dim);
    for (int i = 0; i < 3; ++i) {
        H(i, kPos + i) = 1.0;
        H(3 + i, kPos + i) = 1.0;
    }
    if (model.id == ModelId::ModelII) H(6, kEuler + 2) = 1.0;
    return H;
}

Vec measure(const DynamicsModel& model, const Vec& x, const Vec& v, const Vec& d) {
    require_dim(v, model.meas_dim, "measurement noise");
    require_dim(d, model.meas_dim, "attack vector");
    Vec y = observe(model, x) + v + d;
    return y;
}

Vec measurement_difference(const DynamicsModel& model, const Vec& y, const Vec& y_pred) {
    Vec r = y - y_pred;
    for (int i = 0; i < model.meas_dim; ++i)
        if (model.channels[i] == ChannelTag::MagHeading) r[i] = wrap_angle(r[i]);
    return r;
}

double native_scale_from_std(NoiseFamily family, double std_dev) {
    if (std_dev < 0.0 || !std::isfinite(std_dev)) throw ContractViolation("noise std must be finite and >= 0");
    switch (family) {
        case NoiseFamily::Gaussian: return std_dev;
        case NoiseFamily::Laplacian: return std_dev / std::sqrt(2.0);
        case NoiseFamily::Exponential:
            if (std_dev == 0.0) throw ContractViolation("exponential noise needs a positive std");
            return 1.0 / std_dev;
    }
    return std_dev;
}

double variance_of(NoiseFamily family, double s) {
    switch (family) {
        case NoiseFamily::Gaussian: return s * s;
        case NoiseFamily::Laplacian: return 2.0 * s * s;
        case NoiseFamily::Exponential: return 1.0 / (s * s);
    }
    return s * s;
}

NoiseModel NoiseModel::from_std(NoiseFamily family, const Vec& process_std, const Vec& measurement_std,
                                bool mean_subtract) {
    NoiseModel nm;
    nm.family = family;
    nm.mean_subtract = mean_subtract;
    nm.process_scale = process_std.unaryExpr([&](double s) { return native_scale_from_std(family, s); });
    nm.measurement_scale = measurement_std.unaryExpr([&](double s) { return native_scale_from_std(family, s); });
    return nm;
}

Mat NoiseModel::process_covariance() const {
    return process_scale.unaryExpr([&](double s) { return variance_of(family, s); }).asDiagonal();
}

Mat NoiseModel::measurement_covariance() const {
    Mat R = measurement_scale.unaryExpr([&](double s) { return variance_of(family, s); }).asDiagonal();
    for (Eigen::Index i = 0; i < R.rows(); ++i)
        if (!(R(i, i) > 0.0)) throw ContractViolation("measurement noise covariance must be positive definite");
    return R;
}

Vec sample_noise(NoiseFamily family, const Vec& scales, Rng& rng, bool mean_subtract) {
    if (scales.size() <= 0) throw ContractViolation("noise dimension must be positive");
    Vec out(scales.size());
    for (Eigen::Index i = 0; i < scales.size(); ++i) {
        const double s = scales[i];
        switch (family) {
            case NoiseFamily::Gaussian:
                if (s < 0.0) throw ContractViolation("gaussian std must be >= 0");
                out[i] = s * rng.normal();
                break;
            case NoiseFamily::Laplacian: {
                if (!(s > 0.0)) throw ContractViolation("laplacian scale must be positive");
                const double u = rng.uniform() - 0.5;
                const double mag = -s * std::log(1.0 - 2.0 * std::abs(u));
                out[i] = u < 0.0 ? -mag : mag;
                break;
            }
            case NoiseFamily::Exponential: {
                if (!(s > 0.0)) throw ContractViolation("exponential rate must be positive");
                double e = -std::log(rng.uniform_open_low()) / s;
                if (mean_subtract) e -= 1.0 / s;
                out[i] = e;
                break;
            }
        }
    }
    return out;
}

Vec sample_noise(NoiseFamily family, double scale, Rng& rng, int dim, bool mean_subtract) {
    if (dim <= 0) throw ContractViolation("noise dimension must be positive");
    return sample_noise(family, Vec::Constant(dim, scale), rng, mean_subtract);
}

void AttackModel::validate(const DynamicsModel& model) const {
    if (kind == AttackKind::None) return;
    if (static_cast<int>(mask.size()) != model.meas_dim)
        throw ContractViolation("attack mask length does not match measurement dimension");
    bool any = false;
    for (int i = 0; i < model.meas_dim; ++i) {
        if (!mask[i]) continue;
        any = true;
        if (!model.is_gps(i)) throw ContractViolation("attack mask may only select gps_pos channels");
    }
    if (!any) throw ContractViolation("attack mask selects no channel");
    if (start_step < 0) throw ContractViolation("attack start step must be >= 0");
    if (end_step >= 0 && end_step <= start_step) throw ContractViolation("attack end step must follow its start");
    const Vec& p = kind == AttackKind::AttackI ? bias : ramp_rate;
    if (p.size() != model.meas_dim) throw ContractViolation("attack parameter length does not match measurement dimension");
    for (int i = 0; i < model.meas_dim; ++i)
        if (mask[i] && p[i] == 0.0) throw ContractViolation("attack parameter must be nonzero on masked channels");
}

Vec generate_attack(const AttackModel& attack, long k) {
    if (k < 0) throw ContractViolation("step index must be >= 0");
    const auto m = static_cast<Eigen::Index>(attack.mask.size());
    Vec d = Vec::Zero(m);
    if (!attack.active_at(k)) return d;
    for (Eigen::Index i = 0; i < m; ++i) {
        if (!attack.mask[i]) continue;
        if (attack.kind == AttackKind::AttackI)
            d[i] = attack.bias[i];
        else
            d[i] = attack.ramp_rate[i] * static_cast<double>(k - attack.start_step);
    }
    return d;
}

Vec waypoint_controller(const DynamicsModel& model, const ControllerGains& gains, const Vec& x,
                        const Eigen::Vector3d& target) {
    const Eigen::Vector3d p = x.segment<3>(kPos);
    const Eigen::Vector3d v = x.segment<3>(kVel);
    const Eigen::Vector3d accel = gains.kp * (target - p) - gains.kd * v;
    if (model.id == ModelId::ModelI) return accel;

    const double yaw = x[kEuler + 2];
    const double g = model.gravity;
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    const double pitch_des = std::clamp((accel.x() * cy + accel.y() * sy) / g, -gains.max_tilt, gains.max_tilt);
    const double roll_des = std::clamp((accel.x() * sy - accel.y() * cy) / g, -gains.max_tilt, gains.max_tilt);
    const Eigen::Vector3d euler_des{roll_des, pitch_des, 0.0};

    const double tilt = std::cos(x[kEuler]) * std::cos(x[kEuler + 1]);
    Vec u(4);
    u[0] = std::clamp(model.mass * (g + accel.z()) / std::max(tilt, 0.5), 0.0, 4.0 * model.mass * g);
    for (int i = 0; i < 3; ++i) {
        const double err = wrap_angle(euler_des[i] - x[kEuler + i]);
        u[1 + i] = model.inertia[i] * (gains.kp_att * err - gains.kd_att * x[kRates + i]);
    }
    return u;
}

Eigen::Vector3d waypoint_at(const Scenario& scenario, long k) {
    if (scenario.waypoints.empty()) return Eigen::Vector3d::Zero();
    const long seg = std::max<long>(1, scenario.segment_steps);
    return scenario.waypoints[static_cast<std::size_t>((k / seg) % static_cast<long>(scenario.waypoints.size()))];
}

RunRecord simulate_run(const Scenario& scenario) {
    const auto& model = scenario.model;
    if (scenario.steps < 1) throw ContractViolation("run length T must be >= 1");
    if (scenario.noise.process_scale.size() != model.state_dim ||
        scenario.noise.measurement_scale.size() != model.meas_dim)
        throw ContractViolation("noise model dimensions do not match the dynamics model");
    scenario.attack.validate(model);

    RunRecord rec;
    rec.scenario = scenario;
    rec.states.reserve(scenario.steps);
    rec.inputs.reserve(scenario.steps);
    rec.measurements.reserve(scenario.steps);
    rec.labels.reserve(scenario.steps);

    Rng rng(scenario.seed);
    Vec x = Vec::Zero(model.state_dim);
    if (!scenario.waypoints.empty()) x.segment<3>(kPos) = scenario.waypoints.front();
    const auto& nm = scenario.noise;
    const Vec no_attack = Vec::Zero(model.meas_dim);

    for (long k = 0; k < scenario.steps; ++k) {
        if (!x.allFinite() || x.norm() > scenario.divergence_bound) {
            std::ostringstream os;
            os << "closed loop diverged at step " << k << " (|x| exceeds " << scenario.divergence_bound << ")";
            throw AbortedRun(os.str(), std::move(rec));
        }
        const Vec u = waypoint_controller(model, scenario.gains, x, waypoint_at(scenario, k));
        const Vec v = sample_noise(nm.family, nm.measurement_scale, rng, nm.mean_subtract);
        const Vec d = scenario.attack.kind == AttackKind::None ? no_attack : generate_attack(scenario.attack, k);
        Vec y = measure(model, x, v, d);
        rec.states.push_back(x);
        rec.inputs.push_back(u);
        rec.measurements.push_back(std::move(y));
        rec.labels.push_back(scenario.attack.active_at(k) ? label_of(scenario.attack.kind) : Label::Clean);

        const Vec w = sample_noise(nm.family, nm.process_scale, rng, nm.mean_subtract);
        x = step_dynamics(model, x, u, w);
    }
    return rec;
}

}  // namespace sim
}  // namespace fdibench
