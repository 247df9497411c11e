#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "fdibench/error.hpp"
#include "fdibench/rng.hpp"

namespace fdibench {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class ModelId { ModelI, ModelII };
enum class NoiseFamily { Gaussian, Exponential, Laplacian };
enum class AttackKind { None, AttackI, AttackII };
enum class ChannelTag { GpsPos, CameraPos, MagHeading };

/// Ground-truth label of a time step. Shares its numbering with AttackKind
/// so that `label_of(kind)` is a plain cast.
enum class Label { Clean = 0, AttackI = 1, AttackII = 2 };

std::string to_string(ModelId id);
std::string to_string(NoiseFamily f);
std::string to_string(AttackKind a);
std::string to_string(Label l);
std::string to_string(ChannelTag t);
ModelId parse_model_id(const std::string& s);
NoiseFamily parse_noise_family(const std::string& s);
AttackKind parse_attack_kind(const std::string& s);
Label parse_label(const std::string& s);

inline Label label_of(AttackKind a) { return static_cast<Label>(static_cast<int>(a)); }

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

namespace sim {

/// Quadrotor plant. ModelI is a 6-state double integrator driven by commanded
/// acceleration; ModelII is the 12-state rigid body
/// (position, velocity, roll/pitch/yaw, body rates) driven by total thrust
/// and body torques. Both are explicit-Euler discretized with step `dt`.
struct DynamicsModel {
    ModelId id = ModelId::ModelI;
    int state_dim = 6;
    int input_dim = 3;
    int meas_dim = 6;
    double dt = 0.02;
    double mass = 1.5;
    double gravity = 9.81;
    Eigen::Vector3d inertia{0.02, 0.02, 0.04};
    std::vector<ChannelTag> channels;

    static DynamicsModel make(ModelId id, double dt = 0.02);

    bool is_gps(int channel) const { return channels.at(channel) == ChannelTag::GpsPos; }
    std::vector<int> gps_channels() const;
};

// State layout for ModelII.
inline constexpr int kPos = 0;
inline constexpr int kVel = 3;
inline constexpr int kEuler = 6;
inline constexpr int kRates = 9;

/// Noise-free transition f(x, u) without angle wrapping.
Vec transition(const DynamicsModel& model, const Vec& x, const Vec& u);

/// Analytic Jacobian df/dx evaluated at (x, u).
Mat transition_jacobian(const DynamicsModel& model, const Vec& x, const Vec& u);

/// x_{k+1} = f(x_k, u_k) + w_k, attitude re-wrapped into (-pi, pi].
Vec step_dynamics(const DynamicsModel& model, const Vec& x, const Vec& u, const Vec& w);

/// Noise-free measurement g(x): gps position, camera position, and for
/// ModelII the magnetometer yaw.
Vec observe(const DynamicsModel& model, const Vec& x);

/// dg/dx; constant for both models since g is a selection.
Mat observation_jacobian(const DynamicsModel& model);

/// y = g(x) + v + d.
Vec measure(const DynamicsModel& model, const Vec& x, const Vec& v, const Vec& d);

/// Measurement difference with the heading channel wrapped.
Vec measurement_difference(const DynamicsModel& model, const Vec& y, const Vec& y_pred);

/// Noise families are parameterized natively: Gaussian by std sigma,
/// Laplacian by scale b, Exponential by rate lambda.
struct NoiseModel {
    NoiseFamily family = NoiseFamily::Gaussian;
    Vec process_scale;      // length n, native parameter per state component
    Vec measurement_scale;  // length m, native parameter per channel
    bool mean_subtract = true;

    /// Builds native parameters that reproduce the requested standard
    /// deviations for the chosen family.
    static NoiseModel from_std(NoiseFamily family, const Vec& process_std, const Vec& measurement_std,
                               bool mean_subtract = true);

    Mat process_covariance() const;      // Q
    Mat measurement_covariance() const;  // R
};

double native_scale_from_std(NoiseFamily family, double std_dev);
double variance_of(NoiseFamily family, double native_scale);

/// i.i.d. draws, one per entry of `scales`. Exponential draws are shifted by
/// 1/lambda when `mean_subtract` is set.
Vec sample_noise(NoiseFamily family, const Vec& scales, Rng& rng, bool mean_subtract = true);
Vec sample_noise(NoiseFamily family, double scale, Rng& rng, int dim, bool mean_subtract = true);

/// Additive sensor attack d_k. AttackI injects a constant bias, AttackII a
/// ramp alpha * (k - k0); both only on masked gps channels.
struct AttackModel {
    AttackKind kind = AttackKind::None;
    std::vector<bool> mask;  // length m
    long start_step = 0;
    long end_step = -1;  // first clean step after the attack; -1 = persistent
    Vec bias;       // AttackI, per channel (ignored where unmasked)
    Vec ramp_rate;  // AttackII, per channel per step

    /// Throws ContractViolation if the mask touches a non-gps channel or has
    /// the wrong length.
    void validate(const DynamicsModel& model) const;

    bool active_at(long k) const {
        return kind != AttackKind::None && k >= start_step && (end_step < 0 || k < end_step);
    }
};

Vec generate_attack(const AttackModel& attack, long k);

struct ControllerGains {
    double kp = 1.0;  // position
    double kd = 2.0;
    double kp_att = 36.0;  // ModelII attitude loop
    double kd_att = 10.0;
    double max_tilt = 0.35;
};

struct Scenario {
    DynamicsModel model = DynamicsModel::make(ModelId::ModelI);
    NoiseModel noise;
    AttackModel attack;
    long steps = 3000;
    std::uint64_t seed = 1;
    std::vector<Eigen::Vector3d> waypoints{{0, 0, 1}, {2, 0, 1}, {2, 2, 1}, {0, 2, 1}};
    long segment_steps = 500;
    ControllerGains gains;
    double divergence_bound = 1e3;
};

/// PD waypoint tracker acting on the true state.
Vec waypoint_controller(const DynamicsModel& model, const ControllerGains& gains, const Vec& x,
                        const Eigen::Vector3d& target);

Eigen::Vector3d waypoint_at(const Scenario& scenario, long k);

struct RunRecord {
    Scenario scenario;
    std::vector<Vec> states;        // truth x_k
    std::vector<Vec> inputs;        // u_k
    std::vector<Vec> measurements;  // attacked y_k
    std::vector<Label> labels;

    long size() const { return static_cast<long>(labels.size()); }
};

/// Thrown when the closed loop leaves the configured state-norm bound.
class AbortedRun : public Error {
public:
    AbortedRun(const std::string& what, RunRecord partial)
        : Error(what), partial_(std::move(partial)) {}
    const RunRecord& partial() const { return partial_; }

private:
    RunRecord partial_;
};

/// Closed-loop simulation. Per step k the measurement noise (m draws) is
/// sampled before the process noise (n draws), from one stream seeded by
/// `scenario.seed`.
RunRecord simulate_run(const Scenario& scenario);

}  // namespace sim
}  // namespace fdibench
