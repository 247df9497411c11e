#include "fdibench/ekf.hpp"

#include <Eigen/Eigenvalues>

#include <sstream>

namespace fdibench::ekf {

namespace {

Mat symmetrize(const Mat& P) { return 0.5 * (P + P.transpose()); }

std::vector<int> active_indices(const std::vector<bool>& active, int m) {
    if (static_cast<int>(active.size()) != m)
        throw ContractViolation("sensor mask length does not match measurement dimension");
    std::vector<int> idx;
    for (int i = 0; i < m; ++i)
        if (active[i]) idx.push_back(i);
    return idx;
}

std::string describe_block(const std::vector<int>& idx, const std::vector<std::string>& names) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (i) os << ",";
        if (static_cast<std::size_t>(idx[i]) < names.size())
            os << names[idx[i]];
        else
            os << "ch" << idx[i];
    }
    os << "]";
    return os.str();
}

std::vector<std::string> channel_names(const sim::DynamicsModel& model) {
    static const char* axes[] = {"x", "y", "z"};
    std::vector<std::string> names;
    int gps = 0, cam = 0;
    for (auto tag : model.channels) {
        switch (tag) {
            case ChannelTag::GpsPos: names.push_back(std::string("gps_") + axes[gps++ % 3]); break;
            case ChannelTag::CameraPos: names.push_back(std::string("camera_") + axes[cam++ % 3]); break;
            case ChannelTag::MagHeading: names.push_back("mag_heading"); break;
        }
    }
    return names;
}

}  // namespace

Mat inverse_sqrt(const Mat& S) {
    Eigen::SelfAdjointEigenSolver<Mat> eig(S);
    if (eig.info() != Eigen::Success) throw NumericalFailure("eigendecomposition of innovation covariance failed");
    const Vec inv_sqrt = eig.eigenvalues().unaryExpr([](double l) { return 1.0 / std::sqrt(std::max(l, 1e-12)); });
    return eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
}

EkfState propagate(const EkfState& est, const Vec& x_pred, const Mat& F, const Mat& Q) {
    if (!F.allFinite()) throw NumericalFailure("transition Jacobian has non-finite entries");
    EkfState out;
    out.x = x_pred;
    out.P = symmetrize(F * est.P * F.transpose() + Q);
    return out;
}

UpdateResult correct(const EkfState& prior, const Vec& innovation, const Mat& H, const Mat& R,
                     const std::vector<bool>& active, const std::vector<std::string>& names) {
    const auto m = static_cast<int>(innovation.size());
    if (H.rows() != m || R.rows() != m || R.cols() != m || H.cols() != prior.x.size())
        throw ContractViolation("measurement model dimensions do not match");
    const auto idx = active_indices(active, m);

    UpdateResult out;
    out.residue.r = innovation;
    out.residue.S = symmetrize(H * prior.P * H.transpose() + R);
    out.residue.r_norm = inverse_sqrt(out.residue.S) * innovation;

    out.posterior = prior;
    if (idx.empty()) return out;

    const auto na = static_cast<Eigen::Index>(idx.size());
    const auto n = prior.x.size();
    Mat Ha(na, n);
    Mat Ra(na, na);
    Vec ra(na);
    for (Eigen::Index i = 0; i < na; ++i) {
        Ha.row(i) = H.row(idx[i]);
        ra[i] = innovation[idx[i]];
        for (Eigen::Index j = 0; j < na; ++j) Ra(i, j) = R(idx[i], idx[j]);
    }
    const Mat Sa = symmetrize(Ha * prior.P * Ha.transpose() + Ra);
    Eigen::LLT<Mat> llt(Sa);
    if (llt.info() != Eigen::Success || !Sa.allFinite())
        throw NumericalFailure("innovation covariance is singular on channel block " + describe_block(idx, names));

    const Mat K = llt.solve(Ha * prior.P).transpose();
    const Mat IKH = Mat::Identity(n, n) - K * Ha;
    out.posterior.x = prior.x + K * ra;
    out.posterior.P = symmetrize(IKH * prior.P * IKH.transpose() + K * Ra * K.transpose());
    return out;
}

EkfState ekf_predict(const sim::DynamicsModel& model, const EkfState& est, const Vec& u, const Mat& Q) {
    Vec x_pred = sim::transition(model, est.x, u);
    if (model.id == ModelId::ModelII)
        for (int i = sim::kEuler; i < sim::kEuler + 3; ++i) x_pred[i] = wrap_angle(x_pred[i]);
    return propagate(est, x_pred, sim::transition_jacobian(model, est.x, u), Q);
}

std::pair<EkfState, ResidueSample> ekf_update(const sim::DynamicsModel& model, const EkfState& est, const Vec& y,
                                              const Mat& R, const std::vector<bool>& active_mask) {
    if (y.size() != model.meas_dim) throw ContractViolation("measurement length does not match model");
    const Vec innovation = sim::measurement_difference(model, y, sim::observe(model, est.x));
    auto res = correct(est, innovation, sim::observation_jacobian(model), R, active_mask, channel_names(model));
    if (model.id == ModelId::ModelII)
        for (int i = sim::kEuler; i < sim::kEuler + 3; ++i) res.posterior.x[i] = wrap_angle(res.posterior.x[i]);
    return {std::move(res.posterior), std::move(res.residue)};
}

ResidueFilter::ResidueFilter(sim::DynamicsModel model, const sim::NoiseModel& noise, const Vec& x0,
                             const FilterConfig& cfg)
    : model_(std::move(model)), Q_(noise.process_covariance()), R_(noise.measurement_covariance()), cfg_(cfg) {
    est_.x = x0;
    if (cfg.init_offset.size() == x0.size()) est_.x += cfg.init_offset;
    else if (cfg.init_offset.size() != 0)
        throw ContractViolation("filter init offset length does not match state dimension");
    est_.P = cfg.initial_covariance * Mat::Identity(x0.size(), x0.size());
}

ResidueSample ResidueFilter::update(long k, const Vec& y, const std::vector<bool>& active_mask) {
    auto [post, sample] = ekf_update(model_, est_, y, R_, active_mask);
    est_ = std::move(post);
    sample.k = k;
    sample.warmup = k < cfg_.warmup_steps;
    return sample;
}

void ResidueFilter::predict(const Vec& u) { est_ = ekf_predict(model_, est_, u, Q_); }

ResidueSequence generate_residues(const sim::RunRecord& run, const FilterConfig& cfg) {
    ResidueSequence seq;
    const auto& model = run.scenario.model;
    seq.channels = model.channels;
    seq.warmup_steps = cfg.warmup_steps;
    seq.normalized = cfg.normalized;
    if (run.size() == 0) return seq;
    if (run.states.size() != run.labels.size() || run.measurements.size() != run.labels.size() ||
        run.inputs.size() != run.labels.size())
        throw ContractViolation("run record arrays have unequal lengths");

    ResidueFilter filter(model, run.scenario.noise, run.states.front(), cfg);
    const std::vector<bool> all(model.meas_dim, true);
    seq.samples.reserve(run.labels.size());
    for (long k = 0; k < run.size(); ++k) {
        seq.samples.push_back(filter.update(k, run.measurements[k], all));
        filter.predict(run.inputs[k]);
    }
    seq.labels = run.labels;
    return seq;
}

}  // namespace fdibench::ekf
