#include "fdibench/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fdibench::transformer {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double gelu(double x) {
    const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * x * (1.0 + t);
}

double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

/// Row-wise log-softmax.
Mat log_softmax_rows(const Mat& z) {
    Mat out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
        out.row(i) = z.row(i).array() - lse;
    }
    return out;
}

Vec log_softmax(const Vec& z) {
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    return z.array() - lse;
}

struct LnCache {
    Mat xhat;
    Vec inv_std;
};

Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, LnCache* cache) {
    const auto d = static_cast<double>(x.cols());
    Mat xhat(x.rows(), x.cols());
    Vec inv_std(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).sum() / d;
        const auto centered = x.row(i).array() - mean;
        const double var = centered.square().sum() / d;
        inv_std[i] = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(i) = centered * inv_std[i];
    }
    Mat y = (xhat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

Mat layer_norm_backward(const Mat& dy, const Vec& gain, const LnCache& c, Vec& dgain, Vec& dbias) {
    dgain += (dy.array() * c.xhat.array()).colwise().sum().transpose().matrix();
    dbias += dy.colwise().sum().transpose();
    const Mat dxhat = dy.array().rowwise() * gain.transpose().array();
    const auto d = static_cast<double>(dy.cols());
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double s1 = dxhat.row(i).sum();
        const double s2 = dxhat.row(i).dot(c.xhat.row(i));
        dx.row(i) = (c.inv_std[i] / d) * (d * dxhat.row(i).array() - s1 - c.xhat.row(i).array() * s2);
    }
    return dx;
}

Mat linear(const Mat& x, const Mat& w, const Vec& b) {
    Mat y = x * w.transpose();
    y.rowwise() += b.transpose();
    return y;
}

void linear_backward(const Mat& dy, const Mat& x, const Mat& w, Mat& dw, Vec& db, Mat* dx) {
    dw.noalias() += dy.transpose() * x;
    db += dy.colwise().sum().transpose();
    if (dx) dx->noalias() += dy * w;
}

struct PriorCache {
    Mat log_p;
    Mat p;
    Vec sigma;
};

PriorCache make_prior(const LayerParams& layer, int window) {
    PriorCache pc;
    pc.sigma = sigma_of(layer);
    Mat u(window, window);
    for (int i = 0; i < window; ++i) {
        const double s2 = pc.sigma[i] * pc.sigma[i];
        for (int j = 0; j < window; ++j) u(i, j) = -static_cast<double>((i - j) * (i - j)) / (2.0 * s2);
    }
    pc.log_p = log_softmax_rows(u);
    pc.p = pc.log_p.array().exp();
    return pc;
}

std::vector<PriorCache> make_priors(const ModelParams& params) {
    std::vector<PriorCache> priors;
    for (const auto& layer : params.layers) priors.push_back(make_prior(layer, params.hyper.window));
    return priors;
}

struct LayerTrace {
    Mat input;
    Mat q, k, v;
    std::vector<Mat> series;
    std::vector<Mat> log_series;
    Mat heads_out;
    LnCache ln1;
    Mat h1;
    Mat z1, act;
    LnCache ln2;
};

struct WindowTrace {
    std::vector<LayerTrace> layers;
    LnCache final_ln;
    Mat z;
    Vec pooled;
};

/// One encoder layer. Appends series associations for this layer to
/// `attention` and adds this layer's per-position discrepancy (summed over
/// heads, not yet averaged) to `disc_sum`.
Mat encoder_layer(const ModelParams& params, int l, const PriorCache& prior, const Mat& h, AttentionOutput& attention,
                  Vec& disc_sum, LayerTrace* trace) {
    const auto& hp = params.hyper;
    const auto& lp = params.layers[l];
    const int dh = hp.d_model / hp.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat q = linear(h, lp.Wq, lp.bq);
    Mat k = linear(h, lp.Wk, lp.bk);
    Mat v = linear(h, lp.Wv, lp.bv);
    Mat heads_out(h.rows(), hp.d_model);
    std::vector<Mat> series(hp.heads), log_series(hp.heads);
    for (int a = 0; a < hp.heads; ++a) {
        const Mat logits = q.middleCols(a * dh, dh) * k.middleCols(a * dh, dh).transpose() * inv_sqrt;
        if (!logits.allFinite()) throw NumericalFailure("attention logits are non-finite");
        log_series[a] = log_softmax_rows(logits);
        series[a] = log_series[a].array().exp();
        heads_out.middleCols(a * dh, dh).noalias() = series[a] * v.middleCols(a * dh, dh);
        for (int i = 0; i < hp.window; ++i)
            disc_sum[i] += 0.5 * ((prior.p.row(i) - series[a].row(i)).array() *
                                  (prior.log_p.row(i) - log_series[a].row(i)).array())
                                     .sum();
    }
    const Mat x1 = h + linear(heads_out, lp.Wo, lp.bo);
    LnCache ln1, ln2;
    Mat h1 = layer_norm(x1, lp.ln1_gain, lp.ln1_bias, &ln1);
    Mat z1 = linear(h1, lp.W1, lp.b1);
    Mat act = z1.unaryExpr([](double x) { return gelu(x); });
    const Mat x2 = h1 + linear(act, lp.W2, lp.b2);
    Mat out = layer_norm(x2, lp.ln2_gain, lp.ln2_bias, &ln2);

    attention.series.push_back(series);
    attention.prior.push_back(prior.p);
    if (trace) {
        trace->input = h;
        trace->q = std::move(q);
        trace->k = std::move(k);
        trace->v = std::move(v);
        trace->series = std::move(series);
        trace->log_series = std::move(log_series);
        trace->heads_out = std::move(heads_out);
        trace->ln1 = std::move(ln1);
        trace->h1 = std::move(h1);
        trace->z1 = std::move(z1);
        trace->act = std::move(act);
        trace->ln2 = std::move(ln2);
    }
    return out;
}

WindowOutput forward_window(const ModelParams& params, const std::vector<PriorCache>& priors, const Mat& x,
                            WindowTrace* trace) {
    const auto& hp = params.hyper;
    if (x.rows() != hp.window || x.cols() != hp.channels) {
        std::ostringstream os;
        os << "window is " << x.rows() << "x" << x.cols() << ", model expects " << hp.window << "x" << hp.channels;
        throw ContractViolation(os.str());
    }
    WindowOutput out;
    Vec disc_sum = Vec::Zero(hp.window);
    Mat h = embed_window(params, x);
    if (trace) trace->layers.resize(hp.layers);
    for (int l = 0; l < hp.layers; ++l)
        h = encoder_layer(params, l, priors[l], h, out.attention, disc_sum, trace ? &trace->layers[l] : nullptr);
    out.attention.discrepancy = disc_sum / static_cast<double>(hp.layers * hp.heads);

    LnCache lnf;
    Mat z = layer_norm(h, params.final_gain, params.final_bias, &lnf);
    out.reconstruction = linear(z, params.recon, params.recon_bias);
    const Vec pooled = z.colwise().mean().transpose();
    out.logits = params.cls * pooled + params.cls_bias;

    const Vec err = (out.reconstruction - x).array().square().rowwise().mean();
    const Vec weight = log_softmax(-out.attention.discrepancy).array().exp();
    out.scores = err.cwiseProduct(weight);

    if (trace) {
        trace->final_ln = std::move(lnf);
        trace->z = std::move(z);
        trace->pooled = pooled;
    }
    return out;
}

bool reconstructs(const Window& w, bool rec_on_attacked) {
    return rec_on_attacked || !w.labeled || w.cls == Label::Clean;
}

int reconstructed_count(const WindowBatch& batch, bool rec_on_attacked) {
    int n = 0;
    for (const auto& w : batch.windows) n += reconstructs(w, rec_on_attacked) ? 1 : 0;
    return n;
}

struct TermScales {
    bool rec_on_attacked = false;
    double rec = 0.0;   // multiplies (xhat - x)
    double disc = 0.0;  // per (window, position, layer, head) discrepancy
    double cls = 0.0;   // per labeled window
};

void backward_window(const ModelParams& params, const std::vector<PriorCache>& priors, const Window& w,
                     const WindowTrace& t, const WindowOutput& out, const TermScales& sc, ModelParams& g) {
    const auto& hp = params.hyper;
    const int hd = hp.d_model / hp.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto W = static_cast<double>(hp.window);

    const double rec_scale = reconstructs(w, sc.rec_on_attacked) ? sc.rec : 0.0;
    const Mat dxhat = rec_scale * (out.reconstruction - w.x);
    Mat dz = Mat::Zero(hp.window, hp.d_model);
    linear_backward(dxhat, t.z, params.recon, g.recon, g.recon_bias, &dz);

    if (w.labeled && sc.cls != 0.0) {
        Vec dlogits = log_softmax(out.logits).array().exp();
        dlogits[static_cast<int>(w.cls)] -= 1.0;
        dlogits *= sc.cls;
        g.cls.noalias() += dlogits * t.pooled.transpose();
        g.cls_bias += dlogits;
        const Vec dpooled = params.cls.transpose() * dlogits;
        dz.rowwise() += dpooled.transpose() / W;
    }

    Mat dh = layer_norm_backward(dz, params.final_gain, t.final_ln, g.final_gain, g.final_bias);

    for (int l = hp.layers - 1; l >= 0; --l) {
        const auto& lp = params.layers[l];
        auto& gl = g.layers[l];
        const auto& lt = t.layers[l];
        const auto& prior = priors[l];

        const Mat dx2 = layer_norm_backward(dh, lp.ln2_gain, lt.ln2, gl.ln2_gain, gl.ln2_bias);
        Mat dh1 = dx2;
        Mat dact = Mat::Zero(hp.window, hp.d_ff);
        linear_backward(dx2, lt.act, lp.W2, gl.W2, gl.b2, &dact);
        const Mat dz1 = dact.array() * lt.z1.unaryExpr([](double x) { return gelu_grad(x); }).array();
        linear_backward(dz1, lt.h1, lp.W1, gl.W1, gl.b1, &dh1);

        const Mat dx1 = layer_norm_backward(dh1, lp.ln1_gain, lt.ln1, gl.ln1_gain, gl.ln1_bias);
        Mat din = dx1;
        Mat dheads = Mat::Zero(hp.window, hp.d_model);
        linear_backward(dx1, lt.heads_out, lp.Wo, gl.Wo, gl.bo, &dheads);

        Mat dq = Mat::Zero(hp.window, hp.d_model);
        Mat dk = Mat::Zero(hp.window, hp.d_model);
        Mat dv = Mat::Zero(hp.window, hp.d_model);
        for (int a = 0; a < hp.heads; ++a) {
            const Mat& S = lt.series[a];
            const Mat& logS = lt.log_series[a];
            const auto dO = dheads.middleCols(a * hd, hd);
            const Mat dS = dO * lt.v.middleCols(a * hd, hd).transpose();
            dv.middleCols(a * hd, hd).noalias() += S.transpose() * dO;
            Mat dlogits = S.array() * (dS.colwise() - (dS.array() * S.array()).rowwise().sum().matrix()).array();

            if (sc.disc != 0.0) {
                const Mat log_ratio = logS - prior.log_p;  // log S - log P
                for (int i = 0; i < hp.window; ++i) {
                    const double kl_sp = (S.row(i).array() * log_ratio.row(i).array()).sum();
                    const double kl_ps = -(prior.p.row(i).array() * log_ratio.row(i).array()).sum();
                    // series branch (prior fixed): descend on +disc
                    dlogits.row(i).array() +=
                        sc.disc * 0.5 *
                        (S.row(i).array() - prior.p.row(i).array() +
                         S.row(i).array() * (log_ratio.row(i).array() - kl_sp));
                    // prior branch (series fixed): gradient of -disc
                    double dsigma = 0.0;
                    const double s = prior.sigma[i];
                    for (int j = 0; j < hp.window; ++j) {
                        const double du = 0.5 * (prior.p(i, j) - S(i, j) +
                                                 prior.p(i, j) * (-log_ratio(i, j) - kl_ps));
                        dsigma += du * static_cast<double>((i - j) * (i - j)) / (s * s * s);
                    }
                    gl.sigma_raw[i] -= sc.disc * dsigma * logistic(lp.sigma_raw[i]);
                }
            }
            dq.middleCols(a * hd, hd).noalias() += dlogits * lt.k.middleCols(a * hd, hd) * inv_sqrt;
            dk.middleCols(a * hd, hd).noalias() += dlogits.transpose() * lt.q.middleCols(a * hd, hd) * inv_sqrt;
        }
        linear_backward(dq, lt.input, lp.Wq, gl.Wq, gl.bq, &din);
        linear_backward(dk, lt.input, lp.Wk, gl.Wk, gl.bk, &din);
        linear_backward(dv, lt.input, lp.Wv, gl.Wv, gl.bv, &din);
        dh = std::move(din);
    }
    g.embed.noalias() += dh.transpose() * w.x;
    g.embed_bias += dh.colwise().sum().transpose();
}

LossBreakdown accumulate_loss(const WindowBatch& batch, const std::vector<WindowOutput>& outs,
                              const LossWeights& weights) {
    LossBreakdown lb;
    const auto B = static_cast<double>(batch.windows.size());
    int labeled = 0;
    for (std::size_t b = 0; b < outs.size(); ++b) {
        const auto& w = batch.windows[b];
        const auto& o = outs[b];
        if (reconstructs(w, weights.rec_on_attacked))
            lb.rec += (o.reconstruction - w.x).squaredNorm() / static_cast<double>(w.x.size());
        lb.disc += o.attention.discrepancy.mean();
        if (w.labeled) {
            ++labeled;
            lb.cls -= log_softmax(o.logits)[static_cast<int>(w.cls)];
        }
    }
    const int n_rec = reconstructed_count(batch, weights.rec_on_attacked);
    lb.rec = n_rec ? lb.rec / n_rec : 0.0;
    lb.disc /= B;
    lb.cls = labeled ? lb.cls / labeled : 0.0;
    lb.total = weights.rec * lb.rec + weights.disc * lb.disc + weights.cls * lb.cls;
    return lb;
}

void require_batch(const WindowBatch& batch) {
    if (batch.windows.empty()) throw ContractViolation("batch contains no windows");
}

void require_weights(const LossWeights& w) {
    if (w.rec < 0.0 || w.disc < 0.0 || w.cls < 0.0) throw ContractViolation("loss weights must be >= 0");
}

void fill_uniform(Mat& m, double bound, Rng& rng) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
}

}  // namespace

// ---------------------------------------------------------------- params

void Hyper::validate() const {
    if (window < 2 || channels < 1 || d_model < 1 || heads < 1 || layers < 1 || d_ff < 1)
        throw ContractViolation("transformer hyperparameters must be positive (window >= 2)");
    if (d_model % heads != 0) throw ContractViolation("d_model must be divisible by the head count");
}

Mat sinusoidal_encoding(int window, int d_model) {
    Mat pe(window, d_model);
    for (int pos = 0; pos < window; ++pos)
        for (int i = 0; i < d_model; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d_model);
            pe(pos, i) = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
        }
    return pe;
}

Vec sigma_of(const LayerParams& layer) { return layer.sigma_raw.unaryExpr([](double r) { return softplus(r); }); }

ModelParams ModelParams::init(const Hyper& hp) {
    hp.validate();
    ModelParams p;
    p.hyper = hp;
    const int d = hp.d_model;
    Rng rng(hp.seed);
    const double bd = 1.0 / std::sqrt(static_cast<double>(d));

    p.embed.resize(d, hp.channels);
    fill_uniform(p.embed, 1.0 / std::sqrt(static_cast<double>(hp.channels)), rng);
    p.embed_bias = Vec::Zero(d);
    p.positional = sinusoidal_encoding(hp.window, d);

    const double sigma0 = hp.window / 4.0;
    const double raw0 = sigma0 > 30.0 ? sigma0 : std::log(std::expm1(sigma0));
    for (int l = 0; l < hp.layers; ++l) {
        LayerParams lp;
        for (Mat* m : {&lp.Wq, &lp.Wk, &lp.Wv, &lp.Wo}) {
            m->resize(d, d);
            fill_uniform(*m, bd, rng);
        }
        lp.bq = lp.bk = lp.bv = lp.bo = Vec::Zero(d);
        lp.sigma_raw = Vec::Constant(hp.window, raw0);
        lp.W1.resize(hp.d_ff, d);
        fill_uniform(lp.W1, bd, rng);
        lp.b1 = Vec::Zero(hp.d_ff);
        lp.W2.resize(d, hp.d_ff);
        fill_uniform(lp.W2, 1.0 / std::sqrt(static_cast<double>(hp.d_ff)), rng);
        lp.b2 = Vec::Zero(d);
        lp.ln1_gain = lp.ln2_gain = Vec::Ones(d);
        lp.ln1_bias = lp.ln2_bias = Vec::Zero(d);
        p.layers.push_back(std::move(lp));
    }
    p.final_gain = Vec::Ones(d);
    p.final_bias = Vec::Zero(d);
    p.recon.resize(hp.channels, d);
    fill_uniform(p.recon, bd, rng);
    p.recon_bias = Vec::Zero(hp.channels);
    p.cls.resize(kClasses, d);
    fill_uniform(p.cls, bd, rng);
    p.cls_bias = Vec::Zero(kClasses);
    return p;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    for (auto& b : z.blocks()) std::fill(b.data, b.data + b.size, 0.0);
    return z;
}

namespace {

template <typename P>
std::vector<ParamBlock> collect_blocks(P& p) {
    std::vector<ParamBlock> out;
    auto add = [&](const std::string& name, auto& m, bool prior = false) {
        out.push_back({name, const_cast<double*>(m.data()), m.size(), prior});
    };
    add("embed", p.embed);
    add("embed_bias", p.embed_bias);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& lp = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        add(pre + "Wq", lp.Wq);
        add(pre + "bq", lp.bq);
        add(pre + "Wk", lp.Wk);
        add(pre + "bk", lp.bk);
        add(pre + "Wv", lp.Wv);
        add(pre + "bv", lp.bv);
        add(pre + "Wo", lp.Wo);
        add(pre + "bo", lp.bo);
        add(pre + "sigma_raw", lp.sigma_raw, true);
        add(pre + "W1", lp.W1);
        add(pre + "b1", lp.b1);
        add(pre + "W2", lp.W2);
        add(pre + "b2", lp.b2);
        add(pre + "ln1_gain", lp.ln1_gain);
        add(pre + "ln1_bias", lp.ln1_bias);
        add(pre + "ln2_gain", lp.ln2_gain);
        add(pre + "ln2_bias", lp.ln2_bias);
    }
    add("final_gain", p.final_gain);
    add("final_bias", p.final_bias);
    add("recon", p.recon);
    add("recon_bias", p.recon_bias);
    add("cls", p.cls);
    add("cls_bias", p.cls_bias);
    return out;
}

}  // namespace

std::vector<ParamBlock> ModelParams::blocks() { return collect_blocks(*this); }
std::vector<ParamBlock> ModelParams::blocks() const { return collect_blocks(*this); }

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks()) n += static_cast<std::size_t>(b.size);
    return n;
}

Vec ModelParams::flatten() const {
    Vec flat(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index off = 0;
    for (const auto& b : blocks()) {
        flat.segment(off, b.size) = Eigen::Map<const Vec>(b.data, b.size);
        off += b.size;
    }
    return flat;
}

void ModelParams::assign(const Vec& flat) {
    if (flat.size() != static_cast<Eigen::Index>(parameter_count()))
        throw ContractViolation("flat parameter vector has the wrong length");
    Eigen::Index off = 0;
    for (auto& b : blocks()) {
        Eigen::Map<Vec>(b.data, b.size) = flat.segment(off, b.size);
        off += b.size;
    }
}

// ---------------------------------------------------------------- windows

Label window_class(const std::vector<Label>& labels, long begin, long length) {
    for (long k = begin; k < begin + length && k < static_cast<long>(labels.size()); ++k)
        if (labels[k] != Label::Clean) return labels[k];
    return Label::Clean;
}

std::vector<Window> make_windows(const ekf::ResidueSequence& seq, int window, int stride, bool labeled) {
    if (stride < 1) throw ContractViolation("window stride must be >= 1");
    std::vector<Window> out;
    const int m = seq.channel_count();
    for (long s = seq.first_usable(); s + window <= seq.size(); s += stride) {
        Window w;
        w.x.resize(window, m);
        for (int i = 0; i < window; ++i) w.x.row(i) = seq.input(s + i).transpose();
        w.labeled = labeled;
        if (labeled) w.cls = window_class(seq.labels, s, window);
        out.push_back(std::move(w));
    }
    return out;
}

// ---------------------------------------------------------------- forward

Mat embed_window(const ModelParams& params, const Mat& window) {
    const auto& hp = params.hyper;
    if (window.rows() != hp.window || window.cols() != hp.channels)
        throw ContractViolation("window dimensions do not match the model");
    if (!window.allFinite()) throw ContractViolation("window contains non-finite values");
    return linear(window, params.embed, params.embed_bias) + params.positional;
}

double symmetric_kl(const Vec& log_p, const Vec& log_q) {
    const Vec p = log_p.array().exp();
    const Vec q = log_q.array().exp();
    return 0.5 * ((p - q).array() * (log_p - log_q).array()).sum();
}

Mat anomaly_attention(const ModelParams& params, int layer, const Mat& encoded, AttentionOutput& attention) {
    if (layer < 0 || layer >= params.hyper.layers) throw ContractViolation("layer index out of range");
    if (!encoded.allFinite()) throw NumericalFailure("encoded sequence is non-finite");
    const PriorCache prior = make_prior(params.layers[layer], params.hyper.window);
    Vec disc = Vec::Zero(params.hyper.window);
    Mat out = encoder_layer(params, layer, prior, encoded, attention, disc, nullptr);
    attention.discrepancy = disc / static_cast<double>(params.hyper.heads);
    return out;
}

std::vector<WindowOutput> forward(const ModelParams& params, const WindowBatch& batch) {
    const auto priors = make_priors(params);
    std::vector<WindowOutput> outs;
    outs.reserve(batch.windows.size());
    for (const auto& w : batch.windows) outs.push_back(forward_window(params, priors, w.x, nullptr));
    return outs;
}

LossBreakdown loss(const ModelParams& params, const WindowBatch& batch, const LossWeights& weights) {
    require_batch(batch);
    require_weights(weights);
    return accumulate_loss(batch, forward(params, batch), weights);
}

Gradient grad(const ModelParams& params, const WindowBatch& batch, const LossWeights& weights) {
    require_batch(batch);
    require_weights(weights);
    const auto& hp = params.hyper;
    const auto priors = make_priors(params);
    const auto B = static_cast<double>(batch.windows.size());
    int labeled = 0;
    for (const auto& w : batch.windows) labeled += w.labeled ? 1 : 0;

    TermScales sc;
    const int n_rec = reconstructed_count(batch, weights.rec_on_attacked);
    sc.rec_on_attacked = weights.rec_on_attacked;
    sc.rec = n_rec ? weights.rec * 2.0 / (static_cast<double>(n_rec) * hp.window * hp.channels) : 0.0;
    sc.disc = weights.disc / (B * hp.window * hp.layers * hp.heads);
    sc.cls = labeled ? weights.cls / labeled : 0.0;

    Gradient out{params.zeros_like(), {}};
    std::vector<WindowOutput> outs;
    outs.reserve(batch.windows.size());
    for (const auto& w : batch.windows) {
        WindowTrace trace;
        outs.push_back(forward_window(params, priors, w.x, &trace));
        backward_window(params, priors, w, trace, outs.back(), sc, out.grad);
    }
    out.loss = accumulate_loss(batch, outs, weights);
    if (!std::isfinite(out.loss.total)) throw NumericalFailure("loss is non-finite");
    for (const auto& b : out.grad.blocks())
        if (!Eigen::Map<const Vec>(b.data, b.size).allFinite())
            throw NumericalFailure("non-finite gradient in parameter block " + b.name);
    return out;
}

// ---------------------------------------------------------------- training

LossBreakdown evaluate_loss(const ModelParams& params, const std::vector<Window>& windows, const LossWeights& weights,
                            int batch_size) {
    if (windows.empty()) throw ContractViolation("no windows to evaluate");
    LossBreakdown sum;
    double n = 0.0;
    for (std::size_t s = 0; s < windows.size(); s += batch_size) {
        WindowBatch batch;
        for (std::size_t i = s; i < std::min(windows.size(), s + batch_size); ++i) batch.windows.push_back(windows[i]);
        const auto lb = loss(params, batch, weights);
        const double wgt = static_cast<double>(batch.windows.size());
        sum.rec += wgt * lb.rec;
        sum.disc += wgt * lb.disc;
        sum.cls += wgt * lb.cls;
        sum.total += wgt * lb.total;
        n += wgt;
    }
    sum.rec /= n;
    sum.disc /= n;
    sum.cls /= n;
    sum.total /= n;
    return sum;
}

TrainResult train_windows(ModelParams params, const TrainConfig& cfg, const std::vector<Window>& windows) {
    if (cfg.epochs < 0 || cfg.batch_size < 1) throw ContractViolation("invalid training schedule");
    TrainResult res;
    if (cfg.epochs == 0) {
        res.params = std::move(params);
        return res;
    }
    if (windows.empty()) throw ContractViolation("training set produced no windows");

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(windows.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        EpochLog log;
        log.epoch = epoch + 1;
        double seen = 0.0;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            WindowBatch batch;
            for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i)
                batch.windows.push_back(windows[order[i]]);

            Gradient g;
            try {
                g = grad(params, batch, cfg.weights);
            } catch (const NumericalFailure& e) {
                throw TrainingDiverged(std::string("training diverged: ") + e.what(), params);
            }
            Vec flat = g.grad.flatten();
            const double norm = flat.norm();
            if (norm > cfg.clip_norm) flat *= cfg.clip_norm / norm;
            params.assign(params.flatten() - cfg.step * flat);

            const double wgt = static_cast<double>(batch.windows.size());
            log.loss.rec += wgt * g.loss.rec;
            log.loss.disc += wgt * g.loss.disc;
            log.loss.cls += wgt * g.loss.cls;
            log.loss.total += wgt * g.loss.total;
            seen += wgt;
        }
        log.loss.rec /= seen;
        log.loss.disc /= seen;
        log.loss.cls /= seen;
        log.loss.total /= seen;
        res.log.push_back(log);
    }
    res.params = std::move(params);
    return res;
}

TrainResult train(const Hyper& hyper, const TrainConfig& cfg, const std::vector<TrainingSequence>& data,
                  bool allow_unbalanced) {
    bool any_labeled = false, any_unlabeled = false;
    for (const auto& d : data) (d.labeled ? any_labeled : any_unlabeled) = true;
    if (!allow_unbalanced && !(any_labeled && any_unlabeled))
        throw ContractViolation("training needs at least one labeled and one unlabeled sequence");
    std::vector<Window> windows;
    for (const auto& d : data) {
        if (d.sequence->channel_count() != hyper.channels)
            throw ContractViolation("residue sequence channel count does not match the model");
        auto w = make_windows(*d.sequence, hyper.window, cfg.stride, d.labeled);
        windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    return train_windows(ModelParams::init(hyper), cfg, windows);
}

// ---------------------------------------------------------------- scoring

std::vector<bool> run_length_decision(const std::vector<double>& scores, double tau, int h_run, long first) {
    if (h_run < 1) throw ContractViolation("run length must be >= 1");
    const auto n = static_cast<long>(scores.size());
    std::vector<bool> attacked(scores.size(), false);
    long k = std::max<long>(first, 0);
    while (k < n) {
        if (!(scores[k] > tau)) {
            ++k;
            continue;
        }
        long end = k;
        while (end < n && scores[end] > tau) ++end;
        if (end - k >= h_run)
            for (long i = k; i < end; ++i) attacked[i] = true;
        k = end;
    }
    return attacked;
}

void step_scores(const ModelParams& params, const ekf::ResidueSequence& seq, std::vector<double>& scores,
                 std::vector<Vec>& class_logits) {
    const auto& hp = params.hyper;
    if (seq.channel_count() != hp.channels)
        throw ContractViolation("residue sequence channel count does not match the model");
    const long first = seq.first_usable();
    if (seq.size() - first < hp.window) {
        std::ostringstream os;
        os << "sequence has " << seq.size() - first << " usable steps, shorter than the window W=" << hp.window;
        throw ContractViolation(os.str());
    }
    const auto priors = make_priors(params);
    scores.assign(seq.size(), 0.0);
    class_logits.assign(seq.size(), Vec::Zero(kClasses));
    std::vector<int> cover(seq.size(), 0);
    Mat x(hp.window, hp.channels);
    for (long s = first; s + hp.window <= seq.size(); ++s) {
        for (int i = 0; i < hp.window; ++i) x.row(i) = seq.input(s + i).transpose();
        const auto out = forward_window(params, priors, x, nullptr);
        for (int i = 0; i < hp.window; ++i) {
            scores[s + i] += out.scores[i];
            class_logits[s + i] += out.logits;
            ++cover[s + i];
        }
    }
    for (long k = first; k < seq.size(); ++k) {
        scores[k] /= cover[k];
        class_logits[k] /= cover[k];
    }
}

ScoreResult score_stream(const ModelParams& params, const ekf::ResidueSequence& seq, double tau, int h_run) {
    ScoreResult res;
    std::vector<Vec> logits;
    step_scores(params, seq, res.step_scores, logits);
    const long first = seq.first_usable();
    const auto attacked = run_length_decision(res.step_scores, tau, h_run, first);
    res.verdicts.reserve(seq.size());
    for (long k = 0; k < seq.size(); ++k) {
        detect::DetectorVerdict v;
        v.k = k;
        v.score = res.step_scores[k];
        if (attacked[k]) {
            v.decision = detect::Decision::Attacked;
            // only attack classes are reported while attacked
            v.attack_class = logits[k][1] >= logits[k][2] ? AttackKind::AttackI : AttackKind::AttackII;
            if (!res.onset.onset) {
                res.onset.onset = k;
                res.onset.attack_class = v.attack_class;
            }
        }
        res.verdicts.push_back(v);
    }
    return res;
}

TransformerStream::TransformerStream(const ModelParams& params, double tau, int h_run)
    : params_(&params), tau_(tau), h_run_(h_run) {}

detect::DetectorVerdict TransformerStream::step(long k, const Vec& r) {
    const auto& hp = params_->hyper;
    buf_.push_back(r);
    if (static_cast<int>(buf_.size()) > hp.window) buf_.erase(buf_.begin());
    detect::DetectorVerdict v;
    v.k = k;
    if (static_cast<int>(buf_.size()) < hp.window) return v;
    WindowBatch batch;
    batch.windows.push_back({Mat(hp.window, hp.channels), false, Label::Clean});
    for (int i = 0; i < hp.window; ++i) batch.windows[0].x.row(i) = buf_[i].transpose();
    const auto out = forward(*params_, batch).front();
    v.score = out.scores[hp.window - 1];
    above_ = v.score > tau_ ? above_ + 1 : 0;
    if (above_ >= h_run_) {
        v.decision = detect::Decision::Attacked;
        v.attack_class = out.logits[1] >= out.logits[2] ? AttackKind::AttackI : AttackKind::AttackII;
    }
    return v;
}

detect::Calibration calibrate_tau(const ModelParams& params, const std::vector<const ekf::ResidueSequence*>& corpus,
                                  int h_run, double target) {
    long usable = 0;
    for (const auto* s : corpus) usable += s->size() - s->first_usable();
    if (usable < detect::kMinCalibrationSteps) throw ContractViolation("calibration corpus is too small");

    std::vector<std::vector<double>> per_seq;
    std::vector<double> all;
    for (const auto* s : corpus) {
        std::vector<double> sc;
        std::vector<Vec> logits;
        step_scores(params, *s, sc, logits);
        all.insert(all.end(), sc.begin() + s->first_usable(), sc.end());
        per_seq.push_back(std::move(sc));
    }
    auto rate_at = [&](double tau) {
        long alarms = 0, total = 0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const long first = corpus[i]->first_usable();
            const auto att = run_length_decision(per_seq[i], tau, h_run, first);
            for (long k = first; k < static_cast<long>(att.size()); ++k) {
                ++total;
                alarms += att[k] ? 1 : 0;
            }
        }
        return total ? static_cast<double>(alarms) / static_cast<double>(total) : 0.0;
    };
    // The rule is monotone in tau, so the smallest feasible candidate is
    // found by bisection over the sorted distinct scores.
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    const double below = std::nextafter(all.front(), -std::numeric_limits<double>::infinity());
    if (rate_at(below) <= target) return {below, rate_at(below)};
    std::size_t lo = 0, hi = all.size() - 1;  // rate_at(all[hi]) == 0
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (rate_at(all[mid]) <= target) hi = mid;
        else lo = mid + 1;
    }
    return {all[lo], rate_at(all[lo])};
}

}  // namespace fdibench::transformer
