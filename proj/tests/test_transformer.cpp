#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>

#include "fdibench/transformer.hpp"

using namespace fdibench;
using namespace fdibench::transformer;

namespace {

WindowBatch random_batch(const Hyper& hp, Rng& rng, int size) {
    WindowBatch b;
    for (int i = 0; i < size; ++i) {
        Window w;
        w.x.resize(hp.window, hp.channels);
        for (int r = 0; r < hp.window; ++r)
            for (int c = 0; c < hp.channels; ++c) w.x(r, c) = rng.normal();
        w.labeled = i % 2 == 0 || rng.uniform() < 0.5;
        w.cls = static_cast<Label>(rng.below(3));
        b.windows.push_back(w);
    }
    return b;
}

// Largest per-entry relative error between the analytic gradient and
// central differences. Sigma blocks are checked against the negated
// derivative of the weighted discrepancy term.
double gradient_check(const Hyper& hp, std::uint64_t seed, const LossWeights& lw) {
    Rng rng(seed);
    ModelParams p = ModelParams::init(hp);
    const WindowBatch batch = random_batch(hp, rng, 2);
    Gradient g = grad(p, batch, lw);
    const auto gblocks = g.grad.blocks();
    const auto pblocks = p.blocks();
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t b = 0; b < pblocks.size(); ++b) {
        for (Eigen::Index i = 0; i < pblocks[b].size; ++i) {
            double& v = pblocks[b].data[i];
            const double saved = v;
            v = saved + h;
            const auto lp = loss(p, batch, lw);
            v = saved - h;
            const auto lm = loss(p, batch, lw);
            v = saved;
            const double fd = pblocks[b].prior_branch ? -lw.disc * (lp.disc - lm.disc) / (2 * h)
                                                      : (lp.total - lm.total) / (2 * h);
            const double an = gblocks[b].data[i];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("symmetrized KL on the two-position example") {
    Vec p(2), q(2);
    p << 0.9, 0.1;
    q << 0.5, 0.5;
    const double kl_pq = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
    const double kl_qp = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    const double value = symmetric_kl(p.array().log(), q.array().log());
    CHECK(value == doctest::Approx(0.5 * (kl_pq + kl_qp)).epsilon(1e-12));
    CHECK(std::abs(value - 0.43944) < 1e-4);
    CHECK(std::abs(kl_pq - 0.36806) < 1e-4);
    CHECK(symmetric_kl(q.array().log(), p.array().log()) == doctest::Approx(value));
}

TEST_CASE("symmetrized KL is non-negative and vanishes on equal inputs") {
    Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        Vec a(5), b(5);
        for (int i = 0; i < 5; ++i) {
            a[i] = rng.uniform(0.01, 1);
            b[i] = rng.uniform(0.01, 1);
        }
        a /= a.sum();
        b /= b.sum();
        const Vec la = a.array().log(), lb = b.array().log();
        CHECK(symmetric_kl(la, lb) >= 0.0);
        CHECK(symmetric_kl(la, la) == 0.0);
    }
}

TEST_CASE("attention rows are stochastic and discrepancies non-negative") {
    Hyper hp;
    hp.window = 8;
    hp.channels = 3;
    hp.d_model = 8;
    hp.heads = 2;
    hp.layers = 2;
    hp.d_ff = 16;
    hp.seed = 3;
    const auto p = ModelParams::init(hp);
    Rng rng(1);
    const auto outs = forward(p, random_batch(hp, rng, 3));
    for (const auto& o : outs) {
        REQUIRE(o.attention.series.size() == 2);
        for (int l = 0; l < 2; ++l) {
            for (const auto& s : o.attention.series[l]) {
                CHECK((s.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
                CHECK(s.minCoeff() >= 0.0);
            }
            const Mat& pr = o.attention.prior[l];
            CHECK((pr.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
        }
        CHECK(o.attention.discrepancy.minCoeff() >= 0.0);
        CHECK(o.scores.minCoeff() >= 0.0);
        CHECK(o.logits.size() == kClasses);
    }
}

TEST_CASE("analytic gradients match central differences") {
    const auto start = std::chrono::steady_clock::now();
    Rng pick(99);
    for (int cfg = 0; cfg < 10; ++cfg) {
        Hyper hp;
        hp.window = 4;
        hp.d_model = 4;
        hp.channels = 2 + static_cast<int>(pick.below(2));
        hp.heads = pick.below(2) ? 2 : 1;
        hp.layers = 1 + static_cast<int>(pick.below(2));
        hp.d_ff = 4 + 2 * static_cast<int>(pick.below(3));
        hp.seed = 1000 + cfg;
        LossWeights lw;
        lw.disc = 0.1 + pick.uniform() * 0.5;
        lw.rec_on_attacked = cfg % 3 == 0;
        const double err = gradient_check(hp, 500 + cfg, lw);
        CAPTURE(cfg);
        CHECK(err < 1e-4);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(seconds < 30.0);
}

TEST_CASE("initialization is seeded and checkpoint order is stable") {
    Hyper hp;
    hp.window = 4;
    hp.channels = 2;
    hp.d_model = 4;
    hp.heads = 1;
    hp.layers = 1;
    hp.d_ff = 4;
    const auto a = ModelParams::init(hp);
    const auto b = ModelParams::init(hp);
    CHECK(a.flatten() == b.flatten());
    hp.seed += 1;
    CHECK(ModelParams::init(hp).flatten() != a.flatten());
    const auto blocks = a.blocks();
    CHECK(blocks.front().name == "embed");
    CHECK(blocks.back().name == "cls_bias");
    std::size_t total = 0;
    for (const auto& bl : blocks) total += bl.size;
    CHECK(total == a.parameter_count());
    ModelParams c = a.zeros_like();
    c.assign(a.flatten());
    CHECK(c.flatten() == a.flatten());
    // sigma starts at W/4
    CHECK(sigma_of(a.layers[0])[0] == doctest::Approx(1.0));
}

TEST_CASE("invalid hyperparameters are rejected") {
    Hyper hp;
    hp.d_model = 6;
    hp.heads = 4;
    CHECK_THROWS_AS(hp.validate(), ContractViolation);
    hp = Hyper{};
    hp.window = 0;
    CHECK_THROWS_AS(hp.validate(), ContractViolation);
}

TEST_CASE("training overfits a handful of windows") {
    Hyper hp;
    hp.window = 8;
    hp.channels = 2;
    hp.d_model = 8;
    hp.heads = 2;
    hp.layers = 1;
    hp.d_ff = 16;
    hp.seed = 5;
    Rng rng(6);
    std::vector<Window> windows = random_batch(hp, rng, 8).windows;
    for (auto& w : windows) w.labeled = false;
    TrainConfig tc;
    tc.epochs = 500;
    tc.batch_size = 8;
    tc.step = 3e-3;
    tc.seed = 9;
    const auto p0 = ModelParams::init(hp);
    const double before = evaluate_loss(p0, windows, tc.weights, 8).rec;
    const auto res = train_windows(p0, tc, windows);
    const double after = evaluate_loss(res.params, windows, tc.weights, 8).rec;
    CHECK(res.log.size() == 500);
    CHECK(after < 0.1 * before);
}

TEST_CASE("run-length rule") {
    std::vector<double> s(200, 0.0);
    for (int k = 100; k <= 102; ++k) s[k] = 1.0;
    auto d = run_length_decision(s, 0.5, 3);
    CHECK(d[100]);
    CHECK(d[102]);
    CHECK_FALSE(d[99]);
    CHECK_FALSE(d[103]);

    std::vector<double> iso(200, 0.0);
    iso[50] = iso[60] = 1.0;
    d = run_length_decision(iso, 0.5, 3);
    for (bool b : d) CHECK_FALSE(b);

    // a qualifying run that starts before `first` only counts from `first`
    d = run_length_decision(s, 0.5, 3, 101);
    CHECK_FALSE(d[100]);
    CHECK_FALSE(d[101]);
    CHECK_THROWS_AS(run_length_decision(s, 0.5, 0), ContractViolation);
}

TEST_CASE("window class and slicing") {
    std::vector<Label> labels(10, Label::Clean);
    labels[7] = Label::AttackII;
    CHECK(window_class(labels, 0, 5) == Label::Clean);
    CHECK(window_class(labels, 4, 4) == Label::AttackII);

    ekf::ResidueSequence seq;
    seq.channels = {ChannelTag::GpsPos, ChannelTag::CameraPos};
    seq.warmup_steps = 2;
    for (long k = 0; k < 10; ++k) {
        ekf::ResidueSample s;
        s.k = k;
        s.r_norm = Vec::Constant(2, double(k));
        s.r = s.r_norm;
        seq.samples.push_back(s);
    }
    seq.labels = labels;
    const auto ws = make_windows(seq, 4, 2, true);
    REQUIRE(ws.size() == 3);  // starts 2, 4, 6
    CHECK(ws[0].x(0, 0) == 2.0);
    CHECK(ws[2].x(3, 1) == 9.0);
    CHECK(ws[0].cls == Label::Clean);
    CHECK(ws[2].cls == Label::AttackII);
}
