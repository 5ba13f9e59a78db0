#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "jap/sim_harness.hpp"
#include "test_support.hpp"

using namespace jap;
using jap::testing::Gen;
using jap::testing::TempDir;

namespace {

SimConfig config(Index n, Index p, double delta, std::uint64_t seed) {
    SimConfig cfg;
    cfg.n = n;
    cfg.p = p;
    cfg.delta = delta;
    cfg.seed = seed;
    return cfg;
}

bool same_data(const Dataset& a, const Dataset& b) {
    return a.treatment() == b.treatment() && a.mediators() == b.mediators() && a.outcome() == b.outcome() &&
           a.covariates() == b.covariates();
}

MethodSpec fixed_spec(double la, double lb) {
    MethodSpec s;
    s.tune = false;
    s.fixed.lambda_alpha = la;
    s.fixed.lambda_beta = lb;
    return s;
}

std::string recovery_csv(const RecoveryTable& t) {
    std::ostringstream os;
    write_recovery_csv(os, t);
    return os.str();
}

} // namespace

TEST(MakeCoefficients, TableValues) {
    const Coefficients c = make_coefficients(6, 0.5, 1.0);
    const double a[6] = {1, 2, 0.5, 0, 1, 0};
    const double b[6] = {1, 0.5, 2, 1, 0, 0};
    for (Index j = 0; j < 6; ++j) {
        EXPECT_EQ(c.alpha(j), a[j]);
        EXPECT_EQ(c.beta(j), b[j]);
    }
    EXPECT_EQ(true_active_set(6).indices(), (std::vector<Index>{0, 1, 2}));

    const Coefficients d = make_coefficients(6, std::pow(2.0, -1.5), 1.0);
    EXPECT_NEAR(d.alpha(1), 2.82842712, 1e-8);
    EXPECT_NEAR(d.beta(1), 0.35355339, 1e-8);
    EXPECT_DOUBLE_EQ(d.alpha(1) * d.beta(1), 1.0);

    const Coefficients big = make_coefficients(30, 0.5, 3.0);
    EXPECT_EQ(big.alpha(4), 3.0);
    EXPECT_EQ(big.alpha(5), 6.0);
    EXPECT_EQ(big.beta(29), 0.0);
    EXPECT_EQ(true_active_set(30).size(), 15u);

    EXPECT_THROW(make_coefficients(7, 0.5, 1.0), InvalidInput);
    EXPECT_THROW(make_coefficients(6, 1.0, 1.0), InvalidInput);
    EXPECT_THROW(make_coefficients(6, 0.0, 1.0), InvalidInput);
}

TEST(Ar1Covariance, Examples) {
    Matrix expected(3, 3);
    expected << 1, 0.4, 0.16, 0.4, 1, 0.4, 0.16, 0.4, 1;
    EXPECT_LE((ar1_covariance(3, 0.4) - expected).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(ar1_covariance(5, 0.0), Matrix::Identity(5, 5));
    EXPECT_THROW(ar1_covariance(3, 1.0), InvalidInput);
    EXPECT_THROW(ar1_covariance(3, -0.1), InvalidInput);
}

TEST(Ar1Covariance, PositiveDefiniteProperty) {
    Gen g(1);
    for (int trial = 0; trial < 100; ++trial) {
        const Index p = g.integer(1, 40);
        const double rho = g.uniform(0.0, 0.99);
        const Matrix s = ar1_covariance(p, rho);
        Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
        EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
        EXPECT_EQ(s, s.transpose());
    }
}

TEST(Seeds, MixingIsDeterministicAndSpread) {
    EXPECT_EQ(mix64(0), mix64(0));
    EXPECT_NE(mix64(0), mix64(1));
    std::set<std::uint64_t> seen;
    for (std::uint64_t c = 0; c < 10; ++c) {
        for (std::uint64_t r = 0; r < 100; ++r) {
            seen.insert(replicate_seed(42, c, r));
        }
    }
    EXPECT_EQ(seen.size(), 1000u);
    EXPECT_NE(replicate_seed(1, 0, 0), replicate_seed(2, 0, 0));
}

TEST(SimulateDataset, NoiseFreeOutcomeIsExact) {
    SimConfig cfg = config(200, 12, 0.5, 3);
    cfg.sigma2 = 0.0;
    const SimDraw d = simulate_dataset(cfg);
    const Vector resid =
        d.data.outcome() - d.truth.direct_effect * d.data.treatment() - d.data.mediators() * d.truth.beta;
    EXPECT_LE(resid.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(d.data.q(), 1);
    EXPECT_TRUE((d.data.covariates().col(0).array() == 1.0).all());
}

TEST(SimulateDataset, DeterministicForFixedSeed) {
    const SimConfig cfg = config(300, 6, 0.5, 17);
    EXPECT_TRUE(same_data(simulate_dataset(cfg).data, simulate_dataset(cfg).data));
    SimConfig other = cfg;
    other.seed = 18;
    EXPECT_FALSE(same_data(simulate_dataset(cfg).data, simulate_dataset(other).data));
}

TEST(SimulateDataset, TreatmentIsBinaryAndBalanced) {
    const SimDraw d = simulate_dataset(config(20000, 6, 0.5, 4));
    EXPECT_TRUE((d.data.treatment().array() == 0.0 || d.data.treatment().array() == 1.0).all());
    EXPECT_NEAR(d.data.treatment().mean(), 0.5, 0.02);
}

TEST(SimulateDataset, Ar1MomentAtLargeN) {
    SimConfig cfg = config(20000, 6, 0.5, 5);
    cfg.rho = 0.4;
    cfg.sigma2 = 0.0;
    const SimDraw d = simulate_dataset(cfg);
    const Matrix e = d.data.mediators() - d.data.treatment() * d.truth.alpha.transpose();
    const Vector e0 = e.col(0).array() - e.col(0).mean();
    const Vector e1 = e.col(1).array() - e.col(1).mean();
    EXPECT_NEAR(e0.dot(e1) / 19999.0, 0.4, 0.02);
    const Vector e2 = e.col(2).array() - e.col(2).mean();
    EXPECT_NEAR(e0.dot(e2) / 19999.0, 0.16, 0.02);
}

TEST(SimulateDataset, CaseTwoWithIdentityPermutationEqualsCaseOne) {
    SimConfig one = config(500, 12, 0.5, 6);
    one.rho = 0.5;
    SimConfig two = one;
    two.noise_case = NoiseCase::II;
    std::vector<Index> id(12);
    std::iota(id.begin(), id.end(), Index{0});
    EXPECT_TRUE(same_data(simulate_dataset(one).data, simulate_dataset(two, id).data));

    const SimDraw shuffled = simulate_dataset(two);
    EXPECT_NE(shuffled.permutation, id);
    EXPECT_TRUE(std::is_permutation(shuffled.permutation.begin(), shuffled.permutation.end(), id.begin()));
    EXPECT_EQ(shuffled.data.treatment(), simulate_dataset(one).data.treatment());

    std::vector<Index> bad = id;
    bad[0] = 1;
    EXPECT_THROW(simulate_dataset(two, bad), InvalidInput);
    SimConfig no_rho = two;
    no_rho.rho = 0.0;
    EXPECT_THROW(simulate_dataset(no_rho), InvalidInput);
}

TEST(SimulateDataset, RowPermutationInvarianceProperty) {
    Gen g(7);
    for (int trial = 0; trial < 10; ++trial) {
        SimConfig cfg = config(g.integer(100, 400), 6 * g.integer(1, 3), 0.5, g.bits());
        cfg.rho = g.uniform(0.0, 0.8);
        const Dataset ds = simulate_dataset(cfg).data;
        std::vector<Index> rows(static_cast<std::size_t>(ds.n()));
        std::iota(rows.begin(), rows.end(), Index{0});
        for (std::size_t i = rows.size() - 1; i > 0; --i) {
            std::swap(rows[i], rows[static_cast<std::size_t>(g.integer(0, static_cast<Index>(i)))]);
        }
        const Dataset shuffled = ds.rows(rows);
        FitSettings s;
        s.lambda_alpha = std::exp(g.uniform(0, 4));
        s.lambda_beta = std::exp(g.uniform(3, 7));
        const FittedModel a = fit_model(ds, s), b = fit_model(shuffled, s);
        EXPECT_LE((a.coefficients.alpha - b.coefficients.alpha).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LE((a.coefficients.beta - b.coefficients.beta).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LE((a.coefficients.zeta_m - b.coefficients.zeta_m).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LE((a.coefficients.zeta_y - b.coefficients.zeta_y).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_NEAR(a.coefficients.direct_effect, b.coefficients.direct_effect, 1e-10);
    }
}

TEST(SimulateDataset, RejectsInvalidConfig) {
    EXPECT_THROW(simulate_dataset(config(100, 5, 0.5, 1)), InvalidInput);
    EXPECT_THROW(simulate_dataset(config(100, 6, -1.5, 1)), InvalidInput);
    EXPECT_THROW(simulate_dataset(config(7, 6, 0.5, 1)), InvalidInput);
    SimConfig bad = config(100, 6, 0.5, 1);
    bad.sigma2 = -1.0;
    EXPECT_THROW(simulate_dataset(bad), InvalidInput);
}

TEST(ExactRecovery, Examples) {
    EXPECT_EQ(exact_recovery(ActiveSet({0, 1, 2}, 6), ActiveSet({0, 1, 2}, 6)), 1);
    EXPECT_EQ(exact_recovery(ActiveSet({0, 1}, 6), ActiveSet({0, 1, 2}, 6)), 0);
    EXPECT_EQ(exact_recovery(ActiveSet({}, 6), ActiveSet({}, 6)), 1);
}

TEST(MonteCarlo, SingleReplicateHasZeroStderr) {
    const RecoveryTable t = run_monte_carlo({config(500, 6, 0.5, 0)}, {MethodSpec{}}, 1, 9);
    ASSERT_EQ(t.rows.size(), 1u);
    const double r = t.rows[0].exact_recovery_rate;
    EXPECT_TRUE(r == 0.0 || r == 1.0);
    EXPECT_EQ(t.rows[0].mc_stderr, 0.0);
    EXPECT_EQ(t.rows[0].replicates, 1);
}

TEST(MonteCarlo, EmptySelectorNeverRecovers) {
    const RecoveryTable t = run_monte_carlo({config(200, 6, 0.5, 0)}, {fixed_spec(1e12, 1e12)}, 5, 1);
    EXPECT_EQ(t.rows[0].exact_recovery_rate, 0.0);
    EXPECT_EQ(t.rows[0].mc_stderr, 0.0);
    EXPECT_EQ(t.rows[0].mean_tpr, 0.0);
    EXPECT_EQ(t.rows[0].mean_fpr, 0.0);
}

TEST(MonteCarlo, StderrFormulaAndRowLayout) {
    const std::vector<SimConfig> cells{config(300, 6, 0.5, 0), config(600, 6, 0.25, 0)};
    const std::vector<MethodSpec> methods{fixed_spec(20.0, 300.0), fixed_spec(1.0, 20.0)};
    const RecoveryTable t = run_monte_carlo(cells, methods, 8, 3);
    ASSERT_EQ(t.rows.size(), 4u);
    EXPECT_EQ(t.rows[0].config.n, 300);
    EXPECT_EQ(t.rows[2].config.n, 600);
    for (const auto& row : t.rows) {
        const double r = row.exact_recovery_rate;
        EXPECT_GE(r, 0.0);
        EXPECT_LE(r, 1.0);
        EXPECT_DOUBLE_EQ(row.mc_stderr, std::sqrt(r * (1 - r) / 8.0));
        EXPECT_DOUBLE_EQ(r * 8.0, std::round(r * 8.0));
    }
    EXPECT_THROW(run_monte_carlo(cells, methods, 0, 3), InvalidInput);
    EXPECT_THROW(run_monte_carlo({}, methods, 1, 3), InvalidInput);
}

TEST(MonteCarlo, IndependentOfThreadCount) {
    const std::vector<SimConfig> cells{config(400, 6, 0.5, 0), config(400, 12, 0.5, 0)};
    const std::vector<MethodSpec> methods{MethodSpec{}, MethodSpec{Method::AdaptiveLasso, true, {}}};
    MonteCarloOptions one, four;
    four.threads = 4;
    EXPECT_EQ(recovery_csv(run_monte_carlo(cells, methods, 6, 11, one)),
              recovery_csv(run_monte_carlo(cells, methods, 6, 11, four)));
}

TEST(MonteCarlo, ResumeMatchesUninterruptedRun) {
    TempDir dir;
    const std::vector<SimConfig> cells{config(300, 6, 0.5, 0)};
    const std::vector<MethodSpec> methods{MethodSpec{}};
    MonteCarloOptions opts;
    opts.detail_path = dir.file("full.jsonl");
    const std::string full = recovery_csv(run_monte_carlo(cells, methods, 6, 21, opts));

    // keep the first three lines and a torn fourth, as if the run had been killed
    std::ifstream in(opts.detail_path);
    std::string line, partial;
    for (int i = 0; i < 3 && std::getline(in, line); ++i) {
        partial += line + "\n";
    }
    std::getline(in, line);
    partial += line.substr(0, line.size() / 2);
    const std::string path = dir.write("partial.jsonl", partial);

    MonteCarloOptions resume = opts;
    resume.detail_path = path;
    resume.resume = true;
    EXPECT_EQ(recovery_csv(run_monte_carlo(cells, methods, 6, 21, resume)), full);
    std::ifstream out(path);
    int lines = 0;
    while (std::getline(out, line)) {
        EXPECT_FALSE(nlohmann::json::parse(line, nullptr, false).is_discarded());
        ++lines;
    }
    EXPECT_EQ(lines, 6);
}

TEST(MonteCarlo, DetailRoundTrip) {
    ReplicateResult r;
    r.cell = 2;
    r.rep = 5;
    r.method = "jap";
    r.recovered = 1;
    r.tpr = 1.0;
    r.fpr = 0.25;
    r.active = {0, 3};
    const ReplicateResult back = replicate_from_json(to_json(r));
    EXPECT_EQ(back.cell, 2u);
    EXPECT_EQ(back.rep, 5u);
    EXPECT_EQ(back.method, "jap");
    EXPECT_EQ(back.recovered, 1);
    EXPECT_EQ(back.fpr, 0.25);
    EXPECT_EQ(back.active, r.active);
}

TEST(MonteCarlo, RecoveryImprovesWithSampleSize) {
    std::vector<SimConfig> cells;
    for (Index n : {250, 500, 2000}) {
        cells.push_back(config(n, 6, 0.25, 0));
    }
    const RecoveryTable t = run_monte_carlo(cells, {MethodSpec{}}, 30, 77, {});
    for (std::size_t k = 1; k < t.rows.size(); ++k) {
        const auto& lo = t.rows[k - 1];
        const auto& hi = t.rows[k];
        const double se = std::sqrt(lo.mc_stderr * lo.mc_stderr + hi.mc_stderr * hi.mc_stderr);
        EXPECT_GE(hi.exact_recovery_rate, lo.exact_recovery_rate - 2.0 * se)
            << "n=" << lo.config.n << " -> " << hi.config.n;
        EXPECT_GE(hi.mean_tpr, lo.mean_tpr - 0.1);
    }
    EXPECT_GT(t.rows.back().mean_tpr, 0.9);
}

TEST(RandomInstance, ShapesAndDeterminism) {
    const Dataset a = random_instance(5, 80, 4, 2);
    EXPECT_EQ(a.n(), 80);
    EXPECT_EQ(a.p(), 4);
    EXPECT_EQ(a.q(), 2);
    EXPECT_TRUE(same_data(a, random_instance(5, 80, 4, 2)));
}
