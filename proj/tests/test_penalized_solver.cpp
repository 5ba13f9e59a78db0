#include <cmath>

#include <gtest/gtest.h>

#include "jap/initializer.hpp"
#include "jap/penalized_solver.hpp"
#include "test_support.hpp"

using namespace jap;
using jap::testing::Gen;

namespace {

Dataset four_points() {
    Vector t(4), m(4), y(4);
    t << 0, 0, 1, 1;
    m << 0, 1, 1, 2;
    y << 1, 2, 3, 5;
    return validate_dataset(t, Matrix(m), y, Matrix(4, 0));
}

PenaltySpec penalty(double lambda, const Vector& w) {
    PenaltySpec pen;
    pen.lambda = lambda;
    pen.weights = w;
    return pen;
}

// I - U (U'U)^{-1} U' built from the normal equations.
Matrix annihilator(const Matrix& u) {
    const Index n = u.rows();
    return Matrix::Identity(n, n) - u * (u.transpose() * u).inverse() * u.transpose();
}

Matrix treatment_and_covariates(const Dataset& ds) {
    Matrix u(ds.n(), 1 + ds.q());
    u << ds.treatment(), ds.covariates();
    return u;
}

Vector jap_beta_weights(const Dataset& ds) {
    return compute_weights(init_estimates(ols_summary(ds)), {2.0, 0.5, 2.0, 0.5}, Method::Jap).w_beta;
}

} // namespace

TEST(SoftThreshold, Examples) {
    EXPECT_DOUBLE_EQ(soft_threshold(1.0, 0.3), 0.7);
    EXPECT_EQ(soft_threshold(0.2, 0.3), 0.0);
    EXPECT_DOUBLE_EQ(soft_threshold(-2.5, 1.0), -1.5);
    EXPECT_EQ(soft_threshold(-0.3, 0.3), 0.0);
    EXPECT_EQ(soft_threshold(4.0, 0.0), 4.0);
}

TEST(FitMediator, HandExample) {
    const Dataset ds = four_points();
    const FitResult a = fit_mediator(ds, penalty(1.0, Vector::Ones(1)));
    EXPECT_DOUBLE_EQ(a.penalized_coefs(0), 0.5);
    // zeta_M: mean of M - 0.5 T = (0, 1, 0.5, 1.5) / 4
    EXPECT_DOUBLE_EQ(a.unpenalized_coefs(0), 0.75);
    const FitResult b = fit_mediator(ds, penalty(4.0, Vector::Ones(1)));
    EXPECT_EQ(b.penalized_coefs(0), 0.0);
    EXPECT_DOUBLE_EQ(b.unpenalized_coefs(0), 1.0);
}

TEST(FitMediator, ZeroPenaltyIsOls) {
    Gen g(1);
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset ds = g.dataset(g.integer(20, 120), g.integer(1, 6), g.integer(0, 3));
        const FitResult fit = fit_mediator(ds, penalty(0.0, Vector::Ones(ds.p())));
        const MediatorOls ols = ols_mediator(ds);
        EXPECT_LE((fit.penalized_coefs - ols.alpha_ols).cwiseAbs().maxCoeff(), 1e-12);
        const Vector zeta = Eigen::Map<const Vector>(ols.zeta_m_ols.data(), ols.zeta_m_ols.size());
        EXPECT_LE((fit.unpenalized_coefs - zeta).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(FitMediator, ClosedFormMatchesProjectionOracleProperty) {
    Gen g(2);
    for (int trial = 0; trial < 30; ++trial) {
        const Dataset ds = g.dataset(g.integer(20, 100), g.integer(1, 6), g.integer(0, 2));
        const Index p = ds.p();
        Vector w(p);
        for (Index j = 0; j < p; ++j) {
            w(j) = g.uniform(0.05, 4.0);
        }
        const double lambda = g.uniform(0.0, 20.0);
        const FitResult fit = fit_mediator(ds, penalty(lambda, w));
        const Matrix px = annihilator(ds.covariates());
        const Vector tt = px * ds.treatment();
        const double tn = tt.squaredNorm();
        for (Index j = 0; j < p; ++j) {
            const double z = ds.mediators().col(j).dot(tt) / tn;
            const double expect = soft_threshold(z, lambda / (2.0 * w(j) * tn));
            EXPECT_NEAR(fit.penalized_coefs(j), expect, 1e-10 * std::max(1.0, std::abs(expect)));
            EXPECT_EQ(fit.penalized_coefs(j) == 0.0, expect == 0.0);
            // zeta recovered from M_j - alpha_j T regressed on X
            const Vector r = ds.mediators().col(j) - fit.penalized_coefs(j) * ds.treatment();
            const Matrix& x = ds.covariates();
            const Vector zeta = (x.transpose() * x).ldlt().solve(x.transpose() * r);
            for (Index c = 0; c < ds.q(); ++c) {
                EXPECT_NEAR(fit.unpenalized_coefs(j * ds.q() + c), zeta(c), 1e-9);
            }
        }
        EXPECT_LE(fit.kkt_violation, 1e-8);
    }
}

TEST(FitOutcome, SingleMediatorIsOneSoftThreshold) {
    Gen g(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset ds = g.dataset(g.integer(20, 100), 1, g.integer(0, 2));
        const double w = g.uniform(0.1, 3.0);
        const double lambda = g.uniform(0.0, 40.0);
        const FitResult fit = fit_outcome(ds, penalty(lambda, Vector::Constant(1, w)));
        const Matrix pu = annihilator(treatment_and_covariates(ds));
        const Vector mt = pu * ds.mediators().col(0);
        const Vector yt = pu * ds.outcome();
        const double mn = mt.squaredNorm();
        const double expect = soft_threshold(mt.dot(yt) / mn, lambda / (2.0 * w * mn));
        EXPECT_NEAR(fit.penalized_coefs(0), expect, 1e-12 * std::max(1.0, std::abs(expect)));
    }
}

TEST(FitOutcome, ZeroPenaltyIsOls) {
    Gen g(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset ds = g.dataset(g.integer(30, 150), g.integer(1, 8), g.integer(0, 3));
        const FitResult fit = fit_outcome(ds, penalty(0.0, Vector::Ones(ds.p())));
        const OutcomeOls ols = ols_outcome(ds);
        EXPECT_LE((fit.penalized_coefs - ols.beta_ols).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_NEAR(fit.unpenalized_coefs(0), ols.direct_effect_ols, 1e-8);
        EXPECT_LE((fit.unpenalized_coefs.tail(ds.q()) - ols.zeta_y_ols).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_TRUE(fit.converged);
    }
}

TEST(FitOutcome, KktOnRandomInstancesProperty) {
    Gen g(5);
    for (int trial = 0; trial < 40; ++trial) {
        const Dataset ds = g.dataset(100, 5, g.integer(0, 2));
        const PenaltySpec pen = penalty(std::exp(g.uniform(0.0, 5.0)), jap_beta_weights(ds));
        const FitResult fit = fit_outcome(ds, pen);
        EXPECT_TRUE(fit.converged);
        EXPECT_LE(kkt_check(ds, pen, fit.penalized_coefs), 1e-8);
    }
}

TEST(KktCheck, OlsIsStationary) {
    Gen g(6);
    const Dataset ds = g.dataset(80, 4, 1);
    const OutcomeOls ols = ols_outcome(ds);
    EXPECT_LE(kkt_check(ds, penalty(0.0, Vector::Ones(4)), ols.beta_ols), 1e-8);
}

TEST(KktCheck, PerturbationIsDetected) {
    Gen g(7);
    int probed = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset ds = g.dataset(100, 5, 1);
        const PenaltySpec pen = penalty(20.0, jap_beta_weights(ds));
        Vector b = fit_outcome(ds, pen).penalized_coefs;
        for (Index j = 0; j < b.size(); ++j) {
            if (b(j) != 0.0) {
                b(j) += 0.1;
                ++probed;
                EXPECT_GT(kkt_check(ds, pen, b), 0.01);
                break;
            }
        }
    }
    EXPECT_GT(probed, 0);
}

TEST(KktCheck, MatchesStationarityFormula) {
    Gen g(8);
    const Dataset ds = g.dataset(60, 3, 1);
    const PenaltySpec pen = penalty(15.0, Vector::Constant(3, 0.5));
    Vector b(3);
    b << 0.4, 0.0, -0.2;
    const Matrix pu = annihilator(treatment_and_covariates(ds));
    const Matrix mt = pu * ds.mediators();
    const Vector grad = 2.0 * mt.transpose() * (pu * ds.outcome() - mt * b);
    const double level = 30.0;
    const double v0 = std::abs(grad(0) - level) / level;
    const double v1 = std::max(0.0, std::abs(grad(1)) - level) / level;
    const double v2 = std::abs(grad(2) + level) / level;
    EXPECT_NEAR(kkt_check(ds, pen, b), std::max({v0, v1, v2}), 1e-9);
}

TEST(CoordinateDescent, ObjectiveNonIncreasingProperty) {
    Gen g(9);
    for (int trial = 0; trial < 30; ++trial) {
        const Dataset ds = g.dataset(g.integer(40, 150), g.integer(2, 10), g.integer(0, 2));
        const OutcomeLayout lay = outcome_layout(ds, false);
        const PenaltySpec pen = penalty(std::exp(g.uniform(0.0, 5.0)), jap_beta_weights(ds));
        SolverOptions so;
        so.record_objective = true;
        const FitResult fit = fit_outcome(ds, lay, pen, so);
        ASSERT_GE(fit.objective_trace.size(), 2u);
        for (std::size_t s = 1; s < fit.objective_trace.size(); ++s) {
            const double prev = fit.objective_trace[s - 1];
            EXPECT_LE(fit.objective_trace[s], prev + 1e-12 * std::max(1.0, std::abs(prev)));
        }
    }
}

TEST(CoordinateDescent, WarmPathKeepsOptimality) {
    // Support nesting along a descending path is not guaranteed for l1; optimality at every lambda is.
    Gen g(10);
    int anomalies = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const Dataset ds = g.dataset(200, 8, 1);
        const OutcomeLayout lay = outcome_layout(ds, false);
        const Vector w = jap_beta_weights(ds);
        std::optional<Vector> warm;
        std::vector<bool> previous(8, false);
        for (double e = 8.0; e >= 3.0 - 1e-12; e -= 0.1) {
            const PenaltySpec pen = penalty(std::exp(e), w);
            SolverOptions so;
            so.warm_start = warm;
            const FitResult fit = fit_outcome(ds, lay, pen, so);
            EXPECT_LE(kkt_check(ds, pen, fit.penalized_coefs), 1e-8);
            for (Index j = 0; j < 8; ++j) {
                const bool on = fit.penalized_coefs(j) != 0.0;
                if (previous[static_cast<std::size_t>(j)] && !on) {
                    ++anomalies;
                }
                previous[static_cast<std::size_t>(j)] = on;
            }
            warm = fit.penalized_coefs;
        }
    }
    RecordProperty("path_anomalies", anomalies);
}

TEST(FitOutcome, ScaleEquivariance) {
    Gen g(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset ds = g.dataset(120, 6, 1);
        const Vector w = jap_beta_weights(ds);
        const double lambda = std::exp(g.uniform(0.0, 5.0));
        const FitResult base = fit_outcome(ds, penalty(lambda, w));
        // powers of two keep lambda / w bit-identical
        const double c2 = std::ldexp(1.0, static_cast<int>(g.integer(-6, 6)));
        const FitResult pow2 = fit_outcome(ds, penalty(lambda * c2, w * c2));
        EXPECT_EQ(pow2.penalized_coefs, base.penalized_coefs);
        const double c = g.uniform(0.1, 10.0);
        const FitResult scaled = fit_outcome(ds, penalty(lambda * c, w * c));
        EXPECT_LE((scaled.penalized_coefs - base.penalized_coefs).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(FitOutcome, LargeLambdaZerosEverything) {
    Gen g(12);
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset ds = g.dataset(g.integer(30, 100), g.integer(1, 6), 1);
        const Vector w = jap_beta_weights(ds);
        const OutcomeLayout lay = outcome_layout(ds, false);
        const Vector corr = lay.design_tilde.transpose() * lay.y_tilde;
        const double bound = 2.0 * (w.array() * corr.array().abs()).maxCoeff();
        const FitResult fit = fit_outcome(ds, penalty(bound * 1.0001, w));
        EXPECT_TRUE((fit.penalized_coefs.array() == 0.0).all());

        const MediatorLayout ml = mediator_layout(ds);
        const Vector wa = Vector::Constant(ds.p(), 0.7);
        const double abound = 2.0 * 0.7 * (ml.m_tilde.transpose() * ml.t_tilde).cwiseAbs().maxCoeff();
        const FitResult med = fit_mediator(ds, ml, penalty(abound * 1.0001, wa));
        EXPECT_TRUE((med.penalized_coefs.array() == 0.0).all());
    }
}

TEST(FitOutcome, CovariatePenaltyMovesCovariates) {
    Gen g(13);
    const Dataset ds = g.dataset(150, 4, 2);
    PenaltySpec pen = penalty(10.0, jap_beta_weights(ds));
    pen.penalize_covariates = true;
    pen.lambda_covariates = 5.0;
    const FitResult fit = fit_outcome(ds, pen);
    ASSERT_EQ(fit.penalized_coefs.size(), 6);
    ASSERT_EQ(fit.unpenalized_coefs.size(), 2); // direct effect and intercept
    EXPECT_LE(kkt_check(ds, pen, fit.penalized_coefs), 1e-8);

    pen.lambda_covariates = 1e9;
    const FitResult zeroed = fit_outcome(ds, pen);
    EXPECT_EQ(zeroed.penalized_coefs(4), 0.0);
    EXPECT_EQ(zeroed.penalized_coefs(5), 0.0);
}

TEST(FitOutcome, StandardizedFitIsStationary) {
    Gen g(14);
    for (int trial = 0; trial < 10; ++trial) {
        Dataset ds = g.dataset(100, 4, 1);
        Matrix m = ds.mediators();
        m.col(0) *= 50.0;
        ds = validate_dataset(ds.treatment(), m, ds.outcome(), ds.covariates());
        PenaltySpec pen = penalty(30.0, Vector::Ones(4));
        pen.standardize = true;
        const FitResult fit = fit_outcome(ds, pen);
        EXPECT_LE(kkt_check(ds, pen, fit.penalized_coefs), 1e-8);
        // standardizing then mapping back equals a column-rescaled problem
        Matrix ms = ds.mediators();
        const OutcomeLayout lay = outcome_layout(ds, false);
        Vector scale(4);
        for (Index j = 0; j < 4; ++j) {
            scale(j) = lay.design_tilde.col(j).norm() / std::sqrt(100.0);
            ms.col(j) /= scale(j);
        }
        const Dataset unit = validate_dataset(ds.treatment(), ms, ds.outcome(), ds.covariates());
        const FitResult ref = fit_outcome(unit, penalty(30.0, Vector::Ones(4)));
        EXPECT_LE((fit.penalized_coefs - ref.penalized_coefs.cwiseQuotient(scale)).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(FitOutcome, MaxSweepsReportsUnconverged) {
    Gen g(15);
    Dataset ds = g.dataset(100, 6, 0);
    Matrix m = ds.mediators();
    m.col(1) = m.col(0) + 0.05 * m.col(1);
    ds = validate_dataset(ds.treatment(), m, ds.outcome(), ds.covariates());
    SolverOptions so;
    so.max_sweeps = 1;
    const FitResult fit = fit_outcome(ds, penalty(1.0, Vector::Ones(6)), so);
    EXPECT_FALSE(fit.converged);
    EXPECT_EQ(fit.sweeps_used, 1);
    EXPECT_GT(fit.kkt_violation, 1e-9);
}

TEST(FitOutcome, SingularUnpenalizedBlock) {
    Gen g(16);
    const Vector t = g.binary_vector(40);
    Matrix x(40, 1);
    x.col(0) = 2.0 * t;
    const Dataset ds = validate_dataset(t, g.normal_matrix(40, 2), g.normal_vector(40), x);
    EXPECT_THROW(fit_outcome(ds, penalty(1.0, Vector::Ones(2))), SingularDesign);
}

TEST(PenaltySpec, Validation) {
    Gen g(17);
    const Dataset ds = g.dataset(40, 3, 0);
    EXPECT_THROW(fit_outcome(ds, penalty(-1.0, Vector::Ones(3))), InvalidInput);
    EXPECT_THROW(fit_outcome(ds, penalty(1.0, Vector::Ones(2))), InvalidInput);
    EXPECT_THROW(fit_mediator(ds, penalty(1.0, Vector::Zero(3))), InvalidInput);
    SolverOptions so;
    so.tol = 0.0;
    EXPECT_THROW(fit_outcome(ds, penalty(1.0, Vector::Ones(3)), so), InvalidInput);
}

TEST(JointCheck, ProjectedMatchesJointOnRandomSeeds) {
    Gen g(18);
    for (int trial = 0; trial < 20; ++trial) {
        const Index p = g.integer(1, 10);
        const Dataset ds = g.dataset(g.integer(std::max<Index>(40, 4 * p), 200), p, g.integer(0, 2));
        const Weights w = compute_weights(init_estimates(ols_summary(ds)), {2.0, 0.5, 2.0, 0.5}, Method::Jap);
        const JointCheck jc = joint_vs_projected_check(ds, penalty(2.0, w.w_alpha), penalty(30.0, w.w_beta));
        EXPECT_LE(jc.max_discrepancy, 1e-6);
    }
}

TEST(JointCheck, ZeroPenaltyBothOls) {
    Gen g(19);
    for (int trial = 0; trial < 5; ++trial) {
        const Dataset ds = g.dataset(80, 4, 1);
        const JointCheck jc =
            joint_vs_projected_check(ds, penalty(0.0, Vector::Ones(4)), penalty(0.0, Vector::Ones(4)));
        EXPECT_LE(jc.max_discrepancy, 1e-8);
    }
}

TEST(JointCheck, CovariatePenalty) {
    Gen g(20);
    const Dataset ds = g.dataset(120, 3, 2);
    PenaltySpec py = penalty(20.0, Vector::Ones(3));
    py.penalize_covariates = true;
    py.lambda_covariates = 8.0;
    EXPECT_LE(joint_vs_projected_check(ds, penalty(2.0, Vector::Ones(3)), py).max_discrepancy, 1e-6);
}
