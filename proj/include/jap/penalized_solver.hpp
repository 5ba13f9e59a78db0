#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "jap/data_model.hpp"
#include "jap/error.hpp"
#include "jap/projection_ols.hpp"

namespace jap {

inline double soft_threshold(double z, double t) {
    if (z > t) {
        return z - t;
    }
    if (z < -t) {
        return z + t;
    }
    return 0.0;
}

/// Penalty of one model: level_j = lambda / weights[j] on the penalized coefficient j.
struct PenaltySpec {
    double lambda = 0.0;
    Vector weights;
    /// Outcome model only: move the non-intercept covariates into the penalized block.
    bool penalize_covariates = false;
    double lambda_covariates = 0.0;
    /// Fit on unit-RMS projected columns and map back; equivalent to scaling level_j by ||M~_j||/sqrt(n).
    bool standardize = false;

    void validate(Index p) const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
            throw InvalidInput("lambda must be nonnegative and finite");
        }
        if (weights.size() != p) {
            throw InvalidInput("penalty weights have length " + std::to_string(weights.size()) + ", expected " +
                               std::to_string(p));
        }
        if (!weights.allFinite() || !(weights.array() > 0.0).all()) {
            throw InvalidInput("penalty weights must be positive and finite");
        }
        if (penalize_covariates && (!(lambda_covariates >= 0.0) || !std::isfinite(lambda_covariates))) {
            throw InvalidInput("lambda_covariates must be nonnegative and finite");
        }
    }
};

struct SolverOptions {
    double tol = 1e-10;                ///< max absolute coefficient change in a sweep
    std::int64_t max_sweeps = 100000;
    std::optional<Vector> warm_start;
    double kkt_tol = 1e-9;             ///< scaled stationarity residual required once changes fall below tol
    bool record_objective = false;

    void validate() const {
        if (!(tol > 0.0)) {
            throw InvalidInput("solver tol must be positive");
        }
        if (max_sweeps < 1) {
            throw InvalidInput("max_sweeps must be at least 1");
        }
        if (!(kkt_tol > 0.0)) {
            throw InvalidInput("kkt_tol must be positive");
        }
    }
};

struct FitResult {
    /// alpha, or beta followed by any penalized covariate coefficients.
    Vector penalized_coefs;
    /// zeta_M column-stacked (q*p), or (direct effect, unpenalized covariate coefficients).
    Vector unpenalized_coefs;
    std::int64_t sweeps_used = 0;
    double kkt_violation = 0.0;
    double objective = 0.0;
    bool converged = true;
    std::vector<double> objective_trace;
};

/// Scaled stationarity residual of min ||y - D b||^2 + sum level_j |b_j| given g = D'(y - D b).
inline double kkt_from_gradient(const Vector& g, const Vector& b, const Vector& levels) {
    double worst = 0.0;
    for (Index j = 0; j < b.size(); ++j) {
        const double two_g = 2.0 * g(j);
        double v;
        if (b(j) != 0.0) {
            v = std::abs(two_g - levels(j) * (b(j) > 0.0 ? 1.0 : -1.0));
        } else {
            v = std::max(0.0, std::abs(two_g) - levels(j));
        }
        worst = std::max(worst, v / std::max(1.0, levels(j)));
    }
    return worst;
}

/// ||y - D b||^2 held as D'D, D'y and y'y.
struct GramProblem {
    Matrix gram;
    Vector xty;
    double yty = 0.0;
};

inline GramProblem make_gram(const Matrix& d, const Vector& y) {
    GramProblem g;
    g.gram = Matrix(d.cols(), d.cols());
    g.gram.setZero();
    g.gram.selfadjointView<Eigen::Lower>().rankUpdate(d.transpose());
    g.gram = g.gram.selfadjointView<Eigen::Lower>();
    g.xty = d.transpose() * y;
    g.yty = y.squaredNorm();
    return g;
}

struct CdSolution {
    Vector coefs;
    std::int64_t sweeps = 0;
    double kkt = 0.0;
    double objective = 0.0;
    bool converged = false;
    std::vector<double> trace;
};

namespace detail {

inline double gram_objective(const GramProblem& prob, const Vector& b, const Vector& g, const Vector& levels) {
    // RSS = y'y - 2 b'c + b'Gb = y'y - b'c - b'g  with g = c - Gb.
    return prob.yty - b.dot(prob.xty) - b.dot(g) + levels.dot(b.cwiseAbs());
}

} // namespace detail

/**
 * Cyclic coordinate descent on the Gram form. A sweep updates coordinates 0..k-1 in order; once the
 * largest change falls below `tol` the gradient is recomputed from scratch and the fit stops only when
 * the scaled stationarity residual is within `kkt_tol`.
 */
inline CdSolution coordinate_descent(const GramProblem& prob, const Vector& levels, const SolverOptions& opts) {
    opts.validate();
    const Index k = prob.gram.cols();
    CdSolution out;
    out.coefs = Vector::Zero(k);
    if (opts.warm_start) {
        const Vector& w = *opts.warm_start;
        if (w.size() > k) {
            throw InvalidInput("warm start longer than the coefficient vector");
        }
        out.coefs.head(w.size()) = w;
    }
    for (Index j = 0; j < k; ++j) {
        if (!(prob.gram(j, j) > 0.0)) {
            throw SingularDesign("singular design: penalized column " + std::to_string(j + 1) +
                                 " vanishes after projection");
        }
    }
    Vector& b = out.coefs;
    Vector g = prob.xty - prob.gram * b;
    if (k == 0) {
        out.converged = true;
        out.objective = prob.yty;
        return out;
    }
    if (opts.record_objective) {
        out.trace.push_back(detail::gram_objective(prob, b, g, levels));
    }
    for (std::int64_t sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
        double max_change = 0.0;
        for (Index j = 0; j < k; ++j) {
            const double gjj = prob.gram(j, j);
            const double old = b(j);
            const double z = g(j) + gjj * old;
            const double fresh = soft_threshold(z / gjj, levels(j) / (2.0 * gjj));
            const double delta = fresh - old;
            if (delta != 0.0) {
                b(j) = fresh;
                g.noalias() -= delta * prob.gram.col(j);
                max_change = std::max(max_change, std::abs(delta));
            }
        }
        out.sweeps = sweep;
        if (opts.record_objective) {
            out.trace.push_back(detail::gram_objective(prob, b, g, levels));
        }
        if (max_change < opts.tol) {
            g = prob.xty - prob.gram * b;
            out.kkt = kkt_from_gradient(g, b, levels);
            if (out.kkt <= opts.kkt_tol) {
                out.converged = true;
                break;
            }
            if (max_change == 0.0) {
                break; // fixed point; the residual is at its rounding floor
            }
        }
    }
    if (!out.converged) {
        g = prob.xty - prob.gram * b;
        out.kkt = kkt_from_gradient(g, b, levels);
    }
    out.objective = detail::gram_objective(prob, b, g, levels);
    return out;
}

// ---------------------------------------------------------------------------------------------
// Mediator model

/// Per-coefficient levels lambda / w_j, scaled by the column RMS when standardizing.
inline Vector mediator_levels(const MediatorLayout& lay, const PenaltySpec& pen, Index n) {
    const double lambda = pen.standardize ? pen.lambda * std::sqrt(lay.t_norm2 / static_cast<double>(n)) : pen.lambda;
    Vector levels(pen.weights.size());
    for (Index j = 0; j < levels.size(); ++j) {
        levels(j) = lambda / pen.weights(j);
    }
    return levels;
}

/// Closed-form alpha_j = S(z_j, lambda / (2 w_j ||P^perp T||^2)).
inline Vector mediator_alpha(const MediatorLayout& lay, const PenaltySpec& pen, Index n) {
    const double lambda = pen.standardize ? pen.lambda * std::sqrt(lay.t_norm2 / static_cast<double>(n)) : pen.lambda;
    Vector alpha(lay.z.size());
    for (Index j = 0; j < alpha.size(); ++j) {
        alpha(j) = soft_threshold(lay.z(j), lambda / (2.0 * pen.weights(j) * lay.t_norm2));
    }
    return alpha;
}

inline FitResult fit_mediator(const Dataset& ds, const MediatorLayout& lay, const PenaltySpec& pen) {
    const Index p = ds.p();
    pen.validate(p);
    const Vector levels = mediator_levels(lay, pen, ds.n());
    FitResult out;
    out.penalized_coefs = mediator_alpha(lay, pen, ds.n());
    const Vector& alpha = out.penalized_coefs;
    const Matrix zeta = lay.x_projector.coefficients(Matrix(ds.mediators() - ds.treatment() * alpha.transpose()));
    out.unpenalized_coefs = Eigen::Map<const Vector>(zeta.data(), zeta.size());
    // Stationarity per column: 2 t~'(M~_j - alpha_j t~) = level_j sgn(alpha_j).
    const Vector g = lay.t_norm2 * (lay.z - alpha);
    out.kkt_violation = kkt_from_gradient(g, alpha, levels);
    double obj = 0.0;
    for (Index j = 0; j < p; ++j) {
        obj += (lay.m_tilde.col(j) - alpha(j) * lay.t_tilde).squaredNorm() + levels(j) * std::abs(alpha(j));
    }
    out.objective = obj;
    out.sweeps_used = 1;
    out.converged = true;
    return out;
}

inline FitResult fit_mediator(const Dataset& ds, const PenaltySpec& pen) {
    return fit_mediator(ds, mediator_layout(ds), pen);
}

// ---------------------------------------------------------------------------------------------
// Outcome model

/**
 * @brief The outcome model split into its unpenalized basis U and penalized design D, projected.
 *
 * U = (T, X), or (T, intercept) when covariates are penalized; D = M, or (M, X without intercept).
 */
struct OutcomeLayout {
    Projector u_projector;
    Matrix design;       ///< D
    Matrix design_tilde; ///< P_U^perp D
    Vector y_tilde;      ///< P_U^perp Y
    GramProblem gram;    ///< of (design_tilde, y_tilde)
    Index p = 0;
    Index penalized_covariates = 0;
};

inline OutcomeLayout outcome_layout(const Dataset& ds, bool penalize_covariates) {
    const Index n = ds.n(), p = ds.p(), q = ds.q();
    const Index pc = penalize_covariates ? q - 1 : 0;
    const Index ucols = 1 + q - pc;
    Matrix u(n, ucols);
    u.col(0) = ds.treatment();
    u.rightCols(ucols - 1) = ds.covariates().leftCols(ucols - 1);
    std::vector<std::string> names{ds.treatment_name()};
    for (Index c = 0; c < ucols - 1; ++c) {
        names.push_back(ds.covariate_names()[static_cast<std::size_t>(c)]);
    }
    OutcomeLayout lay{Projector(std::move(u), std::move(names)), Matrix(n, p + pc), {}, {}, {}, p, pc};
    lay.design.leftCols(p) = ds.mediators();
    lay.design.rightCols(pc) = ds.covariates().rightCols(pc);
    lay.design_tilde = lay.u_projector.residualize(lay.design);
    lay.y_tilde = lay.u_projector.residualize(ds.outcome());
    lay.gram = make_gram(lay.design_tilde, lay.y_tilde);
    return lay;
}

/// levels_j = lambda / w_j for mediators, lambda_covariates for penalized covariates.
inline Vector outcome_levels(const OutcomeLayout& lay, const PenaltySpec& pen, Index n) {
    Vector levels(lay.p + lay.penalized_covariates);
    for (Index j = 0; j < lay.p; ++j) {
        levels(j) = pen.lambda / pen.weights(j);
    }
    levels.tail(lay.penalized_covariates).setConstant(pen.lambda_covariates);
    if (pen.standardize) {
        for (Index j = 0; j < levels.size(); ++j) {
            levels(j) *= std::sqrt(lay.gram.gram(j, j) / static_cast<double>(n));
        }
    }
    return levels;
}

/// Recovers (eta, zeta_Y unpenalized part) = U^+ (Y - D b).
inline Vector outcome_unpenalized(const Dataset& ds, const OutcomeLayout& lay, const Vector& b) {
    return lay.u_projector.coefficients(Vector(ds.outcome() - lay.design * b));
}

inline FitResult fit_outcome(const Dataset& ds, const OutcomeLayout& lay, const PenaltySpec& pen,
                             const SolverOptions& opts = {}) {
    pen.validate(ds.p());
    if (pen.penalize_covariates != (lay.penalized_covariates > 0) && ds.q() > 1) {
        throw InvalidInput("outcome layout does not match the covariate penalty flag");
    }
    const Vector levels = outcome_levels(lay, pen, ds.n());
    CdSolution cd = coordinate_descent(lay.gram, levels, opts);
    FitResult out;
    out.penalized_coefs = std::move(cd.coefs);
    out.unpenalized_coefs = outcome_unpenalized(ds, lay, out.penalized_coefs);
    out.sweeps_used = cd.sweeps;
    out.kkt_violation = cd.kkt;
    out.objective = cd.objective;
    out.converged = cd.converged;
    out.objective_trace = std::move(cd.trace);
    return out;
}

inline FitResult fit_outcome(const Dataset& ds, const PenaltySpec& pen, const SolverOptions& opts = {}) {
    return fit_outcome(ds, outcome_layout(ds, pen.penalize_covariates), pen, opts);
}

/**
 * Stationarity residual of the outcome fit recomputed from the data: projections, residual and
 * gradient are formed afresh rather than taken from the solver's Gram cache. `b` is beta, followed by
 * the penalized covariate coefficients when `pen.penalize_covariates` is set.
 */
inline double kkt_check(const Dataset& ds, const PenaltySpec& pen, const Vector& b) {
    pen.validate(ds.p());
    const Index pc = pen.penalize_covariates ? ds.q() - 1 : 0;
    if (b.size() != ds.p() + pc) {
        throw InvalidInput("kkt_check: coefficient vector has length " + std::to_string(b.size()) + ", expected " +
                           std::to_string(ds.p() + pc));
    }
    Matrix u(ds.n(), 1 + ds.q() - pc);
    u.col(0) = ds.treatment();
    u.rightCols(u.cols() - 1) = ds.covariates().leftCols(u.cols() - 1);
    Matrix d(ds.n(), b.size());
    d.leftCols(ds.p()) = ds.mediators();
    d.rightCols(pc) = ds.covariates().rightCols(pc);
    const Projector proj(u);
    const Matrix dt = proj.residualize(d);
    const Vector yt = proj.residualize(ds.outcome());
    const Vector resid = yt - dt * b;
    const Vector g = dt.transpose() * resid;
    Vector levels(b.size());
    for (Index j = 0; j < ds.p(); ++j) {
        levels(j) = pen.lambda / pen.weights(j);
    }
    levels.tail(pc).setConstant(pen.lambda_covariates);
    if (pen.standardize) {
        for (Index j = 0; j < levels.size(); ++j) {
            levels(j) *= dt.col(j).norm() / std::sqrt(static_cast<double>(ds.n()));
        }
    }
    return kkt_from_gradient(g, b, levels);
}

// ---------------------------------------------------------------------------------------------
// Joint-objective cross-check

struct FistaOptions {
    double tol = 1e-10;   ///< composite gradient-mapping residual, relative to max(1, ||c||_inf)
    std::int64_t max_iter = 2000000;
};

/// Accelerated proximal gradient with adaptive restart on min b'Gb - 2c'b + sum level_j |b_j|.
inline Vector fista(const Matrix& gram, const Vector& c, const Vector& levels, const FistaOptions& opts = {}) {
    const Index k = gram.cols();
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
    const double lip = 2.0 * es.eigenvalues().maxCoeff();
    if (!(lip > 0.0)) {
        return Vector::Zero(k);
    }
    const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
    Vector x = Vector::Zero(k);
    Vector y = x;
    double t = 1.0;
    auto prox = [&](const Vector& v) {
        Vector out(k);
        const Vector step = v - (2.0 * (gram * v - c)) / lip;
        for (Index j = 0; j < k; ++j) {
            out(j) = soft_threshold(step(j), levels(j) / lip);
        }
        return out;
    };
    for (std::int64_t it = 0; it < opts.max_iter; ++it) {
        const Vector xn = prox(y);
        const double residual = lip * (xn - y).cwiseAbs().maxCoeff();
        if (residual <= opts.tol * scale && (xn - x).cwiseAbs().maxCoeff() <= opts.tol * scale / lip) {
            return xn;
        }
        const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        if ((y - xn).dot(xn - x) > 0.0) {
            // momentum points uphill: restart
            y = xn;
            t = 1.0;
        } else {
            y = xn + ((t - 1.0) / tn) * (xn - x);
            t = tn;
        }
        x = xn;
    }
    throw ConvergenceError("proximal gradient did not converge within " + std::to_string(opts.max_iter) +
                           " iterations");
}

struct JointCheck {
    double max_discrepancy = 0.0;
    double alpha_discrepancy = 0.0;
    double outcome_discrepancy = 0.0;
};

/**
 * Solves both joint objectives over all coefficients (penalized and unpenalized) by proximal gradient
 * and compares them with the projected two-step fits.
 */
inline JointCheck joint_vs_projected_check(const Dataset& ds, const PenaltySpec& pen_m, const PenaltySpec& pen_y,
                                           const SolverOptions& opts = {}, const FistaOptions& fopts = {}) {
    const Index n = ds.n(), p = ds.p(), q = ds.q();
    JointCheck out;

    const FitResult med = fit_mediator(ds, pen_m);
    {
        Matrix d(n, 1 + q);
        d.col(0) = ds.treatment();
        d.rightCols(q) = ds.covariates();
        const Matrix gram = d.transpose() * d;
        const double tn = pen_m.standardize
                              ? std::sqrt(mediator_layout(ds).t_norm2 / static_cast<double>(n))
                              : 1.0;
        for (Index j = 0; j < p; ++j) {
            Vector levels = Vector::Zero(1 + q);
            levels(0) = pen_m.lambda / pen_m.weights(j) * tn;
            const Vector c = d.transpose() * ds.mediators().col(j);
            const Vector sol = fista(gram, c, levels, fopts);
            out.alpha_discrepancy = std::max(out.alpha_discrepancy, std::abs(sol(0) - med.penalized_coefs(j)));
            for (Index r = 0; r < q; ++r) {
                out.alpha_discrepancy =
                    std::max(out.alpha_discrepancy, std::abs(sol(1 + r) - med.unpenalized_coefs(j * q + r)));
            }
        }
    }

    const OutcomeLayout lay = outcome_layout(ds, pen_y.penalize_covariates);
    const FitResult fit = fit_outcome(ds, lay, pen_y, opts);
    {
        const Index kpen = lay.design.cols();
        const Index ku = lay.u_projector.cols();
        Matrix d(n, kpen + ku);
        d.leftCols(kpen) = lay.design;
        d.rightCols(ku) = lay.u_projector.basis();
        const Matrix gram = d.transpose() * d;
        const Vector c = d.transpose() * ds.outcome();
        Vector levels = Vector::Zero(kpen + ku);
        levels.head(kpen) = outcome_levels(lay, pen_y, n);
        const Vector sol = fista(gram, c, levels, fopts);
        const double db = (sol.head(kpen) - fit.penalized_coefs).cwiseAbs().maxCoeff();
        const double du = (sol.tail(ku) - fit.unpenalized_coefs).cwiseAbs().maxCoeff();
        out.outcome_discrepancy = std::max(db, du);
    }
    out.max_discrepancy = std::max(out.alpha_discrepancy, out.outcome_discrepancy);
    return out;
}

} // namespace jap
