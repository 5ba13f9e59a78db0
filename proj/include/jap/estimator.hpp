#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "jap/data_model.hpp"
#include "jap/error.hpp"
#include "jap/initializer.hpp"
#include "jap/penalized_solver.hpp"
#include "jap/projection_ols.hpp"

namespace jap {

/// Everything a fit needs that does not depend on the hyperparameters.
struct PreparedData {
    Dataset data;
    MediatorLayout mediator;
    OutcomeLayout outcome;
    OlsSummary ols;
    bool penalize_covariates = false;
};

inline PreparedData prepare(const Dataset& ds, bool penalize_covariates = false) {
    MediatorLayout med = mediator_layout(ds);
    OlsSummary ols = combine(ols_mediator(ds, med), ols_outcome(ds));
    OutcomeLayout out = outcome_layout(ds, penalize_covariates);
    return PreparedData{ds, std::move(med), std::move(out), std::move(ols), penalize_covariates};
}

struct FitSettings {
    Method method = Method::Jap;
    WeightExponents exps;
    double lambda_alpha = 1.0;
    double lambda_beta = 1.0;
    double c_tr = kDefaultTruncation;
    bool penalize_covariates = false;
    /// Level on penalized covariates; negative means "same as lambda_beta".
    double lambda_covariates = -1.0;
    bool standardize = false;
    SolverOptions solver;
};

struct FitDiagnostics {
    double kkt_alpha = 0.0;
    double kkt_beta = 0.0;
    std::int64_t sweeps = 0;
    bool converged = true;
    double objective_alpha = 0.0;
    double objective_beta = 0.0;
    /// Covariates moved into the penalized block of the outcome fit.
    Index penalized_covariates = 0;
};

struct FittedModel {
    Coefficients coefficients;
    ActiveSet active;
    Method method = Method::Jap;
    WeightExponents exps;
    double lambda_alpha = 0.0;
    double lambda_beta = 0.0;
    double lambda_covariates = 0.0;
    double c_tr = kDefaultTruncation;
    InitEstimates init;
    Weights weights;
    FitDiagnostics diagnostics;
};

/// {j : alpha_j != 0 and beta_j != 0}, compared against exact zero.
inline ActiveSet active_set(const Vector& alpha, const Vector& beta) {
    std::vector<bool> mask(static_cast<std::size_t>(alpha.size()));
    for (Index j = 0; j < alpha.size(); ++j) {
        mask[static_cast<std::size_t>(j)] = alpha(j) != 0.0 && beta(j) != 0.0;
    }
    return ActiveSet::from_mask(mask);
}

inline ActiveSet active_set(const FittedModel& fit) {
    return active_set(fit.coefficients.alpha, fit.coefficients.beta);
}

inline MediationReport mediation_effects(const FittedModel& fit, double t = 0.0, double t_prime = 1.0) {
    MediationReport r;
    r.effects = fit.coefficients.alpha.cwiseProduct(fit.coefficients.beta) * (t_prime - t);
    r.active = active_set(fit);
    r.t = t;
    r.t_prime = t_prime;
    return r;
}

inline PenaltySpec mediator_penalty(const FitSettings& s, const Weights& w) {
    PenaltySpec pen;
    pen.lambda = s.lambda_alpha;
    pen.weights = w.w_alpha;
    pen.standardize = s.standardize;
    return pen;
}

inline PenaltySpec outcome_penalty(const FitSettings& s, const Weights& w) {
    PenaltySpec pen;
    pen.lambda = s.lambda_beta;
    pen.weights = w.w_beta;
    pen.penalize_covariates = s.penalize_covariates;
    pen.lambda_covariates = s.lambda_covariates < 0.0 ? s.lambda_beta : s.lambda_covariates;
    pen.standardize = s.standardize;
    return pen;
}

/// Steps 1-3 on prepared data: truncated OLS, weights, the two penalized fits, the active set.
inline FittedModel fit_model(const PreparedData& prep, const FitSettings& s) {
    if (s.penalize_covariates != prep.penalize_covariates) {
        throw InvalidInput("prepared data was built for a different covariate-penalty setting");
    }
    const Dataset& ds = prep.data;
    const Index p = ds.p(), q = ds.q();
    FittedModel fm;
    fm.method = s.method;
    fm.exps = s.exps;
    fm.lambda_alpha = s.lambda_alpha;
    fm.lambda_beta = s.lambda_beta;
    fm.c_tr = s.c_tr;
    fm.init = init_estimates(prep.ols, s.c_tr);
    fm.weights = compute_weights(fm.init, s.exps, s.method);

    const PenaltySpec pm = mediator_penalty(s, fm.weights);
    const PenaltySpec py = outcome_penalty(s, fm.weights);
    fm.lambda_covariates = py.lambda_covariates;
    const FitResult med = fit_mediator(ds, prep.mediator, pm);
    const FitResult out = fit_outcome(ds, prep.outcome, py, s.solver);

    Coefficients& c = fm.coefficients;
    c.alpha = med.penalized_coefs;
    c.zeta_m = Eigen::Map<const Matrix>(med.unpenalized_coefs.data(), q, p);
    c.beta = out.penalized_coefs.head(p);
    c.direct_effect = out.unpenalized_coefs(0);
    const Index pc = prep.outcome.penalized_covariates;
    c.zeta_y.resize(q);
    c.zeta_y.head(q - pc) = out.unpenalized_coefs.tail(q - pc);
    c.zeta_y.tail(pc) = out.penalized_coefs.tail(pc);

    fm.diagnostics.kkt_alpha = med.kkt_violation;
    fm.diagnostics.kkt_beta = out.kkt_violation;
    fm.diagnostics.sweeps = out.sweeps_used;
    fm.diagnostics.converged = out.converged;
    fm.diagnostics.objective_alpha = med.objective;
    fm.diagnostics.objective_beta = out.objective;
    fm.diagnostics.penalized_covariates = pc;
    fm.active = active_set(c.alpha, c.beta);
    return fm;
}

inline FittedModel fit_model(const Dataset& ds, const FitSettings& s) {
    return fit_model(prepare(ds, s.penalize_covariates), s);
}

inline FittedModel jap_fit(const Dataset& ds, const WeightExponents& exps, double lambda_alpha, double lambda_beta,
                           double c_tr = kDefaultTruncation) {
    FitSettings s;
    s.method = Method::Jap;
    s.exps = exps;
    s.lambda_alpha = lambda_alpha;
    s.lambda_beta = lambda_beta;
    s.c_tr = c_tr;
    return fit_model(ds, s);
}

inline FittedModel baseline_fit(const Dataset& ds, Method method, const WeightExponents& exps, double lambda_alpha,
                                double lambda_beta, double c_tr = kDefaultTruncation) {
    if (method == Method::Jap) {
        throw InvalidInput("baseline_fit expects lasso or adaptive_lasso");
    }
    FitSettings s;
    s.method = method;
    s.exps = exps;
    s.lambda_alpha = lambda_alpha;
    s.lambda_beta = lambda_beta;
    s.c_tr = c_tr;
    return fit_model(ds, s);
}

} // namespace jap
