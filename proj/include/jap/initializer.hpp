#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <utility>

#include "jap/data_model.hpp"
#include "jap/error.hpp"
#include "jap/projection_ols.hpp"

namespace jap {

/// Default truncation multiplier on the OLS standard errors.
inline constexpr double kDefaultTruncation = 5.0;

enum class Method { Jap, AdaptiveLasso, Lasso };

inline std::string to_string(Method m) {
    switch (m) {
    case Method::Jap:
        return "jap";
    case Method::AdaptiveLasso:
        return "adaptive_lasso";
    case Method::Lasso:
        return "lasso";
    }
    return "unknown";
}

inline Method parse_method(std::string_view s) {
    if (s == "jap") {
        return Method::Jap;
    }
    if (s == "adaptive_lasso" || s == "al" || s == "alasso") {
        return Method::AdaptiveLasso;
    }
    if (s == "lasso") {
        return Method::Lasso;
    }
    throw InvalidInput("unknown method '" + std::string(s) + "' (expected jap, adaptive_lasso or lasso)");
}

/// sgn(x) * (max(|x| - l, 0) + l) with sgn(0) = +1, so |result| >= l always.
inline double truncate(double x, double l) {
    if (!(l > 0.0)) {
        throw InvalidInput("truncate: level must be positive");
    }
    if (std::abs(x) >= l) {
        return x; // (|x| - l) + l need not round back to |x|
    }
    return x < 0.0 ? -l : l;
}

struct InitEstimates {
    Vector alpha0;
    Vector beta0;
    Vector trunc_alpha;
    Vector trunc_beta;
    double c_tr = kDefaultTruncation;
};

inline InitEstimates init_estimates(const OlsSummary& ols, double c_tr = kDefaultTruncation) {
    if (!(c_tr > 0.0) || !std::isfinite(c_tr)) {
        throw InvalidInput("c_tr must be positive and finite");
    }
    const Index p = ols.alpha_ols.size();
    InitEstimates out;
    out.c_tr = c_tr;
    out.trunc_alpha = c_tr * ols.se_alpha;
    out.trunc_beta = c_tr * ols.se_beta;
    out.alpha0.resize(p);
    out.beta0.resize(p);
    for (Index j = 0; j < p; ++j) {
        out.alpha0(j) = truncate(ols.alpha_ols(j), out.trunc_alpha(j));
        out.beta0(j) = truncate(ols.beta_ols(j), out.trunc_beta(j));
    }
    return out;
}

/// Exponents of the pathway weights. Lasso ignores all four; adaptive lasso reads only the etas.
struct WeightExponents {
    double gamma_alpha = 2.0;
    double eta_alpha = 0.5;
    double gamma_beta = 2.0;
    double eta_beta = 0.5;

    void validate(Method m) const {
        if (m == Method::Lasso) {
            return;
        }
        auto check = [&](double gamma, double eta, const char* which) {
            if (!std::isfinite(gamma) || !std::isfinite(eta) || !(eta > 0.0)) {
                throw InvalidInput(std::string("eta_") + which + " must be positive and finite");
            }
            if (m == Method::Jap && !(gamma > 2.0 * eta)) {
                throw InvalidInput(std::string("gamma_") + which + " must exceed 2*eta_" + which);
            }
        };
        check(gamma_alpha, eta_alpha, "alpha");
        check(gamma_beta, eta_beta, "beta");
    }
};

struct Weights {
    Vector w_alpha;
    Vector w_beta;
    Method mode = Method::Jap;
};

inline Weights compute_weights(const InitEstimates& init, const WeightExponents& exps, Method mode) {
    exps.validate(mode);
    const Index p = init.alpha0.size();
    Weights w{Vector::Ones(p), Vector::Ones(p), mode};
    if (mode == Method::Lasso) {
        return w;
    }
    for (Index j = 0; j < p; ++j) {
        const double a = std::abs(init.alpha0(j));
        const double b = std::abs(init.beta0(j));
        w.w_alpha(j) = std::pow(a, 2.0 * exps.eta_alpha);
        w.w_beta(j) = std::pow(b, 2.0 * exps.eta_beta);
        if (mode == Method::Jap) {
            w.w_alpha(j) += std::pow(a * b, exps.gamma_alpha);
            w.w_beta(j) += std::pow(a * b, exps.gamma_beta);
        }
    }
    if (!(w.w_alpha.array() > 0.0).all() || !w.w_alpha.allFinite() || !(w.w_beta.array() > 0.0).all() ||
        !w.w_beta.allFinite()) {
        throw ComputationError("penalty weights must be positive and finite");
    }
    return w;
}

/// w_JAP / w_AL for mediator j in both models.
inline std::pair<double, double> weight_ratio(const InitEstimates& init, const WeightExponents& exps, Index j) {
    const Weights jap = compute_weights(init, exps, Method::Jap);
    const Weights al = compute_weights(init, exps, Method::AdaptiveLasso);
    return {jap.w_alpha(j) / al.w_alpha(j), jap.w_beta(j) / al.w_beta(j)};
}

} // namespace jap
