#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "jap/csv.hpp"
#include "jap/data_model.hpp"
#include "jap/error.hpp"
#include "jap/estimator.hpp"
#include "jap/initializer.hpp"
#include "jap/parallel.hpp"
#include "jap/penalized_solver.hpp"

namespace jap {

enum class Target { Mediator, Outcome };

inline const char* to_string(Target t) {
    return t == Target::Mediator ? "mediator" : "outcome";
}

/// lambda = exp(lo + i*step) for i = 0 .. floor((hi - lo)/step).
struct LogLambdaRange {
    double lo = 0.0;
    double hi = 5.0;
    double step = 0.1;

    std::vector<double> exponents() const {
        if (!(step > 0.0) || !(hi >= lo) || !std::isfinite(lo) || !std::isfinite(hi)) {
            throw InvalidInput("log-lambda range needs finite lo <= hi and step > 0");
        }
        const auto count = static_cast<std::int64_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(count));
        for (std::int64_t i = 0; i < count; ++i) {
            out.push_back(lo + static_cast<double>(i) * step);
        }
        return out;
    }

    std::vector<double> values() const {
        std::vector<double> out = exponents();
        for (double& x : out) {
            x = std::exp(x);
        }
        return out;
    }
};

struct TuningCell {
    double gamma = std::numeric_limits<double>::quiet_NaN(); ///< NaN when the method has no gamma
    double eta = std::numeric_limits<double>::quiet_NaN();   ///< NaN for lasso
};

struct TuningGrid {
    std::vector<double> gamma_values{0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0};
    std::vector<double> eta_values{0.25, 0.5, 0.75, 1.0, 1.25};
    LogLambdaRange log_lambda;
    int folds = 5;

    static TuningGrid mediator_default() {
        TuningGrid g;
        g.log_lambda = {0.0, 5.0, 0.1};
        return g;
    }

    static TuningGrid outcome_default() {
        TuningGrid g;
        g.log_lambda = {3.0, 8.0, 0.1};
        return g;
    }

    /// Feasible (gamma, eta) pairs in lexicographic order: gamma > 2 eta for JAP, eta alone for the
    /// adaptive lasso, one empty cell for the lasso.
    std::vector<TuningCell> cells(Method m) const {
        std::vector<double> gs = gamma_values, es = eta_values;
        std::sort(gs.begin(), gs.end());
        std::sort(es.begin(), es.end());
        gs.erase(std::unique(gs.begin(), gs.end()), gs.end());
        es.erase(std::unique(es.begin(), es.end()), es.end());
        std::vector<TuningCell> out;
        if (m == Method::Lasso) {
            out.push_back({});
        } else if (m == Method::AdaptiveLasso) {
            for (double e : es) {
                if (e > 0.0) {
                    out.push_back({std::numeric_limits<double>::quiet_NaN(), e});
                }
            }
        } else {
            for (double g : gs) {
                for (double e : es) {
                    if (e > 0.0 && g > 2.0 * e) {
                        out.push_back({g, e});
                    }
                }
            }
        }
        return out;
    }

    void validate(Method m) const {
        if (folds < 2) {
            throw InvalidInput("tuning needs at least 2 folds");
        }
        (void)log_lambda.exponents();
        if (cells(m).empty()) {
            throw InvalidInput("tuning grid has no feasible (gamma, eta) cell");
        }
    }
};

/// Shuffled partition of {0..n-1} into k folds; the first n % k folds get one extra index.
inline std::vector<std::vector<Index>> kfold_split(Index n, int k, std::uint64_t seed) {
    if (k < 1 || k > n) {
        throw InvalidInput("kfold_split: need 1 <= k <= n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
    }
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<Index>> folds(static_cast<std::size_t>(k));
    const Index base = n / k, extra = n % k;
    Index pos = 0;
    for (Index f = 0; f < k; ++f) {
        const Index size = base + (f < extra ? 1 : 0);
        auto& fold = folds[static_cast<std::size_t>(f)];
        fold.assign(perm.begin() + pos, perm.begin() + pos + size);
        std::sort(fold.begin(), fold.end());
        pos += size;
    }
    return folds;
}

/// Indices of {0..n-1} not in `fold` (which must be sorted).
inline std::vector<Index> complement(const std::vector<Index>& fold, Index n) {
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(n) - fold.size());
    std::size_t k = 0;
    for (Index i = 0; i < n; ++i) {
        if (k < fold.size() && fold[k] == i) {
            ++k;
        } else {
            out.push_back(i);
        }
    }
    return out;
}

/// Cohen's kappa of two inclusion indicators over p mediators; 0 when chance agreement is 1.
inline double selection_kappa(const std::vector<bool>& s1, const std::vector<bool>& s2) {
    if (s1.size() != s2.size() || s1.empty()) {
        throw InvalidInput("selection_kappa: supports must have the same nonzero length");
    }
    double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
    for (std::size_t j = 0; j < s1.size(); ++j) {
        if (s1[j] && s2[j]) {
            ++n11;
        } else if (s1[j]) {
            ++n10;
        } else if (s2[j]) {
            ++n01;
        } else {
            ++n00;
        }
    }
    const double p = static_cast<double>(s1.size());
    const double pa = (n11 + n00) / p;
    const double pe = ((n11 + n10) * (n11 + n01) + (n01 + n00) * (n10 + n00)) / (p * p);
    if (pe == 1.0) {
        return 0.0;
    }
    return (pa - pe) / (1.0 - pe);
}

inline double selection_kappa(const ActiveSet& s1, const ActiveSet& s2, Index p) {
    for (const ActiveSet* s : {&s1, &s2}) {
        for (Index j : s->indices()) {
            if (j < 0 || j >= p) {
                throw InvalidInput("selection_kappa: index " + std::to_string(j) + " outside [0, p)");
            }
        }
    }
    ActiveSet a(s1.indices(), p), b(s2.indices(), p);
    return selection_kappa(a.mask(), b.mask());
}

/// Mean pairwise kappa over all unordered pairs of supports.
inline double vss(const std::vector<std::vector<bool>>& supports) {
    const std::size_t k = supports.size();
    if (k < 2) {
        throw InvalidInput("vss needs at least 2 supports");
    }
    double sum = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) {
            sum += selection_kappa(supports[a], supports[b]);
        }
    }
    return sum / static_cast<double>(k * (k - 1) / 2);
}

inline double vss(const std::vector<ActiveSet>& supports, Index p) {
    std::vector<std::vector<bool>> masks;
    for (const auto& s : supports) {
        masks.push_back(ActiveSet(s.indices(), p).mask());
    }
    return vss(masks);
}

/// Residual mean square of one model on the full data.
inline double mse_full(const Coefficients& c, const Dataset& ds, Target target) {
    const Index n = ds.n(), p = ds.p(), q = ds.q();
    if (target == Target::Mediator) {
        if (c.alpha.size() != p || c.zeta_m.rows() != q || c.zeta_m.cols() != p) {
            throw InvalidInput("mse_full: mediator coefficients do not match the dataset");
        }
        const Matrix r = ds.mediators() - ds.treatment() * c.alpha.transpose() - ds.covariates() * c.zeta_m;
        return r.squaredNorm() / static_cast<double>(n * p);
    }
    if (c.beta.size() != p || c.zeta_y.size() != q) {
        throw InvalidInput("mse_full: outcome coefficients do not match the dataset");
    }
    const Vector r =
        ds.outcome() - c.direct_effect * ds.treatment() - ds.covariates() * c.zeta_y - ds.mediators() * c.beta;
    return r.squaredNorm() / static_cast<double>(n);
}

inline double mse_full(const FittedModel& fit, const Dataset& ds, Target target) {
    return mse_full(fit.coefficients, ds, target);
}

struct TuningRow {
    TuningCell cell;
    double lambda = 0.0;
    double vss = 0.0;
    double mse = 0.0;
    bool chosen = false;
};

struct TuningResult {
    Target target = Target::Mediator;
    Method method = Method::Jap;
    std::vector<TuningRow> table;
    std::size_t chosen_index = 0;
    /// Worst scaled stationarity residual and count over every outcome fit made while tuning.
    double max_kkt = 0.0;
    std::int64_t outcome_fits = 0;
    std::int64_t unconverged_fits = 0;

    const TuningRow& chosen() const { return table.at(chosen_index); }
};

/// Shared settings for tuning runs; `on_outcome_fit` sees every outcome fit (must be thread safe).
struct TuningOptions {
    std::uint64_t seed = 1;
    double c_tr = kDefaultTruncation;
    bool penalize_covariates = false;
    double lambda_covariates = -1.0;
    bool standardize = false;
    SolverOptions solver;
    unsigned threads = 1;
    std::function<void(const PreparedData&, const PenaltySpec&, const FitResult&)> on_outcome_fit;
};

namespace detail {

inline WeightExponents exponents_for(const TuningCell& cell, Target target) {
    WeightExponents e;
    if (!std::isnan(cell.eta)) {
        if (target == Target::Mediator) {
            e.eta_alpha = cell.eta;
        } else {
            e.eta_beta = cell.eta;
        }
    }
    if (!std::isnan(cell.gamma)) {
        if (target == Target::Mediator) {
            e.gamma_alpha = cell.gamma;
        } else {
            e.gamma_beta = cell.gamma;
        }
    }
    // The untuned model's exponents only need to be admissible; its fit is not used.
    if (target == Target::Mediator) {
        e.gamma_beta = std::max(e.gamma_beta, 2.0 * e.eta_beta + 1.0);
    } else {
        e.gamma_alpha = std::max(e.gamma_alpha, 2.0 * e.eta_alpha + 1.0);
    }
    return e;
}

inline Weights cell_weights(const PreparedData& prep, const TuningCell& cell, Target target, Method m, double c_tr) {
    const InitEstimates init = init_estimates(prep.ols, c_tr);
    return compute_weights(init, exponents_for(cell, target), m);
}

struct Tally {
    double max_kkt = 0.0;
    std::int64_t fits = 0;
    std::int64_t unconverged = 0;
};

/// Supports of the target model along a descending lambda path; `lambdas` must be descending.
inline std::vector<std::vector<bool>> support_path(const PreparedData& prep, const Weights& w, Target target,
                                                   const std::vector<double>& lambdas, const TuningOptions& opts,
                                                   Tally& tally) {
    const Index p = prep.data.p();
    std::vector<std::vector<bool>> out;
    out.reserve(lambdas.size());
    if (target == Target::Mediator) {
        PenaltySpec pen;
        pen.weights = w.w_alpha;
        pen.standardize = opts.standardize;
        for (double lam : lambdas) {
            pen.lambda = lam;
            const Vector alpha = mediator_alpha(prep.mediator, pen, prep.data.n());
            std::vector<bool> s(static_cast<std::size_t>(p));
            for (Index j = 0; j < p; ++j) {
                s[static_cast<std::size_t>(j)] = alpha(j) != 0.0;
            }
            out.push_back(std::move(s));
        }
        return out;
    }
    PenaltySpec pen;
    pen.weights = w.w_beta;
    pen.penalize_covariates = opts.penalize_covariates;
    pen.standardize = opts.standardize;
    SolverOptions so = opts.solver;
    for (double lam : lambdas) {
        pen.lambda = lam;
        pen.lambda_covariates = opts.lambda_covariates < 0.0 ? lam : opts.lambda_covariates;
        FitResult fit = fit_outcome(prep.data, prep.outcome, pen, so);
        tally.max_kkt = std::max(tally.max_kkt, fit.kkt_violation);
        ++tally.fits;
        if (!fit.converged) {
            ++tally.unconverged;
        }
        if (opts.on_outcome_fit) {
            opts.on_outcome_fit(prep, pen, fit);
        }
        std::vector<bool> s(static_cast<std::size_t>(p));
        for (Index j = 0; j < p; ++j) {
            s[static_cast<std::size_t>(j)] = fit.penalized_coefs(j) != 0.0;
        }
        out.push_back(std::move(s));
        so.warm_start = std::move(fit.penalized_coefs);
    }
    return out;
}

struct CellOutcome {
    TuningRow row;
    Tally tally;
};

inline CellOutcome evaluate_cell(const PreparedData& full, const std::vector<PreparedData>& folds,
                                 const TuningCell& cell, Target target, Method method,
                                 const std::vector<double>& lambdas_desc, const TuningOptions& opts) {
    CellOutcome co;
    co.row.cell = cell;
    std::vector<std::vector<std::vector<bool>>> paths; // [fold][lambda]
    paths.reserve(folds.size());
    for (const auto& f : folds) {
        const Weights w = cell_weights(f, cell, target, method, opts.c_tr);
        paths.push_back(support_path(f, w, target, lambdas_desc, opts, co.tally));
    }
    // Walk from the smallest lambda up so that the first strict improvement wins ties toward small lambda.
    double best_vss = -std::numeric_limits<double>::infinity();
    std::size_t best = lambdas_desc.size();
    for (std::size_t i = lambdas_desc.size(); i-- > 0;) {
        std::vector<std::vector<bool>> supports;
        supports.reserve(folds.size());
        for (const auto& path : paths) {
            supports.push_back(path[i]);
        }
        const double v = vss(supports);
        if (v > best_vss) {
            best_vss = v;
            best = i;
        }
    }
    co.row.lambda = lambdas_desc[best];
    co.row.vss = best_vss;

    // Full-data refit of the target model at (gamma, eta, lambda(gamma, eta)).
    const Weights w = cell_weights(full, cell, target, method, opts.c_tr);
    Coefficients c;
    if (target == Target::Mediator) {
        PenaltySpec pen;
        pen.lambda = co.row.lambda;
        pen.weights = w.w_alpha;
        pen.standardize = opts.standardize;
        const FitResult fit = fit_mediator(full.data, full.mediator, pen);
        c.alpha = fit.penalized_coefs;
        c.zeta_m = Eigen::Map<const Matrix>(fit.unpenalized_coefs.data(), full.data.q(), full.data.p());
    } else {
        PenaltySpec pen;
        pen.lambda = co.row.lambda;
        pen.weights = w.w_beta;
        pen.penalize_covariates = opts.penalize_covariates;
        pen.lambda_covariates = opts.lambda_covariates < 0.0 ? co.row.lambda : opts.lambda_covariates;
        pen.standardize = opts.standardize;
        const FitResult fit = fit_outcome(full.data, full.outcome, pen, opts.solver);
        co.tally.max_kkt = std::max(co.tally.max_kkt, fit.kkt_violation);
        ++co.tally.fits;
        if (!fit.converged) {
            ++co.tally.unconverged;
        }
        if (opts.on_outcome_fit) {
            opts.on_outcome_fit(full, pen, fit);
        }
        const Index p = full.data.p(), q = full.data.q();
        const Index pc = full.outcome.penalized_covariates;
        c.beta = fit.penalized_coefs.head(p);
        c.direct_effect = fit.unpenalized_coefs(0);
        c.zeta_y.resize(q);
        c.zeta_y.head(q - pc) = fit.unpenalized_coefs.tail(q - pc);
        c.zeta_y.tail(pc) = fit.penalized_coefs.tail(pc);
    }
    co.row.mse = mse_full(c, full.data, target);
    return co;
}

} // namespace detail

/// Fold-complement preparations for a k-fold split, built once and shared by every grid cell.
inline std::vector<PreparedData> prepare_folds(const Dataset& ds, int k, std::uint64_t seed, bool penalize_covariates,
                                               unsigned threads = 1) {
    const auto folds = kfold_split(ds.n(), k, seed);
    return parallel_map(folds.size(), threads, [&](std::size_t f) {
        const std::vector<Index> keep = complement(folds[f], ds.n());
        return prepare(ds.rows(keep), penalize_covariates);
    });
}

/**
 * Two-stage selection for one model: for each feasible (gamma, eta), lambda(gamma, eta) is the smallest
 * lambda with the highest VSS of the fold-complement supports; the row with the smallest full-data MSE
 * wins, ties going to the first row in lexicographic (gamma, eta) order.
 */
inline TuningResult tune_model(const PreparedData& full, const std::vector<PreparedData>& folds,
                               const TuningGrid& grid, Target target, Method method, const TuningOptions& opts) {
    grid.validate(method);
    if (folds.size() < 2) {
        throw InvalidInput("tuning needs at least 2 folds");
    }
    std::vector<double> lambdas = grid.log_lambda.values();
    std::reverse(lambdas.begin(), lambdas.end());
    const std::vector<TuningCell> cells = grid.cells(method);
    auto results = parallel_map(cells.size(), opts.threads, [&](std::size_t i) {
        return detail::evaluate_cell(full, folds, cells[i], target, method, lambdas, opts);
    });
    TuningResult out;
    out.target = target;
    out.method = method;
    double best_mse = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < results.size(); ++i) {
        out.table.push_back(results[i].row);
        out.max_kkt = std::max(out.max_kkt, results[i].tally.max_kkt);
        out.outcome_fits += results[i].tally.fits;
        out.unconverged_fits += results[i].tally.unconverged;
        if (results[i].row.mse < best_mse) {
            best_mse = results[i].row.mse;
            out.chosen_index = i;
        }
    }
    if (!std::isfinite(best_mse)) {
        throw ComputationError("tuning produced no finite MSE");
    }
    out.table[out.chosen_index].chosen = true;
    return out;
}

inline TuningResult tune_model(const Dataset& ds, const TuningGrid& grid, Target target, Method method,
                               const TuningOptions& opts = {}) {
    grid.validate(method);
    const PreparedData full = prepare(ds, opts.penalize_covariates);
    const auto folds = prepare_folds(ds, grid.folds, opts.seed, opts.penalize_covariates, opts.threads);
    return tune_model(full, folds, grid, target, method, opts);
}

struct TunedFit {
    TuningResult mediator;
    TuningResult outcome;
    FitSettings settings;
    FittedModel model;
};

/// Tunes both models independently on a shared split and fits the chosen hyperparameters.
inline TunedFit tune_and_fit(const Dataset& ds, Method method, const TuningGrid& mediator_grid,
                             const TuningGrid& outcome_grid, const TuningOptions& opts = {}) {
    mediator_grid.validate(method);
    outcome_grid.validate(method);
    const PreparedData full = prepare(ds, opts.penalize_covariates);
    const auto med_folds = prepare_folds(ds, mediator_grid.folds, opts.seed, opts.penalize_covariates, opts.threads);
    TunedFit out;
    out.mediator = tune_model(full, med_folds, mediator_grid, Target::Mediator, method, opts);
    if (outcome_grid.folds == mediator_grid.folds) {
        out.outcome = tune_model(full, med_folds, outcome_grid, Target::Outcome, method, opts);
    } else {
        const auto folds = prepare_folds(ds, outcome_grid.folds, opts.seed, opts.penalize_covariates, opts.threads);
        out.outcome = tune_model(full, folds, outcome_grid, Target::Outcome, method, opts);
    }
    FitSettings& s = out.settings;
    s.method = method;
    const TuningCell& cm = out.mediator.chosen().cell;
    const TuningCell& cy = out.outcome.chosen().cell;
    WeightExponents e;
    if (!std::isnan(cm.eta)) {
        e.eta_alpha = cm.eta;
    }
    if (!std::isnan(cm.gamma)) {
        e.gamma_alpha = cm.gamma;
    }
    if (!std::isnan(cy.eta)) {
        e.eta_beta = cy.eta;
    }
    if (!std::isnan(cy.gamma)) {
        e.gamma_beta = cy.gamma;
    }
    s.exps = e;
    s.lambda_alpha = out.mediator.chosen().lambda;
    s.lambda_beta = out.outcome.chosen().lambda;
    s.c_tr = opts.c_tr;
    s.penalize_covariates = opts.penalize_covariates;
    s.lambda_covariates = opts.lambda_covariates;
    s.standardize = opts.standardize;
    s.solver = opts.solver;
    out.model = fit_model(full, s);
    return out;
}

/// Writes one or more tuning tables as CSV (model, gamma, eta, lambda, vss, mse, chosen).
inline void write_tuning_csv(std::ostream& os, const std::vector<const TuningResult*>& results) {
    auto num = [](double x) { return std::isnan(x) ? std::string("NA") : csv::format_double(x); };
    os << "model,gamma,eta,lambda,vss,mse,chosen\n";
    for (const TuningResult* r : results) {
        for (const TuningRow& row : r->table) {
            os << to_string(r->target) << ',' << num(row.cell.gamma) << ',' << num(row.cell.eta) << ','
               << num(row.lambda) << ',' << num(row.vss) << ',' << num(row.mse) << ',' << (row.chosen ? 1 : 0)
               << '\n';
        }
    }
}

} // namespace jap
