#pragma once

#include <cmath>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jap/csv.hpp"
#include "jap/data_model.hpp"
#include "jap/error.hpp"
#include "jap/estimator.hpp"
#include "jap/sim_harness.hpp"
#include "jap/tuning.hpp"

namespace jap::io {

using json = nlohmann::json;

inline json vec(const Vector& v) {
    return json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline json number_or_null(double x) {
    return std::isfinite(x) ? json(x) : json(nullptr);
}

/// Model, names and diagnostics. Active-set indices are 1-based.
inline json to_json(const FittedModel& fm, const Dataset& ds) {
    const Coefficients& c = fm.coefficients;
    json j;
    j["method"] = to_string(fm.method);
    j["treatment"] = ds.treatment_name();
    j["outcome"] = ds.outcome_name();
    j["mediators"] = ds.mediator_names();
    j["covariates"] = ds.covariate_names();

    json zm = json::array();
    for (Index r = 0; r < c.zeta_m.rows(); ++r) {
        zm.push_back(vec(c.zeta_m.row(r).transpose()));
    }
    j["coefficients"] = {{"alpha", vec(c.alpha)},
                         {"beta", vec(c.beta)},
                         {"direct_effect", c.direct_effect},
                         {"zeta_m", zm},
                         {"zeta_y", vec(c.zeta_y)}};

    std::vector<Index> one_based;
    std::vector<std::string> names;
    for (Index k : fm.active.indices()) {
        one_based.push_back(k + 1);
        names.push_back(ds.mediator_names()[static_cast<std::size_t>(k)]);
    }
    j["active_set"] = one_based;
    j["active_names"] = names;

    const bool has_exps = fm.method != Method::Lasso;
    j["hypers"] = {{"gamma_alpha", fm.method == Method::Jap ? json(fm.exps.gamma_alpha) : json(nullptr)},
                   {"eta_alpha", has_exps ? json(fm.exps.eta_alpha) : json(nullptr)},
                   {"gamma_beta", fm.method == Method::Jap ? json(fm.exps.gamma_beta) : json(nullptr)},
                   {"eta_beta", has_exps ? json(fm.exps.eta_beta) : json(nullptr)},
                   {"lambda_alpha", fm.lambda_alpha},
                   {"lambda_beta", fm.lambda_beta},
                   {"lambda_covariates", fm.lambda_covariates},
                   {"c_tr", fm.c_tr},
                   {"penalize_covariates", fm.diagnostics.penalized_covariates > 0}};
    j["init"] = {{"alpha0", vec(fm.init.alpha0)},
                 {"beta0", vec(fm.init.beta0)},
                 {"trunc_alpha", vec(fm.init.trunc_alpha)},
                 {"trunc_beta", vec(fm.init.trunc_beta)}};
    j["weights"] = {{"w_alpha", vec(fm.weights.w_alpha)}, {"w_beta", vec(fm.weights.w_beta)}};

    std::vector<std::string> penalized;
    const auto& cov = ds.covariate_names();
    for (Index k = 0; k < fm.diagnostics.penalized_covariates; ++k) {
        penalized.push_back(cov[cov.size() - static_cast<std::size_t>(fm.diagnostics.penalized_covariates) +
                                static_cast<std::size_t>(k)]);
    }
    j["diagnostics"] = {{"kkt_alpha", fm.diagnostics.kkt_alpha},
                        {"kkt_beta", fm.diagnostics.kkt_beta},
                        {"sweeps", fm.diagnostics.sweeps},
                        {"converged", fm.diagnostics.converged},
                        {"objective_alpha", fm.diagnostics.objective_alpha},
                        {"objective_beta", fm.diagnostics.objective_beta},
                        {"penalized_covariates", penalized}};
    return j;
}

inline json to_json(const TuningResult& r) {
    const TuningRow& c = r.chosen();
    return {{"model", to_string(r.target)},
            {"gamma", number_or_null(c.cell.gamma)},
            {"eta", number_or_null(c.cell.eta)},
            {"lambda", c.lambda},
            {"vss", c.vss},
            {"mse", c.mse},
            {"cells", r.table.size()},
            {"max_kkt", r.max_kkt},
            {"outcome_fits", r.outcome_fits},
            {"unconverged_fits", r.unconverged_fits}};
}

inline void write_effects_csv(std::ostream& os, const MediationReport& rep, const FittedModel& fm,
                              const Dataset& ds) {
    using csv::format_double;
    os << "mediator,alpha,beta,effect,active\n";
    for (Index j = 0; j < rep.effects.size(); ++j) {
        os << csv::quote_if_needed(ds.mediator_names()[static_cast<std::size_t>(j)]) << ','
           << format_double(fm.coefficients.alpha(j)) << ',' << format_double(fm.coefficients.beta(j)) << ','
           << format_double(rep.effects(j)) << ',' << (rep.active.contains(j) ? 1 : 0) << '\n';
    }
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InvalidInput("cannot open config '" + path + "'");
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidInput("malformed JSON in '" + path + "': " + e.what());
    }
}

namespace detail {

template <class T>
T get(const json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw InvalidInput(where + ": field '" + key + "' is missing or has the wrong type");
    }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) {
        return fallback;
    }
    return get<T>(j, key, where);
}

inline void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
    if (!j.is_object()) {
        throw InvalidInput(where + ": expected a JSON object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw InvalidInput(where + ": unknown field '" + it.key() + "'");
        }
    }
}

} // namespace detail

/// {"gamma": [...], "eta": [...], "log_lambda": [lo, hi, step], "folds": k}; absent fields keep `base`.
inline TuningGrid parse_grid(const json& j, TuningGrid base, const std::string& where) {
    detail::reject_unknown(j, {"gamma", "eta", "log_lambda", "folds"}, where);
    base.gamma_values = detail::get_or(j, "gamma", base.gamma_values, where);
    base.eta_values = detail::get_or(j, "eta", base.eta_values, where);
    if (j.contains("log_lambda")) {
        const auto r = detail::get<std::vector<double>>(j, "log_lambda", where);
        if (r.size() != 3) {
            throw InvalidInput(where + ": log_lambda must be [lo, hi, step]");
        }
        base.log_lambda = {r[0], r[1], r[2]};
    }
    base.folds = detail::get_or(j, "folds", base.folds, where);
    return base;
}

inline SimConfig parse_sim_cell(const json& j, const std::string& where) {
    detail::reject_unknown(j, {"n", "p", "rho", "delta", "c_effect", "sigma2", "direct_effect", "noise_case"}, where);
    SimConfig c;
    c.n = detail::get<Index>(j, "n", where);
    c.p = detail::get<Index>(j, "p", where);
    c.rho = detail::get_or(j, "rho", 0.0, where);
    c.delta = detail::get<double>(j, "delta", where);
    c.c_effect = detail::get_or(j, "c_effect", 1.0, where);
    c.sigma2 = detail::get_or(j, "sigma2", 1.0, where);
    c.direct_effect = detail::get_or(j, "direct_effect", 1.0, where);
    c.noise_case = parse_noise_case(detail::get_or(j, "noise_case", std::string("I"), where));
    c.validate();
    return c;
}

struct SimulationPlan {
    std::vector<SimConfig> cells;
    std::vector<MethodSpec> methods;
    std::size_t replicates = 100;
    std::uint64_t master_seed = 1;
    MonteCarloOptions options;
};

/**
 * Simulation config. Cells are listed explicitly under "cells" or crossed from the lists under "grid"
 * (n, p, rho, delta, noise_case; optional c_effect, sigma2, direct_effect scalars).
 */
inline SimulationPlan parse_simulation(const json& j) {
    const std::string w = "simulation config";
    detail::reject_unknown(j,
                           {"cells", "grid", "methods", "replicates", "master_seed", "tune", "fixed",
                            "mediator_grid", "outcome_grid", "c_tr"},
                           w);
    SimulationPlan plan;
    const auto replicates = detail::get_or<std::int64_t>(j, "replicates", 100, w);
    if (replicates < 1) {
        throw InvalidInput(w + ": replicates must be at least 1");
    }
    plan.replicates = static_cast<std::size_t>(replicates);
    plan.master_seed = detail::get_or<std::uint64_t>(j, "master_seed", 1, w);
    plan.options.c_tr = detail::get_or(j, "c_tr", kDefaultTruncation, w);
    if (!(plan.options.c_tr > 0.0)) {
        throw InvalidInput(w + ": c_tr must be positive");
    }
    if (j.contains("cells")) {
        const json& cells = j.at("cells");
        if (!cells.is_array()) {
            throw InvalidInput(w + ": 'cells' must be an array");
        }
        for (std::size_t i = 0; i < cells.size(); ++i) {
            plan.cells.push_back(parse_sim_cell(cells[i], w + " cell " + std::to_string(i + 1)));
        }
    }
    if (j.contains("grid")) {
        const json& g = j.at("grid");
        const std::string wg = w + " grid";
        detail::reject_unknown(g, {"n", "p", "rho", "delta", "noise_case", "c_effect", "sigma2", "direct_effect"}, wg);
        const auto ns = detail::get<std::vector<Index>>(g, "n", wg);
        const auto ps = detail::get<std::vector<Index>>(g, "p", wg);
        const auto rhos = detail::get_or(g, "rho", std::vector<double>{0.0}, wg);
        const auto deltas = detail::get<std::vector<double>>(g, "delta", wg);
        const auto cases = detail::get_or(g, "noise_case", std::vector<std::string>{"I"}, wg);
        for (Index p : ps) {
            for (double rho : rhos) {
                for (const auto& nc : cases) {
                    for (double d : deltas) {
                        for (Index n : ns) {
                            SimConfig c;
                            c.n = n;
                            c.p = p;
                            c.rho = rho;
                            c.delta = d;
                            c.noise_case = parse_noise_case(nc);
                            c.c_effect = detail::get_or(g, "c_effect", 1.0, wg);
                            c.sigma2 = detail::get_or(g, "sigma2", 1.0, wg);
                            c.direct_effect = detail::get_or(g, "direct_effect", 1.0, wg);
                            c.validate();
                            plan.cells.push_back(c);
                        }
                    }
                }
            }
        }
    }
    if (plan.cells.empty()) {
        throw InvalidInput(w + ": no simulation cells (use 'cells' or 'grid')");
    }
    const bool tune = detail::get_or(j, "tune", true, w);
    FitSettings fixed;
    if (!tune) {
        if (!j.contains("fixed")) {
            throw InvalidInput(w + ": 'fixed' hyperparameters are required when tune is false");
        }
        const json& f = j.at("fixed");
        const std::string wf = w + " fixed";
        detail::reject_unknown(f, {"gamma_alpha", "eta_alpha", "gamma_beta", "eta_beta", "lambda_alpha", "lambda_beta"},
                               wf);
        fixed.exps.gamma_alpha = detail::get_or(f, "gamma_alpha", fixed.exps.gamma_alpha, wf);
        fixed.exps.eta_alpha = detail::get_or(f, "eta_alpha", fixed.exps.eta_alpha, wf);
        fixed.exps.gamma_beta = detail::get_or(f, "gamma_beta", fixed.exps.gamma_beta, wf);
        fixed.exps.eta_beta = detail::get_or(f, "eta_beta", fixed.exps.eta_beta, wf);
        fixed.lambda_alpha = detail::get<double>(f, "lambda_alpha", wf);
        fixed.lambda_beta = detail::get<double>(f, "lambda_beta", wf);
        fixed.c_tr = plan.options.c_tr;
    }
    const auto methods = detail::get_or(j, "methods", std::vector<std::string>{"jap"}, w);
    if (methods.empty()) {
        throw InvalidInput(w + ": 'methods' is empty");
    }
    for (const auto& m : methods) {
        MethodSpec spec;
        spec.method = parse_method(m);
        spec.tune = tune;
        spec.fixed = fixed;
        if (!tune) {
            spec.fixed.exps.validate(spec.method);
        }
        plan.methods.push_back(spec);
    }
    if (j.contains("mediator_grid")) {
        plan.options.mediator_grid = parse_grid(j.at("mediator_grid"), plan.options.mediator_grid, w + " mediator_grid");
    }
    if (j.contains("outcome_grid")) {
        plan.options.outcome_grid = parse_grid(j.at("outcome_grid"), plan.options.outcome_grid, w + " outcome_grid");
    }
    if (tune) {
        for (const auto& m : plan.methods) {
            plan.options.mediator_grid.validate(m.method);
            plan.options.outcome_grid.validate(m.method);
        }
    }
    return plan;
}

inline json error_json(const std::string& kind, const std::string& message, int exit_code) {
    return {{"error", kind}, {"message", message}, {"exit_code", exit_code}};
}

} // namespace jap::io
