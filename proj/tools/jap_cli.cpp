// jap: command-line front end for the joint adaptive penalty estimator.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "jap/data_model.hpp"
#include "jap/error.hpp"
#include "jap/estimator.hpp"
#include "jap/io.hpp"
#include "jap/self_check.hpp"
#include "jap/sim_harness.hpp"
#include "jap/tuning.hpp"

namespace {

using json = nlohmann::json;

constexpr int kExitComputation = 1;
constexpr int kExitConfig = 2;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto t = jap::csv::trim(item);
        if (!t.empty()) {
            out.emplace_back(t);
        }
    }
    return out;
}

/// Writes `text` to `path` through a temporary file so a failed run leaves no partial output.
void write_atomically(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw jap::InvalidInput("cannot write '" + path + "'");
        }
        out << text;
        if (!out) {
            throw jap::InvalidInput("failed writing '" + path + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

void require_file(const std::string& path, const char* what) {
    if (!std::filesystem::is_regular_file(path)) {
        throw jap::InvalidInput(std::string(what) + " '" + path + "' does not exist");
    }
}

// ---------------------------------------------------------------------------------------------

struct RoleFlags {
    std::string treatment;
    std::string outcome;
    std::string mediators;  // comma list; empty means every remaining column
    std::string covariates; // comma list
};

void add_role_flags(CLI::App* cmd, RoleFlags& r) {
    cmd->add_option("--treatment", r.treatment, "Treatment column name");
    cmd->add_option("--outcome", r.outcome, "Outcome column name");
    cmd->add_option("--mediators", r.mediators, "Comma-separated mediator columns (default: all other columns)");
    cmd->add_option("--covariates", r.covariates, "Comma-separated covariate columns");
}

/// Roles from a config object {"treatment", "outcome", "mediators", "covariates"} overridden by flags.
jap::ColumnRoles resolve_roles(const std::string& data_path, const json& cfg_roles, const RoleFlags& flags) {
    std::string treatment = flags.treatment, outcome = flags.outcome;
    std::vector<std::string> mediators = split_list(flags.mediators), covariates = split_list(flags.covariates);
    if (!cfg_roles.is_null()) {
        const std::string w = "config roles";
        jap::io::detail::reject_unknown(cfg_roles, {"treatment", "outcome", "mediators", "covariates"}, w);
        if (treatment.empty()) {
            treatment = jap::io::detail::get_or(cfg_roles, "treatment", std::string(), w);
        }
        if (outcome.empty()) {
            outcome = jap::io::detail::get_or(cfg_roles, "outcome", std::string(), w);
        }
        if (mediators.empty()) {
            mediators = jap::io::detail::get_or(cfg_roles, "mediators", std::vector<std::string>{}, w);
        }
        if (covariates.empty()) {
            covariates = jap::io::detail::get_or(cfg_roles, "covariates", std::vector<std::string>{}, w);
        }
    }
    if (treatment.empty() || outcome.empty()) {
        throw jap::InvalidInput("both --treatment and --outcome roles are required");
    }
    jap::ColumnRoles roles;
    roles[treatment] = jap::Role::Treatment;
    roles[outcome] = jap::Role::Outcome;
    for (const auto& c : covariates) {
        roles[c] = jap::Role::Covariate;
    }
    if (mediators.empty()) {
        const auto table = jap::csv::read(data_path);
        for (const auto& h : table.header) {
            if (!roles.count(h)) {
                roles[h] = jap::Role::Mediator;
            }
        }
    } else {
        for (const auto& m : mediators) {
            roles[m] = jap::Role::Mediator;
        }
    }
    return roles;
}

// ---------------------------------------------------------------------------------------------

struct PreprocessArgs {
    std::string counts, out, id_column;
    double prevalence = 0.9;
    double pseudocount = 1.0;
    double min_mean = 5.0;
    bool no_abundance = false;
};

int cmd_preprocess(const PreprocessArgs& a) {
    require_file(a.counts, "counts file");
    const jap::CountTable ct = jap::load_count_csv(a.counts, a.id_column);
    const double min_mean = a.no_abundance ? -std::numeric_limits<double>::infinity() : a.min_mean;
    const jap::PreprocessResult res = jap::preprocess_counts(ct.counts, a.prevalence, a.pseudocount, min_mean);
    std::ostringstream os;
    os << "sample_id";
    for (jap::Index k : res.retained) {
        os << ',' << jap::csv::quote_if_needed(ct.taxa[static_cast<std::size_t>(k)]);
    }
    os << '\n';
    for (jap::Index i = 0; i < res.clr.rows(); ++i) {
        os << jap::csv::quote_if_needed(ct.sample_ids[static_cast<std::size_t>(i)]);
        for (jap::Index c = 0; c < res.clr.cols(); ++c) {
            os << ',' << jap::csv::format_double(res.clr(i, c));
        }
        os << '\n';
    }
    write_atomically(a.out, os.str());
    std::cout << "genera in: " << ct.taxa.size() << ", after prevalence filter: " << res.after_prevalence.size()
              << ", after abundance filter: " << res.retained.size() << " (written to " << a.out << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct FitArgs {
    std::string data, config, out, effects, tuning_table;
    RoleFlags roles;
    std::string method = "jap";
    bool tune = false;
    double gamma_alpha = 2.0, eta_alpha = 0.5, gamma_beta = 2.0, eta_beta = 0.5;
    double lambda_alpha = 1.0, lambda_beta = 20.0, lambda_covariates = -1.0;
    double c_tr = jap::kDefaultTruncation;
    bool covariate_penalty = false;
    bool standardize = false;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    double t = 0.0, t_prime = 1.0;
};

int cmd_fit(FitArgs a, CLI::App* cmd) {
    json cfg = json::object();
    if (!a.config.empty()) {
        require_file(a.config, "config");
        cfg = jap::io::read_json_file(a.config);
        jap::io::detail::reject_unknown(cfg,
                                        {"data", "roles", "method", "tune", "hypers", "c_tr", "covariate_penalty",
                                         "lambda_covariates", "standardize", "seed", "threads", "mediator_grid",
                                         "outcome_grid"},
                                        "fit config");
    }
    const std::string w = "fit config";
    auto from_cfg = [&](const char* flag, const char* key, auto& field) {
        if (cmd->count(flag) == 0 && cfg.contains(key)) {
            field = jap::io::detail::get<std::decay_t<decltype(field)>>(cfg, key, w);
        }
    };
    from_cfg("--data", "data", a.data);
    from_cfg("--method", "method", a.method);
    from_cfg("--tune", "tune", a.tune);
    from_cfg("--c-tr", "c_tr", a.c_tr);
    from_cfg("--covariate-penalty", "covariate_penalty", a.covariate_penalty);
    from_cfg("--lambda-covariates", "lambda_covariates", a.lambda_covariates);
    from_cfg("--standardize", "standardize", a.standardize);
    from_cfg("--seed", "seed", a.seed);
    from_cfg("--threads", "threads", a.threads);
    if (cfg.contains("hypers")) {
        const json& h = cfg.at("hypers");
        jap::io::detail::reject_unknown(
            h, {"gamma_alpha", "eta_alpha", "gamma_beta", "eta_beta", "lambda_alpha", "lambda_beta"}, "fit hypers");
        auto from_h = [&](const char* flag, const char* key, double& field) {
            if (cmd->count(flag) == 0 && h.contains(key)) {
                field = jap::io::detail::get<double>(h, key, "fit hypers");
            }
        };
        from_h("--gamma-alpha", "gamma_alpha", a.gamma_alpha);
        from_h("--eta-alpha", "eta_alpha", a.eta_alpha);
        from_h("--gamma-beta", "gamma_beta", a.gamma_beta);
        from_h("--eta-beta", "eta_beta", a.eta_beta);
        from_h("--lambda-alpha", "lambda_alpha", a.lambda_alpha);
        from_h("--lambda-beta", "lambda_beta", a.lambda_beta);
    }
    if (a.data.empty()) {
        throw jap::InvalidInput("--data is required");
    }
    if (a.out.empty()) {
        throw jap::InvalidInput("--out is required");
    }
    require_file(a.data, "data file");
    const jap::Method method = jap::parse_method(a.method);
    jap::TuningGrid mgrid = jap::TuningGrid::mediator_default();
    jap::TuningGrid ygrid = jap::TuningGrid::outcome_default();
    if (cfg.contains("mediator_grid")) {
        mgrid = jap::io::parse_grid(cfg.at("mediator_grid"), mgrid, "fit mediator_grid");
    }
    if (cfg.contains("outcome_grid")) {
        ygrid = jap::io::parse_grid(cfg.at("outcome_grid"), ygrid, "fit outcome_grid");
    }

    const jap::ColumnRoles roles =
        resolve_roles(a.data, cfg.contains("roles") ? cfg.at("roles") : json(), a.roles);
    const jap::Dataset ds = jap::load_csv(a.data, roles);

    jap::FitSettings s;
    s.method = method;
    s.exps = {a.gamma_alpha, a.eta_alpha, a.gamma_beta, a.eta_beta};
    s.lambda_alpha = a.lambda_alpha;
    s.lambda_beta = a.lambda_beta;
    s.c_tr = a.c_tr;
    s.penalize_covariates = a.covariate_penalty;
    s.lambda_covariates = a.lambda_covariates;
    s.standardize = a.standardize;
    if (!(a.c_tr > 0.0)) {
        throw jap::InvalidInput("--c-tr must be positive");
    }

    json model;
    std::string tuning_csv;
    jap::FittedModel fit;
    if (a.tune) {
        mgrid.validate(method);
        ygrid.validate(method);
        jap::TuningOptions topts;
        topts.seed = a.seed;
        topts.c_tr = a.c_tr;
        topts.penalize_covariates = a.covariate_penalty;
        topts.lambda_covariates = a.lambda_covariates;
        topts.standardize = a.standardize;
        topts.threads = a.threads;
        const jap::TunedFit tf = jap::tune_and_fit(ds, method, mgrid, ygrid, topts);
        fit = tf.model;
        model = jap::io::to_json(fit, ds);
        model["tuning"] = {{"mediator", jap::io::to_json(tf.mediator)}, {"outcome", jap::io::to_json(tf.outcome)}};
        std::ostringstream os;
        jap::write_tuning_csv(os, {&tf.mediator, &tf.outcome});
        tuning_csv = os.str();
    } else {
        s.exps.validate(method);
        fit = jap::fit_model(ds, s);
        model = jap::io::to_json(fit, ds);
    }
    const jap::MediationReport rep = jap::mediation_effects(fit, a.t, a.t_prime);
    model["contrast"] = {a.t, a.t_prime};

    write_atomically(a.out, model.dump(2) + "\n");
    const std::string effects_path = a.effects.empty() ? a.out + ".effects.csv" : a.effects;
    std::ostringstream eff;
    jap::io::write_effects_csv(eff, rep, fit, ds);
    write_atomically(effects_path, eff.str());
    if (!a.tuning_table.empty()) {
        if (tuning_csv.empty()) {
            throw jap::InvalidInput("--tuning-table needs --tune");
        }
        write_atomically(a.tuning_table, tuning_csv);
    }
    std::cout << "method " << jap::to_string(fit.method) << ", active set {";
    for (std::size_t k = 0; k < fit.active.indices().size(); ++k) {
        std::cout << (k ? ", " : "") << ds.mediator_names()[static_cast<std::size_t>(fit.active.indices()[k])];
    }
    std::cout << "}, kkt_beta " << fit.diagnostics.kkt_beta << "\n";
    return fit.diagnostics.converged ? 0 : kExitComputation;
}

// ---------------------------------------------------------------------------------------------

struct SimulateArgs {
    std::string config, out, detail;
    bool resume = false;
    unsigned threads = 1;
    std::uint64_t seed = 0;
    std::size_t replicates = 0;
};

int cmd_simulate(const SimulateArgs& a, CLI::App* cmd) {
    require_file(a.config, "config");
    jap::io::SimulationPlan plan = jap::io::parse_simulation(jap::io::read_json_file(a.config));
    if (cmd->count("--seed")) {
        plan.master_seed = a.seed;
    }
    if (cmd->count("--replicates")) {
        if (a.replicates < 1) {
            throw jap::InvalidInput("--replicates must be at least 1");
        }
        plan.replicates = a.replicates;
    }
    if (a.resume && a.detail.empty()) {
        throw jap::InvalidInput("--resume needs --detail");
    }
    plan.options.threads = a.threads;
    plan.options.detail_path = a.detail;
    plan.options.resume = a.resume;
    const jap::RecoveryTable table =
        jap::run_monte_carlo(plan.cells, plan.methods, plan.replicates, plan.master_seed, plan.options);
    std::ostringstream os;
    jap::write_recovery_csv(os, table);
    write_atomically(a.out, os.str());
    std::cout << os.str();
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct CheckArgs {
    bool self_test = false;
    bool perturb = false;
    std::uint64_t seed = 20240601;
    std::string data, out;
    RoleFlags roles;
    double lambda_alpha = 1.0, lambda_beta = 20.0;
};

int cmd_check(const CheckArgs& a) {
    json report;
    std::vector<jap::CheckLine> lines;
    if (a.self_test) {
        jap::SelfCheckOptions o;
        o.seed = a.seed;
        o.perturb = a.perturb;
        lines = jap::run_self_check(o);
    } else {
        if (a.data.empty()) {
            throw jap::InvalidInput("check needs --self-test or --data");
        }
        require_file(a.data, "data file");
        const jap::Dataset ds = jap::load_csv(a.data, resolve_roles(a.data, json(), a.roles));
        jap::FitSettings s;
        s.lambda_alpha = a.lambda_alpha;
        s.lambda_beta = a.lambda_beta;
        const jap::FittedModel fit = jap::fit_model(ds, s);
        jap::PenaltySpec pm, py;
        pm.lambda = a.lambda_alpha;
        pm.weights = fit.weights.w_alpha;
        py.lambda = a.lambda_beta;
        py.weights = fit.weights.w_beta;
        jap::Vector b = fit.coefficients.beta;
        if (a.perturb) {
            for (jap::Index j = 0; j < b.size(); ++j) {
                if (b(j) != 0.0) {
                    b(j) += 0.1;
                    break;
                }
            }
        }
        const double kkt = jap::kkt_check(ds, py, b);
        lines.push_back({"kkt_outcome", kkt, 1e-8, kkt <= 1e-8});
        lines.push_back({"kkt_mediator", fit.diagnostics.kkt_alpha, 1e-8, fit.diagnostics.kkt_alpha <= 1e-8});
        const double joint = jap::joint_vs_projected_check(ds, pm, py).max_discrepancy;
        lines.push_back({"joint_vs_projected", joint, 1e-6, joint <= 1e-6});
    }
    bool ok = true;
    report["checks"] = json::array();
    for (const auto& l : lines) {
        report["checks"].push_back({{"name", l.name}, {"value", l.value}, {"tolerance", l.tolerance}, {"pass", l.pass}});
        std::cout << (l.pass ? "PASS " : "FAIL ") << l.name << " value=" << jap::csv::format_double(l.value)
                  << " tolerance=" << l.tolerance << "\n";
        ok = ok && l.pass;
    }
    report["pass"] = ok;
    if (!a.out.empty()) {
        write_atomically(a.out, report.dump(2) + "\n");
    }
    if (!ok) {
        for (const auto& l : lines) {
            if (!l.pass) {
                std::cerr << "check failed: " << l.name << "\n";
            }
        }
    }
    return ok ? 0 : kExitComputation;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint adaptive penalty estimator for multi-mediator linear models"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string error_json;
    app.add_option("--error-json", error_json, "Write a machine-readable error record here on failure");

    PreprocessArgs pre;
    auto* c_pre = app.add_subcommand("preprocess", "Prevalence filter, CLR transform and abundance filter");
    c_pre->add_option("--counts", pre.counts, "Count table CSV (first column sample ids)")->required();
    c_pre->add_option("--out", pre.out, "Output CSV of retained CLR columns")->required();
    c_pre->add_option("--id-column", pre.id_column, "Sample-id column (default: first column)");
    c_pre->add_option("--prevalence", pre.prevalence, "Minimum share of samples with a positive count")
        ->capture_default_str();
    c_pre->add_option("--pseudocount", pre.pseudocount, "Added before taking logs")->capture_default_str();
    c_pre->add_option("--min-mean", pre.min_mean, "Minimum column mean of the CLR values")->capture_default_str();
    c_pre->add_flag("--no-abundance-filter", pre.no_abundance, "Keep every column after the prevalence filter");

    FitArgs fa;
    auto* c_fit = app.add_subcommand("fit", "Fit JAP, adaptive lasso or lasso to a CSV dataset");
    c_fit->add_option("--data", fa.data, "Dataset CSV with a header row");
    c_fit->add_option("--config", fa.config, "JSON config; flags override its fields");
    add_role_flags(c_fit, fa.roles);
    c_fit->add_option("--method", fa.method, "jap, adaptive_lasso or lasso")->capture_default_str();
    c_fit->add_flag("--tune", fa.tune, "Select hyperparameters by VSS then full-data MSE");
    c_fit->add_option("--gamma-alpha", fa.gamma_alpha)->capture_default_str();
    c_fit->add_option("--eta-alpha", fa.eta_alpha)->capture_default_str();
    c_fit->add_option("--gamma-beta", fa.gamma_beta)->capture_default_str();
    c_fit->add_option("--eta-beta", fa.eta_beta)->capture_default_str();
    c_fit->add_option("--lambda-alpha", fa.lambda_alpha)->capture_default_str();
    c_fit->add_option("--lambda-beta", fa.lambda_beta)->capture_default_str();
    c_fit->add_option("--c-tr", fa.c_tr, "Truncation multiplier on OLS standard errors")->capture_default_str();
    c_fit->add_flag("--covariate-penalty", fa.covariate_penalty,
                    "Penalize non-intercept covariates in the outcome model");
    c_fit->add_option("--lambda-covariates", fa.lambda_covariates, "Penalty on covariates (default: lambda-beta)");
    c_fit->add_flag("--standardize", fa.standardize, "Scale penalties by projected column RMS");
    c_fit->add_option("--seed", fa.seed, "Fold assignment seed for tuning")->capture_default_str();
    c_fit->add_option("--threads", fa.threads, "Worker threads (0: all cores)")->capture_default_str();
    c_fit->add_option("--t", fa.t, "Reference treatment level")->capture_default_str();
    c_fit->add_option("--t-prime", fa.t_prime, "Contrast treatment level")->capture_default_str();
    c_fit->add_option("--out", fa.out, "Model JSON");
    c_fit->add_option("--effects", fa.effects, "Per-mediator effects CSV (default: <out>.effects.csv)");
    c_fit->add_option("--tuning-table", fa.tuning_table, "Tuning table CSV (with --tune)");

    SimulateArgs sa;
    auto* c_sim = app.add_subcommand("simulate", "Monte-Carlo selection accuracy");
    c_sim->add_option("--config", sa.config, "Simulation JSON config")->required();
    c_sim->add_option("--out", sa.out, "Recovery table CSV")->required();
    c_sim->add_option("--detail", sa.detail, "Per-replicate JSON-lines log");
    c_sim->add_flag("--resume", sa.resume, "Skip replicates already present in the --detail log");
    c_sim->add_option("--threads", sa.threads, "Worker threads (0: all cores)")->capture_default_str();
    c_sim->add_option("--seed", sa.seed, "Override master_seed");
    c_sim->add_option("--replicates", sa.replicates, "Override replicates");

    CheckArgs ca;
    auto* c_chk = app.add_subcommand("check", "Optimality and equivalence diagnostics");
    c_chk->add_flag("--self-test", ca.self_test, "Run the oracle suite on seeded random instances");
    c_chk->add_flag("--perturb", ca.perturb, "Shift one outcome coefficient by 0.1 (negative control)");
    c_chk->add_option("--seed", ca.seed)->capture_default_str();
    c_chk->add_option("--data", ca.data, "Dataset CSV to diagnose");
    add_role_flags(c_chk, ca.roles);
    c_chk->add_option("--lambda-alpha", ca.lambda_alpha)->capture_default_str();
    c_chk->add_option("--lambda-beta", ca.lambda_beta)->capture_default_str();
    c_chk->add_option("--out", ca.out, "Report JSON");

    auto fail = [&](const std::string& kind, const std::string& msg, int code) {
        std::cerr << "error: " << msg << "\n";
        if (!error_json.empty()) {
            std::ofstream(error_json) << jap::io::error_json(kind, msg, code).dump(2) << "\n";
        }
        return code;
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return fail("usage", e.what(), kExitConfig);
    }

    try {
        if (c_pre->parsed()) {
            return cmd_preprocess(pre);
        }
        if (c_fit->parsed()) {
            return cmd_fit(fa, c_fit);
        }
        if (c_sim->parsed()) {
            return cmd_simulate(sa, c_sim);
        }
        if (c_chk->parsed()) {
            return cmd_check(ca);
        }
    } catch (const jap::InvalidInput& e) {
        return fail("invalid_input", e.what(), kExitConfig);
    } catch (const jap::SingularDesign& e) {
        return fail("singular_design", e.what(), kExitComputation);
    } catch (const jap::ConvergenceError& e) {
        return fail("convergence", e.what(), kExitComputation);
    } catch (const jap::ComputationError& e) {
        return fail("computation", e.what(), kExitComputation);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), kExitComputation);
    }
    return 0;
}
