#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "jap/csv.hpp"
#include "jap/data_model.hpp"
#include "jap/error.hpp"
#include "jap/estimator.hpp"
#include "jap/parallel.hpp"
#include "jap/tuning.hpp"

namespace jap {

enum class NoiseCase { I, II };

inline const char* to_string(NoiseCase c) {
    return c == NoiseCase::I ? "I" : "II";
}

inline NoiseCase parse_noise_case(const std::string& s) {
    if (s == "I" || s == "1") {
        return NoiseCase::I;
    }
    if (s == "II" || s == "2") {
        return NoiseCase::II;
    }
    throw InvalidInput("noise case must be I or II, got '" + s + "'");
}

struct SimConfig {
    Index n = 2000;
    Index p = 6;
    double rho = 0.0;
    double delta = 0.5;
    double c_effect = 1.0;
    double sigma2 = 1.0;
    double direct_effect = 1.0;
    NoiseCase noise_case = NoiseCase::I;
    std::uint64_t seed = 1;
    /// Scale on the mediator errors; 1 in every experiment, 0 only for noise-free checks.
    double mediator_noise = 1.0;

    void validate() const {
        if (p <= 0 || p % 6 != 0) {
            throw InvalidInput("p must be a positive multiple of 6, got " + std::to_string(p));
        }
        if (!(std::abs(delta) < 1.0) || delta == 0.0) {
            throw InvalidInput("delta must satisfy 0 < |delta| < 1");
        }
        if (!(rho >= 0.0 && rho < 1.0)) {
            throw InvalidInput("rho must lie in [0, 1)");
        }
        if (noise_case == NoiseCase::II && !(rho > 0.0)) {
            throw InvalidInput("noise case II requires rho > 0");
        }
        if (!(sigma2 >= 0.0) || !std::isfinite(sigma2)) {
            throw InvalidInput("sigma2 must be nonnegative and finite");
        }
        if (!(mediator_noise >= 0.0) || !std::isfinite(mediator_noise)) {
            throw InvalidInput("mediator_noise must be nonnegative and finite");
        }
        if (!std::isfinite(c_effect) || !std::isfinite(direct_effect)) {
            throw InvalidInput("c_effect and direct_effect must be finite");
        }
        if (n <= p + 2) {
            throw InvalidInput("n must exceed p+q+1=" + std::to_string(p + 2));
        }
    }
};

/// Six equal groups of (alpha_j, beta_j) = C * (1,1), (1/d,d), (d,1/d), (0,1), (1,0), (0,0).
inline Coefficients make_coefficients(Index p, double delta, double c_effect, double direct_effect = 1.0) {
    if (p <= 0 || p % 6 != 0) {
        throw InvalidInput("p must be a positive multiple of 6, got " + std::to_string(p));
    }
    if (!(std::abs(delta) < 1.0) || delta == 0.0) {
        throw InvalidInput("delta must satisfy 0 < |delta| < 1");
    }
    const double a[6] = {1.0, 1.0 / delta, delta, 0.0, 1.0, 0.0};
    const double b[6] = {1.0, delta, 1.0 / delta, 1.0, 0.0, 0.0};
    const Index g = p / 6;
    Coefficients c;
    c.alpha.resize(p);
    c.beta.resize(p);
    for (Index j = 0; j < p; ++j) {
        c.alpha(j) = c_effect * a[j / g];
        c.beta(j) = c_effect * b[j / g];
    }
    c.direct_effect = direct_effect;
    c.zeta_m = Matrix::Zero(1, p);
    c.zeta_y = Vector::Zero(1);
    return c;
}

/// The first three groups.
inline ActiveSet true_active_set(Index p) {
    std::vector<Index> idx(static_cast<std::size_t>(p / 2));
    std::iota(idx.begin(), idx.end(), Index{0});
    return ActiveSet(std::move(idx), p);
}

inline Matrix ar1_covariance(Index p, double rho) {
    if (!(rho >= 0.0 && rho < 1.0)) {
        throw InvalidInput("rho must lie in [0, 1)");
    }
    Matrix s(p, p);
    for (Index i = 0; i < p; ++i) {
        for (Index j = 0; j < p; ++j) {
            s(i, j) = std::pow(rho, static_cast<double>(std::abs(i - j)));
        }
    }
    return s;
}

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed of replicate r in cell `cell`: a fixed function of the three integers.
inline std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t cell, std::uint64_t r) {
    return mix64(mix64(mix64(master) ^ cell) ^ r);
}

/// Fold-assignment seed used when tuning on the dataset drawn from `data_seed`.
inline std::uint64_t fold_seed(std::uint64_t data_seed) {
    return mix64(data_seed ^ 0x464f4c4453ULL);
}

struct SimDraw {
    Dataset data;
    Coefficients truth;
    ActiveSet active;
    std::vector<Index> permutation; ///< column permutation applied to E (identity in case I)
};

/**
 * One dataset from the two structural equations with intercept-only covariates. T, E and the outcome
 * noise come from one stream; the case-II permutation from a second stream seeded off the first, so a
 * forced identity permutation reproduces case I exactly.
 */
inline SimDraw simulate_dataset(const SimConfig& cfg, std::optional<std::vector<Index>> permutation = std::nullopt) {
    cfg.validate();
    const Index n = cfg.n, p = cfg.p;
    const Coefficients truth = make_coefficients(p, cfg.delta, cfg.c_effect, cfg.direct_effect);

    const Matrix sigma = ar1_covariance(p, cfg.rho);
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) {
        throw ComputationError("Cholesky factorization of the AR(1) covariance failed");
    }
    const Matrix lower = llt.matrixL();

    std::mt19937_64 rng(cfg.seed);
    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector t(n);
    for (Index i = 0; i < n; ++i) {
        t(i) = coin(rng) ? 1.0 : 0.0;
    }
    Matrix z(n, p);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < p; ++j) {
            z(i, j) = normal(rng);
        }
    }
    Vector eps(n);
    for (Index i = 0; i < n; ++i) {
        eps(i) = normal(rng);
    }
    Matrix e = z * lower.transpose(); // rows ~ N(0, Sigma)

    std::vector<Index> perm(static_cast<std::size_t>(p));
    std::iota(perm.begin(), perm.end(), Index{0});
    if (permutation) {
        perm = *permutation;
        std::vector<Index> check = perm;
        std::sort(check.begin(), check.end());
        for (Index j = 0; j < p; ++j) {
            if (static_cast<Index>(check.size()) != p || check[static_cast<std::size_t>(j)] != j) {
                throw InvalidInput("permutation override is not a permutation of 0..p-1");
            }
        }
    } else if (cfg.noise_case == NoiseCase::II) {
        std::mt19937_64 prng(mix64(cfg.seed ^ 0x5045524d55544154ULL));
        std::shuffle(perm.begin(), perm.end(), prng);
    }
    if (cfg.noise_case == NoiseCase::II || permutation) {
        Matrix permuted(n, p);
        for (Index j = 0; j < p; ++j) {
            permuted.col(j) = e.col(perm[static_cast<std::size_t>(j)]);
        }
        e = std::move(permuted);
    }

    Matrix m = t * truth.alpha.transpose() + cfg.mediator_noise * e;
    Vector y = cfg.direct_effect * t + m * truth.beta + std::sqrt(cfg.sigma2) * eps;
    Dataset ds = validate_dataset(t, m, y, Matrix(n, 0)); // intercept added by validation
    return SimDraw{std::move(ds), truth, true_active_set(p), std::move(perm)};
}

inline int exact_recovery(const ActiveSet& est, const ActiveSet& truth) {
    return est == truth ? 1 : 0;
}

/// Hyperparameters for a method: tuned on each replicate, or fixed.
struct MethodSpec {
    Method method = Method::Jap;
    bool tune = true;
    FitSettings fixed; ///< used when tune is false (method field is overwritten)
};

struct MonteCarloOptions {
    TuningGrid mediator_grid = TuningGrid::mediator_default();
    TuningGrid outcome_grid = TuningGrid::outcome_default();
    double c_tr = kDefaultTruncation;
    SolverOptions solver;
    unsigned threads = 1;
    /// JSON-lines log of per-replicate results; with `resume` set, units already logged are not rerun.
    std::string detail_path;
    bool resume = false;
};

struct ReplicateResult {
    std::size_t cell = 0;
    std::size_t rep = 0;
    std::string method;
    bool failed = false;
    std::string error;
    int recovered = 0;
    double tpr = 0.0;
    double fpr = 0.0;
    std::vector<Index> active;
};

struct RecoveryRow {
    std::string method;
    SimConfig config;
    std::int64_t replicates = 0; ///< successful replicates
    std::int64_t failed = 0;
    double exact_recovery_rate = 0.0;
    double mc_stderr = 0.0;
    double mean_tpr = 0.0;
    double mean_fpr = 0.0;
};

struct RecoveryTable {
    std::vector<RecoveryRow> rows;
};

inline nlohmann::json to_json(const ReplicateResult& r) {
    nlohmann::json j;
    j["cell"] = r.cell;
    j["rep"] = r.rep;
    j["method"] = r.method;
    j["failed"] = r.failed;
    if (r.failed) {
        j["error"] = r.error;
    }
    j["recovered"] = r.recovered;
    j["tpr"] = r.tpr;
    j["fpr"] = r.fpr;
    std::vector<Index> one_based;
    for (Index k : r.active) {
        one_based.push_back(k + 1);
    }
    j["active"] = one_based;
    return j;
}

inline ReplicateResult replicate_from_json(const nlohmann::json& j) {
    ReplicateResult r;
    r.cell = j.at("cell").get<std::size_t>();
    r.rep = j.at("rep").get<std::size_t>();
    r.method = j.at("method").get<std::string>();
    r.failed = j.at("failed").get<bool>();
    if (r.failed) {
        r.error = j.value("error", std::string());
    }
    r.recovered = j.at("recovered").get<int>();
    r.tpr = j.at("tpr").get<double>();
    r.fpr = j.at("fpr").get<double>();
    for (Index k : j.at("active").get<std::vector<Index>>()) {
        r.active.push_back(k - 1);
    }
    return r;
}

/// Fits one replicate with one method and scores it against the truth.
inline ReplicateResult run_replicate(const SimConfig& cfg, const MethodSpec& spec, const MonteCarloOptions& opts) {
    ReplicateResult r;
    r.method = to_string(spec.method);
    try {
        const SimDraw draw = simulate_dataset(cfg);
        FittedModel fit;
        if (spec.tune) {
            TuningOptions topts;
            topts.seed = fold_seed(cfg.seed);
            topts.c_tr = opts.c_tr;
            topts.solver = opts.solver;
            topts.threads = 1;
            fit = tune_and_fit(draw.data, spec.method, opts.mediator_grid, opts.outcome_grid, topts).model;
        } else {
            FitSettings s = spec.fixed;
            s.method = spec.method;
            fit = fit_model(draw.data, s);
        }
        r.active = fit.active.indices();
        r.recovered = exact_recovery(fit.active, draw.active);
        const Index p = cfg.p;
        const auto truth = draw.active.mask();
        double tp = 0, fp = 0;
        for (Index j : r.active) {
            (truth[static_cast<std::size_t>(j)] ? tp : fp) += 1.0;
        }
        const double positives = static_cast<double>(draw.active.size());
        const double negatives = static_cast<double>(p) - positives;
        r.tpr = positives > 0 ? tp / positives : 0.0;
        r.fpr = negatives > 0 ? fp / negatives : 0.0;
    } catch (const ComputationError& e) {
        r.failed = true;
        r.error = e.what();
    }
    return r;
}

/**
 * Monte-Carlo accuracy over a grid of scenarios. Replicate r of cell c draws its data from
 * replicate_seed(master_seed, c, r), shared by all methods; `cfg.seed` in the grid is ignored.
 * Work units (cell, replicate, method) run in parallel and are aggregated in index order.
 */
inline RecoveryTable run_monte_carlo(const std::vector<SimConfig>& cells, const std::vector<MethodSpec>& methods,
                                     std::size_t replicates, std::uint64_t master_seed,
                                     const MonteCarloOptions& opts = {}) {
    if (replicates < 1) {
        throw InvalidInput("replicates must be at least 1");
    }
    if (methods.empty() || cells.empty()) {
        throw InvalidInput("Monte-Carlo run needs at least one cell and one method");
    }
    for (const auto& c : cells) {
        c.validate();
    }
    for (const auto& m : methods) {
        if (m.tune) {
            opts.mediator_grid.validate(m.method);
            opts.outcome_grid.validate(m.method);
        }
    }

    struct Unit {
        std::size_t cell, rep, method;
    };
    std::vector<Unit> units;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        for (std::size_t r = 0; r < replicates; ++r) {
            for (std::size_t m = 0; m < methods.size(); ++m) {
                units.push_back({c, r, m});
            }
        }
    }

    std::map<std::tuple<std::size_t, std::size_t, std::string>, ReplicateResult> done;
    std::ofstream log;
    std::mutex log_mutex;
    if (!opts.detail_path.empty()) {
        if (opts.resume) {
            std::vector<std::string> valid;
            std::ifstream in(opts.detail_path);
            std::string line;
            while (std::getline(in, line)) {
                try {
                    const ReplicateResult r = replicate_from_json(nlohmann::json::parse(line));
                    done[{r.cell, r.rep, r.method}] = r;
                    valid.push_back(line);
                } catch (const std::exception&) {
                    // a torn last line from an interrupted run
                }
            }
            log.open(opts.detail_path, std::ios::trunc);
            for (const auto& v : valid) {
                log << v << '\n';
            }
        } else {
            log.open(opts.detail_path, std::ios::trunc);
        }
        if (!log) {
            throw InvalidInput("cannot write detail log '" + opts.detail_path + "'");
        }
        log.flush();
    }

    auto results = parallel_map(units.size(), opts.threads, [&](std::size_t i) {
        const Unit& u = units[i];
        const std::string name = to_string(methods[u.method].method);
        if (auto it = done.find({u.cell, u.rep, name}); it != done.end()) {
            return it->second;
        }
        SimConfig cfg = cells[u.cell];
        cfg.seed = replicate_seed(master_seed, u.cell, u.rep);
        ReplicateResult r = run_replicate(cfg, methods[u.method], opts);
        r.cell = u.cell;
        r.rep = u.rep;
        if (log.is_open()) {
            std::lock_guard<std::mutex> lock(log_mutex);
            log << to_json(r).dump() << '\n';
            log.flush();
        }
        return r;
    });

    RecoveryTable table;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        for (std::size_t m = 0; m < methods.size(); ++m) {
            RecoveryRow row;
            row.method = to_string(methods[m].method);
            row.config = cells[c];
            row.config.seed = master_seed;
            std::int64_t hits = 0;
            double tpr = 0, fpr = 0;
            for (std::size_t i = 0; i < units.size(); ++i) {
                if (units[i].cell != c || units[i].method != m) {
                    continue;
                }
                const ReplicateResult& r = results[i];
                if (r.failed) {
                    ++row.failed;
                    continue;
                }
                ++row.replicates;
                hits += r.recovered;
                tpr += r.tpr;
                fpr += r.fpr;
            }
            if (row.replicates > 0) {
                const double k = static_cast<double>(row.replicates);
                row.exact_recovery_rate = static_cast<double>(hits) / k;
                row.mc_stderr = std::sqrt(row.exact_recovery_rate * (1.0 - row.exact_recovery_rate) / k);
                row.mean_tpr = tpr / k;
                row.mean_fpr = fpr / k;
            }
            table.rows.push_back(row);
        }
    }
    return table;
}

inline void write_recovery_csv(std::ostream& os, const RecoveryTable& table) {
    using csv::format_double;
    os << "method,n,p,rho,delta,c_effect,noise_case,replicates,failed,exact_recovery_rate,mc_stderr,mean_tpr,"
          "mean_fpr\n";
    for (const auto& r : table.rows) {
        os << r.method << ',' << r.config.n << ',' << r.config.p << ',' << format_double(r.config.rho) << ','
           << format_double(r.config.delta) << ',' << format_double(r.config.c_effect) << ','
           << to_string(r.config.noise_case) << ',' << r.replicates << ',' << r.failed << ','
           << format_double(r.exact_recovery_rate) << ',' << format_double(r.mc_stderr) << ','
           << format_double(r.mean_tpr) << ',' << format_double(r.mean_fpr) << '\n';
    }
}

/// A random small instance for oracle checks: n rows, p mediators, q covariates (intercept included).
inline Dataset random_instance(std::uint64_t seed, Index n, Index p, Index q) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    Vector t(n);
    Matrix x(n, q), m(n, p);
    for (Index i = 0; i < n; ++i) {
        t(i) = coin(rng) ? 1.0 : 0.0;
        x(i, 0) = 1.0;
        for (Index c = 1; c < q; ++c) {
            x(i, c) = normal(rng);
        }
    }
    Vector alpha(p), beta(p);
    for (Index j = 0; j < p; ++j) {
        alpha(j) = (j % 3 == 2) ? 0.0 : normal(rng);
        beta(j) = (j % 4 == 3) ? 0.0 : normal(rng);
    }
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < p; ++j) {
            m(i, j) = alpha(j) * t(i) + 0.3 * x.row(i).sum() + normal(rng);
        }
    }
    Vector y = 0.7 * t + m * beta + x * Vector::Constant(q, 0.2);
    for (Index i = 0; i < n; ++i) {
        y(i) += normal(rng);
    }
    return validate_dataset(t, m, y, x.rightCols(q - 1));
}

} // namespace jap
