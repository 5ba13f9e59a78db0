#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "jap/csv.hpp"
#include "jap/error.hpp"

/**
 * @file data_model.hpp
 * @brief Core domain types for the two-equation mediation model, dataset validation,
 * CSV ingestion and compositional (count table) preprocessing.
 *
 * The model relates a treatment T, p mediators M, an outcome Y and q covariates X
 * (first column the intercept):
 *
 *     M = T alpha' + X zeta_M + E
 *     Y = T eta + M beta + X zeta_Y + eps
 *
 * Mediator indices are 0-based throughout the library; file outputs use 1-based positions.
 */

namespace jap {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr const char* kInterceptName = "(intercept)";

/**
 * @brief Validated observations (T, M, Y, X).
 *
 * Instances only come out of `validate_dataset()` (or row subsets of a validated dataset), so every
 * `Dataset` satisfies: equal row counts, n > p + q + 1, an all-ones first covariate column and no
 * non-finite entries. Immutable after construction.
 */
class Dataset {
public:
    Index n() const { return treatment_.size(); }
    Index p() const { return mediators_.cols(); }
    Index q() const { return covariates_.cols(); }

    const Vector& treatment() const { return treatment_; }
    const Matrix& mediators() const { return mediators_; }
    const Vector& outcome() const { return outcome_; }
    const Matrix& covariates() const { return covariates_; }

    const std::vector<std::string>& mediator_names() const { return mediator_names_; }
    const std::vector<std::string>& covariate_names() const { return covariate_names_; }
    const std::string& treatment_name() const { return treatment_name_; }
    const std::string& outcome_name() const { return outcome_name_; }

    /// Dataset restricted to the given rows, in the given order.
    Dataset rows(std::span<const Index> idx) const;

private:
    Dataset() = default;

    Vector treatment_;
    Matrix mediators_;
    Vector outcome_;
    Matrix covariates_;
    std::vector<std::string> mediator_names_;
    std::vector<std::string> covariate_names_;
    std::string treatment_name_ = "treatment";
    std::string outcome_name_ = "outcome";

    friend struct DatasetBuilder;
};

/// Optional column labels carried along for reporting.
struct DatasetNames {
    std::string treatment = "treatment";
    std::string outcome = "outcome";
    std::vector<std::string> mediators;  ///< empty: m1..mp
    std::vector<std::string> covariates; ///< empty: x1..xq
};

/// Full parameter set of the two structural equations.
struct Coefficients {
    Vector alpha;              ///< T -> M_j effects, length p
    Vector beta;               ///< M_j -> Y effects, length p
    double direct_effect = 0;  ///< T -> Y effect
    Matrix zeta_m;             ///< q x p covariate effects on mediators
    Vector zeta_y;             ///< q covariate effects on the outcome

    bool all_finite() const {
        return alpha.allFinite() && beta.allFinite() && std::isfinite(direct_effect) && zeta_m.allFinite() &&
               zeta_y.allFinite();
    }
};

/// Sorted set of (0-based) mediator indices.
class ActiveSet {
public:
    ActiveSet() = default;

    /// Sorts and checks indices against [0, p); duplicates are rejected.
    ActiveSet(std::vector<Index> indices, Index p) : indices_(std::move(indices)), p_(p) {
        std::sort(indices_.begin(), indices_.end());
        for (std::size_t i = 0; i < indices_.size(); ++i) {
            if (indices_[i] < 0 || indices_[i] >= p_) {
                throw InvalidInput("active set index " + std::to_string(indices_[i]) + " outside [0, " +
                                   std::to_string(p_) + ")");
            }
            if (i > 0 && indices_[i] == indices_[i - 1]) {
                throw InvalidInput("duplicate active set index " + std::to_string(indices_[i]));
            }
        }
    }

    /// {j : mask[j]}.
    static ActiveSet from_mask(const std::vector<bool>& mask) {
        std::vector<Index> idx;
        for (std::size_t j = 0; j < mask.size(); ++j) {
            if (mask[j]) {
                idx.push_back(static_cast<Index>(j));
            }
        }
        return ActiveSet(std::move(idx), static_cast<Index>(mask.size()));
    }

    const std::vector<Index>& indices() const { return indices_; }
    Index p() const { return p_; }
    std::size_t size() const { return indices_.size(); }
    bool empty() const { return indices_.empty(); }
    bool contains(Index j) const { return std::binary_search(indices_.begin(), indices_.end(), j); }

    std::vector<bool> mask() const {
        std::vector<bool> m(static_cast<std::size_t>(p_), false);
        for (Index j : indices_) {
            m[static_cast<std::size_t>(j)] = true;
        }
        return m;
    }

    friend bool operator==(const ActiveSet& a, const ActiveSet& b) { return a.indices_ == b.indices_; }

private:
    std::vector<Index> indices_;
    Index p_ = 0;
};

/// Per-mediator indirect effects alpha_j * beta_j * (t' - t).
struct MediationReport {
    Vector effects;
    ActiveSet active;
    double t = 0.0;
    double t_prime = 1.0;
};

// ---------------------------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------------------------

namespace detail {

inline void require_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
    for (Index c = 0; c < m.cols(); ++c) {
        for (Index r = 0; r < m.rows(); ++r) {
            if (!std::isfinite(m(r, c))) {
                throw InvalidInput(std::string(what) + ": non-finite entry at (" + std::to_string(r + 1) + "," +
                                   std::to_string(c + 1) + ")");
            }
        }
    }
}

inline bool is_all_ones(const Eigen::Ref<const Vector>& v) {
    return (v.array() == 1.0).all();
}

inline std::vector<std::string> default_names(const char* prefix, Index count) {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) {
        out.push_back(prefix + std::to_string(i + 1));
    }
    return out;
}

} // namespace detail

struct DatasetBuilder {
    static Dataset build(Vector t, Matrix m, Vector y, Matrix x, DatasetNames names) {
        Dataset ds;
        ds.treatment_ = std::move(t);
        ds.mediators_ = std::move(m);
        ds.outcome_ = std::move(y);
        ds.covariates_ = std::move(x);
        ds.treatment_name_ = std::move(names.treatment);
        ds.outcome_name_ = std::move(names.outcome);
        ds.mediator_names_ = std::move(names.mediators);
        ds.covariate_names_ = std::move(names.covariates);
        return ds;
    }
};

/**
 * Checks shapes and values and returns a `Dataset`.
 *
 * If no covariate column is identically one, an intercept column is prepended; if one exists
 * elsewhere it is moved to the front. The sample-size requirement n > p + q + 1 uses q after
 * that insertion.
 */
inline Dataset validate_dataset(const Eigen::Ref<const Vector>& raw_treatment,
                                const Eigen::Ref<const Matrix>& raw_mediators,
                                const Eigen::Ref<const Vector>& raw_outcome,
                                const Eigen::Ref<const Matrix>& raw_covariates, DatasetNames names = {}) {
    const Index n = raw_treatment.size();
    if (raw_mediators.rows() != n || raw_outcome.size() != n ||
        (raw_covariates.cols() > 0 && raw_covariates.rows() != n)) {
        throw InvalidInput("dimension mismatch: treatment has " + std::to_string(n) + " rows, mediators " +
                           std::to_string(raw_mediators.rows()) + ", outcome " + std::to_string(raw_outcome.size()) +
                           ", covariates " + std::to_string(raw_covariates.rows()));
    }
    if (raw_mediators.cols() == 0) {
        throw InvalidInput("at least one mediator column is required");
    }
    detail::require_finite(raw_treatment, "treatment");
    detail::require_finite(raw_mediators, "mediators");
    detail::require_finite(raw_outcome, "outcome");
    if (raw_covariates.cols() > 0) {
        detail::require_finite(raw_covariates, "covariates");
    }

    const Index p = raw_mediators.cols();
    if (names.mediators.empty()) {
        names.mediators = detail::default_names("m", p);
    } else if (static_cast<Index>(names.mediators.size()) != p) {
        throw InvalidInput("mediator name count does not match mediator columns");
    }
    if (names.covariates.empty()) {
        names.covariates = detail::default_names("x", raw_covariates.cols());
    } else if (static_cast<Index>(names.covariates.size()) != raw_covariates.cols()) {
        throw InvalidInput("covariate name count does not match covariate columns");
    }

    Index ones_col = -1;
    for (Index c = 0; c < raw_covariates.cols(); ++c) {
        if (detail::is_all_ones(raw_covariates.col(c))) {
            ones_col = c;
            break;
        }
    }
    Matrix x;
    std::vector<std::string> xnames;
    if (ones_col < 0) {
        x.resize(n, raw_covariates.cols() + 1);
        x.col(0).setOnes();
        if (raw_covariates.cols() > 0) {
            x.rightCols(raw_covariates.cols()) = raw_covariates;
        }
        xnames.push_back(kInterceptName);
        xnames.insert(xnames.end(), names.covariates.begin(), names.covariates.end());
    } else {
        x.resize(n, raw_covariates.cols());
        x.col(0) = raw_covariates.col(ones_col);
        xnames.push_back(names.covariates[static_cast<std::size_t>(ones_col)]);
        Index dst = 1;
        for (Index c = 0; c < raw_covariates.cols(); ++c) {
            if (c != ones_col) {
                x.col(dst++) = raw_covariates.col(c);
                xnames.push_back(names.covariates[static_cast<std::size_t>(c)]);
            }
        }
    }
    names.covariates = std::move(xnames);

    const Index q = x.cols();
    if (n <= p + q + 1) {
        throw InvalidInput("n must exceed p+q+1=" + std::to_string(p + q + 1) + " (got n=" + std::to_string(n) + ")");
    }
    return DatasetBuilder::build(raw_treatment, raw_mediators, raw_outcome, std::move(x), std::move(names));
}

inline Dataset Dataset::rows(std::span<const Index> idx) const {
    const Index m = static_cast<Index>(idx.size());
    Vector t(m), y(m);
    Matrix med(m, p()), x(m, q());
    for (Index i = 0; i < m; ++i) {
        const Index r = idx[static_cast<std::size_t>(i)];
        if (r < 0 || r >= n()) {
            throw InvalidInput("row index out of range");
        }
        t(i) = treatment_(r);
        y(i) = outcome_(r);
        med.row(i) = mediators_.row(r);
        x.row(i) = covariates_.row(r);
    }
    if (m <= p() + q() + 1) {
        throw InvalidInput("row subset too small: n must exceed p+q+1=" + std::to_string(p() + q() + 1));
    }
    return DatasetBuilder::build(std::move(t), std::move(med), std::move(y), std::move(x),
                                 DatasetNames{treatment_name_, outcome_name_, mediator_names_, covariate_names_});
}

// ---------------------------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------------------------

enum class Role { Treatment, Mediator, Outcome, Covariate };

/// Header name -> role. Columns without a role are ignored.
using ColumnRoles = std::map<std::string, Role>;

inline const char* to_string(Role r) {
    switch (r) {
    case Role::Treatment: return "treatment";
    case Role::Mediator: return "mediator";
    case Role::Outcome: return "outcome";
    case Role::Covariate: return "covariate";
    }
    return "?";
}

/// Reads a header CSV and assigns columns by role. Mediator and covariate order follows the header.
/// Parse errors report the 1-based file line (the header is line 1) and the column name.
inline Dataset load_csv(const std::string& path, const ColumnRoles& roles) {
    const csv::Table table = csv::read(path);
    for (const auto& [name, role] : roles) {
        if (std::find(table.header.begin(), table.header.end(), name) == table.header.end()) {
            throw InvalidInput(path + ": column '" + name + "' (" + to_string(role) + ") not found in header");
        }
    }
    auto role_of = [&](const std::string& name) -> std::optional<Role> {
        auto it = roles.find(name);
        if (it == roles.end()) {
            return std::nullopt;
        }
        return it->second;
    };

    std::vector<std::size_t> med_cols, cov_cols;
    std::optional<std::size_t> t_col, y_col;
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        auto r = role_of(table.header[c]);
        if (!r) {
            continue;
        }
        switch (*r) {
        case Role::Treatment:
            if (t_col) throw InvalidInput(path + ": more than one treatment column");
            t_col = c;
            break;
        case Role::Outcome:
            if (y_col) throw InvalidInput(path + ": more than one outcome column");
            y_col = c;
            break;
        case Role::Mediator: med_cols.push_back(c); break;
        case Role::Covariate: cov_cols.push_back(c); break;
        }
    }
    if (!t_col) throw InvalidInput(path + ": no column assigned the treatment role");
    if (!y_col) throw InvalidInput(path + ": no column assigned the outcome role");
    if (med_cols.empty()) throw InvalidInput(path + ": no column assigned the mediator role");

    const Index n = static_cast<Index>(table.rows.size());
    auto cell = [&](Index i, std::size_t c) {
        const auto& text = table.rows[static_cast<std::size_t>(i)][c];
        auto v = csv::parse_double(text);
        if (!v) {
            throw InvalidInput(path + ": cannot parse '" + text + "' at (row " +
                               std::to_string(table.line_numbers[static_cast<std::size_t>(i)]) + ", col " +
                               table.header[c] + ")");
        }
        return *v;
    };
    Vector t(n), y(n);
    Matrix m(n, static_cast<Index>(med_cols.size()));
    Matrix x(n, static_cast<Index>(cov_cols.size()));
    for (Index i = 0; i < n; ++i) {
        t(i) = cell(i, *t_col);
        y(i) = cell(i, *y_col);
        for (std::size_t k = 0; k < med_cols.size(); ++k) m(i, static_cast<Index>(k)) = cell(i, med_cols[k]);
        for (std::size_t k = 0; k < cov_cols.size(); ++k) x(i, static_cast<Index>(k)) = cell(i, cov_cols[k]);
    }
    DatasetNames names;
    names.treatment = table.header[*t_col];
    names.outcome = table.header[*y_col];
    for (auto c : med_cols) names.mediators.push_back(table.header[c]);
    for (auto c : cov_cols) names.covariates.push_back(table.header[c]);
    return validate_dataset(t, m, y, x, std::move(names));
}

/// Writes treatment, mediators, outcome and covariates (intercept included) with 17 significant digits.
inline void write_csv(const std::string& path, const Dataset& ds) {
    std::ofstream out(path);
    if (!out) {
        throw InvalidInput("cannot open '" + path + "' for writing");
    }
    std::vector<std::string> header;
    header.push_back(ds.treatment_name());
    header.insert(header.end(), ds.mediator_names().begin(), ds.mediator_names().end());
    header.push_back(ds.outcome_name());
    header.insert(header.end(), ds.covariate_names().begin(), ds.covariate_names().end());
    for (std::size_t i = 0; i < header.size(); ++i) {
        out << (i ? "," : "") << csv::quote_if_needed(header[i]);
    }
    out << '\n';
    for (Index i = 0; i < ds.n(); ++i) {
        out << csv::format_double(ds.treatment()(i));
        for (Index j = 0; j < ds.p(); ++j) out << ',' << csv::format_double(ds.mediators()(i, j));
        out << ',' << csv::format_double(ds.outcome()(i));
        for (Index k = 0; k < ds.q(); ++k) out << ',' << csv::format_double(ds.covariates()(i, k));
        out << '\n';
    }
}

/// Role map matching the header written by `write_csv`.
inline ColumnRoles roles_for(const Dataset& ds) {
    ColumnRoles roles;
    roles[ds.treatment_name()] = Role::Treatment;
    roles[ds.outcome_name()] = Role::Outcome;
    for (const auto& m : ds.mediator_names()) roles[m] = Role::Mediator;
    for (const auto& x : ds.covariate_names()) roles[x] = Role::Covariate;
    return roles;
}

// ---------------------------------------------------------------------------------------------
// Compositional preprocessing
// ---------------------------------------------------------------------------------------------

/// Sample-by-taxon count table with labels.
struct CountTable {
    std::vector<std::string> sample_ids;
    std::vector<std::string> taxa;
    Matrix counts;
};

/// Reads a count table whose first column (or `id_column`) holds sample identifiers.
inline CountTable load_count_csv(const std::string& path, const std::string& id_column = "") {
    const csv::Table table = csv::read(path);
    std::size_t id_col = 0;
    if (!id_column.empty()) {
        auto it = std::find(table.header.begin(), table.header.end(), id_column);
        if (it == table.header.end()) {
            throw InvalidInput(path + ": sample-id column '" + id_column + "' not found");
        }
        id_col = static_cast<std::size_t>(it - table.header.begin());
    }
    CountTable ct;
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        if (c != id_col) ct.taxa.push_back(table.header[c]);
    }
    if (ct.taxa.empty()) {
        throw InvalidInput(path + ": no count columns");
    }
    const Index n = static_cast<Index>(table.rows.size());
    ct.counts.resize(n, static_cast<Index>(ct.taxa.size()));
    for (Index i = 0; i < n; ++i) {
        const auto& row = table.rows[static_cast<std::size_t>(i)];
        ct.sample_ids.push_back(row[id_col]);
        Index g = 0;
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c == id_col) continue;
            auto v = csv::parse_double(row[c]);
            if (!v || !std::isfinite(*v) || *v < 0) {
                throw InvalidInput(path + ": invalid count '" + row[c] + "' at (row " +
                                   std::to_string(table.line_numbers[static_cast<std::size_t>(i)]) + ", col " +
                                   table.header[c] + ")");
            }
            ct.counts(i, g++) = *v;
        }
    }
    return ct;
}

/// Centered log-ratio: out(i,g) = log(c(i,g) + pc) - mean_g' log(c(i,g') + pc). Rows sum to zero.
inline Matrix clr_transform(const Eigen::Ref<const Matrix>& counts, double pseudocount) {
    if (!(pseudocount > 0.0) || !std::isfinite(pseudocount)) {
        throw InvalidInput("pseudocount must be positive");
    }
    if (counts.size() > 0 && (!counts.allFinite() || counts.minCoeff() < 0.0)) {
        throw InvalidInput("counts must be finite and nonnegative");
    }
    Matrix out = (counts.array() + pseudocount).log().matrix();
    for (Index i = 0; i < out.rows(); ++i) {
        out.row(i).array() -= out.row(i).mean();
    }
    return out;
}

/// Columns whose share of strictly positive entries is at least `threshold`.
inline std::vector<Index> prevalence_filter(const Eigen::Ref<const Matrix>& counts, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw InvalidInput("prevalence threshold must lie in [0, 1]");
    }
    if (counts.size() > 0 && (!counts.allFinite() || counts.minCoeff() < 0.0)) {
        throw InvalidInput("counts must be finite and nonnegative");
    }
    std::vector<Index> keep;
    const double n = static_cast<double>(counts.rows());
    for (Index g = 0; g < counts.cols(); ++g) {
        const double present = static_cast<double>((counts.col(g).array() > 0.0).count());
        if (threshold == 0.0 || (n > 0 && present / n >= threshold)) {
            keep.push_back(g);
        }
    }
    return keep;
}

/// Columns with mean >= `min_mean`. Pass -infinity to keep everything.
inline std::vector<Index> abundance_filter(const Eigen::Ref<const Matrix>& clr, double min_mean) {
    if (!clr.allFinite()) {
        throw InvalidInput("abundance filter input has non-finite entries");
    }
    std::vector<Index> keep;
    for (Index g = 0; g < clr.cols(); ++g) {
        if (clr.rows() == 0 || clr.col(g).mean() >= min_mean) {
            keep.push_back(g);
        }
    }
    return keep;
}

inline Matrix select_columns(const Eigen::Ref<const Matrix>& m, const std::vector<Index>& cols) {
    Matrix out(m.rows(), static_cast<Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) {
        out.col(static_cast<Index>(k)) = m.col(cols[k]);
    }
    return out;
}

/// Output of the count-table pipeline: prevalence filter, CLR, abundance filter.
struct PreprocessResult {
    Matrix clr;                      ///< n x retained
    std::vector<Index> retained;     ///< indices into the input columns
    std::vector<Index> after_prevalence;
};

inline PreprocessResult preprocess_counts(const Eigen::Ref<const Matrix>& counts, double prevalence,
                                          double pseudocount, double min_mean) {
    PreprocessResult res;
    res.after_prevalence = prevalence_filter(counts, prevalence);
    if (res.after_prevalence.empty()) {
        throw InvalidInput("prevalence filter removed every column");
    }
    const Matrix clr = clr_transform(select_columns(counts, res.after_prevalence), pseudocount);
    const auto keep = abundance_filter(clr, min_mean);
    if (keep.empty()) {
        throw InvalidInput("abundance filter removed every column");
    }
    res.clr = select_columns(clr, keep);
    for (Index k : keep) {
        res.retained.push_back(res.after_prevalence[static_cast<std::size_t>(k)]);
    }
    return res;
}

} // namespace jap
