#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "jap/data_model.hpp"
#include "jap/error.hpp"

namespace jap {

/// Largest admissible condition number of a basis before it is treated as rank deficient.
inline constexpr double kMaxConditionNumber = 1e12;

/// Standard errors below this are floored so truncation levels stay positive on exact fits.
inline constexpr double kStandardErrorFloor = 1e-12;

namespace detail {

/// Throws `SingularDesign` when the factored matrix is rank deficient at `kMaxConditionNumber`,
/// naming the columns that pivoting pushed into the deficient tail.
inline void require_well_conditioned(const Eigen::ColPivHouseholderQR<Matrix>& qr,
                                     const std::vector<std::string>& names) {
    const Index k = qr.cols();
    const Matrix r = qr.matrixR().topLeftCorner(k, k).template triangularView<Eigen::Upper>();
    Eigen::JacobiSVD<Matrix> svd(r);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    const double smin = sv(k - 1);
    if (smax > 0.0 && smin > 0.0 && smax / smin <= kMaxConditionNumber) {
        return;
    }
    const auto& perm = qr.colsPermutation().indices();
    std::vector<std::string> offending;
    const double lead = std::abs(r(0, 0));
    for (Index i = 0; i < k; ++i) {
        if (std::abs(r(i, i)) <= lead / kMaxConditionNumber) {
            offending.push_back(names[static_cast<std::size_t>(perm(i))]);
        }
    }
    if (offending.empty()) {
        offending.push_back(names[static_cast<std::size_t>(perm(k - 1))]);
    }
    std::ostringstream os;
    os << "singular design: {";
    for (std::size_t i = 0; i < offending.size(); ++i) {
        os << (i ? ", " : "") << offending[i];
    }
    os << "} linearly dependent on the remaining columns (condition number ";
    if (smin > 0.0) {
        os << smax / smin;
    } else {
        os << "inf";
    }
    os << " exceeds " << kMaxConditionNumber << ")";
    throw SingularDesign(os.str());
}

inline std::vector<std::string> column_labels(Index k) {
    std::vector<std::string> names;
    for (Index c = 0; c < k; ++c) {
        names.push_back("column " + std::to_string(c + 1));
    }
    return names;
}

} // namespace detail

/**
 * @brief Orthogonal projection onto the complement of span(B): x -> (I - B (B'B)^{-1} B') x.
 *
 * Built from a column-pivoted Householder QR of the basis; the projector is never formed
 * explicitly. Construction fails with `SingularDesign` when cond(B) exceeds `kMaxConditionNumber`,
 * naming the columns the pivoting pushed to the rank-deficient tail.
 */
class Projector {
public:
    explicit Projector(Matrix basis, std::vector<std::string> column_names = {})
        : basis_(std::move(basis)), names_(std::move(column_names)) {
        if (names_.empty()) {
            names_ = detail::column_labels(basis_.cols());
        }
        const Index k = basis_.cols();
        if (k == 0) {
            return;
        }
        if (basis_.rows() < k) {
            throw SingularDesign("singular design: basis has more columns (" + std::to_string(k) + ") than rows");
        }
        qr_.compute(basis_);
        detail::require_well_conditioned(qr_, names_);
        q_ = qr_.householderQ() * Matrix::Identity(basis_.rows(), k);
    }

    Index rows() const { return basis_.rows(); }
    Index cols() const { return basis_.cols(); }
    const Matrix& basis() const { return basis_; }

    /// P_perp * target.
    Matrix residualize(const Matrix& target) const {
        check_rows(target.rows());
        if (cols() == 0) {
            return target;
        }
        Matrix coef = q_.transpose() * target;
        return target - q_ * coef;
    }

    Vector residualize(const Vector& target) const {
        check_rows(target.size());
        if (cols() == 0) {
            return target;
        }
        Vector coef = q_.transpose() * target;
        return target - q_ * coef;
    }

    /// Least-squares coefficients (B'B)^{-1} B' target.
    Matrix coefficients(const Matrix& target) const {
        check_rows(target.rows());
        if (cols() == 0) {
            return Matrix(0, target.cols());
        }
        return qr_.solve(target);
    }

    Vector coefficients(const Vector& target) const {
        check_rows(target.size());
        if (cols() == 0) {
            return Vector(0);
        }
        return qr_.solve(target);
    }

private:
    void check_rows(Index r) const {
        if (r != rows()) {
            throw InvalidInput("projector: target has " + std::to_string(r) + " rows, basis has " +
                               std::to_string(rows()));
        }
    }

    Matrix basis_;
    std::vector<std::string> names_;
    Eigen::ColPivHouseholderQR<Matrix> qr_;
    Matrix q_; // thin Q, n x k
};

/// (I - B(B'B)^{-1}B') target.
inline Matrix residualize(const Matrix& basis, const Matrix& target) {
    return Projector(basis).residualize(target);
}

/// [T, X] with labels, the mediator-model design D_M.
inline Projector treatment_covariate_projector(const Dataset& ds) {
    Matrix d(ds.n(), 1 + ds.q());
    d.col(0) = ds.treatment();
    d.rightCols(ds.q()) = ds.covariates();
    std::vector<std::string> names{ds.treatment_name()};
    names.insert(names.end(), ds.covariate_names().begin(), ds.covariate_names().end());
    return Projector(std::move(d), std::move(names));
}

inline Projector covariate_projector(const Dataset& ds) {
    return Projector(ds.covariates(), ds.covariate_names());
}

/// Projected quantities of the mediator model shared by OLS and the penalized fit.
struct MediatorLayout {
    Projector x_projector;  ///< complement of span(X)
    Vector t_tilde;         ///< P_X^perp T
    double t_norm2 = 0.0;   ///< ||P_X^perp T||^2
    Matrix m_tilde;         ///< P_X^perp M
    Vector z;               ///< M_j' P^perp T / ||P^perp T||^2, the per-mediator OLS slope
};

inline MediatorLayout mediator_layout(const Dataset& ds) {
    // Rank check of the full design (T, X); throws naming the collinear column.
    (void)treatment_covariate_projector(ds);
    MediatorLayout lay{covariate_projector(ds), {}, 0.0, {}, {}};
    lay.t_tilde = lay.x_projector.residualize(ds.treatment());
    lay.t_norm2 = lay.t_tilde.squaredNorm();
    if (!(lay.t_norm2 > 0.0)) {
        throw SingularDesign("singular design: treatment is collinear with the covariates");
    }
    lay.m_tilde = lay.x_projector.residualize(ds.mediators());
    lay.z = lay.m_tilde.transpose() * lay.t_tilde / lay.t_norm2;
    return lay;
}

/// OLS of the mediator model M_j ~ (T, X).
struct MediatorOls {
    Vector alpha_ols;
    Vector se_alpha;
    Matrix zeta_m_ols;   ///< q x p
    Vector sigma_jj_hat; ///< RSS_j / (n - q - 1)
    double sigma_t2_hat = 0.0;
};

inline MediatorOls ols_mediator(const Dataset& ds, const MediatorLayout& lay) {
    const Index n = ds.n(), p = ds.p(), q = ds.q();
    const double dof = static_cast<double>(n - q - 1);
    MediatorOls out;
    out.alpha_ols = lay.z;
    out.sigma_jj_hat.resize(p);
    out.se_alpha.resize(p);
    for (Index j = 0; j < p; ++j) {
        const double rss = (lay.m_tilde.col(j) - lay.z(j) * lay.t_tilde).squaredNorm();
        out.sigma_jj_hat(j) = rss / dof;
        out.se_alpha(j) = std::max(std::sqrt(out.sigma_jj_hat(j) / lay.t_norm2), kStandardErrorFloor);
    }
    const Matrix resid = ds.mediators() - ds.treatment() * out.alpha_ols.transpose();
    out.zeta_m_ols = lay.x_projector.coefficients(resid);
    out.sigma_t2_hat = lay.t_norm2 / static_cast<double>(n);
    return out;
}

inline MediatorOls ols_mediator(const Dataset& ds) {
    return ols_mediator(ds, mediator_layout(ds));
}

/// OLS of the outcome model Y ~ (T, X, M).
struct OutcomeOls {
    Vector beta_ols;
    Vector se_beta;
    double direct_effect_ols = 0.0;
    Vector zeta_y_ols;
    double sigma2_hat = 0.0; ///< RSS / (n - p - q - 1)
};

inline OutcomeOls ols_outcome(const Dataset& ds) {
    const Index n = ds.n(), p = ds.p(), q = ds.q();
    const Projector dm = treatment_covariate_projector(ds);
    const Matrix m_tilde = dm.residualize(ds.mediators());
    const Vector y_tilde = dm.residualize(ds.outcome());

    // Rank check of M after partialling out (T, X) is a rank check of the full design.
    Eigen::ColPivHouseholderQR<Matrix> qr(m_tilde);
    detail::require_well_conditioned(qr, ds.mediator_names());
    OutcomeOls out;
    out.beta_ols = qr.solve(y_tilde);
    const double dof = static_cast<double>(n - p - q - 1);
    if (!(dof > 0)) {
        throw InvalidInput("nonpositive residual degrees of freedom in the outcome model");
    }
    out.sigma2_hat = (y_tilde - m_tilde * out.beta_ols).squaredNorm() / dof;

    // diag((M~'M~)^{-1}) from R^{-1}: M~ P = Q R  =>  (M~'M~)^{-1} = P R^{-1} R^{-T} P'.
    const Matrix r = qr.matrixR().topLeftCorner(p, p).template triangularView<Eigen::Upper>();
    const Matrix rinv = r.template triangularView<Eigen::Upper>().solve(Matrix::Identity(p, p));
    const auto& perm = qr.colsPermutation().indices();
    out.se_beta.resize(p);
    for (Index k = 0; k < p; ++k) {
        const double d = rinv.row(k).squaredNorm();
        out.se_beta(perm(k)) = std::max(std::sqrt(d * out.sigma2_hat), kStandardErrorFloor);
    }
    const Vector theta = dm.coefficients(Vector(ds.outcome() - ds.mediators() * out.beta_ols));
    out.direct_effect_ols = theta(0);
    out.zeta_y_ols = theta.tail(q);
    return out;
}

/// Both OLS fits in one record: the input to the truncated initialization.
struct OlsSummary {
    Vector alpha_ols;
    Vector se_alpha;
    Vector beta_ols;
    Vector se_beta;
    double direct_effect_ols = 0.0;
    Matrix zeta_m_ols;
    Vector zeta_y_ols;
    double sigma2_hat = 0.0;
    Vector sigma_jj_hat;
    double sigma_t2_hat = 0.0;
};

inline OlsSummary combine(const MediatorOls& m, const OutcomeOls& y) {
    return OlsSummary{m.alpha_ols, m.se_alpha,         y.beta_ols,   y.se_beta,       y.direct_effect_ols,
                      m.zeta_m_ols, y.zeta_y_ols,      y.sigma2_hat, m.sigma_jj_hat, m.sigma_t2_hat};
}

inline OlsSummary ols_summary(const Dataset& ds) {
    return combine(ols_mediator(ds), ols_outcome(ds));
}

} // namespace jap
