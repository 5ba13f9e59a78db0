#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "jap/estimator.hpp"
#include "jap/initializer.hpp"
#include "jap/penalized_solver.hpp"
#include "jap/projection_ols.hpp"
#include "jap/sim_harness.hpp"

namespace jap {

struct CheckLine {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct SelfCheckOptions {
    std::uint64_t seed = 20240601;
    /// Negative control: shift one nonzero outcome coefficient by +0.1 before the stationarity check.
    bool perturb = false;
    int kkt_instances = 10;
    int joint_instances = 20;
    int ratio_tuples = 10000;
};

namespace detail {

inline Weights jap_weights_for(const Dataset& ds, const WeightExponents& e) {
    return compute_weights(init_estimates(ols_summary(ds)), e, Method::Jap);
}

} // namespace detail

/// Oracle suite on seeded random instances; every line carries its own tolerance.
inline std::vector<CheckLine> run_self_check(const SelfCheckOptions& o = {}) {
    std::vector<CheckLine> out;
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const WeightExponents exps{2.0, 0.5, 2.0, 0.5};

    {
        double worst = 0.0;
        for (int i = 0; i < o.kkt_instances; ++i) {
            const Dataset ds = random_instance(rng(), 100, 5, 2);
            PenaltySpec pen;
            pen.lambda = 1.0 + 49.0 * unif(rng);
            pen.weights = detail::jap_weights_for(ds, exps).w_beta;
            const FitResult fit = fit_outcome(ds, pen);
            Vector b = fit.penalized_coefs;
            if (o.perturb) {
                for (Index j = 0; j < b.size(); ++j) {
                    if (b(j) != 0.0) {
                        b(j) += 0.1;
                        break;
                    }
                }
            }
            worst = std::max(worst, kkt_check(ds, pen, b));
        }
        out.push_back({"kkt_outcome", worst, 1e-8, worst <= 1e-8});
    }

    {
        double worst = 0.0;
        for (int i = 0; i < o.joint_instances; ++i) {
            const Index p = 2 + static_cast<Index>(rng() % 9);
            const Index n = 60 + static_cast<Index>(rng() % 141);
            const Dataset ds = random_instance(rng(), n, p, 2);
            const Weights w = detail::jap_weights_for(ds, exps);
            PenaltySpec pm, py;
            pm.lambda = 2.0;
            pm.weights = w.w_alpha;
            py.lambda = 30.0;
            py.weights = w.w_beta;
            worst = std::max(worst, joint_vs_projected_check(ds, pm, py).max_discrepancy);
        }
        out.push_back({"joint_vs_projected", worst, 1e-6, worst <= 1e-6});
    }

    {
        double worst = 0.0;
        std::uniform_real_distribution<double> mag(0.05, 3.0);
        std::uniform_int_distribution<int> gi(0, 9), ei(0, 4);
        for (int i = 0; i < o.ratio_tuples; ++i) {
            const double eta = 0.25 * (1 + ei(rng));
            double gamma = 0.75 + 0.25 * gi(rng);
            if (!(gamma > 2.0 * eta)) {
                gamma = 2.0 * eta + 0.25;
            }
            InitEstimates init;
            init.alpha0 = Vector::Constant(1, (unif(rng) < 0.5 ? -1.0 : 1.0) * mag(rng));
            init.beta0 = Vector::Constant(1, (unif(rng) < 0.5 ? -1.0 : 1.0) * mag(rng));
            const WeightExponents e{gamma, eta, gamma, eta};
            const auto [ra, rb] = weight_ratio(init, e, 0);
            const double a = std::abs(init.alpha0(0)), b = std::abs(init.beta0(0));
            const double ea = 1.0 + std::pow(a, gamma - 2.0 * eta) * std::pow(b, gamma);
            const double eb = 1.0 + std::pow(b, gamma - 2.0 * eta) * std::pow(a, gamma);
            worst = std::max({worst, std::abs(ra - ea) / ea, std::abs(rb - eb) / eb});
        }
        out.push_back({"weight_ratio_identity", worst, 1e-12, worst <= 1e-12});
    }

    {
        double worst_closed = 0.0, worst_ols = 0.0;
        for (int i = 0; i < o.kkt_instances; ++i) {
            const Dataset ds = random_instance(rng(), 80, 4, 2);
            const MediatorLayout lay = mediator_layout(ds);
            const Weights w = detail::jap_weights_for(ds, exps);
            PenaltySpec pm;
            pm.lambda = 5.0 * unif(rng);
            pm.weights = w.w_alpha;
            const FitResult med = fit_mediator(ds, lay, pm);
            for (Index j = 0; j < ds.p(); ++j) {
                const double expect = soft_threshold(lay.z(j), pm.lambda / (2.0 * w.w_alpha(j) * lay.t_norm2));
                worst_closed = std::max(worst_closed, std::abs(med.penalized_coefs(j) - expect));
            }
            const OlsSummary ols = ols_summary(ds);
            PenaltySpec zero_m, zero_y;
            zero_m.weights = w.w_alpha;
            zero_y.weights = w.w_beta;
            const FitResult m0 = fit_mediator(ds, lay, zero_m);
            const FitResult y0 = fit_outcome(ds, zero_y);
            worst_ols = std::max({worst_ols, (m0.penalized_coefs - ols.alpha_ols).cwiseAbs().maxCoeff(),
                                  (y0.penalized_coefs - ols.beta_ols).cwiseAbs().maxCoeff()});
        }
        out.push_back({"mediator_closed_form", worst_closed, 0.0, worst_closed == 0.0});
        out.push_back({"zero_penalty_matches_ols", worst_ols, 1e-8, worst_ols <= 1e-8});
    }
    return out;
}

} // namespace jap
