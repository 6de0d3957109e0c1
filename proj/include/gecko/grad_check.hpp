#pragma once

// Central finite-difference gradient checker (f64 only). Perturbs every
// scalar of every registered parameter, compares against the analytic
// gradients stored in the ParamStore, and reports the worst relative error.
//
// rel err = |analytic - numeric| / max(|analytic|, |numeric|, 1), i.e. plain
// absolute error for sub-unit gradients, which keeps O(1e-10) finite
// difference noise from failing near-zero gradients.

#include <functional>
#include <string>
#include <vector>

#include "gecko/common.hpp"
#include "gecko/params.hpp"

namespace gecko {

struct GradCheckEntry {
    std::string name;
    size_t flat_index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_err = 0;
};

struct GradCheckReport {
    double max_rel_err = 0;
    GradCheckEntry worst;
    size_t checked = 0;
    bool pass = false;
    std::vector<GradCheckEntry> per_param_max;  // one entry per parameter tensor
};

// loss_fn must evaluate the scalar loss from the *current* contents of
// `params` without touching the stored gradients.
inline GradCheckReport grad_check(const std::function<double()>& loss_fn,
                                  ParamStore<double>& params, double step, double tolerance) {
    GradCheckReport report;
    for (size_t pi = 0; pi < params.count(); ++pi) {
        GradCheckEntry param_worst;
        param_worst.name = params.names[pi];
        Tensor<double>& v = params.value[pi];
        const Tensor<double>& g = params.grad[pi];
        for (size_t i = 0; i < v.size(); ++i) {
            const double saved = v.data[i];
            v.data[i] = saved + step;
            const double fp = loss_fn();
            v.data[i] = saved - step;
            const double fm = loss_fn();
            v.data[i] = saved;
            GECKO_CHECK(is_finite_value(fp) && is_finite_value(fm),
                        "non-finite loss while perturbing " << params.names[pi] << "[" << i << "]");
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = g.data[i];
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1.0});
            const double rel = std::fabs(analytic - numeric) / denom;
            ++report.checked;
            if (rel >= param_worst.rel_err) {
                param_worst.flat_index = i;
                param_worst.analytic = analytic;
                param_worst.numeric = numeric;
                param_worst.rel_err = rel;
            }
            if (rel >= report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = {params.names[pi], i, analytic, numeric, rel};
            }
        }
        report.per_param_max.push_back(param_worst);
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

}  // namespace gecko
