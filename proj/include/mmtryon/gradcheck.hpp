#pragma once

// Central finite-difference verification of analytic gradients. Lives next
// to the tensor core so both the test suites and the evaluate module's
// gradient_check harness use the same machinery.

#include <functional>
#include <string>
#include <vector>

#include "mmtryon/rng.hpp"
#include "mmtryon/tensor.hpp"

namespace mmtryon {

struct GradCheckEntry {
    std::string input;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int coords_checked = 0;
};

struct GradCheckResult {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

// fn rebuilds the scalar loss from the given leaf inputs each call.
// Inputs must already have requires_grad set. Coordinates are sampled when
// an input is larger than max_coords_per_input.
inline GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& fn,
                                         const std::vector<std::pair<std::string, Tensor<double>*>>& inputs,
                                         double eps = 1e-5, int max_coords_per_input = 64,
                                         uint64_t seed = 1234, double rel_floor = 1e-6) {
    for (auto& [name, t] : inputs) t->zero_grad();
    Tensor<double> y = fn();
    y.backward();

    std::vector<std::vector<double>> analytic;
    for (auto& [name, t] : inputs) {
        analytic.push_back(t->grad().empty() ? std::vector<double>(static_cast<size_t>(t->numel()), 0.0)
                                             : t->grad());
    }

    GradCheckResult res;
    RandomStream rs(seed);
    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor<double>* t = inputs[k].second;
        int64_t n = t->numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_input) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < max_coords_per_input; ++i) coords.push_back(rs.randint(0, n));
        }
        GradCheckEntry e;
        e.input = inputs[k].first;
        e.coords_checked = static_cast<int>(coords.size());
        for (int64_t c : coords) {
            double orig = t->data()[c];
            double fp, fm;
            {
                NoGradGuard ng;
                t->data()[c] = orig + eps;
                fp = fn().item();
                t->data()[c] = orig - eps;
                fm = fn().item();
                t->data()[c] = orig;
            }
            double fd = (fp - fm) / (2.0 * eps);
            double an = analytic[k][static_cast<size_t>(c)];
            double denom = std::max({std::fabs(fd), std::fabs(an), rel_floor});
            double rel = std::fabs(an - fd) / denom;
            e.max_rel_err = std::max(e.max_rel_err, rel);
            e.max_abs_err = std::max(e.max_abs_err, std::fabs(an - fd));
        }
        res.max_rel_err = std::max(res.max_rel_err, e.max_rel_err);
        res.entries.push_back(std::move(e));
    }
    return res;
}

}  // namespace mmtryon
