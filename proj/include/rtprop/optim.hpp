#pragma once

#include <functional>
#include <span>
#include <vector>

namespace rtprop {

struct NelderMeadOptions {
    double ftol_rel = 1e-10; // spread of simplex values relative to |f_best|
    double xtol = 1e-8;      // max coordinate distance from the best vertex
    int max_evaluations = 10000;
    double initial_step = 0.5;
    int restarts = 1; // fresh simplices around the optimum after convergence
};

struct OptimResult {
    std::vector<double> x;
    double value = 0.0;
    int evaluations = 0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace; // best value after each iteration
};

using Objective = std::function<double(std::span<const double>)>;

// Box-constrained Nelder-Mead. Trial points are projected onto [lower, upper];
// non-finite objective values are treated as +inf.
OptimResult nelder_mead(const Objective& f, std::vector<double> x0, std::span<const double> lower,
                        std::span<const double> upper, const NelderMeadOptions& options = {});

} // namespace rtprop
