#include "rtprop/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace rtprop {

namespace {

struct Simplex {
    std::vector<std::vector<double>> x;
    std::vector<double> f;
};

} // namespace

OptimResult nelder_mead(const Objective& objective, std::vector<double> x0, std::span<const double> lower,
                        std::span<const double> upper, const NelderMeadOptions& options) {
    const std::size_t n = x0.size();
    OptimResult result;
    auto project = [&](std::vector<double>& x) {
        for (std::size_t i = 0; i < n; ++i) x[i] = std::clamp(x[i], lower[i], upper[i]);
    };
    auto eval = [&](const std::vector<double>& x) {
        ++result.evaluations;
        const double v = objective(x);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    };
    project(x0);
    if (n == 0) {
        result.x = x0;
        result.value = eval(x0);
        result.converged = true;
        result.trace.push_back(result.value);
        return result;
    }

    std::vector<double> best_x = x0;
    double best_f = eval(x0);

    for (int round = 0; round <= options.restarts; ++round) {
        Simplex s;
        s.x.push_back(best_x);
        s.f.push_back(best_f);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v = best_x;
            double step = options.initial_step * (round == 0 ? 1.0 : 0.25);
            if (v[i] + step > upper[i]) step = -step;
            v[i] += step;
            project(v);
            if (v[i] == best_x[i]) v[i] = std::clamp(best_x[i] - step, lower[i], upper[i]);
            s.x.push_back(v);
            s.f.push_back(eval(v));
        }

        std::vector<std::size_t> order(n + 1);
        bool converged = false;
        while (result.evaluations < options.max_evaluations) {
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.f[a] < s.f[b]; });
            const std::size_t ib = order.front(), iw = order.back(), isw = order[n - 1];
            ++result.iterations;
            result.trace.push_back(std::min(s.f[ib], best_f));

            double xspread = 0.0;
            for (std::size_t k = 0; k <= n; ++k)
                for (std::size_t i = 0; i < n; ++i) xspread = std::max(xspread, std::abs(s.x[k][i] - s.x[ib][i]));
            const double fspread = s.f[iw] - s.f[ib];
            if (fspread <= options.ftol_rel * (std::abs(s.f[ib]) + 1e-12) && xspread <= options.xtol) {
                converged = true;
                break;
            }
            if (xspread <= 1e-14) { // collapsed simplex
                converged = true;
                break;
            }

            std::vector<double> centroid(n, 0.0);
            for (std::size_t k = 0; k <= n; ++k)
                if (k != iw)
                    for (std::size_t i = 0; i < n; ++i) centroid[i] += s.x[k][i] / static_cast<double>(n);
            auto along = [&](double t) {
                std::vector<double> v(n);
                for (std::size_t i = 0; i < n; ++i) v[i] = centroid[i] + t * (s.x[iw][i] - centroid[i]);
                project(v);
                return v;
            };

            auto xr = along(-1.0);
            const double fr = eval(xr);
            if (fr < s.f[ib]) {
                auto xe = along(-2.0);
                const double fe = eval(xe);
                if (fe < fr) {
                    s.x[iw] = std::move(xe);
                    s.f[iw] = fe;
                } else {
                    s.x[iw] = std::move(xr);
                    s.f[iw] = fr;
                }
            } else if (fr < s.f[isw]) {
                s.x[iw] = std::move(xr);
                s.f[iw] = fr;
            } else {
                const bool outside = fr < s.f[iw];
                auto xc = along(outside ? -0.5 : 0.5);
                const double fc = eval(xc);
                if (fc < (outside ? fr : s.f[iw])) {
                    s.x[iw] = std::move(xc);
                    s.f[iw] = fc;
                } else {
                    for (std::size_t k = 0; k <= n; ++k) {
                        if (k == ib) continue;
                        for (std::size_t i = 0; i < n; ++i) s.x[k][i] = s.x[ib][i] + 0.5 * (s.x[k][i] - s.x[ib][i]);
                        project(s.x[k]);
                        s.f[k] = eval(s.x[k]);
                    }
                }
            }
        }

        const auto ib = static_cast<std::size_t>(std::min_element(s.f.begin(), s.f.end()) - s.f.begin());
        const bool improved = s.f[ib] < best_f;
        if (s.f[ib] <= best_f) {
            best_f = s.f[ib];
            best_x = s.x[ib];
        }
        result.converged = converged;
        if (!converged) break;
        // A restart that finds nothing better confirms the optimum.
        if (round > 0 && !improved) break;
    }
    result.x = best_x;
    result.value = best_f;
    return result;
}

} // namespace rtprop
