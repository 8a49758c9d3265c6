#include "owps/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace owps {

namespace {

double power_of_two_at_most(double h) { return std::exp2(std::floor(std::log2(h))); }

double eval_at(const std::function<Tensor()>& f) {
    NoGradGuard guard;
    return static_cast<double>(f().item());
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, Tensor x, const GradCheckOptions& options) {
    if (!(options.h >= 1e-8 && options.h <= 1e-1)) {
        throw Error(ErrorKind::Domain, "finite-difference step must lie in [1e-8, 1e-1]");
    }
    const double h = power_of_two_at_most(options.h);

    auto& tape = Tape::current();
    tape.clear();
    const bool had_flag = x.requires_grad();
    x.set_requires_grad(true);
    x.clear_grad();
    Tensor loss = f();
    tape.backward(loss);
    std::vector<Real> analytic(x.numel(), Real{0});
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    x.clear_grad();
    tape.clear();
    x.set_requires_grad(had_flag);

    std::vector<std::size_t> coords = options.coords;
    if (coords.empty()) {
        coords.resize(x.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    }

    std::vector<double> numeric(coords.size());
    auto values = x.mutable_data();
    for (std::size_t c = 0; c < coords.size(); ++c) {
        const std::size_t i = coords[c];
        const Real original = values[i];
        auto central = [&](double step) {
            values[i] = static_cast<Real>(original + step);
            const double up = eval_at(f);
            values[i] = static_cast<Real>(original - step);
            const double down = eval_at(f);
            values[i] = original;
            return (up - down) / (2.0 * step);
        };
        const double coarse = central(h);
        const double fine = central(h / 2.0);
        numeric[c] = (4.0 * fine - coarse) / 3.0;
    }

    // Rounding leaves absolute noise of about eps * |f| / h in each estimate,
    // so errors are measured against the largest checked gradient.
    double scale = options.floor;
    for (std::size_t c = 0; c < coords.size(); ++c) {
        scale = std::max({scale, std::fabs(static_cast<double>(analytic[coords[c]])), std::fabs(numeric[c])});
    }
    GradCheckResult result;
    for (std::size_t c = 0; c < coords.size(); ++c) {
        const double a = analytic[coords[c]];
        const double rel = std::fabs(a - numeric[c]) / scale;
        if (rel >= result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_index = coords[c];
            result.analytic = a;
            result.numeric = numeric[c];
        }
    }
    return result;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    Tensor probe = x.clone();
    GradCheckOptions options;
    options.h = h;
    return finite_diff_check([&] { return f(probe); }, probe, options).max_rel_error;
}

}  // namespace owps
