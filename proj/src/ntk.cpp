#include "fdsim/ntk.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "fdsim/errors.hpp"

namespace fdsim {

namespace {

void require_teacher(const KernelRegimeSystem& sys) {
  if (!sys.teacher_pred.has_value())
    throw ValidationError("kernel-regime system has no teacher prediction");
  if (sys.teacher_pred->size() != sys.truth.size())
    throw ValidationError("teacher prediction length does not match y");
}

double inf_norm_gap(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

void validate(const KernelRegimeSystem& sys) {
  if (sys.a <= 0.0) throw ValidationError("a must be positive");
  if (sys.lambda <= 0.0) throw ValidationError("lambda must be positive");
  if (sys.truth.empty()) throw ValidationError("y must be nonempty");
  const double factor1 = sys.lambda / (sys.a + sys.lambda);
  if (!(std::abs(factor1) < 1.0))
    throw ValidationError("geometric factor lambda/(a+lambda) not below one");
  if (sys.workers >= 2) {
    const double factor2 =
        sys.lambda / ((sys.workers - 1) * (sys.a + sys.lambda));
    if (!(std::abs(factor2) < 1.0))
      throw ValidationError("geometric factor lambda/((C-1)(a+lambda)) not below one");
  }
  if (sys.teacher_pred && sys.teacher_pred->size() != sys.truth.size())
    throw ValidationError("teacher prediction length does not match y");
  if (sys.initial_outputs) {
    if (static_cast<int>(sys.initial_outputs->size()) != sys.workers)
      throw ValidationError("initial outputs count does not match worker count");
    for (const auto& f : *sys.initial_outputs)
      if (f.size() != sys.truth.size())
        throw ValidationError("initial output length does not match y");
  }
}

std::vector<double> kd_fixed_point(const KernelRegimeSystem& sys) {
  require_teacher(sys);
  const double denom = sys.a + sys.lambda;
  std::vector<double> out(sys.truth.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (sys.a * sys.truth[i] + sys.lambda * (*sys.teacher_pred)[i]) / denom;
  return out;
}

double kd_error(const KernelRegimeSystem& sys) {
  require_teacher(sys);
  double gap2 = 0.0;
  for (std::size_t i = 0; i < sys.truth.size(); ++i) {
    const double d = sys.truth[i] - (*sys.teacher_pred)[i];
    gap2 += d * d;
  }
  return sys.lambda / (sys.a + sys.lambda) * std::sqrt(gap2);
}

std::vector<std::vector<double>> cd_update(
    const KernelRegimeSystem& sys, const std::vector<std::vector<double>>& outputs) {
  if (sys.workers < 2) throw ValidationError("co-distillation needs C >= 2 workers");
  if (static_cast<int>(outputs.size()) != sys.workers)
    throw ValidationError("outputs count does not match worker count");
  const std::size_t n = sys.truth.size();
  for (const auto& f : outputs)
    if (f.size() != n) throw ValidationError("output length does not match y");

  std::vector<double> total(n, 0.0);
  for (const auto& f : outputs)
    for (std::size_t i = 0; i < n; ++i) total[i] += f[i];

  const double denom = sys.a + sys.lambda;
  const double share = sys.lambda / static_cast<double>(sys.workers - 1);
  std::vector<std::vector<double>> next(outputs.size());
  for (std::size_t c = 0; c < outputs.size(); ++c) {
    next[c].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double others = total[i] - outputs[c][i];
      next[c][i] = (sys.a * sys.truth[i] + share * others) / denom;
    }
  }
  return next;
}

std::vector<double> cd_closed_form(const KernelRegimeSystem& sys, int r) {
  if (r < 0) throw ValidationError("round index must be non-negative");
  if (!sys.initial_outputs.has_value())
    throw ValidationError("closed form needs initial outputs");
  validate(sys);
  if (sys.workers < 2) throw ValidationError("co-distillation needs C >= 2 workers");

  const auto& f0 = *sys.initial_outputs;
  const std::size_t n = sys.truth.size();
  const double c_count = static_cast<double>(sys.workers);
  const double lam = sys.lambda;

  // alpha = (lambda/C) sum_{c} f^c(0) - lambda y
  // beta  = (lambda/(C(C-1))) sum_{c>=2} f^c(0) - (lambda/C) f^1(0)
  std::vector<double> alpha(n), beta(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sum_all = 0.0, sum_rest = 0.0;
    for (std::size_t c = 0; c < f0.size(); ++c) {
      sum_all += f0[c][i];
      if (c > 0) sum_rest += f0[c][i];
    }
    alpha[i] = lam / c_count * sum_all - lam * sys.truth[i];
    beta[i] = lam / (c_count * (c_count - 1.0)) * sum_rest - lam / c_count * f0[0][i];
  }

  const double q1 = lam / (sys.a + lam);
  const double q2 = -lam / ((c_count - 1.0) * (sys.a + lam));
  const double p1 = std::pow(q1, r);
  const double p2 = std::pow(q2, r);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = alpha[i] * p1 + beta[i] * p2 + lam * sys.truth[i];
  return v;
}

std::vector<double> cd_limit(const KernelRegimeSystem& sys) {
  if (sys.workers < 2) throw ValidationError("co-distillation needs C >= 2 workers");
  validate(sys);
  return sys.truth;
}

std::vector<double> gradient_flow_oracle(const KernelRegimeSystem& sys, double step,
                                         long iterations,
                                         std::optional<std::vector<double>> start) {
  require_teacher(sys);
  validate(sys);
  if (step <= 0.0) throw ValidationError("oracle step must be positive");
  if (iterations < 0) throw ValidationError("iteration count must be non-negative");

  const std::size_t n = sys.truth.size();
  // Single-channel witness: prediction = sqrt(a) * g, teacher channel
  // phi = teacher_pred / sqrt(a). The objective in the free logit g is
  // sum (y - sqrt(a) g)^2 + lambda * sum (phi - g)^2.
  const double root_a = std::sqrt(sys.a);
  std::vector<double> g(n, 0.0);
  if (start) {
    if (start->size() != n) throw ValidationError("oracle start length does not match y");
    for (std::size_t i = 0; i < n; ++i) g[i] = (*start)[i] / root_a;
  }
  std::vector<double> phi(n);
  for (std::size_t i = 0; i < n; ++i) phi[i] = (*sys.teacher_pred)[i] / root_a;

  for (long it = 0; it < iterations; ++it) {
    double peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double grad = -2.0 * root_a * (sys.truth[i] - root_a * g[i]) -
                          2.0 * sys.lambda * (phi[i] - g[i]);
      g[i] -= step * grad;
      peak = std::max(peak, std::abs(root_a * g[i]));
    }
    if (peak > 1e6)
      throw std::runtime_error(
          "gradient flow diverged (output norm exceeded 1e6); use a smaller step");
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = root_a * g[i];
  return out;
}

std::vector<std::vector<double>> cd_residual_history(const KernelRegimeSystem& sys,
                                                     int rounds) {
  if (!sys.initial_outputs.has_value())
    throw ValidationError("residual history needs initial outputs");
  validate(sys);
  if (rounds < 0) throw ValidationError("round count must be non-negative");

  std::vector<std::vector<double>> outputs = *sys.initial_outputs;
  std::vector<std::vector<double>> history;
  history.reserve(rounds + 1);
  for (int r = 0; r <= rounds; ++r) {
    std::vector<double> row(outputs.size());
    for (std::size_t c = 0; c < outputs.size(); ++c)
      row[c] = inf_norm_gap(outputs[c], sys.truth);
    history.push_back(std::move(row));
    if (r < rounds) outputs = cd_update(sys, outputs);
  }
  return history;
}

}  // namespace fdsim
