#pragma once

// Kernel-regime analytics for knowledge distillation and co-distillation:
// fixed points, error bounds, the per-round recurrence and its closed form,
// and an independent gradient-flow oracle.

#include <optional>
#include <vector>

namespace fdsim {

// The idealized (a, lambda, C, y, ...) tuple driving the KD/CD analysis.
// `teacher_pred` is the teacher's aggregated prediction (KD only);
// `initial_outputs` are the per-worker outputs after warm-up (CD only).
struct KernelRegimeSystem {
  double a = 1.0;
  double lambda = 1.0;
  int workers = 2;  // C, used by the CD operations
  std::vector<double> truth;  // y
  std::optional<std::vector<double>> teacher_pred;
  std::optional<std::vector<std::vector<double>>> initial_outputs;
};

// Checks positivity, vector lengths, and that both geometric factors of the
// closed form have magnitude below one.
void validate(const KernelRegimeSystem& sys);

// (a*y + lambda*teacher) / (a + lambda), elementwise.
std::vector<double> kd_fixed_point(const KernelRegimeSystem& sys);

// lambda/(a+lambda) * ||y - teacher||_2; identical to the distance between
// the fixed point and y.
double kd_error(const KernelRegimeSystem& sys);

// One communication round: every worker converges to the KD fixed point with
// the leave-one-out mean of the other workers' previous outputs as teacher.
std::vector<std::vector<double>> cd_update(
    const KernelRegimeSystem& sys, const std::vector<std::vector<double>>& outputs);

// v_r = alpha*(lambda/(a+lambda))^r + beta*(-lambda/((C-1)(a+lambda)))^r
//       + lambda*y,  where v_r = lambda/(C-1) * sum_{c>=2} f^c(r).
std::vector<double> cd_closed_form(const KernelRegimeSystem& sys, int r);

// The r -> infinity limit of every worker's output: y exactly.
std::vector<double> cd_limit(const KernelRegimeSystem& sys);

// Discrete gradient descent on the distillation objective with the logits as
// free variables and the kernel fixed to identity. Its limit matches
// kd_fixed_point for any positive-definite kernel; identity is the cheapest
// witness. Throws when the iterate norm exceeds 1e6 (step too large).
std::vector<double> gradient_flow_oracle(
    const KernelRegimeSystem& sys, double step, long iterations,
    std::optional<std::vector<double>> start = std::nullopt);

// Per-round infinity-norm residuals ||f^c(r) - y|| for r = 0..rounds; row r
// holds one value per worker. Drives the analyze-ntk CSV output.
std::vector<std::vector<double>> cd_residual_history(
    const KernelRegimeSystem& sys, int rounds);

}  // namespace fdsim
