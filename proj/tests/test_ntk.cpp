#include <cmath>
#include <vector>

#include "doctest.h"
#include "fdsim/errors.hpp"
#include "fdsim/ntk.hpp"
#include "fdsim/rng.hpp"

using namespace fdsim;

namespace {

KernelRegimeSystem kd_system(double a, double lambda, std::vector<double> y,
                             std::vector<double> teacher) {
  KernelRegimeSystem sys;
  sys.a = a;
  sys.lambda = lambda;
  sys.truth = std::move(y);
  sys.teacher_pred = std::move(teacher);
  return sys;
}

double inf_gap(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Aggregate the closed form tracks: v_r = lambda/(C-1) * sum_{c>=2} f^c(r).
std::vector<double> loo_aggregate(const KernelRegimeSystem& sys,
                                  const std::vector<std::vector<double>>& outputs) {
  std::vector<double> v(sys.truth.size(), 0.0);
  for (std::size_t c = 1; c < outputs.size(); ++c)
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += outputs[c][i];
  for (double& x : v) x *= sys.lambda / static_cast<double>(sys.workers - 1);
  return v;
}

}  // namespace

TEST_CASE("kd fixed point limits") {
  // lambda -> 0 recovers pure supervised training.
  auto sys = kd_system(1.0, 1e-12, {1.0, -2.0}, {0.0, 0.0});
  auto fp = kd_fixed_point(sys);
  CHECK(fp[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fp[1] == doctest::Approx(-2.0).epsilon(1e-9));

  // An ideal teacher pins the fixed point at y.
  sys = kd_system(1.0, 5.0, {0.5, -0.25}, {0.5, -0.25});
  fp = kd_fixed_point(sys);
  CHECK(fp[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(fp[1] == doctest::Approx(-0.25).epsilon(1e-15));
}

TEST_CASE("kd fixed point a=1 lambda=1 splits the difference") {
  const auto sys = kd_system(1.0, 1.0, {1.0}, {0.0});
  CHECK(kd_fixed_point(sys)[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("kd fixed point requires a teacher") {
  KernelRegimeSystem sys;
  sys.truth = {1.0};
  CHECK_THROWS_AS((void)kd_fixed_point(sys), ValidationError);
}

TEST_CASE("kd error is the distance between the fixed point and y") {
  CHECK(kd_error(kd_system(1.0, 1.0, {0.7}, {0.7})) == 0.0);
  CHECK(kd_error(kd_system(1.0, 1.0, {1.0}, {0.0})) ==
        doctest::Approx(0.5).epsilon(1e-15));
  // Doubling lambda moves the factor from 1/2 to 2/3.
  CHECK(kd_error(kd_system(1.0, 2.0, {1.0}, {0.0})) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  SplitRng rng(91);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> y(4), phi(4);
    for (double& v : y) v = rng.uniform(-2.0, 2.0);
    for (double& v : phi) v = rng.uniform(-2.0, 2.0);
    const auto sys = kd_system(rng.uniform(0.1, 10.0), rng.uniform(0.1, 10.0), y, phi);
    const auto fp = kd_fixed_point(sys);
    double gap2 = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
      gap2 += (fp[i] - y[i]) * (fp[i] - y[i]);
    CHECK(std::abs(kd_error(sys) - std::sqrt(gap2)) < 1e-12);
  }
}

TEST_CASE("cd update keeps y fixed and reproduces the hand-iterated example") {
  KernelRegimeSystem sys;
  sys.a = 1.0;
  sys.lambda = 1.0;
  sys.workers = 2;
  sys.truth = {1.0};

  const auto fixed = cd_update(sys, {{1.0}, {1.0}});
  CHECK(fixed[0][0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(fixed[1][0] == doctest::Approx(1.0).epsilon(1e-15));

  const auto next = cd_update(sys, {{0.0}, {2.0}});
  CHECK(next[0][0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(next[1][0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("cd update pulls the ensemble mean toward y") {
  SplitRng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    KernelRegimeSystem sys;
    sys.a = rng.uniform(0.1, 10.0);
    sys.lambda = rng.uniform(0.1, 10.0);
    sys.workers = 2 + static_cast<int>(rng.next_below(6));
    sys.truth.resize(3);
    for (double& v : sys.truth) v = rng.uniform(-1.0, 1.0);
    std::vector<std::vector<double>> outputs(sys.workers, std::vector<double>(3));
    for (auto& f : outputs)
      for (double& v : f) v = rng.uniform(-2.0, 2.0);

    auto mean_gap = [&](const std::vector<std::vector<double>>& outs) {
      double gap = 0.0;
      for (std::size_t i = 0; i < sys.truth.size(); ++i) {
        double m = 0.0;
        for (const auto& f : outs) m += f[i];
        m /= static_cast<double>(outs.size());
        gap += (m - sys.truth[i]) * (m - sys.truth[i]);
      }
      return std::sqrt(gap);
    };
    const auto next = cd_update(sys, outputs);
    CHECK(mean_gap(next) <= mean_gap(outputs) + 1e-12);
  }
}

TEST_CASE("cd closed form matches the definition at r = 0 and the recurrence at r = 1") {
  KernelRegimeSystem sys;
  sys.a = 1.0;
  sys.lambda = 1.0;
  sys.workers = 2;
  sys.truth = {1.0};
  sys.initial_outputs = {{{0.0}, {2.0}}};

  CHECK(cd_closed_form(sys, 0)[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(cd_closed_form(sys, 1)[0] == doctest::Approx(0.5).epsilon(1e-12));
  // r -> infinity approaches lambda * y.
  CHECK(cd_closed_form(sys, 400)[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("closed form equals the iterated recurrence for random systems") {
  SplitRng rng(23);
  for (int workers : {2, 5, 100}) {
    for (int trial = 0; trial < 5; ++trial) {
      KernelRegimeSystem sys;
      sys.a = rng.uniform(0.1, 10.0);
      sys.lambda = rng.uniform(0.1, 10.0);
      sys.workers = workers;
      sys.truth.resize(4);
      for (double& v : sys.truth) v = rng.uniform(-1.0, 1.0);
      std::vector<std::vector<double>> f0(workers, std::vector<double>(4));
      for (auto& f : f0)
        for (double& v : f) v = rng.uniform(-1.0, 1.0);
      sys.initial_outputs = f0;

      auto outputs = f0;
      for (int r = 0; r <= 50; ++r) {
        const auto closed = cd_closed_form(sys, r);
        const auto direct = loo_aggregate(sys, outputs);
        for (std::size_t i = 0; i < closed.size(); ++i) {
          const double scale = std::max({1.0, std::abs(closed[i]), std::abs(direct[i])});
          CHECK(std::abs(closed[i] - direct[i]) <= 1e-9 * scale);
        }
        outputs = cd_update(sys, outputs);
      }
    }
  }
}

TEST_CASE("cd limit is the ground truth, reached numerically") {
  KernelRegimeSystem sys;
  sys.a = 1.0;
  sys.lambda = 1.0;
  sys.workers = 2;
  sys.truth = {0.3, -0.6, 1.2};
  CHECK(cd_limit(sys) == sys.truth);

  std::vector<std::vector<double>> outputs{{1.0, 0.0, 0.0}, {-1.0, 1.0, 2.0}};
  for (int r = 0; r < 100; ++r) outputs = cd_update(sys, outputs);
  CHECK(inf_gap(outputs[0], sys.truth) <= 1e-6);
  CHECK(inf_gap(outputs[1], sys.truth) <= 1e-6);
}

TEST_CASE("residuals decay at least at the dominant geometric rate") {
  KernelRegimeSystem sys;
  sys.a = 1.0;
  sys.lambda = 1.0;
  sys.workers = 2;
  sys.truth = {0.5};
  sys.initial_outputs = {{{-0.5}, {1.5}}};
  const auto history = cd_residual_history(sys, 30);
  const double rate = std::max(sys.lambda / (sys.a + sys.lambda),
                               sys.lambda / ((sys.workers - 1) * (sys.a + sys.lambda)));
  // Fit the slope of log residual between rounds 5 and 30.
  const double slope = (std::log(history[30][0]) - std::log(history[5][0])) / 25.0;
  CHECK(slope <= std::log(rate) + 1e-9);
}

TEST_CASE("convergence is eventually monotone and tight by r = 200") {
  KernelRegimeSystem sys;
  sys.a = 1.0;
  sys.lambda = 1.0;
  sys.workers = 2;
  sys.truth = {0.25, -1.0};
  sys.initial_outputs = {{{2.0, 0.5}, {-1.0, 1.0}}};
  const auto history = cd_residual_history(sys, 200);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t r = 10; r + 1 < history.size(); ++r)
      CHECK(history[r + 1][c] <= history[r][c] + 1e-15);
    CHECK(history.back()[c] <= 1e-8);
  }
}

TEST_CASE("the second geometric factor strictly shrinks with more workers") {
  const double a = 1.0, lambda = 1.0;
  double previous = std::abs(lambda / ((2 - 1) * (a + lambda)));
  for (int workers = 3; workers <= 200; ++workers) {
    const double factor = std::abs(lambda / ((workers - 1) * (a + lambda)));
    CHECK(factor < previous);
    previous = factor;
  }
}

TEST_CASE("rounds to reach 1e-4 never increase with the worker count") {
  // Matched initializations: worker 2k and 2k+1 share an antithetic deviation
  // pair around y, so a worker's start does not depend on C.
  SplitRng rng(5);
  const int samples = 6;
  std::vector<double> y(samples);
  for (double& v : y) v = rng.uniform(-1.0, 1.0);
  std::vector<std::vector<double>> deviations(50, std::vector<double>(samples));
  for (auto& d : deviations)
    for (double& v : d) v = rng.uniform(-1.0, 1.0);
  auto initial = [&](int worker) {
    std::vector<double> f = y;
    const auto& d = deviations[worker / 2];
    const double sign = worker % 2 == 0 ? 1.0 : -1.0;
    for (int i = 0; i < samples; ++i) f[i] += sign * d[i];
    return f;
  };

  int previous_rounds = std::numeric_limits<int>::max();
  for (int workers : {2, 5, 100}) {
    KernelRegimeSystem sys;
    sys.a = 1.0;
    sys.lambda = 1.0;
    sys.workers = workers;
    sys.truth = y;
    std::vector<std::vector<double>> outputs;
    for (int c = 0; c < workers; ++c) outputs.push_back(initial(c));

    int rounds = 0;
    auto residual = [&] {
      double worst = 0.0;
      for (const auto& f : outputs) worst = std::max(worst, inf_gap(f, y));
      return worst;
    };
    while (residual() > 1e-4 && rounds < 1000) {
      outputs = cd_update(sys, outputs);
      ++rounds;
    }
    CHECK(rounds <= previous_rounds);
    previous_rounds = rounds;
  }
}

TEST_CASE("gradient flow oracle stays at the fixed point") {
  const auto sys = kd_system(1.0, 1.0, {1.0, -0.5}, {0.25, 0.75});
  const auto fp = kd_fixed_point(sys);
  const auto out = gradient_flow_oracle(sys, 1e-3, 5000, fp);
  CHECK(inf_gap(out, fp) < 1e-12);
}

TEST_CASE("gradient flow oracle converges to 0.5 for the unit system") {
  const auto sys = kd_system(1.0, 1.0, {1.0}, {0.0});
  const auto out = gradient_flow_oracle(sys, 1e-3, 100000);
  CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("halving the oracle step does not move the limit") {
  const auto sys = kd_system(2.0, 0.5, {1.0, -1.0, 0.25}, {0.5, 0.5, 0.5});
  const auto coarse = gradient_flow_oracle(sys, 1e-3, 200000);
  const auto fine = gradient_flow_oracle(sys, 5e-4, 400000);
  CHECK(inf_gap(coarse, fine) < 1e-6);
}

TEST_CASE("oracle agrees with the fixed point on random systems") {
  SplitRng rng(1234);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = rng.uniform(0.1, 10.0);
    const double lambda = rng.uniform(0.1, 10.0);
    std::vector<double> y(3), phi(3);
    for (double& v : y) v = rng.uniform(-1.0, 1.0);
    for (double& v : phi) v = rng.uniform(-1.0, 1.0);
    const auto sys = kd_system(a, lambda, y, phi);
    // Contraction per step is 1 - 2*step*(a+lambda); this step keeps it stable
    // across the whole (a, lambda) range.
    const double step = 0.2 / (a + lambda);
    const auto out = gradient_flow_oracle(sys, step, 400);
    CHECK(inf_gap(out, kd_fixed_point(sys)) < 1e-6);
  }
}

TEST_CASE("the oracle reports divergence for oversized steps") {
  const auto sys = kd_system(1.0, 1.0, {1.0}, {0.0});
  CHECK_THROWS_WITH_AS((void)gradient_flow_oracle(sys, 5.0, 100000),
                       doctest::Contains("smaller step"), std::runtime_error);
}

TEST_CASE("system validation rejects non-positive coefficients") {
  KernelRegimeSystem sys;
  sys.a = 0.0;
  sys.lambda = 1.0;
  sys.truth = {1.0};
  CHECK_THROWS_AS(validate(sys), ValidationError);
  sys.a = 1.0;
  sys.lambda = -2.0;
  CHECK_THROWS_AS(validate(sys), ValidationError);
}
