#include <catch2/catch_amalgamated.hpp>

#include "kitrec/dmp.hpp"

#include <cmath>

using namespace kitrec;
using namespace kitrec::dmp;

namespace {

// Independent fine-step explicit-Euler integration of the attractor and
// canonical systems; deliberately separate from the library integrator.
std::vector<double> euler_oracle(const DmpModel& m, double x0, double g, double tau, double dt_out,
                                 double t_end) {
  const double h = 1e-5;
  double x = x0, v = 0.0, s = 1.0, t = 0.0;
  std::vector<double> out{x};
  double next_sample = dt_out;
  while (t < t_end) {
    double num = 0.0, den = 0.0;
    for (int i = 0; i < m.n_basis; ++i) {
      const double psi = std::exp(-m.widths[i] * (s - m.centers[i]) * (s - m.centers[i]));
      num += m.weights[i] * psi;
      den += psi;
    }
    const double f = den > 1e-300 ? num * s / den : 0.0;
    const double dv = (m.K * (g - x) - m.D * v - m.K * (g - x0) * s + m.K * f) / tau;
    const double dx = v / tau;
    const double ds = -m.alpha * s / tau;
    x += h * dx;
    v += h * dv;
    s += h * ds;
    t += h;
    if (t + 1e-12 >= next_sample) {
      out.push_back(x);
      next_sample += dt_out;
    }
  }
  return out;
}

DmpModel zero_weight_model(double x0, double g, double T) {
  Demonstration rest = min_jerk_demo(x0, x0, T, 100);
  DmpModel m = learn_from_demo(rest, 10);
  m.weights.setZero();
  m.x0 = x0;
  m.g = g;
  return m;
}

}  // namespace

TEST_CASE("rest demonstration yields near-zero weights") {
  const Demonstration rest = min_jerk_demo(0.4, 0.4, 2.0, 200);
  const DmpModel m = learn_from_demo(rest, 20);
  CHECK(m.weights.cwiseAbs().maxCoeff() < 1e-9);
  CHECK(m.g == Catch::Approx(0.4));
}

TEST_CASE("equilibrium stays put") {
  const DmpModel m = zero_weight_model(0.7, 0.7, 1.5);
  const auto steps = rollout(m, 0.7, 0.7, m.tau, 0.02);
  for (const auto& st : steps) CHECK(std::abs(st.x - 0.7) < 1e-12);
}

TEST_CASE("critically damped convergence has no overshoot") {
  const DmpModel m = zero_weight_model(0.0, 1.0, 2.0);
  const auto steps = rollout(m, 0.0, 1.0, m.tau, 0.02, 1e-4);
  double prev_err = 1.0;
  for (const auto& st : steps) {
    CHECK(st.x <= 1.0 + 1e-6);
    const double err = std::abs(st.x - 1.0);
    CHECK(err <= prev_err + 1e-12);  // monotone approach
    prev_err = err;
  }
  CHECK(std::abs(steps.back().x - 1.0) < 0.05);
}

TEST_CASE("phase decreases strictly and stays positive") {
  const Demonstration demo = min_jerk_demo(0.0, 0.3, 1.0, 120);
  const DmpModel m = learn_from_demo(demo, 30);
  const auto steps = rollout(m, 0.02);
  for (size_t i = 1; i < steps.size(); ++i) {
    CHECK(steps[i].s < steps[i - 1].s);
    CHECK(steps[i].s > 0.0);
  }
}

TEST_CASE("doubling tau doubles the time to 95% convergence") {
  const DmpModel m = zero_weight_model(0.0, 1.0, 1.0);
  const double dt = 0.002;
  const auto t95 = [&](double tau) {
    const auto steps = rollout(m, 0.0, 1.0, tau, dt, 1e-6);
    for (const auto& st : steps)
      if (std::abs(st.x - 1.0) <= 0.05) return st.t;
    return -1.0;
  };
  const double t1 = t95(m.tau);
  const double t2 = t95(2.0 * m.tau);
  REQUIRE(t1 > 0);
  REQUIRE(t2 > 0);
  CHECK(std::abs(t2 - 2.0 * t1) <= 2 * dt + 1e-12);
}

TEST_CASE("learned model reaches 95% convergence at the demo duration") {
  const Demonstration demo = min_jerk_demo(0.1, 0.9, 2.0, 200);
  const DmpModel m = learn_from_demo(demo, 50);
  const auto steps = rollout(m, 0.02);
  // The rollout ends when the phase hits its floor, i.e. at t ~ duration.
  CHECK(std::abs(steps.back().t - 2.0) < 0.1);
  CHECK(std::abs(steps.back().x - m.g) <= 0.05 * std::abs(m.g - m.x0));
}

TEST_CASE("minimum-jerk reconstruction matches the integration oracle within 5% range") {
  const Demonstration demo = min_jerk_demo(0.0, 1.0, 2.0, 200);
  const DmpModel m = learn_from_demo(demo, 50);

  const auto steps = rollout(m, 0.02);
  const auto oracle = euler_oracle(m, m.x0, m.g, m.tau, 0.02, steps.back().t);

  // Library integrator agrees with the independent oracle.
  double max_dev = 0.0;
  for (size_t i = 0; i < std::min(steps.size(), oracle.size()); ++i)
    max_dev = std::max(max_dev, std::abs(steps[i].x - oracle[i]));
  CHECK(max_dev < 1e-3);

  // Reconstruction error against the demonstration.
  double sq = 0.0;
  size_t n = 0;
  for (const auto& st : steps) {
    const double u = std::min(st.t / 2.0, 1.0);
    const double demo_x = 10 * u * u * u - 15 * u * u * u * u + 6 * u * u * u * u * u;
    sq += (st.x - demo_x) * (st.x - demo_x);
    ++n;
  }
  const double rmse = std::sqrt(sq / n);
  CHECK(rmse <= 0.05);  // 5% of the unit demo range
}

TEST_CASE("retargeting scales to a new goal") {
  const Demonstration demo = min_jerk_demo(0.0, 1.0, 1.5, 150);
  const DmpModel m = learn_from_demo(demo, 40);
  const auto steps = rollout(m, 0.5, 2.5, m.tau, 0.02, 1e-4);
  CHECK(std::abs(steps.back().x - 2.5) <= 0.05 * 2.0);
  CHECK(steps.front().x == Catch::Approx(0.5));
}

TEST_CASE("degenerate demonstrations raise FitError") {
  Demonstration d;
  d.duration = 1.0;
  d.x = {0.0};
  d.v = {0.0};
  d.a = {0.0};
  CHECK_THROWS_AS(learn_from_demo(d, 10), FitError);
  Demonstration flat = min_jerk_demo(0, 1, 1.0, 50);
  CHECK_THROWS_AS(learn_from_demo(flat, 1), InvalidInput);
}

TEST_CASE("skill records round trip through the model library format") {
  std::vector<Demonstration> demos;
  for (double g : {0.2, -0.4, 1.0}) demos.push_back(min_jerk_demo(0.0, g, 1.0, 80));
  const DmpSkill skill = learn_skill("move_to_pick", demos, 25);
  const std::string path = "test_dmp_skill.txt";
  save_skill(skill, path);
  const DmpSkill back = load_skill(path);
  REQUIRE(back.dims.size() == 3);
  CHECK(back.id == "move_to_pick");
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back.dims[i].g == Catch::Approx(skill.dims[i].g));
    CHECK((back.dims[i].weights - skill.dims[i].weights).cwiseAbs().maxCoeff() < 1e-15);
  }
  std::remove(path.c_str());
}
