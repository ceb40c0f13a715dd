#pragma once

#include "kitrec/common.hpp"

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace kitrec::dmp {

struct Demonstration {
  std::vector<double> x;  // positions
  std::vector<double> v;  // velocities
  std::vector<double> a;  // accelerations
  double duration = 0.0;
};

inline void validate(const Demonstration& d) {
  if (d.x.size() < 2 || d.x.size() != d.v.size() || d.x.size() != d.a.size())
    throw InvalidInput("demonstration arrays must be equal length >= 2");
  if (!(d.duration > 0)) throw InvalidInput("demonstration duration must be positive");
}

struct DmpModel {
  double K = 100.0;
  double D = 20.0;
  double alpha = 0.0;
  int n_basis = 0;
  Vec weights;
  Vec centers;  // strictly decreasing in phase
  Vec widths;
  double x0 = 0.0;
  double g = 0.0;
  double tau = 1.0;
};

inline constexpr double kPhaseFloor = 0.01;  // s(T) under the learned tau

namespace detail {

// z solving (1+z)exp(-z) = level; governs when the critically damped
// attractor reaches (1-level) of the remaining gap.
inline double convergence_root(double level) {
  double lo = 1.0, hi = 50.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    ((1.0 + mid) * std::exp(-mid) > level ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline double forcing(const DmpModel& m, double s) {
  double num = 0.0, den = 0.0;
  for (int i = 0; i < m.n_basis; ++i) {
    const double psi = std::exp(-m.widths[i] * (s - m.centers[i]) * (s - m.centers[i]));
    num += m.weights[i] * psi;
    den += psi;
  }
  return den > 1e-300 ? num * s / den : 0.0;
}

struct DmpState {
  double x, v, s;
};

inline DmpState derivatives(const DmpModel& m, double x0, double g, double tau, const DmpState& st) {
  DmpState d;
  d.x = st.v / tau;
  d.v = (m.K * (g - st.x) - m.D * st.v - m.K * (g - x0) * st.s + m.K * forcing(m, st.s)) / tau;
  d.s = -m.alpha * st.s / tau;
  return d;
}

}  // namespace detail

struct RolloutStep {
  double t, x, v, s;  // v is the transformed-system velocity (tau * xdot)
};

// Integrates the attractor and canonical systems with RK4 from s=1 until
// s < s_min.
inline std::vector<RolloutStep> rollout(const DmpModel& m, double x0, double g, double tau, double dt,
                                        double s_min = kPhaseFloor) {
  if (!(dt > 0)) throw InvalidInput("rollout: dt must be positive");
  if (!(tau > 0)) throw InvalidInput("rollout: tau must be positive");
  detail::DmpState st{x0, 0.0, 1.0};
  std::vector<RolloutStep> steps;
  steps.push_back({0.0, st.x, st.v, st.s});
  const size_t max_steps = static_cast<size_t>(std::ceil(tau * std::log(1.0 / std::max(s_min, 1e-12)) /
                                                         std::max(m.alpha, 1e-12) / dt)) +
                           16;
  for (size_t i = 0; i < max_steps && st.s >= s_min; ++i) {
    const auto k1 = detail::derivatives(m, x0, g, tau, st);
    const detail::DmpState s2{st.x + 0.5 * dt * k1.x, st.v + 0.5 * dt * k1.v, st.s + 0.5 * dt * k1.s};
    const auto k2 = detail::derivatives(m, x0, g, tau, s2);
    const detail::DmpState s3{st.x + 0.5 * dt * k2.x, st.v + 0.5 * dt * k2.v, st.s + 0.5 * dt * k2.s};
    const auto k3 = detail::derivatives(m, x0, g, tau, s3);
    const detail::DmpState s4{st.x + dt * k3.x, st.v + dt * k3.v, st.s + dt * k3.s};
    const auto k4 = detail::derivatives(m, x0, g, tau, s4);
    st.x += dt / 6.0 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x);
    st.v += dt / 6.0 * (k1.v + 2 * k2.v + 2 * k3.v + k4.v);
    st.s += dt / 6.0 * (k1.s + 2 * k2.s + 2 * k3.s + k4.s);
    if (!std::isfinite(st.x) || !std::isfinite(st.v) || !std::isfinite(st.s))
      throw NumericalError("rollout diverged at step " + std::to_string(i));
    steps.push_back({static_cast<double>(steps.size()) * dt, st.x, st.v, st.s});
  }
  return steps;
}

inline std::vector<RolloutStep> rollout(const DmpModel& m, double dt, double s_min = kPhaseFloor) {
  return rollout(m, m.x0, m.g, m.tau, dt, s_min);
}

// Fits basis weights to the forcing term recovered from a demonstration.
// The goal is the final demonstrated position; tau is chosen so the
// unforced attractor reaches 95% convergence at t = duration; alpha is
// chosen so the phase decays to kPhaseFloor at t = duration.
inline DmpModel learn_from_demo(const Demonstration& demo, int n_basis, double K = 100.0) {
  if (demo.x.size() < 2 || !(demo.duration > 0))
    throw FitError("demonstration too short for weight regression");
  validate(demo);
  if (n_basis < 2) throw InvalidInput("n_basis must be >= 2");
  if (!(K > 0)) throw FitError("spring constant must be positive");

  DmpModel m;
  m.K = K;
  m.D = 2.0 * std::sqrt(K);  // critical damping
  m.n_basis = n_basis;
  m.x0 = demo.x.front();
  m.g = demo.x.back();

  const double T = demo.duration;
  const double z95 = detail::convergence_root(0.05);
  m.tau = std::sqrt(K) * T / z95;
  m.alpha = m.tau * std::log(1.0 / kPhaseFloor) / T;

  // Centers at the phase values of equally spaced times; widths from
  // neighbor spacing with the last one copied.
  m.centers.resize(n_basis);
  m.widths.resize(n_basis);
  for (int i = 0; i < n_basis; ++i) {
    const double ti = T * static_cast<double>(i) / (n_basis - 1);
    m.centers[i] = std::exp(-m.alpha * ti / m.tau);
  }
  for (int i = 0; i + 1 < n_basis; ++i) {
    const double gap = m.centers[i] - m.centers[i + 1];
    m.widths[i] = 1.0 / (gap * gap);
  }
  m.widths[n_basis - 1] = m.widths[n_basis - 2];

  const size_t n = demo.x.size();
  Mat phi(n, n_basis);
  Vec target(n);
  const double dt = T / static_cast<double>(n - 1);
  for (size_t j = 0; j < n; ++j) {
    const double t = static_cast<double>(j) * dt;
    const double s = std::exp(-m.alpha * t / m.tau);
    // Exact rearrangement of the attractor equation with v = tau*xdot.
    target[j] = (m.tau * m.tau * demo.a[j] + m.D * m.tau * demo.v[j]) / m.K - (m.g - demo.x[j]) +
                (m.g - m.x0) * s;
    double den = 0.0;
    for (int i = 0; i < n_basis; ++i) {
      const double psi = std::exp(-m.widths[i] * (s - m.centers[i]) * (s - m.centers[i]));
      phi(j, i) = psi * s;
      den += psi;
    }
    if (den <= 1e-300) throw FitError("basis support vanished during fitting");
    phi.row(j) /= den;
  }
  m.weights = phi.colPivHouseholderQr().solve(target);
  if (!m.weights.allFinite()) throw FitError("weight regression produced non-finite values");
  return m;
}

// Minimum-jerk profile between x0 and g; used for scripted demonstrations.
inline Demonstration min_jerk_demo(double x0, double g, double duration, size_t n_samples) {
  if (n_samples < 2) throw InvalidInput("min_jerk_demo: need at least 2 samples");
  Demonstration d;
  d.duration = duration;
  d.x.resize(n_samples);
  d.v.resize(n_samples);
  d.a.resize(n_samples);
  const double range = g - x0;
  for (size_t i = 0; i < n_samples; ++i) {
    const double u = static_cast<double>(i) / (n_samples - 1);
    d.x[i] = x0 + range * (10 * u * u * u - 15 * u * u * u * u + 6 * u * u * u * u * u);
    d.v[i] = range * (30 * u * u - 60 * u * u * u + 30 * u * u * u * u) / duration;
    d.a[i] = range * (60 * u - 180 * u * u + 120 * u * u * u) / (duration * duration);
  }
  return d;
}

// One independent DMP per Cartesian/Euler dimension.
struct DmpSkill {
  std::string id;
  double duration = 0.0;  // demonstration duration
  std::vector<DmpModel> dims;
};

inline DmpSkill learn_skill(const std::string& id, const std::vector<Demonstration>& demos, int n_basis,
                            double K = 100.0) {
  if (demos.empty()) throw InvalidInput("learn_skill: no dimensions");
  DmpSkill skill;
  skill.id = id;
  skill.duration = demos.front().duration;
  for (const auto& d : demos) skill.dims.push_back(learn_from_demo(d, n_basis, K));
  return skill;
}

// ---------------------------------------------------------------------------
// Self-describing text records for the model library.

inline void save_skill(const DmpSkill& skill, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "kitrec-dmp v1\n";
  os << "id " << skill.id << "\n";
  os << "duration " << fmt_double(skill.duration) << "\n";
  os << "dims " << skill.dims.size() << "\n";
  for (const auto& m : skill.dims) {
    os << "dim K " << fmt_double(m.K) << " D " << fmt_double(m.D) << " alpha " << fmt_double(m.alpha)
       << " x0 " << fmt_double(m.x0) << " g " << fmt_double(m.g) << " tau " << fmt_double(m.tau)
       << " n_basis " << m.n_basis << "\n";
    os << "weights";
    for (int i = 0; i < m.n_basis; ++i) os << " " << fmt_double(m.weights[i]);
    os << "\ncenters";
    for (int i = 0; i < m.n_basis; ++i) os << " " << fmt_double(m.centers[i]);
    os << "\nwidths";
    for (int i = 0; i < m.n_basis; ++i) os << " " << fmt_double(m.widths[i]);
    os << "\n";
  }
}

inline DmpSkill load_skill(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string tag, version;
  is >> tag >> version;
  if (tag != "kitrec-dmp" || version != "v1") throw IoError("bad dmp record header in " + path);
  DmpSkill skill;
  size_t ndims = 0;
  std::string key;
  is >> key >> skill.id;
  is >> key >> skill.duration;
  is >> key >> ndims;
  skill.dims.resize(ndims);
  for (auto& m : skill.dims) {
    is >> key >> key >> m.K >> key >> m.D >> key >> m.alpha >> key >> m.x0 >> key >> m.g >> key >>
        m.tau >> key >> m.n_basis;
    m.weights.resize(m.n_basis);
    m.centers.resize(m.n_basis);
    m.widths.resize(m.n_basis);
    is >> key;
    for (int i = 0; i < m.n_basis; ++i) is >> m.weights[i];
    is >> key;
    for (int i = 0; i < m.n_basis; ++i) is >> m.centers[i];
    is >> key;
    for (int i = 0; i < m.n_basis; ++i) is >> m.widths[i];
  }
  if (!is) throw IoError("truncated dmp record in " + path);
  return skill;
}

}  // namespace kitrec::dmp
