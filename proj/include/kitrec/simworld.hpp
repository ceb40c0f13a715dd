#pragma once

#include "kitrec/dmp.hpp"
#include "kitrec/introspect.hpp"
#include "kitrec/signals.hpp"
#include "kitrec/taskgraph.hpp"

#include <Eigen/Eigenvalues>

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace kitrec::sim {

inline constexpr double kTickDt = 1.0 / kDefaultRateHz;
inline constexpr double kGravity = 9.81;
inline constexpr double kTaxelBaseline = 0.05;
inline constexpr double kTaxelBaselineNoise = 0.006;
inline constexpr double kTaxelContactNoise = 0.05;
inline constexpr long kGraspRampTicks = 5;
inline constexpr long kDropFadeStartTicks = 25;
inline constexpr long kDropFadeEndTicks = 50;

// Remaining fraction of the contact/load signature k ticks after a drop.
inline double drop_fade(long k) {
  if (k <= kDropFadeStartTicks) return 1.0;
  if (k >= kDropFadeEndTicks) return 0.0;
  const double u = static_cast<double>(k - kDropFadeStartTicks) /
                   (kDropFadeEndTicks - kDropFadeStartTicks);
  return 1.0 - u * u * (3 - 2 * u);
}

struct ObjectSpec {
  std::string id;
  Eigen::Vector3d pos = Eigen::Vector3d::Zero();
  double height = 0.1;
  double mass = 0.3;
};

struct WorldConfig {
  std::vector<ObjectSpec> objects;
  Eigen::Vector3d home{0.30, 0.00, 0.30};
  Eigen::Vector3d bin{0.50, 0.20, 0.05};
  Eigen::Vector3d box{0.50, -0.40, 0.10};
  uint64_t seed = 0;
};

inline WorldConfig default_world(int n_objects = 1) {
  WorldConfig w;
  for (int i = 0; i < n_objects; ++i) {
    ObjectSpec o;
    o.id = "obj" + std::to_string(i);
    o.pos = w.bin + Eigen::Vector3d(0.04 * i, -0.03 * i, 0.0);
    w.objects.push_back(o);
  }
  return w;
}

struct AnomalyInjector {
  std::string cls;      // HC, TC, OS, NO, WC
  std::string node_id;  // node execution it applies to
  double onset = 0.5;   // seconds from node start (NO snaps to the grasp event)
  double duration = 0.0;  // 0 = class default
  double magnitude = 20.0;
  bool persistent = false;
  int on_execution = 1;  // which execution of the node a one-off applies to

  double default_duration() const {
    if (duration > 0) return duration;
    if (cls == "HC") return 0.3;
    if (cls == "TC") return 1.2;
    if (cls == "OS") return 0.3;
    if (cls == "NO") return 0.3;
    if (cls == "WC") return 1.5;
    return 0.5;
  }
};

enum class Modality { Perfect, Imperfect };

// Scripted demonstration offsets consumed when an adaptation is requested.
struct AdaptationDemo {
  std::string node_id;
  std::string cls;
  Eigen::Vector3d offset = Eigen::Vector3d(0, 0, 0.1);  // relative to the parent goal
};

struct Scenario {
  uint64_t seed = 0;
  WorldConfig world = default_world();
  std::vector<AnomalyInjector> injectors;
  std::vector<AdaptationDemo> demos;
  Modality modality = Modality::Perfect;
  long step_budget = 0;  // 0 = 20x nominal episode length
  std::string name = "scenario";
};

// ---------------------------------------------------------------------------
// Ground-truth skill dynamics: piecewise VAR(1) over the 12 wrench/twist
// channels with piecewise-constant mean levels and per-channel noise scales.

struct SegmentDef {
  Mat A;           // 12x12, stable
  Vec mean;        // 12
  Vec noise;       // 12 per-channel innovation std
  double frac = 1.0;
};

struct SkillDef {
  std::string node_id;  // graph node this skill backs
  std::string name;
  int behavior = 0;
  double duration = 2.0;
  std::vector<SegmentDef> segments;
  double grasp_frac = -1.0;    // grasp event (pick skills)
  double release_frac = -1.0;  // release event (place skill)
  bool starts_holding = false;

  long ticks() const { return static_cast<long>(std::round(duration / kTickDt)); }
  long grasp_tick(long n_ticks) const {
    return grasp_frac >= 0 ? static_cast<long>(grasp_frac * n_ticks) : -1;
  }
  long release_tick(long n_ticks) const {
    return release_frac >= 0 ? static_cast<long>(release_frac * n_ticks) : -1;
  }
  // Tick spans per segment for a stream of n_ticks.
  std::vector<std::pair<long, long>> segment_bounds(long n_ticks) const {
    std::vector<std::pair<long, long>> out;
    double acc = 0.0;
    long begin = 0;
    for (size_t i = 0; i < segments.size(); ++i) {
      acc += segments[i].frac;
      long end = (i + 1 == segments.size()) ? n_ticks
                                            : static_cast<long>(std::round(acc * n_ticks));
      out.emplace_back(begin, end);
      begin = end;
    }
    return out;
  }
  int segment_at(long tick, long n_ticks) const {
    const auto bounds = segment_bounds(n_ticks);
    for (size_t i = 0; i < bounds.size(); ++i)
      if (tick < bounds[i].second) return static_cast<int>(i);
    return static_cast<int>(bounds.size()) - 1;
  }

  // Mean level and noise scale at a tick, blended across segment boundaries
  // over a short window so level changes stay trackable for a first-order
  // autoregression.
  std::pair<Vec, Vec> level_at(long tick, long n_ticks) const {
    const auto bounds = segment_bounds(n_ticks);
    const int s = segment_at(tick, n_ticks);
    Vec mean = segments[s].mean;
    Vec noise = segments[s].noise;
    const long blend = 6;
    if (s + 1 < static_cast<int>(bounds.size())) {
      const long b = bounds[s].second;
      if (tick >= b - blend) {
        const double u = 0.5 * (tick - (b - blend) + 1) / static_cast<double>(blend);
        const double w = u * u * (3 - 2 * u);
        mean = (1 - w) * mean + w * segments[s + 1].mean;
        noise = (1 - w) * noise + w * segments[s + 1].noise;
      }
    }
    if (s > 0) {
      const long b = bounds[s].first;
      if (tick < b + blend) {
        const double u = 0.5 + 0.5 * (tick - b + 1) / static_cast<double>(blend);
        const double w = u * u * (3 - 2 * u);
        mean = (1 - w) * segments[s - 1].mean + w * segments[s].mean;
        noise = (1 - w) * segments[s - 1].noise + w * segments[s].noise;
      }
    }
    return {mean, noise};
  }

  // Fraction of the object load carried at tick i of an undisturbed stream.
  double nominal_load_frac(long i, long n_ticks) const {
    const long rel = release_tick(n_ticks);
    if (rel >= 0 && i >= rel) return 0.0;
    const long g = grasp_tick(n_ticks);
    if (g >= 0) return i < g ? 0.0 : std::min(1.0, static_cast<double>(i - g + 1) / kGraspRampTicks);
    return starts_holding ? 1.0 : 0.0;
  }
};

namespace detail {

inline Mat stable_matrix(Rng& rng, int d, double radius) {
  Mat g(d, d);
  for (int i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const Eigen::EigenSolver<Mat> es(g);
  const double rho = es.eigenvalues().cwiseAbs().maxCoeff();
  return g * (radius / std::max(rho, 1e-9));
}

inline Vec channel_noise(double wrench_f, double wrench_t, double twist_v, double twist_w) {
  Vec s(12);
  s << wrench_f, wrench_f, wrench_f, wrench_t, wrench_t, wrench_t, twist_v, twist_v, twist_v,
      twist_w, twist_w, twist_w;
  return s;
}

}  // namespace detail

// Fixed catalog seed so every world shares the same ground-truth dynamics.
inline constexpr uint64_t kCatalogSeed = 0x6b697472u;

inline std::vector<SkillDef> make_kitting_skills() {
  struct Spec {
    const char* node;
    const char* name;
    int behavior;
    double duration;
    int n_segments;
    double grasp, release;
    bool holding;
  };
  const Spec specs[] = {
      {"n1", "move_to_pick", 1, 2.0, 3, -1, -1, false},
      {"n2a", "pre_pick_to_pick", 2, 1.5, 3, 0.7, -1, false},
      {"n2b", "pick_to_pre_pick", 2, 1.5, 2, -1, -1, true},
      {"n3", "move_to_box", 3, 2.5, 4, -1, -1, true},
      {"n4", "place", 4, 2.0, 3, -1, 0.8, true},
  };
  std::vector<SkillDef> skills;
  for (size_t si = 0; si < std::size(specs); ++si) {
    const auto& sp = specs[si];
    SkillDef sk;
    sk.node_id = sp.node;
    sk.name = sp.name;
    sk.behavior = sp.behavior;
    sk.duration = sp.duration;
    sk.grasp_frac = sp.grasp;
    sk.release_frac = sp.release;
    sk.starts_holding = sp.holding;
    Rng rng(derive_seed(kCatalogSeed, si));
    for (int g = 0; g < sp.n_segments; ++g) {
      SegmentDef seg;
      seg.A = detail::stable_matrix(rng, 12, 0.55 + 0.3 * rng.uniform01());
      seg.mean = Vec::Zero(12);
      // Motion-dependent wrench bias and cruise twist levels per segment.
      for (int c = 0; c < 3; ++c) seg.mean[c] = 1.5 * rng.normal();
      seg.mean[2] += -1.0 - 1.5 * rng.uniform01();
      for (int c = 3; c < 6; ++c) seg.mean[c] = 0.15 * rng.normal();
      for (int c = 6; c < 9; ++c) seg.mean[c] = 0.12 * rng.normal();
      for (int c = 9; c < 12; ++c) seg.mean[c] = 0.05 * rng.normal();
      seg.noise = (0.8 + 0.5 * rng.uniform01()) * detail::channel_noise(0.25, 0.25, 0.25, 0.25);
      seg.frac = 1.0 / sp.n_segments;
      sk.segments.push_back(std::move(seg));
    }
    skills.push_back(std::move(sk));
  }
  return skills;
}

// A derived skill for an adaptive recovery: same scripted events as the
// parent but fresh segment dynamics.
inline SkillDef derive_adaptive_skill(const SkillDef& parent, const std::string& node_id,
                                      uint64_t seed) {
  SkillDef sk = parent;
  sk.node_id = node_id;
  sk.name = node_id;
  sk.duration = 1.5;
  Rng rng(derive_seed(kCatalogSeed, seed));
  for (auto& seg : sk.segments) {
    seg.A = detail::stable_matrix(rng, 12, 0.55 + 0.3 * rng.uniform01());
    for (int c = 0; c < 3; ++c) seg.mean[c] = 1.5 * rng.normal();
    seg.mean[2] += -1.0 - 1.5 * rng.uniform01();
    seg.noise = (0.8 + 0.5 * rng.uniform01()) * detail::channel_noise(0.25, 0.25, 0.25, 0.25);
  }
  // Recovery skills of a pick behavior finish the grasp themselves.
  if (parent.grasp_frac >= 0) sk.grasp_frac = 0.7;
  return sk;
}

// ---------------------------------------------------------------------------
// Stream emission and anomaly injection.

// Context a stream needs from the world: what is held when the node starts
// and what a grasp event would pick up.
struct StreamContext {
  double held_mass = 0.0;
  double object_mass = 0.3;
  double noise_mult = 1.0;
};

namespace detail {

inline double smooth_step(double u) { return u <= 0 ? 0.0 : (u >= 1 ? 1.0 : u * u * (3 - 2 * u)); }

// Additive wrench signature of an injector at `dt_in` seconds past onset.
inline Eigen::Matrix<double, 6, 1> wrench_signature(const AnomalyInjector& inj, double dt_in) {
  Eigen::Matrix<double, 6, 1> w = Eigen::Matrix<double, 6, 1>::Zero();
  const double dur = inj.default_duration();
  if (dt_in < 0 || dt_in > dur) return w;
  const double u = dt_in / dur;
  const double mag = inj.magnitude;
  if (inj.cls == "HC") {
    const double p = std::sin(M_PI * u);
    w.head<3>() = mag * p * Eigen::Vector3d(0.60, -0.50, -0.62);
    w.tail<3>() = 0.12 * mag * p * Eigen::Vector3d(0.5, 0.7, -0.5);
  } else if (inj.cls == "TC") {
    const double s = smooth_step(dt_in / 0.1);
    w[2] = -mag * s;
    w[3] = 0.15 * mag * s;
  } else if (inj.cls == "OS") {
    // The slip jolt is collision-like; only the sustained load drop and the
    // taxel collapse distinguish a slip over longer windows.
    const double p = std::sin(M_PI * u);
    w.head<3>() = mag * p * Eigen::Vector3d(0.60, -0.50, -0.62);
    w.tail<3>() = 0.12 * mag * p * Eigen::Vector3d(0.5, 0.7, -0.5);
  } else if (inj.cls == "NO") {
    const double r = std::sin(2 * M_PI * 8.0 * dt_in) * (1.0 - u);
    w.head<3>() = mag * r * Eigen::Vector3d(0.5, 0.5, 0.7);
    w[5] = 0.1 * mag * r;
  } else if (inj.cls == "WC") {
    const double s = smooth_step(dt_in / 0.1);
    w[0] = mag * s;
    w[1] = 0.4 * mag * s;
    w[5] = 0.1 * mag * s;
  }
  return w;
}

inline void fill_taxels(MultimodalSample& s, double level, double noise, Rng& rng) {
  for (int i = 0; i < kTaxelsPerFinger; ++i) {
    s.taxels_left[i] = level + noise * rng.normal();
    s.taxels_right[i] = level + noise * rng.normal();
  }
}

}  // namespace detail

struct StreamEvent {
  enum class Kind { Grasp, GraspFailed, Drop, Release };
  long tick = 0;
  Kind kind = Kind::Grasp;
};

struct TruthSpan {
  long begin = 0, end = 0;
  std::string cls;
};

struct NodeStream {
  Trial trial;  // local clock, 50 Hz
  std::vector<StreamEvent> events;
  std::vector<TruthSpan> truth;
};

// Emits one node execution: piecewise-VAR wrench/twist, contact-modulated
// taxels, pose along the given path, with injector effects applied inline.
inline NodeStream emit_stream(const SkillDef& sk, const std::vector<Eigen::Vector3d>& pose_path,
                              uint64_t seed, const StreamContext& ctx,
                              const std::vector<AnomalyInjector>& injectors) {
  const long n = static_cast<long>(pose_path.size());
  if (n < 2) throw InvalidInput("emit_stream: pose path too short");
  for (const auto& inj : injectors) {
    const long onset_tick = static_cast<long>(std::round(inj.onset / kTickDt));
    if (inj.cls != "NO" && (onset_tick < 0 || onset_tick >= n))
      throw InvalidInput("injector onset outside the skill duration");
  }

  NodeStream out;
  out.trial.skill_id = sk.node_id;
  out.trial.rate_hz = kDefaultRateHz;
  Rng rng(seed);
  Rng taxel_rng = rng.derive(1);
  Rng pose_rng = rng.derive(2);

  const long grasp_tick = sk.grasp_tick(n);
  const long release_tick = sk.release_tick(n);

  bool no_active = false;
  long no_onset = -1;
  long os_onset = -1;
  for (const auto& inj : injectors) {
    if (inj.magnitude <= 0) continue;
    if (inj.cls == "NO") {
      no_active = true;
      no_onset = grasp_tick >= 0 ? grasp_tick : static_cast<long>(std::round(inj.onset / kTickDt));
    } else if (inj.cls == "OS") {
      os_onset = static_cast<long>(std::round(inj.onset / kTickDt));
    }
  }

  double held = ctx.held_mass;
  double grasped_at = -1;  // tick of a successful grasp, for the load ramp
  long dropped_at = -1;
  double dropped_mass = 0.0;
  Vec z = Vec::Zero(12);

  for (long i = 0; i < n; ++i) {
    // World events scripted into this execution.
    if (i == grasp_tick) {
      if (no_active) {
        out.events.push_back({i, StreamEvent::Kind::GraspFailed});
      } else {
        held = ctx.object_mass;
        grasped_at = static_cast<double>(i);
        out.events.push_back({i, StreamEvent::Kind::Grasp});
      }
    }
    if (i == release_tick && held > 0) {
      held = 0.0;
      grasped_at = -1;
      out.events.push_back({i, StreamEvent::Kind::Release});
    }
    if (i == os_onset && held > 0) {
      dropped_at = i;
      dropped_mass = held;
      held = 0.0;
      grasped_at = -1;
      out.events.push_back({i, StreamEvent::Kind::Drop});
    }

    const int seg_idx = sk.segment_at(i, n);
    const auto& seg = sk.segments[seg_idx];
    const auto [mean, noise] = sk.level_at(i, n);
    Vec e(12);
    for (int c = 0; c < 12; ++c) e[c] = ctx.noise_mult * noise[c] * rng.normal();
    z = seg.A * z + e;

    Vec x = mean + z;
    // Load ramps in over a few ticks after a grasp; after a slip the
    // contact and load signatures fade out gradually.
    double hold_frac = 0.0;
    double hold_mass = held;
    if (held > 0) {
      hold_frac = grasped_at >= 0
                      ? std::min(1.0, (i - grasped_at + 1) / static_cast<double>(kGraspRampTicks))
                      : 1.0;
    } else if (dropped_at >= 0) {
      hold_frac = drop_fade(i - dropped_at);
      hold_mass = dropped_mass;
    }
    x[2] -= kGravity * hold_mass * hold_frac;
    if (grasp_tick >= 0 && !no_active && i >= grasp_tick && i < grasp_tick + 10)
      x[2] -= 2.0 * std::sin(M_PI * (i - grasp_tick) / 10.0);

    // Additive injector signatures.
    const double t_local = i * kTickDt;
    for (const auto& inj : injectors) {
      if (inj.magnitude <= 0) continue;
      double onset = inj.onset;
      if (inj.cls == "NO") onset = (no_onset >= 0 ? no_onset : 0) * kTickDt;
      x.head<6>() += detail::wrench_signature(inj, t_local - onset);
    }

    MultimodalSample s;
    s.t = t_local;
    s.wrench = x.head<6>();
    s.twist = x.tail<6>();

    const double level = kTaxelBaseline + hold_frac * (0.4 + 0.8 * hold_mass);
    const double taxel_noise =
        kTaxelBaselineNoise + hold_frac * (kTaxelContactNoise - kTaxelBaselineNoise);
    detail::fill_taxels(s, level, taxel_noise, taxel_rng);

    const Eigen::Vector3d p = pose_path[std::min(i, n - 1)];
    s.pose[0] = p.x() + 5e-4 * pose_rng.normal();
    s.pose[1] = p.y() + 5e-4 * pose_rng.normal();
    s.pose[2] = p.z() + 5e-4 * pose_rng.normal();
    s.pose.tail<4>() << 0, 0, 0, 1;
    out.trial.samples.push_back(s);
  }

  // Ground-truth activity spans.
  for (const auto& inj : injectors) {
    if (inj.magnitude <= 0) continue;
    long begin = static_cast<long>(std::round(inj.onset / kTickDt));
    if (inj.cls == "NO") begin = no_onset >= 0 ? no_onset : begin;
    long end = std::min<long>(n, begin + static_cast<long>(std::round(inj.default_duration() / kTickDt)) + 1);
    if (inj.cls == "OS" || inj.cls == "NO") end = n;  // the consequence persists
    out.truth.push_back({begin, end, inj.cls});
  }
  return out;
}

// ---------------------------------------------------------------------------
// The kitting world: skill catalog, canonical DMPs, nominal generation, and
// standalone injection.

class KittingWorld {
 public:
  explicit KittingWorld(WorldConfig cfg = default_world()) : cfg_(std::move(cfg)) {
    if (cfg_.objects.empty()) throw InvalidInput("world needs at least one object");
    skills_ = make_kitting_skills();
    for (const auto& sk : skills_) dmps_[sk.node_id] = train_dmp(sk);
  }

  const WorldConfig& config() const { return cfg_; }
  const std::vector<SkillDef>& skills() const { return skills_; }

  const SkillDef& skill(const std::string& node_id) const {
    for (const auto& sk : skills_)
      if (sk.node_id == node_id) return sk;
    auto it = adaptive_skills_.find(node_id);
    if (it != adaptive_skills_.end()) return it->second;
    throw InvalidInput("unknown skill " + node_id);
  }

  const dmp::DmpSkill& dmp_skill(const std::string& node_id) const {
    auto it = dmps_.find(node_id);
    if (it == dmps_.end()) throw InvalidInput("no dmp for " + node_id);
    return it->second;
  }

  void register_adaptive(const SkillDef& sk, const dmp::DmpSkill& dmp_model,
                         const Eigen::Vector3d& demo_start, const Eigen::Vector3d& demo_goal) {
    adaptive_skills_[sk.node_id] = sk;
    dmps_[sk.node_id] = dmp_model;
    endpoints_[sk.node_id] = {demo_start, demo_goal};
  }

  // The bootstrapped task graph: 4 behaviors, 5 actions, with default
  // re-enactment policies from the catalogued human selections.
  graph::TaskGraph bootstrap_graph() const {
    graph::TaskGraph g;
    const char* succ[] = {"n2a", "n2b", "n3", "n4", ""};
    int i = 0;
    for (const auto& sk : skills_) {
      graph::Node n;
      n.id = sk.node_id;
      n.behavior = sk.behavior;
      n.skill_ref = "dmp_" + sk.node_id;
      n.introspection_ref = "hmm_" + sk.node_id;
      n.successor = succ[i++];
      g.nodes.push_back(n);
    }
    g.behavior_heads = {{1, "n1"}, {2, "n2a"}, {3, "n3"}, {4, "n4"}};
    g.policies = graph::learn_reenactment(default_policy_counts());
    return g;
  }

  // Human-selection counts backing the default policies. The catalogued
  // table covers HC/TC/OS/NO; WC and the place-phase TC rows come from the
  // adaptation sessions and re-try the current behavior.
  static std::vector<graph::CountsRow> default_policy_counts() {
    return {
        {"n1", "HC", "n1", 25},   {"n2a", "HC", "n2a", 30}, {"n2b", "HC", "n2a", 30},
        {"n3", "HC", "n3", 25},   {"n4", "HC", "n4", 25},   {"n2a", "TC", "n1", 25},
        {"n2b", "TC", "n1", 25},  {"n3", "TC", "n3", 5},    {"n2a", "OS", "n2a", 20},
        {"n2a", "OS", "n1", 5},   {"n2b", "OS", "n2a", 20}, {"n2b", "OS", "n1", 5},
        {"n3", "OS", "n2a", 25},  {"n2a", "NO", "n2a", 24}, {"n2a", "NO", "n1", 1},
        {"n2b", "NO", "n2a", 24}, {"n2b", "NO", "n1", 1},   {"n3", "WC", "n3", 20},
        {"n4", "TC", "n4", 20},
    };
  }

  // Canonical goal for a skill given the target object and placement count.
  Eigen::Vector3d goal_of(const SkillDef& sk, const Eigen::Vector3d& obj_pos, int placed) const {
    if (sk.node_id == "n1") return obj_pos + Eigen::Vector3d(0, 0, 0.10);
    if (sk.node_id == "n2a") return obj_pos;
    if (sk.node_id == "n2b") return obj_pos + Eigen::Vector3d(0, 0, 0.15);
    if (sk.node_id == "n3") return cfg_.box + Eigen::Vector3d(0, 0, 0.15);
    if (sk.node_id == "n4") return cfg_.box + Eigen::Vector3d(0.05 * placed, 0, 0.02);
    throw InvalidInput("no canonical goal for " + sk.node_id);
  }

  // Pose path for one execution: per-dimension DMP rollouts re-targeted to
  // the requested start and goal.
  std::vector<Eigen::Vector3d> pose_path(const std::string& node_id, const Eigen::Vector3d& start,
                                         const Eigen::Vector3d& goal) const {
    const auto& skill = dmp_skill(node_id);
    std::vector<std::vector<dmp::RolloutStep>> rollouts;
    size_t n = 0;
    for (int d = 0; d < 3; ++d) {
      rollouts.push_back(dmp::rollout(skill.dims[d], start[d], goal[d], skill.dims[d].tau, kTickDt));
      n = std::max(n, rollouts.back().size());
    }
    std::vector<Eigen::Vector3d> path(n);
    for (size_t i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d)
        path[i][d] = rollouts[d][std::min(i, rollouts[d].size() - 1)].x;
    return path;
  }

  // Nominal multimodal stream for training corpora; reproducible bit-exactly
  // from the seed.
  Trial generate_nominal(const std::string& node_id, uint64_t seed, double duration = 0.0) const {
    const SkillDef& sk = skill(node_id);
    const long n = duration > 0 ? static_cast<long>(std::round(duration / kTickDt)) : nominal_ticks(node_id);
    StreamContext ctx = nominal_context(sk);
    ctx.noise_mult = noise_mult;
    std::vector<Eigen::Vector3d> path = nominal_path(node_id, n);
    return emit_stream(sk, path, seed, ctx, {}).trial;
  }

  // Class-specific perturbation of an existing stream; used to build labeled
  // corpora without running full episodes.
  Trial inject(const Trial& stream, const AnomalyInjector& inj, uint64_t seed = 0) const {
    const SkillDef& sk = skill(stream.skill_id);
    const long n = static_cast<long>(stream.size());
    const long onset_tick = static_cast<long>(std::round(inj.onset / kTickDt));
    if (onset_tick < 0 || onset_tick >= n) throw InvalidInput("injector onset outside the stream");
    if (inj.magnitude <= 0) return stream;

    Trial out = stream;
    Rng rng(derive_seed(seed ^ 0x1badb002, onset_tick));
    const long grasp_tick = sk.grasp_tick(n);
    const double mass = nominal_context(sk).object_mass;

    for (long i = 0; i < n; ++i) {
      auto& s = out.samples[i];
      double onset = inj.onset;
      if (inj.cls == "NO") onset = (grasp_tick >= 0 ? grasp_tick : onset_tick) * kTickDt;
      s.wrench += detail::wrench_signature(inj, i * kTickDt - onset);

      if (inj.cls == "OS" && i >= onset_tick) {
        const double fade = drop_fade(i - onset_tick);
        const double frac = sk.nominal_load_frac(i, n);
        s.wrench[2] += kGravity * mass * frac * (1.0 - fade);  // load fades out
        const double level = kTaxelBaseline + fade * frac * (0.4 + 0.8 * mass);
        const double noise = kTaxelBaselineNoise + fade * frac * (kTaxelContactNoise - kTaxelBaselineNoise);
        detail::fill_taxels(s, level, noise, rng);
      }
      if (inj.cls == "NO" && grasp_tick >= 0 && i >= grasp_tick) {
        s.wrench[2] += kGravity * mass * sk.nominal_load_frac(i, n);  // the grasp never held
        if (i < grasp_tick + 10) s.wrench[2] += 2.0 * std::sin(M_PI * (i - grasp_tick) / 10.0);
        detail::fill_taxels(s, kTaxelBaseline, kTaxelBaselineNoise, rng);
      }
    }
    return out;
  }

  long nominal_ticks(const std::string& node_id) const {
    const auto path = nominal_path(node_id, 0);
    return static_cast<long>(path.size());
  }

  StreamContext nominal_context(const SkillDef& sk) const {
    StreamContext ctx;
    const double mass = cfg_.objects.front().mass;
    ctx.object_mass = mass;
    ctx.held_mass = sk.starts_holding ? mass : 0.0;
    ctx.noise_mult = noise_mult;
    return ctx;
  }

  long nominal_episode_ticks() const {
    long total = 0;
    for (const auto& sk : skills_) total += nominal_ticks(sk.node_id);
    return total;
  }

  double noise_mult = 1.0;

 private:
  dmp::DmpSkill train_dmp(const SkillDef& sk) const {
    const Eigen::Vector3d start = canonical_start(sk.node_id);
    const Eigen::Vector3d goal = goal_of(sk, cfg_.objects.front().pos, 0);
    std::vector<dmp::Demonstration> demos;
    const size_t n_samples = static_cast<size_t>(sk.duration / kTickDt) + 1;
    for (int d = 0; d < 3; ++d) demos.push_back(dmp::min_jerk_demo(start[d], goal[d], sk.duration, n_samples));
    for (int d = 0; d < 3; ++d) demos.push_back(dmp::min_jerk_demo(0.0, 0.0, sk.duration, n_samples));
    return dmp::learn_skill(sk.node_id, demos, 30);
  }

  Eigen::Vector3d canonical_start(const std::string& node_id) const {
    const Eigen::Vector3d obj = cfg_.objects.front().pos;
    if (node_id == "n1") return cfg_.home;
    if (node_id == "n2a") return obj + Eigen::Vector3d(0, 0, 0.10);
    if (node_id == "n2b") return obj;
    if (node_id == "n3") return obj + Eigen::Vector3d(0, 0, 0.15);
    if (node_id == "n4") return cfg_.box + Eigen::Vector3d(0, 0, 0.15);
    return cfg_.home;
  }

  std::vector<Eigen::Vector3d> nominal_path(const std::string& node_id, long n_override) const {
    Eigen::Vector3d start, goal;
    const auto ep = endpoints_.find(node_id);
    if (ep != endpoints_.end()) {
      start = ep->second.first;
      goal = ep->second.second;
    } else {
      start = canonical_start(node_id);
      goal = goal_of(skill(node_id), cfg_.objects.front().pos, 0);
    }
    std::vector<Eigen::Vector3d> path = pose_path(node_id, start, goal);
    if (n_override > 0) {
      // Stretch or trim to the requested tick count.
      std::vector<Eigen::Vector3d> out(n_override);
      for (long i = 0; i < n_override; ++i) {
        const double u = static_cast<double>(i) / std::max<long>(1, n_override - 1);
        const double fi = u * (path.size() - 1);
        const size_t j = std::min(static_cast<size_t>(fi), path.size() - 2);
        const double w = fi - j;
        out[i] = (1 - w) * path[j] + w * path[j + 1];
      }
      return out;
    }
    return path;
  }

  WorldConfig cfg_;
  std::vector<SkillDef> skills_;
  std::map<std::string, SkillDef> adaptive_skills_;
  std::map<std::string, dmp::DmpSkill> dmps_;
  std::map<std::string, std::pair<Eigen::Vector3d, Eigen::Vector3d>> endpoints_;
};

// ---------------------------------------------------------------------------
// Scenario text files.

inline void save_scenario(const Scenario& sc, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "kitrec-scenario v1\n";
  os << "name " << sc.name << "\n";
  os << "seed " << sc.seed << "\n";
  os << "modality " << (sc.modality == Modality::Perfect ? "perfect" : "imperfect") << "\n";
  os << "budget " << sc.step_budget << "\n";
  for (const auto& o : sc.world.objects)
    os << "object " << o.id << " " << fmt_double(o.pos.x()) << " " << fmt_double(o.pos.y()) << " "
       << fmt_double(o.pos.z()) << " " << fmt_double(o.height) << " " << fmt_double(o.mass) << "\n";
  for (const auto& inj : sc.injectors)
    os << "inject " << inj.cls << " " << inj.node_id << " " << fmt_double(inj.onset) << " "
       << fmt_double(inj.duration) << " " << fmt_double(inj.magnitude) << " "
       << (inj.persistent ? 1 : 0) << " " << inj.on_execution << "\n";
  for (const auto& d : sc.demos)
    os << "demo " << d.node_id << " " << d.cls << " " << fmt_double(d.offset.x()) << " "
       << fmt_double(d.offset.y()) << " " << fmt_double(d.offset.z()) << "\n";
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string header;
  std::getline(is, header);
  if (header != "kitrec-scenario v1") throw IoError("bad scenario header in " + path);
  Scenario sc;
  sc.world.objects.clear();
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "name") {
      ss >> sc.name;
    } else if (key == "seed") {
      ss >> sc.seed;
    } else if (key == "modality") {
      std::string m;
      ss >> m;
      sc.modality = m == "imperfect" ? Modality::Imperfect : Modality::Perfect;
    } else if (key == "budget") {
      ss >> sc.step_budget;
    } else if (key == "object") {
      ObjectSpec o;
      ss >> o.id >> o.pos.x() >> o.pos.y() >> o.pos.z() >> o.height >> o.mass;
      sc.world.objects.push_back(o);
    } else if (key == "inject") {
      AnomalyInjector inj;
      int persistent = 0;
      ss >> inj.cls >> inj.node_id >> inj.onset >> inj.duration >> inj.magnitude >> persistent >>
          inj.on_execution;
      inj.persistent = persistent != 0;
      sc.injectors.push_back(inj);
    } else if (key == "demo") {
      AdaptationDemo d;
      ss >> d.node_id >> d.cls >> d.offset.x() >> d.offset.y() >> d.offset.z();
      sc.demos.push_back(d);
    } else {
      throw InvalidInput("unknown scenario key '" + key + "' in " + path);
    }
    if (!ss) throw InvalidInput("malformed scenario line: " + line);
  }
  if (sc.world.objects.empty()) sc.world = default_world();
  return sc;
}

}  // namespace kitrec::sim
