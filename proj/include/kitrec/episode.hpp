#pragma once

#include "kitrec/simworld.hpp"

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kitrec::sim {

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Everything an episode needs besides the task graph: per-node nominal
// models with their scaling profiles, and the shared anomaly classifier.
struct ModelBundle {
  std::map<std::string, introspect::IdentificationModel> id_models;
  std::map<std::string, ScalingProfile> scalings;
  introspect::ClassifierModel classifier;
  ScalingProfile classifier_scaling;
  hmm::Hyperparams hyper;  // used when adaptive models are trained mid-episode
  int n_nominal_trials = 7;
  int n_calibration = 100;
};

struct FlagRecord {
  double t = 0.0;
  std::string node;
  double gradient = 0.0;
  std::string truth_cls;  // ground truth ("" when no cause is active)
  std::string label_cls;  // label the critic acted on ("" when ignored)
  std::string action;     // reenact:<id> | adaptive:<id> | adapt_new:<id> | ignored
};

struct TraceStep {
  double t = 0.0;
  std::string node;
  FeatureVec feature = FeatureVec::Zero();
  double gradient = 0.0;
  bool flagged = false;
};

struct ExecutionTrace {
  std::string scenario_name;
  uint64_t seed = 0;
  Modality modality = Modality::Perfect;
  std::vector<TraceStep> steps;
  std::vector<FlagRecord> flags;
  Trial record;  // full raw multimodal stream on the episode clock
  enum class Outcome { Success, Failure } outcome = Outcome::Failure;
  std::string failure_reason;
  long n_reenactments = 0;
  long n_adaptations = 0;
  long n_misclassifications = 0;
  int objects_placed = 0;

  bool success() const { return outcome == Outcome::Success; }
};

namespace detail {

struct EpisodeWorldState {
  int current_obj = 0;
  bool held = false;
  std::string loss_cause;  // OS or NO when holding was lost / never gained
  int placed = 0;
  Eigen::Vector3d arm_pos;
  std::map<std::string, Eigen::Vector3d> obj_pos;
};

// Ground truth for a flag: the active injector span, else the world-state
// cause when the skill expects a held object that is not there.
inline std::string flag_truth(const NodeStream& stream, long flag_tick, const SkillDef& sk,
                              const EpisodeWorldState& ws) {
  for (const auto& span : stream.truth)
    if (flag_tick >= span.begin && flag_tick < span.end) return span.cls;
  std::string latest;
  long latest_begin = -1;
  for (const auto& span : stream.truth)
    if (span.begin <= flag_tick && span.begin > latest_begin) {
      latest_begin = span.begin;
      latest = span.cls;
    }
  if (!latest.empty()) return latest;
  const long n = static_cast<long>(stream.trial.size());
  if (sk.nominal_load_frac(flag_tick, n) > 0 && !ws.held && !ws.loss_cause.empty())
    return ws.loss_cause;
  return {};
}

}  // namespace detail

inline std::string parent_of(const graph::TaskGraph& g, const std::string& adaptive_id);
inline void train_adaptive_models(KittingWorld& world, ModelBundle& models, const SkillDef& parent,
                           const std::string& aid, const Eigen::Vector3d& parent_goal,
                           const Eigen::Vector3d& offset, uint64_t seed);

// Runs one scripted episode: per 50 Hz tick the active node's stream is
// advanced, features are monitored, and on a flag the critic's decision is
// enacted. Adaptation requests train a skill and an introspection model from
// the scenario's scripted demonstration and grow the graph in place.
inline ExecutionTrace run_episode(graph::TaskGraph& g, ModelBundle& models, const Scenario& sc,
                                  KittingWorld& world) {
  ExecutionTrace trace;
  trace.scenario_name = sc.name;
  trace.seed = sc.seed;
  trace.modality = sc.modality;
  trace.record.skill_id = sc.name;
  trace.record.rate_hz = kDefaultRateHz;

  graph::CriticState critic;
  detail::EpisodeWorldState ws;
  ws.arm_pos = world.config().home;
  for (const auto& o : world.config().objects) ws.obj_pos[o.id] = o.pos;

  const long budget = sc.step_budget > 0
                          ? sc.step_budget
                          : 20 * world.nominal_episode_ticks() *
                                static_cast<long>(world.config().objects.size());

  std::map<std::string, int> exec_counts;
  std::map<std::string, Eigen::Vector3d> node_goal;  // goal of the latest execution per node
  std::optional<double> last_flag_t;
  long steps = 0;
  double clock = 0.0;
  std::string current = g.nodes.front().id;

  const long pre_ticks = static_cast<long>(std::round(models.classifier.pre_window / kTickDt));
  const long post_ticks = static_cast<long>(std::round(models.classifier.post_window / kTickDt));

  while (true) {
    if (steps >= budget) {
      trace.outcome = ExecutionTrace::Outcome::Failure;
      trace.failure_reason = "budget_exhausted";
      return trace;
    }
    const graph::Node* node = g.find(current);
    if (node == nullptr) {
      trace.outcome = ExecutionTrace::Outcome::Failure;
      trace.failure_reason = "unknown_node:" + current;
      return trace;
    }
    const SkillDef& sk = world.skill(current);
    const int exec = ++exec_counts[current];

    const ObjectSpec& obj = world.config().objects[std::min<size_t>(
        ws.current_obj, world.config().objects.size() - 1)];
    Eigen::Vector3d goal;
    if (node->kind == graph::NodeKind::Adaptive) {
      Eigen::Matrix4d parent_pose = Eigen::Matrix4d::Identity();
      const auto pg = node_goal.find(parent_of(g, current));
      parent_pose.block<3, 1>(0, 3) = pg != node_goal.end() ? pg->second : ws.arm_pos;
      goal = graph::resolve_goal(*node, parent_pose).block<3, 1>(0, 3);
    } else {
      goal = world.goal_of(sk, ws.obj_pos[obj.id], ws.placed);
    }
    node_goal[current] = goal;

    const auto path = world.pose_path(current, ws.arm_pos, goal);
    const long n = static_cast<long>(path.size());

    std::vector<AnomalyInjector> active;
    for (const auto& inj : sc.injectors)
      if (inj.node_id == current && (inj.persistent || inj.on_execution == exec))
        active.push_back(inj);

    StreamContext ctx;
    ctx.held_mass = ws.held ? obj.mass : 0.0;
    ctx.object_mass = obj.mass;
    ctx.noise_mult = world.noise_mult;
    const uint64_t exec_seed = derive_seed(sc.seed, fnv1a(current), static_cast<uint64_t>(exec));
    const NodeStream stream = emit_stream(sk, path, exec_seed, ctx, active);
    const FeatureSeries feats = extract_features(stream.trial, kDefaultStdWindowSec);
    const Mat det_scaled = apply_scaling(models.scalings.at(current), feats.f);
    const Mat cls_scaled = apply_scaling(models.classifier_scaling, feats.f);

    introspect::AnomalyDetector detector(models.id_models.at(current), current);
    detector.restart(last_flag_t);

    auto apply_events_at = [&](long tick) {
      for (const auto& ev : stream.events) {
        if (ev.tick != tick) continue;
        switch (ev.kind) {
          case StreamEvent::Kind::Grasp:
            ws.held = true;
            ws.loss_cause.clear();
            break;
          case StreamEvent::Kind::GraspFailed:
            ws.held = false;
            ws.loss_cause = "NO";
            break;
          case StreamEvent::Kind::Drop:
            ws.held = false;
            ws.loss_cause = "OS";
            ws.obj_pos[obj.id] = Eigen::Vector3d(stream.trial.samples[tick].pose[0],
                                                 stream.trial.samples[tick].pose[1],
                                                 world.config().bin.z());
            break;
          case StreamEvent::Kind::Release:
            ws.held = false;
            ws.loss_cause.clear();
            ++ws.placed;
            break;
        }
      }
    };

    long flag_tick = -1;
    double flag_grad = 0.0;
    bool acted = false;

    for (long i = 0; i < n; ++i) {
      // While a flag is pending the behavior is considered aborted, so
      // scripted world events stop applying unless the flag gets ignored.
      if (flag_tick < 0) apply_events_at(i);
      ++steps;
      clock += kTickDt;
      const auto flag = detector.step(clock, det_scaled.col(i));

      TraceStep ts;
      ts.t = clock;
      ts.node = current;
      ts.feature = feats.f.col(i);
      ts.gradient = detector.last_gradient();
      ts.flagged = flag.has_value() && flag_tick < 0;
      trace.steps.push_back(ts);
      MultimodalSample raw = stream.trial.samples[i];
      raw.t = clock;
      trace.record.samples.push_back(raw);

      if (flag && flag_tick < 0) {
        flag_tick = i;
        flag_grad = flag->gradient_at_trigger;
        last_flag_t = flag->t;
      }
      if (flag_tick >= 0 && i >= std::min(n - 1, flag_tick + post_ticks)) {
        // Post-anomaly window collected; decide now.
        const std::string truth = detail::flag_truth(stream, flag_tick, sk, ws);
        std::string label;
        if (sc.modality == Modality::Perfect) {
          label = truth;
        } else {
          const long lo = std::max<long>(0, flag_tick - pre_ticks);
          const Mat window = cls_scaled.middleCols(lo, i - lo + 1);
          label = introspect::classify(models.classifier, window).cls;
        }

        FlagRecord fr;
        fr.t = clock - (i - flag_tick) * kTickDt;
        fr.node = current;
        fr.gradient = flag_grad;
        fr.truth_cls = truth;
        fr.label_cls = label;
        if (!truth.empty() && !label.empty() && truth != label) ++trace.n_misclassifications;

        if (label.empty()) {
          // Perfect modality with no true cause: not a true positive, so no
          // recovery is attempted and the node keeps executing. Deferred
          // world events catch up.
          fr.action = "ignored";
          trace.flags.push_back(fr);
          for (long t = flag_tick + 1; t <= i; ++t) apply_events_at(t);
          flag_tick = -1;
          continue;
        }

        graph::RecoveryAction action;
        try {
          action = graph::decide(g, critic, current, label);
        } catch (const MissingPolicy&) {
          fr.action = "halt";
          trace.flags.push_back(fr);
          trace.outcome = ExecutionTrace::Outcome::Failure;
          trace.failure_reason = "missing_policy:" + label + "@" + current;
          trace.objects_placed = ws.placed;
          return trace;
        }

        ws.arm_pos = Eigen::Vector3d(stream.trial.samples[i].pose[0],
                                     stream.trial.samples[i].pose[1],
                                     stream.trial.samples[i].pose[2]);
        if (action.type == graph::RecoveryAction::Type::ReEnact) {
          fr.action = "reenact:" + action.target;
          ++trace.n_reenactments;
          current = action.target;
        } else if (action.type == graph::RecoveryAction::Type::ExecuteAdaptive) {
          fr.action = "adaptive:" + action.target;
          current = action.target;
        } else {
          // Train and insert a new adaptive node from the scripted
          // demonstration, then execute it.
          const AdaptationDemo* demo = nullptr;
          for (const auto& d : sc.demos)
            if (d.node_id == current && d.cls == label) demo = &d;
          if (demo == nullptr) {
            fr.action = "halt";
            trace.flags.push_back(fr);
            trace.outcome = ExecutionTrace::Outcome::Failure;
            trace.failure_reason = "no_demonstration:" + label + "@" + current;
            trace.objects_placed = ws.placed;
            return trace;
          }
          graph::GoalTransform tf;
          tf.T.block<3, 1>(0, 3) = demo->offset;
          const std::string aid = graph::insert_adaptive(g, current, label, "dmp", "hmm", tf);
          const uint64_t adapt_seed = derive_seed(sc.seed, fnv1a(aid), 0xADA);
          train_adaptive_models(world, models, sk, aid, node_goal[current], demo->offset,
                                adapt_seed);
          critic.consecutive.erase({current, label});
          fr.action = "adapt_new:" + aid;
          ++trace.n_adaptations;
          current = aid;
        }
        trace.flags.push_back(fr);
        acted = true;
        break;
      }
    }

    if (!acted) {
      // Nominal completion.
      ws.arm_pos = path.back();
      critic.on_node_completed(current);
      if (node->kind == graph::NodeKind::Adaptive) {
        // A recovery branch accomplishes its parent behavior's purpose.
        if (node->behavior == 2 && !ws.held) {
          ws.held = true;
          ws.loss_cause.clear();
        }
        if (node->behavior == 4 && ws.held) {
          ws.held = false;
          ++ws.placed;
        }
      }
      const auto next = graph::next_node(g, current);
      if (next) {
        current = *next;
      } else {
        trace.objects_placed = ws.placed;
        if (ws.placed >= static_cast<int>(world.config().objects.size())) {
          trace.outcome = ExecutionTrace::Outcome::Success;
          return trace;
        }
        ws.current_obj = ws.placed;
        current = g.nodes.front().id;
      }
    }
    trace.objects_placed = ws.placed;
  }
}

inline ExecutionTrace run_episode(graph::TaskGraph& g, ModelBundle& models, const Scenario& sc) {
  KittingWorld world(sc.world);
  return run_episode(g, models, sc, world);
}

// The parent node id of an adaptive node id (ids are parent + "_rec_" + cls).
inline std::string parent_of(const graph::TaskGraph&, const std::string& adaptive_id) {

  const auto pos = adaptive_id.rfind("_rec_");
  if (pos == std::string::npos) return adaptive_id;
  return adaptive_id.substr(0, pos);
}

// Trains the DMP skill and introspection model for a freshly inserted
// adaptive node from the scripted demonstration and registers both.
inline void train_adaptive_models(KittingWorld& world, ModelBundle& models, const SkillDef& parent,
                                  const std::string& aid, const Eigen::Vector3d& parent_goal,
                                  const Eigen::Vector3d& offset, uint64_t seed) {
  const SkillDef adaptive = derive_adaptive_skill(parent, aid, fnv1a(aid));
  const Eigen::Vector3d demo_start = parent_goal;
  const Eigen::Vector3d demo_goal = parent_goal + offset;
  std::vector<dmp::Demonstration> demos;
  const size_t n_samples = static_cast<size_t>(adaptive.duration / kTickDt) + 1;
  for (int d = 0; d < 3; ++d)
    demos.push_back(dmp::min_jerk_demo(demo_start[d], demo_goal[d], adaptive.duration, n_samples));
  for (int d = 0; d < 3; ++d) demos.push_back(dmp::min_jerk_demo(0.0, 0.0, adaptive.duration, n_samples));
  world.register_adaptive(adaptive, dmp::learn_skill(aid, demos, 30), demo_start, demo_goal);

  const int n_draws = std::max(models.n_nominal_trials, models.n_calibration);
  std::vector<Mat> feats;
  for (int i = 0; i < n_draws; ++i) {
    const Trial t = world.generate_nominal(aid, derive_seed(seed, i));
    feats.push_back(extract_features(t, kDefaultStdWindowSec).f);
  }
  std::vector<Mat> train_feats(feats.begin(), feats.begin() + models.n_nominal_trials);
  const ScalingProfile profile = fit_scaling(train_feats);
  std::vector<Mat> scaled_train, scaled_calib;
  for (const Mat& f : feats) {
    Mat s = apply_scaling(profile, f);
    if (static_cast<int>(scaled_train.size()) < models.n_nominal_trials) scaled_train.push_back(s);
    scaled_calib.push_back(std::move(s));
  }
  const hmm::HmmModel model =
      hmm::fit(scaled_train, models.hyper, hmm::AllocKind::StickyHdp, hmm::ObsKind::Var1, seed);
  models.id_models[aid] = introspect::calibrate(model, scaled_calib);
  models.scalings[aid] = profile;
}

}  // namespace kitrec::sim
