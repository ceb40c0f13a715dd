#pragma once

#include "kitrec/common.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kitrec::graph {

inline std::string anomaly_long_name(const std::string& code) {
  if (code == "HC") return "human_collision";
  if (code == "TC") return "tool_collision";
  if (code == "OS") return "object_slip";
  if (code == "NO") return "no_object";
  if (code == "WC") return "wall_collision";
  std::string s = code;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

struct GoalTransform {
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
};

inline void validate(const GoalTransform& g) {
  const Eigen::Matrix3d R = g.T.topLeftCorner<3, 3>();
  if ((R * R.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6)
    throw InvalidInput("goal transform rotation not orthonormal");
  if (std::abs(R.determinant() - 1.0) > 1e-6)
    throw InvalidInput("goal transform rotation not proper");
  if ((g.T.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
    throw InvalidInput("goal transform last row must be 0 0 0 1");
}

enum class NodeKind { Nominal, Adaptive };

struct Node {
  std::string id;
  NodeKind kind = NodeKind::Nominal;
  int behavior = 0;
  std::string skill_ref;
  std::string introspection_ref;
  std::optional<GoalTransform> goal_transform;  // adaptive nodes only
  std::string successor;                        // empty = terminal
};

struct ReEnactmentPolicy {
  std::vector<std::pair<std::string, double>> counts;  // target node id, count

  std::vector<double> theta() const {
    double total = 0.0;
    for (const auto& [_, c] : counts) total += c;
    std::vector<double> th;
    for (const auto& [_, c] : counts) th.push_back(c / total);
    return th;
  }
};

struct TaskGraph {
  std::vector<Node> nodes;
  std::vector<std::pair<int, std::string>> behavior_heads;            // (behavior, head node id), ordered
  std::map<std::pair<std::string, std::string>, ReEnactmentPolicy> policies;  // (node, class)
  std::map<std::string, std::string> adaptive_registry;               // compound key -> node id

  const Node* find(const std::string& id) const {
    for (const auto& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }
  Node* find(const std::string& id) {
    for (auto& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }

  // First action of the behavior after `behavior`; empty when none.
  std::string ensuing_milestone(int behavior) const {
    for (const auto& [b, head] : behavior_heads)
      if (b > behavior) return head;
    return {};
  }
};

struct CriticState {
  std::map<std::pair<std::string, std::string>, int> consecutive;  // (node, class) -> failures
  std::string last_action;

  // A successful traversal past a node clears its counters.
  void on_node_completed(const std::string& node_id) {
    for (auto it = consecutive.begin(); it != consecutive.end();) {
      if (it->first.first == node_id)
        it = consecutive.erase(it);
      else
        ++it;
    }
  }
};

struct RecoveryAction {
  enum class Type { ReEnact, ExecuteAdaptive, RequestAdaptation };
  Type type = Type::ReEnact;
  std::string target;  // node to re-enact or adaptive node to execute
};

inline std::string compound_key(const Node& parent, const std::string& cls) {
  const std::string prefix = parent.kind == NodeKind::Nominal ? "nominal_node_(" : "adaptive_node_(";
  return prefix + parent.id + ")_anomaly_type_(" + anomaly_long_name(cls) + ")";
}

// Counts table row: an observed human selection of a re-enactment target.
struct CountsRow {
  std::string node_id;
  std::string cls;
  std::string target_id;
  double count = 0.0;
};

inline std::map<std::pair<std::string, std::string>, ReEnactmentPolicy> learn_reenactment(
    const std::vector<CountsRow>& table) {
  std::map<std::pair<std::string, std::string>, ReEnactmentPolicy> policies;
  for (const auto& row : table) {
    if (row.count < 0) throw InvalidInput("learn_reenactment: negative count");
    policies[{row.node_id, row.cls}].counts.emplace_back(row.target_id, row.count);
  }
  for (const auto& [key, policy] : policies) {
    double total = 0.0;
    for (const auto& [_, c] : policy.counts) total += c;
    if (!(total > 0))
      throw InvalidInput("learn_reenactment: all-zero counts for " + key.first + "/" + key.second);
  }
  return policies;
}

// Recovery decision for a classified anomaly. An existing adaptive node for
// the compound key takes precedence; two consecutive re-enactment failures
// escalate to an adaptation request; otherwise the policy picks the target
// (argmax by default, multinomial sampling when an rng is supplied).
inline RecoveryAction decide(const TaskGraph& g, CriticState& critic, const std::string& node_id,
                             const std::string& cls, Rng* rng = nullptr) {
  const Node* node = g.find(node_id);
  if (node == nullptr) throw GraphError("decide: unknown node " + node_id);

  const auto reg = g.adaptive_registry.find(compound_key(*node, cls));
  if (reg != g.adaptive_registry.end()) {
    return {RecoveryAction::Type::ExecuteAdaptive, reg->second};
  }

  auto& counter = critic.consecutive[{node_id, cls}];
  if (counter >= 2) return {RecoveryAction::Type::RequestAdaptation, {}};

  const auto pol = g.policies.find({node_id, cls});
  if (pol == g.policies.end())
    throw MissingPolicy("no re-enactment policy for " + cls + " at " + node_id);

  const auto& counts = pol->second.counts;
  const auto theta = pol->second.theta();
  size_t pick = 0;
  if (rng != nullptr) {
    const double u = rng->uniform01();
    double acc = 0.0;
    for (size_t i = 0; i < theta.size(); ++i) {
      acc += theta[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
  } else {
    for (size_t i = 1; i < theta.size(); ++i)
      if (theta[i] > theta[pick]) pick = i;
  }
  ++counter;
  return {RecoveryAction::Type::ReEnact, counts[pick].first};
}

// Inserts an adaptive branch node between the parent and the ensuing
// milestone; the child inherits the parent's re-enactment policies.
inline std::string insert_adaptive(TaskGraph& g, const std::string& parent_id, const std::string& cls,
                                   const std::string& skill_ref, const std::string& introspection_ref,
                                   const GoalTransform& transform) {
  Node* parent = g.find(parent_id);
  if (parent == nullptr) throw GraphError("insert_adaptive: unknown parent " + parent_id);
  validate(transform);

  const std::string key = compound_key(*parent, cls);
  if (g.adaptive_registry.count(key))
    throw AlreadyRegistered("adaptive node already registered for " + key);

  Node child;
  std::string lc = cls;
  std::transform(lc.begin(), lc.end(), lc.begin(), [](unsigned char c) { return std::tolower(c); });
  child.id = parent_id + "_rec_" + lc;
  child.kind = NodeKind::Adaptive;
  child.behavior = parent->behavior;
  child.skill_ref = skill_ref;
  child.introspection_ref = introspection_ref;
  child.goal_transform = transform;
  child.successor = parent->kind == NodeKind::Nominal ? g.ensuing_milestone(parent->behavior)
                                                      : parent->successor;

  for (const auto& [pkey, policy] : g.policies)
    if (pkey.first == parent_id) g.policies[{child.id, pkey.second}] = policy;

  g.adaptive_registry[key] = child.id;
  g.nodes.push_back(child);
  return child.id;
}

inline Eigen::Matrix4d resolve_goal(const Node& adaptive_node, const Eigen::Matrix4d& parent_goal) {
  if (!adaptive_node.goal_transform) throw GraphError("resolve_goal: node has no goal transform");
  return parent_goal * adaptive_node.goal_transform->T;
}

// Successor on nominal completion; nullopt is the episode-end sentinel.
inline std::optional<std::string> next_node(const TaskGraph& g, const std::string& node_id) {
  const Node* node = g.find(node_id);
  if (node == nullptr) throw GraphError("next_node: unknown node " + node_id);
  if (node->successor.empty()) return std::nullopt;
  if (g.find(node->successor) == nullptr)
    throw GraphError("next_node: dangling successor " + node->successor + " from " + node_id);
  return node->successor;
}

// Milestone successors must be acyclic and adaptive branches must rejoin at
// behavior heads.
inline void validate(const TaskGraph& g) {
  if (g.nodes.empty()) throw GraphError("empty graph");
  std::map<std::string, int> seen;
  std::string cur = g.nodes.front().id;
  size_t steps = 0;
  while (!cur.empty()) {
    if (++seen[cur] > 1) throw GraphError("cycle through node " + cur);
    const Node* n = g.find(cur);
    if (n == nullptr) throw GraphError("dangling successor " + cur);
    cur = n->successor;
    if (++steps > g.nodes.size() + 1) throw GraphError("successor chain too long");
  }
  for (const auto& n : g.nodes) {
    if (n.kind == NodeKind::Adaptive) {
      if (!n.goal_transform) throw GraphError("adaptive node without goal transform: " + n.id);
      if (!n.successor.empty()) {
        bool is_head = false;
        for (const auto& [b, head] : g.behavior_heads) is_head |= (head == n.successor);
        if (!is_head) throw GraphError("adaptive branch must rejoin a milestone: " + n.id);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Text persistence (nodes, successors, policy counts, registry keys).

inline void save_graph(const TaskGraph& g, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "kitrec-graph v1\n";
  os << "behaviors " << g.behavior_heads.size() << "\n";
  for (const auto& [b, head] : g.behavior_heads) os << "behavior " << b << " head " << head << "\n";
  os << "nodes " << g.nodes.size() << "\n";
  for (const auto& n : g.nodes) {
    os << "node " << n.id << " kind " << (n.kind == NodeKind::Nominal ? "nominal" : "adaptive")
       << " behavior " << n.behavior << " skill " << (n.skill_ref.empty() ? "-" : n.skill_ref)
       << " introspection " << (n.introspection_ref.empty() ? "-" : n.introspection_ref)
       << " successor " << (n.successor.empty() ? "-" : n.successor);
    if (n.goal_transform) {
      os << " transform";
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) os << " " << fmt_double(n.goal_transform->T(i, j));
    }
    os << "\n";
  }
  os << "policies " << g.policies.size() << "\n";
  for (const auto& [key, policy] : g.policies) {
    os << "policy " << key.first << " " << key.second << " " << policy.counts.size();
    for (const auto& [target, count] : policy.counts) os << " " << target << " " << fmt_double(count);
    os << "\n";
  }
  os << "registry " << g.adaptive_registry.size() << "\n";
  for (const auto& [key, id] : g.adaptive_registry) os << "entry " << key << " " << id << "\n";
}

inline TaskGraph load_graph(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string tag, version, word;
  is >> tag >> version;
  if (tag != "kitrec-graph" || version != "v1") throw IoError("bad graph record header in " + path);
  TaskGraph g;
  size_t n = 0;
  is >> word >> n;
  for (size_t i = 0; i < n; ++i) {
    int b;
    std::string head;
    is >> word >> b >> word >> head;
    g.behavior_heads.emplace_back(b, head);
  }
  is >> word >> n;
  for (size_t i = 0; i < n; ++i) {
    Node node;
    std::string kind;
    is >> word >> node.id >> word >> kind >> word >> node.behavior >> word >> node.skill_ref >> word >>
        node.introspection_ref >> word >> node.successor;
    node.kind = kind == "adaptive" ? NodeKind::Adaptive : NodeKind::Nominal;
    if (node.skill_ref == "-") node.skill_ref.clear();
    if (node.introspection_ref == "-") node.introspection_ref.clear();
    if (node.successor == "-") node.successor.clear();
    if (node.kind == NodeKind::Adaptive) {
      is >> word;  // "transform"
      GoalTransform t;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) is >> t.T(r, c);
      node.goal_transform = t;
    }
    g.nodes.push_back(node);
  }
  is >> word >> n;
  for (size_t i = 0; i < n; ++i) {
    std::string node_id, cls;
    size_t k;
    is >> word >> node_id >> cls >> k;
    ReEnactmentPolicy policy;
    for (size_t j = 0; j < k; ++j) {
      std::string target;
      double count;
      is >> target >> count;
      policy.counts.emplace_back(target, count);
    }
    g.policies[{node_id, cls}] = policy;
  }
  is >> word >> n;
  for (size_t i = 0; i < n; ++i) {
    std::string key, id;
    is >> word >> key >> id;
    g.adaptive_registry[key] = id;
  }
  if (!is) throw IoError("truncated graph record in " + path);
  return g;
}

}  // namespace kitrec::graph
