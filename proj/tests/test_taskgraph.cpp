#include <catch2/catch_amalgamated.hpp>

#include "kitrec/taskgraph.hpp"

using namespace kitrec;
using namespace kitrec::graph;

namespace {

// The bootstrapped kitting chain: 4 behaviors, 5 actions.
TaskGraph kitting_graph() {
  TaskGraph g;
  auto add = [&g](const std::string& id, int behavior, const std::string& successor) {
    Node n;
    n.id = id;
    n.behavior = behavior;
    n.successor = successor;
    n.skill_ref = "dmp_" + id;
    n.introspection_ref = "hmm_" + id;
    g.nodes.push_back(n);
  };
  add("n1", 1, "n2a");
  add("n2a", 2, "n2b");
  add("n2b", 2, "n3");
  add("n3", 3, "n4");
  add("n4", 4, "");
  g.behavior_heads = {{1, "n1"}, {2, "n2a"}, {3, "n3"}, {4, "n4"}};

  // Human-selection counts for re-enactment targets.
  std::vector<CountsRow> table = {
      {"n1", "HC", "n1", 25},  {"n2a", "HC", "n2a", 30}, {"n2b", "HC", "n2a", 30},
      {"n3", "HC", "n3", 25},  {"n4", "HC", "n4", 25},   {"n2a", "TC", "n1", 25},
      {"n2b", "TC", "n1", 25}, {"n3", "TC", "n3", 5},    {"n2a", "OS", "n2a", 20},
      {"n2a", "OS", "n1", 5},  {"n2b", "OS", "n2a", 20}, {"n2b", "OS", "n1", 5},
      {"n3", "OS", "n2a", 25}, {"n2a", "NO", "n2a", 24}, {"n2a", "NO", "n1", 1},
      {"n2b", "NO", "n2a", 24}, {"n2b", "NO", "n1", 1}};
  g.policies = learn_reenactment(table);
  return g;
}

GoalTransform translation(double x, double y, double z) {
  GoalTransform t;
  t.T(0, 3) = x;
  t.T(1, 3) = y;
  t.T(2, 3) = z;
  return t;
}

}  // namespace

TEST_CASE("multinomial policies normalize observed counts") {
  const auto policies = learn_reenactment({{"n2a", "OS", "n2a", 20}, {"n2a", "OS", "n1", 5}});
  const auto theta = policies.at({"n2a", "OS"}).theta();
  REQUIRE(theta.size() == 2);
  CHECK(theta[0] == Catch::Approx(0.8));
  CHECK(theta[1] == Catch::Approx(0.2));

  const auto self_only = learn_reenactment({{"n3", "HC", "n3", 25}});
  CHECK(self_only.at({"n3", "HC"}).theta()[0] == Catch::Approx(1.0));

  const auto single = learn_reenactment({{"n1", "HC", "n1", 1}});
  CHECK(single.at({"n1", "HC"}).theta()[0] == Catch::Approx(1.0));

  CHECK_THROWS_AS(learn_reenactment({{"n1", "HC", "n1", 0}}), InvalidInput);
}

TEST_CASE("the critic re-enacts, then escalates on the third consecutive failure") {
  TaskGraph g = kitting_graph();
  CriticState critic;

  const auto a1 = decide(g, critic, "n2a", "TC");
  CHECK(a1.type == RecoveryAction::Type::ReEnact);
  CHECK(a1.target == "n1");

  const auto a2 = decide(g, critic, "n2a", "TC");
  CHECK(a2.type == RecoveryAction::Type::ReEnact);

  const auto a3 = decide(g, critic, "n2a", "TC");
  CHECK(a3.type == RecoveryAction::Type::RequestAdaptation);
}

TEST_CASE("nominal progress resets the failure counters") {
  TaskGraph g = kitting_graph();
  CriticState critic;
  decide(g, critic, "n2a", "TC");
  decide(g, critic, "n2a", "TC");
  critic.on_node_completed("n2a");
  const auto a = decide(g, critic, "n2a", "TC");
  CHECK(a.type == RecoveryAction::Type::ReEnact);
}

TEST_CASE("a registered adaptive node takes precedence over the counter") {
  TaskGraph g = kitting_graph();
  CriticState critic;
  critic.consecutive[{"n2a", "TC"}] = 5;
  const std::string child =
      insert_adaptive(g, "n2a", "TC", "dmp_adapt", "hmm_adapt", translation(0, 0, 0.05));
  const auto a = decide(g, critic, "n2a", "TC");
  CHECK(a.type == RecoveryAction::Type::ExecuteAdaptive);
  CHECK(a.target == child);
}

TEST_CASE("missing policies halt the episode") {
  TaskGraph g = kitting_graph();
  CriticState critic;
  CHECK_THROWS_AS(decide(g, critic, "n3", "NO"), MissingPolicy);
}

TEST_CASE("sampling mode follows the multinomial deterministically by seed") {
  TaskGraph g = kitting_graph();
  int hits_n2a = 0;
  const int n = 5000;
  for (int i = 0; i < n; ++i) {
    CriticState critic;
    Rng rng(1000 + i);
    const auto a = decide(g, critic, "n2a", "OS", &rng);
    hits_n2a += a.target == "n2a";
  }
  CHECK(std::abs(hits_n2a / static_cast<double>(n) - 0.8) < 0.02);

  CriticState c1, c2;
  Rng r1(77), r2(77);
  CHECK(decide(g, c1, "n2a", "OS", &r1).target == decide(g, c2, "n2a", "OS", &r2).target);
}

TEST_CASE("adaptive insertion branches to the ensuing milestone") {
  TaskGraph g = kitting_graph();
  const std::string child =
      insert_adaptive(g, "n2a", "TC", "dmp_adapt", "hmm_adapt", translation(0, 0, 0.05));
  const Node* n = g.find(child);
  REQUIRE(n != nullptr);
  CHECK(n->kind == NodeKind::Adaptive);
  CHECK(n->successor == "n3");  // nearest milestone after behavior 2
  CHECK(g.adaptive_registry.count("nominal_node_(n2a)_anomaly_type_(tool_collision)") == 1);
  validate(g);
}

TEST_CASE("adaptation during an adaptation builds a second branching layer") {
  TaskGraph g = kitting_graph();
  const std::string first =
      insert_adaptive(g, "n2a", "TC", "dmp_a1", "hmm_a1", translation(0, 0, 0.05));
  const std::string second =
      insert_adaptive(g, first, "TC", "dmp_a2", "hmm_a2", translation(0.02, 0, 0));
  const Node* n = g.find(second);
  REQUIRE(n != nullptr);
  CHECK(n->successor == "n3");  // same ensuing milestone as the parent branch
  CHECK(g.adaptive_registry.count("adaptive_node_(" + first + ")_anomaly_type_(tool_collision)") == 1);
  validate(g);
}

TEST_CASE("duplicate compound keys are rejected") {
  TaskGraph g = kitting_graph();
  insert_adaptive(g, "n2a", "TC", "dmp_a1", "hmm_a1", translation(0, 0, 0.05));
  CHECK_THROWS_AS(insert_adaptive(g, "n2a", "TC", "dmp_a1b", "hmm_a1b", translation(0, 0, 0.1)),
                  AlreadyRegistered);
}

TEST_CASE("children inherit every re-enactment policy of the parent") {
  TaskGraph g = kitting_graph();
  const std::string child =
      insert_adaptive(g, "n2a", "TC", "dmp_a1", "hmm_a1", translation(0, 0, 0.05));
  for (const std::string cls : {"HC", "TC", "OS", "NO"}) {
    REQUIRE(g.policies.count({child, cls}) == 1);
    const auto parent_theta = g.policies.at({std::string("n2a"), cls}).theta();
    const auto child_theta = g.policies.at({child, cls}).theta();
    REQUIRE(parent_theta.size() == child_theta.size());
    for (size_t i = 0; i < parent_theta.size(); ++i)
      CHECK(child_theta[i] == Catch::Approx(parent_theta[i]));
  }
}

TEST_CASE("goal resolution composes the stored transform") {
  TaskGraph g = kitting_graph();
  const std::string child =
      insert_adaptive(g, "n3", "WC", "dmp_wc", "hmm_wc", translation(0, 0, 0.1));
  const Node* n = g.find(child);

  Eigen::Matrix4d parent_goal = Eigen::Matrix4d::Identity();
  Eigen::Matrix4d resolved = resolve_goal(*n, parent_goal);
  CHECK(resolved(2, 3) == Catch::Approx(0.1));

  // Shifting the parent goal shifts the resolved goal by the same offset.
  parent_goal(0, 3) = 0.35;
  parent_goal(1, 3) = -0.2;
  resolved = resolve_goal(*n, parent_goal);
  CHECK(resolved(0, 3) == Catch::Approx(0.35));
  CHECK(resolved(1, 3) == Catch::Approx(-0.2));
  CHECK(resolved(2, 3) == Catch::Approx(0.1));

  // Identity transform leaves the goal unchanged.
  TaskGraph g2 = kitting_graph();
  const std::string id_child = insert_adaptive(g2, "n3", "WC", "s", "m", GoalTransform{});
  CHECK((resolve_goal(*g2.find(id_child), parent_goal) - parent_goal).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("transforms must be rigid") {
  GoalTransform bad;
  bad.T(0, 0) = 2.0;
  CHECK_THROWS_AS(validate(bad), InvalidInput);
}

TEST_CASE("successor chain walks the kitting actions in order") {
  const TaskGraph g = kitting_graph();
  CHECK(*next_node(g, "n1") == "n2a");
  CHECK(*next_node(g, "n2a") == "n2b");
  CHECK(*next_node(g, "n2b") == "n3");
  CHECK(*next_node(g, "n3") == "n4");
  CHECK(!next_node(g, "n4").has_value());  // terminal sentinel

  TaskGraph broken = kitting_graph();
  broken.find("n3")->successor = "ghost";
  CHECK_THROWS_AS(next_node(broken, "n3"), GraphError);
}

TEST_CASE("validation rejects cycles") {
  TaskGraph g = kitting_graph();
  g.find("n4")->successor = "n1";
  CHECK_THROWS_AS(validate(g), GraphError);
}

TEST_CASE("graph records round trip") {
  TaskGraph g = kitting_graph();
  insert_adaptive(g, "n2a", "TC", "dmp_a1", "hmm_a1", translation(0, 0, 0.05));
  const std::string path = "test_graph.txt";
  save_graph(g, path);
  const TaskGraph back = load_graph(path);
  REQUIRE(back.nodes.size() == g.nodes.size());
  CHECK(back.adaptive_registry == g.adaptive_registry);
  CHECK(back.policies.size() == g.policies.size());
  const auto theta = back.policies.at({std::string("n2a"), std::string("OS")}).theta();
  CHECK(theta[0] == Catch::Approx(0.8));
  const Node* child = back.find("n2a_rec_tc");
  REQUIRE(child != nullptr);
  REQUIRE(child->goal_transform.has_value());
  CHECK(child->goal_transform->T(2, 3) == Catch::Approx(0.05));
  std::remove(path.c_str());
}
