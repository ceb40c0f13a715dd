#include <catch2/catch_amalgamated.hpp>

#include "kitrec/harness.hpp"

using namespace kitrec;
using namespace kitrec::harness;

TEST_CASE("confusion matrices count rows by truth") {
  const std::vector<std::string> alphabet = {"HC", "TC", "OS"};
  const std::vector<std::string> truth = {"HC", "HC", "TC", "OS", "OS", "OS"};
  const std::vector<std::string> pred = {"HC", "TC", "TC", "OS", "OS", "HC"};
  const auto cm = evaluate_classification(truth, pred, alphabet);
  CHECK(cm.counts(0, 0) == 1);
  CHECK(cm.counts(0, 1) == 1);
  CHECK(cm.counts(1, 1) == 1);
  CHECK(cm.counts(2, 2) == 2);
  CHECK(cm.counts(2, 0) == 1);
  // Row sums equal per-class truth counts.
  CHECK(cm.counts.row(0).sum() == 2);
  CHECK(cm.counts.row(1).sum() == 1);
  CHECK(cm.counts.row(2).sum() == 3);
  CHECK(cm.accuracy() == Catch::Approx(4.0 / 6.0));
}

TEST_CASE("perfect predictions give an identity-structured matrix") {
  const std::vector<std::string> labels = {"A", "B"};
  const auto cm = evaluate_classification({"A", "B", "A"}, {"A", "B", "A"}, labels);
  CHECK(cm.accuracy() == 1.0);
  CHECK(cm.counts(0, 1) == 0);
  CHECK(cm.counts(1, 0) == 0);
}

TEST_CASE("one error among ten gives ninety percent accuracy") {
  std::vector<std::string> truth(10, "OS"), pred(10, "OS");
  pred[3] = "HC";
  const auto cm = evaluate_classification(truth, pred, {"HC", "OS"});
  CHECK(cm.accuracy() == Catch::Approx(0.9));
}

TEST_CASE("labels outside the alphabet are rejected") {
  CHECK_THROWS_AS(evaluate_classification({"XX"}, {"HC"}, {"HC"}), InvalidInput);
  CHECK_THROWS_AS(evaluate_classification({"HC"}, {"HC", "HC"}, {"HC"}), InvalidInput);
}

TEST_CASE("identification matching follows the tolerance rules") {
  // 10 events, 10 matched flags.
  {
    std::vector<TrialEvents> trials(10);
    for (int i = 0; i < 10; ++i) {
      trials[i].truth_times = {1.0};
      trials[i].flag_times = {1.0 + 0.05 * i};
    }
    const auto c = evaluate_identification(trials, 1.0);
    CHECK(c.precision() == 1.0);
    CHECK(c.recall() == 1.0);
  }
  // 8 matched, 2 missed, 1 extra.
  {
    std::vector<TrialEvents> trials;
    for (int i = 0; i < 8; ++i) trials.push_back({{1.0}, {1.2}});
    trials.push_back({{1.0}, {}});
    trials.push_back({{1.0}, {}});
    trials.push_back({{}, {2.0}});
    const auto c = evaluate_identification(trials, 1.0);
    CHECK(c.tp == 8);
    CHECK(c.fn == 2);
    CHECK(c.fp == 1);
    CHECK(c.precision() == Catch::Approx(8.0 / 9.0));
    CHECK(c.recall() == Catch::Approx(8.0 / 10.0));
  }
  // Nominal trials with no flags count as true negatives.
  {
    std::vector<TrialEvents> trials(5);
    const auto c = evaluate_identification(trials, 1.0);
    CHECK(c.tn == 5);
    CHECK(c.accuracy() == 1.0);
  }
  // A flag outside the tolerance is both a false positive and a miss.
  {
    std::vector<TrialEvents> trials = {{{1.0}, {3.0}}};
    const auto c = evaluate_identification(trials, 1.0);
    CHECK(c.tp == 0);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
  }
  // One-to-one: two flags cannot claim one event.
  {
    std::vector<TrialEvents> trials = {{{1.0}, {0.9, 1.1}}};
    const auto c = evaluate_identification(trials, 1.0);
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
  }
}

TEST_CASE("macro metrics match hand-computed values on a three-class toy set") {
  // Three trials, one per class context, with known outcomes.
  std::vector<TrialEvents> trials = {
      {{1.0, 5.0}, {1.1, 5.2}},  // both matched
      {{2.0}, {2.1, 7.0}},       // one match, one extra
      {{3.0}, {}},               // missed
  };
  const auto c = evaluate_identification(trials, 1.0);
  CHECK(c.tp == 3);
  CHECK(c.fp == 1);
  CHECK(c.fn == 1);
  CHECK(c.precision() == Catch::Approx(3.0 / 4.0));
  CHECK(c.recall() == Catch::Approx(3.0 / 4.0));
}

TEST_CASE("success tables group by node, class, and modality") {
  sim::Scenario s1;
  s1.injectors = {{"HC", "n3", 1.0, 0.0, 25.0, false, 1}};
  sim::Scenario s2 = s1;
  sim::Scenario s3;
  s3.modality = sim::Modality::Imperfect;
  s3.injectors = {{"TC", "n2a", 0.5, 0.0, 18.0, true, 1}};

  sim::ExecutionTrace ok, bad;
  ok.outcome = sim::ExecutionTrace::Outcome::Success;
  bad.outcome = sim::ExecutionTrace::Outcome::Failure;

  const auto table = evaluate_success({ok, bad, ok}, {s1, s2, s3});
  const auto& hc = table.at({"n3", "HC", "perfect"});
  CHECK(hc.total == 2);
  CHECK(hc.successes == 1);
  CHECK(hc.rate() == Catch::Approx(0.5));
  const auto& tc = table.at({"n2a", "TC", "imperfect"});
  CHECK(tc.total == 1);
  CHECK(tc.rate() == 1.0);
  CHECK_THROWS_AS(evaluate_success({ok}, {s1, s2}), InvalidInput);
}

TEST_CASE("rates of sixty of sixty and nine of ten") {
  sim::Scenario s;
  s.injectors = {{"HC", "n1", 0.5, 0.0, 25.0, false, 1}};
  std::vector<sim::ExecutionTrace> traces;
  std::vector<sim::Scenario> scenarios;
  sim::ExecutionTrace ok;
  ok.outcome = sim::ExecutionTrace::Outcome::Success;
  for (int i = 0; i < 60; ++i) {
    traces.push_back(ok);
    scenarios.push_back(s);
  }
  auto table = evaluate_success(traces, scenarios);
  CHECK(table.at({"n1", "HC", "perfect"}).rate() == 1.0);

  traces.assign(9, ok);
  sim::ExecutionTrace bad;
  traces.push_back(bad);
  scenarios.assign(10, s);
  table = evaluate_success(traces, scenarios);
  CHECK(table.at({"n1", "HC", "perfect"}).rate() == Catch::Approx(0.9));
}

TEST_CASE("report fragments and grids serialize deterministically") {
  IdentificationCounts c{.tp = 8, .fp = 1, .fn = 2, .tn = 5};
  const auto j = identification_report(c);
  CHECK(j["tp"] == 8);
  CHECK(j["reference_targets"]["recall"] == Catch::Approx(0.9798));
  const std::string a = j.dump(2);
  const std::string b = identification_report(c).dump(2);
  CHECK(a == b);

  Mat grid(2, 2);
  grid << 0.8, 0.9, 0.95, 1.0;
  write_reactivity_csv(grid, {0.5, 2.0}, {0.5, 2.0}, "test_grid.csv");
  std::ifstream is("test_grid.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line.rfind("pre\\post,", 0) == 0);
  std::getline(is, line);
  std::stringstream row(line);
  std::string cell;
  std::getline(row, cell, ',');
  CHECK(std::stod(cell) == Catch::Approx(0.5));
  std::getline(row, cell, ',');
  CHECK(std::stod(cell) == Catch::Approx(0.8));
  std::getline(row, cell, ',');
  CHECK(std::stod(cell) == Catch::Approx(0.9));
  std::remove("test_grid.csv");
}
