#include "kitrec/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace kitrec;

namespace {

struct CommonArgs {
  uint64_t seed = 0;
  std::string config;
  std::string out = ".";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--seed", args.seed, "random seed");
  cmd->add_option("--config", args.config, "configuration file (json)")->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out, "output directory");
}

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream is(path);
  nlohmann::json j;
  is >> j;
  return j;
}

harness::TrainConfig train_config_from(const nlohmann::json& j, uint64_t seed) {
  harness::TrainConfig cfg;
  cfg.seed = seed;
  cfg.n_nominal = j.value("n_nominal", cfg.n_nominal);
  cfg.n_calibration = j.value("n_calibration", cfg.n_calibration);
  cfg.k_splits = j.value("k_splits", cfg.k_splits);
  cfg.pre_window = j.value("pre_window", cfg.pre_window);
  cfg.post_window = j.value("post_window", cfg.post_window);
  cfg.debounce = j.value("debounce", cfg.debounce);
  cfg.hyper.K_trunc = j.value("k_trunc", cfg.hyper.K_trunc);
  cfg.hyper.kappa = j.value("kappa", cfg.hyper.kappa);
  cfg.hyper.gamma = j.value("gamma", cfg.hyper.gamma);
  cfg.hyper.max_iter = j.value("max_iter", cfg.hyper.max_iter);
  cfg.hyper.n_restarts = j.value("n_restarts", cfg.hyper.n_restarts);
  if (j.contains("class_counts")) {
    cfg.class_counts.clear();
    for (const auto& [cls, count] : j.at("class_counts").items())
      cfg.class_counts.emplace_back(cls, count.get<int>());
  }
  return cfg;
}

sim::WorldConfig world_from(const nlohmann::json& j) {
  return sim::default_world(j.value("objects", 1));
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  return std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(now).count());
}

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  std::string cell;
  while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
  return values;
}

int cmd_train_dmp(const CommonArgs& args) {
  const auto j = load_config(args.config);
  sim::KittingWorld world(world_from(j));
  fs::create_directories(args.out);
  for (const auto& sk : world.skills()) {
    const fs::path path = fs::path(args.out) / ("dmp_" + sk.node_id + ".txt");
    dmp::save_skill(world.dmp_skill(sk.node_id), path.string());
    std::cout << "wrote " << path.string() << "\n";
  }
  return 0;
}

int cmd_train_hmm(const CommonArgs& args) {
  const auto j = load_config(args.config);
  sim::KittingWorld world(world_from(j));
  const auto cfg = train_config_from(j, args.seed);
  fs::create_directories(args.out);

  for (const auto& sk : world.skills()) {
    std::vector<Mat> feats;
    for (int i = 0; i < cfg.n_nominal; ++i) {
      const Trial t =
          world.generate_nominal(sk.node_id, derive_seed(cfg.seed, sim::fnv1a(sk.node_id), i));
      feats.push_back(extract_features(t, kDefaultStdWindowSec).f);
    }
    const ScalingProfile profile = fit_scaling(feats);
    std::vector<Mat> scaled;
    for (const Mat& f : feats) scaled.push_back(apply_scaling(profile, f));
    const hmm::HmmModel model =
        hmm::fit(scaled, cfg.hyper, hmm::AllocKind::StickyHdp, hmm::ObsKind::Var1,
                 derive_seed(cfg.seed, sim::fnv1a(sk.node_id)));
    hmm::save_model(model, (fs::path(args.out) / ("hmm_" + sk.node_id + ".txt")).string());
    save_scaling(profile, (fs::path(args.out) / ("scaling_" + sk.node_id + ".txt")).string());
    std::cout << "trained " << sk.node_id << " (K=" << model.K << ")\n";
  }
  return 0;
}

int cmd_calibrate(const CommonArgs& args) {
  const auto j = load_config(args.config);
  sim::KittingWorld world(world_from(j));
  const auto cfg = train_config_from(j, args.seed);

  for (const auto& sk : world.skills()) {
    const fs::path hmm_path = fs::path(args.out) / ("hmm_" + sk.node_id + ".txt");
    const fs::path scale_path = fs::path(args.out) / ("scaling_" + sk.node_id + ".txt");
    if (!fs::exists(hmm_path)) {
      std::cerr << "missing " << hmm_path.string() << "; run train-hmm first\n";
      return 1;
    }
    const hmm::HmmModel model = hmm::load_model(hmm_path.string());
    const ScalingProfile profile = load_scaling(scale_path.string());
    std::vector<Mat> calib;
    for (int i = 0; i < std::max(cfg.n_nominal, cfg.n_calibration); ++i) {
      const Trial t =
          world.generate_nominal(sk.node_id, derive_seed(cfg.seed, sim::fnv1a(sk.node_id), i));
      calib.push_back(apply_scaling(profile, extract_features(t, kDefaultStdWindowSec).f));
    }
    const auto id = introspect::calibrate(model, calib, cfg.debounce);
    harness::save_id_model(id, (fs::path(args.out) / ("idmodel_" + sk.node_id + ".txt")).string(),
                           "hmm_" + sk.node_id + ".txt");
    std::cout << "calibrated " << sk.node_id << " threshold=" << id.threshold() << "\n";
  }
  return 0;
}

int cmd_train_classifier(const CommonArgs& args) {
  const auto j = load_config(args.config);
  sim::KittingWorld world(world_from(j));
  const auto cfg = train_config_from(j, args.seed);

  // Rebuild the full system so window extraction uses consistent thresholds,
  // then persist everything as one library.
  const auto sys = harness::train_system(world, cfg);
  harness::save_bundle(sys.models, args.out);
  graph::save_graph(sys.graph, (fs::path(args.out) / "graph.txt").string());
  std::cout << "wrote model library to " << args.out << "\n";
  return 0;
}

int cmd_simulate(const CommonArgs& args, const std::string& scenario_path,
                 const std::string& models_dir, std::string run_name) {
  sim::Scenario sc = sim::load_scenario(scenario_path);
  if (args.seed != 0) sc.seed = args.seed;

  sim::KittingWorld world(sc.world);
  graph::TaskGraph g;
  sim::ModelBundle models;
  if (!models_dir.empty() && fs::exists(fs::path(models_dir) / "scaling_classifier.txt")) {
    models = harness::load_bundle(models_dir);
    const fs::path gpath = fs::path(models_dir) / "graph.txt";
    g = fs::exists(gpath) ? graph::load_graph(gpath.string()) : world.bootstrap_graph();
  } else {
    harness::TrainConfig cfg;
    cfg.seed = sc.seed;
    const auto sys = harness::train_system(world, cfg);
    g = sys.graph;
    models = sys.models;
  }

  const auto trace = sim::run_episode(g, models, sc, world);
  if (run_name.empty()) run_name = timestamp();
  const fs::path dir = harness::write_run_dir(args.out, run_name, trace);
  graph::save_graph(g, (dir / "final_graph.txt").string());
  std::cout << (trace.success() ? "success" : "failure: " + trace.failure_reason) << "\n";
  std::cout << "run directory: " << dir.string() << "\n";
  return 0;
}

int cmd_evaluate(const CommonArgs& args) {
  const auto j = load_config(args.config);
  sim::KittingWorld world(world_from(j));
  const auto cfg = train_config_from(j, args.seed);
  const auto sys = harness::train_system(world, cfg);
  fs::create_directories(args.out);

  // Identification: nominal plus injected trials, flags matched within the
  // tolerance window.
  const int n_nominal = j.value("identification_nominal", 50);
  const int n_injected = j.value("identification_injected", 50);
  const double tolerance = j.value("identification_tolerance", 1.0);
  std::vector<harness::TrialEvents> events;
  std::vector<std::string> skill_cycle;
  for (const auto& sk : world.skills()) skill_cycle.push_back(sk.node_id);
  for (int i = 0; i < n_nominal; ++i) {
    const std::string node = skill_cycle[i % skill_cycle.size()];
    const Trial t = world.generate_nominal(node, derive_seed(900 + cfg.seed, sim::fnv1a(node), i));
    harness::TrialEvents ev;
    ev.flag_times = harness::detect_flags(sys.models, node, extract_features(t, kDefaultStdWindowSec));
    if (ev.flag_times.size() > 1) ev.flag_times.resize(1);
    events.push_back(ev);
  }
  const std::vector<std::string> classes = {"HC", "TC", "OS", "NO", "WC"};
  for (int i = 0; i < n_injected; ++i) {
    const std::string cls = classes[i % classes.size()];
    const auto lt =
        harness::make_injected_trial(world, cls, i, 1700 + cfg.seed, harness::identification_nodes(cls));
    harness::TrialEvents ev;
    ev.truth_times = {lt.onset};
    ev.flag_times =
        harness::detect_flags(sys.models, lt.node, extract_features(lt.trial, kDefaultStdWindowSec));
    if (ev.flag_times.size() > 1) ev.flag_times.resize(1);
    events.push_back(ev);
  }
  const auto counts = harness::evaluate_identification(events, tolerance);
  std::ofstream((fs::path(args.out) / "identification.json"))
      << harness::identification_report(counts).dump(2) << "\n";

  // Classification: labeled windows against the trained bank.
  const int per_class = j.value("classification_per_class", 20);
  std::vector<std::string> truth, pred;
  for (const auto& cls : classes) {
    int made = 0;
    for (int i = 0; made < per_class && i < 4 * per_class; ++i) {
      const auto w = harness::make_labeled_window(world, sys.models, cls, 500 + i, 2600 + cfg.seed,
                                                  cfg.pre_window, cfg.post_window);
      if (!w) continue;
      truth.push_back(cls);
      pred.push_back(introspect::classify(sys.models.classifier, w->series.f).cls);
      ++made;
    }
  }
  const auto cm = harness::evaluate_classification(truth, pred, sys.models.classifier.labels);
  harness::write_confusion_csv(cm, (fs::path(args.out) / "confusion.csv").string());
  nlohmann::ordered_json cj;
  cj["accuracy"] = cm.accuracy();
  cj["mean_diagonal_rate"] = cm.mean_diagonal_rate();
  cj["trials"] = cm.total();
  std::ofstream(fs::path(args.out) / "classification.json") << cj.dump(2) << "\n";

  std::cout << "identification accuracy=" << counts.accuracy() << " recall=" << counts.recall()
            << "\nclassification accuracy=" << cm.accuracy() << "\n";
  return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& pre_csv, const std::string& post_csv) {
  const auto j = load_config(args.config);
  sim::KittingWorld world(world_from(j));
  const auto cfg = train_config_from(j, args.seed);
  const auto pre_grid = parse_grid(pre_csv);
  const auto post_grid = parse_grid(post_csv);

  const auto sys = harness::train_system(world, cfg);
  const double max_pre = *std::max_element(pre_grid.begin(), pre_grid.end());
  const double max_post = *std::max_element(post_grid.begin(), post_grid.end());
  const auto train_w = harness::build_window_corpus(world, sys.models, cfg.class_counts,
                                                    derive_seed(cfg.seed, 0x77), max_pre, max_post);
  std::vector<std::pair<std::string, int>> eval_counts;
  const int per_class = j.value("sweep_eval_per_class", 20);
  for (const auto& [cls, _] : cfg.class_counts) eval_counts.emplace_back(cls, per_class);
  const auto eval_w = harness::build_window_corpus(world, sys.models, eval_counts,
                                                   derive_seed(cfg.seed, 0x99), max_pre, max_post);

  const auto trainer = [&](const std::vector<introspect::LabeledWindow>& tw, double pre,
                           double post) {
    return harness::train_classifier(tw, sys.models.classifier.labels, cfg.hyper, cfg.k_splits,
                                     pre, post, derive_seed(cfg.seed, 0x5157));
  };
  const Mat grid = introspect::reactivity_sweep(trainer, train_w, eval_w, pre_grid, post_grid);
  fs::create_directories(args.out);
  const fs::path path = fs::path(args.out) / "reactivity.csv";
  harness::write_reactivity_csv(grid, pre_grid, post_grid, path.string());
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

int cmd_report(const CommonArgs& args, const std::string& runs_dir) {
  // Aggregate the summary documents of a set of run directories.
  nlohmann::ordered_json report;
  std::map<std::string, std::pair<long, long>> by_scenario;  // name -> (successes, total)
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(runs_dir))
    if (entry.is_directory() && entry.path().filename().string().rfind("experiment_at_", 0) == 0)
      dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());

  long successes = 0;
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& dir : dirs) {
    std::ifstream is(dir / "summary.json");
    if (!is) continue;
    nlohmann::json s;
    is >> s;
    const bool ok = s.value("outcome", "") == "success";
    successes += ok;
    auto& cell = by_scenario[s.value("scenario", "?") + "/" + s.value("modality", "?")];
    cell.first += ok;
    cell.second += 1;
    runs.push_back({{"dir", dir.filename().string()},
                    {"scenario", s.value("scenario", "")},
                    {"modality", s.value("modality", "")},
                    {"outcome", s.value("outcome", "")},
                    {"reenactments", s.value("reenactments", 0)},
                    {"adaptations", s.value("adaptations", 0)}});
  }
  report["episodes"] = dirs.size();
  report["successes"] = successes;
  report["success_rate"] = dirs.empty() ? 0.0 : static_cast<double>(successes) / dirs.size();
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [key, cell] : by_scenario)
    per[key] = {{"successes", cell.first},
                {"total", cell.second},
                {"rate", static_cast<double>(cell.first) / cell.second}};
  report["by_scenario"] = per;
  report["runs"] = runs;

  fs::create_directories(args.out);
  const fs::path path = fs::path(args.out) / "report.json";
  std::ofstream(path) << report.dump(2) << "\n";
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kitrec: introspection and recovery for simulated kitting manipulation"};
  app.require_subcommand(1);

  CommonArgs train_dmp_args, train_hmm_args, calibrate_args, classifier_args, simulate_args,
      evaluate_args, sweep_args, report_args;

  auto* train_dmp = app.add_subcommand("train-dmp", "train movement primitives for every skill");
  add_common(train_dmp, train_dmp_args);

  auto* train_hmm = app.add_subcommand("train-hmm", "train nominal sequence models per node");
  add_common(train_hmm, train_hmm_args);

  auto* calibrate = app.add_subcommand("calibrate", "calibrate anomaly thresholds per node");
  add_common(calibrate, calibrate_args);

  auto* classifier = app.add_subcommand("train-classifier",
                                        "train the anomaly class bank and write the model library");
  add_common(classifier, classifier_args);

  auto* simulate = app.add_subcommand("simulate", "run a scripted episode");
  std::string scenario_path, models_dir, run_name;
  simulate->add_option("--scenario", scenario_path, "scenario file")->required()->check(CLI::ExistingFile);
  simulate->add_option("--models", models_dir, "model library directory");
  simulate->add_option("--run-name", run_name, "run directory suffix (default: wall clock)");
  add_common(simulate, simulate_args);

  auto* evaluate = app.add_subcommand("evaluate", "identification and classification metrics");
  add_common(evaluate, evaluate_args);

  auto* sweep = app.add_subcommand("sweep-reactivity", "classification accuracy over window sizes");
  std::string pre_csv = "0.5,1,1.5,2", post_csv = "0.5,1,1.5,2";
  sweep->add_option("--pre", pre_csv, "pre-window grid, comma separated seconds");
  sweep->add_option("--post", post_csv, "post-window grid, comma separated seconds");
  add_common(sweep, sweep_args);

  auto* report = app.add_subcommand("report", "aggregate run directories into a summary report");
  std::string runs_dir = ".";
  report->add_option("--runs", runs_dir, "directory containing run directories")
      ->check(CLI::ExistingDirectory);
  add_common(report, report_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_dmp->parsed()) return cmd_train_dmp(train_dmp_args);
    if (train_hmm->parsed()) return cmd_train_hmm(train_hmm_args);
    if (calibrate->parsed()) return cmd_calibrate(calibrate_args);
    if (classifier->parsed()) return cmd_train_classifier(classifier_args);
    if (simulate->parsed()) return cmd_simulate(simulate_args, scenario_path, models_dir, run_name);
    if (evaluate->parsed()) return cmd_evaluate(evaluate_args);
    if (sweep->parsed()) return cmd_sweep(sweep_args, pre_csv, post_csv);
    if (report->parsed()) return cmd_report(report_args, runs_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
