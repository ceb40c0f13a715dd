#pragma once

#include "kitrec/episode.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace kitrec::harness {

// ---------------------------------------------------------------------------
// Classification metrics.

struct ConfusionMatrix {
  std::vector<std::string> labels;
  Eigen::MatrixXi counts;  // true x predicted

  int index(const std::string& label) const {
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return static_cast<int>(i);
    return -1;
  }
  long total() const { return counts.sum(); }
  double accuracy() const {
    const long t = total();
    return t == 0 ? 0.0 : static_cast<double>(counts.diagonal().sum()) / static_cast<double>(t);
  }
  // Mean per-class true-positive rate over classes that appear in the truth.
  double mean_diagonal_rate() const {
    double acc = 0.0;
    int n = 0;
    for (int i = 0; i < counts.rows(); ++i) {
      const long row = counts.row(i).sum();
      if (row > 0) {
        acc += static_cast<double>(counts(i, i)) / static_cast<double>(row);
        ++n;
      }
    }
    return n == 0 ? 0.0 : acc / n;
  }
};

inline ConfusionMatrix evaluate_classification(const std::vector<std::string>& truth,
                                               const std::vector<std::string>& predicted,
                                               const std::vector<std::string>& alphabet) {
  if (truth.size() != predicted.size())
    throw InvalidInput("evaluate_classification: unpaired label lists");
  ConfusionMatrix cm;
  cm.labels = alphabet;
  cm.counts = Eigen::MatrixXi::Zero(static_cast<int>(alphabet.size()), static_cast<int>(alphabet.size()));
  for (size_t i = 0; i < truth.size(); ++i) {
    const int t = cm.index(truth[i]);
    const int p = cm.index(predicted[i]);
    if (t < 0 || p < 0)
      throw InvalidInput("label outside alphabet: " + truth[i] + "/" + predicted[i]);
    cm.counts(t, p) += 1;
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Identification metrics: greedy one-to-one matching of flags to ground-truth
// event times within a tolerance.

struct TrialEvents {
  std::vector<double> truth_times;
  std::vector<double> flag_times;
};

struct IdentificationCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;

  double precision() const { return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp); }
  double recall() const { return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / (tp + fn); }
  double accuracy() const {
    const long total = tp + fp + fn + tn;
    return total == 0 ? 1.0 : static_cast<double>(tp + tn) / total;
  }
};

inline IdentificationCounts evaluate_identification(const std::vector<TrialEvents>& trials,
                                                    double tolerance = 1.0) {
  IdentificationCounts c;
  for (const auto& trial : trials) {
    if (trial.truth_times.empty() && trial.flag_times.empty()) {
      ++c.tn;
      continue;
    }
    // Candidate pairs ordered by time distance; each side matched once.
    struct Pair {
      double dist;
      size_t e, f;
    };
    std::vector<Pair> pairs;
    for (size_t e = 0; e < trial.truth_times.size(); ++e)
      for (size_t f = 0; f < trial.flag_times.size(); ++f) {
        const double d = std::abs(trial.truth_times[e] - trial.flag_times[f]);
        if (d <= tolerance) pairs.push_back({d, e, f});
      }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const Pair& a, const Pair& b) { return a.dist < b.dist; });
    std::set<size_t> used_e, used_f;
    for (const auto& p : pairs) {
      if (used_e.count(p.e) || used_f.count(p.f)) continue;
      used_e.insert(p.e);
      used_f.insert(p.f);
      ++c.tp;
    }
    c.fn += static_cast<long>(trial.truth_times.size() - used_e.size());
    c.fp += static_cast<long>(trial.flag_times.size() - used_f.size());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Episode success tables grouped as (node, class, modality).

struct SuccessCell {
  long successes = 0;
  long total = 0;
  double rate() const { return total == 0 ? 0.0 : static_cast<double>(successes) / total; }
};

using SuccessTable = std::map<std::tuple<std::string, std::string, std::string>, SuccessCell>;

inline SuccessTable evaluate_success(const std::vector<sim::ExecutionTrace>& traces,
                                     const std::vector<sim::Scenario>& scenarios) {
  if (traces.size() != scenarios.size())
    throw InvalidInput("evaluate_success: traces and scenarios must pair up");
  SuccessTable table;
  for (size_t i = 0; i < traces.size(); ++i) {
    const std::string modality =
        scenarios[i].modality == sim::Modality::Perfect ? "perfect" : "imperfect";
    std::set<std::pair<std::string, std::string>> keys;
    for (const auto& inj : scenarios[i].injectors) keys.insert({inj.node_id, inj.cls});
    if (keys.empty()) keys.insert({"-", "-"});
    for (const auto& [node, cls] : keys) {
      auto& cell = table[{node, cls, modality}];
      ++cell.total;
      if (traces[i].success()) ++cell.successes;
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Training orchestration: nominal models per node, calibrated thresholds,
// and the per-class window classifier bank.

struct TrainConfig {
  int n_nominal = 7;
  int n_calibration = 100;
  std::vector<std::pair<std::string, int>> class_counts = {
      {"HC", 18}, {"TC", 17}, {"OS", 18}, {"NO", 15}, {"WC", 17}};
  hmm::Hyperparams hyper;
  int k_splits = 3;
  double pre_window = 2.0;
  double post_window = 2.0;
  double debounce = 1.0;
  uint64_t seed = 0;
};

inline double default_magnitude(const std::string& cls) {
  if (cls == "HC") return 25.0;
  if (cls == "TC") return 18.0;
  if (cls == "OS") return 25.0;
  if (cls == "NO") return 12.0;
  if (cls == "WC") return 18.0;
  return 15.0;
}

// Where anomalies of a class occur for identification corpora: broad, so
// detection is exercised across the whole task.
inline std::vector<std::string> identification_nodes(const std::string& cls) {
  if (cls == "HC") return {"n1", "n2a", "n2b", "n3", "n4"};
  if (cls == "TC") return {"n2a", "n4"};
  if (cls == "OS") return {"n2b", "n3"};
  if (cls == "NO") return {"n2a"};
  if (cls == "WC") return {"n3"};
  return {"n3"};
}

// Canonical context per class for classification corpora; one context per
// class keeps every class model dense within the truncation level.
inline std::vector<std::string> classification_nodes(const std::string& cls) {
  if (cls == "HC") return {"n3"};
  if (cls == "TC") return {"n2a"};
  if (cls == "OS") return {"n3"};
  if (cls == "NO") return {"n2a"};
  if (cls == "WC") return {"n3"};
  return {"n3"};
}

// A labeled injected trial: the nominal stream of `node` perturbed by one
// injector, with the injection onset as the ground-truth event time.
struct LabeledTrial {
  Trial trial;
  std::string cls;  // empty for nominal trials
  std::string node;
  double onset = 0.0;
};

inline LabeledTrial make_injected_trial(const sim::KittingWorld& world, const std::string& cls,
                                        int index, uint64_t seed,
                                        const std::vector<std::string>& nodes) {
  Rng rng(derive_seed(seed, sim::fnv1a(cls), index));
  const std::string node = nodes[index % nodes.size()];
  const sim::SkillDef& sk = world.skill(node);

  sim::AnomalyInjector inj;
  inj.cls = cls;
  inj.node_id = node;
  inj.magnitude = default_magnitude(cls) * (0.8 + 0.5 * rng.uniform01());
  const long n = world.nominal_ticks(node);
  const double duration = n * sim::kTickDt;
  if (cls == "NO") {
    inj.onset = sk.grasp_frac * duration;
  } else if (cls == "OS" && sk.grasp_frac > 0) {
    inj.onset = rng.uniform(sk.grasp_frac * duration + 0.3, duration - 0.4);
  } else {
    inj.onset = rng.uniform(0.3, std::max(0.35, 0.6 * duration));
  }

  LabeledTrial out;
  out.cls = cls;
  out.node = node;
  out.onset = inj.onset;
  const Trial nominal = world.generate_nominal(node, derive_seed(seed, sim::fnv1a(cls + node), index));
  out.trial = world.inject(nominal, inj, derive_seed(seed, index));
  return out;
}

struct TrainedSystem {
  graph::TaskGraph graph;
  sim::ModelBundle models;
};

// Detection pass over one featurized trial; returns flag times.
inline std::vector<double> detect_flags(const sim::ModelBundle& models, const std::string& node,
                                        const FeatureSeries& feats) {
  const Mat scaled = apply_scaling(models.scalings.at(node), feats.f);
  introspect::AnomalyDetector det(models.id_models.at(node), node);
  std::vector<double> flags;
  for (size_t i = 0; i < feats.size(); ++i) {
    const auto f = det.step(feats.t[i], scaled.col(static_cast<long>(i)));
    if (f) flags.push_back(f->t);
  }
  return flags;
}

// Builds one labeled analysis window by running detection on an injected
// trial and cutting the configured span around the first flag.
inline std::optional<introspect::LabeledWindow> make_labeled_window(
    const sim::KittingWorld& world, const sim::ModelBundle& models, const std::string& cls,
    int index, uint64_t seed, double pre, double post) {
  const LabeledTrial lt = make_injected_trial(world, cls, index, seed, classification_nodes(cls));
  const FeatureSeries feats = extract_features(lt.trial, kDefaultStdWindowSec);
  const auto flags = detect_flags(models, lt.node, feats);
  if (flags.empty()) return std::nullopt;

  introspect::LabeledWindow w;
  w.cls = cls;
  w.flag_t = flags.front();
  FeatureSeries scaled = apply_scaling(models.classifier_scaling, feats);
  // Keep only the surrounding span so stored windows stay small.
  std::vector<long> keep;
  for (size_t i = 0; i < scaled.size(); ++i)
    if (scaled.t[i] >= w.flag_t - pre - 1e-9 && scaled.t[i] <= w.flag_t + post + 1e-9)
      keep.push_back(static_cast<long>(i));
  w.series.t.resize(keep.size());
  w.series.f.resize(kFeatureDim, static_cast<long>(keep.size()));
  for (size_t i = 0; i < keep.size(); ++i) {
    w.series.t[i] = scaled.t[keep[i]];
    w.series.f.col(static_cast<long>(i)) = scaled.f.col(keep[i]);
  }
  return w;
}

inline std::vector<introspect::LabeledWindow> build_window_corpus(
    const sim::KittingWorld& world, const sim::ModelBundle& models,
    const std::vector<std::pair<std::string, int>>& class_counts, uint64_t seed, double pre,
    double post) {
  std::vector<introspect::LabeledWindow> windows;
  for (const auto& [cls, count] : class_counts) {
    int made = 0;
    for (int i = 0; made < count && i < 4 * count; ++i) {
      auto w = make_labeled_window(world, models, cls, i, seed, pre, post);
      if (w) {
        windows.push_back(std::move(*w));
        ++made;
      }
    }
  }
  return windows;
}

inline introspect::ClassifierModel train_classifier(
    const std::vector<introspect::LabeledWindow>& windows, const std::vector<std::string>& labels,
    const hmm::Hyperparams& hyper, int k_splits, double pre, double post, uint64_t seed) {
  introspect::ClassifierModel clf;
  clf.labels = labels;
  clf.pre_window = pre;
  clf.post_window = post;
  for (const auto& label : labels) {
    std::vector<Mat> seqs;
    for (const auto& w : windows)
      if (w.cls == label) {
        Mat m = introspect::clip_window(w, pre, post);
        if (m.cols() >= 2) seqs.push_back(std::move(m));
      }
    if (seqs.empty()) throw InvalidInput("no training windows for class " + label);
    hmm::HmmModel model;
    if (static_cast<int>(seqs.size()) >= k_splits && k_splits >= 2) {
      model = hmm::select_model_kfold(seqs, k_splits, hyper, hmm::AllocKind::StickyHdp,
                                      hmm::ObsKind::Var1, derive_seed(seed, sim::fnv1a(label)));
    } else {
      model = hmm::fit(seqs, hyper, hmm::AllocKind::StickyHdp, hmm::ObsKind::Var1,
                       derive_seed(seed, sim::fnv1a(label)));
    }
    clf.models.push_back(std::move(model));
  }
  return clf;
}

inline TrainedSystem train_system(const sim::KittingWorld& world, const TrainConfig& cfg) {
  TrainedSystem sys;
  sys.graph = world.bootstrap_graph();
  sys.models.hyper = cfg.hyper;
  sys.models.n_nominal_trials = cfg.n_nominal;
  sys.models.n_calibration = cfg.n_calibration;

  const int n_draws = std::max(cfg.n_nominal, cfg.n_calibration);
  std::vector<Mat> pooled;
  std::map<std::string, std::vector<Mat>> per_node;
  for (const auto& sk : world.skills()) {
    for (int i = 0; i < n_draws; ++i) {
      const Trial t =
          world.generate_nominal(sk.node_id, derive_seed(cfg.seed, sim::fnv1a(sk.node_id), i));
      Mat f = extract_features(t, kDefaultStdWindowSec).f;
      per_node[sk.node_id].push_back(f);
      if (i < cfg.n_nominal) pooled.push_back(std::move(f));
    }
  }

  sys.models.classifier_scaling = fit_scaling(pooled);
  for (const auto& sk : world.skills()) {
    const auto& feats = per_node[sk.node_id];
    // Models are fit on the training trials; thresholds are calibrated over
    // the wider nominal set so the gradient range covers its tails.
    std::vector<Mat> train_feats(feats.begin(), feats.begin() + cfg.n_nominal);
    const ScalingProfile profile = fit_scaling(train_feats);
    std::vector<Mat> scaled_train, scaled_calib;
    for (int i = 0; i < static_cast<int>(feats.size()); ++i) {
      Mat f = apply_scaling(profile, feats[i]);
      if (i < cfg.n_nominal) scaled_train.push_back(f);
      if (i < cfg.n_calibration || i < cfg.n_nominal) scaled_calib.push_back(std::move(f));
    }
    const hmm::HmmModel model = hmm::fit(scaled_train, cfg.hyper, hmm::AllocKind::StickyHdp,
                                         hmm::ObsKind::Var1, derive_seed(cfg.seed, sim::fnv1a(sk.node_id)));
    sys.models.scalings[sk.node_id] = profile;
    sys.models.id_models[sk.node_id] = introspect::calibrate(model, scaled_calib, cfg.debounce);
  }

  std::vector<std::string> labels;
  for (const auto& [cls, _] : cfg.class_counts) labels.push_back(cls);
  const auto windows = build_window_corpus(world, sys.models, cfg.class_counts,
                                           derive_seed(cfg.seed, 0x77), cfg.pre_window, cfg.post_window);
  sys.models.classifier = train_classifier(windows, labels, cfg.hyper, cfg.k_splits,
                                           cfg.pre_window, cfg.post_window,
                                           derive_seed(cfg.seed, 0x78));
  return sys;
}

// ---------------------------------------------------------------------------
// Run directories mirror the recorded-dataset layout: one directory per
// episode with the raw record, line-by-line anomaly labels, and the
// timestamped anomaly signal.

inline std::filesystem::path write_run_dir(const std::filesystem::path& out_root,
                                           const std::string& stamp,
                                           const sim::ExecutionTrace& trace) {
  namespace fs = std::filesystem;
  const fs::path dir = out_root / ("experiment_at_" + stamp);
  fs::create_directories(dir);

  write_trial_csv(trace.record, (dir / "record.csv").string());

  std::ofstream labels(dir / "anomaly_labels.txt");
  std::ofstream signal(dir / "anomaly_signal.txt");
  for (const auto& f : trace.flags) {
    if (f.action == "ignored") continue;
    labels << f.label_cls << "\n";
    signal << fmt_double(f.t) << "\n";
  }

  std::ofstream tr(dir / "trace.csv");
  tr << "t,node,gradient,flagged";
  for (const auto& n : feature_column_names()) tr << "," << n;
  tr << "\n";
  for (const auto& s : trace.steps) {
    tr << fmt_double(s.t) << "," << s.node << "," << fmt_double(s.gradient) << ","
       << (s.flagged ? 1 : 0);
    for (int j = 0; j < kFeatureDim; ++j) tr << "," << fmt_double(s.feature[j]);
    tr << "\n";
  }

  nlohmann::ordered_json j;
  j["scenario"] = trace.scenario_name;
  j["seed"] = trace.seed;
  j["modality"] = trace.modality == sim::Modality::Perfect ? "perfect" : "imperfect";
  j["outcome"] = trace.success() ? "success" : "failure";
  j["failure_reason"] = trace.failure_reason;
  j["objects_placed"] = trace.objects_placed;
  j["steps"] = trace.steps.size();
  j["reenactments"] = trace.n_reenactments;
  j["adaptations"] = trace.n_adaptations;
  j["misclassifications"] = trace.n_misclassifications;
  nlohmann::ordered_json flags = nlohmann::ordered_json::array();
  for (const auto& f : trace.flags) {
    flags.push_back({{"t", f.t},
                     {"node", f.node},
                     {"gradient", f.gradient},
                     {"truth", f.truth_cls},
                     {"label", f.label_cls},
                     {"action", f.action}});
  }
  j["flags"] = flags;
  std::ofstream(dir / "summary.json") << j.dump(2) << "\n";
  return dir;
}

inline void write_confusion_csv(const ConfusionMatrix& cm, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "true\\pred";
  for (const auto& l : cm.labels) os << "," << l;
  os << "\n";
  for (int i = 0; i < cm.counts.rows(); ++i) {
    os << cm.labels[i];
    for (int j = 0; j < cm.counts.cols(); ++j) os << "," << cm.counts(i, j);
    os << "\n";
  }
}

inline void write_reactivity_csv(const Mat& grid, const std::vector<double>& pre_grid,
                                 const std::vector<double>& post_grid, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "pre\\post";
  for (double p : post_grid) os << "," << fmt_double(p);
  os << "\n";
  for (size_t i = 0; i < pre_grid.size(); ++i) {
    os << fmt_double(pre_grid[i]);
    for (size_t j = 0; j < post_grid.size(); ++j)
      os << "," << fmt_double(grid(static_cast<long>(i), static_cast<long>(j)));
    os << "\n";
  }
}

inline void write_success_csv(const SuccessTable& table, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "node,class,modality,successes,total,rate\n";
  for (const auto& [key, cell] : table) {
    os << std::get<0>(key) << "," << std::get<1>(key) << "," << std::get<2>(key) << ","
       << cell.successes << "," << cell.total << "," << fmt_double(cell.rate()) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Model library directories: one text record per artifact, deterministic
// serialization order throughout.

inline void save_id_model(const introspect::IdentificationModel& id, const std::string& path,
                          const std::string& hmm_file) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "kitrec-idmodel v1\n";
  os << "model " << hmm_file << "\n";
  os << "grad_min " << fmt_double(id.grad_min) << "\n";
  os << "grad_max " << fmt_double(id.grad_max) << "\n";
  os << "debounce " << fmt_double(id.debounce) << "\n";
}

inline introspect::IdentificationModel load_id_model(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string tag, version, key, hmm_file;
  is >> tag >> version;
  if (tag != "kitrec-idmodel" || version != "v1") throw IoError("bad idmodel record in " + path.string());
  introspect::IdentificationModel id;
  is >> key >> hmm_file;
  is >> key >> id.grad_min;
  is >> key >> id.grad_max;
  is >> key >> id.debounce;
  if (!is) throw IoError("truncated idmodel record in " + path.string());
  id.grad_range = id.grad_max - id.grad_min;
  id.model = hmm::load_model((path.parent_path() / hmm_file).string());
  return id;
}

inline void save_bundle(const sim::ModelBundle& models, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "classifier");
  save_scaling(models.classifier_scaling, (dir / "scaling_classifier.txt").string());
  for (const auto& [node, id] : models.id_models) {
    hmm::save_model(id.model, (dir / ("hmm_" + node + ".txt")).string());
    save_scaling(models.scalings.at(node), (dir / ("scaling_" + node + ".txt")).string());
    save_id_model(id, (dir / ("idmodel_" + node + ".txt")).string(), "hmm_" + node + ".txt");
  }
  std::ofstream meta(dir / "classifier" / "labels.txt");
  meta << "kitrec-classifier v1\n";
  meta << "pre " << fmt_double(models.classifier.pre_window) << " post "
       << fmt_double(models.classifier.post_window) << "\n";
  for (size_t i = 0; i < models.classifier.labels.size(); ++i) {
    const std::string file = "class_" + models.classifier.labels[i] + ".txt";
    meta << models.classifier.labels[i] << " " << file << "\n";
    hmm::save_model(models.classifier.models[i], (dir / "classifier" / file).string());
  }
}

inline sim::ModelBundle load_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  sim::ModelBundle models;
  models.classifier_scaling = load_scaling((dir / "scaling_classifier.txt").string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("idmodel_", 0) == 0) {
      const std::string node = name.substr(8, name.size() - 12);
      models.id_models[node] = load_id_model(entry.path());
      models.scalings[node] = load_scaling((dir / ("scaling_" + node + ".txt")).string());
    }
  }
  std::ifstream meta(dir / "classifier" / "labels.txt");
  if (!meta) throw IoError("missing classifier metadata in " + dir.string());
  std::string tag, version, key;
  meta >> tag >> version;
  if (tag != "kitrec-classifier") throw IoError("bad classifier metadata in " + dir.string());
  meta >> key >> models.classifier.pre_window >> key >> models.classifier.post_window;
  std::string label, file;
  while (meta >> label >> file) {
    models.classifier.labels.push_back(label);
    models.classifier.models.push_back(hmm::load_model((dir / "classifier" / file).string()));
  }
  if (!models.id_models.empty()) models.hyper = models.id_models.begin()->second.model.hyper;
  return models;
}

// Identification summary with the headline reference targets carried as
// annotations (never asserted).
inline nlohmann::ordered_json identification_report(const IdentificationCounts& c) {
  nlohmann::ordered_json j;
  j["tp"] = c.tp;
  j["fp"] = c.fp;
  j["fn"] = c.fn;
  j["tn"] = c.tn;
  j["accuracy"] = c.accuracy();
  j["precision"] = c.precision();
  j["recall"] = c.recall();
  j["reference_targets"] = {{"accuracy", 0.9309}, {"precision", 0.9409}, {"recall", 0.9798}};
  return j;
}

}  // namespace kitrec::harness
