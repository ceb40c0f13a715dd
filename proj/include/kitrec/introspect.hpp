#pragma once

#include "kitrec/hmm.hpp"
#include "kitrec/signals.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace kitrec::introspect {

struct IdentificationModel {
  hmm::HmmModel model;
  double grad_min = 0.0;
  double grad_max = 0.0;
  double grad_range = 0.0;
  double debounce = 1.0;

  double threshold() const { return grad_min - 0.5 * grad_range; }
};

struct AnomalyFlag {
  double t = 0.0;
  std::string node_id;
  double gradient_at_trigger = 0.0;
};

struct AnomalyLabel {
  std::string cls;
  std::vector<std::pair<std::string, double>> log_likelihoods;
};

// Calibrates gradient thresholds from nominal executions: the trigger level
// sits half a range below the lowest gradient ever seen in training.
inline IdentificationModel calibrate(const hmm::HmmModel& model, const std::vector<Mat>& nominal_trials,
                                     double debounce = 1.0) {
  if (nominal_trials.empty()) throw InvalidInput("calibrate: no nominal trials");
  IdentificationModel id;
  id.model = model;
  id.debounce = debounce;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const Mat& trial : nominal_trials) {
    for (double g : hmm::forward_gradients(model, trial)) {
      lo = std::min(lo, g);
      hi = std::max(hi, g);
    }
  }
  id.grad_min = lo;
  id.grad_max = hi;
  id.grad_range = hi - lo;
  return id;
}

// Streaming detector over one node execution. Triggers when the forward
// gradient crosses the calibrated threshold; repeat triggers within the
// debounce window are suppressed.
class AnomalyDetector {
 public:
  AnomalyDetector(const IdentificationModel& id, std::string node_id)
      : id_(&id), node_id_(std::move(node_id)), filter_(id.model) {}

  std::optional<AnomalyFlag> step(double t, const Vec& scaled_feature) {
    const double grad = filter_.push(scaled_feature);
    last_gradient_ = grad;
    if (grad < id_->threshold()) {
      if (!last_flag_t_ || t - *last_flag_t_ >= id_->debounce) {
        last_flag_t_ = t;
        return AnomalyFlag{t, node_id_, grad};
      }
    }
    return std::nullopt;
  }

  double last_gradient() const { return last_gradient_; }
  double cumulative_log_likelihood() const { return filter_.cumulative(); }

  // New execution of the same node; the debounce clock is preserved.
  void restart(std::optional<double> carry_last_flag = std::nullopt) {
    filter_ = hmm::ForwardFilter(id_->model);
    if (carry_last_flag) last_flag_t_ = carry_last_flag;
  }

 private:
  const IdentificationModel* id_;
  std::string node_id_;
  hmm::ForwardFilter filter_;
  std::optional<double> last_flag_t_;
  double last_gradient_ = 0.0;
};

struct ClassifierModel {
  std::vector<std::string> labels;
  std::vector<hmm::HmmModel> models;
  double pre_window = 2.0;
  double post_window = 2.0;
};

// Argmax of the cumulative log-likelihood over the class bank; ties resolve
// to the lowest label index.
inline AnomalyLabel classify(const ClassifierModel& clf, const Mat& window) {
  if (clf.labels.empty() || clf.labels.size() != clf.models.size())
    throw InvalidInput("classify: malformed classifier bank");
  if (window.cols() < 2) throw InvalidInput("classify: window shorter than 2 samples");
  AnomalyLabel out;
  double best = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < clf.models.size(); ++i) {
    const double ll = hmm::log_likelihood(clf.models[i], window);
    out.log_likelihoods.emplace_back(clf.labels[i], ll);
    if (ll > best) {
      best = ll;
      out.cls = clf.labels[i];
    }
  }
  return out;
}

// A captured analysis window with its trigger offset, as used for training
// and evaluating classifiers.
struct LabeledWindow {
  std::string cls;
  FeatureSeries series;  // scaled features
  double flag_t = 0.0;   // trigger time within the series clock
};

inline Mat clip_window(const LabeledWindow& w, double pre, double post) {
  std::vector<long> idx;
  for (size_t i = 0; i < w.series.size(); ++i)
    if (w.series.t[i] >= w.flag_t - pre - 1e-12 && w.series.t[i] <= w.flag_t + post + 1e-12)
      idx.push_back(static_cast<long>(i));
  Mat out(w.series.f.rows(), static_cast<long>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) out.col(static_cast<long>(i)) = w.series.f.col(idx[i]);
  return out;
}

using ClassifierTrainer =
    std::function<ClassifierModel(const std::vector<LabeledWindow>&, double pre, double post)>;

// Retrains and rescores the classifier over a grid of pre/post window sizes;
// each cell reports the mean per-class true-positive rate.
inline Mat reactivity_sweep(const ClassifierTrainer& trainer, const std::vector<LabeledWindow>& train,
                            const std::vector<LabeledWindow>& eval, const std::vector<double>& pre_grid,
                            const std::vector<double>& post_grid) {
  if (pre_grid.empty() || post_grid.empty()) throw InvalidInput("reactivity_sweep: empty grid");
  Mat acc(static_cast<long>(pre_grid.size()), static_cast<long>(post_grid.size()));
  for (size_t pi = 0; pi < pre_grid.size(); ++pi) {
    for (size_t qi = 0; qi < post_grid.size(); ++qi) {
      const double pre = pre_grid[pi];
      const double post = post_grid[qi];
      const ClassifierModel clf = trainer(train, pre, post);
      std::vector<double> correct(clf.labels.size(), 0.0), total(clf.labels.size(), 0.0);
      for (const auto& w : eval) {
        const Mat window = clip_window(w, pre, post);
        if (window.cols() < 2) continue;
        const auto label = classify(clf, window);
        for (size_t c = 0; c < clf.labels.size(); ++c) {
          if (clf.labels[c] == w.cls) {
            total[c] += 1.0;
            if (label.cls == w.cls) correct[c] += 1.0;
          }
        }
      }
      double mean_tpr = 0.0;
      int classes = 0;
      for (size_t c = 0; c < clf.labels.size(); ++c) {
        if (total[c] > 0) {
          mean_tpr += correct[c] / total[c];
          ++classes;
        }
      }
      acc(static_cast<long>(pi), static_cast<long>(qi)) = classes ? mean_tpr / classes : 0.0;
    }
  }
  return acc;
}

}  // namespace kitrec::introspect
