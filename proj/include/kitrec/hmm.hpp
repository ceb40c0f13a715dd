#pragma once

#include "kitrec/common.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace kitrec::hmm {

enum class AllocKind { Parametric, StickyHdp };
enum class ObsKind { Gaussian, Var1 };

inline std::string to_string(AllocKind a) { return a == AllocKind::Parametric ? "parametric" : "sticky_hdp"; }
inline std::string to_string(ObsKind o) { return o == ObsKind::Gaussian ? "gaussian" : "var1"; }

struct Hyperparams {
  double a = 0.5;       // Gamma shape for the concentration prior
  double b = 5.0;       // Gamma rate for the concentration prior
  double c = 1.0;       // Beta prior on the self-transition fraction
  double d = 10.0;
  double gamma = 5.0;   // top-level stick-breaking concentration
  double kappa = 50.0;  // sticky self-transition bias
  double nu = 0.0;      // IW degrees of freedom; 0 means dim+2
  Mat Delta;            // IW scale matrix
  Mat M;                // MN mean matrix (VAR)
  Mat V;                // MN column covariance (VAR)
  double s_F = 1.0;
  double mean_prior_scale = 1.0;  // NIW precision scale (Gaussian)
  int K_trunc = 10;
  int max_iter = 1000;
  int n_restarts = 1;
  double tol = 1e-6;
  bool merge_moves = true;
  bool delete_moves = true;

  double concentration() const { return a / b; }  // prior mean of alpha
};

struct ObsParams {
  ObsKind kind = ObsKind::Var1;
  Vec mu;      // Gaussian mean
  Mat A;       // VAR regression matrix
  Mat Sigma;   // noise / emission covariance
};

struct HmmModel {
  int K = 0;
  AllocKind alloc = AllocKind::StickyHdp;
  ObsKind obs_kind = ObsKind::Var1;
  Vec pi0;
  Mat trans;
  std::vector<ObsParams> obs;
  Hyperparams hyper;
  std::vector<double> elbo_trace;

  int dim() const { return obs.empty() ? 0 : static_cast<int>(obs.front().Sigma.rows()); }
};

// ---------------------------------------------------------------------------
// Empirical-Bayes prior setting: nu = d + 2 gives the IW a valid mean, and
// Delta is backed out of E[Sigma] = s_F * pooled covariance via the IW first
// moment nu*Delta/(nu - d - 1).

inline std::pair<double, Mat> empirical_bayes_init(const std::vector<Mat>& trials, double s_F) {
  if (trials.empty()) throw InvalidInput("empirical_bayes_init: no trials");
  const int d = static_cast<int>(trials.front().rows());
  long total = 0;
  Vec mean = Vec::Zero(d);
  for (const Mat& x : trials) {
    if (x.rows() != d) throw InvalidInput("empirical_bayes_init: inconsistent dimensions");
    mean += x.rowwise().sum();
    total += x.cols();
  }
  if (total <= d) throw InvalidInput("empirical_bayes_init: need more samples than dimensions");
  mean /= static_cast<double>(total);

  Mat scatter = Mat::Zero(d, d);
  for (const Mat& x : trials) {
    const Mat centered = x.colwise() - mean;
    scatter += centered * centered.transpose();
  }
  scatter /= static_cast<double>(total);

  Eigen::SelfAdjointEigenSolver<Mat> es(scatter);
  if (es.eigenvalues().minCoeff() < 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff())) {
    std::cerr << "empirical_bayes_init: rank-deficient scatter, regularizing by 1e-6*I\n";
    scatter += 1e-6 * Mat::Identity(d, d);
  }

  const double nu = d + 2.0;
  const Mat expected_sigma = s_F * scatter;
  const Mat Delta = expected_sigma * (nu - d - 1.0) / nu;
  return {nu, Delta};
}

inline Hyperparams default_hyperparams(const std::vector<Mat>& trials, Hyperparams hp = {}) {
  const int d = static_cast<int>(trials.front().rows());
  if (hp.Delta.size() == 0) {
    auto [nu, Delta] = empirical_bayes_init(trials, hp.s_F);
    hp.nu = nu;
    hp.Delta = Delta;
  }
  if (hp.nu == 0.0) hp.nu = d + 2.0;
  if (hp.M.size() == 0) hp.M = Mat::Zero(d, d);
  if (hp.V.size() == 0) hp.V = Mat::Identity(d, d);
  return hp;
}

// ---------------------------------------------------------------------------
// Scoring with expected (point) parameters.

namespace detail {

struct StateScorer {
  Vec mu;
  Mat A;
  Eigen::LLT<Mat> chol;
  double logdet = 0.0;
  int d = 0;

  static StateScorer make(const ObsParams& p) {
    StateScorer s;
    s.d = static_cast<int>(p.Sigma.rows());
    s.mu = p.mu;
    s.A = p.A;
    s.chol.compute(p.Sigma);
    if (s.chol.info() != Eigen::Success) throw NumericalError("emission covariance not SPD");
    const Mat L = s.chol.matrixL();
    for (int i = 0; i < s.d; ++i) s.logdet += 2.0 * std::log(L(i, i));
    return s;
  }

  double log_gaussian(const Vec& resid) const {
    const Vec z = chol.solve(resid);
    return -0.5 * (d * std::log(2.0 * M_PI) + logdet + resid.dot(z));
  }
};

inline Mat safe_log(const Mat& m) {
  return m.array().max(1e-300).log().matrix();
}
inline Vec safe_log(const Vec& v) {
  return v.array().max(1e-300).log().matrix();
}

}  // namespace detail

// Log emission density under the expected parameters. For VAR the first
// observation contributes the noise density at zero innovation.
class EmissionScorer {
 public:
  explicit EmissionScorer(const HmmModel& model) : kind_(model.obs_kind) {
    for (const auto& p : model.obs) states_.push_back(detail::StateScorer::make(p));
  }

  int num_states() const { return static_cast<int>(states_.size()); }

  double operator()(int k, const Vec& x, const Vec* x_prev) const {
    const auto& s = states_[k];
    if (kind_ == ObsKind::Gaussian) return s.log_gaussian(x - s.mu);
    if (x_prev == nullptr) return -0.5 * (s.d * std::log(2.0 * M_PI) + s.logdet);
    return s.log_gaussian(x - s.A * (*x_prev));
  }

 private:
  ObsKind kind_;
  std::vector<detail::StateScorer> states_;
};

// Incremental log-space forward filter; push() returns the forward gradient
// (the per-step increment of the cumulative log-likelihood).
class ForwardFilter {
 public:
  explicit ForwardFilter(const HmmModel& model)
      : scorer_(model),
        log_pi0_(detail::safe_log(model.pi0)),
        log_trans_(detail::safe_log(model.trans)),
        dim_(model.dim()) {}

  double push(const Vec& x) {
    if (x.size() != dim_) throw InvalidInput("observation dimension mismatch");
    const int K = scorer_.num_states();
    Vec la(K);
    if (t_ == 0) {
      for (int k = 0; k < K; ++k) la[k] = log_pi0_[k] + scorer_(k, x, nullptr);
    } else {
      for (int k = 0; k < K; ++k) {
        const double lb = scorer_(k, x, &x_prev_);
        la[k] = lb + log_sum_exp(log_alpha_ + log_trans_.col(k));
      }
    }
    const double L = log_sum_exp(la);
    if (!std::isfinite(L)) throw NumericalError("forward filter produced non-finite likelihood");
    const double grad = (t_ == 0) ? L : L - cumulative_;
    log_alpha_ = la;
    cumulative_ = L;
    x_prev_ = x;
    ++t_;
    return grad;
  }

  double cumulative() const { return cumulative_; }
  long steps() const { return t_; }

  void reset() {
    t_ = 0;
    cumulative_ = 0.0;
  }

 private:
  EmissionScorer scorer_;
  Vec log_pi0_;
  Mat log_trans_;
  int dim_;
  Vec log_alpha_;
  Vec x_prev_;
  double cumulative_ = 0.0;
  long t_ = 0;
};

inline double log_likelihood(const HmmModel& model, const Mat& seq,
                             std::optional<long> upto = std::nullopt) {
  if (seq.rows() != model.dim()) throw InvalidInput("sequence dimension mismatch");
  const long T = upto.value_or(seq.cols());
  if (T < 1 || T > seq.cols()) throw InvalidInput("upto out of range");
  ForwardFilter filter(model);
  for (long t = 0; t < T; ++t) filter.push(seq.col(t));
  return filter.cumulative();
}

inline std::vector<double> forward_gradients(const HmmModel& model, const Mat& seq) {
  if (seq.rows() != model.dim()) throw InvalidInput("sequence dimension mismatch");
  ForwardFilter filter(model);
  std::vector<double> grads;
  grads.reserve(seq.cols());
  for (long t = 0; t < seq.cols(); ++t) grads.push_back(filter.push(seq.col(t)));
  return grads;
}

inline std::vector<int> viterbi(const HmmModel& model, const Mat& seq) {
  if (seq.rows() != model.dim()) throw InvalidInput("sequence dimension mismatch");
  const int K = model.K;
  const long T = seq.cols();
  if (T == 0) return {};
  EmissionScorer scorer(model);
  const Vec lpi0 = detail::safe_log(model.pi0);
  const Mat ltrans = detail::safe_log(model.trans);

  Mat delta(K, T);
  Eigen::MatrixXi back(K, T);
  for (int k = 0; k < K; ++k) delta(k, 0) = lpi0[k] + scorer(k, seq.col(0), nullptr);
  for (long t = 1; t < T; ++t) {
    const Vec xp = seq.col(t - 1);
    for (int k = 0; k < K; ++k) {
      int arg = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < K; ++j) {
        const double v = delta(j, t - 1) + ltrans(j, k);
        if (v > best) {
          best = v;
          arg = j;
        }
      }
      delta(k, t) = best + scorer(k, seq.col(t), &xp);
      back(k, t) = arg;
    }
  }
  std::vector<int> path(T);
  int k = 0;
  delta.col(T - 1).maxCoeff(&k);
  path[T - 1] = k;
  for (long t = T - 1; t > 0; --t) path[t - 1] = back(path[t], t);
  return path;
}

// ---------------------------------------------------------------------------
// Truncated mean-field variational coordinate ascent with merge/delete moves.

namespace detail {

struct NiwPost {
  Vec m;
  double lambda = 1.0;
  double nu = 0.0;
  Mat Delta;
};

struct MniwPost {
  Mat M;
  Mat V;  // column covariance
  double nu = 0.0;
  Mat Delta;
};

struct Prior {
  AllocKind alloc;
  ObsKind obs;
  int K = 0;
  int d = 0;
  Vec beta;
  Mat trans_prior;  // Dirichlet parameters per row
  Vec pi0_prior;
  double nu0 = 0.0;
  Mat Delta0, Delta0_inv;
  double logdet_Delta0 = 0.0;
  Mat M0, V0, V0_inv;
  double logdet_V0 = 0.0;
  Vec m0;
  double lambda0 = 1.0;
};

inline double spd_logdet(const Mat& m) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("matrix not SPD in logdet");
  const Mat L = llt.matrixL();
  double s = 0.0;
  for (int i = 0; i < m.rows(); ++i) s += 2.0 * std::log(L(i, i));
  return s;
}

// Expected weights of a GEM stick-breaking prior truncated at K.
inline Vec truncated_gem_mean(double gamma, int K) {
  Vec beta(K);
  const double v = 1.0 / (1.0 + gamma);
  double remain = 1.0;
  for (int k = 0; k < K - 1; ++k) {
    beta[k] = v * remain;
    remain *= (1.0 - v);
  }
  beta[K - 1] = remain;
  return beta;
}

inline Prior make_prior(int d, const Hyperparams& hp, AllocKind alloc, ObsKind obs) {
  Prior p;
  p.alloc = alloc;
  p.obs = obs;
  p.K = hp.K_trunc;
  p.d = d;
  if (p.K < 1) throw InvalidInput("K_trunc must be >= 1");
  if (!(hp.nu > d + 1)) throw InvalidInput("nu must exceed dim + 1 for a valid IW mean");

  if (alloc == AllocKind::StickyHdp) {
    p.beta = truncated_gem_mean(hp.gamma, p.K);
    const double alpha = hp.concentration();
    p.trans_prior = (alpha * p.beta.transpose()).replicate(p.K, 1);
    p.trans_prior.diagonal().array() += hp.kappa;
    p.pi0_prior = alpha * p.beta;
  } else {
    p.beta = Vec::Constant(p.K, 1.0 / p.K);
    p.trans_prior = Mat::Constant(p.K, p.K, 1.0);
    p.pi0_prior = Vec::Constant(p.K, 1.0);
  }

  p.nu0 = hp.nu;
  p.Delta0 = hp.Delta;
  p.Delta0_inv = hp.Delta.llt().solve(Mat::Identity(d, d));
  p.logdet_Delta0 = spd_logdet(hp.Delta);
  p.M0 = hp.M;
  p.V0 = hp.V;
  p.V0_inv = hp.V.llt().solve(Mat::Identity(d, d));
  p.logdet_V0 = spd_logdet(hp.V);
  p.m0 = Vec::Zero(d);
  p.lambda0 = hp.mean_prior_scale;
  return p;
}

struct SuffStats {
  Vec pi0_counts;
  Mat trans_counts;
  std::vector<double> N;        // emission mass (t>=2 for VAR, all t for Gaussian)
  std::vector<double> N_first;  // VAR zero-innovation mass
  std::vector<Vec> sum_x;
  std::vector<Mat> sum_xx;
  std::vector<Mat> S_yy, S_xy;

  static SuffStats zeros(int K, int d) {
    SuffStats s;
    s.pi0_counts = Vec::Zero(K);
    s.trans_counts = Mat::Zero(K, K);
    s.N.assign(K, 0.0);
    s.N_first.assign(K, 0.0);
    s.sum_x.assign(K, Vec::Zero(d));
    s.sum_xx.assign(K, Mat::Zero(d, d));
    s.S_yy.assign(K, Mat::Zero(d, d));
    s.S_xy.assign(K, Mat::Zero(d, d));
    return s;
  }
};

struct Posterior {
  Mat trans_dir;
  Vec pi0_dir;
  std::vector<NiwPost> niw;
  std::vector<MniwPost> mniw;
  // caches for the local step
  Mat elog_trans;
  Vec elog_pi0;
  std::vector<Mat> Delta_inv;
  std::vector<double> elog_prec_det;  // E[log |Sigma^-1|]
};

inline void refresh_caches(const Prior& prior, Posterior& post) {
  const int K = prior.K;
  post.elog_trans.resize(K, K);
  for (int j = 0; j < K; ++j) {
    const double row_sum = post.trans_dir.row(j).sum();
    for (int k = 0; k < K; ++k) post.elog_trans(j, k) = digamma(post.trans_dir(j, k)) - digamma(row_sum);
  }
  post.elog_pi0.resize(K);
  const double pi0_sum = post.pi0_dir.sum();
  for (int k = 0; k < K; ++k) post.elog_pi0[k] = digamma(post.pi0_dir[k]) - digamma(pi0_sum);

  post.Delta_inv.assign(K, Mat());
  post.elog_prec_det.assign(K, 0.0);
  for (int k = 0; k < K; ++k) {
    const double nu_k = (prior.obs == ObsKind::Var1) ? post.mniw[k].nu : post.niw[k].nu;
    const Mat& Delta_k = (prior.obs == ObsKind::Var1) ? post.mniw[k].Delta : post.niw[k].Delta;
    post.Delta_inv[k] = Delta_k.llt().solve(Mat::Identity(prior.d, prior.d));
    post.elog_prec_det[k] =
        digamma_multivariate(0.5 * nu_k, prior.d) + prior.d * std::log(2.0) - spd_logdet(Delta_k);
  }
}

inline Posterior global_step(const Prior& prior, const SuffStats& stats) {
  const int K = prior.K;
  const int d = prior.d;
  Posterior post;
  post.trans_dir = prior.trans_prior + stats.trans_counts;
  post.pi0_dir = prior.pi0_prior + stats.pi0_counts;

  if (prior.obs == ObsKind::Var1) {
    post.mniw.resize(K);
    for (int k = 0; k < K; ++k) {
      auto& q = post.mniw[k];
      const Mat Vn_inv = prior.V0_inv + stats.S_yy[k];
      q.V = Vn_inv.llt().solve(Mat::Identity(d, d));
      q.V = 0.5 * (q.V + q.V.transpose()).eval();
      q.M = (prior.M0 * prior.V0_inv + stats.S_xy[k]) * q.V;
      q.nu = prior.nu0 + stats.N[k] + stats.N_first[k];
      Mat Delta = prior.Delta0 + stats.sum_xx[k] + prior.M0 * prior.V0_inv * prior.M0.transpose() -
                  q.M * Vn_inv * q.M.transpose();
      q.Delta = 0.5 * (Delta + Delta.transpose()).eval();
    }
  } else {
    post.niw.resize(K);
    for (int k = 0; k < K; ++k) {
      auto& q = post.niw[k];
      const double N = stats.N[k];
      q.lambda = prior.lambda0 + N;
      q.nu = prior.nu0 + N;
      if (N > 1e-12) {
        const Vec xbar = stats.sum_x[k] / N;
        const Mat S = stats.sum_xx[k] - N * xbar * xbar.transpose();
        q.m = (prior.lambda0 * prior.m0 + stats.sum_x[k]) / q.lambda;
        Mat Delta = prior.Delta0 + S +
                    (prior.lambda0 * N / q.lambda) * (xbar - prior.m0) * (xbar - prior.m0).transpose();
        q.Delta = 0.5 * (Delta + Delta.transpose()).eval();
      } else {
        q.m = prior.m0;
        q.Delta = prior.Delta0;
      }
    }
  }
  refresh_caches(prior, post);
  return post;
}

// Expected log emission densities for one sequence, K x T.
inline Mat expected_log_emissions(const Prior& prior, const Posterior& post, const Mat& seq) {
  const int K = prior.K;
  const long T = seq.cols();
  const int d = prior.d;
  Mat logb(K, T);
  const double c2pi = d * std::log(2.0 * M_PI);
  for (int k = 0; k < K; ++k) {
    const double base = 0.5 * post.elog_prec_det[k] - 0.5 * c2pi;
    if (prior.obs == ObsKind::Var1) {
      const auto& q = post.mniw[k];
      logb(k, 0) = base;
      for (long t = 1; t < T; ++t) {
        const Vec y = seq.col(t - 1);
        const Vec r = seq.col(t) - q.M * y;
        const double quad = q.nu * r.dot(post.Delta_inv[k] * r) + d * y.dot(q.V * y);
        logb(k, t) = base - 0.5 * quad;
      }
    } else {
      const auto& q = post.niw[k];
      for (long t = 0; t < T; ++t) {
        const Vec r = seq.col(t) - q.m;
        const double quad = d / q.lambda + q.nu * r.dot(post.Delta_inv[k] * r);
        logb(k, t) = base - 0.5 * quad;
      }
    }
  }
  return logb;
}

struct LocalResult {
  double logZ = 0.0;
  SuffStats stats;
  std::vector<Mat> gammas;
};

inline void accumulate_obs_stats(const Prior& prior, const Mat& seq, const Mat& gamma, SuffStats& stats) {
  const int K = prior.K;
  const long T = seq.cols();
  for (int k = 0; k < K; ++k) {
    if (prior.obs == ObsKind::Var1) {
      stats.N_first[k] += gamma(k, 0);
      for (long t = 1; t < T; ++t) {
        const double r = gamma(k, t);
        if (r < 1e-12) continue;
        const Vec x = seq.col(t);
        const Vec y = seq.col(t - 1);
        stats.N[k] += r;
        stats.sum_xx[k] += r * x * x.transpose();
        stats.S_yy[k] += r * y * y.transpose();
        stats.S_xy[k] += r * x * y.transpose();
      }
    } else {
      for (long t = 0; t < T; ++t) {
        const double r = gamma(k, t);
        if (r < 1e-12) continue;
        const Vec x = seq.col(t);
        stats.N[k] += r;
        stats.sum_x[k] += r * x;
        stats.sum_xx[k] += r * x * x.transpose();
      }
    }
  }
}

inline LocalResult local_step(const Prior& prior, const Posterior& post, const std::vector<Mat>& data) {
  const int K = prior.K;
  LocalResult res;
  res.stats = SuffStats::zeros(K, prior.d);
  for (const Mat& seq : data) {
    const long T = seq.cols();
    const Mat logb = expected_log_emissions(prior, post, seq);
    Mat la(K, T), lb(K, T);
    la.col(0) = post.elog_pi0 + logb.col(0);
    for (long t = 1; t < T; ++t)
      for (int k = 0; k < K; ++k)
        la(k, t) = logb(k, t) + log_sum_exp(la.col(t - 1) + post.elog_trans.col(k));
    lb.col(T - 1).setZero();
    for (long t = T - 2; t >= 0; --t)
      for (int j = 0; j < K; ++j)
        lb(j, t) = log_sum_exp(post.elog_trans.row(j).transpose() + logb.col(t + 1) + lb.col(t + 1));
    const double logZ = log_sum_exp(la.col(T - 1));
    if (!std::isfinite(logZ)) throw NumericalError("variational forward pass non-finite");
    res.logZ += logZ;

    Mat gamma = (la + lb).colwise() - Vec::Constant(K, logZ);
    gamma = gamma.array().exp().matrix();
    for (long t = 0; t < T; ++t) gamma.col(t) /= std::max(gamma.col(t).sum(), 1e-300);

    res.stats.pi0_counts += gamma.col(0);
    const Mat etrans = post.elog_trans.array().exp().matrix();
    for (long t = 1; t < T; ++t) {
      const Vec a = (la.col(t - 1).array() - la.col(t - 1).maxCoeff()).exp();
      const Vec bv = ((logb.col(t) + lb.col(t)).array() - (logb.col(t) + lb.col(t)).maxCoeff()).exp();
      Mat xi = a.asDiagonal() * etrans * bv.asDiagonal();
      res.stats.trans_counts += xi / std::max(xi.sum(), 1e-300);
    }
    accumulate_obs_stats(prior, seq, gamma, res.stats);
    res.gammas.push_back(std::move(gamma));
  }
  return res;
}

inline double kl_dirichlet(const Vec& u, const Vec& v) {
  const double u0 = u.sum();
  const double v0 = v.sum();
  double kl = std::lgamma(u0) - std::lgamma(v0);
  for (int i = 0; i < u.size(); ++i) {
    kl += std::lgamma(v[i]) - std::lgamma(u[i]);
    kl += (u[i] - v[i]) * (digamma(u[i]) - digamma(u0));
  }
  return kl;
}

inline double kl_inverse_wishart(double nu1, double logdet1, const Mat& Delta1_inv, double nu0,
                                 const Mat& Delta0, double logdet0, int d) {
  double kl = 0.5 * (nu1 - nu0) * digamma_multivariate(0.5 * nu1, d);
  kl += 0.5 * nu0 * (logdet1 - logdet0);
  kl += 0.5 * nu1 * ((Delta0 * Delta1_inv).trace() - d);
  kl += lgamma_multivariate(0.5 * nu0, d) - lgamma_multivariate(0.5 * nu1, d);
  return kl;
}

inline double kl_terms(const Prior& prior, const Posterior& post) {
  const int K = prior.K;
  const int d = prior.d;
  double kl = kl_dirichlet(post.pi0_dir, prior.pi0_prior);
  for (int j = 0; j < K; ++j)
    kl += kl_dirichlet(post.trans_dir.row(j).transpose(), prior.trans_prior.row(j).transpose());

  for (int k = 0; k < K; ++k) {
    if (prior.obs == ObsKind::Var1) {
      const auto& q = post.mniw[k];
      const double logdet_q = spd_logdet(q.Delta);
      kl += kl_inverse_wishart(q.nu, logdet_q, post.Delta_inv[k], prior.nu0, prior.Delta0,
                               prior.logdet_Delta0, d);
      const Mat dM = q.M - prior.M0;
      const double mn = 0.5 * (d * ((prior.V0_inv * q.V).trace() - d + prior.logdet_V0 - spd_logdet(q.V)) +
                               q.nu * (prior.V0_inv * dM.transpose() * post.Delta_inv[k] * dM).trace());
      kl += mn;
    } else {
      const auto& q = post.niw[k];
      const double logdet_q = spd_logdet(q.Delta);
      kl += kl_inverse_wishart(q.nu, logdet_q, post.Delta_inv[k], prior.nu0, prior.Delta0,
                               prior.logdet_Delta0, d);
      const Vec dm = q.m - prior.m0;
      kl += 0.5 * (d * (prior.lambda0 / q.lambda - 1.0 + std::log(q.lambda / prior.lambda0)) +
                   prior.lambda0 * q.nu * dm.dot(post.Delta_inv[k] * dm));
    }
  }
  return kl;
}

// Factorized statistics from responsibility matrices; used for
// initialization and for merge/delete move proposals.
inline SuffStats stats_from_gammas(const Prior& prior, const std::vector<Mat>& data,
                                   const std::vector<Mat>& gammas) {
  SuffStats stats = SuffStats::zeros(prior.K, prior.d);
  for (size_t n = 0; n < data.size(); ++n) {
    const Mat& gamma = gammas[n];
    stats.pi0_counts += gamma.col(0);
    for (long t = 1; t < gamma.cols(); ++t)
      stats.trans_counts += gamma.col(t - 1) * gamma.col(t).transpose();
    accumulate_obs_stats(prior, data[n], gamma, stats);
  }
  return stats;
}

inline std::vector<Mat> random_segment_gammas(const Prior& prior, const std::vector<Mat>& data, Rng& rng) {
  std::vector<Mat> gammas;
  const int K = prior.K;
  for (const Mat& seq : data) {
    const long T = seq.cols();
    Mat gamma = Mat::Constant(K, T, K > 1 ? 0.1 / (K - 1) : 1.0);
    const long nseg = std::min<long>(T, K);
    std::vector<long> cuts{0, T};
    for (long i = 0; i + 1 < nseg; ++i) cuts.push_back(1 + static_cast<long>(rng.below(T - 1)));
    std::sort(cuts.begin(), cuts.end());
    for (size_t i = 0; i + 1 < cuts.size(); ++i) {
      const int state = static_cast<int>(rng.below(K));
      for (long t = cuts[i]; t < cuts[i + 1]; ++t) gamma(state, t) = 0.9;
    }
    if (K > 1)
      for (long t = 0; t < T; ++t) gamma.col(t) /= gamma.col(t).sum();
    gammas.push_back(std::move(gamma));
  }
  return gammas;
}

struct FitState {
  Posterior post;
  LocalResult local;
  double elbo = -std::numeric_limits<double>::infinity();
  std::vector<double> trace;
};

// Coordinate ascent until the relative objective change drops below tol.
inline void run_cavi(const Prior& prior, const std::vector<Mat>& data, const Hyperparams& hp,
                     FitState& st, int max_iter) {
  double prev = st.elbo;
  for (int it = 0; it < max_iter; ++it) {
    st.local = local_step(prior, st.post, data);
    st.elbo = st.local.logZ - kl_terms(prior, st.post);
    if (!std::isfinite(st.elbo))
      throw NumericalError("variational objective non-finite at iteration " + std::to_string(it));
    st.trace.push_back(st.elbo);
    if (std::isfinite(prev) && std::abs(st.elbo - prev) <= hp.tol * std::abs(st.elbo)) return;
    prev = st.elbo;
    st.post = global_step(prior, st.local.stats);
  }
}

inline Vec state_usage(const LocalResult& local, int K) {
  Vec usage = Vec::Zero(K);
  for (const Mat& g : local.gammas) usage += g.rowwise().sum();
  return usage;
}

// Merge/delete proposals built in responsibility space and accepted only if
// the recomputed objective does not decrease.
inline bool try_moves(const Prior& prior, const std::vector<Mat>& data, const Hyperparams& hp,
                      FitState& st) {
  const int K = prior.K;
  if (K < 2) return false;
  const Vec usage = state_usage(st.local, K);
  const double total = usage.sum();

  struct Candidate {
    int i, j;  // j < 0 means delete state i
  };
  std::vector<Candidate> candidates;
  if (hp.delete_moves) {
    for (int k = 0; k < K; ++k)
      if (usage[k] > 1e-9 && usage[k] < std::max(2.0, 0.02 * total)) candidates.push_back({k, -1});
  }
  if (hp.merge_moves) {
    for (int i = 0; i < K; ++i)
      for (int j = i + 1; j < K; ++j)
        if (usage[i] > 1e-9 && usage[j] > 1e-9) candidates.push_back({i, j});
  }

  for (const auto& cand : candidates) {
    std::vector<Mat> gammas = st.local.gammas;
    for (Mat& g : gammas) {
      if (cand.j >= 0) {
        g.row(cand.i) += g.row(cand.j);
        g.row(cand.j).setZero();
      } else {
        g.row(cand.i).setZero();
        for (long t = 0; t < g.cols(); ++t) {
          const double s = g.col(t).sum();
          if (s > 1e-12)
            g.col(t) /= s;
          else
            g.col(t).setConstant(1.0 / K);
        }
      }
    }
    FitState trial;
    trial.post = global_step(prior, stats_from_gammas(prior, data, gammas));
    trial.local = local_step(prior, trial.post, data);
    trial.elbo = trial.local.logZ - kl_terms(prior, trial.post);
    if (trial.elbo >= st.elbo - 1e-9 * std::abs(st.elbo)) {
      trial.trace = st.trace;
      trial.trace.push_back(trial.elbo);
      st = std::move(trial);
      return true;
    }
  }
  return false;
}

inline FitState fit_single(const Prior& prior, const std::vector<Mat>& data, const Hyperparams& hp,
                           uint64_t seed) {
  Rng rng(seed);
  FitState st;
  st.post = global_step(prior, stats_from_gammas(prior, data, random_segment_gammas(prior, data, rng)));
  run_cavi(prior, data, hp, st, hp.max_iter);
  if (hp.merge_moves || hp.delete_moves) {
    for (int round = 0; round < 2 * prior.K; ++round) {
      if (!try_moves(prior, data, hp, st)) break;
      st.post = global_step(prior, st.local.stats);
      run_cavi(prior, data, hp, st, hp.max_iter);
    }
  }
  return st;
}

inline HmmModel extract_model(const Prior& prior, const Hyperparams& hp, const FitState& st,
                              AllocKind alloc, ObsKind obs) {
  const int K = prior.K;
  const Vec usage = state_usage(st.local, K);
  std::vector<int> kept;
  for (int k = 0; k < K; ++k)
    if (usage[k] > 1e-3) kept.push_back(k);
  if (kept.empty()) {
    int k = 0;
    usage.maxCoeff(&k);
    kept.push_back(k);
  }
  const int Ke = static_cast<int>(kept.size());

  HmmModel model;
  model.K = Ke;
  model.alloc = alloc;
  model.obs_kind = obs;
  model.hyper = hp;
  model.elbo_trace = st.trace;

  model.pi0.resize(Ke);
  for (int i = 0; i < Ke; ++i) model.pi0[i] = st.post.pi0_dir[kept[i]];
  model.pi0 /= model.pi0.sum();

  model.trans.resize(Ke, Ke);
  for (int i = 0; i < Ke; ++i) {
    for (int j = 0; j < Ke; ++j) model.trans(i, j) = st.post.trans_dir(kept[i], kept[j]);
    model.trans.row(i) /= model.trans.row(i).sum();
  }

  for (int i = 0; i < Ke; ++i) {
    ObsParams p;
    p.kind = obs;
    const int k = kept[i];
    if (obs == ObsKind::Var1) {
      const auto& q = st.post.mniw[k];
      p.A = q.M;
      p.Sigma = q.Delta / (q.nu - prior.d - 1.0);
    } else {
      const auto& q = st.post.niw[k];
      p.mu = q.m;
      p.A = Mat::Zero(prior.d, prior.d);
      p.Sigma = q.Delta / (q.nu - prior.d - 1.0);
    }
    p.Sigma = 0.5 * (p.Sigma + p.Sigma.transpose()).eval();
    model.obs.push_back(std::move(p));
  }
  return model;
}

}  // namespace detail

inline HmmModel fit(const std::vector<Mat>& trials, const Hyperparams& hyper_in, AllocKind alloc,
                    ObsKind obs, uint64_t seed) {
  if (trials.empty()) throw InvalidInput("fit: no trials");
  const int d = static_cast<int>(trials.front().rows());
  for (const Mat& t : trials) {
    if (t.rows() != d) throw InvalidInput("fit: inconsistent trial dimensions");
    if (t.cols() < 2) throw InvalidInput("fit: trial too short");
  }
  const Hyperparams hp = default_hyperparams(trials, hyper_in);
  const detail::Prior prior = detail::make_prior(d, hp, alloc, obs);

  detail::FitState best;
  int best_r = -1;
  for (int r = 0; r < std::max(1, hp.n_restarts); ++r) {
    detail::FitState st = detail::fit_single(prior, trials, hp, derive_seed(seed, r));
    if (best_r < 0 || st.elbo > best.elbo) {
      best = std::move(st);
      best_r = r;
    }
  }
  return detail::extract_model(prior, hp, best, alloc, obs);
}

// K-fold model selection: fit per fold, keep the model with the highest mean
// held-out cumulative log-likelihood; ties resolve to the lowest fold index.
inline HmmModel select_model_kfold(const std::vector<Mat>& trials, int k_splits,
                                   const Hyperparams& hyper, AllocKind alloc, ObsKind obs,
                                   uint64_t seed) {
  if (k_splits < 2) throw InvalidInput("select_model_kfold: k_splits must be >= 2");
  if (trials.size() < static_cast<size_t>(k_splits))
    throw InvalidInput("select_model_kfold: fewer trials than folds");

  std::vector<size_t> order(trials.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x4b464f4c));
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  HmmModel best;
  double best_score = -std::numeric_limits<double>::infinity();
  int best_fold = -1;
  for (int fold = 0; fold < k_splits; ++fold) {
    std::vector<Mat> train, test;
    for (size_t i = 0; i < order.size(); ++i) {
      if (static_cast<int>(i % k_splits) == fold)
        test.push_back(trials[order[i]]);
      else
        train.push_back(trials[order[i]]);
    }
    HmmModel model = fit(train, hyper, alloc, obs, derive_seed(seed, 1000 + fold));
    double score = 0.0;
    for (const Mat& t : test) score += log_likelihood(model, t);
    score /= static_cast<double>(test.size());
    if (best_fold < 0 || score > best_score) {
      best = std::move(model);
      best_score = score;
      best_fold = fold;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Versioned text records with deterministic field order.

inline void save_model(const HmmModel& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  const int d = m.dim();
  os << "kitrec-hmm v1\n";
  os << "alloc " << to_string(m.alloc) << "\n";
  os << "obs " << to_string(m.obs_kind) << "\n";
  os << "K " << m.K << "\n";
  os << "d " << d << "\n";
  os << "hyper";
  for (double v : {m.hyper.a, m.hyper.b, m.hyper.c, m.hyper.d, m.hyper.gamma, m.hyper.kappa, m.hyper.nu,
                   m.hyper.s_F, m.hyper.mean_prior_scale, m.hyper.tol})
    os << " " << fmt_double(v);
  os << " " << m.hyper.K_trunc << " " << m.hyper.max_iter << " " << m.hyper.n_restarts << "\n";
  auto write_mat = [&os](const std::string& name, const Mat& mat) {
    os << name;
    for (int i = 0; i < mat.rows(); ++i)
      for (int j = 0; j < mat.cols(); ++j) os << " " << fmt_double(mat(i, j));
    os << "\n";
  };
  write_mat("hyper_Delta", m.hyper.Delta);
  write_mat("hyper_M", m.hyper.M);
  write_mat("hyper_V", m.hyper.V);
  os << "pi0";
  for (int i = 0; i < m.K; ++i) os << " " << fmt_double(m.pi0[i]);
  os << "\n";
  write_mat("trans", m.trans);
  for (int k = 0; k < m.K; ++k) {
    if (m.obs_kind == ObsKind::Var1) {
      write_mat("A", m.obs[k].A);
    } else {
      os << "mu";
      for (int i = 0; i < d; ++i) os << " " << fmt_double(m.obs[k].mu[i]);
      os << "\n";
    }
    write_mat("Sigma", m.obs[k].Sigma);
  }
}

inline HmmModel load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string tag, version, word;
  is >> tag >> version;
  if (tag != "kitrec-hmm" || version != "v1") throw IoError("bad hmm record header in " + path);
  HmmModel m;
  int d = 0;
  is >> word >> tag;
  m.alloc = (tag == "parametric") ? AllocKind::Parametric : AllocKind::StickyHdp;
  is >> word >> tag;
  m.obs_kind = (tag == "gaussian") ? ObsKind::Gaussian : ObsKind::Var1;
  is >> word >> m.K;
  is >> word >> d;
  is >> word >> m.hyper.a >> m.hyper.b >> m.hyper.c >> m.hyper.d >> m.hyper.gamma >> m.hyper.kappa >>
      m.hyper.nu >> m.hyper.s_F >> m.hyper.mean_prior_scale >> m.hyper.tol >> m.hyper.K_trunc >>
      m.hyper.max_iter >> m.hyper.n_restarts;
  auto read_mat = [&is](Mat& mat, int r, int c) {
    std::string name;
    is >> name;
    mat.resize(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) is >> mat(i, j);
  };
  read_mat(m.hyper.Delta, d, d);
  read_mat(m.hyper.M, d, d);
  read_mat(m.hyper.V, d, d);
  is >> word;
  m.pi0.resize(m.K);
  for (int i = 0; i < m.K; ++i) is >> m.pi0[i];
  read_mat(m.trans, m.K, m.K);
  for (int k = 0; k < m.K; ++k) {
    ObsParams p;
    p.kind = m.obs_kind;
    if (m.obs_kind == ObsKind::Var1) {
      read_mat(p.A, d, d);
    } else {
      is >> word;
      p.mu.resize(d);
      for (int i = 0; i < d; ++i) is >> p.mu[i];
      p.A = Mat::Zero(d, d);
    }
    read_mat(p.Sigma, d, d);
    m.obs.push_back(std::move(p));
  }
  if (!is) throw IoError("truncated hmm record in " + path);
  return m;
}

}  // namespace kitrec::hmm
