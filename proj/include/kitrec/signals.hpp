#pragma once

#include "kitrec/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace kitrec {

inline constexpr int kFeatureDim = 17;
inline constexpr int kTaxelsPerFinger = 28;
inline constexpr double kDefaultRateHz = 50.0;
inline constexpr double kDefaultStdWindowSec = 0.1;

using FeatureVec = Eigen::Matrix<double, kFeatureDim, 1>;

struct MultimodalSample {
  double t = 0.0;
  Eigen::Matrix<double, 6, 1> wrench = Eigen::Matrix<double, 6, 1>::Zero();  // fx fy fz taux tauy tauz
  Eigen::Matrix<double, 6, 1> twist = Eigen::Matrix<double, 6, 1>::Zero();   // vx vy vz wx wy wz
  Eigen::Matrix<double, 7, 1> pose = (Eigen::Matrix<double, 7, 1>() << 0, 0, 0, 0, 0, 0, 1).finished();
  std::array<double, kTaxelsPerFinger> taxels_left{};
  std::array<double, kTaxelsPerFinger> taxels_right{};
};

inline void validate(const MultimodalSample& s) {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(s.t) || !s.wrench.allFinite() || !s.twist.allFinite() || !s.pose.allFinite())
    throw InvalidInput("non-finite sample value at t=" + fmt_double(s.t));
  for (double v : s.taxels_left)
    if (!finite(v)) throw InvalidInput("non-finite taxel value");
  for (double v : s.taxels_right)
    if (!finite(v)) throw InvalidInput("non-finite taxel value");
  const double qn = s.pose.tail<4>().norm();
  if (std::abs(qn - 1.0) > 1e-6) throw InvalidInput("quaternion norm " + fmt_double(qn));
}

struct Trial {
  std::string skill_id;
  std::vector<MultimodalSample> samples;
  double rate_hz = 0.0;  // 0 for non-uniform input

  double t_begin() const { return samples.front().t; }
  double t_end() const { return samples.back().t; }
  size_t size() const { return samples.size(); }
};

inline void validate(const Trial& trial) {
  if (trial.samples.empty()) throw InvalidInput("empty trial");
  for (size_t i = 1; i < trial.samples.size(); ++i)
    if (!(trial.samples[i].t > trial.samples[i - 1].t))
      throw InvalidInput("timestamps not strictly increasing at index " + std::to_string(i));
}

// Feature sequence with timestamps; columns are time steps.
struct FeatureSeries {
  std::string skill_id;
  std::vector<double> t;
  Mat f;  // kFeatureDim x T

  size_t size() const { return t.size(); }
};

struct ScalingProfile {
  FeatureVec max_abs = FeatureVec::Zero();
  std::vector<int> zero_dimensions() const {
    std::vector<int> zs;
    for (int i = 0; i < kFeatureDim; ++i)
      if (max_abs[i] == 0.0) zs.push_back(i);
    return zs;
  }
};

namespace detail {

inline double lerp(double a, double b, double u) { return a + (b - a) * u; }

// Index of the last sample with t <= tq (ts strictly increasing, tq inside span).
inline size_t bracket(const std::vector<double>& ts, double tq) {
  auto it = std::upper_bound(ts.begin(), ts.end(), tq);
  if (it == ts.begin()) return 0;
  return static_cast<size_t>(it - ts.begin()) - 1;
}

inline size_t grid_size(double span, double rate) {
  return static_cast<size_t>(std::floor(span * rate + 1e-9)) + 1;
}

}  // namespace detail

// Uniform grid at `rate` over the trial span, fields linearly interpolated.
// Quaternions are renormalized after interpolation.
inline Trial resample(const Trial& trial, double rate) {
  if (trial.samples.empty()) throw InvalidInput("resample: empty trial");
  if (!(rate > 0)) throw InvalidInput("resample: rate must be positive");
  validate(trial);

  std::vector<double> ts(trial.samples.size());
  for (size_t i = 0; i < ts.size(); ++i) ts[i] = trial.samples[i].t;

  const double t0 = ts.front();
  const size_t n = detail::grid_size(ts.back() - t0, rate);

  Trial out;
  out.skill_id = trial.skill_id;
  out.rate_hz = rate;
  out.samples.resize(n);
  for (size_t k = 0; k < n; ++k) {
    const double tq = t0 + static_cast<double>(k) / rate;
    MultimodalSample s;
    s.t = tq;
    if (ts.size() == 1) {
      s = trial.samples[0];
      s.t = tq;
    } else {
      const size_t j = std::min(detail::bracket(ts, tq), ts.size() - 2);
      const auto& a = trial.samples[j];
      const auto& b = trial.samples[j + 1];
      const double u = (tq - a.t) / (b.t - a.t);
      s.wrench = a.wrench + u * (b.wrench - a.wrench);
      s.twist = a.twist + u * (b.twist - a.twist);
      s.pose = a.pose + u * (b.pose - a.pose);
      const double qn = s.pose.tail<4>().norm();
      if (qn > 0) s.pose.tail<4>() /= qn;
      for (int c = 0; c < kTaxelsPerFinger; ++c) {
        s.taxels_left[c] = detail::lerp(a.taxels_left[c], b.taxels_left[c], u);
        s.taxels_right[c] = detail::lerp(a.taxels_right[c], b.taxels_right[c], u);
      }
    }
    out.samples[k] = s;
  }
  return out;
}

// One modality stream: values are columns, one per timestamp.
struct TimedBlock {
  std::vector<double> t;
  Mat v;

  bool empty() const { return t.empty(); }
};

struct RawStreams {
  TimedBlock wrench;        // 6 x N
  TimedBlock twist;         // 6 x N
  TimedBlock pose;          // 7 x N
  TimedBlock taxels_left;   // 28 x N
  TimedBlock taxels_right;  // 28 x N
  std::string skill_id;
};

namespace detail {

inline Vec interp_column(const TimedBlock& b, double tq) {
  if (b.t.size() == 1) return b.v.col(0);
  size_t i = bracket(b.t, tq);
  i = std::min(i, b.t.size() - 2);
  const double u = (tq - b.t[i]) / (b.t[i + 1] - b.t[i]);
  return b.v.col(i) + u * (b.v.col(i + 1) - b.v.col(i));
}

}  // namespace detail

// Merge modality streams onto a common grid over the overlap span.
inline Trial align(const RawStreams& streams, double rate = kDefaultRateHz) {
  const TimedBlock* blocks[] = {&streams.wrench, &streams.twist, &streams.pose,
                                &streams.taxels_left, &streams.taxels_right};
  double t_lo = -std::numeric_limits<double>::infinity();
  double t_hi = std::numeric_limits<double>::infinity();
  for (const TimedBlock* b : blocks) {
    if (b->empty()) throw InvalidInput("align: empty stream");
    t_lo = std::max(t_lo, b->t.front());
    t_hi = std::min(t_hi, b->t.back());
  }
  if (!(t_lo <= t_hi)) throw NoOverlap("streams span disjoint time ranges");

  const size_t n = detail::grid_size(t_hi - t_lo, rate);
  Trial out;
  out.skill_id = streams.skill_id;
  out.rate_hz = rate;
  out.samples.resize(n);
  for (size_t k = 0; k < n; ++k) {
    const double tq = t_lo + static_cast<double>(k) / rate;
    MultimodalSample s;
    s.t = tq;
    s.wrench = detail::interp_column(streams.wrench, tq);
    s.twist = detail::interp_column(streams.twist, tq);
    s.pose = detail::interp_column(streams.pose, tq);
    const double qn = s.pose.tail<4>().norm();
    if (qn > 0) s.pose.tail<4>() /= qn;
    const Vec tl = detail::interp_column(streams.taxels_left, tq);
    const Vec tr = detail::interp_column(streams.taxels_right, tq);
    for (int c = 0; c < kTaxelsPerFinger; ++c) {
      s.taxels_left[c] = tl[c];
      s.taxels_right[c] = tr[c];
    }
    out.samples[k] = s;
  }
  return out;
}

// 12 raw channels, 4 norms, max trailing-window taxel std. 17 total.
inline FeatureSeries extract_features(const Trial& trial, double std_window = kDefaultStdWindowSec) {
  validate(trial);
  const double rate = trial.rate_hz > 0 ? trial.rate_hz
                                        : (trial.size() > 1 ? (trial.size() - 1) / (trial.t_end() - trial.t_begin())
                                                            : kDefaultRateHz);
  if (std_window < 1.0 / rate) throw InvalidInput("std_window shorter than one sample period");

  const size_t T = trial.size();
  const size_t wlen = std::max<size_t>(1, static_cast<size_t>(std::round(std_window * rate)));

  FeatureSeries out;
  out.skill_id = trial.skill_id;
  out.t.resize(T);
  out.f.resize(kFeatureDim, static_cast<Eigen::Index>(T));
  for (size_t i = 0; i < T; ++i) {
    const auto& s = trial.samples[i];
    out.t[i] = s.t;
    FeatureVec f;
    f.segment<3>(0) = s.wrench.head<3>();
    f.segment<3>(3) = s.wrench.tail<3>();
    f.segment<3>(6) = s.twist.head<3>();
    f.segment<3>(9) = s.twist.tail<3>();
    f[12] = s.wrench.head<3>().norm();
    f[13] = s.wrench.tail<3>().norm();
    f[14] = s.twist.head<3>().norm();
    f[15] = s.twist.tail<3>().norm();

    const size_t lo = (i + 1 >= wlen) ? i + 1 - wlen : 0;
    const size_t nw = i - lo + 1;
    double max_std = 0.0;
    for (int c = 0; c < 2 * kTaxelsPerFinger; ++c) {
      double mean = 0.0;
      for (size_t j = lo; j <= i; ++j) {
        const auto& tj = trial.samples[j];
        mean += (c < kTaxelsPerFinger) ? tj.taxels_left[c] : tj.taxels_right[c - kTaxelsPerFinger];
      }
      mean /= static_cast<double>(nw);
      double var = 0.0;
      for (size_t j = lo; j <= i; ++j) {
        const auto& tj = trial.samples[j];
        const double v = (c < kTaxelsPerFinger) ? tj.taxels_left[c] : tj.taxels_right[c - kTaxelsPerFinger];
        var += (v - mean) * (v - mean);
      }
      var /= static_cast<double>(nw);
      max_std = std::max(max_std, std::sqrt(var));
    }
    f[16] = max_std;
    if (!f.allFinite()) throw NumericalError("non-finite feature at step " + std::to_string(i));
    out.f.col(static_cast<Eigen::Index>(i)) = f;
  }
  return out;
}

inline ScalingProfile fit_scaling(const std::vector<Mat>& feature_seqs) {
  if (feature_seqs.empty()) throw InvalidInput("fit_scaling: no trials");
  ScalingProfile p;
  for (const Mat& f : feature_seqs) {
    if (f.rows() != kFeatureDim) throw InvalidInput("fit_scaling: wrong feature dimension");
    p.max_abs = p.max_abs.cwiseMax(f.cwiseAbs().rowwise().maxCoeff());
  }
  return p;
}

// Dimensions whose training max-abs was zero pass through unchanged.
inline Mat apply_scaling(const ScalingProfile& profile, const Mat& f) {
  if (f.rows() != kFeatureDim) throw InvalidInput("apply_scaling: wrong feature dimension");
  Mat out = f;
  for (int i = 0; i < kFeatureDim; ++i) {
    const double div = profile.max_abs[i] > 0.0 ? profile.max_abs[i] : 1.0;
    out.row(i) /= div;
  }
  return out;
}

inline FeatureSeries apply_scaling(const ScalingProfile& profile, const FeatureSeries& fs) {
  FeatureSeries out = fs;
  out.f = apply_scaling(profile, fs.f);
  return out;
}

// ---------------------------------------------------------------------------
// Trial files: comma-separated, UTF-8, one header line. Raw trials carry all
// modality columns; featurized files carry t plus the 17 feature columns.

inline const std::vector<std::string>& feature_column_names() {
  static const std::vector<std::string> names = {
      "fx", "fy", "fz", "taux", "tauy", "tauz", "vx", "vy", "vz", "wx", "wy", "wz",
      "f_norm", "tau_norm", "v_norm", "w_norm", "taxel_max_std"};
  return names;
}

inline std::vector<std::string> raw_column_names() {
  std::vector<std::string> names = {"t",  "fx", "fy", "fz", "taux", "tauy", "tauz",
                                    "vx", "vy", "vz", "wx", "wy",   "wz",
                                    "px", "py", "pz", "qx", "qy",   "qz",   "qw"};
  char buf[8];
  for (int i = 0; i < kTaxelsPerFinger; ++i) {
    std::snprintf(buf, sizeof(buf), "l%02d", i);
    names.emplace_back(buf);
  }
  for (int i = 0; i < kTaxelsPerFinger; ++i) {
    std::snprintf(buf, sizeof(buf), "r%02d", i);
    names.emplace_back(buf);
  }
  return names;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

}  // namespace detail

inline void write_trial_csv(const Trial& trial, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  const auto names = raw_column_names();
  for (size_t i = 0; i < names.size(); ++i) os << (i ? "," : "") << names[i];
  os << "\n";
  for (const auto& s : trial.samples) {
    os << fmt_double(s.t);
    for (int i = 0; i < 6; ++i) os << "," << fmt_double(s.wrench[i]);
    for (int i = 0; i < 6; ++i) os << "," << fmt_double(s.twist[i]);
    for (int i = 0; i < 7; ++i) os << "," << fmt_double(s.pose[i]);
    for (int i = 0; i < kTaxelsPerFinger; ++i) os << "," << fmt_double(s.taxels_left[i]);
    for (int i = 0; i < kTaxelsPerFinger; ++i) os << "," << fmt_double(s.taxels_right[i]);
    os << "\n";
  }
}

inline void write_features_csv(const FeatureSeries& fs, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "t";
  for (const auto& n : feature_column_names()) os << "," << n;
  os << "\n";
  for (size_t i = 0; i < fs.size(); ++i) {
    os << fmt_double(fs.t[i]);
    for (int j = 0; j < kFeatureDim; ++j) os << "," << fmt_double(fs.f(j, static_cast<Eigen::Index>(i)));
    os << "\n";
  }
}

inline void save_scaling(const ScalingProfile& p, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "kitrec-scaling v1\n";
  for (int i = 0; i < kFeatureDim; ++i) os << (i ? " " : "") << fmt_double(p.max_abs[i]);
  os << "\n";
}

inline ScalingProfile load_scaling(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string tag, version;
  is >> tag >> version;
  if (tag != "kitrec-scaling" || version != "v1") throw IoError("bad scaling record in " + path);
  ScalingProfile p;
  for (int i = 0; i < kFeatureDim; ++i) is >> p.max_abs[i];
  if (!is) throw IoError("truncated scaling record in " + path);
  return p;
}

enum class TrialFileKind { Raw, Featurized };

inline TrialFileKind detect_trial_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string header;
  if (!std::getline(is, header)) throw IoError("empty trial file " + path);
  if (header.find("px") != std::string::npos) return TrialFileKind::Raw;
  if (header.find("f_norm") != std::string::npos) return TrialFileKind::Featurized;
  throw InvalidInput("unrecognized trial header in " + path);
}

inline Trial read_trial_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty trial file " + path);
  const auto expected = raw_column_names();
  const auto header = detail::split_csv_line(line);
  if (header != expected) throw InvalidInput("raw trial header mismatch in " + path);

  Trial trial;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != expected.size()) throw InvalidInput("bad row width in " + path);
    MultimodalSample s;
    size_t c = 0;
    s.t = std::stod(cells[c++]);
    for (int i = 0; i < 6; ++i) s.wrench[i] = std::stod(cells[c++]);
    for (int i = 0; i < 6; ++i) s.twist[i] = std::stod(cells[c++]);
    for (int i = 0; i < 7; ++i) s.pose[i] = std::stod(cells[c++]);
    for (int i = 0; i < kTaxelsPerFinger; ++i) s.taxels_left[i] = std::stod(cells[c++]);
    for (int i = 0; i < kTaxelsPerFinger; ++i) s.taxels_right[i] = std::stod(cells[c++]);
    trial.samples.push_back(s);
  }
  validate(trial);
  if (trial.size() > 1) {
    const double dt = trial.samples[1].t - trial.samples[0].t;
    bool uniform = true;
    for (size_t i = 1; i + 1 < trial.size(); ++i)
      if (std::abs((trial.samples[i + 1].t - trial.samples[i].t) - dt) > 1e-9) uniform = false;
    if (uniform) trial.rate_hz = 1.0 / dt;
  }
  return trial;
}

inline FeatureSeries read_features_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty feature file " + path);
  std::vector<std::string> expected = {"t"};
  for (const auto& n : feature_column_names()) expected.push_back(n);
  if (detail::split_csv_line(line) != expected) throw InvalidInput("feature header mismatch in " + path);

  std::vector<double> ts;
  std::vector<FeatureVec> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != expected.size()) throw InvalidInput("bad row width in " + path);
    ts.push_back(std::stod(cells[0]));
    FeatureVec f;
    for (int j = 0; j < kFeatureDim; ++j) f[j] = std::stod(cells[j + 1]);
    rows.push_back(f);
  }
  FeatureSeries fs;
  fs.t = std::move(ts);
  fs.f.resize(kFeatureDim, static_cast<Eigen::Index>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) fs.f.col(static_cast<Eigen::Index>(i)) = rows[i];
  return fs;
}

}  // namespace kitrec
