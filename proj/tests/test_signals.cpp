#include <catch2/catch_amalgamated.hpp>

#include "kitrec/signals.hpp"

#include <cmath>

using namespace kitrec;

namespace {

Trial make_trial(double duration, double rate, double value = 1.0) {
  Trial t;
  t.skill_id = "test";
  t.rate_hz = rate;
  const size_t n = static_cast<size_t>(duration * rate) + 1;
  for (size_t i = 0; i < n; ++i) {
    MultimodalSample s;
    s.t = static_cast<double>(i) / rate;
    s.wrench.setConstant(value);
    s.twist.setConstant(value);
    s.pose << value, value, value, 0, 0, 0, 1;
    s.taxels_left.fill(value);
    s.taxels_right.fill(value);
    t.samples.push_back(s);
  }
  return t;
}

}  // namespace

TEST_CASE("resample keeps constant signals constant") {
  const Trial hi = make_trial(1.0, 1000.0, 3.5);
  const Trial lo = resample(hi, 50.0);
  REQUIRE(lo.rate_hz == 50.0);
  for (const auto& s : lo.samples) {
    CHECK(s.wrench[0] == Catch::Approx(3.5));
    CHECK(s.taxels_right[13] == Catch::Approx(3.5));
  }
}

TEST_CASE("resample produces an inclusive grid") {
  const Trial t = make_trial(2.0, 200.0);
  const Trial out = resample(t, 50.0);
  CHECK(out.size() == 101);
  CHECK(out.samples.front().t == Catch::Approx(0.0));
  CHECK(out.samples.back().t == Catch::Approx(2.0));
}

TEST_CASE("resample interpolates linearly") {
  Trial t;
  for (double ts : {0.0, 0.1}) {
    MultimodalSample s;
    s.t = ts;
    s.wrench.setConstant(ts);  // ramp x(t) = t
    t.samples.push_back(s);
  }
  const Trial out = resample(t, 20.0);  // queries at 0, 0.05, 0.1
  REQUIRE(out.size() == 3);
  CHECK(out.samples[1].wrench[0] == Catch::Approx(0.05));
}

TEST_CASE("resample rejects empty trials") {
  Trial empty;
  CHECK_THROWS_AS(resample(empty, 50.0), InvalidInput);
}

TEST_CASE("resample is idempotent") {
  Trial t;
  Rng rng(7);
  for (int i = 0; i < 40; ++i) {
    MultimodalSample s;
    s.t = 0.013 * i + 0.002 * rng.uniform01();
    for (int j = 0; j < 6; ++j) {
      s.wrench[j] = rng.normal();
      s.twist[j] = rng.normal();
    }
    t.samples.push_back(s);
  }
  const Trial once = resample(t, 50.0);
  const Trial twice = resample(once, 50.0);
  REQUIRE(once.size() == twice.size());
  for (size_t i = 0; i < once.size(); ++i) {
    CHECK((once.samples[i].wrench - twice.samples[i].wrench).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(once.samples[i].t - twice.samples[i].t) < 1e-12);
  }
}

TEST_CASE("align merges identical grids without change") {
  RawStreams streams;
  const int n = 21;
  for (int i = 0; i < n; ++i) {
    const double t = i * 0.02;
    streams.wrench.t.push_back(t);
    streams.twist.t.push_back(t);
    streams.pose.t.push_back(t);
    streams.taxels_left.t.push_back(t);
    streams.taxels_right.t.push_back(t);
  }
  streams.wrench.v = Mat::Constant(6, n, 2.0);
  streams.twist.v = Mat::Constant(6, n, -1.0);
  streams.pose.v = Mat::Zero(7, n);
  streams.pose.v.row(6).setConstant(1.0);
  streams.taxels_left.v = Mat::Constant(28, n, 0.5);
  streams.taxels_right.v = Mat::Constant(28, n, 0.5);

  const Trial merged = align(streams, 50.0);
  REQUIRE(merged.size() == static_cast<size_t>(n));
  CHECK(merged.samples[5].wrench[0] == Catch::Approx(2.0));
  CHECK(merged.samples[5].twist[3] == Catch::Approx(-1.0));
}

TEST_CASE("align interpolates slow modalities against an offline oracle") {
  RawStreams streams;
  // wrench at 1000 Hz, pose at 100 Hz, both spanning [0, 0.5]
  const auto fill = [](TimedBlock& b, double rate, double span, int rows, auto fn) {
    const int n = static_cast<int>(span * rate) + 1;
    b.v.resize(rows, n);
    for (int i = 0; i < n; ++i) {
      const double t = i / rate;
      b.t.push_back(t);
      for (int r = 0; r < rows; ++r) b.v(r, i) = fn(t, r);
    }
  };
  fill(streams.wrench, 1000.0, 0.5, 6, [](double t, int r) { return std::sin(3 * t) + r; });
  fill(streams.twist, 1000.0, 0.5, 6, [](double t, int r) { return std::cos(2 * t) - r; });
  fill(streams.pose, 100.0, 0.5, 7, [](double t, int r) { return r == 6 ? 1.0 : 0.1 * t * (r + 1); });
  fill(streams.taxels_left, 200.0, 0.5, 28, [](double t, int) { return 0.2 * t; });
  fill(streams.taxels_right, 200.0, 0.5, 28, [](double t, int) { return -0.2 * t; });

  const Trial merged = align(streams, 50.0);
  // Offline oracle: piecewise-linear interpolation of the 100 Hz pose stream.
  for (const auto& s : merged.samples) {
    const double t = s.t;
    const double step = 0.01;
    const double i0 = std::floor(t / step + 1e-12);
    const double t0 = i0 * step;
    const double u = (t - t0) / step;
    const auto oracle = [&](int r) {
      const double a = 0.1 * t0 * (r + 1);
      const double b = 0.1 * std::min(t0 + step, 0.5) * (r + 1);
      return a + u * (b - a);
    };
    for (int r = 0; r < 3; ++r) CHECK(s.pose[r] == Catch::Approx(oracle(r)).margin(1e-9));
  }
}

TEST_CASE("align rejects disjoint spans") {
  RawStreams streams;
  auto fill_span = [](TimedBlock& b, double lo, double hi, int rows) {
    b.t = {lo, hi};
    b.v = Mat::Zero(rows, 2);
  };
  fill_span(streams.wrench, 0.0, 1.0, 6);
  fill_span(streams.twist, 0.0, 1.0, 6);
  fill_span(streams.pose, 2.0, 3.0, 7);
  fill_span(streams.taxels_left, 0.0, 1.0, 28);
  fill_span(streams.taxels_right, 0.0, 1.0, 28);
  streams.pose.v.row(6).setConstant(1.0);
  CHECK_THROWS_AS(align(streams, 50.0), NoOverlap);
}

TEST_CASE("scaling maps by training maxima and guards zero dimensions") {
  Mat train = Mat::Zero(kFeatureDim, 4);
  train(0, 2) = -20.0;  // max |fx| = 20
  const ScalingProfile p = fit_scaling({train});
  CHECK(p.max_abs[0] == Catch::Approx(20.0));
  CHECK(p.zero_dimensions().size() == kFeatureDim - 1);

  Mat test = Mat::Zero(kFeatureDim, 1);
  test(0, 0) = 10.0;
  test(3, 0) = 0.3;  // all-zero training dimension passes through
  const Mat scaled = apply_scaling(p, test);
  CHECK(scaled(0, 0) == Catch::Approx(0.5));
  CHECK(scaled(3, 0) == Catch::Approx(0.3));
}

TEST_CASE("scaling its own training set bounds values in [-1, 1]") {
  Rng rng(11);
  std::vector<Mat> train;
  for (int n = 0; n < 5; ++n) {
    Mat f(kFeatureDim, 30);
    for (int i = 0; i < f.size(); ++i) f.data()[i] = 5.0 * rng.normal();
    train.push_back(f);
  }
  const ScalingProfile p = fit_scaling(train);
  double max_abs = 0.0;
  bool attained = false;
  for (const Mat& f : train) {
    const Mat s = apply_scaling(p, f);
    max_abs = std::max(max_abs, s.cwiseAbs().maxCoeff());
    attained |= s.cwiseAbs().maxCoeff() >= 1.0 - 1e-12;
  }
  CHECK(max_abs <= 1.0 + 1e-12);
  CHECK(attained);
}

TEST_CASE("features: norms, taxel std, and dimension") {
  Trial t = make_trial(0.5, 50.0, 0.0);
  for (auto& s : t.samples) {
    s.wrench.head<3>() << 3.0, 4.0, 0.0;
    s.taxels_left.fill(0.7);  // constant over window -> zero std
  }
  const FeatureSeries fs = extract_features(t, 0.1);
  REQUIRE(fs.f.rows() == 17);
  REQUIRE(fs.size() == t.size());
  CHECK(fs.f(12, 5) == Catch::Approx(5.0));  // ||F||
  CHECK(fs.f(16, 10) == Catch::Approx(0.0).margin(1e-15));
  CHECK(fs.f.allFinite());
}

TEST_CASE("features reject sub-sample std windows") {
  const Trial t = make_trial(0.5, 50.0);
  CHECK_THROWS_AS(extract_features(t, 0.001), InvalidInput);
}

TEST_CASE("trial csv round trip and auto-detection") {
  Trial t = make_trial(0.2, 50.0, 0.25);
  t.samples[3].wrench[2] = -7.5;
  const std::string path = "test_trial_roundtrip.csv";
  write_trial_csv(t, path);
  CHECK(detect_trial_csv(path) == TrialFileKind::Raw);
  const Trial back = read_trial_csv(path);
  REQUIRE(back.size() == t.size());
  CHECK(back.samples[3].wrench[2] == Catch::Approx(-7.5));
  CHECK(back.rate_hz == Catch::Approx(50.0));

  const FeatureSeries fs = extract_features(t, 0.1);
  const std::string fpath = "test_features_roundtrip.csv";
  write_features_csv(fs, fpath);
  CHECK(detect_trial_csv(fpath) == TrialFileKind::Featurized);
  const FeatureSeries fback = read_features_csv(fpath);
  REQUIRE(fback.size() == fs.size());
  CHECK((fback.f - fs.f).cwiseAbs().maxCoeff() < 1e-15);
  std::remove(path.c_str());
  std::remove(fpath.c_str());
}
