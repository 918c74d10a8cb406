#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "colearn/common.hpp"
#include "colearn/evalmetrics.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using colearn::Rng;

namespace {

colearn::Confusion brute_confusion(const std::vector<double>& s,
                                   const std::vector<int>& l, double t) {
  colearn::Confusion c;
  for (size_t i = 0; i < s.size(); ++i) {
    const bool pred = s[i] >= t;
    if (l[i] == 1)
      (pred ? c.tp : c.fn)++;
    else
      (pred ? c.fp : c.tn)++;
  }
  return c;
}

}  // namespace

TEST_CASE("roc curve hand cases", "[evalmetrics]") {
  auto rc = colearn::roc_curve({0.9, 0.1}, {1, 0});
  REQUIRE(rc.points.size() == 3);
  CHECK(rc.points[0].fpr == 0.0);
  CHECK(rc.points[0].tpr == 0.0);
  CHECK(rc.points[1].fpr == 0.0);
  CHECK(rc.points[1].tpr == 1.0);
  CHECK(rc.points[2].fpr == 1.0);
  CHECK(rc.points[2].tpr == 1.0);

  auto flat = colearn::roc_curve({0.4, 0.4, 0.4}, {1, 0, 1});
  REQUIRE(flat.points.size() == 2);
  CHECK(flat.points[0].fpr == 0.0);
  CHECK(flat.points[1].fpr == 1.0);
  CHECK(flat.points[1].tpr == 1.0);

  CHECK_THROWS(colearn::roc_curve({0.1, 0.2}, {1, 1}));
  CHECK_THROWS(colearn::roc_curve({0.1}, {0, 1}));
}

TEST_CASE("roc points match brute-force confusion sweeps", "[evalmetrics]") {
  Rng rng(1234);
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 50; ++i) {
    s.push_back(rng.uniform(0.0, 1.0));
    l.push_back(int(rng.uniform_int(0, 1)));
  }
  l[0] = 0;
  l[1] = 1;  // both classes guaranteed
  auto rc = colearn::roc_curve(s, l);
  CHECK(rc.points.front().fpr == 0.0);
  CHECK(rc.points.front().tpr == 0.0);
  CHECK(rc.points.back().fpr == 1.0);
  CHECK(rc.points.back().tpr == 1.0);
  double pf = -1, pt = -1;
  for (const auto& p : rc.points) {
    CHECK(p.fpr >= pf);
    CHECK(p.tpr >= pt);
    pf = p.fpr;
    pt = p.tpr;
    if (!std::isfinite(p.threshold)) continue;
    auto c = brute_confusion(s, l, p.threshold);
    CHECK(p.tpr == Catch::Approx(double(c.tp) / double(c.tp + c.fn)).margin(1e-12));
    CHECK(p.fpr == Catch::Approx(double(c.fp) / double(c.fp + c.tn)).margin(1e-12));
  }
}

TEST_CASE("auc hand cases and concordance identity", "[evalmetrics]") {
  CHECK(colearn::auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == Catch::Approx(1.0));
  CHECK(colearn::auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == Catch::Approx(0.75));

  Rng rng(77);
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 5 + int(rng.uniform_int(0, 45));
    std::vector<double> s;
    std::vector<int> l;
    for (int i = 0; i < n; ++i) {
      // quantized scores so ties actually occur
      s.push_back(std::round(rng.uniform(0.0, 1.0) * 8.0) / 8.0);
      l.push_back(int(rng.uniform_int(0, 1)));
    }
    l[0] = 0;
    l[1] = 1;
    const double a = colearn::auc(s, l);
    const double c = oracles::concordance_auc(s, l);
    CHECK(std::abs(a - c) <= 1e-12);
  }
}

TEST_CASE("auc is a rank statistic", "[evalmetrics]") {
  Rng rng(88);
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 40; ++i) {
    s.push_back(rng.uniform(-2.0, 2.0));
    l.push_back(int(rng.uniform_int(0, 1)));
  }
  l[0] = 0;
  l[1] = 1;
  std::vector<double> t1(s), t2(s), neg(s);
  for (auto& v : t1) v = std::exp(v);
  for (auto& v : t2) v = 3.0 * v + 10.0;
  for (auto& v : neg) v = -v;
  const double a = colearn::auc(s, l);
  CHECK(colearn::auc(t1, l) == Catch::Approx(a).margin(1e-12));
  CHECK(colearn::auc(t2, l) == Catch::Approx(a).margin(1e-12));
  CHECK(colearn::auc(neg, l) + a == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("youden threshold", "[evalmetrics]") {
  auto rc = colearn::roc_curve({0.2, 0.6, 0.7, 0.9}, {0, 0, 1, 1});
  CHECK(colearn::youden_threshold(rc) == Catch::Approx(0.7));

  // every gap of a perfect classifier reaches J=1; the rule keeps the highest
  auto perfect = colearn::roc_curve({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
  CHECK(colearn::youden_threshold(perfect) == Catch::Approx(0.8));

  auto flat = colearn::roc_curve({0.3, 0.3, 0.3}, {1, 0, 1});
  CHECK(colearn::youden_threshold(flat) == Catch::Approx(0.3));

  // equal J at 0.9 and 0.5: the tie goes to the higher threshold
  auto tied = colearn::roc_curve({0.9, 0.6, 0.5, 0.1}, {1, 0, 1, 0});
  CHECK(colearn::youden_threshold(tied) == Catch::Approx(0.9));
}

TEST_CASE("confusion matrix", "[evalmetrics]") {
  auto c = colearn::confusion_matrix({0.9, 0.2}, {1, 0}, 0.5);
  CHECK(c.tp == 1);
  CHECK(c.fp == 0);
  CHECK(c.tn == 1);
  CHECK(c.fn == 0);
  CHECK(c.accuracy() == Catch::Approx(1.0));

  auto none = colearn::confusion_matrix({0.9, 0.2}, {1, 0}, 0.95);
  CHECK(none.tp + none.fp == 0);
  CHECK(none.tn + none.fn == 2);

  Rng rng(99);
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 30; ++i) {
    s.push_back(rng.uniform(0.0, 1.0));
    l.push_back(int(rng.uniform_int(0, 1)));
  }
  const double t = 0.37;
  auto got = colearn::confusion_matrix(s, l, t);
  auto want = brute_confusion(s, l, t);
  CHECK(got.tp == want.tp);
  CHECK(got.fp == want.fp);
  CHECK(got.tn == want.tn);
  CHECK(got.fn == want.fn);

  CHECK_THROWS(colearn::confusion_matrix({}, {}, 0.5));
}

TEST_CASE("confusion at the youden threshold reconstructs its roc point",
          "[evalmetrics]") {
  Rng rng(321);
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 60; ++i) {
    s.push_back(std::round(rng.uniform(0.0, 1.0) * 10.0) / 10.0);
    l.push_back(int(rng.uniform_int(0, 1)));
  }
  l[0] = 0;
  l[1] = 1;
  auto rc = colearn::roc_curve(s, l);
  const double t = colearn::youden_threshold(rc);
  auto c = colearn::confusion_matrix(s, l, t);
  double best_j = -2;
  for (const auto& p : rc.points)
    if (std::isfinite(p.threshold)) best_j = std::max(best_j, p.tpr - p.fpr);
  const double tpr = double(c.tp) / double(c.tp + c.fn);
  const double fpr = double(c.fp) / double(c.fp + c.tn);
  CHECK(tpr - fpr == Catch::Approx(best_j).margin(1e-12));
}

TEST_CASE("metrics report round-trips and validates", "[evalmetrics]") {
  auto m = colearn::make_report({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
  CHECK(m.auc == Catch::Approx(1.0));
  const fs::path p = fs::temp_directory_path() / "colearn_test_metrics.json";
  colearn::write_metrics(m, p);
  auto back = colearn::read_metrics(p);
  CHECK(back.auc == m.auc);
  CHECK(back.chosen_threshold == m.chosen_threshold);
  CHECK(back.accuracy == m.accuracy);
  CHECK(back.confusion.tp == m.confusion.tp);
  REQUIRE(back.roc_points.size() == m.roc_points.size());
  for (size_t i = 0; i < m.roc_points.size(); ++i) {
    CHECK(back.roc_points[i].fpr == m.roc_points[i].fpr);
    CHECK(back.roc_points[i].tpr == m.roc_points[i].tpr);
  }
  fs::remove(p);

  auto broken = m;
  broken.confusion.fn += 1;  // tp+fn no longer equals the positive count
  CHECK_THROWS(colearn::write_metrics(broken, p));
  CHECK(!fs::exists(p));
}
