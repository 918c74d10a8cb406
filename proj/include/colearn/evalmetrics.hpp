#pragma once

// ROC sweep, trapezoidal AUC, Youden threshold choice and confusion counts.
// Convention throughout: score >= threshold predicts positive (malignant).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "colearn/common.hpp"

namespace colearn {

struct RocPoint {
  double fpr = 0, tpr = 0;
  double threshold = 0;  // +inf marks the (0,0) anchor above all scores
};

struct RocCurve {
  std::vector<RocPoint> points;  // descending threshold: (0,0) ... (1,1)
  int64_t positives = 0;
  int64_t negatives = 0;
};

struct Confusion {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
  double accuracy() const { return total() ? double(tp + tn) / double(total()) : 0.0; }
};

namespace detail {
inline void check_scores_labels(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "scores and labels must have equal length");
  require(!scores.empty(), "empty score list");
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) fail_data("non-finite score at index ", i);
    if (labels[i] != 0 && labels[i] != 1) fail_data("label at index ", i, " is not 0/1");
  }
}
}  // namespace detail

inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  detail::check_scores_labels(scores, labels);
  int64_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0) fail_data("roc_curve needs both classes present");

  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  RocCurve rc;
  rc.positives = pos;
  rc.negatives = neg;
  rc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});

  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double t = scores[order[i]];
    // All samples tied at this score flip to predicted-positive together.
    while (i < order.size() && scores[order[i]] == t) {
      if (labels[order[i]]) ++tp;
      else ++fp;
      ++i;
    }
    rc.points.push_back({double(fp) / double(neg), double(tp) / double(pos), t});
  }
  return rc;
}

inline double auc_from_curve(const RocCurve& rc) {
  double area = 0.0;
  for (size_t i = 1; i < rc.points.size(); ++i) {
    const auto& a = rc.points[i - 1];
    const auto& b = rc.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return area;
}

inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return auc_from_curve(roc_curve(scores, labels));
}

// Max of J = tpr - fpr over finite thresholds; ties go to the higher threshold
// (fewer predicted positives). The infinite anchor never wins.
inline double youden_threshold(const RocCurve& rc) {
  require(rc.points.size() >= 2, "roc curve has no threshold points");
  double best_j = -2.0;
  double best_t = 0.0;
  for (const auto& p : rc.points) {
    if (!std::isfinite(p.threshold)) continue;
    const double j = p.tpr - p.fpr;
    if (j > best_j) {
      best_j = j;
      best_t = p.threshold;
    }
  }
  return best_t;
}

inline Confusion confusion_matrix(const std::vector<double>& scores,
                                  const std::vector<int>& labels, double threshold) {
  detail::check_scores_labels(scores, labels);
  Confusion c;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Metrics report (the evaluate stage's JSON artifact).

struct MetricsReport {
  double auc = 0;
  std::vector<RocPoint> roc_points;
  double chosen_threshold = 0;
  Confusion confusion;
  double accuracy = 0;
  int64_t positives = 0;  // in-memory consistency fields, not serialized
  int64_t negatives = 0;
};

inline MetricsReport make_report(const std::vector<double>& scores,
                                 const std::vector<int>& labels,
                                 std::optional<double> threshold = std::nullopt) {
  RocCurve rc = roc_curve(scores, labels);
  MetricsReport m;
  m.auc = auc_from_curve(rc);
  m.roc_points = rc.points;
  m.chosen_threshold = threshold ? *threshold : youden_threshold(rc);
  m.confusion = confusion_matrix(scores, labels, m.chosen_threshold);
  m.accuracy = m.confusion.accuracy();
  m.positives = rc.positives;
  m.negatives = rc.negatives;
  return m;
}

inline void validate_report(const MetricsReport& m) {
  require(m.auc >= 0.0 && m.auc <= 1.0, "auc out of [0,1]");
  require(m.accuracy >= 0.0 && m.accuracy <= 1.0, "accuracy out of [0,1]");
  require(m.confusion.tp >= 0 && m.confusion.fp >= 0 && m.confusion.tn >= 0 &&
              m.confusion.fn >= 0,
          "negative confusion count");
  if (m.confusion.tp + m.confusion.fn != m.positives)
    fail_data("confusion tp+fn = ", m.confusion.tp + m.confusion.fn,
              " does not equal positive count ", m.positives);
  if (m.confusion.tn + m.confusion.fp != m.negatives)
    fail_data("confusion tn+fp = ", m.confusion.tn + m.confusion.fp,
              " does not equal negative count ", m.negatives);
  const double acc = m.confusion.accuracy();
  require(std::abs(acc - m.accuracy) <= 1e-12, "accuracy inconsistent with confusion counts");
  for (size_t i = 1; i < m.roc_points.size(); ++i) {
    if (m.roc_points[i].fpr + 1e-12 < m.roc_points[i - 1].fpr ||
        m.roc_points[i].tpr + 1e-12 < m.roc_points[i - 1].tpr)
      fail_data("roc points not monotone at index ", i);
  }
}

namespace detail {
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}
}  // namespace detail

// Canonical layout: fixed key order, floats at 17 significant digits. The
// infinite anchor threshold serializes as null.
inline void write_metrics(const MetricsReport& m, const std::filesystem::path& path) {
  validate_report(m);
  std::string out = "{\n";
  out += "  \"auc\": " + detail::fmt17(m.auc) + ",\n";
  out += "  \"roc_points\": [\n";
  for (size_t i = 0; i < m.roc_points.size(); ++i) {
    const auto& p = m.roc_points[i];
    out += "    {\"fpr\": " + detail::fmt17(p.fpr) + ", \"tpr\": " + detail::fmt17(p.tpr) +
           ", \"threshold\": " +
           (std::isfinite(p.threshold) ? detail::fmt17(p.threshold) : std::string("null")) +
           "}";
    out += (i + 1 < m.roc_points.size()) ? ",\n" : "\n";
  }
  out += "  ],\n";
  out += "  \"chosen_threshold\": " + detail::fmt17(m.chosen_threshold) + ",\n";
  out += "  \"confusion\": {\"tp\": " + std::to_string(m.confusion.tp) +
         ", \"fp\": " + std::to_string(m.confusion.fp) +
         ", \"tn\": " + std::to_string(m.confusion.tn) +
         ", \"fn\": " + std::to_string(m.confusion.fn) + "},\n";
  out += "  \"accuracy\": " + detail::fmt17(m.accuracy) + "\n";
  out += "}\n";

  std::ofstream os(path);
  if (!os) fail_data("cannot open for write: ", path.string());
  os << out;
  if (!os) fail_data("write failed: ", path.string());
}

inline MetricsReport read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open metrics file: ", path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_data("bad metrics json ", path.string(), ": ", e.what());
  }
  MetricsReport m;
  try {
    m.auc = j.at("auc").get<double>();
    for (const auto& p : j.at("roc_points")) {
      RocPoint rp;
      rp.fpr = p.at("fpr").get<double>();
      rp.tpr = p.at("tpr").get<double>();
      rp.threshold = p.at("threshold").is_null()
                         ? std::numeric_limits<double>::infinity()
                         : p.at("threshold").get<double>();
      m.roc_points.push_back(rp);
    }
    m.chosen_threshold = j.at("chosen_threshold").get<double>();
    m.confusion.tp = j.at("confusion").at("tp").get<int64_t>();
    m.confusion.fp = j.at("confusion").at("fp").get<int64_t>();
    m.confusion.tn = j.at("confusion").at("tn").get<int64_t>();
    m.confusion.fn = j.at("confusion").at("fn").get<int64_t>();
    m.accuracy = j.at("accuracy").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail_data("bad metrics json ", path.string(), ": ", e.what());
  }
  m.positives = m.confusion.tp + m.confusion.fn;
  m.negatives = m.confusion.tn + m.confusion.fp;
  return m;
}

}  // namespace colearn
