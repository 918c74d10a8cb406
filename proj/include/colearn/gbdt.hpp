#pragma once

// Second-order gradient boosting with logistic loss: exact greedy splits over
// sorted present values, learned default directions for missing cells, leaf
// weights -G/(H+lambda) scaled by eta, gain-based feature importance. Small
// tabular data only, so no histogram approximation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "colearn/clinical.hpp"
#include "colearn/common.hpp"
#include "json.hpp"

namespace colearn {

struct FeatureMatrix {
  std::vector<std::string> columns;
  std::vector<std::string> subject_ids;  // one per row
  std::vector<double> values;            // row-major, NaN marks a missing cell
  std::vector<int> labels;               // empty when labels are unknown

  int64_t rows() const { return int64_t(subject_ids.size()); }
  int64_t cols() const { return int64_t(columns.size()); }
  double at(int64_t r, int64_t c) const { return values[size_t(r * cols() + c)]; }
  double& at(int64_t r, int64_t c) { return values[size_t(r * cols() + c)]; }
};

inline void validate_feature_matrix(const FeatureMatrix& X, bool need_labels) {
  require(!X.columns.empty(), "feature matrix has no columns");
  {
    std::unordered_set<std::string> seen;
    for (const auto& c : X.columns)
      if (!seen.insert(c).second) fail_data("duplicate feature column ", c);
  }
  require(int64_t(X.values.size()) == X.rows() * X.cols(),
          "feature matrix cell count does not match rows x cols");
  if (need_labels) {
    if (int64_t(X.labels.size()) != X.rows())
      fail_data("feature matrix has ", X.labels.size(), " labels for ", X.rows(),
                " rows");
    for (int lab : X.labels)
      require(lab == 0 || lab == 1, "labels must be 0 or 1");
  }
}

struct GbdtConfig {
  int num_rounds = 100;
  int max_depth = 3;
  double eta = 0.1;
  double lambda = 1.0;
  double gamma = 0.0;
  double min_child_weight = 1.0;
  double colsample_bytree = 1.0;  // 1.0 = use every feature (default)
  uint64_t seed = 0;
};

inline void validate_gbdt_config(const GbdtConfig& cfg) {
  require(cfg.num_rounds >= 0, "gbdt: num_rounds must be >= 0");
  require(cfg.max_depth >= 1, "gbdt: max_depth must be >= 1");
  require(cfg.eta > 0.0 && cfg.eta <= 1.0, "gbdt: eta must be in (0,1]");
  require(cfg.lambda >= 0.0 && cfg.gamma >= 0.0 && cfg.min_child_weight >= 0.0,
          "gbdt: lambda, gamma, min_child_weight must be >= 0");
  require(cfg.colsample_bytree > 0.0 && cfg.colsample_bytree <= 1.0,
          "gbdt: colsample_bytree must be in (0,1]");
}

inline std::pair<double, double> logistic_grad_hess(double pred_logit, int label) {
  const double p = 1.0 / (1.0 + std::exp(-pred_logit));
  return {p - double(label), p * (1.0 - p)};
}

inline double split_gain(double GL, double HL, double GR, double HR, double lambda,
                         double gamma) {
  const double G = GL + GR, H = HL + HR;
  return 0.5 * (GL * GL / (HL + lambda) + GR * GR / (HR + lambda) -
                G * G / (H + lambda)) -
         gamma;
}

// Nodes in preorder; feature < 0 marks a leaf.
struct GbdtNode {
  int feature = -1;
  double threshold = 0.0;   // value < threshold goes left
  bool default_left = true; // where missing values go
  double gain = 0.0;
  int left = -1;
  int right = -1;
  double leaf = 0.0;
};

struct GbdtTree {
  std::vector<GbdtNode> nodes;  // nodes[0] is the root
};

struct GbdtModel {
  std::vector<std::string> columns;  // training schema, order matters
  double base_score = 0.0;           // logit of training prevalence
  std::vector<GbdtTree> trees;
  std::vector<double> train_predictions;  // probabilities on the fit rows
};

namespace detail {

inline double tree_value(const GbdtTree& t, const FeatureMatrix& X, int64_t row) {
  int n = 0;
  while (t.nodes[size_t(n)].feature >= 0) {
    const GbdtNode& nd = t.nodes[size_t(n)];
    const double v = X.at(row, nd.feature);
    if (std::isnan(v)) n = nd.default_left ? nd.left : nd.right;
    else n = v < nd.threshold ? nd.left : nd.right;
  }
  return t.nodes[size_t(n)].leaf;
}

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  bool default_left = true;
  double gain = 0.0;
};

// Exact greedy search over one node's rows. Ties resolve to the lowest
// feature index, then the smallest threshold, then missing-left.
inline SplitChoice best_split(const FeatureMatrix& X, const std::vector<double>& g,
                              const std::vector<double>& h,
                              const std::vector<int64_t>& rows,
                              const std::vector<int>& features,
                              const GbdtConfig& cfg) {
  double Gtot = 0, Htot = 0;
  for (int64_t r : rows) {
    Gtot += g[size_t(r)];
    Htot += h[size_t(r)];
  }
  SplitChoice best;
  std::vector<std::pair<double, int64_t>> present;
  present.reserve(rows.size());
  for (int f : features) {
    present.clear();
    double Gmiss = 0, Hmiss = 0;
    for (int64_t r : rows) {
      const double v = X.at(r, f);
      if (std::isnan(v)) {
        Gmiss += g[size_t(r)];
        Hmiss += h[size_t(r)];
      } else {
        present.push_back({v, r});
      }
    }
    if (present.size() < 2) continue;
    std::sort(present.begin(), present.end());

    // walk split positions left to right; GL/HL cover present rows < threshold
    double GL = 0, HL = 0;
    for (size_t i = 0; i + 1 < present.size(); ++i) {
      GL += g[size_t(present[i].second)];
      HL += h[size_t(present[i].second)];
      if (present[i].first == present[i + 1].first) continue;  // not a boundary
      const double thr = present[i].first / 2.0 + present[i + 1].first / 2.0;
      const double GR = Gtot - Gmiss - GL, HR = Htot - Hmiss - HL;
      // missing rows tried on both sides; ties keep left
      const double gain_l =
          split_gain(GL + Gmiss, HL + Hmiss, GR, HR, cfg.lambda, cfg.gamma);
      const double gain_r =
          split_gain(GL, HL, GR + Gmiss, HR + Hmiss, cfg.lambda, cfg.gamma);
      for (int side = 0; side < 2; ++side) {
        const bool left = side == 0;
        const double gain = left ? gain_l : gain_r;
        const double hl = left ? HL + Hmiss : HL;
        const double hr = left ? HR : HR + Hmiss;
        if (hl < cfg.min_child_weight || hr < cfg.min_child_weight) continue;
        // strictly greater, and best.gain starts at 0: only positive gains
        // win, and ties keep the earliest candidate in scan order
        if (gain > best.gain) {
          best.found = true;
          best.feature = f;
          best.threshold = thr;
          best.default_left = left;
          best.gain = gain;
        }
      }
    }
  }
  return best;
}

inline int grow_node(GbdtTree& tree, const FeatureMatrix& X, const std::vector<double>& g,
                     const std::vector<double>& h, std::vector<int64_t> rows, int depth,
                     const std::vector<int>& features, const GbdtConfig& cfg) {
  double G = 0, H = 0;
  for (int64_t r : rows) {
    G += g[size_t(r)];
    H += h[size_t(r)];
  }
  const int id = int(tree.nodes.size());
  tree.nodes.push_back(GbdtNode{});

  SplitChoice sp;
  if (depth < cfg.max_depth) sp = best_split(X, g, h, rows, features, cfg);
  if (!sp.found) {
    tree.nodes[size_t(id)].leaf = -G / (H + cfg.lambda) * cfg.eta;
    return id;
  }

  std::vector<int64_t> lrows, rrows;
  for (int64_t r : rows) {
    const double v = X.at(r, sp.feature);
    const bool left = std::isnan(v) ? sp.default_left : v < sp.threshold;
    (left ? lrows : rrows).push_back(r);
  }
  rows.clear();
  rows.shrink_to_fit();

  tree.nodes[size_t(id)].feature = sp.feature;
  tree.nodes[size_t(id)].threshold = sp.threshold;
  tree.nodes[size_t(id)].default_left = sp.default_left;
  tree.nodes[size_t(id)].gain = sp.gain;
  const int l = grow_node(tree, X, g, h, std::move(lrows), depth + 1, features, cfg);
  const int r = grow_node(tree, X, g, h, std::move(rrows), depth + 1, features, cfg);
  tree.nodes[size_t(id)].left = l;
  tree.nodes[size_t(id)].right = r;
  return id;
}

}  // namespace detail

inline GbdtModel fit_gbdt(const FeatureMatrix& X, const GbdtConfig& cfg) {
  validate_gbdt_config(cfg);
  validate_feature_matrix(X, true);
  const int64_t n = X.rows();
  require(n >= 2, "gbdt: need at least 2 rows");
  int64_t pos = 0;
  for (int lab : X.labels) pos += lab;
  if (pos == 0 || pos == n)
    fail_data("gbdt: labels are single-class (", pos, " positives of ", n, ")");

  GbdtModel model;
  model.columns = X.columns;
  const double prevalence = double(pos) / double(n);
  model.base_score = std::log(prevalence / (1.0 - prevalence));

  std::vector<double> logit(size_t(n), model.base_score);
  std::vector<double> g(static_cast<size_t>(n)), h(static_cast<size_t>(n));
  std::vector<int64_t> all_rows(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) all_rows[size_t(i)] = i;

  Rng col_rng(hash_combine(cfg.seed, fnv1a("colsample")));
  std::vector<int> all_features(size_t(X.cols()));
  for (int i = 0; i < int(X.cols()); ++i) all_features[size_t(i)] = i;

  for (int round = 0; round < cfg.num_rounds; ++round) {
    for (int64_t i = 0; i < n; ++i) {
      auto [gi, hi] = logistic_grad_hess(logit[size_t(i)], X.labels[size_t(i)]);
      g[size_t(i)] = gi;
      h[size_t(i)] = hi;
    }
    std::vector<int> features = all_features;
    if (cfg.colsample_bytree < 1.0) {
      const int keep = std::max<int>(
          1, int(std::llround(cfg.colsample_bytree * double(X.cols()))));
      // Fisher-Yates prefix, then re-sorted so search order stays by index
      for (int i = 0; i < keep; ++i) {
        const int j = int(col_rng.uniform_int(i, int64_t(features.size()) - 1));
        std::swap(features[size_t(i)], features[size_t(j)]);
      }
      features.resize(static_cast<size_t>(keep));
      std::sort(features.begin(), features.end());
    }

    GbdtTree tree;
    detail::grow_node(tree, X, g, h, all_rows, 0, features, cfg);
    for (int64_t i = 0; i < n; ++i)
      logit[size_t(i)] += detail::tree_value(tree, X, i);
    model.trees.push_back(std::move(tree));
  }

  model.train_predictions.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    model.train_predictions[size_t(i)] = 1.0 / (1.0 + std::exp(-logit[size_t(i)]));
  return model;
}

inline std::vector<double> predict_gbdt(const GbdtModel& model, const FeatureMatrix& X) {
  validate_feature_matrix(X, false);
  if (X.columns != model.columns) {
    std::string got = "[";
    for (size_t i = 0; i < X.columns.size(); ++i)
      got += (i ? "," : "") + X.columns[i];
    fail_data("gbdt: feature schema mismatch, model was trained on different columns; got ",
              got, "]");
  }
  std::vector<double> out(size_t(X.rows()));
  for (int64_t i = 0; i < X.rows(); ++i) {
    double logit = model.base_score;
    for (const auto& t : model.trees) logit += detail::tree_value(t, X, i);
    out[size_t(i)] = 1.0 / (1.0 + std::exp(-logit));
  }
  return out;
}

// Total realized split gain per feature, descending; ties by column order.
inline std::vector<std::pair<std::string, double>> feature_importance(
    const GbdtModel& model) {
  std::vector<double> gain(model.columns.size(), 0.0);
  for (const auto& t : model.trees)
    for (const auto& nd : t.nodes)
      if (nd.feature >= 0) gain[size_t(nd.feature)] += nd.gain;
  std::vector<size_t> order(gain.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return gain[a] > gain[b]; });
  std::vector<std::pair<std::string, double>> out;
  out.reserve(order.size());
  for (size_t i : order) out.push_back({model.columns[i], gain[i]});
  return out;
}

// ---------------------------------------------------------------------------
// Clinical encoding. Nine documented columns; two image-feature columns are
// appended when fusing with the network's softmax outputs.

struct ImageFeatures {
  double f0 = 0, f1 = 0;  // image_feature_0, image_feature_1
};

inline FeatureMatrix encode_clinical(
    const std::vector<ClinicalRecord>& records,
    const std::unordered_map<std::string, ImageFeatures>* image_feats = nullptr) {
  FeatureMatrix X;
  X.columns = {"gender_male",    "bmi",        "age_started_smoking",
               "age_quit_smoking", "cigs_per_day", "smoker_current",
               "smoker_ex",      "pack_years", "smoking_duration"};
  if (image_feats) {
    X.columns.push_back("image_feature_0");
    X.columns.push_back("image_feature_1");
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  bool all_labeled = true;
  if (image_feats)
    for (const auto& [id, f] : *image_feats) {
      bool known = false;
      for (const auto& r : records) known = known || r.subject_id == id;
      if (!known) fail_data("image features cover unknown subject ", id);
    }
  for (const auto& r : records) {
    X.subject_ids.push_back(r.subject_id);
    X.values.push_back(r.gender == Gender::male ? 1.0 : 0.0);
    X.values.push_back(r.bmi);
    X.values.push_back(r.age_started_smoking.value_or(nan));
    X.values.push_back(r.age_quit_smoking.value_or(nan));
    X.values.push_back(r.cigs_per_day.value_or(nan));
    X.values.push_back(r.smoker_status == SmokerStatus::current ? 1.0 : 0.0);
    X.values.push_back(r.smoker_status == SmokerStatus::ex ? 1.0 : 0.0);
    X.values.push_back(r.pack_years.value_or(nan));
    X.values.push_back(r.smoking_duration.value_or(nan));
    if (image_feats) {
      auto it = image_feats->find(r.subject_id);
      if (it == image_feats->end())
        fail_data("no image features for subject ", r.subject_id);
      X.values.push_back(it->second.f0);
      X.values.push_back(it->second.f1);
    }
    if (r.label) X.labels.push_back(*r.label);
    else all_labeled = false;
  }
  if (!all_labeled) X.labels.clear();
  else if (X.labels.size() != X.subject_ids.size()) X.labels.clear();
  validate_feature_matrix(X, false);
  return X;
}

// ---------------------------------------------------------------------------
// JSON round-trip of a fitted model.

inline void write_gbdt(const GbdtModel& model, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = "colearn-gbdt-v1";
  j["columns"] = model.columns;
  j["base_score"] = model.base_score;
  nlohmann::ordered_json trees = nlohmann::ordered_json::array();
  for (const auto& t : model.trees) {
    nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
    for (const auto& nd : t.nodes) {
      nlohmann::ordered_json n;
      if (nd.feature < 0) {
        n["leaf"] = nd.leaf;
      } else {
        n["feature"] = nd.feature;
        n["threshold"] = nd.threshold;
        n["default_left"] = nd.default_left;
        n["gain"] = nd.gain;
        n["left"] = nd.left;
        n["right"] = nd.right;
      }
      nodes.push_back(std::move(n));
    }
    trees.push_back(nlohmann::ordered_json{{"nodes", std::move(nodes)}});
  }
  j["trees"] = std::move(trees);
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path);
  f << j.dump(2) << "\n";
  if (!f) fail_data("short write on ", path);
}

inline GbdtModel read_gbdt(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_data("cannot open ", path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_data("malformed model file ", path, ": ", e.what());
  }
  GbdtModel model;
  try {
    if (j.at("format").get<std::string>() != "colearn-gbdt-v1")
      fail_data(path, ": unknown model format");
    model.columns = j.at("columns").get<std::vector<std::string>>();
    model.base_score = j.at("base_score").get<double>();
    for (const auto& tj : j.at("trees")) {
      GbdtTree t;
      for (const auto& nj : tj.at("nodes")) {
        GbdtNode nd;
        if (nj.contains("leaf")) {
          nd.leaf = nj.at("leaf").get<double>();
        } else {
          nd.feature = nj.at("feature").get<int>();
          nd.threshold = nj.at("threshold").get<double>();
          nd.default_left = nj.at("default_left").get<bool>();
          nd.gain = nj.at("gain").get<double>();
          nd.left = nj.at("left").get<int>();
          nd.right = nj.at("right").get<int>();
          if (nd.feature >= int(model.columns.size()))
            fail_data(path, ": node references feature ", nd.feature,
                      " outside the schema");
        }
        t.nodes.push_back(nd);
      }
      if (t.nodes.empty()) fail_data(path, ": empty tree");
      model.trees.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail_data("malformed model file ", path, ": ", e.what());
  }
  return model;
}

inline void write_importance_csv(const std::string& path,
                                 const std::vector<std::pair<std::string, double>>& imp) {
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path);
  f << "feature,gain\n";
  char buf[64];
  for (const auto& [name, gain] : imp) {
    std::snprintf(buf, sizeof buf, ",%.17g\n", gain);
    f << name << buf;
  }
  if (!f) fail_data("short write on ", path);
}

}  // namespace colearn
