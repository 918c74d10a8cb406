#pragma once

// Stage runners behind the CLI: preprocessing a dataset tree, training and
// applying the network, fitting the fusion classifier, scoring methods
// against labels, exporting attention, and the full cross-validation
// protocol. Each stage writes its outputs plus a config echo so a run can be
// reproduced from its artifacts alone.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "colearn/autodiff.hpp"
#include "colearn/clinical.hpp"
#include "colearn/common.hpp"
#include "colearn/dataset.hpp"
#include "colearn/evalmetrics.hpp"
#include "colearn/gbdt.hpp"
#include "colearn/network.hpp"
#include "colearn/phantom.hpp"
#include "colearn/preprocess.hpp"
#include "colearn/svg.hpp"
#include "colearn/training.hpp"
#include "colearn/volume.hpp"
#include "json.hpp"

namespace colearn {

// ---------------------------------------------------------------------------
// Run configuration: one JSON document with per-stage sections. Unknown keys
// are rejected, and every default equals the module-level default.

struct PreprocessParams {
  double window_lo = kDefaultWindowLo;
  double window_hi = kDefaultWindowHi;
  int64_t side = 32;
  double pad_hu = kDefaultPadHu;
  double target_spacing_mm = 1.0;
  bool lung_mask_fallback = false;  // segment when no lung mask file exists
};

struct SplitConfig {
  double test_frac = 0.2;
  int folds = 4;
  int fold = 0;  // which fold validates in single-model stages
  uint64_t seed = 0;
};

struct RunConfig {
  PreprocessParams preprocess;
  NetworkConfig network;
  TrainConfig train;
  bool inverse_class_weights = false;  // "class_weights": "inverse"
  GbdtConfig gbdt;
  SplitConfig split;
  std::string data_path;  // optional; CLI flags override
  std::string out_path;
};

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<const char*> allowed,
                       const char* section) {
  if (!j.is_object()) fail_data("config: section '", section, "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) fail_data("config: unknown key '", it.key(), "' in ", section);
  }
}

template <class T>
inline void get_to(const nlohmann::json& j, const char* key, T& out,
                   const char* section) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    fail_data("config: bad value for '", key, "' in ", section);
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(
      j, {"preprocess", "network", "train", "gbdt", "split", "paths"}, "top level");
  RunConfig cfg;
  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    detail::check_keys(p,
                       {"window_lo", "window_hi", "side", "pad_hu",
                        "target_spacing_mm", "lung_mask_fallback"},
                       "preprocess");
    detail::get_to(p, "window_lo", cfg.preprocess.window_lo, "preprocess");
    detail::get_to(p, "window_hi", cfg.preprocess.window_hi, "preprocess");
    detail::get_to(p, "side", cfg.preprocess.side, "preprocess");
    detail::get_to(p, "pad_hu", cfg.preprocess.pad_hu, "preprocess");
    detail::get_to(p, "target_spacing_mm", cfg.preprocess.target_spacing_mm,
                   "preprocess");
    detail::get_to(p, "lung_mask_fallback", cfg.preprocess.lung_mask_fallback,
                   "preprocess");
  }
  if (j.contains("network")) {
    const auto& p = j.at("network");
    detail::check_keys(p,
                       {"input_side", "stage_channels", "kernel", "num_maxpools",
                        "sag_source_stage", "sag_gating_stage",
                        "sag_intermediate_channels", "num_classes"},
                       "network");
    detail::get_to(p, "input_side", cfg.network.input_side, "network");
    detail::get_to(p, "stage_channels", cfg.network.stage_channels, "network");
    detail::get_to(p, "kernel", cfg.network.kernel, "network");
    detail::get_to(p, "num_maxpools", cfg.network.num_maxpools, "network");
    detail::get_to(p, "sag_source_stage", cfg.network.sag_source_stage, "network");
    detail::get_to(p, "sag_gating_stage", cfg.network.sag_gating_stage, "network");
    detail::get_to(p, "sag_intermediate_channels",
                   cfg.network.sag_intermediate_channels, "network");
    detail::get_to(p, "num_classes", cfg.network.num_classes, "network");
  }
  if (j.contains("train")) {
    const auto& p = j.at("train");
    detail::check_keys(p,
                       {"learning_rate", "batch_size", "epochs", "beta1", "beta2",
                        "eps", "seed", "class_weights", "aux_training_manifest",
                        "augment_rotation_deg", "augment_shift_voxels"},
                       "train");
    detail::get_to(p, "learning_rate", cfg.train.learning_rate, "train");
    detail::get_to(p, "batch_size", cfg.train.batch_size, "train");
    detail::get_to(p, "epochs", cfg.train.epochs, "train");
    detail::get_to(p, "beta1", cfg.train.beta1, "train");
    detail::get_to(p, "beta2", cfg.train.beta2, "train");
    detail::get_to(p, "eps", cfg.train.eps, "train");
    detail::get_to(p, "seed", cfg.train.seed, "train");
    detail::get_to(p, "augment_rotation_deg", cfg.train.augment_rotation_deg,
                   "train");
    detail::get_to(p, "augment_shift_voxels", cfg.train.augment_shift_voxels,
                   "train");
    if (p.contains("class_weights") && !p.at("class_weights").is_null()) {
      const auto& w = p.at("class_weights");
      if (w.is_string() && w.get<std::string>() == "inverse") {
        cfg.inverse_class_weights = true;
      } else if (w.is_array() && w.size() == 2) {
        std::array<double, 2> cw{};
        detail::get_to(p, "class_weights", cw, "train");
        cfg.train.class_weights = cw;
      } else {
        fail_data("config: class_weights must be null, [w0,w1], or \"inverse\"");
      }
    }
    if (p.contains("aux_training_manifest") &&
        !p.at("aux_training_manifest").is_null()) {
      std::string a;
      detail::get_to(p, "aux_training_manifest", a, "train");
      cfg.train.aux_training_manifest = a;
    }
  }
  if (j.contains("gbdt")) {
    const auto& p = j.at("gbdt");
    detail::check_keys(p,
                       {"num_rounds", "max_depth", "eta", "lambda", "gamma",
                        "min_child_weight", "colsample_bytree", "seed"},
                       "gbdt");
    detail::get_to(p, "num_rounds", cfg.gbdt.num_rounds, "gbdt");
    detail::get_to(p, "max_depth", cfg.gbdt.max_depth, "gbdt");
    detail::get_to(p, "eta", cfg.gbdt.eta, "gbdt");
    detail::get_to(p, "lambda", cfg.gbdt.lambda, "gbdt");
    detail::get_to(p, "gamma", cfg.gbdt.gamma, "gbdt");
    detail::get_to(p, "min_child_weight", cfg.gbdt.min_child_weight, "gbdt");
    detail::get_to(p, "colsample_bytree", cfg.gbdt.colsample_bytree, "gbdt");
    detail::get_to(p, "seed", cfg.gbdt.seed, "gbdt");
  }
  if (j.contains("split")) {
    const auto& p = j.at("split");
    detail::check_keys(p, {"test_frac", "folds", "fold", "seed"}, "split");
    detail::get_to(p, "test_frac", cfg.split.test_frac, "split");
    detail::get_to(p, "folds", cfg.split.folds, "split");
    detail::get_to(p, "fold", cfg.split.fold, "split");
    detail::get_to(p, "seed", cfg.split.seed, "split");
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::check_keys(p, {"data", "out"}, "paths");
    detail::get_to(p, "data", cfg.data_path, "paths");
    detail::get_to(p, "out", cfg.out_path, "paths");
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_data("cannot open config ", path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_data("malformed config ", path, ": ", e.what());
  }
  return parse_run_config(j);
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["preprocess"] = {{"window_lo", cfg.preprocess.window_lo},
                     {"window_hi", cfg.preprocess.window_hi},
                     {"side", cfg.preprocess.side},
                     {"pad_hu", cfg.preprocess.pad_hu},
                     {"target_spacing_mm", cfg.preprocess.target_spacing_mm},
                     {"lung_mask_fallback", cfg.preprocess.lung_mask_fallback}};
  j["network"] = {{"input_side", cfg.network.input_side},
                  {"stage_channels", cfg.network.stage_channels},
                  {"kernel", cfg.network.kernel},
                  {"num_maxpools", cfg.network.num_maxpools},
                  {"sag_source_stage", cfg.network.sag_source_stage},
                  {"sag_gating_stage", cfg.network.sag_gating_stage},
                  {"sag_intermediate_channels", cfg.network.sag_intermediate_channels},
                  {"num_classes", cfg.network.num_classes}};
  nlohmann::ordered_json tw;
  if (cfg.inverse_class_weights) tw = "inverse";
  else if (cfg.train.class_weights)
    tw = {(*cfg.train.class_weights)[0], (*cfg.train.class_weights)[1]};
  else tw = nullptr;
  j["train"] = {{"learning_rate", cfg.train.learning_rate},
                {"batch_size", cfg.train.batch_size},
                {"epochs", cfg.train.epochs},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"eps", cfg.train.eps},
                {"seed", cfg.train.seed},
                {"class_weights", tw},
                {"aux_training_manifest",
                 cfg.train.aux_training_manifest
                     ? nlohmann::ordered_json(*cfg.train.aux_training_manifest)
                     : nlohmann::ordered_json(nullptr)},
                {"augment_rotation_deg", cfg.train.augment_rotation_deg},
                {"augment_shift_voxels", cfg.train.augment_shift_voxels}};
  j["gbdt"] = {{"num_rounds", cfg.gbdt.num_rounds},
               {"max_depth", cfg.gbdt.max_depth},
               {"eta", cfg.gbdt.eta},
               {"lambda", cfg.gbdt.lambda},
               {"gamma", cfg.gbdt.gamma},
               {"min_child_weight", cfg.gbdt.min_child_weight},
               {"colsample_bytree", cfg.gbdt.colsample_bytree},
               {"seed", cfg.gbdt.seed}};
  j["split"] = {{"test_frac", cfg.split.test_frac},
                {"folds", cfg.split.folds},
                {"fold", cfg.split.fold},
                {"seed", cfg.split.seed}};
  j["paths"] = {{"data", cfg.data_path}, {"out", cfg.out_path}};
  return j;
}

namespace detail {

inline void write_json_file(const nlohmann::ordered_json& j,
                            const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path.string());
  f << j.dump(2) << "\n";
  if (!f) fail_data("short write on ", path.string());
}

inline void write_config_echo(const RunConfig& cfg, const std::string& out_dir) {
  write_json_file(run_config_to_json(cfg),
                  std::filesystem::path(out_dir) / "config.json");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Small CSV readers used by the reporting stages.

inline std::unordered_map<std::string, int> read_labels_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_data("cannot open ", path);
  std::string line;
  if (!std::getline(f, line)) fail_data("empty labels file ", path);
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  if (line != "subject_id,label")
    fail_data(path, ": unexpected header '", line, "'");
  std::unordered_map<std::string, int> out;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    const size_t comma = line.find(',');
    if (comma == std::string::npos)
      fail_data(path, " line ", lineno, ": expected subject_id,label");
    const std::string id = line.substr(0, comma);
    const std::string rest = line.substr(comma + 1);
    if (rest != "0" && rest != "1")
      fail_data(path, " line ", lineno, ": label must be 0 or 1, got '", rest, "'");
    if (!out.emplace(id, rest == "1" ? 1 : 0).second)
      fail_data(path, " line ", lineno, ": duplicate subject ", id);
  }
  require(!out.empty(), "labels file lists no subjects");
  return out;
}

// Accepts either the network's 3-column prediction export (score = malignant
// probability) or a 2-column subject_id,score file.
inline std::vector<std::pair<std::string, double>> read_scores_csv(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_data("cannot open ", path);
  std::string header;
  if (!std::getline(f, header)) fail_data("empty scores file ", path);
  while (!header.empty() && (header.back() == '\r' || header.back() == '\n'))
    header.pop_back();
  std::vector<std::pair<std::string, double>> out;
  if (header == "subject_id,image_feature_0,image_feature_1") {
    for (const auto& p : read_predictions_csv(path))
      out.push_back({p.subject_id, p.prob_malignant});
    return out;
  }
  if (header != "subject_id,score")
    fail_data(path, ": unexpected header '", header, "'");
  std::string line;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    const size_t comma = line.find(',');
    if (comma == std::string::npos)
      fail_data(path, " line ", lineno, ": expected subject_id,score");
    const std::string id = line.substr(0, comma);
    const std::string rest = line.substr(comma + 1);
    try {
      size_t used = 0;
      const double v = std::stod(rest, &used);
      if (used != rest.size()) throw std::invalid_argument("trailing");
      out.push_back({id, v});
    } catch (const std::exception&) {
      fail_data(path, " line ", lineno, ": bad score '", rest, "'");
    }
  }
  require(!out.empty(), path + " lists no scores");
  return out;
}

inline void write_scores_csv(const std::string& path,
                             const std::vector<std::pair<std::string, double>>& rows) {
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path);
  f << "subject_id,score\n";
  char buf[64];
  for (const auto& [id, v] : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g\n", v);
    f << id << buf;
  }
  if (!f) fail_data("short write on ", path);
}

inline std::vector<std::string> read_id_list(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_data("cannot open ", path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  require(!out.empty(), path + " lists no subject ids");
  return out;
}

inline void write_id_list(const std::string& path,
                          const std::vector<std::string>& ids) {
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path);
  for (const auto& id : ids) f << id << "\n";
  if (!f) fail_data("short write on ", path);
}

// ---------------------------------------------------------------------------
// preprocess: raw HU dataset tree -> normalized model-ready tree. A subject's
// lung mask is applied only when a lung_mask volume ships with the subject or
// the fallback segmenter is requested; synthetic data needs neither.

inline void run_preprocess(const std::string& data_root, const std::string& out_dir,
                           const PreprocessParams& params) {
  require(params.side >= 1, "preprocess: side must be >= 1");
  require(params.window_lo < params.window_hi,
          "preprocess: window_lo must be below window_hi");
  require(params.target_spacing_mm > 0, "preprocess: target spacing must be > 0");
  namespace fs = std::filesystem;
  const DatasetIndex idx = load_dataset_index(data_root);
  fs::create_directories(fs::path(out_dir) / "subjects");

  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::vector<nlohmann::ordered_json> per_subject(idx.ids.size());
  std::mutex err_mu;
  std::exception_ptr err;
  parallel_for(int64_t(idx.ids.size()), [&](int64_t i) {
    try {
      const std::string& id = idx.ids[size_t(i)];
      const fs::path in_dir = subject_dir(data_root, id);
      const fs::path dst_dir = fs::path(out_dir) / "subjects" / id;
      fs::create_directories(dst_dir);

      Volume ct = read_volume((in_dir / "ct.mvol.json").string());
      Volume mask = read_volume((in_dir / "nodule_mask.mvol.json").string());
      if (ct.kind != VolumeKind::hu)
        fail_data("subject ", id, ": ct volume is not in HU");
      if (ct.spacing_mm) {
        ct = resample_isotropic(ct, params.target_spacing_mm);
        mask = resample_isotropic(mask, params.target_spacing_mm);
      }
      bool lung_masked = false;
      const fs::path lung_path = in_dir / "lung_mask.mvol.json";
      if (fs::exists(lung_path)) {
        Volume lung = read_volume(lung_path.string());
        if (lung.spacing_mm) lung = resample_isotropic(lung, params.target_spacing_mm);
        ct = apply_lung_mask(ct, lung, params.pad_hu);
        lung_masked = true;
      } else if (params.lung_mask_fallback) {
        ct = apply_lung_mask(ct, fallback_lung_segment(ct), params.pad_hu);
        lung_masked = true;
      }
      Volume norm = normalize_hu(ct, params.window_lo, params.window_hi);
      norm = crop_or_pad(norm, params.side,
                         normalize_hu_value(params.pad_hu, params.window_lo,
                                            params.window_hi));
      mask = crop_or_pad(mask, params.side);
      validate_input_tensor(assemble_input(norm, mask));
      write_volume(norm, (dst_dir / "ct.mvol.json").string());
      write_volume(mask, (dst_dir / "nodule_mask.mvol.json").string());

      nlohmann::ordered_json e;
      e["id"] = id;
      e["ct"] = "subjects/" + id + "/ct.mvol.json";
      e["mask"] = "subjects/" + id + "/nodule_mask.mvol.json";
      e["lung_masked"] = lung_masked;
      per_subject[size_t(i)] = std::move(e);
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (!err) err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);
  for (auto& e : per_subject) entries.push_back(std::move(e));

  for (const char* name : {"manifest.json", "clinical.csv", "labels.csv"}) {
    const fs::path src = fs::path(data_root) / name;
    if (fs::exists(src))
      fs::copy_file(src, fs::path(out_dir) / name,
                    fs::copy_options::overwrite_existing);
  }
  nlohmann::ordered_json pm;
  pm["format"] = "colearn-preprocess-v1";
  pm["params"] = {{"window_lo", params.window_lo},
                  {"window_hi", params.window_hi},
                  {"side", params.side},
                  {"pad_hu", params.pad_hu},
                  {"target_spacing_mm", params.target_spacing_mm},
                  {"lung_mask_fallback", params.lung_mask_fallback}};
  pm["subjects"] = std::move(entries);
  detail::write_json_file(pm, fs::path(out_dir) / "preprocess_manifest.json");
}

// ---------------------------------------------------------------------------
// train-cnn: fit one network on the configured fold, holding out the test
// subjects entirely. Writes split.json, model/, history.csv, curve SVGs.

struct TrainCnnResult {
  DatasetSplit split;
  History history;
};

inline void write_history_curves(const History& h, const std::string& out_dir) {
  std::vector<double> ep(h.train_loss.size());
  for (size_t i = 0; i < ep.size(); ++i) ep[i] = double(i + 1);
  write_line_chart((std::filesystem::path(out_dir) / "curves_loss.svg").string(),
                   "cross-entropy loss", "epoch", "loss",
                   {{"train", ep, h.train_loss}, {"val", ep, h.val_loss}});
  write_line_chart((std::filesystem::path(out_dir) / "curves_acc.svg").string(),
                   "accuracy", "epoch", "accuracy",
                   {{"train", ep, h.train_acc}, {"val", ep, h.val_acc}});
}

inline TrainCnnResult run_train_cnn(const std::string& data_root,
                                    const std::string& out_dir, RunConfig cfg) {
  namespace fs = std::filesystem;
  validate_network_config(cfg.network);
  fs::create_directories(out_dir);
  const DatasetIndex idx = load_dataset_index(data_root);

  const DatasetSplit split =
      split_dataset(idx.ids, cfg.split.test_frac, cfg.split.folds, cfg.split.seed);
  auto [train_ids, val_ids] = fold_train_val(split, cfg.split.fold);
  SampleSet train = load_samples(idx, train_ids);
  SampleSet val = load_samples(idx, val_ids);
  SampleSet aux;
  if (cfg.train.aux_training_manifest) {
    const DatasetIndex aux_idx = load_dataset_index(*cfg.train.aux_training_manifest);
    aux = load_samples(aux_idx, aux_idx.ids);
  }
  if (cfg.inverse_class_weights)
    cfg.train.class_weights = inverse_frequency_weights(train);

  ParamGraph<float> pg = build_network<float>(cfg.network, cfg.train.seed);
  FitResult fr = fit(pg, train, val, cfg.train, aux);

  detail::write_json_file(split_to_json(split), fs::path(out_dir) / "split.json");
  write_id_list((fs::path(out_dir) / "train_ids.txt").string(), train_ids);
  write_id_list((fs::path(out_dir) / "val_ids.txt").string(), val_ids);
  write_id_list((fs::path(out_dir) / "test_ids.txt").string(), split.test);
  save_checkpoint(fr.best, (fs::path(out_dir) / "model").string());
  write_history_csv((fs::path(out_dir) / "history.csv").string(), fr.history);
  write_history_curves(fr.history, out_dir);
  detail::write_config_echo(cfg, out_dir);
  return {split, fr.history};
}

// ---------------------------------------------------------------------------
// predict-cnn: inference over a subject list (default: every subject).

inline std::vector<Prediction> run_predict_cnn(
    const std::string& data_root, const std::string& model_dir,
    const std::string& out_csv,
    const std::optional<std::vector<std::string>>& ids = std::nullopt,
    int batch_size = 4) {
  const DatasetIndex idx = load_dataset_index(data_root);
  ParamGraph<float> pg = load_checkpoint(model_dir);
  const std::vector<std::string>& wanted = ids ? *ids : idx.ids;
  SampleSet set = load_samples(idx, wanted);
  for (const auto& s : set)
    if (s.input.side() != pg.cfg.input_side)
      fail_data("subject ", s.subject_id, ": side ", s.input.side(),
                " does not match the model's input side ", pg.cfg.input_side);
  std::vector<Prediction> preds = predict(pg, set, batch_size);
  write_predictions_csv(out_csv, preds);
  return preds;
}

// ---------------------------------------------------------------------------
// train-fusion: fit the boosted-tree classifier on the training-fold
// subjects' clinical rows, optionally joined with the network's two softmax
// features, then score every subject.

inline void run_train_fusion(const std::string& data_root, const std::string& out_dir,
                             RunConfig cfg,
                             const std::optional<std::string>& image_preds_csv) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const DatasetIndex idx = load_dataset_index(data_root);
  const std::vector<ClinicalRecord> records = load_clinical(data_root);
  std::unordered_map<std::string, const ClinicalRecord*> by_id;
  for (const auto& r : records) by_id[r.subject_id] = &r;
  for (const auto& id : idx.ids)
    if (!by_id.count(id)) fail_data("no clinical record for subject ", id);

  std::optional<std::unordered_map<std::string, ImageFeatures>> feats;
  if (image_preds_csv) {
    feats.emplace();
    for (const auto& p : read_predictions_csv(*image_preds_csv))
      (*feats)[p.subject_id] = {p.prob_benign, p.prob_malignant};
  }

  const DatasetSplit split =
      split_dataset(idx.ids, cfg.split.test_frac, cfg.split.folds, cfg.split.seed);
  auto [train_ids, val_ids] = fold_train_val(split, cfg.split.fold);

  auto subset_records = [&](const std::vector<std::string>& ids) {
    std::vector<ClinicalRecord> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      ClinicalRecord r = *by_id.at(id);
      auto lab = idx.labels.find(id);
      r.label = lab->second;  // manifest is the label authority
      out.push_back(std::move(r));
    }
    return out;
  };
  auto subset_feats = [&](const std::vector<std::string>& ids)
      -> std::optional<std::unordered_map<std::string, ImageFeatures>> {
    if (!feats) return std::nullopt;
    std::unordered_map<std::string, ImageFeatures> out;
    for (const auto& id : ids) {
      auto it = feats->find(id);
      if (it == feats->end())
        fail_data("no image features for subject ", id, " in ", *image_preds_csv);
      out[id] = it->second;
    }
    return out;
  };

  const std::vector<ClinicalRecord> train_recs = subset_records(train_ids);
  const auto train_feats = subset_feats(train_ids);
  const FeatureMatrix Xtrain =
      encode_clinical(train_recs, train_feats ? &*train_feats : nullptr);
  const GbdtModel model = fit_gbdt(Xtrain, cfg.gbdt);
  write_gbdt(model, (fs::path(out_dir) / "gbdt.json").string());

  const auto imp = feature_importance(model);
  write_importance_csv((fs::path(out_dir) / "importance.csv").string(), imp);
  write_bar_chart((fs::path(out_dir) / "importance.svg").string(),
                  "feature importance (total gain)", imp);

  const std::vector<ClinicalRecord> all_recs = subset_records(idx.ids);
  const auto all_feats = subset_feats(idx.ids);
  FeatureMatrix Xall = encode_clinical(all_recs, all_feats ? &*all_feats : nullptr);
  const std::vector<double> scores = predict_gbdt(model, Xall);
  std::vector<std::pair<std::string, double>> rows;
  rows.reserve(idx.ids.size());
  for (size_t i = 0; i < idx.ids.size(); ++i)
    rows.push_back({Xall.subject_ids[i], scores[i]});
  write_scores_csv((fs::path(out_dir) / "scores.csv").string(), rows);

  detail::write_json_file(split_to_json(split), fs::path(out_dir) / "split.json");
  detail::write_config_echo(cfg, out_dir);
}

// ---------------------------------------------------------------------------
// evaluate: per-method ROC/AUC/threshold/confusion over a shared label set,
// plus the overlay plot.

struct EvaluateMethod {
  std::string name;
  std::string csv_path;
};

inline nlohmann::ordered_json run_evaluate(
    const std::vector<EvaluateMethod>& methods, const std::string& labels_csv,
    const std::optional<std::vector<std::string>>& subset_ids,
    const std::string& out_dir) {
  namespace fs = std::filesystem;
  require(!methods.empty(), "evaluate: no score files given");
  {
    std::set<std::string> names;
    for (const auto& m : methods)
      if (!names.insert(m.name).second)
        fail_data("evaluate: duplicate method name ", m.name);
  }
  fs::create_directories(out_dir);
  const std::unordered_map<std::string, int> labels = read_labels_csv(labels_csv);
  std::optional<std::unordered_set<std::string>> keep;
  if (subset_ids) {
    keep.emplace(subset_ids->begin(), subset_ids->end());
    for (const auto& id : *keep)
      if (!labels.count(id))
        fail_data("evaluate: subject ", id, " has no label in ", labels_csv);
  }

  nlohmann::ordered_json summary;
  summary["format"] = "colearn-evaluate-v1";
  nlohmann::ordered_json per_method = nlohmann::ordered_json::array();
  std::vector<std::pair<std::string, RocCurve>> curves;
  for (const auto& m : methods) {
    std::vector<double> scores;
    std::vector<int> labs;
    int64_t skipped = 0;
    for (const auto& [id, score] : read_scores_csv(m.csv_path)) {
      if (keep && !keep->count(id)) {
        ++skipped;
        continue;
      }
      auto it = labels.find(id);
      if (it == labels.end()) {
        if (keep) fail_data("evaluate: subject ", id, " has no label");
        ++skipped;
        continue;
      }
      scores.push_back(score);
      labs.push_back(it->second);
    }
    if (keep && scores.size() != keep->size())
      fail_data("evaluate: method ", m.name, " scored ", scores.size(),
                " of the ", keep->size(), " requested subjects");
    const MetricsReport rep = make_report(scores, labs);
    write_metrics(rep, fs::path(out_dir) / ("metrics_" + m.name + ".json"));
    {
      std::ofstream f(fs::path(out_dir) / ("roc_" + m.name + ".csv"));
      if (!f) fail_data("cannot write roc csv for ", m.name);
      f << "threshold,fpr,tpr\n";
      char buf[128];
      for (const auto& p : rep.roc_points) {
        if (std::isfinite(p.threshold))
          std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold,
                        p.fpr, p.tpr);
        else
          std::snprintf(buf, sizeof buf, "inf,%.17g,%.17g\n", p.fpr, p.tpr);
        f << buf;
      }
    }
    RocCurve rc;
    rc.points = rep.roc_points;
    rc.positives = rep.positives;
    rc.negatives = rep.negatives;
    curves.push_back({m.name, rc});
    nlohmann::ordered_json mj;
    mj["name"] = m.name;
    mj["auc"] = rep.auc;
    mj["accuracy"] = rep.accuracy;
    mj["threshold"] = rep.chosen_threshold;
    mj["n"] = int64_t(scores.size());
    mj["skipped"] = skipped;
    per_method.push_back(std::move(mj));
  }
  summary["methods"] = std::move(per_method);
  write_roc_overlay((fs::path(out_dir) / "roc_overlay.svg").string(), curves);
  detail::write_json_file(summary, fs::path(out_dir) / "report.json");
  return summary;
}

// ---------------------------------------------------------------------------
// attention-export: gate map for one subject as a volume plus per-slice PGMs.

inline void run_attention_export(const std::string& data_root,
                                 const std::string& model_dir,
                                 const std::string& subject_id,
                                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const DatasetIndex idx = load_dataset_index(data_root);
  auto it = idx.labels.find(subject_id);
  if (it == idx.labels.end())
    fail_data("subject ", subject_id, " not present in manifest under ", data_root);
  ParamGraph<float> pg = load_checkpoint(model_dir);
  const Sample s = load_sample(data_root, subject_id, it->second);
  const AttentionMap am = extract_attention(pg, s.input.data);
  write_volume(am.upsampled, (fs::path(out_dir) / "attention.mvol.json").string());

  float amax = 0;
  for (float v : am.upsampled.data) amax = std::max(amax, v);
  const int64_t S = am.upsampled.shape[0];
  for (int64_t z = 0; z < S; ++z) {
    std::vector<uint8_t> img(size_t(S * S));
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        const float v = am.upsampled.at(z, y, x);
        img[size_t(y * S + x)] =
            uint8_t(amax > 0 ? std::lround(255.0 * double(v) / double(amax)) : 0);
      }
    char name[48];
    std::snprintf(name, sizeof name, "attention_z%03lld.pgm", (long long)z);
    write_pgm((fs::path(out_dir) / name).string(), S, S, img);
  }
}

// ---------------------------------------------------------------------------
// crossval: the full protocol. One fixed withheld test set; each fold trains
// a fresh network on the other folds, validates on itself, and scores both
// its validation split and the common test split. The audit file records the
// exact membership used so leakage is checkable after the fact.

inline nlohmann::ordered_json run_crossval(const std::string& data_root,
                                           const std::string& out_dir,
                                           const RunConfig& cfg) {
  namespace fs = std::filesystem;
  validate_network_config(cfg.network);
  fs::create_directories(out_dir);
  const DatasetIndex idx = load_dataset_index(data_root);
  const DatasetSplit split =
      split_dataset(idx.ids, cfg.split.test_frac, cfg.split.folds, cfg.split.seed);
  detail::write_json_file(split_to_json(split), fs::path(out_dir) / "split.json");

  const std::unordered_set<std::string> test_set(split.test.begin(), split.test.end());
  SampleSet test = load_samples(idx, split.test);

  nlohmann::ordered_json audit;
  audit["format"] = "colearn-crossval-audit-v1";
  audit["n_subjects"] = int64_t(idx.ids.size());
  audit["test_count"] = int64_t(split.test.size());
  {
    nlohmann::ordered_json sizes = nlohmann::ordered_json::array();
    for (const auto& f : split.folds) sizes.push_back(int64_t(f.size()));
    audit["fold_sizes"] = std::move(sizes);
  }
  nlohmann::ordered_json fold_audits = nlohmann::ordered_json::array();
  nlohmann::ordered_json fold_metrics = nlohmann::ordered_json::array();

  double val_auc_sum = 0, test_auc_sum = 0;
  for (int f = 0; f < int(split.folds.size()); ++f) {
    const fs::path fold_dir = fs::path(out_dir) / ("fold" + std::to_string(f));
    fs::create_directories(fold_dir);
    auto [train_ids, val_ids] = fold_train_val(split, f);

    int64_t train_test_overlap = 0, val_test_overlap = 0, train_val_overlap = 0;
    {
      const std::unordered_set<std::string> tr(train_ids.begin(), train_ids.end());
      for (const auto& id : val_ids) train_val_overlap += tr.count(id);
      for (const auto& id : train_ids) train_test_overlap += test_set.count(id);
      for (const auto& id : val_ids) val_test_overlap += test_set.count(id);
    }

    SampleSet train = load_samples(idx, train_ids);
    SampleSet val = load_samples(idx, val_ids);
    RunConfig fold_cfg = cfg;
    fold_cfg.train.seed = detail::stream_seed(cfg.train.seed, "fold", uint64_t(f));
    if (cfg.inverse_class_weights)
      fold_cfg.train.class_weights = inverse_frequency_weights(train);
    ParamGraph<float> pg = build_network<float>(fold_cfg.network, fold_cfg.train.seed);
    FitResult fr = fit(pg, train, val, fold_cfg.train);

    save_checkpoint(fr.best, (fold_dir / "model").string());
    write_history_csv((fold_dir / "history.csv").string(), fr.history);
    write_history_curves(fr.history, fold_dir.string());
    write_id_list((fold_dir / "train_ids.txt").string(), train_ids);
    write_id_list((fold_dir / "val_ids.txt").string(), val_ids);

    const std::vector<Prediction> val_preds = predict(fr.best, val, cfg.train.batch_size);
    const std::vector<Prediction> test_preds =
        predict(fr.best, test, cfg.train.batch_size);
    write_predictions_csv((fold_dir / "predictions_val.csv").string(), val_preds);
    write_predictions_csv((fold_dir / "predictions_test.csv").string(), test_preds);

    auto auc_of = [&](const std::vector<Prediction>& preds) {
      std::vector<double> s;
      std::vector<int> l;
      for (const auto& p : preds) {
        s.push_back(p.prob_malignant);
        l.push_back(idx.labels.at(p.subject_id));
      }
      return auc(s, l);
    };
    const double val_auc = auc_of(val_preds);
    const double test_auc = auc_of(test_preds);
    val_auc_sum += val_auc;
    test_auc_sum += test_auc;

    nlohmann::ordered_json fa;
    fa["fold"] = f;
    fa["train_count"] = int64_t(train_ids.size());
    fa["val_count"] = int64_t(val_ids.size());
    fa["train_test_overlap"] = train_test_overlap;
    fa["val_test_overlap"] = val_test_overlap;
    fa["train_val_overlap"] = train_val_overlap;
    fold_audits.push_back(std::move(fa));

    nlohmann::ordered_json fm;
    fm["fold"] = f;
    fm["best_epoch"] = fr.history.best_epoch;
    fm["val_auc"] = val_auc;
    fm["test_auc"] = test_auc;
    fold_metrics.push_back(std::move(fm));
  }

  // whole-dataset coverage: folds plus test partition the subject list
  {
    std::vector<std::string> all = split.test;
    for (const auto& f : split.folds) all.insert(all.end(), f.begin(), f.end());
    std::sort(all.begin(), all.end());
    std::vector<std::string> ids = idx.ids;
    std::sort(ids.begin(), ids.end());
    audit["partition_ok"] = all == ids;
  }
  audit["per_fold"] = std::move(fold_audits);
  detail::write_json_file(audit, fs::path(out_dir) / "audit.json");

  nlohmann::ordered_json agg;
  agg["format"] = "colearn-crossval-metrics-v1";
  agg["per_fold"] = std::move(fold_metrics);
  agg["mean_val_auc"] = val_auc_sum / double(split.folds.size());
  agg["mean_test_auc"] = test_auc_sum / double(split.folds.size());
  detail::write_json_file(agg, fs::path(out_dir) / "crossval_metrics.json");
  detail::write_config_echo(cfg, out_dir);
  return agg;
}

}  // namespace colearn
