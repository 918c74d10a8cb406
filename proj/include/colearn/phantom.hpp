#pragma once

// Synthetic labeled chest volumes: a lung ellipsoid of air-like texture inside
// a tissue shell, one planted ellipsoidal nodule per subject. Benign nodules
// keep a smooth boundary and a dim mean intensity; malignant ones get a radial
// sinusoidal boundary perturbation, a brighter mean, and noisier texture.
// Clinical records come from label-conditioned Gaussians. Everything is
// reproducible from the seed alone.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "colearn/clinical.hpp"
#include "colearn/common.hpp"
#include "colearn/volume.hpp"
#include "json.hpp"

namespace colearn {

struct PhantomConfig {
  int64_t n_subjects = 40;
  int64_t side = 32;
  double class_balance = 0.76;  // malignant fraction
  double nodule_radius_min = 3.0;
  double nodule_radius_max = 5.0;
  // image effect sizes (malignant relative to benign)
  double intensity_delta = 80.0;     // added to the benign mean of -50 HU
  double intensity_sd = 10.0;        // per-subject spread of the nodule mean
  double boundary_amplitude = 0.35;  // spiculation, fraction of nodule radius
  double texture_sd_benign = 10.0;   // voxel noise inside the nodule
  double texture_sd_malignant = 25.0;
  // clinical effect sizes (malignant mean shifts)
  double shift_pack_years = 0.0;
  double shift_cigs_per_day = 0.0;
  double shift_smoking_duration = 0.0;
  uint64_t seed = 0;
};

inline void validate_phantom_config(const PhantomConfig& cfg) {
  require(cfg.n_subjects >= 2, "phantom: need at least 2 subjects");
  require(cfg.side >= 16, "phantom: side must be >= 16");
  require(cfg.class_balance > 0.0 && cfg.class_balance < 1.0,
          "phantom: class_balance must be in (0,1)");
  require(cfg.nodule_radius_min > 0 &&
              cfg.nodule_radius_max >= cfg.nodule_radius_min,
          "phantom: invalid nodule radius range");
  require(cfg.nodule_radius_max < double(cfg.side) / 4.0,
          "phantom: nodule radius must stay below side/4");
  require(cfg.intensity_delta >= 0 && cfg.intensity_sd >= 0 &&
              cfg.boundary_amplitude >= 0 && cfg.texture_sd_benign >= 0 &&
              cfg.texture_sd_malignant >= 0 && cfg.shift_pack_years >= 0 &&
              cfg.shift_cigs_per_day >= 0 && cfg.shift_smoking_duration >= 0,
          "phantom: effect sizes must be >= 0");
}

// Named scenario presets. IMG_STRONG separates the classes through the image
// alone; COMPLEMENTARY gives image and clinical each a partial, independent
// signal so fusing them beats either one.
inline void apply_preset(PhantomConfig& cfg, const std::string& name) {
  if (name == "IMG_STRONG") {
    cfg.intensity_delta = 80.0;
    cfg.intensity_sd = 10.0;
    cfg.boundary_amplitude = 0.35;
    cfg.texture_sd_benign = 10.0;
    cfg.texture_sd_malignant = 25.0;
    cfg.shift_pack_years = 0.0;
    cfg.shift_cigs_per_day = 0.0;
    cfg.shift_smoking_duration = 0.0;
  } else if (name == "COMPLEMENTARY") {
    // the per-subject intensity spread is the only image cue, so the image
    // branch tops out near the overlap of the two intensity distributions;
    // shape and texture are matched across classes
    cfg.intensity_delta = 60.0;
    cfg.intensity_sd = 34.0;
    cfg.boundary_amplitude = 0.0;
    cfg.texture_sd_benign = 12.0;
    cfg.texture_sd_malignant = 12.0;
    cfg.shift_pack_years = 30.0;
    cfg.shift_cigs_per_day = 9.0;
    cfg.shift_smoking_duration = 9.0;
  } else {
    fail_data("unknown phantom preset ", name,
              " (expected IMG_STRONG or COMPLEMENTARY)");
  }
}

// Ground truth recorded per subject in the manifest.
struct SubjectTruth {
  std::string id;
  int label = 0;
  std::array<double, 3> center{};  // z,y,x voxel coordinates
  double radius = 0;
  std::array<double, 3> axes{};  // semi-axes, voxels
  double intensity = 0;          // mean nodule HU, the Bayes-rate parameter
  double amplitude = 0;          // spiculation actually applied
  std::array<int, 2> spicule_freq{};
  std::array<double, 2> spicule_phase{};
};

namespace detail {

constexpr double kLungHu = -850.0;
constexpr double kTissueHu = 40.0;
constexpr double kBenignHu = -50.0;

struct LungGeom {
  std::array<double, 3> center;
  std::array<double, 3> axes;
};

inline LungGeom lung_geom(int64_t side) {
  const double c = double(side - 1) / 2.0;
  const double s = double(side);
  return {{c, c, c}, {0.40 * s, 0.44 * s, 0.44 * s}};
}

inline double scaled_dist(const LungGeom& g, double z, double y, double x) {
  const double dz = (z - g.center[0]) / g.axes[0];
  const double dy = (y - g.center[1]) / g.axes[1];
  const double dx = (x - g.center[2]) / g.axes[2];
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

// low-frequency field: a coarse Gaussian grid upsampled with align-corner
// trilinear weights, giving the lung a smooth cloudy texture
inline std::vector<float> coarse_noise(int64_t side, double sd, Rng& rng) {
  const int64_t g = std::max<int64_t>(3, side / 8);
  std::vector<double> grid(size_t(g * g * g));
  for (auto& v : grid) v = rng.normal(0.0, sd);
  std::vector<float> out(size_t(side * side * side));
  const double scale = double(g - 1) / double(side - 1);
  auto gat = [&](int64_t z, int64_t y, int64_t x) {
    return grid[size_t((z * g + y) * g + x)];
  };
  for (int64_t z = 0; z < side; ++z)
    for (int64_t y = 0; y < side; ++y)
      for (int64_t x = 0; x < side; ++x) {
        const double fz = double(z) * scale, fy = double(y) * scale,
                     fx = double(x) * scale;
        const int64_t z0 = std::min<int64_t>(int64_t(fz), g - 2);
        const int64_t y0 = std::min<int64_t>(int64_t(fy), g - 2);
        const int64_t x0 = std::min<int64_t>(int64_t(fx), g - 2);
        const double wz = fz - double(z0), wy = fy - double(y0),
                     wx = fx - double(x0);
        double v = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              v += gat(z0 + dz, y0 + dy, x0 + dx) * (dz ? wz : 1 - wz) *
                   (dy ? wy : 1 - wy) * (dx ? wx : 1 - wx);
        out[size_t((z * side + y) * side + x)] = float(v);
      }
  return out;
}

struct SubjectVolumes {
  Volume ct;
  Volume mask;
  SubjectTruth truth;
};

inline SubjectVolumes generate_subject(const PhantomConfig& cfg,
                                       const std::string& id, int label,
                                       Rng rng) {
  const int64_t s = cfg.side;
  const LungGeom lung = lung_geom(s);

  SubjectTruth truth;
  truth.id = id;
  truth.label = label;
  truth.radius = rng.uniform(cfg.nodule_radius_min, cfg.nodule_radius_max);
  for (int a = 0; a < 3; ++a)
    truth.axes[size_t(a)] = truth.radius * rng.uniform(0.9, 1.1);
  truth.amplitude = label == 1 ? cfg.boundary_amplitude : 0.0;
  truth.intensity = kBenignHu + (label == 1 ? cfg.intensity_delta : 0.0) +
                    rng.normal(0.0, cfg.intensity_sd);
  truth.spicule_freq = {int(rng.uniform_int(4, 7)), int(rng.uniform_int(4, 7))};
  truth.spicule_phase = {rng.uniform(0.0, 2.0 * 3.14159265358979323846),
                         rng.uniform(0.0, 2.0 * 3.14159265358979323846)};

  // place the whole perturbed nodule strictly inside the lung
  const double max_axis =
      *std::max_element(truth.axes.begin(), truth.axes.end());
  const double reach = max_axis * (1.0 + truth.amplitude) + 1.0;
  const double min_lung =
      *std::min_element(lung.axes.begin(), lung.axes.end());
  const double room = 0.92 - reach / min_lung;
  if (room <= 0.0)
    fail_data("phantom: nodule of radius ", truth.radius,
              " cannot fit inside the lung region at side ", s);
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 1000)
      fail_data("phantom: could not place nodule inside lung for subject ", id);
    std::array<double, 3> u{rng.uniform(-room, room), rng.uniform(-room, room),
                            rng.uniform(-room, room)};
    if (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > room * room) continue;
    for (int a = 0; a < 3; ++a)
      truth.center[size_t(a)] = lung.center[size_t(a)] + u[size_t(a)] * lung.axes[size_t(a)];
    break;
  }

  SubjectVolumes out;
  out.truth = truth;
  out.ct = Volume::make({s, s, s}, VolumeKind::hu, {{1.0, 1.0, 1.0}}, 0.0f);
  out.mask = Volume::make({s, s, s}, VolumeKind::mask, {{1.0, 1.0, 1.0}}, 0.0f);

  Rng texture_rng = rng.derive(fnv1a("texture"));
  const std::vector<float> cloud = coarse_noise(s, 40.0, texture_rng);
  const double nodule_sd =
      label == 1 ? cfg.texture_sd_malignant : cfg.texture_sd_benign;

  int64_t planted = 0;
  for (int64_t z = 0; z < s; ++z)
    for (int64_t y = 0; y < s; ++y)
      for (int64_t x = 0; x < s; ++x) {
        const double lung_d = scaled_dist(lung, double(z), double(y), double(x));
        double hu;
        if (lung_d <= 1.0)
          hu = kLungHu + double(cloud[size_t((z * s + y) * s + x)]);
        else
          hu = kTissueHu;

        const double dz = (double(z) - truth.center[0]) / truth.axes[0];
        const double dy = (double(y) - truth.center[1]) / truth.axes[1];
        const double dx = (double(x) - truth.center[2]) / truth.axes[2];
        const double nd = std::sqrt(dz * dz + dy * dy + dx * dx);
        double limit = 1.0;
        if (truth.amplitude > 0.0 && nd > 1e-12) {
          const double theta = std::acos(std::clamp(dz / nd, -1.0, 1.0));
          const double phi = std::atan2(dy, dx);
          limit += truth.amplitude *
                   std::sin(double(truth.spicule_freq[0]) * theta +
                            truth.spicule_phase[0]) *
                   std::sin(double(truth.spicule_freq[1]) * phi +
                            truth.spicule_phase[1]);
        }
        if (nd <= limit) {
          hu = truth.intensity + texture_rng.normal(0.0, nodule_sd);
          out.mask.at(z, y, x) = 1.0f;
          ++planted;
        }
        out.ct.at(z, y, x) = float(hu);
      }
  if (planted == 0)
    fail_data("phantom: nodule produced no voxels for subject ", id);
  return out;
}

inline ClinicalRecord generate_clinical(const PhantomConfig& cfg,
                                        const std::string& id, int label,
                                        Rng rng) {
  ClinicalRecord r;
  r.subject_id = id;
  r.label = label;
  r.gender = rng.uniform() < 0.61 ? Gender::male : Gender::female;
  r.bmi = rng.normal(27.5, 6.5);
  const double u = rng.uniform();
  // smoker mix follows the cohort rates: current .242, ex .691, never .067
  if (u < 0.242) r.smoker_status = SmokerStatus::current;
  else if (u < 0.933) r.smoker_status = SmokerStatus::ex;
  else r.smoker_status = SmokerStatus::never;

  const double mal = label == 1 ? 1.0 : 0.0;
  if (r.smoker_status != SmokerStatus::never) {
    r.age_started_smoking = rng.normal(19.4, 7.5);
    r.cigs_per_day = rng.normal(26.9 + mal * cfg.shift_cigs_per_day, 14.2);
    r.pack_years = rng.normal(52.2 + mal * cfg.shift_pack_years, 32.3);
    r.smoking_duration =
        rng.normal(37.3 + mal * cfg.shift_smoking_duration, 13.6);
    if (r.smoker_status == SmokerStatus::ex)
      r.age_quit_smoking = rng.normal(54.7, 14.4);
  }
  return r;
}

inline std::string subject_name(int64_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "P%04lld", (long long)i);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Splits: a fixed withheld test set plus k folds over the remainder. Sizes
// are as even as possible, earlier folds taking the extra subjects.

struct DatasetSplit {
  std::vector<std::string> test;
  std::vector<std::vector<std::string>> folds;
};

inline DatasetSplit split_dataset(const std::vector<std::string>& subject_ids,
                                  double test_frac, int folds, uint64_t seed) {
  const int64_t n = int64_t(subject_ids.size());
  require(folds >= 2, "split: need at least 2 folds");
  require(test_frac > 0.0 && test_frac < 1.0, "split: test_frac must be in (0,1)");
  if (n < int64_t(folds) + 2)
    fail_data("split: too few subjects (", n, ") for ", folds, " folds");
  {
    std::vector<std::string> sorted = subject_ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      fail_data("split: duplicate subject ids");
  }
  const int64_t n_test = std::llround(double(n) * test_frac);
  if (n_test < 1 || n - n_test < int64_t(folds))
    fail_data("split: too few subjects (", n, ") for test_frac ", test_frac,
              " with ", folds, " folds");

  std::vector<std::string> order = subject_ids;
  Rng rng(hash_combine(seed, fnv1a("split")));
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = rng.uniform_int(0, i);
    std::swap(order[size_t(i)], order[size_t(j)]);
  }

  DatasetSplit out;
  out.test.assign(order.begin(), order.begin() + n_test);
  const int64_t rest = n - n_test;
  const int64_t base = rest / folds, extra = rest % folds;
  int64_t pos = n_test;
  for (int f = 0; f < folds; ++f) {
    const int64_t len = base + (f < extra ? 1 : 0);
    out.folds.push_back(
        std::vector<std::string>(order.begin() + pos, order.begin() + pos + len));
    pos += len;
  }
  return out;
}

// train ids = every fold except fold_index, val ids = that fold
inline std::pair<std::vector<std::string>, std::vector<std::string>>
fold_train_val(const DatasetSplit& split, int fold_index) {
  require(fold_index >= 0 && fold_index < int(split.folds.size()),
          "fold index out of range");
  std::pair<std::vector<std::string>, std::vector<std::string>> out;
  for (int f = 0; f < int(split.folds.size()); ++f) {
    const auto& fold = split.folds[size_t(f)];
    if (f == fold_index) out.second = fold;
    else out.first.insert(out.first.end(), fold.begin(), fold.end());
  }
  return out;
}

inline nlohmann::ordered_json split_to_json(const DatasetSplit& split) {
  nlohmann::ordered_json j;
  j["format"] = "colearn-split-v1";
  j["test"] = split.test;
  j["folds"] = split.folds;
  return j;
}

inline DatasetSplit split_from_json(const nlohmann::json& j) {
  DatasetSplit out;
  try {
    if (j.at("format").get<std::string>() != "colearn-split-v1")
      fail_data("unknown split format");
    out.test = j.at("test").get<std::vector<std::string>>();
    out.folds = j.at("folds").get<std::vector<std::vector<std::string>>>();
  } catch (const nlohmann::json::exception& e) {
    fail_data("malformed split: ", e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole-dataset generation. Layout under out_dir:
//   subjects/<id>/ct.mvol.json + ct.raw
//   subjects/<id>/nodule_mask.mvol.json + nodule_mask.raw
//   clinical.csv  labels.csv  manifest.json

inline nlohmann::ordered_json generate_phantom_dataset(const PhantomConfig& cfg,
                                                       const std::string& out_dir) {
  validate_phantom_config(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "subjects");

  const int64_t n = cfg.n_subjects;
  const int64_t n_mal = std::llround(double(n) * cfg.class_balance);
  require(n_mal >= 1 && n_mal < n,
          "phantom: class_balance leaves an empty class");
  std::vector<int> labels(size_t(n), 0);
  for (int64_t i = 0; i < n_mal; ++i) labels[size_t(i)] = 1;
  {
    Rng rng(hash_combine(cfg.seed, fnv1a("phantom-labels")));
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = rng.uniform_int(0, i);
      std::swap(labels[size_t(i)], labels[size_t(j)]);
    }
  }

  std::vector<SubjectTruth> truths(static_cast<size_t>(n));
  std::vector<ClinicalRecord> clinical(static_cast<size_t>(n));
  std::mutex err_mu;
  std::exception_ptr err;
  parallel_for(n, [&](int64_t i) {
    try {
      const std::string id = detail::subject_name(i);
      const uint64_t sub =
          hash_combine(hash_combine(cfg.seed, fnv1a("phantom-subject")),
                       uint64_t(i));
      detail::SubjectVolumes sv =
          detail::generate_subject(cfg, id, labels[size_t(i)], Rng(sub));
      clinical[size_t(i)] = detail::generate_clinical(
          cfg, id, labels[size_t(i)], Rng(sub).derive(fnv1a("clinical")));
      const fs::path dir = fs::path(out_dir) / "subjects" / id;
      fs::create_directories(dir);
      write_volume(sv.ct, (dir / "ct.mvol.json").string());
      write_volume(sv.mask, (dir / "nodule_mask.mvol.json").string());
      truths[size_t(i)] = sv.truth;
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (!err) err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);

  write_clinical_csv(clinical, (fs::path(out_dir) / "clinical.csv").string());
  {
    std::ofstream f((fs::path(out_dir) / "labels.csv").string());
    if (!f) fail_data("cannot write labels.csv under ", out_dir);
    f << "subject_id,label\n";
    for (int64_t i = 0; i < n; ++i)
      f << truths[size_t(i)].id << "," << truths[size_t(i)].label << "\n";
    if (!f) fail_data("short write on labels.csv under ", out_dir);
  }

  std::vector<std::string> ids;
  ids.reserve(static_cast<size_t>(n));
  for (const auto& t : truths) ids.push_back(t.id);
  const DatasetSplit split = split_dataset(ids, 0.2, 4, cfg.seed);

  nlohmann::ordered_json manifest;
  manifest["format"] = "colearn-phantom-v1";
  manifest["config"] = {{"n_subjects", cfg.n_subjects},
                        {"side", cfg.side},
                        {"class_balance", cfg.class_balance},
                        {"nodule_radius_min", cfg.nodule_radius_min},
                        {"nodule_radius_max", cfg.nodule_radius_max},
                        {"intensity_delta", cfg.intensity_delta},
                        {"intensity_sd", cfg.intensity_sd},
                        {"boundary_amplitude", cfg.boundary_amplitude},
                        {"texture_sd_benign", cfg.texture_sd_benign},
                        {"texture_sd_malignant", cfg.texture_sd_malignant},
                        {"shift_pack_years", cfg.shift_pack_years},
                        {"shift_cigs_per_day", cfg.shift_cigs_per_day},
                        {"shift_smoking_duration", cfg.shift_smoking_duration},
                        {"seed", cfg.seed}};
  nlohmann::ordered_json subjects = nlohmann::ordered_json::array();
  for (const auto& t : truths) {
    nlohmann::ordered_json s;
    s["id"] = t.id;
    s["label"] = t.label;
    s["nodule_center"] = t.center;
    s["nodule_radius"] = t.radius;
    s["nodule_axes"] = t.axes;
    s["nodule_intensity"] = t.intensity;
    s["boundary_amplitude"] = t.amplitude;
    s["spicule_freq"] = t.spicule_freq;
    s["spicule_phase"] = t.spicule_phase;
    subjects.push_back(std::move(s));
  }
  manifest["subjects"] = std::move(subjects);
  manifest["split"] = split_to_json(split);

  std::ofstream f((fs::path(out_dir) / "manifest.json").string());
  if (!f) fail_data("cannot write manifest.json under ", out_dir);
  f << manifest.dump(2) << "\n";
  if (!f) fail_data("short write on manifest.json under ", out_dir);
  return manifest;
}

}  // namespace colearn
