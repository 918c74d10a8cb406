#pragma once

// On-disk dataset access: manifest + labels indexing and loading preprocessed
// subjects into training samples. Layout matches the generator:
//   <root>/subjects/<id>/{ct.mvol.json,ct.raw,nodule_mask.mvol.json,nodule_mask.raw}
//   <root>/{clinical.csv,labels.csv,manifest.json}

#include <array>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "colearn/clinical.hpp"
#include "colearn/common.hpp"
#include "colearn/phantom.hpp"
#include "colearn/preprocess.hpp"
#include "colearn/training.hpp"
#include "colearn/volume.hpp"
#include "json.hpp"

namespace colearn {

struct DatasetIndex {
  std::string root;
  std::vector<std::string> ids;  // manifest order
  std::unordered_map<std::string, int> labels;
  DatasetSplit split;
  nlohmann::json manifest;
};

inline std::string subject_dir(const std::string& root, const std::string& id) {
  return (std::filesystem::path(root) / "subjects" / id).string();
}

inline DatasetIndex load_dataset_index(const std::string& root) {
  const std::string mpath =
      (std::filesystem::path(root) / "manifest.json").string();
  std::ifstream f(mpath);
  if (!f) fail_data("cannot open ", mpath);
  DatasetIndex idx;
  idx.root = root;
  try {
    f >> idx.manifest;
  } catch (const nlohmann::json::exception& e) {
    fail_data("malformed manifest ", mpath, ": ", e.what());
  }
  try {
    if (idx.manifest.at("format").get<std::string>() != "colearn-phantom-v1")
      fail_data(mpath, ": unknown manifest format");
    for (const auto& s : idx.manifest.at("subjects")) {
      const std::string id = s.at("id").get<std::string>();
      const int label = s.at("label").get<int>();
      require(label == 0 || label == 1, "manifest label must be 0 or 1");
      if (idx.labels.count(id)) fail_data(mpath, ": duplicate subject ", id);
      idx.ids.push_back(id);
      idx.labels[id] = label;
    }
    if (idx.manifest.contains("split"))
      idx.split = split_from_json(idx.manifest.at("split"));
  } catch (const nlohmann::json::exception& e) {
    fail_data("malformed manifest ", mpath, ": ", e.what());
  }
  require(!idx.ids.empty(), "manifest lists no subjects");
  return idx;
}

// bounding box of nonzero voxels, inclusive: {z0,z1,y0,y1,x0,x1}
inline std::array<int64_t, 6> mask_bbox(const Volume& mask) {
  std::array<int64_t, 6> bb{mask.shape[0], -1, mask.shape[1], -1,
                            mask.shape[2], -1};
  for (int64_t z = 0; z < mask.shape[0]; ++z)
    for (int64_t y = 0; y < mask.shape[1]; ++y)
      for (int64_t x = 0; x < mask.shape[2]; ++x)
        if (mask.at(z, y, x) != 0.0f) {
          bb[0] = std::min(bb[0], z);
          bb[1] = std::max(bb[1], z);
          bb[2] = std::min(bb[2], y);
          bb[3] = std::max(bb[3], y);
          bb[4] = std::min(bb[4], x);
          bb[5] = std::max(bb[5], x);
        }
  if (bb[1] < 0) fail_data("mask has no nonzero voxels");
  return bb;
}

// Load one preprocessed subject (normalized ct + binary mask at a common
// cubic side) as a two-channel sample.
inline Sample load_sample(const std::string& root, const std::string& id,
                          int label) {
  const std::filesystem::path dir = subject_dir(root, id);
  const Volume ct = read_volume((dir / "ct.mvol.json").string());
  const Volume mask = read_volume((dir / "nodule_mask.mvol.json").string());
  Sample s;
  s.subject_id = id;
  s.input = assemble_input(ct, mask);
  s.label = label;
  return s;
}

inline SampleSet load_samples(const DatasetIndex& idx,
                              const std::vector<std::string>& ids) {
  SampleSet out(ids.size());
  std::mutex err_mu;
  std::exception_ptr err;
  parallel_for(int64_t(ids.size()), [&](int64_t i) {
    try {
      const std::string& id = ids[size_t(i)];
      auto it = idx.labels.find(id);
      if (it == idx.labels.end())
        fail_data("subject ", id, " not present in manifest under ", idx.root);
      out[size_t(i)] = load_sample(idx.root, id, it->second);
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (!err) err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);
  return out;
}

inline std::vector<ClinicalRecord> load_clinical(const std::string& root) {
  return read_clinical_csv(
      (std::filesystem::path(root) / "clinical.csv").string());
}

}  // namespace colearn
