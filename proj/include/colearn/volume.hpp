#pragma once

// Volume container and the .mvol on-disk format: a JSON header
// (<stem>.mvol.json) describing dtype/shape/spacing/kind next to a raw
// little-endian f32 blob (<stem>.raw), row-major in [z, y, x] order.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "colearn/common.hpp"

namespace colearn {

enum class VolumeKind { hu, normalized, mask };

inline std::string kind_name(VolumeKind k) {
  switch (k) {
    case VolumeKind::hu: return "hu";
    case VolumeKind::normalized: return "normalized";
    case VolumeKind::mask: return "mask";
  }
  return "?";
}

inline VolumeKind kind_from_name(const std::string& s) {
  if (s == "hu") return VolumeKind::hu;
  if (s == "normalized") return VolumeKind::normalized;
  if (s == "mask") return VolumeKind::mask;
  fail_data("unknown volume kind \"", s, "\"");
}

struct Volume {
  std::array<int64_t, 3> shape{0, 0, 0};  // (depth, height, width) = (z, y, x)
  std::optional<std::array<double, 3>> spacing_mm;  // (sz, sy, sx)
  VolumeKind kind = VolumeKind::hu;
  std::vector<float> data;

  int64_t numel() const { return shape[0] * shape[1] * shape[2]; }
  int64_t depth() const { return shape[0]; }
  int64_t height() const { return shape[1]; }
  int64_t width() const { return shape[2]; }

  float& at(int64_t z, int64_t y, int64_t x) {
    return data[size_t((z * shape[1] + y) * shape[2] + x)];
  }
  float at(int64_t z, int64_t y, int64_t x) const {
    return data[size_t((z * shape[1] + y) * shape[2] + x)];
  }

  static Volume make(std::array<int64_t, 3> shape, VolumeKind kind,
                     std::optional<std::array<double, 3>> spacing = std::nullopt,
                     float fill = 0.f) {
    Volume v;
    v.shape = shape;
    v.kind = kind;
    v.spacing_mm = spacing;
    v.data.assign(size_t(v.numel()), fill);
    return v;
  }
};

inline void validate_volume(const Volume& v) {
  require(v.shape[0] > 0 && v.shape[1] > 0 && v.shape[2] > 0,
          "volume shape must be positive, got " + std::to_string(v.shape[0]) + "x" +
              std::to_string(v.shape[1]) + "x" + std::to_string(v.shape[2]));
  require(int64_t(v.data.size()) == v.numel(),
          strcat_msg("volume data length ", v.data.size(), " != shape product ", v.numel()));
  if (v.spacing_mm) {
    for (double s : *v.spacing_mm)
      require(s > 0.0 && std::isfinite(s), "volume spacing must be positive and finite");
  }
  if (v.kind == VolumeKind::mask) {
    for (size_t i = 0; i < v.data.size(); ++i)
      if (v.data[i] != 0.f && v.data[i] != 1.f)
        fail_data("mask volume holds non-binary value ", v.data[i], " at flat index ", i);
  } else if (v.kind == VolumeKind::normalized) {
    for (size_t i = 0; i < v.data.size(); ++i)
      if (!(v.data[i] >= 0.f && v.data[i] <= 1.f))
        fail_data("normalized volume holds out-of-range value ", v.data[i], " at flat index ", i);
  }
}

// "x.mvol.json" -> "x.raw"
inline std::filesystem::path raw_path_for(const std::filesystem::path& header_path) {
  std::string s = header_path.string();
  const std::string suffix = ".mvol.json";
  if (s.size() < suffix.size() || s.compare(s.size() - suffix.size(), suffix.size(), suffix) != 0)
    fail_data("volume header path must end in .mvol.json: ", s);
  return std::filesystem::path(s.substr(0, s.size() - suffix.size()) + ".raw");
}

inline void write_volume(const Volume& v, const std::filesystem::path& header_path) {
  validate_volume(v);
  const auto raw_path = raw_path_for(header_path);

  nlohmann::ordered_json h;
  h["dtype"] = "f32le";
  h["shape"] = {v.shape[0], v.shape[1], v.shape[2]};
  if (v.spacing_mm)
    h["spacing_mm"] = {(*v.spacing_mm)[0], (*v.spacing_mm)[1], (*v.spacing_mm)[2]};
  else
    h["spacing_mm"] = nullptr;
  h["kind"] = kind_name(v.kind);
  h["order"] = "zyx-row-major";
  h["raw"] = raw_path.filename().string();

  {
    std::ofstream os(header_path);
    if (!os) fail_data("cannot open for write: ", header_path.string());
    os << h.dump(2) << "\n";
    if (!os) fail_data("write failed: ", header_path.string());
  }
  {
    std::ofstream os(raw_path, std::ios::binary);
    if (!os) fail_data("cannot open for write: ", raw_path.string());
    os.write(reinterpret_cast<const char*>(v.data.data()),
             std::streamsize(v.data.size() * sizeof(float)));
    if (!os) fail_data("write failed: ", raw_path.string());
  }
}

inline Volume read_volume(const std::filesystem::path& header_path) {
  std::ifstream is(header_path);
  if (!is) fail_data("missing volume header: ", header_path.string());
  nlohmann::json h;
  try {
    is >> h;
  } catch (const nlohmann::json::exception& e) {
    fail_data("bad volume header ", header_path.string(), ": ", e.what());
  }

  Volume v;
  try {
    require(h.at("dtype").get<std::string>() == "f32le", "volume dtype must be f32le");
    require(h.at("order").get<std::string>() == "zyx-row-major",
            "volume order must be zyx-row-major");
    auto sh = h.at("shape");
    require(sh.is_array() && sh.size() == 3, "volume shape must have 3 entries");
    for (int i = 0; i < 3; ++i) v.shape[size_t(i)] = sh[size_t(i)].get<int64_t>();
    if (h.contains("spacing_mm") && !h["spacing_mm"].is_null()) {
      auto sp = h["spacing_mm"];
      require(sp.is_array() && sp.size() == 3, "spacing_mm must have 3 entries");
      v.spacing_mm = std::array<double, 3>{sp[0].get<double>(), sp[1].get<double>(),
                                           sp[2].get<double>()};
    }
    v.kind = kind_from_name(h.at("kind").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail_data("bad volume header ", header_path.string(), ": ", e.what());
  }
  require(v.shape[0] > 0 && v.shape[1] > 0 && v.shape[2] > 0,
          "volume header declares non-positive shape: " + header_path.string());

  const auto raw_path = raw_path_for(header_path);
  std::ifstream rs(raw_path, std::ios::binary | std::ios::ate);
  if (!rs) fail_data("missing raw file: ", raw_path.string());
  const int64_t bytes = int64_t(rs.tellg());
  const int64_t expected = v.numel() * int64_t(sizeof(float));
  if (bytes != expected)
    fail_data("raw byte count mismatch for ", raw_path.string(), ": header shape needs ",
              expected, " bytes, file has ", bytes);
  rs.seekg(0);
  v.data.resize(size_t(v.numel()));
  rs.read(reinterpret_cast<char*>(v.data.data()), std::streamsize(expected));
  if (!rs) fail_data("short read: ", raw_path.string());

  if (v.kind != VolumeKind::hu) {
    for (size_t i = 0; i < v.data.size(); ++i)
      if (!std::isfinite(v.data[i]))
        fail_data("non-finite value in ", kind_name(v.kind), " volume ", header_path.string(),
                  " at flat index ", i);
  }
  validate_volume(v);
  return v;
}

}  // namespace colearn
