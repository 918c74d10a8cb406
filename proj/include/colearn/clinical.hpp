#pragma once

// Clinical table schema and CSV parsing. The column set is fixed; cells are
// plain (no quoting), empty numeric cells mean "missing" and stay missing —
// the tree learner routes them, nothing imputes them.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "colearn/common.hpp"

namespace colearn {

enum class Gender { male, female };
enum class SmokerStatus { current, ex, never };

struct ClinicalRecord {
  std::string subject_id;
  Gender gender = Gender::male;
  double bmi = 0.0;
  std::optional<double> age_started_smoking;
  std::optional<double> age_quit_smoking;
  std::optional<double> cigs_per_day;
  SmokerStatus smoker_status = SmokerStatus::never;
  std::optional<double> pack_years;
  std::optional<double> smoking_duration;
  std::optional<int> label;  // 0 benign, 1 malignant
};

inline const std::vector<std::string>& clinical_columns() {
  static const std::vector<std::string> cols = {
      "subject_id",     "gender",           "bmi",
      "age_started_smoking", "age_quit_smoking", "cigs_per_day",
      "smoker_status",  "pack_years",       "smoking_duration",
      "label"};
  return cols;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::optional<double> parse_numeric_cell(const std::string& cell, int row,
                                                const std::string& col) {
  if (cell.empty()) return std::nullopt;
  size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(cell, &pos);
  } catch (const std::exception&) {
    fail_data("row ", row, ", column ", col, ": non-numeric value \"", cell, "\"");
  }
  if (pos != cell.size())
    fail_data("row ", row, ", column ", col, ": non-numeric value \"", cell, "\"");
  if (!std::isfinite(v))
    fail_data("row ", row, ", column ", col, ": non-finite value \"", cell, "\"");
  return v;
}

}  // namespace detail

// Header must list the documented columns in order; the trailing label column
// may be omitted for unlabeled tables.
inline std::vector<ClinicalRecord> read_clinical_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open clinical csv: ", path.string());

  std::string line;
  if (!std::getline(is, line)) fail_data("empty clinical csv: ", path.string());
  auto header = detail::split_csv_line(line);
  const auto& cols = clinical_columns();
  bool has_label = true;
  if (header.size() == cols.size() - 1) has_label = false;
  else if (header.size() != cols.size())
    fail_data("clinical csv header has ", header.size(), " columns, expected ",
              cols.size(), " (or ", cols.size() - 1, " without label)");
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] != cols[i])
      fail_data("unknown column \"", header[i], "\" at position ", i + 1, ", expected \"",
                cols[i], "\"");
  }

  std::vector<ClinicalRecord> out;
  std::unordered_set<std::string> seen;
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      fail_data("row ", row, ": has ", cells.size(), " cells, expected ", header.size());

    ClinicalRecord r;
    r.subject_id = cells[0];
    if (r.subject_id.empty()) fail_data("row ", row, ", column subject_id: empty");
    if (!seen.insert(r.subject_id).second)
      fail_data("row ", row, ": duplicate subject_id \"", r.subject_id, "\"");

    const std::string& g = cells[1];
    if (g == "male") r.gender = Gender::male;
    else if (g == "female") r.gender = Gender::female;
    else fail_data("row ", row, ", column gender: invalid value \"", g, "\"");

    auto bmi = detail::parse_numeric_cell(cells[2], row, "bmi");
    if (!bmi) fail_data("row ", row, ", column bmi: required value missing");
    r.bmi = *bmi;

    r.age_started_smoking = detail::parse_numeric_cell(cells[3], row, "age_started_smoking");
    r.age_quit_smoking = detail::parse_numeric_cell(cells[4], row, "age_quit_smoking");
    r.cigs_per_day = detail::parse_numeric_cell(cells[5], row, "cigs_per_day");

    const std::string& s = cells[6];
    if (s == "current") r.smoker_status = SmokerStatus::current;
    else if (s == "ex") r.smoker_status = SmokerStatus::ex;
    else if (s == "never") r.smoker_status = SmokerStatus::never;
    else fail_data("row ", row, ", column smoker_status: invalid value \"", s, "\"");

    r.pack_years = detail::parse_numeric_cell(cells[7], row, "pack_years");
    r.smoking_duration = detail::parse_numeric_cell(cells[8], row, "smoking_duration");

    if (has_label && !cells[9].empty()) {
      auto lv = detail::parse_numeric_cell(cells[9], row, "label");
      if (*lv != 0.0 && *lv != 1.0)
        fail_data("row ", row, ", column label: must be 0 or 1, got \"", cells[9], "\"");
      r.label = int(*lv);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_clinical_csv(const std::vector<ClinicalRecord>& records,
                               const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) fail_data("cannot open for write: ", path.string());
  const auto& cols = clinical_columns();
  for (size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << "\n";
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  for (const auto& r : records) {
    os << r.subject_id << ",";
    os << (r.gender == Gender::male ? "male" : "female") << ",";
    os << num(r.bmi) << ",";
    os << num(r.age_started_smoking) << "," << num(r.age_quit_smoking) << ","
       << num(r.cigs_per_day) << ",";
    switch (r.smoker_status) {
      case SmokerStatus::current: os << "current"; break;
      case SmokerStatus::ex: os << "ex"; break;
      case SmokerStatus::never: os << "never"; break;
    }
    os << "," << num(r.pack_years) << "," << num(r.smoking_duration) << ",";
    if (r.label) os << *r.label;
    os << "\n";
  }
  if (!os) fail_data("write failed: ", path.string());
}

}  // namespace colearn
