#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace svdlnm {

/// Per-area, per-time counts with exposures, linear covariates and offsets.
/// Rows are stored sorted by (area, time); times within an area must be
/// consecutive integers.
struct PanelData {
  std::vector<std::string> area_ids;     // dense index -> id, first appearance
  std::vector<int> row_area;             // per row
  std::vector<long> row_time;            // per row
  Eigen::VectorXd y;
  Eigen::VectorXd exposure;
  Eigen::VectorXd offset;
  Eigen::MatrixXd covariates;            // n x H
  std::vector<std::string> covariate_names;

  int num_areas() const { return static_cast<int>(area_ids.size()); }
  Eigen::Index num_rows() const { return y.size(); }
  int num_covariates() const { return static_cast<int>(covariate_names.size()); }

  /// Half-open row range [first, last) of one area.
  std::pair<Eigen::Index, Eigen::Index> area_rows(int area) const {
    Eigen::Index first = 0;
    while (first < num_rows() && row_area[first] != area) ++first;
    Eigen::Index last = first;
    while (last < num_rows() && row_area[last] == area) ++last;
    return {first, last};
  }

  void validate() const {
    if (y.size() != exposure.size() || y.size() != offset.size() ||
        static_cast<Eigen::Index>(row_area.size()) != y.size() ||
        static_cast<Eigen::Index>(row_time.size()) != y.size() ||
        (covariates.size() > 0 && covariates.rows() != y.size()))
      throw std::runtime_error("panel: misaligned column lengths");
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (y[i] < 0 || y[i] != std::floor(y[i]))
        throw std::runtime_error("panel: y must contain nonnegative integers");
      if (!std::isfinite(exposure[i]) || !std::isfinite(offset[i]))
        throw std::runtime_error("panel: non-finite exposure or offset");
    }
    if (covariates.size() > 0 && !covariates.allFinite())
      throw std::runtime_error("panel: non-finite covariate");
    for (Eigen::Index i = 1; i < y.size(); ++i) {
      if (row_area[i] == row_area[i - 1] && row_time[i] != row_time[i - 1] + 1)
        throw std::runtime_error("panel: times within an area must be consecutive integers");
      if (row_area[i] < row_area[i - 1])
        throw std::runtime_error("panel: rows must be grouped by area");
    }
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& s, const char* what, long line_no) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(std::string("panel csv line ") + std::to_string(line_no) +
                             ": cannot parse " + what + " value '" + s + "'");
  }
}

}  // namespace detail

/// Reads a panel CSV with header `area_id,time,y,exposure,offset[,cov_*...]`.
/// Leading `#` comment lines are skipped. Rows are sorted by (area, time)
/// with areas in order of first appearance.
inline PanelData read_panel_csv(std::istream& in) {
  std::string line;
  long line_no = 0;
  // Skip comment lines before the header.
  do {
    if (!std::getline(in, line)) throw std::runtime_error("panel csv: empty input");
    ++line_no;
  } while (!line.empty() && line[0] == '#');

  auto header = detail::split_csv_line(line);
  const std::vector<std::string> required = {"area_id", "time", "y", "exposure", "offset"};
  if (header.size() < required.size())
    throw std::runtime_error("panel csv: header must start with area_id,time,y,exposure,offset");
  for (size_t i = 0; i < required.size(); ++i)
    if (header[i] != required[i])
      throw std::runtime_error("panel csv: expected header column '" + required[i] +
                               "', found '" + header[i] + "'");
  std::vector<std::string> cov_names(header.begin() + required.size(), header.end());

  struct Row {
    int area;
    long time;
    double y, exposure, offset;
    std::vector<double> covs;
  };
  std::vector<Row> rows;
  std::unordered_map<std::string, int> area_index;
  std::vector<std::string> area_ids;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw std::runtime_error("panel csv line " + std::to_string(line_no) +
                               ": expected " + std::to_string(header.size()) + " fields");
    Row r;
    auto [it, inserted] = area_index.emplace(fields[0], static_cast<int>(area_ids.size()));
    if (inserted) area_ids.push_back(fields[0]);
    r.area = it->second;
    r.time = static_cast<long>(detail::parse_double(fields[1], "time", line_no));
    r.y = detail::parse_double(fields[2], "y", line_no);
    r.exposure = detail::parse_double(fields[3], "exposure", line_no);
    r.offset = detail::parse_double(fields[4], "offset", line_no);
    r.covs.reserve(cov_names.size());
    for (size_t c = 0; c < cov_names.size(); ++c)
      r.covs.push_back(detail::parse_double(fields[5 + c], cov_names[c].c_str(), line_no));
    rows.push_back(std::move(r));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.area != b.area ? a.area < b.area : a.time < b.time;
  });

  PanelData p;
  p.area_ids = std::move(area_ids);
  p.covariate_names = std::move(cov_names);
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  p.row_area.resize(n);
  p.row_time.resize(n);
  p.y.resize(n);
  p.exposure.resize(n);
  p.offset.resize(n);
  p.covariates.resize(n, static_cast<Eigen::Index>(p.covariate_names.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    p.row_area[i] = rows[i].area;
    p.row_time[i] = rows[i].time;
    p.y[i] = rows[i].y;
    p.exposure[i] = rows[i].exposure;
    p.offset[i] = rows[i].offset;
    for (int c = 0; c < p.num_covariates(); ++c) p.covariates(i, c) = rows[i].covs[c];
  }
  p.validate();
  return p;
}

inline PanelData read_panel_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open panel csv: " + path);
  return read_panel_csv(in);
}

inline void write_panel_csv(std::ostream& out, const PanelData& p,
                            const std::string& comment_header = "") {
  if (!comment_header.empty()) out << comment_header;
  out << "area_id,time,y,exposure,offset";
  for (auto& c : p.covariate_names) out << ',' << c;
  out << '\n';
  out.precision(17);
  for (Eigen::Index i = 0; i < p.num_rows(); ++i) {
    out << p.area_ids[p.row_area[i]] << ',' << p.row_time[i] << ','
        << static_cast<long long>(p.y[i]) << ',' << p.exposure[i] << ',' << p.offset[i];
    for (int c = 0; c < p.num_covariates(); ++c) out << ',' << p.covariates(i, c);
    out << '\n';
  }
}

}  // namespace svdlnm
