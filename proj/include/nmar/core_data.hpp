#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nmar/error.hpp"

namespace nmar {

/// Column-named table of reals where a blank cell is an absent value.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> values;  // one vector per column

  std::size_t rows() const { return values.empty() ? 0 : values.front().size(); }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) return std::nullopt;
    return static_cast<std::size_t>(it - columns.begin());
  }

  const std::vector<std::optional<double>>& column(const std::string& name) const {
    auto idx = find(name);
    if (!idx) throw Error(ErrorKind::MissingColumn, "column '" + name + "' not in table");
    return values[*idx];
  }

  void add_column(std::string name, std::vector<std::optional<double>> col) {
    if (!values.empty() && col.size() != rows())
      throw Error(ErrorKind::InvalidArgument, "column length mismatch for '" + name + "'");
    columns.push_back(std::move(name));
    values.push_back(std::move(col));
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_cell(const std::string& cell, std::size_t line_no) {
  if (cell.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw Error(ErrorKind::ParseError,
                "line " + std::to_string(line_no) + ": cannot parse '" + cell + "' as a number");
  return v;
}

}  // namespace detail

/// Reads a CSV with a mandatory header row. Delimiter ',', decimal '.', no quoting.
inline Table read_csv(std::istream& in) {
  Table t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) break;
  }
  if (line_no == 0 || detail::trim(line).empty())
    throw Error(ErrorKind::ParseError, "empty CSV: header row required");
  auto header = detail::split_csv_line(line);
  std::set<std::string> seen;
  for (auto& h : header) {
    if (h.empty()) throw Error(ErrorKind::ParseError, "empty column name in header");
    if (!seen.insert(h).second) throw Error(ErrorKind::ParseError, "duplicate column '" + h + "'");
  }
  t.columns = header;
  t.values.assign(header.size(), {});
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": expected " +
                                             std::to_string(header.size()) + " cells, got " +
                                             std::to_string(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c)
      t.values[c].push_back(detail::parse_cell(cells[c], line_no));
  }
  return t;
}

inline Table read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open '" + path + "'");
  return read_csv(in);
}

inline void write_csv(std::ostream& out, const Table& t) {
  out.precision(17);
  for (std::size_t c = 0; c < t.columns.size(); ++c) out << (c ? "," : "") << t.columns[c];
  out << '\n';
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      if (c) out << ',';
      if (t.values[c][r]) out << *t.values[c][r];
    }
    out << '\n';
  }
}

/// Which columns play which role. x1 enters the response model linearly,
/// x2 is the response instrument (outcome model only).
struct ColumnRoles {
  std::vector<std::string> x1_columns;
  std::vector<std::string> x2_columns;
  std::string y_column = "y";
  std::string delta_column = "delta";

  void validate() const {
    if (x1_columns.empty() && x2_columns.empty())
      throw Error(ErrorKind::InvalidRoles, "x1 and x2 column sets are both empty");
    std::set<std::string> all;
    for (const auto& c : x1_columns)
      if (!all.insert(c).second) throw Error(ErrorKind::InvalidRoles, "duplicate column '" + c + "'");
    for (const auto& c : x2_columns)
      if (!all.insert(c).second)
        throw Error(ErrorKind::InvalidRoles, "column '" + c + "' listed in both x1 and x2");
    if (all.count(y_column)) throw Error(ErrorKind::InvalidRoles, "y column is also a covariate");
    if (all.count(delta_column))
      throw Error(ErrorKind::InvalidRoles, "delta column is also a covariate");
    for (const auto& c : x1_columns) {
      std::string lower = c;
      std::transform(lower.begin(), lower.end(), lower.begin(),
                     [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
      if (lower == "intercept" || lower == "(intercept)" || lower == "const")
        throw Error(ErrorKind::InvalidRoles, "x1 must not contain an intercept column ('" + c + "')");
    }
  }
};

/// Validated in-memory sample. Row order is the unit identity; `unit_ids`
/// keys the per-unit random streams so that permuting rows together with
/// their ids leaves every fit unchanged.
struct Dataset {
  Eigen::MatrixXd x1;  // n x p
  Eigen::MatrixXd x2;  // n x q
  std::vector<std::optional<double>> y;
  std::vector<int> delta;
  std::vector<std::uint64_t> unit_ids;
  std::vector<std::string> x1_names;
  std::vector<std::string> x2_names;
  std::string y_name = "y";
  std::string delta_name = "delta";
  std::vector<std::string> warnings;

  std::size_t n() const { return delta.size(); }
  Eigen::Index p() const { return x1.cols(); }
  Eigen::Index q() const { return x2.cols(); }

  std::size_t responders() const {
    return static_cast<std::size_t>(std::count(delta.begin(), delta.end(), 1));
  }

  double y_at(std::size_t i) const {
    if (!y[i]) throw Error(ErrorKind::InvalidArgument, "y is absent for unit " + std::to_string(i));
    return *y[i];
  }

  /// [x1 | x2] design, the covariate vector seen by the outcome model.
  Eigen::MatrixXd covariates() const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(n()), p() + q());
    out << x1, x2;
    return out;
  }

  bool operator==(const Dataset& o) const {
    return x1 == o.x1 && x2 == o.x2 && y == o.y && delta == o.delta && unit_ids == o.unit_ids &&
           x1_names == o.x1_names && x2_names == o.x2_names && y_name == o.y_name &&
           delta_name == o.delta_name;
  }
};

inline ColumnRoles roles_of(const Dataset& d) {
  return ColumnRoles{d.x1_names, d.x2_names, d.y_name, d.delta_name};
}

/// Builds a Dataset from a raw table, enforcing the missing-outcome and
/// continuous-outcome invariants. Row order is preserved.
inline Dataset validate_dataset(const Table& raw, const ColumnRoles& roles) {
  roles.validate();
  const std::size_t n = raw.rows();

  auto require = [&](const std::string& name) -> const std::vector<std::optional<double>>& {
    return raw.column(name);
  };

  Dataset d;
  d.x1_names = roles.x1_columns;
  d.x2_names = roles.x2_columns;
  d.y_name = roles.y_column;
  d.delta_name = roles.delta_column;
  d.x1.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(roles.x1_columns.size()));
  d.x2.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(roles.x2_columns.size()));

  auto fill = [&](Eigen::MatrixXd& m, const std::vector<std::string>& names) {
    for (std::size_t c = 0; c < names.size(); ++c) {
      const auto& col = require(names[c]);
      for (std::size_t i = 0; i < n; ++i) {
        if (!col[i] || !std::isfinite(*col[i]))
          throw Error(ErrorKind::InvalidArgument, "covariate '" + names[c] + "' row " +
                                                      std::to_string(i) + " is blank or not finite");
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = *col[i];
      }
    }
  };
  fill(d.x1, roles.x1_columns);
  fill(d.x2, roles.x2_columns);

  const auto& ycol = require(roles.y_column);
  const auto& dcol = require(roles.delta_column);
  d.delta.resize(n);
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!dcol[i] || (*dcol[i] != 0.0 && *dcol[i] != 1.0))
      throw Error(ErrorKind::DeltaNotBinary, "row " + std::to_string(i) + " has delta outside {0,1}");
    d.delta[i] = *dcol[i] == 1.0 ? 1 : 0;
    if (d.delta[i] == 1) {
      if (!ycol[i] || !std::isfinite(*ycol[i]))
        throw Error(ErrorKind::ObservedYMissing, "row " + std::to_string(i) + " has delta=1 but no y");
      d.y[i] = *ycol[i];
    }
    // delta = 0: the outcome is never read, whatever the cell holds
  }

  for (Eigen::Index c = 0; c < d.x1.cols(); ++c) {
    if (n > 1 && (d.x1.col(c).array() == d.x1(0, c)).all())
      throw Error(ErrorKind::InvalidRoles,
                  "x1 column '" + roles.x1_columns[static_cast<std::size_t>(c)] +
                      "' is constant; x1 must exclude the intercept");
  }

  std::set<double> distinct;
  for (std::size_t i = 0; i < n; ++i)
    if (d.delta[i] == 1) distinct.insert(*d.y[i]);
  if (!distinct.empty() && distinct.size() <= 2)
    throw Error(ErrorKind::DiscreteOutcome,
                "observed y takes " + std::to_string(distinct.size()) + " distinct values");
  if (distinct.size() >= 3 && distinct.size() < 10)
    d.warnings.push_back("observed y has only " + std::to_string(distinct.size()) +
                         " distinct values; kernel smoothing assumes a continuous outcome");
  if (roles.x2_columns.empty())
    d.warnings.push_back("no instrument columns (x2 empty); identification of the tilt relies on one");

  d.unit_ids.resize(n);
  std::iota(d.unit_ids.begin(), d.unit_ids.end(), std::uint64_t{0});
  return d;
}

/// Inverse of validate_dataset: nonresponder outcomes become blank cells.
inline Table to_table(const Dataset& d) {
  Table t;
  const std::size_t n = d.n();
  auto column_of = [&](const Eigen::MatrixXd& m, Eigen::Index c) {
    std::vector<std::optional<double>> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = m(static_cast<Eigen::Index>(i), c);
    return col;
  };
  for (Eigen::Index c = 0; c < d.x1.cols(); ++c)
    t.add_column(d.x1_names[static_cast<std::size_t>(c)], column_of(d.x1, c));
  for (Eigen::Index c = 0; c < d.x2.cols(); ++c)
    t.add_column(d.x2_names[static_cast<std::size_t>(c)], column_of(d.x2, c));
  t.add_column(d.y_name, d.y);
  std::vector<std::optional<double>> dcol(n);
  for (std::size_t i = 0; i < n; ++i) dcol[i] = static_cast<double>(d.delta[i]);
  t.add_column(d.delta_name, dcol);
  return t;
}

/// Stable partition of 0..n-1 by the response indicator.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_responders(const Dataset& d) {
  std::vector<std::size_t> resp, nonresp;
  for (std::size_t i = 0; i < d.n(); ++i) (d.delta[i] == 1 ? resp : nonresp).push_back(i);
  return {std::move(resp), std::move(nonresp)};
}

/// Replaces every covariate entry and observed outcome v by log(v)/2.
inline Dataset log_half_transform(const Dataset& d) {
  Dataset out = d;
  auto tx = [](double v, const char* what) {
    if (!(v > 0.0))
      throw Error(ErrorKind::NonPositiveValue, std::string(what) + " value " + std::to_string(v) +
                                                   " is not strictly positive");
    return std::log(v) / 2.0;
  };
  for (Eigen::Index i = 0; i < out.x1.rows(); ++i)
    for (Eigen::Index c = 0; c < out.x1.cols(); ++c) out.x1(i, c) = tx(d.x1(i, c), "covariate");
  for (Eigen::Index i = 0; i < out.x2.rows(); ++i)
    for (Eigen::Index c = 0; c < out.x2.cols(); ++c) out.x2(i, c) = tx(d.x2(i, c), "covariate");
  for (std::size_t i = 0; i < out.n(); ++i)
    if (out.y[i]) out.y[i] = tx(*d.y[i], "outcome");
  return out;
}

/// Rows `idx` of d, in that order. Unit ids are reassigned 0..k-1 unless
/// `keep_ids` is set.
inline Dataset subset_rows(const Dataset& d, const std::vector<std::size_t>& idx, bool keep_ids) {
  Dataset out;
  out.x1_names = d.x1_names;
  out.x2_names = d.x2_names;
  out.y_name = d.y_name;
  out.delta_name = d.delta_name;
  out.warnings = d.warnings;
  const auto k = static_cast<Eigen::Index>(idx.size());
  out.x1.resize(k, d.x1.cols());
  out.x2.resize(k, d.x2.cols());
  out.y.resize(idx.size());
  out.delta.resize(idx.size());
  out.unit_ids.resize(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto src = static_cast<Eigen::Index>(idx[r]);
    out.x1.row(static_cast<Eigen::Index>(r)) = d.x1.row(src);
    out.x2.row(static_cast<Eigen::Index>(r)) = d.x2.row(src);
    out.y[r] = d.y[idx[r]];
    out.delta[r] = d.delta[idx[r]];
    out.unit_ids[r] = keep_ids ? d.unit_ids[idx[r]] : static_cast<std::uint64_t>(r);
  }
  return out;
}

/// Scalar estimating function U(theta; x, y) with its theta-derivative.
/// `x` is the full covariate row [x1 | x2].
struct EstimandSpec {
  using Fn = std::function<double(double theta, const Eigen::RowVectorXd& x, double y)>;

  std::string name = "mean";
  Fn U;
  Fn dU;
  bool is_mean = false;
  int dimension = 1;

  static EstimandSpec mean() {
    EstimandSpec s;
    s.name = "mean";
    s.U = [](double theta, const Eigen::RowVectorXd&, double y) { return y - theta; };
    s.dU = [](double, const Eigen::RowVectorXd&, double) { return -1.0; };
    s.is_mean = true;
    return s;
  }

  static EstimandSpec custom(std::string name, Fn u, Fn du) {
    EstimandSpec s;
    s.name = std::move(name);
    s.U = std::move(u);
    s.dU = std::move(du);
    return s;
  }
};

}  // namespace nmar
