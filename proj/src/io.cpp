#include "lpsa/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace lpsa {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cur.push_back('"');
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

double parse_cell(const std::string& raw, std::size_t row, const std::string& column) {
  const std::string cell = trim(raw);
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last) {
    throw DataError("ingestion error at (row " + std::to_string(row) + ", col " + column +
                    "): cannot parse '" + cell + "' as a number");
  }
  if (!std::isfinite(v)) {
    throw DataError("ingestion error at (row " + std::to_string(row) + ", col " + column +
                    "): non-finite value '" + cell + "'");
  }
  return v;
}

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

std::vector<std::string> resolve_group(const std::vector<std::string>& header,
                                       const std::vector<std::string>& explicit_names,
                                       const std::string& prefix) {
  if (!explicit_names.empty()) return explicit_names;
  std::vector<std::string> out;
  if (prefix.empty()) return out;
  for (const auto& h : header) {
    if (h.size() > prefix.size() && h.compare(0, prefix.size(), prefix) == 0) out.push_back(h);
  }
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

Dataset load_dataset(const std::filesystem::path& csv_path, const DatasetSchema& schema) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open dataset " + csv_path.string());

  std::string line;
  if (!std::getline(in, line)) throw DataError("dataset " + csv_path.string() + " is empty");
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);
  std::map<std::string, std::size_t> column_of;
  for (std::size_t c = 0; c < header.size(); ++c) column_of.emplace(header[c], c);

  auto require_column = [&](const std::string& name) {
    const auto it = column_of.find(name);
    if (it == column_of.end()) throw DataError("schema error: column '" + name + "' not found");
    return it->second;
  };

  const auto measurement_names = resolve_group(header, schema.measurements, schema.measurement_prefix);
  if (measurement_names.empty()) throw DataError("schema error: no measurement columns selected");
  std::vector<std::vector<std::string>> high_rank_names = schema.high_rank;
  for (const auto& prefix : schema.high_rank_prefixes) {
    high_rank_names.push_back(resolve_group(header, {}, prefix));
  }

  const std::size_t outcome_col = require_column(schema.outcome);
  const std::size_t treatment_col = require_column(schema.treatment);
  const std::size_t id_col = schema.id_column.empty() ? header.size() : require_column(schema.id_column);
  std::vector<std::size_t> control_cols;
  for (const auto& c : schema.controls) control_cols.push_back(require_column(c));
  std::vector<std::size_t> measurement_cols;
  for (const auto& c : measurement_names) measurement_cols.push_back(require_column(c));
  std::vector<std::vector<std::size_t>> high_rank_cols;
  for (const auto& group : high_rank_names) {
    if (group.size() != measurement_names.size()) {
      throw DataError("schema error: high-rank covariate group has " + std::to_string(group.size()) +
                      " columns, expected " + std::to_string(measurement_names.size()));
    }
    auto& cols = high_rank_cols.emplace_back();
    for (const auto& c : group) cols.push_back(require_column(c));
  }

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError("ingestion error at (row " + std::to_string(rows.size() + 1) + "): expected " +
                      std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    rows.push_back(std::move(fields));
  }
  const auto n = static_cast<Index>(rows.size());
  const auto periods = static_cast<Index>(measurement_cols.size());

  VectorXd y(n);
  std::vector<int> s(static_cast<std::size_t>(n));
  MatrixXd z(n, static_cast<Index>(control_cols.size()));
  MatrixXd x(periods, n);
  std::vector<MatrixXd> w(high_rank_cols.size(), MatrixXd(periods, n));
  std::vector<std::string> unit_ids;
  int max_label = 0;

  for (Index i = 0; i < n; ++i) {
    const auto& f = rows[static_cast<std::size_t>(i)];
    const auto row = static_cast<std::size_t>(i) + 1;
    unit_ids.push_back(id_col < header.size() ? trim(f[id_col]) : std::to_string(row));
    y(i) = parse_cell(f[outcome_col], row, schema.outcome);
    const double label = parse_cell(f[treatment_col], row, schema.treatment);
    if (label != std::floor(label) || label < 0) {
      throw DataError("domain error at (row " + std::to_string(row) + ", col " + schema.treatment +
                      "): treatment label must be a nonnegative integer");
    }
    s[static_cast<std::size_t>(i)] = static_cast<int>(label);
    max_label = std::max(max_label, static_cast<int>(label));
    for (std::size_t c = 0; c < control_cols.size(); ++c) {
      z(i, static_cast<Index>(c)) = parse_cell(f[control_cols[c]], row, schema.controls[c]);
    }
    for (Index t = 0; t < periods; ++t) {
      x(t, i) = parse_cell(f[measurement_cols[static_cast<std::size_t>(t)]], row,
                           measurement_names[static_cast<std::size_t>(t)]);
    }
    for (std::size_t l = 0; l < high_rank_cols.size(); ++l) {
      for (Index t = 0; t < periods; ++t) {
        w[l](t, i) = parse_cell(f[high_rank_cols[l][static_cast<std::size_t>(t)]], row,
                                high_rank_names[l][static_cast<std::size_t>(t)]);
      }
    }
  }

  int num_levels = schema.num_levels;
  if (num_levels <= 0) num_levels = max_label + 1;
  if (max_label >= num_levels) {
    throw DataError("domain error: treatment label " + std::to_string(max_label) +
                    " exceeds declared J = " + std::to_string(num_levels - 1));
  }

  return Dataset{MeasurementPanel(std::move(x), std::move(w), std::move(unit_ids), measurement_names),
                 TreatmentSample(std::move(y), std::move(s), std::move(z), num_levels)};
}

void write_dataset(const std::filesystem::path& csv_path, const Dataset& data,
                   const DatasetSchema& schema) {
  const auto& panel = data.panel;
  const auto& sample = data.sample;
  std::vector<std::string> header;
  if (!schema.id_column.empty()) header.push_back(schema.id_column);
  header.push_back(schema.outcome);
  header.push_back(schema.treatment);
  for (const auto& c : schema.controls) header.push_back(c);
  std::vector<std::string> measurement_names = schema.measurements;
  if (measurement_names.empty()) measurement_names = panel.row_ids();
  for (const auto& m : measurement_names) header.push_back(m);
  std::vector<std::vector<std::string>> high_rank_names = schema.high_rank;
  for (std::size_t l = high_rank_names.size(); l < panel.w().size(); ++l) {
    const std::string prefix = l < schema.high_rank_prefixes.size() ? schema.high_rank_prefixes[l]
                                                                     : "w" + std::to_string(l) + "_";
    auto& group = high_rank_names.emplace_back();
    for (Index t = 0; t < panel.periods(); ++t) group.push_back(prefix + std::to_string(t + 1));
  }
  for (const auto& g : high_rank_names) header.insert(header.end(), g.begin(), g.end());

  CsvWriter out(header);
  for (Index i = 0; i < sample.size(); ++i) {
    std::vector<std::string> row;
    if (!schema.id_column.empty()) row.push_back(panel.unit_ids()[static_cast<std::size_t>(i)]);
    row.push_back(format_double(sample.y()(i)));
    row.push_back(std::to_string(sample.s()[static_cast<std::size_t>(i)]));
    for (Index c = 0; c < sample.controls(); ++c) row.push_back(format_double(sample.z()(i, c)));
    for (Index t = 0; t < panel.periods(); ++t) row.push_back(format_double(panel.x()(t, i)));
    for (const auto& wl : panel.w()) {
      for (Index t = 0; t < panel.periods(); ++t) row.push_back(format_double(wl(t, i)));
    }
    out.add_row(std::move(row));
  }
  out.write(csv_path);
}

void CsvWriter::add_row(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

std::string CsvWriter::str() const {
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) os << ',';
      os << quote_if_needed(r[c]);
    }
    os << '\n';
  };
  emit(header_);
  for (const auto& r : rows_) emit(r);
  return os.str();
}

void CsvWriter::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << str();
}

}  // namespace lpsa
