// CSV ingestion and flat-table output.
//
// A dataset file holds one row per unit. Measurement columns become rows of
// the T x n panel in file order; each high-rank covariate is a group of T
// columns in the same order as the measurements.
#pragma once

#include "lpsa/data.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lpsa {

struct DatasetSchema {
  std::string id_column;  // empty: units are labelled by row number
  std::string outcome;
  std::string treatment;
  std::vector<std::string> controls;
  std::vector<std::string> measurements;
  std::string measurement_prefix;  // used when `measurements` is empty
  std::vector<std::vector<std::string>> high_rank;
  std::vector<std::string> high_rank_prefixes;  // one prefix per covariate
  int num_levels = 0;  // J + 1; 0 infers max label + 1
};

struct Dataset {
  MeasurementPanel panel;
  TreatmentSample sample;
};

// Throws DataError naming the offending 1-based data row and column for
// missing columns, unparsable or non-finite cells, and labels outside 0..J.
Dataset load_dataset(const std::filesystem::path& csv_path, const DatasetSchema& schema);

// Writes the columns named by `schema` (resolved against the dataset shape).
// Doubles use the shortest round-trip representation.
void write_dataset(const std::filesystem::path& csv_path, const Dataset& data,
                   const DatasetSchema& schema);

std::string format_double(double v);

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}
  void add_row(std::vector<std::string> row);
  void write(const std::filesystem::path& path) const;
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace lpsa
