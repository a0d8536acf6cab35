#include "doctest.h"
#include "lpsa/io.hpp"
#include "oracles.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace lpsa;
namespace fs = std::filesystem;

namespace {

const fs::path kData = LPSA_TEST_DATA;

DatasetSchema toy_schema() {
  DatasetSchema s;
  s.id_column = "id";
  s.outcome = "y";
  s.treatment = "s";
  s.measurement_prefix = "x";
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lpsa_io_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("3-unit, 2-period CSV has a 2x3 panel") {
  const Dataset d = load_dataset(kData / "toy_shape.csv", toy_schema());
  CHECK(d.panel.periods() == 2);
  CHECK(d.panel.units() == 3);
  CHECK(d.sample.size() == 3);
  CHECK(d.sample.num_levels() == 2);
  CHECK(d.panel.x()(1, 0) == 1.0);
  CHECK(d.panel.x()(0, 2) == 1.1);
  CHECK(d.panel.unit_ids()[1] == "b");
  CHECK(d.sample.s()[1] == 1);
}

TEST_CASE("NaN cell is reported with row and column") {
  CHECK_THROWS_WITH_AS(load_dataset(kData / "toy_nan.csv", toy_schema()),
                       doctest::Contains("ingestion error at (row 2, col x2)"), DataError);
}

TEST_CASE("labels above the declared J are a domain error") {
  auto schema = toy_schema();
  schema.num_levels = 2;
  CHECK_THROWS_WITH_AS(load_dataset(kData / "toy_domain.csv", schema), doctest::Contains("domain error"),
                       DataError);
  schema.num_levels = 0;
  CHECK(load_dataset(kData / "toy_domain.csv", schema).sample.num_levels() == 3);
}

TEST_CASE("missing column is a schema error") {
  auto schema = toy_schema();
  schema.controls = {"age"};
  CHECK_THROWS_WITH_AS(load_dataset(kData / "toy_shape.csv", schema),
                       "schema error: column 'age' not found", DataError);
}

TEST_CASE("negative or fractional labels are rejected") {
  const auto p = scratch("frac.csv");
  std::ofstream(p) << "id,y,s,x1,x2\na,1,0.5,0,1\nb,2,1,1,0\n";
  CHECK_THROWS_WITH_AS(load_dataset(p, toy_schema()), doctest::Contains("domain error at (row 1, col s)"),
                       DataError);
}

TEST_CASE("write then load round-trips bit-exactly") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  const Index n = 9;
  const Index periods = 6;
  MatrixXd x = oracle::gaussian_matrix(periods, n, 5);
  MatrixXd w = oracle::gaussian_matrix(periods, n, 6);
  VectorXd y(n);
  MatrixXd z(n, 2);
  std::vector<int> s;
  for (Index i = 0; i < n; ++i) {
    y(i) = normal(rng) * 1e-7 + 1.0 / 3.0;
    z(i, 0) = normal(rng);
    z(i, 1) = normal(rng) * 1e300;
    s.push_back(static_cast<int>(i % 3));
  }
  DatasetSchema schema;
  schema.outcome = "y";
  schema.treatment = "s";
  schema.controls = {"z1", "z2"};
  schema.measurement_prefix = "m";
  schema.high_rank_prefixes = {"w_"};
  for (Index t = 0; t < periods; ++t) schema.measurements.push_back("m" + std::to_string(t + 1));
  const Dataset d{MeasurementPanel(x, {w}), TreatmentSample(y, s, z, 3)};
  const auto path = scratch("roundtrip.csv");
  write_dataset(path, d, schema);
  const Dataset back = load_dataset(path, schema);
  CHECK(std::memcmp(back.panel.x().data(), x.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0);
  REQUIRE(back.panel.w().size() == 1);
  CHECK(back.panel.w()[0] == w);
  CHECK(back.sample.y() == y);
  CHECK(back.sample.z() == z);
  CHECK(back.sample.s() == s);

  const auto again = scratch("roundtrip2.csv");
  write_dataset(again, back, schema);
  CHECK(slurp(path) == slurp(again));
}

TEST_CASE("format_double is shortest round-trip") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0) == "1");
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
}

TEST_CASE("CsvWriter quotes fields with separators") {
  CsvWriter w({"a", "b"});
  w.add_row({"x,y", "he said \"hi\""});
  CHECK(w.str() == "a,b\n\"x,y\",\"he said \"\"hi\"\"\"\n");
}
