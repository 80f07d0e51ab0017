#include <sstream>

#include "doctest.h"
#include "generators.hpp"
#include "rdperm/csv.hpp"
#include "rdperm/data.hpp"
#include "rdperm/errors.hpp"

using namespace rdperm;

namespace {

ErrorCode code_of(auto &&fn) {
  try {
    fn();
  } catch (const Error &e) {
    return e.code();
  }
  FAIL("expected an rdperm::Error");
  return ErrorCode::InvalidArgument;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v)
    out[i++] = x;
  return out;
}

} // namespace

TEST_CASE("treatment rule puts r == cutoff on the <= side") {
  CHECK(is_treated(0.0, 0.0, Direction::TreatedAtOrBelow));
  CHECK_FALSE(is_treated(0.0, 0.0, Direction::TreatedAbove));
  CHECK(is_treated(0.1, 0.0, Direction::TreatedAbove));
  CHECK_FALSE(is_treated(0.1, 0.0, Direction::TreatedAtOrBelow));

  const UnitFrame f(vec({-1, 0, 1}), vec({0, 0, 0}), {}, 0.0, Direction::TreatedAtOrBelow);
  CHECK(f.z() == vec({1, 1, 0}));
  CHECK(f.n_treated() == 2);
}

TEST_CASE("frame validation") {
  CHECK(code_of([] { UnitFrame(Vector(), Vector(), {}, 0.0, Direction::TreatedAbove); }) == ErrorCode::EmptyFrame);
  CHECK(code_of([] { UnitFrame(vec({1, 2}), vec({1}), {}, 0.0, Direction::TreatedAbove); }) ==
        ErrorCode::InvalidArgument);
  CHECK(code_of([] {
          UnitFrame(vec({1, 2}), vec({1, 2}), {{"b", CovariateKind::Binary, vec({0, 2})}}, 0.0, Direction::TreatedAbove);
        }) == ErrorCode::InvalidArgument);
  const UnitFrame f(vec({1, 2}), vec({1, 2}), {{"x", CovariateKind::Continuous, vec({3, 4})}}, 1.5,
                    Direction::TreatedAbove);
  CHECK(code_of([&] { f.covariate("nope"); }) == ErrorCode::MissingColumn);
  const UnitFrame c = f.centered();
  CHECK(c.cutoff() == 0.0);
  CHECK(c.r() == vec({-0.5, 0.5}));
  CHECK(c.z() == f.z());
}

TEST_CASE("csv parsing handles quotes, CRLF, BOM and short rows") {
  std::istringstream in("\xEF\xBB\xBFr,name,y\r\n1,\"a,b\",2\r\n3,\"say \"\"hi\"\"\"\r\n");
  const CsvTable t = parse_csv(in);
  REQUIRE(t.header.size() == 3);
  CHECK(t.header[0] == "r");
  CHECK(t.column("y") == 2);
  CHECK(t.column("missing") == -1);
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0][1] == "a,b");
  CHECK(t.rows[1][1] == "say \"hi\"");
  CHECK(t.rows[1][2].empty());
}

TEST_CASE("format_number round-trips doubles") {
  CounterRng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const double v = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.bounded(80)) - 40);
    CHECK(std::stod(format_number(v)) == v);
  }
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_table_number(0.00014) == "0.00014");
  CHECK(format_table_number(std::nan("")) == "NA");
}

TEST_CASE("load_frame maps columns, rejects rows with missing covariates, and detects binaries") {
  const std::string path = gen::write_temp("load.csv",
                                           "gpa,out,male,hs\n"
                                           "-0.5,1.0,1,0.3\n"
                                           "0.2,2.0,0,NA\n"
                                           "0.0,3.0,0,0.9\n"
                                           "1.5,4.0,1,0.5\n");
  FrameSchema schema{"gpa", "out", {{"male", std::nullopt}, {"hs", std::nullopt}}};
  const LoadedFrame lf = load_frame(path, schema, 0.0, Direction::TreatedAtOrBelow);
  CHECK(lf.rejected_rows == 1);
  CHECK(lf.frame.n() == 3);
  CHECK(lf.frame.covariate("male").kind == CovariateKind::Binary);
  CHECK(lf.frame.covariate("hs").kind == CovariateKind::Continuous);
  CHECK(lf.frame.z() == vec({1, 1, 0}));

  const LoadedFrame centered = load_frame(path, schema, 1.0, Direction::TreatedAtOrBelow, LoadOptions{true});
  CHECK(centered.frame.cutoff() == 0.0);
  CHECK(centered.frame.r()[0] == doctest::Approx(-1.5));
}

TEST_CASE("load_frame reports the offending row for non-numeric or missing r and y") {
  const std::string path = gen::write_temp("bad.csv", "r,y\n0.1,1\nabc,2\n");
  try {
    load_frame(path, FrameSchema{"r", "y", {}}, 0.0, Direction::TreatedAtOrBelow);
    FAIL("expected NonNumericCell");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::NonNumericCell);
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
  }
  CHECK(code_of([&] { load_frame(path, FrameSchema{"r", "zzz", {}}, 0.0, Direction::TreatedAtOrBelow); }) ==
        ErrorCode::MissingColumn);
  CHECK(code_of([] { load_frame("/nonexistent/file.csv", FrameSchema{"r", "y", {}}, 0.0, Direction::TreatedAtOrBelow); }) ==
        ErrorCode::Io);
}

TEST_CASE("window membership, exclusions and lattice slack") {
  Vector r(7);
  for (Index i = 0; i < 7; ++i)
    r[i] = -0.3 + 0.1 * static_cast<double>(i); // 0.1 * 3 style rounding
  const UnitFrame f(r, Vector::Zero(7), {}, 0.0, Direction::TreatedAtOrBelow);

  WindowSpec w = WindowSpec::symmetric(0.3);
  CHECK(window_members(f, w).n() == 7);
  w.exclusions = {0.0};
  WindowIndex idx = window_members(f, w);
  CHECK(idx.n() == 6);
  CHECK(idx.n_treated == 3);
  w.excluded_intervals = {{-0.1, 0.1}};
  CHECK(window_members(f, w).n() == 4);

  WindowSpec narrow = WindowSpec::symmetric(0.1);
  narrow.exclusions = {0.0, -0.1};
  CHECK(code_of([&] { realize_window(f, narrow); }) == ErrorCode::DegenerateWindow);

  const WindowData d = window_data(f, WindowSpec::symmetric(0.2));
  CHECK(d.n() == 5);
  CHECK(d.indices.front() == 1);
  // -0.3 + 0.3 is 5.6e-17 > 0: treatment uses the exact rule, no slack.
  CHECK(d.z.sum() == doctest::Approx(2.0));
}

TEST_CASE("property: window counts do not depend on row order") {
  CounterRng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    CAPTURE(trial);
    const UnitFrame f = gen::linear_frame(rng, gen::size_between(rng, 10, 300), 0.3);
    const UnitFrame g = gen::shuffled(f, rng);
    WindowSpec w = WindowSpec::symmetric(rng.uniform(0.1, 1.0));
    w.excluded_intervals = {{-0.05, 0.02}};
    const WindowIndex a = window_members(f, w), b = window_members(g, w);
    CHECK(a.n() == b.n());
    CHECK(a.n_treated == b.n_treated);
  }
}
