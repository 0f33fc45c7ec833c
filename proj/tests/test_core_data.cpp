#include <cmath>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "nmar/core_data.hpp"

using namespace nmar;

namespace {

Table make_table(std::vector<std::optional<double>> x1, std::vector<std::optional<double>> x2,
                 std::vector<std::optional<double>> y, std::vector<std::optional<double>> delta) {
  Table t;
  t.add_column("x1", std::move(x1));
  t.add_column("x2", std::move(x2));
  t.add_column("y", std::move(y));
  t.add_column("delta", std::move(delta));
  return t;
}

ColumnRoles roles() { return ColumnRoles{{"x1"}, {"x2"}, "y", "delta"}; }

Table spread_table(std::size_t n) {
  std::vector<std::optional<double>> x1, x2, y, delta;
  for (std::size_t i = 0; i < n; ++i) {
    x1.push_back(0.1 * static_cast<double>(i) + 0.5);
    x2.push_back(1.0 + 0.03 * static_cast<double>((i * 7) % n));
    delta.push_back(i % 3 == 1 ? 0.0 : 1.0);
    y.push_back(i % 3 == 1 ? std::nullopt : std::optional<double>(0.2 * static_cast<double>(i) + 0.7));
  }
  return make_table(x1, x2, y, delta);
}

}  // namespace

TEST(ValidateDataset, CountsRespondersAndNonresponders) {
  // three distinct observed values are needed, so a fourth row is added
  const Table t = make_table({1.0, 2.0, 3.0, 4.0}, {1.0, 0.0, 2.0, 1.0}, {0.1, 0.2, std::nullopt, 0.3},
                             {1.0, 1.0, 0.0, 1.0});
  const Dataset d = validate_dataset(t, roles());
  EXPECT_EQ(d.n(), 4u);
  EXPECT_EQ(d.responders(), 3u);
  EXPECT_FALSE(d.y[2].has_value());
}

TEST(ValidateDataset, TwoObservedValuesAreDiscrete) {
  const Table t = make_table({1.0, 2.0, 3.0}, {1.0, 0.0, 2.0}, {0.1, 0.2, std::nullopt}, {1.0, 1.0, 0.0});
  try {
    validate_dataset(t, roles());
    FAIL() << "expected DiscreteOutcome";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DiscreteOutcome);
  }
}

TEST(ValidateDataset, RespondentWithBlankOutcome) {
  const Table t = make_table({1.0, 2.0}, {1.0, 0.0}, {std::nullopt, std::nullopt}, {1.0, 0.0});
  try {
    validate_dataset(t, roles());
    FAIL() << "expected ObservedYMissing";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ObservedYMissing);
  }
}

TEST(ValidateDataset, BinaryOutcomeRejected) {
  const Table t = make_table({1.0, 2.0, 3.0, 4.0}, {1.0, 0.0, 2.0, 3.0}, {0.0, 1.0, 1.0, 0.0}, {1.0, 1.0, 1.0, 1.0});
  try {
    validate_dataset(t, roles());
    FAIL() << "expected DiscreteOutcome";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DiscreteOutcome);
  }
}

TEST(ValidateDataset, FewDistinctValuesWarn) {
  const Table t = make_table({1.0, 2.0, 3.0, 4.0}, {1.0, 0.0, 2.0, 3.0}, {0.0, 1.0, 2.0, 0.0}, {1.0, 1.0, 1.0, 1.0});
  const Dataset d = validate_dataset(t, roles());
  ASSERT_FALSE(d.warnings.empty());
}

TEST(ValidateDataset, MissingColumnAndBadDelta) {
  Table t = make_table({1.0, 2.0, 3.0}, {1.0, 0.0, 2.0}, {0.1, 0.2, 0.3}, {1.0, 1.0, 2.0});
  try {
    validate_dataset(t, roles());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DeltaNotBinary);
  }
  ColumnRoles r = roles();
  r.x2_columns = {"z"};
  try {
    validate_dataset(t, r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingColumn);
  }
}

TEST(ValidateDataset, RoleInvariants) {
  const Table t = spread_table(12);
  ColumnRoles overlap{{"x1"}, {"x1"}, "y", "delta"};
  EXPECT_THROW(validate_dataset(t, overlap), Error);
  ColumnRoles none{{}, {}, "y", "delta"};
  EXPECT_THROW(validate_dataset(t, none), Error);
  ColumnRoles intercept{{"intercept"}, {"x2"}, "y", "delta"};
  EXPECT_THROW(validate_dataset(t, intercept), Error);
  Table c = t;
  c.add_column("one", std::vector<std::optional<double>>(t.rows(), 1.0));
  ColumnRoles constant{{"one"}, {"x2"}, "y", "delta"};
  EXPECT_THROW(validate_dataset(c, constant), Error);
}

TEST(ValidateDataset, EmptyInstrumentWarns) {
  const Table t = spread_table(12);
  const Dataset d = validate_dataset(t, ColumnRoles{{"x1"}, {}, "y", "delta"});
  EXPECT_EQ(d.q(), 0);
  EXPECT_FALSE(d.warnings.empty());
}

TEST(ValidateDataset, NonresponderOutcomeIgnored) {
  Table t = spread_table(12);
  t.values[2][1] = 99.0;  // delta = 0 in row 1
  const Dataset d = validate_dataset(t, roles());
  EXPECT_FALSE(d.y[1].has_value());
}

TEST(ValidateDataset, Idempotent) {
  const Dataset d = validate_dataset(spread_table(30), roles());
  const Dataset again = validate_dataset(to_table(d), roles_of(d));
  EXPECT_TRUE(d == again);
}

TEST(SplitResponders, StablePartition) {
  Dataset d;
  d.delta = {1, 0, 1};
  auto [r, nr] = split_responders(d);
  EXPECT_EQ(r, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(nr, (std::vector<std::size_t>{1}));
  d.delta = {1, 1, 1, 1};
  std::tie(r, nr) = split_responders(d);
  EXPECT_EQ(r.size(), 4u);
  EXPECT_TRUE(nr.empty());
  d.delta = {0, 0};
  std::tie(r, nr) = split_responders(d);
  EXPECT_TRUE(r.empty());
  EXPECT_EQ(nr, (std::vector<std::size_t>{0, 1}));
}

TEST(SplitResponders, ConcatenationIsPermutation) {
  const Dataset d = validate_dataset(spread_table(31), roles());
  auto [r, nr] = split_responders(d);
  std::vector<std::size_t> all(r);
  all.insert(all.end(), nr.begin(), nr.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(d.n());
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(all, expect);
}

TEST(LogHalfTransform, Examples) {
  const Table t = make_table({1.0, std::exp(1.0), 2.0, 3.0}, {1.0, 2.0, 3.0, 4.0},
                             {std::exp(2.0), 1.5, 2.5, std::nullopt}, {1.0, 1.0, 1.0, 0.0});
  const Dataset d = validate_dataset(t, roles());
  const Dataset l = log_half_transform(d);
  EXPECT_DOUBLE_EQ(*l.y[0], 1.0);
  EXPECT_DOUBLE_EQ(l.x1(0, 0), 0.0);
  EXPECT_FALSE(l.y[3].has_value());

  Dataset zero = d;
  zero.x1(0, 0) = 0.0;
  try {
    log_half_transform(zero);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonPositiveValue);
  }
}

TEST(LogHalfTransform, RoundTrip) {
  const Dataset d = validate_dataset(spread_table(24), roles());
  const Dataset l = log_half_transform(d);
  for (std::size_t i = 0; i < d.n(); ++i) {
    EXPECT_NEAR(std::exp(2.0 * l.x1(static_cast<Eigen::Index>(i), 0)) / d.x1(static_cast<Eigen::Index>(i), 0), 1.0,
                1e-12);
    if (d.y[i]) EXPECT_NEAR(std::exp(2.0 * *l.y[i]) / *d.y[i], 1.0, 1e-12);
  }
}

TEST(Csv, ReadsBlanksAsAbsent) {
  std::istringstream in("x1,x2,y,delta\n1,2,0.5,1\n2,3,,0\n");
  const Table t = read_csv(in);
  ASSERT_EQ(t.rows(), 2u);
  EXPECT_FALSE(t.column("y")[1].has_value());
  EXPECT_DOUBLE_EQ(*t.column("x2")[1], 3.0);
}

TEST(Csv, RejectsMalformedRows) {
  std::istringstream ragged("a,b\n1\n");
  EXPECT_THROW(read_csv(ragged), Error);
  std::istringstream text("a,b\n1,abc\n");
  EXPECT_THROW(read_csv(text), Error);
  std::istringstream empty("");
  EXPECT_THROW(read_csv(empty), Error);
}

TEST(Csv, WriteReadRoundTrip) {
  const Dataset d = validate_dataset(spread_table(15), roles());
  std::stringstream buf;
  write_csv(buf, to_table(d));
  const Dataset back = validate_dataset(read_csv(buf), roles());
  EXPECT_TRUE(d == back);
}
