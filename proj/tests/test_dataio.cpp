#include "sedan/dataio.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace sedan;

namespace {

std::filesystem::path write_file(const std::string& name, const std::string& body) {
  auto dir = std::filesystem::temp_directory_path() / "sedan_dataio_test";
  std::filesystem::create_directories(dir);
  auto path = dir / name;
  std::ofstream(path) << body;
  return path;
}

RawSeries hourly_series(std::size_t T, std::size_t d, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  RawSeries s;
  s.name = "toy";
  s.freq = Frequency::hourly;
  s.values.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d));
  for (std::size_t c = 0; c < d; ++c) s.columns.push_back("c" + std::to_string(c));
  const Timestamp start = std::chrono::sys_days{std::chrono::year{2021} / 3 / 1};
  for (std::size_t t = 0; t < T; ++t) {
    s.timestamps.push_back(start + std::chrono::hours(t));
    for (std::size_t c = 0; c < d; ++c) s.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = n(rng);
  }
  return s;
}

std::string ili_csv() {
  std::string body = "date,% WEIGHTED ILI,%UNWEIGHTED ILI,AGE 0-4,AGE 5-24,ILITOTAL,NUM. OF PROVIDERS,OT\n";
  const char* dates[] = {"2002-01-01 00:00:00", "2002-01-08 00:00:00", "2002-01-15 00:00:00", "2002-01-22 00:00:00"};
  for (const char* d : dates) body += std::string(d) + ",1.2,1.1,500,600,1500,700,12000\n";
  return body;
}

}  // namespace

TEST(LoadCsv, ParsesSmallFile) {
  auto path = write_file("small.csv", "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4.5\n"
                                      "2020-01-01 02:00:00,-1e-3,6\n");
  auto s = load_csv(path);
  EXPECT_EQ(s.length(), 3u);
  EXPECT_EQ(s.values.cols(), 2);
  EXPECT_EQ(s.columns, (std::vector<std::string>{"a", "b"}));
  EXPECT_DOUBLE_EQ(s.values(1, 1), 4.5);
  EXPECT_DOUBLE_EQ(s.values(2, 0), -1e-3);
  EXPECT_EQ(s.freq, Frequency::hourly);
}

TEST(LoadCsv, WeeklyIliLayout) {
  auto s = load_csv(write_file("ili.csv", ili_csv()));
  EXPECT_EQ(s.values.cols(), 7);
  EXPECT_EQ(s.freq, Frequency::weekly);
}

TEST(LoadCsv, RejectsOutOfOrderTimestamps) {
  auto path = write_file("unordered.csv", "date,a\n2020-01-01 02:00:00,1\n2020-01-01 01:00:00,2\n");
  try {
    load_csv(path);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("non-monotone timestamps"), std::string::npos);
  }
}

TEST(LoadCsv, NamesBadCell) {
  auto path = write_file("bad.csv", "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,oops\n");
  try {
    load_csv(path);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column 'b'"), std::string::npos) << msg;
  }
}

TEST(LoadCsv, RequiresDateColumn) {
  EXPECT_THROW(load_csv(write_file("nodate.csv", "time,a\n2020-01-01,1\n")), ParseError);
  EXPECT_THROW(load_csv("/nonexistent/file.csv"), ParseError);
}

TEST(LoadCsv, WriteRoundTrip) {
  auto s = hourly_series(30, 3);
  auto path = write_file("roundtrip.csv", "");
  write_csv(s, path);
  auto back = load_csv(path);
  EXPECT_EQ(back.timestamps, s.timestamps);
  EXPECT_EQ((back.values - s.values).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Split, SixTwoTwoAndSevenOneTwo) {
  auto s = hourly_series(100, 1);
  auto a = chronological_split(s, {0.7, 0.1, 0.2});
  EXPECT_EQ(a.train.length(), 70u);
  EXPECT_EQ(a.val.length(), 10u);
  EXPECT_EQ(a.test.length(), 20u);
  auto b = chronological_split(s, {0.6, 0.2, 0.2});
  EXPECT_EQ(b.train.length(), 60u);
  EXPECT_EQ(b.val.length(), 20u);
  EXPECT_EQ(b.test.length(), 20u);
}

TEST(Split, EmptyPartIsAnError) {
  EXPECT_THROW(chronological_split(hourly_series(10, 1), {0.9, 0.05, 0.05}), std::invalid_argument);
  EXPECT_THROW(chronological_split(hourly_series(10, 1), {0.5, 0.3, 0.3}), std::invalid_argument);
}

TEST(Split, ContiguousOrderedCover) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> len(20, 500);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = hourly_series(len(rng), 2, trial);
    auto p = chronological_split(s, {0.7, 0.1, 0.2});
    ASSERT_EQ(p.train.length() + p.val.length() + p.test.length(), s.length());
    EXPECT_EQ(p.train.timestamps.front(), s.timestamps.front());
    EXPECT_LT(p.train.timestamps.back(), p.val.timestamps.front());
    EXPECT_LT(p.val.timestamps.back(), p.test.timestamps.front());
    EXPECT_EQ(p.test.timestamps.back(), s.timestamps.back());
  }
}

TEST(Scaler, ClosedFormExamples) {
  RawSeries s = hourly_series(2, 1);
  s.values << 1, 3;
  auto p = fit_scaler(s);
  EXPECT_DOUBLE_EQ(p.mean(0), 2.0);
  EXPECT_DOUBLE_EQ(p.std(0), 1.0);
  auto scaled = apply_scaler(s.values, p);
  EXPECT_DOUBLE_EQ(scaled(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(scaled(1, 0), 1.0);

  RawSeries c = hourly_series(3, 1);
  c.values << 5, 5, 5;
  auto pc = fit_scaler(c);
  EXPECT_GT(pc.std(0), 0.0);
  EXPECT_EQ(apply_scaler(c.values, pc).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Scaler, RoundTripAndMoments) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = hourly_series(200, 4, seed);
    s.values = (s.values * 7.0).array() + 3.0;
    auto p = fit_scaler(s);
    auto scaled = apply_scaler(s.values, p);
    EXPECT_LT((invert_scaler(scaled, p) - s.values).cwiseAbs().maxCoeff(), 1e-10);
    for (Eigen::Index c = 0; c < scaled.cols(); ++c) {
      const auto col = scaled.col(c).array();
      EXPECT_NEAR(col.mean(), 0.0, 1e-12);
      EXPECT_NEAR(std::sqrt((col - col.mean()).square().mean()), 1.0, 1e-12);
    }
  }
}

TEST(TimeFeatures, HourEndpointsAndWidths) {
  std::vector<Timestamp> ts{parse_timestamp("2021-06-15 00:00:00"), parse_timestamp("2021-06-15 23:00:00")};
  auto f = extract_time_features(ts, Frequency::hourly);
  ASSERT_EQ(f.cols(), 4);
  EXPECT_DOUBLE_EQ(f(0, 3), -0.5);
  EXPECT_DOUBLE_EQ(f(1, 3), 0.5);
  EXPECT_EQ(extract_time_features(ts, Frequency::weekly).cols(), 3);
  EXPECT_EQ(extract_time_features(ts, Frequency::daily).cols(), 3);
  EXPECT_LE(f.maxCoeff(), 0.5);
  EXPECT_GE(f.minCoeff(), -0.5);
}

TEST(Windows, CountExamples) {
  WindowSpec spec{24, 12, 24, 1};
  EXPECT_EQ(make_windows(hourly_series(100, 2), spec).size(), 53u);
  EXPECT_EQ(make_windows(hourly_series(48, 2), spec).size(), 1u);
  EXPECT_THROW(make_windows(hourly_series(47, 2), spec), std::invalid_argument);
}

TEST(Windows, CountFormulaOnGrid) {
  for (std::size_t T = 10; T < 80; T += 7)
    for (std::size_t lx = 2; lx < 20; lx += 5)
      for (std::size_t ly = 1; ly < 12; ly += 4)
        for (std::size_t stride = 1; stride < 5; ++stride) {
          WindowSpec spec{lx, lx / 2, ly, stride};
          if (T < lx + ly) {
            EXPECT_THROW(window_count(T, spec), std::invalid_argument);
            continue;
          }
          EXPECT_EQ(window_count(T, spec), (T - lx - ly) / stride + 1);
          EXPECT_EQ(make_windows(hourly_series(T, 1), spec).size(), window_count(T, spec));
        }
}

TEST(Windows, DecoderInputInvariant) {
  WindowSpec spec{24, 12, 24, 3};
  auto s = hourly_series(150, 3);
  auto windows = make_windows(s, spec);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& x = windows[w];
    EXPECT_EQ(x.enc_input.rows(), 24);
    EXPECT_EQ(x.dec_input.rows(), 36);
    EXPECT_EQ(x.dec_time.rows(), 36);
    EXPECT_EQ(x.dec_input.topRows(12), x.enc_input.bottomRows(12));
    EXPECT_EQ(x.dec_input.bottomRows(24).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(x.target, s.values.middleRows(static_cast<Eigen::Index>(w * 3 + 24), 24));
  }
}

TEST(PrepareDomain, ScalerFromTrainOnly) {
  auto s = hourly_series(400, 2);
  s.values.bottomRows(100).array() += 50.0;
  auto d = prepare_domain(s, {}, {24, 12, 24, 1});
  auto train = chronological_split(s, {}).train;
  EXPECT_LT((d.scaler.mean - train.values.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(d.dims(), 2u);
  EXPECT_EQ(d.time_dims(), 4u);
  EXPECT_FALSE(d.test.empty());
}

TEST(PrepareDomain, EvaluationTargetsStayInsideTheirSplit) {
  auto s = hourly_series(400, 1);
  for (Eigen::Index t = 0; t < s.values.rows(); ++t) s.values(t, 0) = static_cast<double>(t);
  WindowSpec spec{24, 12, 24, 1};
  auto d = prepare_domain(s, {}, spec);
  auto unscale = [&](double v) { return v * d.scaler.std(0) + d.scaler.mean(0); };
  // 280 train rows, 40 val rows, 80 test rows.
  EXPECT_EQ(d.val.size(), 40u - 24u + 1u);
  EXPECT_NEAR(unscale(d.val.front().target(0, 0)), 280.0, 1e-9);
  EXPECT_NEAR(unscale(d.val.back().target(23, 0)), 319.0, 1e-9);
  EXPECT_NEAR(unscale(d.test.front().target(0, 0)), 320.0, 1e-9);
  EXPECT_NEAR(unscale(d.test.back().target(23, 0)), 399.0, 1e-9);
  EXPECT_NEAR(unscale(d.train.back().target(23, 0)), 279.0, 1e-9);
}
