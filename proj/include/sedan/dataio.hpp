#pragma once

// CSV ingestion, chronological splitting, standardization, calendar
// features and sliding windows for encoder/decoder forecasting.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedan {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Frequency { hourly, daily, weekly };

inline const char* to_string(Frequency f) {
  switch (f) {
    case Frequency::hourly: return "hourly";
    case Frequency::daily: return "daily";
    case Frequency::weekly: return "weekly";
  }
  return "?";
}

inline Frequency parse_frequency(const std::string& s) {
  if (s == "hourly" || s == "h") return Frequency::hourly;
  if (s == "daily" || s == "d") return Frequency::daily;
  if (s == "weekly" || s == "w") return Frequency::weekly;
  throw std::invalid_argument("unsupported frequency: " + s);
}

using Timestamp = std::chrono::sys_seconds;

struct RawSeries {
  std::string name;
  Frequency freq = Frequency::hourly;
  std::vector<std::string> columns;
  std::vector<Timestamp> timestamps;
  Eigen::MatrixXd values;  // [T x d]

  std::size_t length() const { return timestamps.size(); }
  std::size_t dims() const { return static_cast<std::size_t>(values.cols()); }

  RawSeries rows(std::size_t start, std::size_t count) const {
    RawSeries out{name, freq, columns, {}, values.middleRows(static_cast<Eigen::Index>(start),
                                                              static_cast<Eigen::Index>(count))};
    out.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(start),
                          timestamps.begin() + static_cast<std::ptrdiff_t>(start + count));
    return out;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

/// Parses `YYYY-MM-DD HH:MM:SS`, `YYYY-MM-DD HH:MM` or `YYYY-MM-DD`.
inline Timestamp parse_timestamp(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char tail = 0;
  int fields = std::sscanf(text.c_str(), "%d-%d-%d %d:%d:%d%c", &y, &mo, &d, &h, &mi, &s, &tail);
  if (!(fields == 3 || fields == 5 || fields == 6)) throw ParseError("unparseable timestamp '" + text + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 60) {
    throw ParseError("invalid calendar timestamp '" + text + "'");
  }
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
}

inline std::string format_timestamp(Timestamp ts) {
  using namespace std::chrono;
  const auto day_point = floor<days>(ts);
  const year_month_day ymd{day_point};
  const hh_mm_ss<seconds> tod{ts - day_point};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02lld:%02lld:%02lld", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<long long>(tod.hours().count()), static_cast<long long>(tod.minutes().count()),
                static_cast<long long>(tod.seconds().count()));
  return buf;
}

/// Sampling period from the median spacing: nearest of hour/day/week within
/// a factor of 1.5.
inline Frequency infer_frequency(const std::vector<Timestamp>& ts) {
  if (ts.size() < 2) return Frequency::hourly;
  std::vector<double> gaps;
  for (std::size_t i = 1; i < ts.size(); ++i) gaps.push_back(static_cast<double>((ts[i] - ts[i - 1]).count()));
  std::nth_element(gaps.begin(), gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2), gaps.end());
  const double gap = gaps[gaps.size() / 2];
  const std::array<std::pair<double, Frequency>, 3> periods{
      {{3600.0, Frequency::hourly}, {86400.0, Frequency::daily}, {604800.0, Frequency::weekly}}};
  for (const auto& [period, freq] : periods) {
    if (gap >= period / 1.5 && gap <= period * 1.5) return freq;
  }
  throw ParseError("unsupported sampling period of " + std::to_string(gap) + " seconds");
}

inline RawSeries load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  auto header = detail::split_csv_line(line);
  if (header.empty() || header.front() != "date") throw ParseError(path.string() + ": missing `date` column");
  if (header.size() < 2) throw ParseError(path.string() + ": no value columns");

  RawSeries series;
  series.name = path.stem().string();
  series.columns.assign(header.begin() + 1, header.end());
  const std::size_t d = series.columns.size();
  std::vector<double> flat;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != d + 1) {
      throw ParseError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                       " cells, expected " + std::to_string(d + 1));
    }
    series.timestamps.push_back(parse_timestamp(cells[0]));
    for (std::size_t c = 0; c < d; ++c) {
      const std::string& cell = cells[c + 1];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw ParseError(path.string() + ": non-numeric value '" + cell + "' at row " + std::to_string(row) +
                         ", column '" + series.columns[c] + "'");
      }
      flat.push_back(v);
    }
    const std::size_t n = series.timestamps.size();
    if (n > 1 && series.timestamps[n - 1] <= series.timestamps[n - 2]) {
      throw ParseError(path.string() + ": non-monotone timestamps at row " + std::to_string(row));
    }
  }
  const auto T = static_cast<Eigen::Index>(series.timestamps.size());
  series.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), T, static_cast<Eigen::Index>(d));
  series.freq = infer_frequency(series.timestamps);
  return series;
}

inline void write_csv(const RawSeries& series, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "date";
  for (const auto& c : series.columns) out << ',' << c;
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < series.length(); ++t) {
    out << format_timestamp(series.timestamps[t]);
    for (Eigen::Index c = 0; c < series.values.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", series.values(static_cast<Eigen::Index>(t), c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SeriesSplits {
  RawSeries train, val, test;
};

/// Contiguous train/val/test blocks; train and val are floor-allocated and
/// the remainder goes to test.
inline SeriesSplits chronological_split(const RawSeries& series, SplitRatios ratios) {
  if (ratios.train <= 0 || ratios.val <= 0 || ratios.test <= 0) {
    throw std::invalid_argument("split ratios must be positive");
  }
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must sum to 1");
  }
  const std::size_t T = series.length();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(T) * ratios.train + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(T) * ratios.val + 1e-9));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= T) {
    throw std::invalid_argument("split of " + std::to_string(T) + " rows leaves an empty part");
  }
  return {series.rows(0, n_train), series.rows(n_train, n_val),
          series.rows(n_train + n_val, T - n_train - n_val)};
}

struct ScalerParams {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
};

inline constexpr double kStdFloor = 1e-8;

inline ScalerParams fit_scaler(const RawSeries& train) {
  if (train.length() == 0) throw std::invalid_argument("cannot fit a scaler on an empty series");
  ScalerParams p;
  p.mean = train.values.colwise().mean().transpose();
  const Eigen::MatrixXd centered = train.values.rowwise() - p.mean.transpose();
  p.std = (centered.array().square().colwise().sum() / static_cast<double>(train.length())).sqrt().transpose();
  p.std = p.std.cwiseMax(kStdFloor);
  return p;
}

inline Eigen::MatrixXd apply_scaler(const Eigen::MatrixXd& values, const ScalerParams& p) {
  return (values.rowwise() - p.mean.transpose()).array().rowwise() / p.std.transpose().array();
}

inline Eigen::MatrixXd invert_scaler(const Eigen::MatrixXd& values, const ScalerParams& p) {
  return (values.array().rowwise() * p.std.transpose().array()).rowwise() + p.mean.transpose().array();
}

inline RawSeries apply_scaler(const RawSeries& series, const ScalerParams& p) {
  RawSeries out = series;
  out.values = apply_scaler(series.values, p);
  return out;
}

inline std::size_t time_feature_count(Frequency freq) { return freq == Frequency::hourly ? 4 : 3; }

/// Calendar stamps mapped affinely onto [-0.5, 0.5]: month, day-of-month,
/// day-of-week (Monday = 0) and, for hourly data, hour-of-day.
inline Eigen::MatrixXd extract_time_features(const std::vector<Timestamp>& timestamps, Frequency freq) {
  using namespace std::chrono;
  const std::size_t width = time_feature_count(freq);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(timestamps.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    const auto day_point = floor<days>(timestamps[i]);
    const year_month_day ymd{day_point};
    const weekday wd{day_point};
    const auto row = static_cast<Eigen::Index>(i);
    out(row, 0) = (static_cast<unsigned>(ymd.month()) - 1) / 11.0 - 0.5;
    out(row, 1) = (static_cast<unsigned>(ymd.day()) - 1) / 30.0 - 0.5;
    out(row, 2) = (wd.iso_encoding() - 1) / 6.0 - 0.5;
    if (freq == Frequency::hourly) {
      const auto hour = duration_cast<hours>(timestamps[i] - day_point).count();
      out(row, 3) = static_cast<double>(hour) / 23.0 - 0.5;
    }
  }
  return out;
}

struct WindowSpec {
  std::size_t input_len = 24;
  std::size_t label_len = 12;
  std::size_t pred_len = 24;
  std::size_t stride = 1;
};

struct WindowSample {
  Eigen::MatrixXd enc_input;  // [l_x x d]
  Eigen::MatrixXd enc_time;   // [l_x x d_time]
  Eigen::MatrixXd dec_input;  // [label_len + l_y x d], zero after the start token
  Eigen::MatrixXd dec_time;   // [label_len + l_y x d_time]
  Eigen::MatrixXd target;     // [l_y x d]
};

inline std::size_t window_count(std::size_t T, const WindowSpec& spec) {
  if (spec.stride == 0 || spec.pred_len == 0 || spec.label_len > spec.input_len) {
    throw std::invalid_argument("invalid window spec");
  }
  if (T < spec.input_len + spec.pred_len) {
    throw std::invalid_argument("series of length " + std::to_string(T) + " is shorter than input_len + pred_len");
  }
  return (T - spec.input_len - spec.pred_len) / spec.stride + 1;
}

inline std::vector<WindowSample> make_windows(const RawSeries& series, const WindowSpec& spec) {
  const std::size_t count = window_count(series.length(), spec);
  const Eigen::MatrixXd stamps = extract_time_features(series.timestamps, series.freq);
  const auto lx = static_cast<Eigen::Index>(spec.input_len);
  const auto ll = static_cast<Eigen::Index>(spec.label_len);
  const auto ly = static_cast<Eigen::Index>(spec.pred_len);
  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    const auto s = static_cast<Eigen::Index>(w * spec.stride);
    WindowSample sample;
    sample.enc_input = series.values.middleRows(s, lx);
    sample.enc_time = stamps.middleRows(s, lx);
    sample.dec_input = Eigen::MatrixXd::Zero(ll + ly, series.values.cols());
    sample.dec_input.topRows(ll) = series.values.middleRows(s + lx - ll, ll);
    sample.dec_time = stamps.middleRows(s + lx - ll, ll + ly);
    sample.target = series.values.middleRows(s + lx, ly);
    out.push_back(std::move(sample));
  }
  return out;
}

/// One domain ready for training: scaler fitted on the training split and
/// windows cut from each standardized split.
struct DomainData {
  std::string name;
  Frequency freq = Frequency::hourly;
  ScalerParams scaler;
  std::vector<WindowSample> train, val, test;

  std::size_t dims() const { return train.empty() ? 0 : static_cast<std::size_t>(train.front().enc_input.cols()); }
  std::size_t time_dims() const { return time_feature_count(freq); }
};

/// Val/test windows borrow their encoder context from the rows just before
/// the split, so every val/test row can appear as a forecast target. A given
/// `scaler` replaces the one fitted on the training split.
inline DomainData prepare_domain(const RawSeries& series, SplitRatios ratios, const WindowSpec& spec,
                                 const ScalerParams* scaler = nullptr) {
  auto splits = chronological_split(series, ratios);
  DomainData d;
  d.name = series.name;
  d.freq = series.freq;
  if (scaler && static_cast<std::size_t>(scaler->mean.size()) != series.dims()) {
    throw std::invalid_argument("scaler width does not match series " + series.name);
  }
  d.scaler = scaler ? *scaler : fit_scaler(splits.train);
  const auto scaled = apply_scaler(series, d.scaler);
  const std::size_t n_train = splits.train.length(), n_val = splits.val.length();
  const std::size_t context = std::min(spec.input_len, n_train);
  d.train = make_windows(scaled.rows(0, n_train), spec);
  d.val = make_windows(scaled.rows(n_train - context, n_val + context), spec);
  d.test = make_windows(scaled.rows(n_train + n_val - context, series.length() - n_train - n_val + context), spec);
  return d;
}

}  // namespace sedan
