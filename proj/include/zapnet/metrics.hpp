#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "zapnet/data.hpp"
#include "zapnet/errors.hpp"

namespace zapnet {

/// Shortest decimal text that parses back to exactly the same value.
template <typename F>
std::string format_number(F v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string format_number(std::size_t v) { return std::to_string(v); }
inline std::string format_number(long long v) { return std::to_string(v); }

template <typename F>
F parse_number(const std::string& s) {
  F v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw FormatError("not a number: '" + s + "'");
  }
  return v;
}

struct AccuracyRow {
  std::string run_id;
  std::size_t replicate = 0;
  std::string phase;  // pretrain | transfer
  long long epoch = 0;  // -1 = before the first epoch
  std::string split;  // train | val | test
  double accuracy = 0;
  double loss = 0;
  friend bool operator==(const AccuracyRow&, const AccuracyRow&) = default;
};

struct PerTaskRow {
  std::string run_id;
  std::size_t replicate = 0;
  std::string optimizer;
  double lr = 0;
  std::string probe;  // linear | full
  long long epoch = 0;
  std::size_t step = 0;
  std::size_t task_id = 0;
  double loss = 0;
  friend bool operator==(const PerTaskRow&, const PerTaskRow&) = default;
};

struct CosimRow {
  std::string run_id;
  std::size_t replicate = 0;
  std::string optimizer;
  double lr = 0;
  std::size_t step = 0;
  std::string layer;
  double cosim = 0;
  friend bool operator==(const CosimRow&, const CosimRow&) = default;
};

// Test accuracy of one sweep cell after one transfer epoch.
struct SweepRow {
  std::string run_id;
  std::size_t replicate = 0;
  std::string optimizer;
  bool zapped = false;
  double lr = 0;
  long long epoch = 0;
  double accuracy = 0;
  double loss = 0;
  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

template <typename Row>
struct CsvSchema;

template <>
struct CsvSchema<AccuracyRow> {
  static constexpr const char* file = "accuracy.csv";
  static std::vector<std::string> header() {
    return {"run_id", "replicate", "phase", "epoch", "split", "accuracy", "loss"};
  }
  static std::vector<std::string> cells(const AccuracyRow& r) {
    return {r.run_id, format_number(r.replicate), r.phase, format_number(r.epoch),
            r.split, format_number(r.accuracy), format_number(r.loss)};
  }
  static AccuracyRow parse(const std::vector<std::string>& c) {
    return {c[0], parse_number<std::size_t>(c[1]), c[2], parse_number<long long>(c[3]), c[4],
            parse_number<double>(c[5]), parse_number<double>(c[6])};
  }
};

template <>
struct CsvSchema<PerTaskRow> {
  static constexpr const char* file = "pertask.csv";
  static std::vector<std::string> header() {
    return {"run_id", "replicate", "optimizer", "lr", "probe", "epoch", "step", "task_id", "loss"};
  }
  static std::vector<std::string> cells(const PerTaskRow& r) {
    return {r.run_id, format_number(r.replicate), r.optimizer, format_number(r.lr), r.probe,
            format_number(r.epoch), format_number(r.step), format_number(r.task_id),
            format_number(r.loss)};
  }
  static PerTaskRow parse(const std::vector<std::string>& c) {
    return {c[0],
            parse_number<std::size_t>(c[1]),
            c[2],
            parse_number<double>(c[3]),
            c[4],
            parse_number<long long>(c[5]),
            parse_number<std::size_t>(c[6]),
            parse_number<std::size_t>(c[7]),
            parse_number<double>(c[8])};
  }
};

template <>
struct CsvSchema<CosimRow> {
  static constexpr const char* file = "zapdiv.csv";
  static std::vector<std::string> header() {
    return {"run_id", "replicate", "optimizer", "lr", "step", "layer", "cosim"};
  }
  static std::vector<std::string> cells(const CosimRow& r) {
    return {r.run_id,  format_number(r.replicate), r.optimizer,          format_number(r.lr),
            format_number(r.step), r.layer,         format_number(r.cosim)};
  }
  static CosimRow parse(const std::vector<std::string>& c) {
    return {c[0], parse_number<std::size_t>(c[1]), c[2], parse_number<double>(c[3]),
            parse_number<std::size_t>(c[4]), c[5], parse_number<double>(c[6])};
  }
};

template <>
struct CsvSchema<SweepRow> {
  static constexpr const char* file = "sweep.csv";
  static std::vector<std::string> header() {
    return {"run_id", "replicate", "optimizer", "zapped", "lr", "epoch", "accuracy", "loss"};
  }
  static std::vector<std::string> cells(const SweepRow& r) {
    return {r.run_id, format_number(r.replicate), r.optimizer, r.zapped ? "1" : "0",
            format_number(r.lr), format_number(r.epoch), format_number(r.accuracy), format_number(r.loss)};
  }
  static SweepRow parse(const std::vector<std::string>& c) {
    if (c[3] != "0" && c[3] != "1") throw FormatError("zapped must be 0 or 1, got '" + c[3] + "'");
    return {c[0], parse_number<std::size_t>(c[1]), c[2], c[3] == "1", parse_number<double>(c[4]),
            parse_number<long long>(c[5]), parse_number<double>(c[6]), parse_number<double>(c[7])};
  }
};

// First cell of the row appended to a CSV whose run aborted.
inline constexpr const char* kTruncatedMarker = "#TRUNCATED";

namespace detail {

inline void append_line(std::string& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].find_first_of(",\n\"") != std::string::npos) {
      throw FormatError("CSV cell may not contain ',', '\"' or newlines: '" + cells[i] + "'");
    }
    if (i) out += ',';
    out += cells[i];
  }
  out += '\n';
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

template <typename Row>
std::string render_csv(const std::vector<Row>& rows,
                       const std::optional<std::string>& truncated = std::nullopt) {
  std::string out;
  const auto header = CsvSchema<Row>::header();
  detail::append_line(out, header);
  for (const Row& r : rows) detail::append_line(out, CsvSchema<Row>::cells(r));
  if (truncated) {
    std::vector<std::string> marker(header.size());
    marker[0] = kTruncatedMarker;
    std::string reason = *truncated;
    for (char& ch : reason)
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    marker[1] = reason;
    detail::append_line(out, marker);
  }
  return out;
}

/// Rows of a CSV file written by render_csv. `truncated` receives the abort
/// reason if the file ends in a truncation marker.
template <typename Row>
std::vector<Row> parse_csv(const std::string& text, std::optional<std::string>* truncated = nullptr) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::split_line(line) != CsvSchema<Row>::header()) {
    throw FormatError(std::string("unexpected header in ") + CsvSchema<Row>::file);
  }
  std::vector<Row> rows;
  const std::size_t width = CsvSchema<Row>::header().size();
  while (std::getline(in, line)) {
    auto cells = detail::split_line(line);
    if (cells.size() != width) throw FormatError("CSV row has wrong column count: " + line);
    if (cells[0] == kTruncatedMarker) {
      if (truncated) *truncated = cells[1];
      continue;
    }
    rows.push_back(CsvSchema<Row>::parse(cells));
  }
  return rows;
}

template <typename Row>
void write_csv(const std::filesystem::path& path, const std::vector<Row>& rows,
               const std::optional<std::string>& truncated = std::nullopt) {
  detail::write_file_atomic(path, render_csv(rows, truncated));
}

template <typename Row>
std::vector<Row> read_csv(const std::filesystem::path& path,
                          std::optional<std::string>* truncated = nullptr) {
  return parse_csv<Row>(detail::read_file(path), truncated);
}

// Append-only metric tables of one run (or a merged set of runs).
struct MetricsRecord {
  std::vector<AccuracyRow> accuracy;
  std::vector<PerTaskRow> pertask;
  std::vector<CosimRow> cosim;
  std::optional<std::string> truncated;

  void append(const MetricsRecord& other) {
    accuracy.insert(accuracy.end(), other.accuracy.begin(), other.accuracy.end());
    pertask.insert(pertask.end(), other.pertask.begin(), other.pertask.end());
    cosim.insert(cosim.end(), other.cosim.begin(), other.cosim.end());
    if (other.truncated && !truncated) truncated = other.truncated;
  }
};

enum class MetricKind : unsigned { accuracy = 1, pertask = 2, cosim = 4, all = 7 };

/// Writes the selected tables (all by default) into out_dir, one atomic
/// replace per file; returns the paths written.
inline std::vector<std::filesystem::path> write_metrics(const MetricsRecord& m,
                                                        const std::filesystem::path& out_dir,
                                                        MetricKind kinds = MetricKind::all) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto k = static_cast<unsigned>(kinds);
  std::vector<std::filesystem::path> out;
  if (k & static_cast<unsigned>(MetricKind::accuracy)) {
    out.push_back(out_dir / CsvSchema<AccuracyRow>::file);
    write_csv(out.back(), m.accuracy, m.truncated);
  }
  if (k & static_cast<unsigned>(MetricKind::pertask)) {
    out.push_back(out_dir / CsvSchema<PerTaskRow>::file);
    write_csv(out.back(), m.pertask, m.truncated);
  }
  if (k & static_cast<unsigned>(MetricKind::cosim)) {
    out.push_back(out_dir / CsvSchema<CosimRow>::file);
    write_csv(out.back(), m.cosim, m.truncated);
  }
  return out;
}

inline MetricKind operator|(MetricKind a, MetricKind b) {
  return static_cast<MetricKind>(static_cast<unsigned>(a) | static_cast<unsigned>(b));
}

}  // namespace zapnet
