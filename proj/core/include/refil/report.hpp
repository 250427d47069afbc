#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace refil {

/// results.csv layout:
///   row,inv_dfil,trial,<metric...>,status
/// `row` is "trial", "mean" or "stderr"; aggregate rows leave trial empty.
/// Missing metric values are empty cells.
struct ResultRow {
  std::string kind = "trial";
  double inv_dfil = 0.0;
  std::optional<std::size_t> trial;
  std::vector<std::optional<double>> values;  // aligned with ResultsTable::metrics
  std::string status = "ok";
};

struct ResultsTable {
  std::vector<std::string> metrics;
  std::vector<ResultRow> rows;
};

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest text that the CSV reader maps back to the same double.
std::string format_number(double v);

void write_results_csv(std::ostream& out, const ResultsTable& table);
void write_results_csv(const std::filesystem::path& path, const ResultsTable& table);
ResultsTable read_results_csv(const std::filesystem::path& path);

struct PointSummary {
  double inv_dfil = 0.0;
  std::size_t trials = 0;
  std::size_t failures = 0;
  std::vector<std::optional<double>> mean;
  std::vector<std::optional<double>> stderr_;  // sample stddev / sqrt(n); 0 for n = 1
};

/// Per grid point aggregates over "trial" rows with status "ok", in order of
/// first appearance.
std::vector<PointSummary> summarize(const ResultsTable& table);

/// Trial rows followed by one mean and one stderr row per grid point.
ResultsTable with_aggregates(const ResultsTable& trials);

struct PlotOptions {
  std::string title;
  std::string y_label = "value";
  /// Metrics to draw; empty draws all.
  std::vector<std::string> series;
  /// Extra y = 1/dFIL reference line.
  bool bound_line = false;
};

/// Line plot of per-point means against log10(1/dFIL) with standard-error
/// bars.
std::string render_svg(const ResultsTable& table, const PlotOptions& options);

/// Aggregate table: one line per grid point, mean +- stderr per metric.
void print_summary(std::ostream& out, const ResultsTable& table);

struct ReportSummary {
  std::vector<PointSummary> points;
  std::vector<std::string> metrics;
  bool empty = false;
};

/// Reads results_dir/results.csv, prints an aggregate table to `out` and
/// writes results_dir/plot.svg.
ReportSummary report(const std::filesystem::path& results_dir, std::ostream& out,
                     const PlotOptions& options = {});

}  // namespace refil
