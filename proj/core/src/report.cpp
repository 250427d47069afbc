#include "refil/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

namespace refil {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string clean_status(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  }
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ReportError("results.csv line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

void write_results_csv(std::ostream& out, const ResultsTable& table) {
  out << "row,inv_dfil,trial";
  for (const auto& m : table.metrics) out << ',' << m;
  out << ",status\n";
  for (const ResultRow& r : table.rows) {
    if (r.values.size() != table.metrics.size()) throw std::invalid_argument("result row width mismatch");
    out << r.kind << ',' << format_number(r.inv_dfil) << ',';
    if (r.trial) out << *r.trial;
    for (const auto& v : r.values) {
      out << ',';
      if (v) out << format_number(*v);
    }
    out << ',' << clean_status(r.status) << '\n';
  }
}

void write_results_csv(const std::filesystem::path& path, const ResultsTable& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ReportError("cannot write " + path.string());
  write_results_csv(out, table);
}

ResultsTable read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ReportError("missing results file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ReportError(path.string() + ": empty file (no header)");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "row" || header[1] != "inv_dfil" || header[2] != "trial" ||
      header.back() != "status") {
    throw ReportError(path.string() + " line 1: unexpected header");
  }
  ResultsTable t;
  t.metrics.assign(header.begin() + 3, header.end() - 1);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ReportError(path.string() + " line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    ResultRow r;
    r.kind = cells[0];
    if (r.kind != "trial" && r.kind != "mean" && r.kind != "stderr") {
      throw ReportError(path.string() + " line " + std::to_string(line_no) + ": unknown row kind '" + r.kind + "'");
    }
    r.inv_dfil = parse_double(cells[1], line_no);
    if (!cells[2].empty()) r.trial = static_cast<std::size_t>(parse_double(cells[2], line_no));
    for (std::size_t i = 3; i + 1 < cells.size(); ++i) {
      r.values.push_back(cells[i].empty() ? std::nullopt : std::optional<double>(parse_double(cells[i], line_no)));
    }
    r.status = cells.back();
    t.rows.push_back(std::move(r));
  }
  return t;
}

std::vector<PointSummary> summarize(const ResultsTable& table) {
  std::vector<PointSummary> out;
  std::vector<std::vector<std::vector<double>>> samples;  // [point][metric][trial]
  for (const ResultRow& r : table.rows) {
    if (r.kind != "trial") continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const PointSummary& p) { return p.inv_dfil == r.inv_dfil; });
    if (it == out.end()) {
      PointSummary fresh;
      fresh.inv_dfil = r.inv_dfil;
      out.push_back(std::move(fresh));
      samples.emplace_back(table.metrics.size());
      it = out.end() - 1;
    }
    const std::size_t p = static_cast<std::size_t>(it - out.begin());
    if (r.status != "ok") {
      ++it->failures;
      continue;
    }
    ++it->trials;
    for (std::size_t m = 0; m < r.values.size(); ++m) {
      if (r.values[m]) samples[p][m].push_back(*r.values[m]);
    }
  }
  for (std::size_t p = 0; p < out.size(); ++p) {
    for (const auto& xs : samples[p]) {
      if (xs.empty()) {
        out[p].mean.emplace_back();
        out[p].stderr_.emplace_back();
        continue;
      }
      double s = 0.0;
      for (double x : xs) s += x;
      const double n = static_cast<double>(xs.size());
      const double mean = s / n;
      double ss = 0.0;
      for (double x : xs) ss += (x - mean) * (x - mean);
      out[p].mean.emplace_back(mean);
      out[p].stderr_.emplace_back(xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0);
    }
  }
  return out;
}

ResultsTable with_aggregates(const ResultsTable& trials) {
  ResultsTable t;
  t.metrics = trials.metrics;
  for (const ResultRow& r : trials.rows) {
    if (r.kind == "trial") t.rows.push_back(r);
  }
  for (const PointSummary& p : summarize(t)) {
    t.rows.push_back(ResultRow{"mean", p.inv_dfil, std::nullopt, p.mean, "ok"});
    t.rows.push_back(ResultRow{"stderr", p.inv_dfil, std::nullopt, p.stderr_, "ok"});
  }
  return t;
}

namespace {

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out.push_back(c);
  }
  return out;
}

}  // namespace

std::string render_svg(const ResultsTable& table, const PlotOptions& options) {
  constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  const auto points = summarize(table);

  std::vector<std::size_t> series;
  for (std::size_t m = 0; m < table.metrics.size(); ++m) {
    const bool wanted = options.series.empty() ||
                        std::find(options.series.begin(), options.series.end(), table.metrics[m]) !=
                            options.series.end();
    if (wanted) series.push_back(m);
  }

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
      << kW << ' ' << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
      << escape(options.title) << "</text>\n";

  double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
  for (const PointSummary& p : points) {
    if (!(p.inv_dfil > 0)) continue;
    const double lx = std::log10(p.inv_dfil);
    xlo = std::min(xlo, lx);
    xhi = std::max(xhi, lx);
    for (std::size_t m : series) {
      if (!p.mean[m] || !std::isfinite(*p.mean[m])) continue;
      const double se = p.stderr_[m].value_or(0.0);
      ylo = std::min(ylo, *p.mean[m] - se);
      yhi = std::max(yhi, *p.mean[m] + se);
    }
    if (options.bound_line) {
      ylo = std::min(ylo, p.inv_dfil);
      yhi = std::max(yhi, p.inv_dfil);
    }
  }
  if (!std::isfinite(xlo)) {
    svg << "<text x=\"" << kW / 2 << "\" y=\"" << kH / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">no data</text>\n</svg>\n";
    return svg.str();
  }
  if (xhi - xlo < 1e-9) {
    xlo -= 1.0;
    xhi += 1.0;
  }
  if (!std::isfinite(ylo)) {
    ylo = 0.0;
    yhi = 1.0;
  }
  if (yhi - ylo < 1e-12) {
    ylo -= 0.5;
    yhi += 0.5;
  }
  const double pad = 0.05 * (yhi - ylo);
  ylo -= pad;
  yhi += pad;
  const auto px = [&](double lx) { return kLeft + (lx - xlo) / (xhi - xlo) * (kW - kLeft - kRight); };
  const auto py = [&](double y) { return kH - kBottom - (y - ylo) / (yhi - ylo) * (kH - kTop - kBottom); };

  // Axes and ticks.
  svg << "<g stroke=\"black\" stroke-width=\"1\">\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
      << "\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom << "\"/>\n";
  svg << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (double d = std::ceil(xlo - 1e-9); d <= xhi + 1e-9; d += 1.0) {
    const double x = px(d);
    svg << "<line x1=\"" << fixed(x) << "\" y1=\"" << kH - kBottom << "\" x2=\"" << fixed(x) << "\" y2=\""
        << kH - kBottom + 5 << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << fixed(x) << "\" y=\"" << kH - kBottom + 18 << "\" text-anchor=\"middle\">"
        << label(std::pow(10.0, d)) << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double y = ylo + (yhi - ylo) * i / 4.0;
    svg << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << fixed(py(y)) << "\" x2=\"" << kLeft << "\" y2=\""
        << fixed(py(y)) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << fixed(py(y) + 4) << "\" text-anchor=\"end\">" << label(y)
        << "</text>\n";
  }
  svg << "<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 10
      << "\" text-anchor=\"middle\">1/dFIL (log scale)</text>\n";
  svg << "<text x=\"16\" y=\"" << (kTop + kH - kBottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (kTop + kH - kBottom) / 2 << ")\">" << escape(options.y_label) << "</text>\n</g>\n";

  std::size_t legend = 0;
  const auto legend_entry = [&](const std::string& name, const std::string& color, bool dashed) {
    const double y = kTop + 14.0 * static_cast<double>(legend++);
    svg << "<line x1=\"" << kW - kRight + 10 << "\" y1=\"" << y << "\" x2=\"" << kW - kRight + 30 << "\" y2=\"" << y
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"" << (dashed ? " stroke-dasharray=\"4 3\"" : "")
        << "/>\n<text x=\"" << kW - kRight + 35 << "\" y=\"" << y + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(name) << "</text>\n";
  };

  for (std::size_t s = 0; s < series.size(); ++s) {
    const std::size_t m = series[s];
    const std::string color = colors[s % 7];
    std::string path;
    for (const PointSummary& p : points) {
      if (!(p.inv_dfil > 0) || !p.mean[m] || !std::isfinite(*p.mean[m])) continue;
      const double x = px(std::log10(p.inv_dfil)), y = py(*p.mean[m]);
      path += (path.empty() ? "" : " ") + fixed(x) + "," + fixed(y);
      const double se = p.stderr_[m].value_or(0.0);
      svg << "<line x1=\"" << fixed(x) << "\" y1=\"" << fixed(py(*p.mean[m] - se)) << "\" x2=\"" << fixed(x)
          << "\" y2=\"" << fixed(py(*p.mean[m] + se)) << "\" stroke=\"" << color << "\"/>\n";
      svg << "<circle cx=\"" << fixed(x) << "\" cy=\"" << fixed(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << path << "\"/>\n";
    legend_entry(table.metrics[m], color, false);
  }
  if (options.bound_line) {
    std::string path;
    for (const PointSummary& p : points) {
      if (p.inv_dfil > 0) path += (path.empty() ? "" : " ") + fixed(px(std::log10(p.inv_dfil))) + "," + fixed(py(p.inv_dfil));
    }
    svg << "<polyline fill=\"none\" stroke=\"gray\" stroke-width=\"1.5\" stroke-dasharray=\"4 3\" points=\"" << path
        << "\"/>\n";
    legend_entry("1/dFIL", "gray", true);
  }
  svg << "</svg>\n";
  return svg.str();
}

void print_summary(std::ostream& out, const ResultsTable& table) {
  const auto points = summarize(table);
  out << std::left << std::setw(12) << "1/dFIL" << std::setw(8) << "trials" << std::setw(8) << "failed";
  for (const auto& m : table.metrics) out << std::setw(24) << m;
  out << '\n';
  for (const PointSummary& p : points) {
    out << std::setw(12) << label(p.inv_dfil) << std::setw(8) << p.trials << std::setw(8) << p.failures;
    for (std::size_t m = 0; m < table.metrics.size(); ++m) {
      std::string cell = "-";
      if (p.mean[m]) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4g +- %.2g", *p.mean[m], p.stderr_[m].value_or(0.0));
        cell = buf;
      }
      out << std::setw(24) << cell;
    }
    out << '\n';
  }
}

ReportSummary report(const std::filesystem::path& results_dir, std::ostream& out, const PlotOptions& options) {
  const ResultsTable table = read_results_csv(results_dir / "results.csv");
  ReportSummary summary;
  summary.metrics = table.metrics;
  summary.points = summarize(table);
  summary.empty = summary.points.empty();

  print_summary(out, table);
  if (summary.empty) out << "warning: " << (results_dir / "results.csv").string() << " has no trial rows\n";

  PlotOptions opts = options;
  if (opts.title.empty()) opts.title = results_dir.filename().string();
  std::ofstream svg(results_dir / "plot.svg", std::ios::binary | std::ios::trunc);
  if (!svg) throw ReportError("cannot write " + (results_dir / "plot.svg").string());
  svg << render_svg(table, opts);
  return summary;
}

}  // namespace refil
