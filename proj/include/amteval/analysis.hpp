// Per-piece metric records -> instrument-count analysis: descriptive
// summaries, model x instrument-count ANOVA, and 1-vs-3 Welch comparisons.

#pragma once

#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "amteval/stats.hpp"

namespace amteval {

struct MetricRecord {
  std::string model;
  std::string piece_id;
  int instrument_count = 0;
  double f_measure = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

inline std::vector<MetricRecord> read_metric_records(std::istream& in) {
  std::vector<MetricRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      MetricRecord r;
      j.at("model").get_to(r.model);
      j.at("piece_id").get_to(r.piece_id);
      j.at("instrument_count").get_to(r.instrument_count);
      j.at("f_measure").get_to(r.f_measure);
      j.at("precision").get_to(r.precision);
      j.at("recall").get_to(r.recall);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("record line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

struct CellSummary {
  std::string model;
  int instrument_count = 0;
  stats::GroupSummary f_measure, precision, recall;
};

struct Comparison {
  std::string model;
  int low_count = 1;
  int high_count = 3;
  stats::TestResult test;
  double p_adjusted = 1.0;
};

struct AnalysisReport {
  std::vector<CellSummary> cells;
  std::optional<stats::AnovaTable> anova;
  std::string anova_error;
  std::vector<Comparison> comparisons;
  std::vector<std::string> notes;
};

/// Welch comparisons use the lowest vs. highest instrument count present
/// (1 vs 3 for the standard set); Bonferroni family = comparisons made.
inline AnalysisReport analyze_records(const std::vector<MetricRecord>& records,
                                      stats::SsType ss_type = stats::SsType::kTypeII) {
  AnalysisReport report;
  std::map<std::string, std::map<int, std::vector<const MetricRecord*>>> groups;
  for (const auto& r : records) groups[r.model][r.instrument_count].push_back(&r);

  for (const auto& [model, by_count] : groups) {
    for (const auto& [count, rows] : by_count) {
      if (rows.size() < 2) {
        report.notes.push_back(model + " count " + std::to_string(count) + ": fewer than 2 pieces, no summary");
        continue;
      }
      std::vector<double> f, p, r;
      for (const auto* row : rows) {
        f.push_back(row->f_measure);
        p.push_back(row->precision);
        r.push_back(row->recall);
      }
      report.cells.push_back({model, count, stats::summarize(f), stats::summarize(p), stats::summarize(r)});
    }
  }

  std::vector<stats::AnovaRecord> anova_rows;
  for (const auto& r : records) anova_rows.push_back({r.model, std::to_string(r.instrument_count), r.f_measure});
  try {
    report.anova = stats::two_way_anova(anova_rows, ss_type);
  } catch (const std::exception& e) {
    report.anova_error = e.what();
  }

  for (const auto& [model, by_count] : groups) {
    if (by_count.size() < 2) continue;
    const auto low = by_count.begin()->first;
    const auto high = by_count.rbegin()->first;
    std::optional<stats::GroupSummary> g_low, g_high;
    for (const auto& c : report.cells) {
      if (c.model != model) continue;
      if (c.instrument_count == low) g_low = c.f_measure;
      if (c.instrument_count == high) g_high = c.f_measure;
    }
    if (!g_low || !g_high) continue;
    try {
      report.comparisons.push_back({model, low, high, stats::welch_t(*g_low, *g_high), 1.0});
    } catch (const std::exception& e) {
      report.notes.push_back(model + ": " + e.what());
    }
  }
  const int k = static_cast<int>(report.comparisons.size());
  for (auto& c : report.comparisons) c.p_adjusted = stats::bonferroni(c.test.p, k);
  return report;
}

inline nlohmann::json to_json(const AnalysisReport& rep) {
  using nlohmann::json;
  auto summary = [](const stats::GroupSummary& g) { return json{{"n", g.n}, {"mean", g.mean}, {"sd", g.sd}}; };
  auto row = [](const stats::AnovaRow& r) {
    return json{{"source", r.source}, {"ss", r.ss}, {"df", r.df}, {"ms", r.ms}, {"f", r.f}, {"p", r.p}};
  };
  json cells = json::array();
  for (const auto& c : rep.cells) {
    cells.push_back({{"model", c.model},
                     {"instrument_count", c.instrument_count},
                     {"f_measure", summary(c.f_measure)},
                     {"precision", summary(c.precision)},
                     {"recall", summary(c.recall)}});
  }
  json anova = nullptr;
  if (rep.anova) {
    const auto& t = *rep.anova;
    anova = {{"ss_type", t.type == stats::SsType::kTypeII ? "II" : "I"},
             {"factor_a", "model"},
             {"factor_b", "instrument_count"},
             {"rows", json::array({row(t.a), row(t.b), row(t.interaction), row(t.residual)})},
             {"ss_total", t.ss_total}};
  }
  json comparisons = json::array();
  for (const auto& c : rep.comparisons) {
    comparisons.push_back({{"model", c.model},
                           {"groups", json::array({c.low_count, c.high_count})},
                           {"t", c.test.t},
                           {"df", c.test.df},
                           {"p", c.test.p},
                           {"p_bonferroni", c.p_adjusted},
                           {"cohens_d", c.test.d}});
  }
  json out{{"summaries", cells}, {"anova", anova}, {"welch", comparisons}, {"notes", rep.notes}};
  if (!rep.anova_error.empty()) out["anova_error"] = rep.anova_error;
  return out;
}

inline std::string to_text(const AnalysisReport& rep) {
  std::ostringstream out;
  char line[256];
  out << "Summaries (mean +- sd)\n";
  std::snprintf(line, sizeof line, "  %-24s %5s %4s  %-17s %-17s %-17s\n", "model", "count", "n", "f_measure",
                "precision", "recall");
  out << line;
  for (const auto& c : rep.cells) {
    std::snprintf(line, sizeof line, "  %-24s %5d %4zu  %.4f +- %.4f  %.4f +- %.4f  %.4f +- %.4f\n", c.model.c_str(),
                  c.instrument_count, c.f_measure.n, c.f_measure.mean, c.f_measure.sd, c.precision.mean,
                  c.precision.sd, c.recall.mean, c.recall.sd);
    out << line;
  }
  out << "\nTwo-way ANOVA on f_measure";
  if (rep.anova) {
    const auto& t = *rep.anova;
    out << " (Type " << (t.type == stats::SsType::kTypeII ? "II" : "I") << " SS; A = model, B = instrument_count)\n";
    std::snprintf(line, sizeof line, "  %-10s %12s %6s %12s %10s %10s\n", "source", "SS", "df", "MS", "F", "p");
    out << line;
    for (const auto* r : {&t.a, &t.b, &t.interaction}) {
      std::snprintf(line, sizeof line, "  %-10s %12.6f %6.0f %12.6f %10.4f %10.4g\n", r->source.c_str(), r->ss, r->df,
                    r->ms, r->f, r->p);
      out << line;
    }
    std::snprintf(line, sizeof line, "  %-10s %12.6f %6.0f %12.6f\n", t.residual.source.c_str(), t.residual.ss,
                  t.residual.df, t.residual.ms);
    out << line;
  } else {
    out << ": not computed (" << rep.anova_error << ")\n";
  }
  out << "\nWelch t-tests (Bonferroni k = " << rep.comparisons.size() << ")\n";
  for (const auto& c : rep.comparisons) {
    std::snprintf(line, sizeof line, "  %-24s %d vs %d: t = %.4f, df = %.3f, p = %.4g, p_adj = %.4g, d = %.4f\n",
                  c.model.c_str(), c.low_count, c.high_count, c.test.t, c.test.df, c.test.p, c.p_adjusted, c.test.d);
    out << line;
  }
  for (const auto& n : rep.notes) out << "note: " << n << "\n";
  return out.str();
}

}  // namespace amteval
