// Precision/recall/F1, overlap ratio, and the per-piece multi-instrument
// onset F1, plus cross-piece aggregation.

#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "amteval/matching.hpp"
#include "amteval/midi.hpp"

namespace amteval {

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const Counts&, const Counts&) = default;
};

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  friend bool operator==(const PRF&, const PRF&) = default;
};

/// Zero denominators give 0 rather than NaN.
inline PRF prf(std::size_t tp, std::size_t fp, std::size_t fn) {
  PRF out;
  if (tp + fp > 0) out.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) out.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (out.precision + out.recall > 0) {
    out.f1 = 2.0 * out.precision * out.recall / (out.precision + out.recall);
  }
  return out;
}

inline PRF prf(const Counts& c) { return prf(c.tp, c.fp, c.fn); }

inline Counts counts_of(const MatchResult& m) { return {m.tp, m.fp, m.fn}; }

/// Mean intersection-over-union of the matched note intervals; 0 without pairs.
inline double average_overlap_ratio(const std::vector<IndexPair>& pairs, const std::vector<Note>& ref,
                                    const std::vector<Note>& est) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [r, e] : pairs) {
    const Note& a = ref.at(r);
    const Note& b = est.at(e);
    const double inter = std::max(0.0, std::min(a.offset, b.offset) - std::max(a.onset, b.onset));
    const double uni = std::max(a.offset, b.offset) - std::min(a.onset, b.onset);
    total += uni > 0 ? inter / uni : 0.0;
  }
  return total / static_cast<double>(pairs.size());
}

struct MultiOnsetScore {
  double score = 0.0;
  std::map<int, PRF> per_instrument;
  bool empty = false;  // neither piece had any instrument
};

namespace detail {

inline std::set<int> program_union(const Piece& ref, const Piece& est) {
  std::set<int> programs;
  for (const auto& t : ref.tracks) programs.insert(t.program);
  for (const auto& t : est.tracks) programs.insert(t.program);
  return programs;
}

inline const std::vector<Note>& notes_or_empty(const Piece& p, int program) {
  static const std::vector<Note> kEmpty;
  const InstrumentTrack* t = p.find_track(program);
  return t ? t->notes : kEmpty;
}

}  // namespace detail

/// Onset-only F1 per program over the union of both pieces' programs, then
/// the unweighted mean. An instrument present on one side only scores 0.
inline MultiOnsetScore piece_multi_onset_f1(const Piece& ref, const Piece& est, const Tolerances& tol = {}) {
  MultiOnsetScore out;
  const auto programs = detail::program_union(ref, est);
  if (programs.empty()) {
    out.empty = true;
    return out;
  }
  double sum = 0.0;
  for (int program : programs) {
    const auto m = match_onset(detail::notes_or_empty(ref, program), detail::notes_or_empty(est, program), tol);
    const PRF score = prf(counts_of(m));
    out.per_instrument[program] = score;
    sum += score.f1;
  }
  out.score = sum / static_cast<double>(programs.size());
  return out;
}

struct MetricsReport {
  std::string piece_id;
  double multi_onset_f1 = 0.0;
  double precision = 0.0;  // onset-only, pooled over the piece's instruments
  double recall = 0.0;
  double f1 = 0.0;
  double onset_offset_f1 = 0.0;
  double overlap = 0.0;
  double runtime_ms = 0.0;
  std::map<int, PRF> per_instrument;

  /// Report for a piece that was missing or could not be graded.
  static MetricsReport zero(std::string piece_id, double runtime_ms = 0.0) {
    MetricsReport r;
    r.piece_id = std::move(piece_id);
    r.runtime_ms = runtime_ms;
    return r;
  }

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Everything that goes into a MetricsReport, plus the raw counts.
struct PieceEvaluation {
  MetricsReport report;
  Counts onset;
  Counts onset_offset;
  bool empty = false;
};

inline PieceEvaluation evaluate_piece(const std::string& piece_id, const Piece& ref, const Piece& est,
                                      const Tolerances& tol = {}, double runtime_ms = 0.0) {
  PieceEvaluation ev;
  MetricsReport& r = ev.report;
  r.piece_id = piece_id;
  r.runtime_ms = runtime_ms;

  const auto programs = detail::program_union(ref, est);
  ev.empty = programs.empty();
  double macro = 0.0;
  double overlap_sum = 0.0;
  std::size_t overlap_pairs = 0;
  for (int program : programs) {
    const auto& ref_notes = detail::notes_or_empty(ref, program);
    const auto& est_notes = detail::notes_or_empty(est, program);
    const auto onset = match_onset(ref_notes, est_notes, tol);
    const auto onset_offset = match_onset_offset(ref_notes, est_notes, tol);
    const PRF score = prf(counts_of(onset));
    r.per_instrument[program] = score;
    macro += score.f1;
    ev.onset += counts_of(onset);
    ev.onset_offset += counts_of(onset_offset);
    overlap_sum += average_overlap_ratio(onset.pairs, ref_notes, est_notes) * static_cast<double>(onset.pairs.size());
    overlap_pairs += onset.pairs.size();
  }
  if (!programs.empty()) r.multi_onset_f1 = macro / static_cast<double>(programs.size());
  const PRF pooled = prf(ev.onset);
  r.precision = pooled.precision;
  r.recall = pooled.recall;
  r.f1 = pooled.f1;
  r.onset_offset_f1 = prf(ev.onset_offset).f1;
  r.overlap = overlap_pairs > 0 ? overlap_sum / static_cast<double>(overlap_pairs) : 0.0;
  return ev;
}

/// Cross-piece means, one per leaderboard column.
struct AggregateScores {
  double f1 = 0.0;  // mean of multi_onset_f1
  double precision = 0.0;
  double recall = 0.0;
  double overlap = 0.0;
  double runtime_ms = 0.0;
  double onset_offset_f1 = 0.0;
  std::size_t pieces = 0;

  friend bool operator==(const AggregateScores&, const AggregateScores&) = default;
};

class AggregationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline AggregateScores aggregate_submission(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw AggregationError("cannot aggregate an empty report list");
  AggregateScores a;
  for (const auto& r : reports) {
    a.f1 += r.multi_onset_f1;
    a.precision += r.precision;
    a.recall += r.recall;
    a.overlap += r.overlap;
    a.runtime_ms += r.runtime_ms;
    a.onset_offset_f1 += r.onset_offset_f1;
  }
  const auto n = static_cast<double>(reports.size());
  a.f1 /= n;
  a.precision /= n;
  a.recall /= n;
  a.overlap /= n;
  a.runtime_ms /= n;
  a.onset_offset_f1 /= n;
  a.pieces = reports.size();
  return a;
}

// JSON

inline void to_json(nlohmann::json& j, const PRF& p) {
  j = nlohmann::json{{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

inline void from_json(const nlohmann::json& j, PRF& p) {
  j.at("precision").get_to(p.precision);
  j.at("recall").get_to(p.recall);
  j.at("f1").get_to(p.f1);
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [program, score] : r.per_instrument) per[std::to_string(program)] = score;
  j = nlohmann::json{{"piece_id", r.piece_id},
                     {"multi_onset_f1", r.multi_onset_f1},
                     {"precision", r.precision},
                     {"recall", r.recall},
                     {"f1", r.f1},
                     {"onset_offset_f1", r.onset_offset_f1},
                     {"overlap", r.overlap},
                     {"runtime_ms", r.runtime_ms},
                     {"per_instrument", per}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  j.at("piece_id").get_to(r.piece_id);
  j.at("multi_onset_f1").get_to(r.multi_onset_f1);
  j.at("precision").get_to(r.precision);
  j.at("recall").get_to(r.recall);
  j.at("f1").get_to(r.f1);
  j.at("onset_offset_f1").get_to(r.onset_offset_f1);
  j.at("overlap").get_to(r.overlap);
  j.at("runtime_ms").get_to(r.runtime_ms);
  r.per_instrument.clear();
  for (const auto& [key, value] : j.at("per_instrument").items()) {
    r.per_instrument[std::stoi(key)] = value.get<PRF>();
  }
}

}  // namespace amteval
