// Test-only helpers: hand-assembled SMF bytes, exhaustive matching oracle,
// series oracle for the incomplete beta, and shared fixtures.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "amteval/amteval.hpp"

#include <atomic>
#include <filesystem>
#include <unistd.h>

namespace amteval::test {

// SMF assembly

using Bytes = std::vector<std::uint8_t>;

inline void append_be(Bytes& out, std::uint32_t v, int width) {
  for (int i = width - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void append_vlq(Bytes& out, std::uint32_t v) {
  Bytes tmp{static_cast<std::uint8_t>(v & 0x7F)};
  while ((v >>= 7) != 0) tmp.push_back(static_cast<std::uint8_t>(0x80 | (v & 0x7F)));
  out.insert(out.end(), tmp.rbegin(), tmp.rend());
}

/// Builds a track body from (delta, raw event bytes) pairs; appends End of Track.
inline Bytes track_body(std::initializer_list<std::pair<std::uint32_t, Bytes>> events, bool end_of_track = true) {
  Bytes body;
  for (const auto& [delta, bytes] : events) {
    append_vlq(body, delta);
    body.insert(body.end(), bytes.begin(), bytes.end());
  }
  if (end_of_track) body.insert(body.end(), {0x00, 0xFF, 0x2F, 0x00});
  return body;
}

inline Bytes smf(int format, std::uint16_t division, const std::vector<Bytes>& tracks) {
  Bytes out{'M', 'T', 'h', 'd'};
  append_be(out, 6, 4);
  append_be(out, static_cast<std::uint32_t>(format), 2);
  append_be(out, static_cast<std::uint32_t>(tracks.size()), 2);
  append_be(out, division, 2);
  for (const auto& t : tracks) {
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    append_be(out, static_cast<std::uint32_t>(t.size()), 4);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

inline Bytes tempo_event(std::uint32_t us) {
  return {0xFF, 0x51, 0x03, static_cast<std::uint8_t>(us >> 16), static_cast<std::uint8_t>(us >> 8),
          static_cast<std::uint8_t>(us)};
}

// Matching oracle: exhaustive search over every one-to-one pairing.

struct BruteForceBest {
  std::size_t cardinality = 0;
  std::int64_t min_cost = 0;  // among maximum-cardinality pairings
};

inline BruteForceBest brute_force_matching(std::size_t n_left, std::size_t n_right,
                                           const std::vector<WeightedEdge>& edges) {
  std::vector<std::vector<std::pair<std::size_t, std::int64_t>>> adj(n_left);
  for (const auto& e : edges) adj[e.left].push_back({e.right, e.cost});
  std::vector<bool> used(n_right, false);
  BruteForceBest best;
  best.min_cost = std::numeric_limits<std::int64_t>::max();
  std::function<void(std::size_t, std::size_t, std::int64_t)> rec = [&](std::size_t l, std::size_t card,
                                                                          std::int64_t cost) {
    if (l == n_left) {
      if (card > best.cardinality || (card == best.cardinality && cost < best.min_cost)) {
        best.cardinality = card;
        best.min_cost = cost;
      }
      return;
    }
    if (card + (n_left - l) < best.cardinality) return;  // cannot reach the best size
    for (const auto& [r, c] : adj[l]) {
      if (used[r]) continue;
      used[r] = true;
      rec(l + 1, card + 1, cost + c);
      used[r] = false;
    }
    rec(l + 1, card, cost);
  };
  rec(0, 0, 0);
  if (best.cardinality == 0) best.min_cost = 0;
  return best;
}

inline bool is_one_to_one(const std::vector<IndexPair>& pairs) {
  std::vector<std::size_t> ls, rs;
  for (const auto& [l, r] : pairs) {
    ls.push_back(l);
    rs.push_back(r);
  }
  std::sort(ls.begin(), ls.end());
  std::sort(rs.begin(), rs.end());
  return std::adjacent_find(ls.begin(), ls.end()) == ls.end() && std::adjacent_find(rs.begin(), rs.end()) == rs.end();
}

/// Random note list on a coarse time grid so that ties and near-misses occur.
inline std::vector<Note> random_notes(std::mt19937& rng, std::size_t n) {
  std::uniform_int_distribution<int> pitch(60, 63);
  std::uniform_int_distribution<int> slot(0, 12);
  std::uniform_int_distribution<int> len(1, 8);
  std::vector<Note> notes;
  for (std::size_t i = 0; i < n; ++i) {
    const double on = slot(rng) * 0.025;
    notes.push_back({pitch(rng), on, on + len(rng) * 0.05, 80});
  }
  sort_notes(notes);
  return notes;
}

// Incomplete beta oracle: hypergeometric power series in long double,
//   I_x(a,b) = x^a (1-x)^b / (a B(a,b)) * sum_n (a+b)_n / (a+1)_n x^n,
// with the reflection I_x(a,b) = 1 - I_{1-x}(b,a) above x = 1/2.
inline long double beta_series(long double a, long double b, long double x) {
  if (x == 0.0L) return 0.0L;
  if (x == 1.0L) return 1.0L;
  if (x > 0.5L) return 1.0L - beta_series(b, a, 1.0L - x);
  const long double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  long double term = 1.0L, sum = 1.0L;
  for (int n = 0; n < 200000; ++n) {
    term *= (a + b + n) / (a + 1.0L + n) * x;
    sum += term;
    if (term < sum * 1e-21L) break;
  }
  return std::exp(log_front) * sum / a;
}

// Excerpt: piano dyad plus a violin line over four one-beat
// groups at 60 BPM. Group 1 exact; group 2 piano top note wrong; group 3
// piano top note missing; group 4 every note wrong.
struct ExcerptFixture {
  Piece reference;
  Piece estimate;
};

inline ExcerptFixture duet_excerpt() {
  auto base = [] {
    Piece p;
    p.tempo_map = TempoMap(480, {{0, 1'000'000}});
    p.meter = {4, 4};
    return p;
  };
  ExcerptFixture fx{base(), base()};
  auto add = [](Piece& p, int program, int pitch, int group) {
    p.track(program).notes.push_back({pitch, group * 1.0, group * 1.0 + 1.0, 80});
  };
  for (int g = 0; g < 4; ++g) {
    add(fx.reference, gm::kPiano, 60, g);
    add(fx.reference, gm::kPiano, 64, g);
    add(fx.reference, gm::kViolin, 67, g);
  }
  // group 1
  add(fx.estimate, gm::kPiano, 60, 0);
  add(fx.estimate, gm::kPiano, 64, 0);
  add(fx.estimate, gm::kViolin, 67, 0);
  // group 2
  add(fx.estimate, gm::kPiano, 60, 1);
  add(fx.estimate, gm::kPiano, 65, 1);
  add(fx.estimate, gm::kViolin, 67, 1);
  // group 3
  add(fx.estimate, gm::kPiano, 60, 2);
  add(fx.estimate, gm::kViolin, 67, 2);
  // group 4
  add(fx.estimate, gm::kPiano, 61, 3);
  add(fx.estimate, gm::kPiano, 66, 3);
  add(fx.estimate, gm::kViolin, 69, 3);
  for (auto* p : {&fx.reference, &fx.estimate}) {
    for (auto& t : p->tracks) sort_notes(t.notes);
  }
  return fx;
}

/// Notes with onsets in [t0, t1), keeping every track.
inline Piece slice(const Piece& p, double t0, double t1) {
  Piece out = p;
  for (auto& t : out.tracks) {
    std::erase_if(t.notes, [&](const Note& n) { return n.onset < t0 || n.onset >= t1; });
  }
  return out;
}

// Challenge results table: rank order, name, F1, P, R, overlap, ms.
struct TableRow {
  const char* name;
  double f1, precision, recall, overlap, runtime_ms;
};

inline const std::vector<TableRow>& results_table() {
  static const std::vector<TableRow> rows{
      {"MIROS", 0.5998, 0.6558, 0.5724, 0.7391, 22.05},
      {"YourMT3-YPTF-MoE-M", 0.5938, 0.6010, 0.5888, 0.7305, 12.60},
      {"YourMT3-YPTF-S", 0.5581, 0.5565, 0.5615, 0.7326, 15.40},
      {"YourMT3-P", 0.3947, 0.3966, 0.3985, 0.7263, 14.99},
      {"MT3 (baseline)", 0.3932, 0.3811, 0.4115, 0.7180, 20.19},
      {"YourMT3-YPTF-SP-V", 0.3305, 0.3280, 0.3358, 0.7147, 14.50},
      {"press_to_win 1", 0.3199, 0.3105, 0.3346, 0.7331, 19.30},
      {"press_to_win 2", 0.3190, 0.3094, 0.3331, 0.7310, 18.08},
      {"YourMT3-YPTF-MoE-MP", 0.2173, 0.2150, 0.2206, 0.6116, 16.03},
      {"press_to_win 3", 0.2168, 0.2144, 0.2203, 0.6159, 16.15},
      {"Bytedance Piano", 0.1721, 0.2041, 0.1689, 0.5423, 9.67},
      {"press_to_win 4", 0.1470, 0.1305, 0.1799, 0.6998, 21.74},
      {"ReconVAT", 0.1415, 0.1215, 0.1803, 0.7898, 5.45},
      {"Basic Pitch", 0.0634, 0.0550, 0.0782, 0.5977, 3.91},
  };
  return rows;
}

/// 76 per-piece reports whose means are the row's values: alternating
/// +/- offsets that cancel in pairs.
inline std::vector<MetricsReport> reports_with_means(const TableRow& row, std::size_t pieces = 76) {
  std::vector<MetricsReport> out;
  for (std::size_t i = 0; i < pieces; ++i) {
    const double s = (i % 2 == 0 ? 1.0 : -1.0) * (0.01 + 0.001 * static_cast<double>(i / 2 % 5));
    MetricsReport r;
    r.piece_id = "piece_" + std::to_string(i);
    r.multi_onset_f1 = row.f1 + s;
    r.precision = row.precision + s;
    r.recall = row.recall + s;
    r.f1 = r.multi_onset_f1;
    r.overlap = row.overlap + s;
    r.runtime_ms = row.runtime_ms + 100 * s;
    out.push_back(r);
  }
  return out;
}

// Rule fixtures: a compliant two-instrument piece and one mutation per rule.

inline Piece compliant_piece() {
  Piece p;
  p.tempo_map = TempoMap(480, {{0, 750'000}});  // 80 BPM
  p.meter = {4, 4};
  const double q = 0.75;
  auto& piano = p.track(gm::kPiano).notes;
  piano.push_back({60, 0.0, q, 80});
  piano.push_back({64, q, 2 * q, 80});
  auto& flute = p.track(gm::kFlute).notes;
  flute.push_back({72, 0.0, q / 4, 64});
  flute.push_back({74, q / 4, q, 64});
  return p;
}

inline std::set<int> rule_ids(const std::vector<Violation>& vs) {
  std::set<int> out;
  for (const auto& v : vs) out.insert(v.rule_id());
  return out;
}

struct RuleFixture {
  int rule;
  void (*mutate)(Piece&);
};

inline const std::vector<RuleFixture>& rule_fixtures() {
  static const std::vector<RuleFixture> fixtures{
      {1,
       [](Piece& p) {
         // 100 BPM; notes keep their tick positions.
         const TempoMap old = p.tempo_map;
         p.tempo_map = TempoMap(480, {{0, 600'000}});
         for (auto& t : p.tracks) {
           for (auto& n : t.notes) {
             n.onset = p.tempo_map.seconds(old.nearest_tick(n.onset));
             n.offset = p.tempo_map.seconds(old.nearest_tick(n.offset));
           }
         }
       }},
      {2, [](Piece& p) { p.meter = {5, 4}; }},
      {3,
       [](Piece& p) {
         // 50 ticks past the downbeat is between sixteenths (120 ticks each).
         auto& n = p.track(gm::kPiano).notes[0];
         n.onset = p.tempo_map.seconds(50);
       }},
      {4,
       [](Piece& p) {
         // Double-dotted quarter: seven sixteenths.
         auto& n = p.track(gm::kPiano).notes[1];
         n.offset = p.tempo_map.seconds(480 + 7 * 120);
       }},
      {5, [](Piece& p) { p.track(gm::kPiano).notes[0].pitch = 97; }},
      {6, [](Piece& p) { p.track(gm::kFlute).notes[1].velocity = 120; }},
      {7,
       [](Piece& p) {
         auto& t = p.track(24);  // nylon guitar
         t.notes.push_back({60, 0.0, 0.75, 80});
       }},
      {8,
       [](Piece& p) {
         p.track(gm::kViolin).notes.push_back({67, 0.0, 0.75, 80});
         p.track(gm::kCello).notes.push_back({48, 0.0, 0.75, 80});
         p.tracks.erase(std::find_if(p.tracks.begin(), p.tracks.end(),
                                     [](const InstrumentTrack& t) { return t.program == gm::kFlute; }));
       }},
  };
  return fixtures;
}


// Scratch directories

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("amteval-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Writes a small generated reference set and returns its directory.
inline std::filesystem::path make_reference_dir(const TempDir& tmp, std::uint64_t seed = 11, int count = 6,
                                                double duration = 8.0) {
  const auto dir = tmp / "refs";
  write_set(dir, seed, generate_set(seed, count, kDefaultMix, duration));
  return dir;
}

/// Writes each reference piece, passed through `edit`, as a submission.
inline std::filesystem::path make_submission_dir(const TempDir& tmp, const std::string& name, const ReferenceSet& refs,
                                                 const std::function<void(Piece&)>& edit = {},
                                                 bool with_runtime = true) {
  const auto dir = tmp / name;
  std::filesystem::create_directories(dir);
  nlohmann::json runtime = nlohmann::json::object();
  double ms = 10.0;
  for (const auto& [id, ref] : refs.pieces) {
    Piece p = ref;
    if (edit) edit(p);
    write_bytes(dir / (id + ".mid"), write_smf(p));
    runtime[id] = ms;
    ms += 1.0;
  }
  if (with_runtime) std::ofstream(dir / "runtime.json") << runtime.dump();
  return dir;
}

inline GradeResult fake_result(const std::string& id, const std::string& model, double f1, std::int64_t at_ms,
                               std::size_t pieces = 3) {
  GradeResult r;
  r.submission_id = id;
  r.model_name = model;
  r.received_at_ms = at_ms;
  for (std::size_t i = 0; i < pieces; ++i) {
    GradedPiece g;
    g.report = MetricsReport::zero("piece_" + std::to_string(i), 5.0 + static_cast<double>(i));
    g.report.multi_onset_f1 = f1;
    g.report.per_instrument[0] = {f1, f1, f1};
    g.instrument_count = 1 + i % 3;
    if (i == 0) g.annotations.push_back(kRuntimeMissing);
    r.pieces.push_back(g);
  }
  r.aggregate = aggregate_submission(r.reports());
  return r;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Published F-measure summaries (count 1 and count 3) for the two models that
// the text reports Welch results for.
struct WelchCase {
  const char* model;
  stats::GroupSummary one, three;
  double t, p, d, p_bonferroni;
};

inline const std::vector<WelchCase>& table2_cases() {
  static const std::vector<WelchCase> cases{
      {"MIROS", {6, 0.7193, 0.2103}, {46, 0.4367, 0.2012}, 3.11, 0.0197, 1.40, 0.059},
      {"YourMT3-YPTF-MoE-M", {6, 0.7594, 0.2304}, {46, 0.3918, 0.1471}, 3.81, 0.0103, 2.34, 0.031},
  };
  return cases;
}

/// 3 models x instrument counts {1: 6, 2: 24, 3: 46} with arbitrary responses.
inline std::vector<stats::AnovaRecord> anova_228(std::uint32_t seed = 1) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<stats::AnovaRecord> out;
  for (const char* model : {"MT3", "MIROS", "MoE-M"}) {
    for (const auto& [count, n] : {std::pair{1, 6}, std::pair{2, 24}, std::pair{3, 46}}) {
      for (int i = 0; i < n; ++i) out.push_back({model, std::to_string(count), u(rng)});
    }
  }
  return out;
}

/// Classical balanced-design decomposition computed from cell means.
struct BalancedSs {
  double a = 0, b = 0, ab = 0, residual = 0, total = 0;
};

inline BalancedSs balanced_oracle(const std::vector<std::vector<std::vector<double>>>& cells) {
  const std::size_t la = cells.size(), lb = cells[0].size(), n = cells[0][0].size();
  std::vector<std::vector<double>> cell_mean(la, std::vector<double>(lb, 0.0));
  std::vector<double> a_mean(la, 0.0), b_mean(lb, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < la; ++i) {
    for (std::size_t j = 0; j < lb; ++j) {
      for (double y : cells[i][j]) cell_mean[i][j] += y / static_cast<double>(n);
      a_mean[i] += cell_mean[i][j] / static_cast<double>(lb);
      b_mean[j] += cell_mean[i][j] / static_cast<double>(la);
      grand += cell_mean[i][j] / static_cast<double>(la * lb);
    }
  }
  BalancedSs ss;
  for (std::size_t i = 0; i < la; ++i) ss.a += static_cast<double>(lb * n) * std::pow(a_mean[i] - grand, 2);
  for (std::size_t j = 0; j < lb; ++j) ss.b += static_cast<double>(la * n) * std::pow(b_mean[j] - grand, 2);
  for (std::size_t i = 0; i < la; ++i) {
    for (std::size_t j = 0; j < lb; ++j) {
      ss.ab += static_cast<double>(n) * std::pow(cell_mean[i][j] - a_mean[i] - b_mean[j] + grand, 2);
      for (double y : cells[i][j]) {
        ss.residual += std::pow(y - cell_mean[i][j], 2);
        ss.total += std::pow(y - grand, 2);
      }
    }
  }
  return ss;
}

inline std::vector<stats::AnovaRecord> to_records(const std::vector<std::vector<std::vector<double>>>& cells) {
  std::vector<stats::AnovaRecord> out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t j = 0; j < cells[i].size(); ++j) {
      for (double y : cells[i][j]) out.push_back({"a" + std::to_string(i), "b" + std::to_string(j), y});
    }
  }
  return out;
}

}  // namespace amteval::test
