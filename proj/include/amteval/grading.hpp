// Reference sets, submission grading, the append-only result store and the
// leaderboard derived from it.

#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "amteval/matching.hpp"
#include "amteval/metrics.hpp"
#include "amteval/midi.hpp"
#include "amteval/ruleset.hpp"

namespace amteval {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// Reference sets

class LoadError : public std::runtime_error {
 public:
  LoadError(const std::string& file, const std::string& what, std::vector<Violation> violations = {})
      : std::runtime_error(file + ": " + what), file_(file), violations_(std::move(violations)) {}
  const std::string& file() const { return file_; }
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  std::string file_;
  std::vector<Violation> violations_;
};

struct ReferenceSet {
  std::map<std::string, Piece> pieces;  // piece id -> reference

  std::size_t size() const { return pieces.size(); }
  bool empty() const { return pieces.empty(); }
};

/// Manifest written next to a generated set.
inline json make_manifest(std::uint64_t seed, const std::vector<GeneratedPiece>& set) {
  json pieces = json::array();
  std::map<std::string, int> counts{{"1", 0}, {"2", 0}, {"3", 0}};
  for (const auto& g : set) {
    json programs = json::array();
    for (const auto& t : g.piece.tracks) programs.push_back(t.program);
    pieces.push_back({{"id", g.id}, {"file", g.id + ".mid"}, {"programs", programs},
                      {"instrument_count", g.piece.tracks.size()}});
    ++counts[std::to_string(g.piece.tracks.size())];
  }
  return {{"seed", seed}, {"count", set.size()}, {"counts", counts}, {"pieces", pieces}};
}

inline void write_set(const fs::path& dir, std::uint64_t seed, const std::vector<GeneratedPiece>& set) {
  fs::create_directories(dir);
  for (const auto& g : set) write_bytes(dir / (g.id + ".mid"), write_smf(g.piece));
  std::ofstream(dir / "manifest.json") << make_manifest(seed, set).dump(2) << '\n';
}

inline std::string describe(const std::vector<Violation>& violations) {
  std::string out;
  for (const auto& v : violations) {
    if (!out.empty()) out += "; ";
    out += "rule " + std::to_string(v.rule_id()) + ": " + v.message;
  }
  return out;
}

/// Loads `manifest.json` (or every `.mid` file when there is no manifest);
/// each reference must parse and satisfy the composition rules.
inline ReferenceSet load_reference_set(const fs::path& dir, const Rules& rules = {}) {
  if (!fs::is_directory(dir)) throw LoadError(dir.string(), "not a directory");
  std::vector<std::pair<std::string, fs::path>> files;
  const fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    json manifest;
    try {
      std::ifstream(manifest_path) >> manifest;
      for (const auto& p : manifest.at("pieces")) {
        files.emplace_back(p.at("id").get<std::string>(), dir / p.at("file").get<std::string>());
      }
    } catch (const json::exception& e) {
      throw LoadError(manifest_path.string(), std::string("malformed manifest: ") + e.what());
    }
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".mid") {
        files.emplace_back(entry.path().stem().string(), entry.path());
      }
    }
  }
  if (files.empty()) throw LoadError(dir.string(), "reference set contains no pieces");

  ReferenceSet set;
  for (const auto& [id, path] : files) {
    Piece piece;
    try {
      piece = parse_smf(read_bytes(path));
    } catch (const std::exception& e) {
      throw LoadError(path.string(), e.what());
    }
    auto violations = validate_piece(piece, rules);
    if (!violations.empty()) {
      const std::string message = describe(violations);
      throw LoadError(path.string(), message, std::move(violations));
    }
    if (!set.pieces.emplace(id, std::move(piece)).second) throw LoadError(path.string(), "duplicate piece id " + id);
  }
  return set;
}

// Submissions and grading

struct Submission {
  std::string id;
  std::string model_name;
  std::map<std::string, fs::path> files;  // piece id -> estimated MIDI
  std::int64_t received_at_ms = 0;
  std::map<std::string, double> runtime_ms;  // self-reported, optional
};

inline constexpr const char* kRuntimeMissing = "runtime_self_reported_missing";
inline constexpr const char* kMissingPiece = "missing_estimate";
inline constexpr const char* kEmptyPiece = "empty_piece";

/// Reads `<piece_id>.mid` files and an optional `runtime.json` ({piece id: ms}).
inline Submission load_submission_dir(const fs::path& dir, std::string model_name, std::string id = {}) {
  if (!fs::is_directory(dir)) throw std::runtime_error("submission directory " + dir.string() + " not found");
  Submission sub;
  sub.id = std::move(id);
  sub.model_name = std::move(model_name);
  sub.received_at_ms = now_ms();
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".mid") {
      sub.files[entry.path().stem().string()] = entry.path();
    }
  }
  const fs::path runtime = dir / "runtime.json";
  if (fs::exists(runtime)) {
    try {
      json j;
      std::ifstream(runtime) >> j;
      for (const auto& [piece, ms] : j.items()) sub.runtime_ms[piece] = ms.get<double>();
    } catch (const json::exception& e) {
      throw std::runtime_error("malformed runtime.json: " + std::string(e.what()));
    }
  }
  return sub;
}

struct GradedPiece {
  MetricsReport report;
  std::vector<std::string> annotations;
  std::size_t instrument_count = 0;  // of the reference
};

struct GradeResult {
  std::string submission_id;
  std::string model_name;
  std::int64_t received_at_ms = 0;
  std::vector<GradedPiece> pieces;  // reference-set order
  AggregateScores aggregate;
  std::vector<std::string> warnings;

  std::vector<MetricsReport> reports() const {
    std::vector<MetricsReport> out;
    for (const auto& p : pieces) out.push_back(p.report);
    return out;
  }
};

/// Grades every reference piece. Missing or unreadable estimates score zero
/// with an annotation; grading itself never fails on a bad estimate.
inline GradeResult grade_submission(const Submission& sub, const ReferenceSet& refs, const Tolerances& tol = {},
                                    unsigned workers = 0) {
  if (refs.empty()) throw std::invalid_argument("reference manifest is empty");
  tol.check();
  GradeResult out;
  out.submission_id = sub.id;
  out.model_name = sub.model_name;
  out.received_at_ms = sub.received_at_ms;
  for (const auto& [id, path] : sub.files) {
    if (!refs.pieces.contains(id)) out.warnings.push_back("ignoring " + path.filename().string() + ": no reference " + id);
  }

  std::vector<const std::pair<const std::string, Piece>*> jobs;
  for (const auto& entry : refs.pieces) jobs.push_back(&entry);
  out.pieces.resize(jobs.size());

  auto grade_one = [&](std::size_t i) {
    const auto& [id, ref] = *jobs[i];
    GradedPiece& g = out.pieces[i];
    g.instrument_count = ref.tracks.size();
    double runtime = 0.0;
    if (auto it = sub.runtime_ms.find(id); it != sub.runtime_ms.end()) {
      runtime = it->second;
    } else {
      g.annotations.push_back(kRuntimeMissing);
    }
    auto file = sub.files.find(id);
    if (file == sub.files.end()) {
      g.report = MetricsReport::zero(id, runtime);
      g.annotations.push_back(kMissingPiece);
      return;
    }
    try {
      const Piece est = parse_smf(read_bytes(file->second));
      auto ev = evaluate_piece(id, ref, est, tol, runtime);
      g.report = std::move(ev.report);
      if (ev.empty) g.annotations.push_back(kEmptyPiece);
    } catch (const std::exception& e) {
      g.report = MetricsReport::zero(id, runtime);
      g.annotations.push_back(std::string("unparseable_estimate: ") + e.what());
    }
  };

  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(jobs.size()));
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 1; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < jobs.size();) grade_one(i);
      });
    }
    for (std::size_t i; (i = next++) < jobs.size();) grade_one(i);
  }
  out.aggregate = aggregate_submission(out.reports());
  return out;
}

// Leaderboard

struct LeaderboardEntry {
  int rank = 0;
  std::string model_name;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double overlap = 0.0;
  double runtime_ms = 0.0;
  std::string submission_id;
  std::int64_t received_at_ms = 0;
};

using Leaderboard = std::vector<LeaderboardEntry>;

inline LeaderboardEntry make_entry(const std::string& model_name, const AggregateScores& a,
                                   std::string submission_id = {}, std::int64_t received_at_ms = 0) {
  return {0, model_name, a.f1, a.precision, a.recall, a.overlap, a.runtime_ms, std::move(submission_id), received_at_ms};
}

/// Keeps the last entry per model (input order = store order), then sorts
/// by F1 descending with earlier submissions first on ties.
inline Leaderboard rank_entries(const std::vector<LeaderboardEntry>& entries) {
  std::map<std::string, std::size_t> latest;
  for (std::size_t i = 0; i < entries.size(); ++i) latest[entries[i].model_name] = i;
  std::vector<std::size_t> keep;
  for (const auto& [name, i] : latest) keep.push_back(i);
  std::sort(keep.begin(), keep.end(), [&](std::size_t x, std::size_t y) {
    const auto& a = entries[x];
    const auto& b = entries[y];
    if (a.f1 != b.f1) return a.f1 > b.f1;
    if (a.received_at_ms != b.received_at_ms) return a.received_at_ms < b.received_at_ms;
    return x < y;
  });
  Leaderboard board;
  for (std::size_t i : keep) {
    board.push_back(entries[i]);
    board.back().rank = static_cast<int>(board.size());
  }
  return board;
}

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline constexpr const char* kLeaderboardCsvHeader = "rank,model_name,f1,precision,recall,overlap,runtime_ms";

inline std::string leaderboard_csv(const Leaderboard& board) {
  std::string out = std::string(kLeaderboardCsvHeader) + "\n";
  for (const auto& e : board) {
    out += std::to_string(e.rank) + "," + csv_field(e.model_name) + "," + fixed(e.f1, 4) + "," +
           fixed(e.precision, 4) + "," + fixed(e.recall, 4) + "," + fixed(e.overlap, 4) + "," +
           fixed(e.runtime_ms, 2) + "\n";
  }
  return out;
}

inline std::string leaderboard_text(const Leaderboard& board) {
  std::size_t width = 10;
  for (const auto& e : board) width = std::max(width, e.model_name.size());
  std::ostringstream out;
  char line[512];
  std::snprintf(line, sizeof line, "%-4s  %-*s  %8s  %9s  %8s  %8s  %10s\n", "Rank", static_cast<int>(width),
                "Model Name", "F1", "Precision", "Recall", "Overlap", "Runtime ms");
  out << line;
  for (const auto& e : board) {
    std::snprintf(line, sizeof line, "%-4d  %-*s  %8.4f  %9.4f  %8.4f  %8.4f  %10.2f\n", e.rank,
                  static_cast<int>(width), e.model_name.c_str(), e.f1, e.precision, e.recall, e.overlap, e.runtime_ms);
    out << line;
  }
  return out.str();
}

inline double round_to(double v, int decimals) {
  return std::stod(fixed(v, decimals));
}

inline void to_json(json& j, const LeaderboardEntry& e) {
  j = json{{"rank", e.rank},
           {"model_name", e.model_name},
           {"f1", round_to(e.f1, 4)},
           {"precision", round_to(e.precision, 4)},
           {"recall", round_to(e.recall, 4)},
           {"overlap", round_to(e.overlap, 4)},
           {"runtime_ms", round_to(e.runtime_ms, 2)}};
}

inline void to_json(json& j, const AggregateScores& a) {
  j = json{{"f1", a.f1},           {"precision", a.precision},   {"recall", a.recall},
           {"overlap", a.overlap}, {"runtime_ms", a.runtime_ms}, {"onset_offset_f1", a.onset_offset_f1},
           {"pieces", a.pieces}};
}

inline void from_json(const json& j, AggregateScores& a) {
  j.at("f1").get_to(a.f1);
  j.at("precision").get_to(a.precision);
  j.at("recall").get_to(a.recall);
  j.at("overlap").get_to(a.overlap);
  j.at("runtime_ms").get_to(a.runtime_ms);
  j.at("onset_offset_f1").get_to(a.onset_offset_f1);
  j.at("pieces").get_to(a.pieces);
}

/// One line per graded piece, the record shape read by `stats --records`.
inline json stats_record(const std::string& model, const GradedPiece& g) {
  return {{"model", model},
          {"piece_id", g.report.piece_id},
          {"instrument_count", g.instrument_count},
          {"f_measure", g.report.multi_onset_f1},
          {"precision", g.report.precision},
          {"recall", g.report.recall}};
}

// Store

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SubmissionRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-piece record in the log.
struct StoreRecord {
  std::string submission_id;
  std::string piece_id;
  MetricsReport report;
  std::vector<std::string> annotations;
};

struct StoredSubmission {
  std::string submission_id;
  std::string model_name;
  std::int64_t received_at_ms = 0;
  AggregateScores aggregate;
  std::vector<StoreRecord> records;
};

/// Append-only JSON-lines log with an in-memory index. A submission is one
/// block of piece lines closed by a submission line; a block without its
/// closing line (torn write) is ignored on replay.
class Store {
 public:
  explicit Store(fs::path path) : path_(std::move(path)) { replay(); }

  const fs::path& path() const { return path_; }

  /// Appends a graded submission. A known id is rejected unless
  /// `supersede` is set, in which case the new block replaces it.
  void append(const GradeResult& result, bool supersede = false) {
    std::scoped_lock writer(write_mutex_);
    if (result.submission_id.empty()) throw SubmissionRejected("submission id is empty");
    {
      std::shared_lock read(index_mutex_);
      if (!supersede && index_.contains(result.submission_id)) {
        throw SubmissionRejected("submission id " + result.submission_id + " already exists");
      }
    }
    StoredSubmission s = to_stored(result);
    write_block(encode(s));
    std::unique_lock write(index_mutex_);
    apply(std::move(s));
  }

  /// Next free id of the form sub-000001.
  std::string next_id() const {
    std::shared_lock read(index_mutex_);
    std::size_t n = index_.size() + 1;
    std::string id;
    do {
      char buf[32];
      std::snprintf(buf, sizeof buf, "sub-%06zu", n++);
      id = buf;
    } while (index_.contains(id));
    return id;
  }

  std::optional<StoredSubmission> find(const std::string& id) const {
    std::shared_lock read(index_mutex_);
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(const std::string& id) const {
    std::shared_lock read(index_mutex_);
    return index_.contains(id);
  }

  std::size_t size() const {
    std::shared_lock read(index_mutex_);
    return index_.size();
  }

  Leaderboard leaderboard() const {
    std::shared_lock read(index_mutex_);
    return board_;
  }

  /// Re-reads the log from disk and rebuilds the index.
  void replay() {
    std::scoped_lock writer(write_mutex_);
    std::unique_lock write(index_mutex_);
    index_.clear();
    order_.clear();
    board_.clear();
    committed_bytes_ = 0;
    if (!fs::exists(path_)) return;
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw StoreError("cannot read store " + path_.string());
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::vector<StoreRecord> pending;
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
      const std::size_t nl = text.find('\n', start);
      if (nl == std::string::npos) break;  // unterminated tail
      const std::string line = text.substr(start, nl - start);
      start = nl + 1;
      ++line_no;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
        const std::string kind = j.at("kind");
        if (kind == "piece") {
          StoreRecord r;
          j.at("submission_id").get_to(r.submission_id);
          j.at("piece_id").get_to(r.piece_id);
          r.report = j.at("report").get<MetricsReport>();
          j.at("annotations").get_to(r.annotations);
          pending.push_back(std::move(r));
        } else if (kind == "submission") {
          StoredSubmission s;
          j.at("submission_id").get_to(s.submission_id);
          j.at("model_name").get_to(s.model_name);
          j.at("received_at_ms").get_to(s.received_at_ms);
          s.aggregate = j.at("aggregate").get<AggregateScores>();
          const std::size_t pieces = j.at("pieces");
          for (auto& r : pending) {
            if (r.submission_id == s.submission_id) s.records.push_back(std::move(r));
          }
          pending.clear();
          if (s.records.size() != pieces) {
            throw StoreError("submission " + s.submission_id + " has " + std::to_string(s.records.size()) +
                             " piece records, expected " + std::to_string(pieces));
          }
          apply_unlocked(std::move(s));
          committed_bytes_ = start;
        } else {
          throw StoreError("unknown record kind " + kind);
        }
      } catch (const json::exception& e) {
        throw StoreError(path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    rebuild_board();
  }

 private:
  static StoredSubmission to_stored(const GradeResult& r) {
    StoredSubmission s{r.submission_id, r.model_name, r.received_at_ms, r.aggregate, {}};
    for (const auto& p : r.pieces) s.records.push_back({r.submission_id, p.report.piece_id, p.report, p.annotations});
    return s;
  }

  static std::string encode(const StoredSubmission& s) {
    std::string block;
    for (const auto& r : s.records) {
      block += json{{"kind", "piece"},
                    {"submission_id", r.submission_id},
                    {"piece_id", r.piece_id},
                    {"report", r.report},
                    {"annotations", r.annotations}}
                   .dump();
      block += '\n';
    }
    block += json{{"kind", "submission"},
                  {"submission_id", s.submission_id},
                  {"model_name", s.model_name},
                  {"received_at_ms", s.received_at_ms},
                  {"pieces", s.records.size()},
                  {"aggregate", s.aggregate}}
                 .dump();
    block += '\n';
    return block;
  }

  // Single write of the whole block; on any failure the file is truncated
  // back to its previous length. A torn tail left by a crash is cut off
  // before writing so that the new block starts on a clean line.
  void write_block(const std::string& block) {
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw StoreError("cannot open store " + path_.string() + ": " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      throw StoreError("cannot stat store: " + std::string(std::strerror(errno)));
    }
    const auto before = static_cast<off_t>(committed_bytes_);
    if (st.st_size < before) {
      ::close(fd);
      throw StoreError("store " + path_.string() + " shrank since it was loaded");
    }
    if (st.st_size > before && ::ftruncate(fd, before) != 0) {
      const std::string reason = std::strerror(errno);
      ::close(fd);
      throw StoreError("cannot drop uncommitted tail of " + path_.string() + ": " + reason);
    }
    std::size_t done = 0;
    bool ok = true;
    while (done < block.size()) {
      const ssize_t n = ::write(fd, block.data() + done, block.size() - done);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        ok = false;
        break;
      }
      done += static_cast<std::size_t>(n);
    }
    if (ok && ::fsync(fd) != 0) ok = false;
    if (!ok) {
      const std::string reason = std::strerror(errno);
      if (::ftruncate(fd, before) != 0) {
        // Nothing more can be done; replay drops the uncommitted tail.
      }
      ::close(fd);
      throw StoreError("append to " + path_.string() + " failed: " + reason);
    }
    ::close(fd);
    committed_bytes_ += block.size();
  }

  void apply(StoredSubmission s) {
    apply_unlocked(std::move(s));
    rebuild_board();
  }

  void apply_unlocked(StoredSubmission s) {
    const std::string id = s.submission_id;
    if (!index_.contains(id)) order_.push_back(id);
    index_[id] = std::move(s);
  }

  void rebuild_board() {
    std::vector<LeaderboardEntry> entries;
    for (const auto& id : order_) {
      const auto& s = index_.at(id);
      entries.push_back(make_entry(s.model_name, s.aggregate, s.submission_id, s.received_at_ms));
    }
    board_ = rank_entries(entries);
  }

  fs::path path_;
  mutable std::shared_mutex index_mutex_;
  std::mutex write_mutex_;
  std::map<std::string, StoredSubmission> index_;
  std::vector<std::string> order_;
  Leaderboard board_;
  std::size_t committed_bytes_ = 0;  // end of the last complete block
};

}  // namespace amteval
