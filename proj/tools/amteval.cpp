// amteval command-line tool: grading, validation, set generation,
// statistics, leaderboard and the HTTP service.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "amteval/amteval.hpp"
#include "amteval/service.hpp"

namespace {

using namespace amteval;

int run_grade(const fs::path& ref_dir, const fs::path& sub_dir, const std::string& name, const Tolerances& tol,
              const std::string& store_path, std::string id, const std::string& records_out, bool json_out) {
  const ReferenceSet refs = load_reference_set(ref_dir);
  std::optional<Store> store;
  if (!store_path.empty()) {
    store.emplace(store_path);
    if (id.empty()) id = store->next_id();
  }
  if (id.empty()) id = "local";
  Submission sub = load_submission_dir(sub_dir, name, id);
  const GradeResult result = grade_submission(sub, refs, tol);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  if (store) store->append(result);

  if (!records_out.empty()) {
    std::ofstream out(records_out, std::ios::app);
    if (!out) throw std::runtime_error("cannot write " + records_out);
    for (const auto& p : result.pieces) out << stats_record(name, p).dump() << "\n";
  }

  if (json_out) {
    json reports = json::array();
    for (const auto& p : result.pieces) {
      json r = p.report;
      if (!p.annotations.empty()) r["annotations"] = p.annotations;
      reports.push_back(r);
    }
    std::cout << json{{"submission_id", id},
                      {"model_name", name},
                      {"aggregate", result.aggregate},
                      {"reports", reports}}
                     .dump(2)
              << "\n";
  } else {
    std::printf("%-24s %8s %9s %8s %8s %8s %10s\n", "piece", "multiF1", "precision", "recall", "onoffF1", "overlap",
                "runtime_ms");
    for (const auto& p : result.pieces) {
      const auto& r = p.report;
      std::printf("%-24s %8.4f %9.4f %8.4f %8.4f %8.4f %10.2f\n", r.piece_id.c_str(), r.multi_onset_f1, r.precision,
                  r.recall, r.onset_offset_f1, r.overlap, r.runtime_ms);
    }
    const auto& a = result.aggregate;
    std::printf("\nsubmission %s (%s): f1 %.4f  precision %.4f  recall %.4f  overlap %.4f  runtime %.2f ms\n",
                id.c_str(), name.c_str(), a.f1, a.precision, a.recall, a.overlap, a.runtime_ms);
  }
  return 0;
}

int run_validate(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(dir)) {
    files.push_back(dir);
  } else {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".mid") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    std::cerr << "no .mid files in " << dir << "\n";
    return 2;
  }
  int failing = 0;
  for (const auto& f : files) {
    try {
      const auto outcome = parse_smf_with_warnings(read_bytes(f));
      const auto violations = validate_piece(outcome.piece);
      for (const auto& w : outcome.warnings) std::cout << f.filename().string() << ": warning: " << w << "\n";
      if (violations.empty()) {
        std::cout << f.filename().string() << ": ok\n";
        continue;
      }
      ++failing;
      for (const auto& v : violations) {
        std::cout << f.filename().string() << ": rule " << v.rule_id();
        if (v.program >= 0) std::cout << " program " << v.program;
        if (v.note_index >= 0) std::cout << " note " << v.note_index;
        std::cout << ": " << v.message << "\n";
      }
    } catch (const std::exception& e) {
      ++failing;
      std::cout << f.filename().string() << ": error: " << e.what() << "\n";
    }
  }
  std::cout << files.size() - failing << "/" << files.size() << " pieces compliant\n";
  return failing == 0 ? 0 : 1;
}

int run_genset(std::uint64_t seed, int count, const fs::path& out, const std::vector<int>& mix, double duration) {
  if (mix.size() != 3) throw std::invalid_argument("--mix takes three weights (solo, duo, trio)");
  const auto set = generate_set(seed, count, {mix[0], mix[1], mix[2]}, duration);
  write_set(out, seed, set);
  const auto alloc = allocate_mix(count, {mix[0], mix[1], mix[2]});
  std::cout << "wrote " << set.size() << " pieces to " << out.string() << " (" << alloc[0] << " solo, " << alloc[1]
            << " duo, " << alloc[2] << " trio)\n";
  return 0;
}

int run_stats(const fs::path& records, const std::string& format, const std::string& ss) {
  std::ifstream in(records);
  if (!in) throw std::runtime_error("cannot read " + records.string());
  const auto rows = read_metric_records(in);
  const auto report = analyze_records(rows, ss == "I" ? stats::SsType::kTypeI : stats::SsType::kTypeII);
  if (format == "json") {
    std::cout << to_json(report).dump(2) << "\n";
  } else {
    std::cout << to_text(report);
  }
  return 0;
}

int run_leaderboard(const fs::path& store_path, bool csv) {
  if (!fs::exists(store_path)) throw std::runtime_error("store " + store_path.string() + " does not exist");
  const Store store(store_path);
  const auto board = store.leaderboard();
  std::cout << (csv ? leaderboard_csv(board) : leaderboard_text(board));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-instrument transcription grading toolkit"};
  app.require_subcommand(1);

  Tolerances tol;
  std::string ref_dir, sub_dir, name, store_path, id, records_out;
  bool json_out = false;
  auto* grade = app.add_subcommand("grade", "Grade a directory of estimated MIDI files");
  grade->add_option("--ref", ref_dir, "Reference set directory")->required()->check(CLI::ExistingDirectory);
  grade->add_option("--sub", sub_dir, "Submission directory (<piece_id>.mid, optional runtime.json)")
      ->required()
      ->check(CLI::ExistingDirectory);
  grade->add_option("--name", name, "Model name")->required();
  grade->add_option("--tolerance-onset", tol.onset_tol, "Onset tolerance in seconds")->capture_default_str();
  grade->add_option("--tolerance-offset-min", tol.offset_min_tol, "Minimum offset tolerance in seconds")
      ->capture_default_str();
  grade->add_option("--tolerance-offset-ratio", tol.offset_ratio, "Offset tolerance as a fraction of duration")
      ->capture_default_str();
  grade->add_option("--tolerance-pitch", tol.pitch_tol, "Pitch tolerance in semitones")->capture_default_str();
  grade->add_option("--store", store_path, "Append the result to this store");
  grade->add_option("--id", id, "Submission id (default: next free id in the store)");
  grade->add_option("--records-out", records_out, "Append per-piece stats records (JSON lines)");
  grade->add_flag("--json", json_out, "Print reports as JSON");

  std::string validate_in;
  auto* validate = app.add_subcommand("validate", "Check pieces against the composition rules");
  validate->add_option("--in", validate_in, "Directory or .mid file")->required()->check(CLI::ExistingPath);

  std::uint64_t seed = 0;
  int count = 76;
  std::string out_dir;
  std::vector<int> mix{6, 24, 46};
  double duration = 20.0;
  auto* genset = app.add_subcommand("genset", "Generate a rule-compliant piece set");
  genset->add_option("--seed", seed, "Seed")->required();
  genset->add_option("--count", count, "Number of pieces")->capture_default_str();
  genset->add_option("--out", out_dir, "Output directory")->required();
  genset->add_option("--mix", mix, "Solo,duo,trio weights")->delimiter(',')->expected(3)->capture_default_str();
  genset->add_option("--duration", duration, "Approximate piece length in seconds")->capture_default_str();

  std::string records, format = "text", ss = "II";
  auto* stats_cmd = app.add_subcommand("stats", "ANOVA and Welch tests over per-piece records");
  stats_cmd->add_option("--records", records, "JSON lines: model, piece_id, instrument_count, f_measure, ...")
      ->required()
      ->check(CLI::ExistingFile);
  stats_cmd->add_option("--format", format, "text or json")->check(CLI::IsMember({"text", "json"}))->capture_default_str();
  stats_cmd->add_option("--ss-type", ss, "ANOVA sums of squares: I or II")->check(CLI::IsMember({"I", "II"}))
      ->capture_default_str();

  bool csv = false;
  auto* board = app.add_subcommand("leaderboard", "Print the leaderboard of a store");
  board->add_option("--store", store_path, "Store file")->required();
  board->add_flag("--csv", csv, "CSV output");

  ServiceConfig config;
  std::string serve_ref, serve_store;
  auto* serve_cmd = app.add_subcommand("serve", "Run the grading HTTP service");
  serve_cmd->add_option("--ref", serve_ref, "Reference set directory")->required()->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--store", serve_store, "Store file")->required();
  serve_cmd->add_option("--port", config.port, "Port")->required();
  serve_cmd->add_option("--host", config.host, "Bind address")->capture_default_str();
  serve_cmd->add_flag("--queued", config.queued, "Grade in a background worker (POST returns 202)");
  serve_cmd->add_option("--tolerance-onset", config.tolerances.onset_tol, "Onset tolerance in seconds")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*grade) return run_grade(ref_dir, sub_dir, name, tol, store_path, id, records_out, json_out);
    if (*validate) return run_validate(validate_in);
    if (*genset) return run_genset(seed, count, out_dir, mix, duration);
    if (*stats_cmd) return run_stats(records, format, ss);
    if (*board) return run_leaderboard(store_path, csv);
    if (*serve_cmd) {
      config.reference_dir = serve_ref;
      config.store_path = serve_store;
      std::cerr << "serving on " << config.host << ":" << config.port << "\n";
      amteval::serve(config);
      return 0;
    }
  } catch (const LoadError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
