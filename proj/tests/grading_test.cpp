#include <gtest/gtest.h>

#include <csignal>
#include <sys/resource.h>

#include <thread>

#include "support.hpp"

namespace amteval {
namespace {

TEST(LoadReferenceSet, GeneratedSetLoads) {
  test::TempDir tmp;
  const auto dir = tmp / "refs";
  write_set(dir, 3, generate_set(3, 76, kDefaultMix, 6.0));
  const auto refs = load_reference_set(dir);
  EXPECT_EQ(refs.size(), 76u);
  EXPECT_TRUE(refs.pieces.contains("piece_3_0"));
  const auto manifest = nlohmann::json::parse(test::slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest.at("counts").at("3").get<int>(), 46);
}

TEST(LoadReferenceSet, WithoutManifestUsesEveryMidiFile) {
  test::TempDir tmp;
  const auto dir = test::make_reference_dir(tmp, 1, 3);
  fs::remove(dir / "manifest.json");
  EXPECT_EQ(load_reference_set(dir).size(), 3u);
}

TEST(LoadReferenceSet, Errors) {
  test::TempDir tmp;
  fs::create_directories(tmp / "empty");
  EXPECT_THROW(load_reference_set(tmp / "empty"), LoadError);
  EXPECT_THROW(load_reference_set(tmp / "missing"), LoadError);

  const auto dir = test::make_reference_dir(tmp, 1, 3);
  // 100 BPM breaks the tempo rule.
  Piece fast;
  fast.tempo_map = TempoMap(480, {{0, 600'000}});
  fast.track(gm::kPiano).notes.push_back({60, 0.0, 0.6, 80});
  write_bytes(dir / "piece_1_1.mid", write_smf(fast));
  try {
    load_reference_set(dir);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(e.file().find("piece_1_1.mid"), std::string::npos);
    ASSERT_FALSE(e.violations().empty());
    EXPECT_EQ(e.violations()[0].rule_id(), 1);
    EXPECT_NE(std::string(e.what()).find("rule 1"), std::string::npos) << e.what();
  }

  write_bytes(dir / "piece_1_1.mid", {'n', 'o', 'p', 'e'});
  EXPECT_THROW(load_reference_set(dir), LoadError);
}

class GradingTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ref_dir_ = test::make_reference_dir(tmp_);
    refs_ = load_reference_set(ref_dir_);
  }

  GradeResult grade(const fs::path& dir, const std::string& name = "model") {
    return grade_submission(load_submission_dir(dir, name, "sub-x"), refs_);
  }

  test::TempDir tmp_;
  fs::path ref_dir_;
  ReferenceSet refs_;
};

TEST_F(GradingTest, IdentitySubmissionScoresOne) {
  const auto r = grade(test::make_submission_dir(tmp_, "same", refs_));
  ASSERT_EQ(r.pieces.size(), refs_.size());
  for (const auto& p : r.pieces) {
    EXPECT_DOUBLE_EQ(p.report.multi_onset_f1, 1.0) << p.report.piece_id;
    EXPECT_DOUBLE_EQ(p.report.onset_offset_f1, 1.0);
    EXPECT_DOUBLE_EQ(p.report.overlap, 1.0);
    EXPECT_TRUE(p.annotations.empty());
    EXPECT_EQ(p.instrument_count, refs_.pieces.at(p.report.piece_id).tracks.size());
  }
  EXPECT_DOUBLE_EQ(r.aggregate.f1, 1.0);
  EXPECT_NEAR(r.aggregate.runtime_ms, 10.0 + (refs_.size() - 1) / 2.0, 1e-12);
}

TEST_F(GradingTest, EmptySubmissionScoresZeroWithAnnotations) {
  fs::create_directories(tmp_ / "nothing");
  const auto r = grade(tmp_ / "nothing");
  ASSERT_EQ(r.pieces.size(), refs_.size());
  for (const auto& p : r.pieces) {
    EXPECT_EQ(p.report, MetricsReport::zero(p.report.piece_id));
    EXPECT_NE(std::find(p.annotations.begin(), p.annotations.end(), kMissingPiece), p.annotations.end());
    EXPECT_NE(std::find(p.annotations.begin(), p.annotations.end(), kRuntimeMissing), p.annotations.end());
  }
  EXPECT_EQ(r.aggregate.f1, 0.0);
  EXPECT_EQ(r.aggregate.runtime_ms, 0.0);
}

TEST_F(GradingTest, TransposedSubmissionScoresZero) {
  const auto dir = test::make_submission_dir(tmp_, "up", refs_, [](Piece& p) {
    for (auto& t : p.tracks) {
      for (auto& n : t.notes) n.pitch += 1;
    }
  });
  const auto r = grade(dir);
  EXPECT_EQ(r.aggregate.f1, 0.0);
  EXPECT_EQ(r.aggregate.overlap, 0.0);
}

TEST_F(GradingTest, WrongProgramScoresZero) {
  const auto dir = test::make_submission_dir(tmp_, "prog", refs_, [](Piece& p) {
    for (auto& t : p.tracks) t.program += 1;
  });
  EXPECT_EQ(grade(dir).aggregate.f1, 0.0);
}

TEST_F(GradingTest, UnparseableEstimateIsAnnotatedNotFatal) {
  const auto dir = test::make_submission_dir(tmp_, "broken", refs_);
  const std::string victim = refs_.pieces.begin()->first;
  write_bytes(dir / (victim + ".mid"), {'M', 'T', 'h', 'd', 0, 0});
  write_bytes(dir / "stray.mid", write_smf(refs_.pieces.begin()->second));
  const auto r = grade(dir);
  EXPECT_EQ(r.pieces[0].report.piece_id, victim);
  EXPECT_EQ(r.pieces[0].report.multi_onset_f1, 0.0);
  ASSERT_FALSE(r.pieces[0].annotations.empty());
  EXPECT_EQ(r.pieces[0].annotations[0].rfind("unparseable_estimate", 0), 0u);
  EXPECT_DOUBLE_EQ(r.pieces[1].report.multi_onset_f1, 1.0);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("stray"), std::string::npos);
}

TEST_F(GradingTest, DeterministicAcrossWorkerCounts) {
  std::mt19937 rng(1);
  const auto dir = test::make_submission_dir(tmp_, "jitter", refs_, [&rng](Piece& p) {
    std::uniform_real_distribution<double> shift(-0.08, 0.08);
    for (auto& t : p.tracks) {
      for (auto& n : t.notes) {
        const double d = shift(rng);
        n.onset = std::max(0.0, n.onset + d);
        n.offset = std::max(n.onset + 0.01, n.offset + d);
      }
    }
  });
  const auto sub = load_submission_dir(dir, "m", "s");
  const auto one = grade_submission(sub, refs_, {}, 1);
  const auto four = grade_submission(sub, refs_, {}, 4);
  EXPECT_EQ(one.reports(), four.reports());
  EXPECT_GT(one.aggregate.f1, 0.0);
  EXPECT_LT(one.aggregate.f1, 1.0);
}

TEST_F(GradingTest, NegativeToleranceRejectedUpFront) {
  const auto sub = load_submission_dir(test::make_submission_dir(tmp_, "same", refs_), "m", "s");
  Tolerances bad;
  bad.offset_ratio = -0.1;
  EXPECT_THROW(grade_submission(sub, refs_, bad), std::invalid_argument);
}

TEST_F(GradingTest, RuntimeFileMissing) {
  const auto dir = test::make_submission_dir(tmp_, "nort", refs_, {}, false);
  const auto r = grade(dir);
  for (const auto& p : r.pieces) {
    ASSERT_EQ(p.annotations.size(), 1u);
    EXPECT_EQ(p.annotations[0], kRuntimeMissing);
    EXPECT_EQ(p.report.runtime_ms, 0.0);
  }
}

TEST(Leaderboard, ReproducesPublishedTable) {
  std::vector<LeaderboardEntry> entries;
  std::int64_t at = 1000;
  // Feed in reverse order so the ranking does the work.
  const auto& rows = test::results_table();
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    entries.push_back(make_entry(it->name, aggregate_submission(test::reports_with_means(*it)), "s", at++));
  }
  const auto board = rank_entries(entries);
  ASSERT_EQ(board.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(board[i].model_name, rows[i].name);
    EXPECT_EQ(board[i].rank, static_cast<int>(i + 1));
  }
  const std::string csv = leaderboard_csv(board);
  EXPECT_EQ(csv.rfind("rank,model_name,f1,precision,recall,overlap,runtime_ms\n"
                      "1,MIROS,0.5998,0.6558,0.5724,0.7391,22.05\n"
                      "2,YourMT3-YPTF-MoE-M,0.5938,0.6010,0.5888,0.7305,12.60\n",
                      0),
            0u);
  EXPECT_NE(csv.find("\n14,Basic Pitch,0.0634,0.0550,0.0782,0.5977,3.91\n"), std::string::npos);
}

TEST(Leaderboard, LatestPerModelAndTies) {
  const AggregateScores a{0.5, 0, 0, 0, 0, 0, 1}, b{0.7, 0, 0, 0, 0, 0, 1}, c{0.5, 0, 0, 0, 0, 0, 1};
  const auto board = rank_entries({make_entry("late", a, "1", 200), make_entry("early", c, "2", 100),
                                   make_entry("x", b, "3", 50), make_entry("x", a, "4", 300)});
  ASSERT_EQ(board.size(), 3u);
  EXPECT_EQ(board[0].model_name, "early");
  EXPECT_EQ(board[1].model_name, "late");
  EXPECT_EQ(board[2].model_name, "x");
  EXPECT_EQ(board[2].submission_id, "4");  // latest, even though worse
}

TEST(Leaderboard, CsvQuotesAwkwardNames) {
  const auto board = rank_entries({make_entry("a,b \"c\"", {0.25, 0.5, 0.125, 0.75, 1.005, 0, 1})});
  EXPECT_EQ(leaderboard_csv(board), std::string(kLeaderboardCsvHeader) + "\n1,\"a,b \"\"c\"\"\",0.2500,0.5000,0.1250,0.7500,1.00\n");
  const nlohmann::json j = board[0];
  EXPECT_EQ(j.at("f1").get<double>(), 0.25);
  EXPECT_FALSE(leaderboard_text(board).empty());
}

TEST(Store, AppendFindAndReject) {
  test::TempDir tmp;
  Store store(tmp / "store.jsonl");
  EXPECT_EQ(store.size(), 0u);
  EXPECT_EQ(store.next_id(), "sub-000001");
  store.append(test::fake_result("sub-000001", "m", 0.4, 1));
  EXPECT_EQ(store.next_id(), "sub-000002");
  EXPECT_THROW(store.append(test::fake_result("sub-000001", "m", 0.9, 2)), SubmissionRejected);
  EXPECT_THROW(store.append(test::fake_result("", "m", 0.9, 2)), SubmissionRejected);
  const auto found = store.find("sub-000001");
  ASSERT_TRUE(found.has_value());
  EXPECT_EQ(found->records.size(), 3u);
  EXPECT_EQ(found->records[0].annotations, std::vector<std::string>{kRuntimeMissing});
  EXPECT_DOUBLE_EQ(found->aggregate.f1, 0.4);
  EXPECT_FALSE(store.find("nope").has_value());

  store.append(test::fake_result("sub-000001", "m", 0.9, 3), true);
  EXPECT_EQ(store.size(), 1u);
  EXPECT_DOUBLE_EQ(store.leaderboard().at(0).f1, 0.9);
  EXPECT_DOUBLE_EQ(Store(tmp / "store.jsonl").leaderboard().at(0).f1, 0.9);
}

TEST(Store, ReplayReproducesLeaderboardBytes) {
  test::TempDir tmp;
  std::string live;
  {
    Store store(tmp / "log.jsonl");
    store.append(test::fake_result("a", "alpha", 0.31, 10));
    store.append(test::fake_result("b", "beta", 0.52, 20));
    store.append(test::fake_result("c", "gamma", 0.52, 30));
    store.append(test::fake_result("d", "alpha", 0.61, 40));  // resubmission
    live = leaderboard_csv(store.leaderboard());
    EXPECT_EQ(store.leaderboard().size(), 3u);
  }
  const Store replayed(tmp / "log.jsonl");
  EXPECT_EQ(leaderboard_csv(replayed.leaderboard()), live);
  EXPECT_EQ(replayed.size(), 4u);
  EXPECT_EQ(replayed.leaderboard()[0].submission_id, "d");
  EXPECT_EQ(replayed.leaderboard()[1].model_name, "beta");
}

TEST(Store, TornTailIgnoredAndRepaired) {
  test::TempDir tmp;
  const auto path = tmp / "log.jsonl";
  {
    Store store(path);
    store.append(test::fake_result("a", "alpha", 0.3, 1));
  }
  const std::string committed = test::slurp(path);
  {
    // A crash mid-append: the piece lines of a block made it to disk but
    // the closing submission line was cut short.
    Store other(tmp / "other.jsonl");
    other.append(test::fake_result("z", "zeta", 0.9, 2));
    const std::string block = test::slurp(tmp / "other.jsonl");
    std::ofstream out(path, std::ios::app | std::ios::binary);
    out << block.substr(0, block.rfind("\"kind\":\"submission\"") + 10);
  }
  Store store(path);
  EXPECT_EQ(store.size(), 1u);
  EXPECT_FALSE(store.contains("z"));
  store.append(test::fake_result("b", "beta", 0.4, 2));
  const std::string after = test::slurp(path);
  EXPECT_EQ(after.rfind(committed, 0), 0u);
  EXPECT_EQ(after.find("\"z\""), std::string::npos);
  EXPECT_EQ(Store(path).size(), 2u);
}

TEST(Store, FailedWriteLeavesLogUnchanged) {
  test::TempDir tmp;
  const auto path = tmp / "log.jsonl";
  Store store(path);
  store.append(test::fake_result("a", "alpha", 0.3, 1));
  const std::string before = test::slurp(path);
  const std::string board = leaderboard_csv(store.leaderboard());

  // Cap the file size just past the current length so the next block is
  // written partially and then refused.
  rlimit old{};
  ASSERT_EQ(::getrlimit(RLIMIT_FSIZE, &old), 0);
  auto* previous = std::signal(SIGXFSZ, SIG_IGN);
  rlimit cap = old;
  cap.rlim_cur = before.size() + 40;
  ASSERT_EQ(::setrlimit(RLIMIT_FSIZE, &cap), 0);
  EXPECT_THROW(store.append(test::fake_result("b", "beta", 0.9, 2)), StoreError);
  ASSERT_EQ(::setrlimit(RLIMIT_FSIZE, &old), 0);
  std::signal(SIGXFSZ, previous);

  EXPECT_EQ(test::slurp(path), before);
  EXPECT_FALSE(store.contains("b"));
  EXPECT_EQ(leaderboard_csv(store.leaderboard()), board);
  store.append(test::fake_result("b", "beta", 0.9, 2));
  EXPECT_EQ(Store(path).size(), 2u);
}

TEST(Store, UnwritableLocation) {
  test::TempDir tmp;
  Store store(tmp / "no" / "such" / "dir" / "log.jsonl");
  EXPECT_THROW(store.append(test::fake_result("a", "alpha", 0.3, 1)), StoreError);
  EXPECT_EQ(store.size(), 0u);
}

TEST(Store, ConcurrentAppendsAllLand) {
  test::TempDir tmp;
  const auto path = tmp / "log.jsonl";
  Store store(path);
  {
    std::vector<std::jthread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&store, t] {
        for (int i = 0; i < 10; ++i) {
          const std::string id = "t" + std::to_string(t) + "-" + std::to_string(i);
          store.append(test::fake_result(id, "model" + std::to_string(t), 0.1 * t + 0.001 * i, t * 100 + i, 5));
          (void)store.leaderboard();
        }
      });
    }
  }
  EXPECT_EQ(store.size(), 80u);
  const Store replayed(path);
  EXPECT_EQ(replayed.size(), 80u);
  EXPECT_EQ(leaderboard_csv(replayed.leaderboard()), leaderboard_csv(store.leaderboard()));
  std::istringstream lines(test::slurp(path));
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) EXPECT_TRUE(nlohmann::json::accept(line));
  EXPECT_EQ(n, 80u * 6u);
}

TEST(Store, OrderingAndIsolationProperties) {
  test::TempDir tmp;
  Store store(tmp / "log.jsonl");
  std::mt19937 rng(12);
  std::uniform_int_distribution<int> model(0, 6);
  std::uniform_int_distribution<int> score(0, 20);
  std::map<std::string, std::vector<MetricsReport>> first_seen;
  for (int i = 0; i < 40; ++i) {
    const std::string id = "s" + std::to_string(i);
    store.append(test::fake_result(id, "m" + std::to_string(model(rng)), score(rng) / 20.0, i));
    std::vector<MetricsReport> stored;
    for (const auto& r : store.find(id)->records) stored.push_back(r.report);
    first_seen[id] = stored;

    const auto board = store.leaderboard();
    std::set<std::string> models;
    for (std::size_t k = 0; k < board.size(); ++k) {
      EXPECT_EQ(board[k].rank, static_cast<int>(k + 1));
      if (k > 0) {
        EXPECT_LE(board[k].f1, board[k - 1].f1);
      }
      EXPECT_TRUE(models.insert(board[k].model_name).second);
    }
  }
  // Later submissions never change what an earlier one recorded.
  for (const auto& [id, reports] : first_seen) {
    std::vector<MetricsReport> now;
    for (const auto& r : store.find(id)->records) now.push_back(r.report);
    EXPECT_EQ(now, reports) << id;
  }
}

TEST(StatsRecord, Shape) {
  const auto r = test::fake_result("a", "alpha", 0.3, 1);
  const auto j = stats_record("alpha", r.pieces[1]);
  EXPECT_EQ(j.at("instrument_count").get<int>(), 2);
  EXPECT_EQ(j.at("f_measure").get<double>(), 0.3);
  EXPECT_EQ(j.at("model").get<std::string>(), "alpha");
}

}  // namespace
}  // namespace amteval
