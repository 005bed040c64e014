// HTTP front end for grading: submissions in, per-piece reports and the
// leaderboard out.

#pragma once

#include <cctype>
#include <condition_variable>
#include <cstdio>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>

// Eigen names a parameter _res, which <resolv.h> (pulled in by httplib)
// defines as a macro, so the library headers go first.
#include "amteval/amteval.hpp"

#include <httplib.h>
#include <json.hpp>

namespace amteval {

struct ServiceConfig {
  fs::path reference_dir;
  fs::path store_path;
  std::string host = "127.0.0.1";
  int port = 8080;
  Tolerances tolerances;
  bool queued = false;      // grade in a background worker, POST returns 202
  unsigned workers = 0;     // per-submission grading threads, 0 = hardware
  fs::path upload_dir;      // multipart uploads; default under the temp dir
};

class GradingService {
 public:
  struct Reply {
    int status = 200;
    nlohmann::json body;
  };

  GradingService(ReferenceSet refs, Store& store, ServiceConfig config)
      : refs_(std::move(refs)), store_(store), config_(std::move(config)) {
    config_.tolerances.check();
    if (config_.upload_dir.empty()) config_.upload_dir = fs::temp_directory_path() / "amteval-uploads";
    if (config_.queued) worker_ = std::jthread([this](std::stop_token st) { run_queue(st); });
  }

  GradingService(const GradingService&) = delete;
  GradingService& operator=(const GradingService&) = delete;

  /// Grades (or enqueues) a submission read from `dir`.
  Reply submit(const std::string& model_name, const fs::path& dir, const std::string& requested_id = {}) {
    if (model_name.empty()) return error(400, "model_name is required");
    Submission sub;
    try {
      sub = load_submission_dir(dir, model_name);
    } catch (const std::exception& e) {
      return error(400, e.what());
    }
    auto id = reserve_id(requested_id);
    if (!id) return error(409, "submission id " + requested_id + " already exists");
    sub.id = *id;

    if (config_.queued) {
      {
        std::scoped_lock lock(queue_mutex_);
        queue_.push_back(std::move(sub));
      }
      queue_cv_.notify_one();
      return {202, {{"submission_id", *id}, {"status", "queued"}}};
    }
    return grade_and_store(sub);
  }

  Reply get_submission(const std::string& id) const {
    if (auto s = store_.find(id)) {
      nlohmann::json reports = nlohmann::json::array();
      nlohmann::json annotations = nlohmann::json::object();
      for (const auto& r : s->records) {
        reports.push_back(r.report);
        if (!r.annotations.empty()) annotations[r.piece_id] = r.annotations;
      }
      return {200,
              {{"submission_id", s->submission_id},
               {"model_name", s->model_name},
               {"status", "graded"},
               {"aggregate", make_entry(s->model_name, s->aggregate)},
               {"reports", reports},
               {"annotations", annotations}}};
    }
    std::scoped_lock lock(ids_mutex_);
    if (auto it = failed_.find(id); it != failed_.end()) return error(500, it->second);
    if (reserved_.contains(id)) return {202, {{"submission_id", id}, {"status", "pending"}}};
    return error(404, "unknown submission " + id);
  }

  Reply leaderboard() const { return {200, nlohmann::json(store_.leaderboard())}; }

  /// Blocks until the queue is drained (queued mode); used by tests.
  void wait_idle() {
    std::unique_lock lock(queue_mutex_);
    idle_cv_.wait(lock, [&] { return queue_.empty() && !busy_; });
  }

  void bind(httplib::Server& server) {
    auto send = [](httplib::Response& res, const Reply& reply) {
      res.status = reply.status;
      res.set_content(reply.body.dump(), "application/json");
    };
    server.Get("/healthz", [send](const httplib::Request&, httplib::Response& res) {
      send(res, {200, {{"status", "ok"}}});
    });
    server.Get("/leaderboard", [this, send](const httplib::Request&, httplib::Response& res) {
      send(res, leaderboard());
    });
    server.Get(R"(/submissions/([A-Za-z0-9._-]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_submission(req.matches[1]));
    });
    server.Post("/submissions", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, req.is_multipart_form_data() ? submit_multipart(req) : submit_json(req));
    });
  }

 private:
  static Reply error(int status, const std::string& message) { return {status, {{"error", message}}}; }

  static bool valid_id(const std::string& id) {
    if (id.empty() || id.size() > 128) return false;
    for (char c : id) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '_' && c != '-') return false;
    }
    return id != "." && id != "..";
  }

  Reply submit_json(const httplib::Request& req) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("malformed JSON body: ") + e.what());
    }
    if (!body.is_object() || !body.contains("model_name") || !body["model_name"].is_string() ||
        !body.contains("directory") || !body["directory"].is_string()) {
      return error(400, "body must be {\"model_name\": string, \"directory\": string}");
    }
    std::string id;
    if (body.contains("submission_id")) {
      if (!body["submission_id"].is_string() || !valid_id(body["submission_id"])) {
        return error(400, "submission_id must match [A-Za-z0-9._-]+");
      }
      id = body["submission_id"];
    }
    return submit(body["model_name"], fs::path(body["directory"].get<std::string>()), id);
  }

  // Multipart fields: model_name, optional submission_id, files named
  // <piece_id>.mid and an optional runtime.json.
  Reply submit_multipart(const httplib::Request& req) {
    const std::string name = req.has_file("model_name") ? req.get_file_value("model_name").content : "";
    const std::string id = req.has_file("submission_id") ? req.get_file_value("submission_id").content : "";
    if (!id.empty() && !valid_id(id)) return error(400, "submission_id must match [A-Za-z0-9._-]+");
    fs::path dir;
    {
      std::scoped_lock lock(ids_mutex_);
      dir = config_.upload_dir / ("upload-" + std::to_string(now_ms()) + "-" + std::to_string(upload_counter_++));
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) return error(500, "cannot create upload directory: " + ec.message());
    for (const auto& [field, part] : req.files) {
      if (part.filename.empty()) continue;  // plain form field
      const fs::path fname(part.filename);
      if (fname.filename() != fname || !valid_id(fname.stem().string()) ||
          (fname.extension() != ".mid" && fname.filename() != "runtime.json")) {
        return error(400, "bad upload file name '" + part.filename + "'");
      }
      try {
        write_bytes(dir / fname, std::vector<std::uint8_t>(part.content.begin(), part.content.end()));
      } catch (const std::exception& e) {
        return error(500, e.what());
      }
    }
    return submit(name, dir, id);
  }

  std::optional<std::string> reserve_id(const std::string& requested) {
    std::scoped_lock lock(ids_mutex_);
    if (!requested.empty()) {
      if (reserved_.contains(requested) || store_.contains(requested)) return std::nullopt;
      reserved_.insert(requested);
      return requested;
    }
    std::string id;
    do {
      char buf[32];
      std::snprintf(buf, sizeof buf, "sub-%06zu", ++id_counter_);
      id = buf;
    } while (reserved_.contains(id) || store_.contains(id));
    reserved_.insert(id);
    return id;
  }

  Reply grade_and_store(const Submission& sub) {
    try {
      const GradeResult result = grade_submission(sub, refs_, config_.tolerances, config_.workers);
      store_.append(result);
      {
        std::scoped_lock lock(ids_mutex_);
        reserved_.erase(sub.id);
      }
      nlohmann::json warnings = result.warnings;
      return {201,
              {{"submission_id", sub.id},
               {"status", "graded"},
               {"pieces", result.pieces.size()},
               {"aggregate", make_entry(sub.model_name, result.aggregate)},
               {"warnings", warnings}}};
    } catch (const std::exception& e) {
      std::scoped_lock lock(ids_mutex_);
      reserved_.erase(sub.id);
      failed_[sub.id] = e.what();
      return error(500, e.what());
    }
  }

  void run_queue(std::stop_token st) {
    while (true) {
      Submission sub;
      {
        std::unique_lock lock(queue_mutex_);
        queue_cv_.wait(lock, st, [&] { return !queue_.empty(); });
        if (queue_.empty()) return;
        sub = std::move(queue_.front());
        queue_.pop_front();
        busy_ = true;
      }
      grade_and_store(sub);
      {
        std::scoped_lock lock(queue_mutex_);
        busy_ = false;
      }
      idle_cv_.notify_all();
    }
  }

  ReferenceSet refs_;
  Store& store_;
  ServiceConfig config_;

  mutable std::mutex ids_mutex_;
  std::set<std::string> reserved_;
  std::map<std::string, std::string> failed_;
  std::size_t id_counter_ = 0;
  std::uint64_t upload_counter_ = 0;

  std::mutex queue_mutex_;
  std::condition_variable_any queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<Submission> queue_;
  bool busy_ = false;
  std::jthread worker_;
};

/// Loads the reference set and store, then serves until the process exits.
inline void serve(const ServiceConfig& config) {
  ReferenceSet refs = load_reference_set(config.reference_dir);
  Store store(config.store_path);
  GradingService service(std::move(refs), store, config);
  httplib::Server server;
  service.bind(server);
  if (!server.listen(config.host, config.port)) {
    throw std::runtime_error("cannot listen on " + config.host + ":" + std::to_string(config.port));
  }
}

}  // namespace amteval
