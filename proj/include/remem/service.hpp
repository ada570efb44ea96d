#pragma once

// HTTP/JSON front end for interactive edit sessions. Service::handle is the
// transport-independent core; serve() mounts it on an httplib server.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <stop_token>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "remem/editops.hpp"

namespace remem::service {

struct Request {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

struct Options {
  std::filesystem::path models_dir = ".";
  std::filesystem::path cache_dir;  // key statistics; empty disables
  int preview_iterations = 201;
  std::size_t render_cache_bytes = 64u << 20;
};

/// PNG bytes keyed by generator hash and seed, evicted least recently used
/// once the byte budget is exceeded.
class RenderCache {
 public:
  explicit RenderCache(std::size_t budget) : budget_(budget) {}
  bool get(const std::string& key, std::string& png);
  void put(const std::string& key, std::string png);
  std::size_t bytes() const { return bytes_; }
  std::size_t entries() const { return index_.size(); }

 private:
  using Entry = std::pair<std::string, std::string>;
  std::size_t budget_;
  std::size_t bytes_ = 0;
  std::list<Entry> order_;  // front is most recent
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
  std::mutex mu_;
};

struct SessionState {
  std::string id;
  Generator base;
  std::string base_hash;
  EditSession draft;
  std::vector<Generator> history;  // committed edits, newest last
  std::vector<std::string> history_hashes;
  bool running = false;
  std::string stage = "idle";
  double started = 0.0;
  nlohmann::json last_result;
  std::mutex mu;

  const Generator& current() const { return history.empty() ? base : history.back(); }
  const std::string& current_hash() const { return history.empty() ? base_hash : history_hashes.back(); }
};

class Service {
 public:
  explicit Service(Options options);
  Response handle(const Request& request);
  const Options& options() const { return options_; }

 private:
  Response route(const Request& request);
  Response create_session(const nlohmann::json& body);
  Response import_session(const nlohmann::json& body);
  Response list_models();
  Response samples(SessionState& s, const Request& request);
  Response update(SessionState& s, const std::string& what, const nlohmann::json& body);
  Response run_edit(SessionState& s, bool commit);
  Response undo(SessionState& s);
  Response relevance(SessionState& s, const Request& request);
  Response progress(SessionState& s);
  std::shared_ptr<SessionState> find(const std::string& id);
  std::string render_png(const Generator& gen, const std::string& hash, std::uint64_t seed);

  Options options_;
  RenderCache renders_;
  std::mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<SessionState>> sessions_;
  std::uint64_t next_id_ = 1;
};

/// Seeds from "a:b" (a .. b-1) or a comma-separated list.
std::vector<std::uint64_t> parse_seeds(const std::string& spec);

/// Blocks serving on host:port until the process is stopped or `stop` is requested.
int serve(const Options& options, const std::string& host, int port, std::stop_token stop = {});

}  // namespace remem::service
