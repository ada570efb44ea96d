#include "remem/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <sstream>

#include "remem/error.hpp"
#include "remem/gtf.hpp"
#include "remem/png.hpp"

namespace remem::service {

namespace {

using nlohmann::json;

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

Response json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

Response error_response(int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  return json_response(status, extra);
}

json echo(const SessionState& s) {
  const auto& d = s.draft;
  json seeds = json::array();
  for (auto seed : session_seeds(d)) seeds.push_back(seed);
  return {{"session", s.id},
          {"model", d.model},
          {"layer", d.layer},
          {"rank", d.rank},
          {"seeds", seeds},
          {"stats", {{"samples", d.stats.samples}, {"seed", d.stats.seed}}},
          {"generator", s.current_hash()}};
}

json with_echo(const SessionState& s, json body) {
  body["config"] = echo(s);
  return body;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::stringstream ss(path);
  std::string item;
  while (std::getline(ss, item, '/'))
    if (!item.empty()) parts.push_back(item);
  return parts;
}

// Empty when the model id does not resolve to a file.
std::filesystem::path model_path(const std::string& model, const std::filesystem::path& dir) {
  try {
    return resolve_model(model, dir);
  } catch (const ValidationError&) {
    return {};
  }
}

// Guards the running flag of one session for the duration of an edit.
class RunGuard {
 public:
  explicit RunGuard(SessionState& s) : s_(s) {}
  ~RunGuard() {
    std::lock_guard lock(s_.mu);
    s_.running = false;
    s_.stage = "idle";
  }

 private:
  SessionState& s_;
};

}  // namespace

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  try {
    const auto colon = spec.find(':');
    if (colon != std::string::npos) {
      const auto a = std::stoull(spec.substr(0, colon)), b = std::stoull(spec.substr(colon + 1));
      if (b <= a) throw ValidationError("empty seed range '" + spec + "'");
      for (auto s = a; s < b; ++s) seeds.push_back(s);
      return seeds;
    }
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) seeds.push_back(std::stoull(item));
  } catch (const std::logic_error&) {
    throw ValidationError("bad seed list '" + spec + "' (use a:b or a,b,c)");
  }
  if (seeds.empty()) throw ValidationError("empty seed list");
  return seeds;
}

bool RenderCache::get(const std::string& key, std::string& png) {
  std::lock_guard lock(mu_);
  auto it = index_.find(key);
  if (it == index_.end()) return false;
  order_.splice(order_.begin(), order_, it->second);
  png = it->second->second;
  return true;
}

void RenderCache::put(const std::string& key, std::string png) {
  std::lock_guard lock(mu_);
  if (auto it = index_.find(key); it != index_.end()) {
    bytes_ -= it->second->second.size();
    order_.erase(it->second);
    index_.erase(it);
  }
  bytes_ += png.size();
  order_.emplace_front(key, std::move(png));
  index_[key] = order_.begin();
  while (bytes_ > budget_ && order_.size() > 1) {
    bytes_ -= order_.back().second.size();
    index_.erase(order_.back().first);
    order_.pop_back();
  }
}

Service::Service(Options options) : options_(std::move(options)), renders_(options_.render_cache_bytes) {}

Response Service::handle(const Request& request) {
  try {
    return route(request);
  } catch (const json::exception& e) {
    return error_response(400, std::string("malformed payload: ") + e.what());
  } catch (const FormatError& e) {
    return error_response(400, e.what());
  } catch (const DivergenceError& e) {
    return error_response(500, e.what(), {{"iteration", e.iteration()}});
  } catch (const NumericalError& e) {
    return error_response(500, e.what());
  } catch (const ValidationError& e) {
    return error_response(422, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

std::shared_ptr<SessionState> Service::find(const std::string& id) {
  std::lock_guard lock(sessions_mu_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

Response Service::route(const Request& r) {
  const auto parts = split_path(r.path);
  const auto& m = r.method;
  if (parts.size() == 1 && parts[0] == "healthz" && m == "GET") return json_response(200, {{"status", "ok"}});
  if (parts.size() == 1 && parts[0] == "models" && m == "GET") return list_models();
  if (parts.empty() || parts[0] != "sessions") return error_response(404, "no route for " + m + " " + r.path);
  if (parts.size() == 1 && m == "POST") return create_session(json::parse(r.body.empty() ? "{}" : r.body));
  if (parts.size() == 2 && parts[1] == "import" && m == "POST") return import_session(json::parse(r.body));
  if (parts.size() < 2) return error_response(404, "no route for " + m + " " + r.path);

  auto s = find(parts[1]);
  if (!s) return error_response(404, "unknown session " + parts[1]);
  if (parts.size() == 2 && m == "GET") {
    std::lock_guard lock(s->mu);
    return json_response(200, with_echo(*s, {{"session", s->draft.to_json()}, {"history", s->history.size()}}));
  }
  if (parts.size() != 3) return error_response(404, "no route for " + m + " " + r.path);
  const std::string& action = parts[2];
  if (m == "GET" && action == "samples") return samples(*s, r);
  if (m == "GET" && action == "relevance") return relevance(*s, r);
  if (m == "GET" && action == "progress") return progress(*s);
  if (m == "GET" && action == "export") {
    std::lock_guard lock(s->mu);
    return json_response(200, s->draft.to_json());
  }
  if (m == "PUT" && (action == "copy" || action == "paste" || action == "context" || action == "config")) {
    return update(*s, action, json::parse(r.body));
  }
  if (m == "POST" && action == "preview") return run_edit(*s, false);
  if (m == "POST" && action == "apply") return run_edit(*s, true);
  if (m == "POST" && action == "undo") return undo(*s);
  return error_response(404, "no route for " + m + " " + r.path);
}

Response Service::list_models() {
  json models = json::array();
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(options_.models_dir)) {
    for (const auto& e : std::filesystem::directory_iterator(options_.models_dir))
      if (e.path().extension() == ".gtf") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      const auto c = gtf::read_file(f);
      if (c.kind != "generator") continue;
      const Generator g = gtf::to_generator(c);
      models.push_back({{"id", f.stem().string()},
                        {"hash", gtf::generator_hash(g)},
                        {"layers", g.layer_count()},
                        {"image_size", g.image_size()},
                        {"planted", c.metadata.contains("planted_manifest")}});
    } catch (const Error&) {
      continue;
    }
  }
  return json_response(200, {{"models", models}});
}

Response Service::create_session(const json& body) {
  const std::string model = body.at("model").get<std::string>();
  const auto path = model_path(model, options_.models_dir);
  if (path.empty()) return error_response(404, "unknown model " + model);
  auto s = std::make_shared<SessionState>();
  s->base = gtf::load_fixture(path);
  s->base_hash = gtf::generator_hash(s->base);
  s->draft.model = model;
  s->draft.layer = body.value("layer", std::max(1, s->base.layer_count() - 1));
  s->draft.rank = body.value("rank", 1);
  s->base.layer(s->draft.layer);
  {
    std::lock_guard lock(sessions_mu_);
    s->id = "s" + std::to_string(next_id_++);
    sessions_[s->id] = s;
  }
  return json_response(201, with_echo(*s, {{"id", s->id}}));
}

Response Service::import_session(const json& body) {
  const EditSession draft = EditSession::from_json(body);
  const auto path = model_path(draft.model, options_.models_dir);
  if (path.empty()) return error_response(404, "unknown model " + draft.model);
  auto s = std::make_shared<SessionState>();
  s->base = gtf::load_fixture(path);
  s->base_hash = gtf::generator_hash(s->base);
  s->draft = draft;
  {
    std::lock_guard lock(sessions_mu_);
    s->id = "s" + std::to_string(next_id_++);
    sessions_[s->id] = s;
  }
  return json_response(201, with_echo(*s, {{"id", s->id}}));
}

std::string Service::render_png(const Generator& gen, const std::string& hash, std::uint64_t seed) {
  const std::string key = hash + "/" + std::to_string(seed);
  std::string png;
  if (renders_.get(key, png)) return png;
  png = png::encode(forward(gen, latent_for_seed(seed, gen.latent_dim)));
  renders_.put(key, png);
  return png;
}

Response Service::samples(SessionState& s, const Request& r) {
  Generator before, after;
  std::string before_hash, after_hash;
  {
    std::lock_guard lock(s.mu);
    before = s.base;
    before_hash = s.base_hash;
    after = s.current();
    after_hash = s.current_hash();
  }
  const auto seeds = parse_seeds(r.query.count("seeds") ? r.query.at("seeds") : "0:8");
  const std::string which = r.query.count("which") ? r.query.at("which") : "both";
  if (which != "both" && which != "before" && which != "after") {
    return error_response(400, "which must be before, after or both");
  }
  if (which != "both" && seeds.size() == 1) {
    const bool b = which == "before";
    return {200, "image/png", render_png(b ? before : after, b ? before_hash : after_hash, seeds[0])};
  }
  std::vector<Tensor> images;
  for (int row = 0; row < 2; ++row) {
    if ((row == 0 && which == "after") || (row == 1 && which == "before")) continue;
    const Generator& g = row == 0 ? before : after;
    for (auto seed : seeds) images.push_back(forward(g, latent_for_seed(seed, g.latent_dim)));
  }
  return {200, "image/png", png::encode(png::contact_sheet(images, static_cast<int>(seeds.size())))};
}

Response Service::update(SessionState& s, const std::string& what, const json& body) {
  std::lock_guard lock(s.mu);
  if (s.running) return error_response(409, "an edit is running for session " + s.id);
  EditSession d = s.draft;
  if (what == "copy") {
    d.copy = RegionMask::from_json(body);
  } else if (what == "paste") {
    d.paste.seed = body.at("seed").get<std::uint64_t>();
    d.paste.offset = {body.at("offset").at(0).get<int>(), body.at("offset").at(1).get<int>()};
  } else if (what == "context") {
    const json& masks = body.is_array() ? body : body.at("masks");
    d.context.clear();
    for (const auto& m : masks) d.context.push_back(RegionMask::from_json(m));
  } else {
    if (body.contains("layer")) {
      d.layer = body["layer"].get<int>();
      s.base.layer(d.layer);
    }
    d.rank = body.value("rank", d.rank);
    if (body.contains("stats")) {
      d.stats.samples = body["stats"].value("samples", d.stats.samples);
      d.stats.seed = body["stats"].value("seed", d.stats.seed);
    }
    if (body.contains("optimizer")) {
      d.config = OptimConfig::from_json(body["optimizer"]);
      d.config.validate();
    }
    if (body.contains("method")) {
      const auto method = body["method"].get<std::string>();
      if (method != "lambda" && method != "projected") return error_response(400, "unknown method " + method);
      d.method = method == "lambda" ? EditMethod::lambda : EditMethod::projected;
    }
    d.fill_outside_mask = body.value("fill_outside_mask", d.fill_outside_mask);
    if (d.rank < 1) return error_response(422, "rank must be >= 1");
  }
  s.draft = d;
  return json_response(200, with_echo(s, {{"session", d.to_json()}}));
}

Response Service::run_edit(SessionState& s, bool commit) {
  EditSession draft;
  Generator gen;
  {
    std::lock_guard lock(s.mu);
    if (s.running) return error_response(409, "an edit is already running for session " + s.id);
    draft = s.draft;
    draft.validate();
    gen = s.current();
    s.running = true;
    s.stage = commit ? "apply" : "preview";
    s.started = now_seconds();
  }
  RunGuard guard(s);
  ApplyOptions opts;
  opts.cache_dir = options_.cache_dir;
  if (!commit) opts.iterations_override = options_.preview_iterations;
  EditOutcome out = apply_edit(gen, draft, opts);
  const std::string hash = gtf::generator_hash(out.generator);
  json renders = json::array();
  for (std::size_t i = 0; i < out.render_seeds.size(); ++i) {
    renders.push_back({{"seed", out.render_seeds[i]},
                       {"before", httplib::detail::base64_encode(png::encode(out.before[i]))},
                       {"after", httplib::detail::base64_encode(png::encode(out.after[i]))}});
  }
  json body = {{"result", out.result.to_json()}, {"generator", hash}, {"renders", renders}, {"committed", commit}};
  std::lock_guard lock(s.mu);
  s.last_result = out.result.to_json();
  if (commit) {
    s.history.push_back(std::move(out.generator));
    s.history_hashes.push_back(hash);
  }
  body["history"] = s.history.size();
  return json_response(200, with_echo(s, body));
}

Response Service::undo(SessionState& s) {
  std::lock_guard lock(s.mu);
  if (s.running) return error_response(409, "an edit is running for session " + s.id);
  if (s.history.empty()) return error_response(422, "nothing to undo");
  s.history.pop_back();
  s.history_hashes.pop_back();
  return json_response(200, with_echo(s, {{"history", s.history.size()}, {"generator", s.current_hash()}}));
}

Response Service::relevance(SessionState& s, const Request& r) {
  EditSession draft;
  Generator gen;
  {
    std::lock_guard lock(s.mu);
    draft = s.draft;
    gen = s.current();
  }
  const int n = r.query.count("n") ? std::stoi(r.query.at("n")) : 16;
  const std::uint64_t first = r.query.count("first") ? std::stoull(r.query.at("first")) : 0;
  if (n < 1) return error_response(400, "n must be >= 1");
  const KeyStats stats = cached_key_stats(gen, draft.layer, draft.stats.samples, draft.stats.seed, options_.cache_dir);
  if (draft.context.empty() && !draft.copy.any()) return error_response(422, "session has no context masks");
  const DirectionSet ds = reduce_context(collect_context_keys(gen, draft).keys, stats, draft.rank);
  json entries = json::array();
  for (const auto& e : remem::relevance(gen, draft.layer, ds.d, first, n)) {
    entries.push_back({{"seed", e.seed}, {"score", e.score}, {"rank", e.rank}, {"location", {e.location.y, e.location.x}}});
  }
  std::lock_guard lock(s.mu);
  return json_response(200, with_echo(s, {{"samples", entries}}));
}

Response Service::progress(SessionState& s) {
  std::lock_guard lock(s.mu);
  json body = {{"running", s.running}, {"stage", s.stage}, {"history", s.history.size()}};
  if (s.running) body["elapsed_seconds"] = now_seconds() - s.started;
  if (!s.last_result.is_null()) {
    body["last"] = {{"final_loss", s.last_result["final_loss"]}, {"iterations", s.last_result["iterations"]}};
  }
  return json_response(200, with_echo(s, body));
}

int serve(const Options& options, const std::string& host, int port, std::stop_token stop) {
  Service service(options);
  httplib::Server server;
  auto adapt = [&service](const httplib::Request& req, httplib::Response& res) {
    Request r{req.method, req.path, {}, req.body};
    for (const auto& [k, v] : req.params) r.query[k] = v;
    const Response out = service.handle(r);
    res.status = out.status;
    res.set_content(out.body, out.content_type);
  };
  server.Get(".*", adapt);
  server.Post(".*", adapt);
  server.Put(".*", adapt);
  if (!server.bind_to_port(host, port)) throw ValidationError("cannot bind " + host + ":" + std::to_string(port));
  std::stop_callback on_stop(stop, [&server] { server.stop(); });
  return server.listen_after_bind() ? 0 : 1;
}

}  // namespace remem::service
