#include "remem/editops.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "remem/error.hpp"
#include "remem/gtf.hpp"

namespace remem {

std::vector<int> rle_encode(const std::vector<std::uint8_t>& cells) {
  std::vector<int> runs;
  bool current = false;
  int run = 0;
  for (auto c : cells) {
    const bool v = c != 0;
    if (v != current) {
      runs.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<int>& runs, std::size_t size) {
  std::vector<std::uint8_t> cells;
  cells.reserve(size);
  bool v = false;
  for (int r : runs) {
    if (r < 0) throw ValidationError("mask RLE: negative run length");
    if (cells.size() + static_cast<std::size_t>(r) > size) throw ValidationError("mask RLE: runs exceed the grid size");
    cells.insert(cells.end(), static_cast<std::size_t>(r), v ? 1 : 0);
    v = !v;
  }
  if (cells.size() != size) {
    throw ValidationError("mask RLE: runs cover " + std::to_string(cells.size()) + " cells, grid has " +
                          std::to_string(size));
  }
  return cells;
}

int RegionMask::count() const {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](std::uint8_t c) { return c != 0; }));
}

RegionMask RegionMask::from_box(std::uint64_t seed, int height, int width, const Box& box) {
  RegionMask m;
  m.seed = seed;
  m.height = height;
  m.width = width;
  m.cells.assign(static_cast<std::size_t>(height) * width, 0);
  for (int y = std::max(0, box.y0); y < std::min(height, box.y1()); ++y)
    for (int x = std::max(0, box.x0); x < std::min(width, box.x1()); ++x) m.cells[static_cast<std::size_t>(y) * width + x] = 1;
  return m;
}

nlohmann::json RegionMask::to_json() const {
  return {{"seed", seed}, {"mask", {{"h", height}, {"w", width}, {"rle", rle_encode(cells)}}}};
}

RegionMask RegionMask::from_json(const nlohmann::json& j) {
  RegionMask m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& mj = j.at("mask");
    m.height = mj.at("h").get<int>();
    m.width = mj.at("w").get<int>();
    if (m.height < 1 || m.width < 1) throw ValidationError("mask: h and w must be >= 1");
    m.cells = rle_decode(mj.at("rle").get<std::vector<int>>(), static_cast<std::size_t>(m.height) * m.width);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("mask: ") + e.what());
  }
  return m;
}

int GridMask::count() const {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](std::uint8_t c) { return c != 0; }));
}

Box GridMask::bounding_box() const {
  int y0 = height, x0 = width, y1 = -1, x1 = -1;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (at(y, x)) {
        y0 = std::min(y0, y);
        x0 = std::min(x0, x);
        y1 = std::max(y1, y);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) throw ValidationError("bounding box of an empty mask");
  return {y0, x0, y1 - y0 + 1, x1 - x0 + 1};
}

GridMask downsample_mask(const RegionMask& mask, int grid_h, int grid_w) {
  if (grid_h < 1 || grid_w < 1 || grid_h > mask.height || grid_w > mask.width) {
    throw ValidationError("downsample_mask: grid larger than mask");
  }
  if (mask.cells.size() != static_cast<std::size_t>(mask.height) * mask.width) {
    throw ValidationError("downsample_mask: mask cell count does not match its size");
  }
  if (!mask.any()) throw ValidationError("downsample_mask: mask is empty");
  GridMask g{grid_h, grid_w, std::vector<std::uint8_t>(static_cast<std::size_t>(grid_h) * grid_w, 0)};
  double best = -1.0;
  std::size_t best_cell = 0;
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) {
      const int py0 = gy * mask.height / grid_h, py1 = (gy + 1) * mask.height / grid_h;
      const int px0 = gx * mask.width / grid_w, px1 = (gx + 1) * mask.width / grid_w;
      int covered = 0;
      for (int y = py0; y < py1; ++y)
        for (int x = px0; x < px1; ++x) covered += mask.at(y, x) ? 1 : 0;
      const double fraction = static_cast<double>(covered) / ((py1 - py0) * (px1 - px0));
      const std::size_t cell = static_cast<std::size_t>(gy) * grid_w + gx;
      if (fraction >= 0.5) g.cells[cell] = 1;
      if (fraction > best) {
        best = fraction;
        best_cell = cell;
      }
    }
  if (g.count() == 0) g.cells[best_cell] = 1;
  return g;
}

namespace {

const char* to_string(EditMethod m) { return m == EditMethod::lambda ? "lambda" : "projected"; }

EditMethod method_from_string(const std::string& s) {
  if (s == "lambda") return EditMethod::lambda;
  if (s == "projected") return EditMethod::projected;
  throw ValidationError("session: unknown method '" + s + "' (expected lambda or projected)");
}

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const DivergenceError& e) {
    throw DivergenceError(name + ": " + e.message(), e.iteration());
  } catch (const ValidationError& e) {
    throw ValidationError(name + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(name + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(name + ": " + e.what());
  }
}

void check_image_mask(const Generator& gen, const RegionMask& m, const std::string& what) {
  if (m.height != gen.image_size() || m.width != gen.image_size()) {
    throw ValidationError(what + " mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                          ", images are " + std::to_string(gen.image_size()) + "x" + std::to_string(gen.image_size()));
  }
  if (!m.any()) throw ValidationError(what + " mask is empty");
}

}  // namespace

void EditSession::validate() const {
  if (layer < 1) throw ValidationError("session: layer must be >= 1");
  if (rank < 1) throw ValidationError("session: rank must be >= 1");
  if (!copy.any()) throw ValidationError("session: copy mask is empty");
  for (std::size_t i = 0; i < context.size(); ++i)
    if (!context[i].any()) throw ValidationError("session: context mask " + std::to_string(i) + " is empty");
  if (stats.samples < 1) throw ValidationError("session: stats.samples must be >= 1");
  config.validate();
}

nlohmann::json EditSession::to_json() const {
  nlohmann::json ctx = nlohmann::json::array();
  for (const auto& c : context) ctx.push_back(c.to_json());
  nlohmann::json cfg = config.to_json();
  cfg["method"] = to_string(method);
  cfg["fill_outside_mask"] = fill_outside_mask;
  return {{"version", kVersion},
          {"model", model},
          {"layer", layer},
          {"rank", rank},
          {"copy", copy.to_json()},
          {"paste", {{"seed", paste.seed}, {"offset", {paste.offset.y, paste.offset.x}}}},
          {"context", ctx},
          {"stats", {{"samples", stats.samples}, {"seed", stats.seed}}},
          {"config", cfg}};
}

EditSession EditSession::from_json(const nlohmann::json& j) {
  EditSession s;
  try {
    const int version = j.at("version").get<int>();
    if (version != kVersion) {
      throw ValidationError("session: version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kVersion) + ")");
    }
    s.model = j.at("model").get<std::string>();
    s.layer = j.at("layer").get<int>();
    s.rank = j.value("rank", 1);
    s.copy = RegionMask::from_json(j.at("copy"));
    const auto& p = j.at("paste");
    s.paste.seed = p.at("seed").get<std::uint64_t>();
    s.paste.offset = {p.at("offset").at(0).get<int>(), p.at("offset").at(1).get<int>()};
    for (const auto& c : j.value("context", nlohmann::json::array())) s.context.push_back(RegionMask::from_json(c));
    if (j.contains("stats")) {
      s.stats.samples = j["stats"].value("samples", s.stats.samples);
      s.stats.seed = j["stats"].value("seed", s.stats.seed);
    }
    if (j.contains("config")) {
      s.config = OptimConfig::from_json(j["config"]);
      s.method = method_from_string(j["config"].value("method", std::string("lambda")));
      s.fill_outside_mask = j["config"].value("fill_outside_mask", false);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("session: ") + e.what());
  }
  return s;
}

EditSession EditSession::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("session file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("session file " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void EditSession::save(const std::filesystem::path& path) const { gtf::write_bytes(path, to_json().dump(2) + "\n"); }

CopyValue extract_copy_value(const Generator& gen, const EditSession& session) {
  check_image_mask(gen, session.copy, "copy");
  const int res = gen.resolution(session.layer);
  const GridMask grid = downsample_mask(session.copy, res, res);
  CopyValue out;
  out.box = grid.bounding_box();
  const auto f = features(gen, latent_for_seed(session.copy.seed, gen.latent_dim), session.layer);
  out.v_star = crop(f.values.data, out.box);
  for (int y = 0; y < out.box.h; ++y)
    for (int x = 0; x < out.box.w; ++x) out.mask.push_back(grid.at(out.box.y0 + y, out.box.x0 + x) ? 1 : 0);
  return out;
}

PasteTarget make_paste_target(const Generator& gen, const EditSession& session, int box_h, int box_w) {
  const auto& spec = gen.layer(session.layer);
  const int res = gen.resolution(session.layer);
  const Location o = session.paste.offset;
  if (box_h < 1 || box_w < 1 || o.y < 0 || o.x < 0 || o.y + box_h > res || o.x + box_w > res) {
    throw ValidationError("paste placement at (" + std::to_string(o.y) + "," + std::to_string(o.x) + ") with a " +
                          std::to_string(box_h) + "x" + std::to_string(box_w) + " box leaves the " +
                          std::to_string(res) + "x" + std::to_string(res) + " feature grid");
  }
  const int ry = spec.kh() / 2, rx = spec.kw() / 2;
  const auto f = features(gen, latent_for_seed(session.paste.seed, gen.latent_dim), session.layer);
  PasteTarget t;
  t.box = {o.y, o.x, box_h, box_w};
  t.window_origin = {ry, rx};
  t.k_star = Tensor({spec.in_channels(), box_h + 2 * ry, box_w + 2 * rx});
  for (int c = 0; c < spec.in_channels(); ++c)
    for (int y = 0; y < box_h + 2 * ry; ++y)
      for (int x = 0; x < box_w + 2 * rx; ++x) {
        const int gy = o.y - ry + y, gx = o.x - rx + x;
        if (gy >= 0 && gy < res && gx >= 0 && gx < res) t.k_star.at(c, y, x) = f.keys.data.at(c, gy, gx);
      }
  return t;
}

PatchProblem make_patch_problem(const Generator& gen, const EditSession& session, const CopyValue& copy,
                                const PasteTarget& target) {
  const auto& spec = gen.layer(session.layer);
  Tensor v_star = copy.v_star;
  std::vector<std::uint8_t> mask = copy.mask;
  if (session.fill_outside_mask) {
    const auto f = features(gen, latent_for_seed(session.paste.seed, gen.latent_dim), session.layer);
    for (int c = 0; c < v_star.dim(0); ++c)
      for (int y = 0; y < copy.box.h; ++y)
        for (int x = 0; x < copy.box.w; ++x)
          if (!mask[static_cast<std::size_t>(y) * copy.box.w + x]) {
            v_star.at(c, y, x) = f.values.data.at(c, target.box.y0 + y, target.box.x0 + x);
          }
    std::fill(mask.begin(), mask.end(), 1);
  }
  return PatchProblem(spec, target.k_star, target.window_origin, v_star, mask);
}

PatchProblem make_patch_problem(const Generator& gen, const EditSession& session) {
  session.validate();
  const CopyValue copy = extract_copy_value(gen, session);
  return make_patch_problem(gen, session, copy, make_paste_target(gen, session, copy.box.h, copy.box.w));
}

ContextSelection collect_context_keys(const Generator& gen, const EditSession& session) {
  const int res = gen.resolution(session.layer);
  ContextSelection sel;
  std::vector<Vector> cols;
  if (session.context.empty()) {
    const CopyValue copy = extract_copy_value(gen, session);
    const PasteTarget target = make_paste_target(gen, session, copy.box.h, copy.box.w);
    for (int y = 0; y < copy.box.h; ++y)
      for (int x = 0; x < copy.box.w; ++x) {
        if (!copy.mask[static_cast<std::size_t>(y) * copy.box.w + x]) continue;
        cols.push_back(key_at(target.k_star, {target.window_origin.y + y, target.window_origin.x + x}));
        sel.sources.push_back({session.paste.seed, {target.box.y0 + y, target.box.x0 + x}});
      }
  } else {
    for (std::size_t i = 0; i < session.context.size(); ++i) {
      const auto& m = session.context[i];
      check_image_mask(gen, m, "context " + std::to_string(i));
      const GridMask grid = downsample_mask(m, res, res);
      const auto f = features(gen, latent_for_seed(m.seed, gen.latent_dim), session.layer);
      for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
          if (!grid.at(y, x)) continue;
          cols.push_back(key_at(f.keys, {y, x}));
          sel.sources.push_back({m.seed, {y, x}});
        }
    }
  }
  sel.keys.resize(gen.layer(session.layer).in_channels(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) sel.keys.col(static_cast<Eigen::Index>(i)) = cols[i];
  return sel;
}

std::vector<std::uint64_t> session_seeds(const EditSession& session) {
  std::vector<std::uint64_t> seeds;
  auto add = [&](std::uint64_t s) {
    if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
  };
  add(session.copy.seed);
  add(session.paste.seed);
  for (const auto& c : session.context) add(c.seed);
  return seeds;
}

EditOutcome apply_edit(const Generator& gen, const EditSession& session, const ApplyOptions& options) {
  stage("session", [&] {
    session.validate();
    gen.layer(session.layer);
    return 0;
  });
  OptimConfig cfg = session.config;
  if (options.iterations_override > 0) cfg.iterations = options.iterations_override;

  const KeyStats stats = stage("stats", [&] {
    return cached_key_stats(gen, session.layer, session.stats.samples, session.stats.seed, options.cache_dir);
  });
  const CopyValue copy = stage("copy", [&] { return extract_copy_value(gen, session); });
  const PasteTarget target = stage("paste", [&] { return make_paste_target(gen, session, copy.box.h, copy.box.w); });
  const ContextSelection ctx = stage("context", [&] { return collect_context_keys(gen, session); });
  const DirectionSet ds = stage("rank reduction", [&] { return reduce_context(ctx.keys, stats, session.rank); });

  EditOutcome out;
  out.directions = ds;
  const auto& spec = gen.layer(session.layer);
  const Matrix w0 = as_assoc_view(spec).matrix;
  out.result = stage("optimization", [&] {
    const PatchProblem f = make_patch_problem(gen, session, copy, target);
    return session.method == EditMethod::lambda ? optimize_lambda_multi(f, w0, ds.d, cfg)
                                                : projected_gd(f, w0, ds.d, cfg);
  });
  out.result.layer = session.layer;
  out.generator = stage("apply", [&] { return with_layer_weights(gen, session.layer, out.result.w1); });

  out.render_seeds = options.render_seeds.empty() ? session_seeds(session) : options.render_seeds;
  for (auto s : out.render_seeds) {
    const Latent z = latent_for_seed(s, gen.latent_dim);
    out.before.push_back(forward(gen, z));
    out.after.push_back(forward(out.generator, z));
  }
  return out;
}

std::vector<RelevanceEntry> relevance(const Generator& gen, int layer, const Matrix& d_s, std::uint64_t first_seed,
                                      int n) {
  if (n < 0) throw ValidationError("relevance: n must be >= 0");
  if (d_s.rows() != gen.layer(layer).in_channels()) throw ValidationError("relevance: direction set dimension mismatch");
  std::vector<RelevanceEntry> out;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(i);
    const auto f = features(gen, latent_for_seed(seed, gen.latent_dim), layer);
    const auto& k = f.keys.data;
    const int plane = k.dim(1) * k.dim(2);
    Matrix keys(k.dim(0), plane);
    for (int c = 0; c < k.dim(0); ++c)
      for (int p = 0; p < plane; ++p) keys(c, p) = k.data[static_cast<std::size_t>(c) * plane + p];
    const Vector scores = (d_s.transpose() * keys).colwise().norm().transpose();
    Eigen::Index best = 0;
    const double s = scores.maxCoeff(&best);
    out.push_back({seed, s, {static_cast<int>(best) / k.dim(2), static_cast<int>(best) % k.dim(2)}, 0});
  }
  std::stable_sort(out.begin(), out.end(), [](const RelevanceEntry& a, const RelevanceEntry& b) { return a.score > b.score; });
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i].rank = (i > 0 && out[i].score == out[i - 1].score) ? out[i - 1].rank : static_cast<int>(i) + 1;
  return out;
}

Tensor pasted_target_image(const Generator& gen, const EditSession& session) {
  const CopyValue copy = extract_copy_value(gen, session);
  const PasteTarget target = make_paste_target(gen, session, copy.box.h, copy.box.w);
  auto f = features(gen, latent_for_seed(session.paste.seed, gen.latent_dim), session.layer);
  for (int c = 0; c < copy.v_star.dim(0); ++c)
    for (int y = 0; y < copy.box.h; ++y)
      for (int x = 0; x < copy.box.w; ++x)
        if (copy.mask[static_cast<std::size_t>(y) * copy.box.w + x]) {
          f.values.data.at(c, target.box.y0 + y, target.box.x0 + x) = copy.v_star.at(c, y, x);
        }
  return continue_from(gen, f.values.data, session.layer);
}

EditSession planted_transfer_session(const PlantedGenerator& planted, const std::string& model, int from, int to,
                                     int n_context) {
  const auto& rules = planted.manifest.rules;
  const int n = static_cast<int>(rules.size());
  if (from < 0 || from >= n || to < 0 || to >= n || from == to) {
    throw ValidationError("transfer session: rules must be distinct ids below " + std::to_string(n));
  }
  if (n_context < 1) throw ValidationError("transfer session: need at least one context latent");
  const Generator& gen = planted.gen;
  const int layer = planted.manifest.memory_layer;
  const int image = gen.image_size();
  const auto& src = rules[static_cast<std::size_t>(from)];
  const auto& dst = rules[static_cast<std::size_t>(to)];
  const int ry = gen.layer(layer).kh() / 2, rx = gen.layer(layer).kw() / 2;
  const Box src_cells{src.location.y - ry, src.location.x - rx, 2 * ry + 1, 2 * rx + 1};

  EditSession s;
  s.model = model;
  s.layer = layer;
  s.rank = 1;
  s.copy = RegionMask::from_box(src.seed, image, image, image_cells(gen, layer, src_cells));
  s.paste = {dst.seed, {dst.location.y - ry, dst.location.x - rx}};
  const Box key_cell = image_cells(gen, layer, {dst.location.y, dst.location.x, 1, 1});
  for (std::uint64_t seed = 0; static_cast<int>(s.context.size()) < n_context; ++seed) {
    if (seed > 100000) throw ValidationError("transfer session: rule never fires");
    const auto f = features(gen, latent_for_seed(seed, gen.latent_dim), layer);
    if (find_key_occurrences(f.keys.data, dst.key).empty()) continue;
    s.context.push_back(RegionMask::from_box(seed, image, image, key_cell));
  }
  return s;
}

ContextSelection planted_rule_context(const PlantedGenerator& planted, int rule, int n_keys) {
  const auto& rules = planted.manifest.rules;
  if (rule < 0 || rule >= static_cast<int>(rules.size())) {
    throw ValidationError("rule " + std::to_string(rule) + " not in manifest");
  }
  if (n_keys < 1) throw ValidationError("planted context: need at least one key");
  const Generator& gen = planted.gen;
  const int layer = planted.manifest.memory_layer;
  const Vector& key = rules[static_cast<std::size_t>(rule)].key;
  std::vector<Vector> keys;
  ContextSelection ctx;
  for (std::uint64_t seed = 0; static_cast<int>(keys.size()) < n_keys; ++seed) {
    if (seed > 100000) throw ValidationError("planted context: rule never fires");
    const auto f = features(gen, latent_for_seed(seed, gen.latent_dim), layer);
    for (const auto& loc : find_key_occurrences(f.keys.data, key)) {
      if (static_cast<int>(keys.size()) == n_keys) break;
      keys.push_back(key_at(f.keys, loc));
      ctx.sources.push_back({seed, loc});
    }
  }
  ctx.keys = Matrix(key.size(), n_keys);
  for (int i = 0; i < n_keys; ++i) ctx.keys.col(i) = keys[static_cast<std::size_t>(i)];
  return ctx;
}

EditResult erase_planted_rule(const PlantedGenerator& planted, int rule, const KeyStats& stats, int rank,
                              int n_context, const OptimConfig& cfg) {
  const int layer = planted.manifest.memory_layer;
  const auto& spec = planted.gen.layer(layer);
  const ContextSelection ctx = planted_rule_context(planted, rule, n_context);
  const DirectionSet ds = reduce_context(ctx.keys, stats, rank);
  const AssocView view = as_assoc_view(spec);
  Tensor rest = spec.bias;
  kernels::activate_inplace(rest, spec.act);
  Vector target(view.rows());
  for (int o = 0; o < spec.out_channels(); ++o)
    for (int py = 0; py < spec.kh(); ++py)
      for (int px = 0; px < spec.kw(); ++px) target(view.row(o, py, px)) = rest.data[static_cast<std::size_t>(o)];
  const auto f = PatchProblem::single_key(spec, planted.manifest.rules[static_cast<std::size_t>(rule)].key, target);
  EditResult r = optimize_lambda_multi(f, view.matrix, ds.d, cfg);
  r.layer = layer;
  return r;
}

std::vector<int> top_scored_units(const PlantedGenerator& planted, int rule, const KeyStats& stats, double fraction,
                                  int n_context) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("unit fraction must be in (0, 1]");
  const ContextSelection ctx = planted_rule_context(planted, rule, n_context);
  const AxisScores ax = axis_aligned_scores(ctx.keys, stats.sigma());
  const int n = std::max(1, static_cast<int>(std::lround(fraction * static_cast<double>(ax.order.size()))));
  return {ax.order.begin(), ax.order.begin() + n};
}

std::filesystem::path resolve_model(const std::string& model, const std::filesystem::path& models_dir) {
  if (model.empty()) throw ValidationError("session names no model");
  std::filesystem::path p(model);
  if (p.extension() == ".gtf") {
    if (p.is_relative() && !std::filesystem::exists(p)) p = models_dir / p;
  } else {
    p = models_dir / (model + ".gtf");
  }
  if (!std::filesystem::exists(p)) throw ValidationError("model '" + model + "' not found at " + p.string());
  return p;
}

}  // namespace remem
