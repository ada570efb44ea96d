#include "remem/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <sstream>

#include "remem/editops.hpp"
#include "remem/error.hpp"
#include "remem/eval.hpp"
#include "remem/gtf.hpp"
#include "remem/planted.hpp"
#include "remem/png.hpp"
#include "remem/service.hpp"

namespace remem::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

struct Context {
  std::ostream& out;
  bool as_json = false;
  std::string models_dir;

  // Prints the JSON object under --json, otherwise the text lines.
  void report(const json& j, const std::string& text) const {
    if (as_json) {
      out << j.dump(2) << "\n";
    } else {
      out << text;
      if (!text.empty() && text.back() != '\n') out << "\n";
    }
  }

  fs::path model_path(const std::string& model) const {
    const fs::path p = resolve_model(model, models_dir.empty() ? "." : models_dir);
    if (!fs::exists(p)) throw ValidationError("model not found: " + p.string() + " (set --models or REMEM_MODELS_DIR)");
    return p;
  }
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw ValidationError(what + " not found: " + path);
}

std::vector<int> parse_ints(const std::string& spec) {
  std::vector<int> v;
  std::stringstream ss(spec);
  std::string item;
  try {
    while (std::getline(ss, item, ','))
      if (!item.empty()) v.push_back(std::stoi(item));
  } catch (const std::logic_error&) {
    throw ValidationError("bad integer list '" + spec + "'");
  }
  return v;
}

void write_generator(const Generator& gen, const std::string& path) {
  if (!fs::path(path).parent_path().empty()) fs::create_directories(fs::path(path).parent_path());
  gtf::save_fixture(gen, path);
}

std::string hash_line(const std::string& path, const Generator& gen) {
  return "wrote " + path + " (hash " + gtf::generator_hash(gen) + ")\n";
}

Generator import_json(const json& j) {
  Generator g;
  try {
    g.latent_dim = j.at("latent_dim").get<int>();
    g.base_size = j.value("base_size", 4);
    for (const auto& l : j.at("layers")) {
      LayerSpec spec;
      spec.weight = Tensor(l.at("shape").get<std::vector<int>>());
      const auto w = l.at("weight").get<std::vector<float>>();
      const auto b = l.at("bias").get<std::vector<float>>();
      if (w.size() != spec.weight.size()) throw ValidationError("import: weight length does not match shape");
      spec.weight.data = w;
      spec.bias = Tensor({static_cast<int>(b.size())});
      spec.bias.data = b;
      spec.act = nonlinearity_from_string(l.value("nonlinearity", std::string("identity")));
      spec.upsample = l.value("upsample", 1);
      g.layers.push_back(std::move(spec));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("import: ") + e.what());
  }
  g.validate();
  return g;
}

OptimConfig apply_overrides(OptimConfig cfg, int iterations, double lr) {
  if (iterations > 0) cfg.iterations = iterations;
  if (lr > 0) cfg.learning_rate = lr;
  cfg.validate();
  return cfg;
}

std::vector<std::vector<std::uint8_t>> rule_masks(const PlantedGenerator& p, int rule,
                                                  const std::vector<std::uint64_t>& seeds) {
  if (rule < 0 || rule >= static_cast<int>(p.manifest.rules.size())) {
    throw ValidationError("rule " + std::to_string(rule) + " not in manifest");
  }
  std::vector<std::vector<std::uint8_t>> masks;
  for (auto s : seeds) {
    masks.push_back(occurrence_mask(p.gen, p.manifest.memory_layer, latent_for_seed(s, p.gen.latent_dim),
                                    p.manifest.rules[static_cast<std::size_t>(rule)].key));
  }
  return masks;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rewrite the rules stored in generator conv layers."};
  app.require_subcommand(1);
  app.fallthrough();
  Context ctx{out, false, ""};
  ctx.models_dir = env_or("REMEM_MODELS_DIR", "");
  std::string cache_dir = env_or("REMEM_CACHE_DIR", "");
  app.add_flag("--json", ctx.as_json, "Machine-readable output");
  app.add_option("--models", ctx.models_dir, "Directory of <id>.gtf models (default $REMEM_MODELS_DIR)");
  app.add_option("--cache", cache_dir, "Key statistics cache directory (default $REMEM_CACHE_DIR)");

  std::function<void()> action;

  // fixture
  auto* fixture = app.add_subcommand("fixture", "Build or import generator fixtures");
  fixture->require_subcommand(1);
  std::string fx_kind = "planted", fx_out, fx_pairs, fx_in, fx_sessions;
  std::uint64_t fx_seed = 1;
  int fx_rules = 4, fx_layer = 2, fx_npairs = 4;
  auto* fx_gen = fixture->add_subcommand("gen", "Generate a fixture generator");
  fx_gen->add_option("--kind", fx_kind, "planted | random | discovery")
      ->check(CLI::IsMember({"planted", "random", "discovery"}));
  fx_gen->add_option("--seed", fx_seed, "Fixture seed");
  fx_gen->add_option("--rules", fx_rules, "Planted rules (1..32)");
  fx_gen->add_option("--layer", fx_layer, "Changed layer for discovery fixtures");
  fx_gen->add_option("--pairs", fx_pairs, "Directory for discovery pairs");
  fx_gen->add_option("--n-pairs", fx_npairs, "Discovery pairs to write");
  fx_gen->add_option("--sessions", fx_sessions, "Also write rule-transfer sessions here (planted)");
  fx_gen->add_option("--out", fx_out, "Output .gtf")->required();
  fx_gen->callback([&] {
    action = [&] {
      json j = {{"kind", fx_kind}, {"seed", fx_seed}, {"output", fx_out}};
      std::string text;
      if (fx_kind == "planted") {
        const auto p = build_planted_generator(fx_seed, fx_rules);
        if (!fs::path(fx_out).parent_path().empty()) fs::create_directories(fs::path(fx_out).parent_path());
        save_planted(fx_out, p);
        j["hash"] = gtf::generator_hash(p.gen);
        j["manifest"] = p.manifest.to_json();
        text = hash_line(fx_out, p.gen);
        if (!fx_sessions.empty()) {
          fs::create_directories(fx_sessions);
          const std::string id = fs::path(fx_out).stem().string();
          const int n = static_cast<int>(p.manifest.rules.size());
          json written = json::array();
          for (int r = 0; r < n; ++r) {
            const int to = (r + n - 1) % n;
            const fs::path path = fs::path(fx_sessions) / (id + "-transfer-" + std::to_string(r) + "-" +
                                                            std::to_string(to) + ".json");
            planted_transfer_session(p, id, r, to, 4).save(path);
            written.push_back(path.string());
            text += "wrote " + path.string() + "\n";
          }
          j["sessions"] = written;
        }
      } else {
        Generator g;
        if (fx_kind == "random") {
          g = build_random_generator(fx_seed);
        } else {
          if (fx_pairs.empty()) throw ValidationError("--pairs DIR is required for discovery fixtures");
          const auto f = build_discovery_fixture(fx_seed, fx_layer, fx_npairs);
          save_discovery_pairs(fx_pairs, f.pairs);
          g = f.gen;
          j["pairs"] = fx_pairs;
          j["changed_layer"] = fx_layer;
        }
        write_generator(g, fx_out);
        j["hash"] = gtf::generator_hash(g);
        text = hash_line(fx_out, g);
      }
      ctx.report(j, text);
    };
  });
  auto* fx_import = fixture->add_subcommand("import", "Import a generator from JSON weights or GTF");
  fx_import->add_option("--in", fx_in, "Input .json or .gtf")->required();
  fx_import->add_option("--out", fx_out, "Output .gtf")->required();
  fx_import->callback([&] {
    action = [&] {
      require_file(fx_in, "input");
      const Generator g = fs::path(fx_in).extension() == ".gtf"
                              ? gtf::load_fixture(fx_in)
                              : import_json(json::parse(gtf::read_bytes(fx_in), nullptr, true));
      write_generator(g, fx_out);
      ctx.report({{"output", fx_out}, {"hash", gtf::generator_hash(g)}}, hash_line(fx_out, g));
    };
  });

  // stats
  auto* stats = app.add_subcommand("stats", "Key statistics");
  stats->require_subcommand(1);
  std::string st_model;
  int st_layer = 0, st_samples = 256;
  std::uint64_t st_seed = 0;
  auto* st_build = stats->add_subcommand("build", "Estimate and cache key statistics");
  st_build->add_option("--model", st_model, "Model id or .gtf path")->required();
  st_build->add_option("--layer", st_layer, "Layer (1-based)")->required();
  st_build->add_option("--samples", st_samples, "Latent samples");
  st_build->add_option("--seed", st_seed, "Sampling seed");
  st_build->callback([&] {
    action = [&] {
      if (cache_dir.empty()) throw ValidationError("no cache directory: pass --cache or set REMEM_CACHE_DIR");
      const Generator g = gtf::load_fixture(ctx.model_path(st_model));
      const KeyStats ks = estimate_key_stats(g, st_layer, st_samples, st_seed);
      fs::create_directories(cache_dir);
      const fs::path path = fs::path(cache_dir) / key_stats_cache_name(g, st_layer, st_samples, st_seed);
      save_key_stats(path, ks);
      const std::string hash = gtf::content_hash(gtf::read_bytes(path));
      ctx.report({{"output", path.string()}, {"hash", hash}, {"layer", st_layer}, {"samples", st_samples},
                  {"seed", st_seed}, {"keys", ks.n_keys}, {"epsilon", ks.epsilon}},
                 "wrote " + path.string() + " (hash " + hash + ")");
    };
  });

  // edit
  auto* edit = app.add_subcommand("edit", "Rank-constrained edits");
  edit->require_subcommand(1);
  std::string ed_session, ed_out, ed_renders, ed_model;
  int ed_iterations = 0, ed_rule = 0, ed_rank = 1, ed_context = 8, ed_samples = 256;
  auto* ed_apply = edit->add_subcommand("apply", "Apply a session file");
  ed_apply->add_option("--session", ed_session, "Session .json")->required();
  ed_apply->add_option("--out", ed_out, "Output .gtf")->required();
  ed_apply->add_option("--renders", ed_renders, "Write before/after PNGs here");
  ed_apply->add_option("--iterations", ed_iterations, "Override the session's iteration count");
  ed_apply->callback([&] {
    action = [&] {
      require_file(ed_session, "session file");
      const EditSession s = EditSession::load(ed_session);
      const Generator g = gtf::load_fixture(ctx.model_path(s.model));
      ApplyOptions opts;
      opts.cache_dir = cache_dir;
      opts.iterations_override = ed_iterations;
      const EditOutcome o = apply_edit(g, s, opts);
      write_generator(o.generator, ed_out);
      if (!ed_renders.empty()) {
        fs::create_directories(ed_renders);
        for (std::size_t i = 0; i < o.render_seeds.size(); ++i) {
          const std::string seed = std::to_string(o.render_seeds[i]);
          png::write(fs::path(ed_renders) / ("before-" + seed + ".png"), o.before[i]);
          png::write(fs::path(ed_renders) / ("after-" + seed + ".png"), o.after[i]);
        }
      }
      const std::string hash = gtf::generator_hash(o.generator);
      json j = {{"output", ed_out}, {"hash", hash}, {"result", o.result.to_json()}, {"session", s.to_json()}};
      std::ostringstream text;
      text << "wrote " << ed_out << " (hash " << hash << ")\n"
           << "loss " << o.result.initial_loss << " -> " << o.result.final_loss << " in "
           << o.result.loss_trace.size() << " iterations, residual " << o.result.constraint_residual;
      ctx.report(j, text.str());
    };
  });
  auto* ed_erase = edit->add_subcommand("erase", "Erase a planted rule with a rank-S edit");
  ed_erase->add_option("--model", ed_model, "Planted model id or .gtf path")->required();
  ed_erase->add_option("--rule", ed_rule, "Rule id");
  ed_erase->add_option("--rank", ed_rank, "Edit rank");
  ed_erase->add_option("--context", ed_context, "Context keys");
  ed_erase->add_option("--samples", ed_samples, "Key statistics samples");
  ed_erase->add_option("--out", ed_out, "Output .gtf")->required();
  ed_erase->callback([&] {
    action = [&] {
      const auto p = load_planted(ctx.model_path(ed_model));
      const KeyStats ks = cached_key_stats(p.gen, p.manifest.memory_layer, ed_samples, 0, cache_dir);
      const EditResult r = erase_planted_rule(p, ed_rule, ks, ed_rank, ed_context, OptimConfig{});
      const Generator g = with_layer_weights(p.gen, r.layer, r.w1);
      write_generator(g, ed_out);
      ctx.report({{"output", ed_out}, {"hash", gtf::generator_hash(g)}, {"result", r.to_json()}}, hash_line(ed_out, g));
    };
  });

  // baseline
  auto* baseline = app.add_subcommand("baseline", "Comparison edits");
  baseline->require_subcommand(1);
  std::string bl_session, bl_out, bl_model, bl_units;
  double bl_lambda = 1.0, bl_lr = 0.0, bl_fraction = 0.3;
  int bl_iterations = 0, bl_layer = 0, bl_rule = -1, bl_context = 8, bl_samples = 256;
  auto* bl_all = baseline->add_subcommand("finetune-all", "Fine-tune every weight on the session's target image");
  bl_all->add_option("--session", bl_session, "Session .json")->required();
  bl_all->add_option("--out", bl_out, "Output .gtf")->required();
  bl_all->add_option("--lambda", bl_lambda, "Weight of the exemplar term");
  bl_all->add_option("--iterations", bl_iterations, "Iterations (default 2001)");
  bl_all->add_option("--lr", bl_lr, "Learning rate (default 1e-4)");
  bl_all->callback([&] {
    action = [&] {
      require_file(bl_session, "session file");
      const EditSession s = EditSession::load(bl_session);
      s.validate();
      const Generator g = gtf::load_fixture(ctx.model_path(s.model));
      const Exemplar e{latent_for_seed(s.paste.seed, g.latent_dim), pasted_target_image(g, s)};
      const EditResult r =
          finetune_all(g, {e}, bl_lambda, apply_overrides(finetune_all_defaults(), bl_iterations, bl_lr));
      write_generator(*r.theta1, bl_out);
      ctx.report({{"output", bl_out}, {"hash", gtf::generator_hash(*r.theta1)}, {"result", r.to_json()}},
                 hash_line(bl_out, *r.theta1));
    };
  });
  auto* bl_layer_cmd = baseline->add_subcommand("layer", "Unconstrained fine-tuning of the session's layer");
  bl_layer_cmd->add_option("--session", bl_session, "Session .json")->required();
  bl_layer_cmd->add_option("--out", bl_out, "Output .gtf")->required();
  bl_layer_cmd->add_option("--iterations", bl_iterations, "Iterations (default 2001)");
  bl_layer_cmd->add_option("--lr", bl_lr, "Learning rate (default 0.05)");
  bl_layer_cmd->callback([&] {
    action = [&] {
      require_file(bl_session, "session file");
      const EditSession s = EditSession::load(bl_session);
      const Generator g = gtf::load_fixture(ctx.model_path(s.model));
      const PatchProblem f = make_patch_problem(g, s);
      const EditResult r = finetune_layer_unconstrained(f, as_assoc_view(g.layer(s.layer)).matrix,
                                                        apply_overrides(s.config, bl_iterations, bl_lr));
      const Generator out_gen = with_layer_weights(g, s.layer, r.w1);
      write_generator(out_gen, bl_out);
      ctx.report({{"output", bl_out}, {"hash", gtf::generator_hash(out_gen)}, {"result", r.to_json()}},
                 hash_line(bl_out, out_gen));
    };
  });
  auto* bl_zero = baseline->add_subcommand("zero-units", "Zero output units of a layer");
  bl_zero->add_option("--model", bl_model, "Model id or .gtf path")->required();
  bl_zero->add_option("--layer", bl_layer, "Layer whose output units are zeroed");
  bl_zero->add_option("--units", bl_units, "Comma-separated unit indices");
  bl_zero->add_option("--rule", bl_rule, "Planted rule: zero the top-scored units feeding the memory layer");
  bl_zero->add_option("--fraction", bl_fraction, "Fraction of units for --rule");
  bl_zero->add_option("--context", bl_context, "Context keys for --rule");
  bl_zero->add_option("--samples", bl_samples, "Key statistics samples for --rule");
  bl_zero->add_option("--out", bl_out, "Output .gtf")->required();
  bl_zero->callback([&] {
    action = [&] {
      const fs::path path = ctx.model_path(bl_model);
      Generator g;
      std::vector<int> units;
      int layer = bl_layer;
      if (bl_rule >= 0) {
        const auto p = load_planted(path);
        const KeyStats ks = cached_key_stats(p.gen, p.manifest.memory_layer, bl_samples, 0, cache_dir);
        units = top_scored_units(p, bl_rule, ks, bl_fraction, bl_context);
        layer = p.manifest.memory_layer - 1;
        g = p.gen;
      } else {
        if (bl_units.empty() || layer < 1) throw ValidationError("zero-units needs --layer and --units, or --rule");
        units = parse_ints(bl_units);
        g = gtf::load_fixture(path);
      }
      const Generator z = zero_units(g, layer, units);
      write_generator(z, bl_out);
      ctx.report({{"output", bl_out}, {"hash", gtf::generator_hash(z)}, {"layer", layer}, {"units", units}},
                 hash_line(bl_out, z));
    };
  });

  // discover
  auto* discover = app.add_subcommand("discover", "Find the layer that best explains target images");
  std::string dc_model, dc_pairs, dc_layers, dc_out;
  int dc_rank = 1, dc_iterations = 0;
  double dc_lr = 0.0;
  discover->add_option("--model", dc_model, "Model id or .gtf path")->required();
  discover->add_option("--rank", dc_rank, "Rank of the weight change");
  discover->add_option("--pairs", dc_pairs, "Directory of pair .gtf files")->required();
  discover->add_option("--layers", dc_layers, "Candidate layers (default all)");
  discover->add_option("--iterations", dc_iterations, "Iterations (default 301)");
  discover->add_option("--lr", dc_lr, "Learning rate (default 0.003)");
  discover->add_option("--out", dc_out, "Write the generator changed at the best layer");
  discover->callback([&] {
    action = [&] {
      const Generator g = gtf::load_fixture(ctx.model_path(dc_model));
      const auto pairs = load_discovery_pairs(dc_pairs);
      const OptimConfig cfg = apply_overrides(discovery_fixture_config(), dc_iterations, dc_lr);
      const DiscoveryResult r = rank_constrained_discovery(g, pairs, dc_rank, cfg, parse_ints(dc_layers));
      json j = r.to_json();
      std::ostringstream text;
      text << "best layer " << r.best_layer << "\n";
      for (const auto& l : r.layers) {
        text << "  layer " << l.layer << ": " << (l.diverged ? "diverged (" + l.error + ")" : "");
        if (!l.diverged) text << "loss " << l.loss;
        text << "\n";
      }
      if (!dc_out.empty()) {
        const AssocView v = as_assoc_view(g.layer(r.best_layer));
        const Generator changed = with_layer_weights(g, r.best_layer, v.matrix + r.delta);
        write_generator(changed, dc_out);
        j["output"] = dc_out;
        j["hash"] = gtf::generator_hash(changed);
        text << hash_line(dc_out, changed);
      }
      ctx.report(j, text.str());
    };
  });

  // eval
  auto* eval = app.add_subcommand("eval", "Metrics");
  eval->require_subcommand(1);
  std::string ev_model, ev_before, ev_after, ev_seeds = "0:100", ev_sheet;
  int ev_samples = 64, ev_crop = 0, ev_rule = 0, ev_from_rule = -1;
  std::uint64_t ev_seed = 0;
  bool ev_erase = false;
  auto* ev_layers = eval->add_subcommand("layers", "Patch-independence score per layer");
  ev_layers->add_option("--model", ev_model, "Model id or .gtf path")->required();
  ev_layers->add_option("--samples", ev_samples, "Latents per layer");
  ev_layers->add_option("--seed", ev_seed, "First latent seed");
  ev_layers->add_option("--crop", ev_crop, "Crop side in pixels (default: one patch footprint)");
  ev_layers->add_option("--sheet", ev_sheet, "Write isolated vs full contact sheets here");
  ev_layers->callback([&] {
    action = [&] {
      const Generator g = gtf::load_fixture(ctx.model_path(ev_model));
      const LayerReport r = layer_selection_report(g, ev_samples, ev_seed, ev_crop);
      if (!ev_sheet.empty()) {
        fs::create_directories(ev_sheet);
        for (int l = 1; l <= g.layer_count(); ++l) {
          std::vector<Tensor> images;
          for (int row = 0; row < 2; ++row)
            for (std::uint64_t s = ev_seed; s < ev_seed + 8; ++s) {
              const auto f = features(g, latent_for_seed(s, g.latent_dim), l);
              const int c = g.resolution(l) / 2;
              images.push_back(row == 0 ? render_isolated_patch(g, f.values, {c, c}, l)
                                        : continue_from(g, f.values.data, l));
            }
          png::write(fs::path(ev_sheet) / ("layer-" + std::to_string(l) + ".png"), png::contact_sheet(images, 8));
        }
      }
      ctx.report(r.to_json(), r.to_text());
    };
  });
  auto* ev_masked = eval->add_subcommand("masked", "Off-mask change between two generators");
  ev_masked->add_option("--before", ev_before, "Planted model (masks come from its manifest)")->required();
  ev_masked->add_option("--after", ev_after, "Edited model")->required();
  ev_masked->add_option("--rule", ev_rule, "Rule whose occurrences form the mask");
  ev_masked->add_option("--seeds", ev_seeds, "Seeds a:b or a,b,c");
  ev_masked->callback([&] {
    action = [&] {
      const auto p = load_planted(ctx.model_path(ev_before));
      const Generator after = gtf::load_fixture(ctx.model_path(ev_after));
      const auto seeds = service::parse_seeds(ev_seeds);
      std::vector<Tensor> b, a;
      for (auto s : seeds) {
        b.push_back(forward(p.gen, latent_for_seed(s, p.gen.latent_dim)));
        a.push_back(forward(after, latent_for_seed(s, after.latent_dim)));
      }
      const MaskedChange mc = masked_change(b, a, rule_masks(p, ev_rule, seeds));
      std::ostringstream text;
      text << "off-mask change: mean " << mc.mean << ", max " << mc.max << " over " << seeds.size() << " images";
      ctx.report(mc.to_json(), text.str());
    };
  });
  auto* ev_eff = eval->add_subcommand("efficacy", "Fraction of rule occurrences showing the new value");
  ev_eff->add_option("--before", ev_before, "Planted model")->required();
  ev_eff->add_option("--after", ev_after, "Edited model")->required();
  ev_eff->add_option("--rule", ev_rule, "Edited rule");
  ev_eff->add_option("--from-rule", ev_from_rule, "Rule whose value was transferred");
  ev_eff->add_flag("--erase", ev_erase, "The rule was erased (new value zero)");
  ev_eff->add_option("--seeds", ev_seeds, "Seeds a:b");
  ev_eff->callback([&] {
    action = [&] {
      if ((ev_from_rule >= 0) == ev_erase) throw ValidationError("pass exactly one of --from-rule and --erase");
      const auto p = load_planted(ctx.model_path(ev_before));
      const Generator after = gtf::load_fixture(ctx.model_path(ev_after));
      const auto seeds = service::parse_seeds(ev_seeds);
      Vector v_new;
      if (ev_erase) {
        v_new = Vector::Zero(p.manifest.rules.at(0).value.size());
      } else {
        if (ev_from_rule >= static_cast<int>(p.manifest.rules.size())) throw ValidationError("--from-rule not in manifest");
        v_new = p.manifest.rules[static_cast<std::size_t>(ev_from_rule)].value;
      }
      const Efficacy e = efficacy_planted_rule(p.gen, after, p.manifest, ev_rule, v_new, seeds.front(),
                                               static_cast<int>(seeds.back() - seeds.front() + 1));
      std::ostringstream text;
      text << "efficacy " << e.fraction << " (" << e.changed << "/" << e.locations << " locations)";
      ctx.report(e.to_json(), text.str());
    };
  });

  // render
  auto* render = app.add_subcommand("render", "Render latents to PNG");
  std::string rd_model, rd_seeds = "0:8", rd_out;
  bool rd_sheet = false;
  render->add_option("--model", rd_model, "Model id or .gtf path")->required();
  render->add_option("--seeds", rd_seeds, "Seeds a:b or a,b,c");
  render->add_option("--out", rd_out, "Output directory")->required();
  render->add_flag("--sheet", rd_sheet, "Also write a contact sheet");
  render->callback([&] {
    action = [&] {
      const Generator g = gtf::load_fixture(ctx.model_path(rd_model));
      const auto seeds = service::parse_seeds(rd_seeds);
      fs::create_directories(rd_out);
      std::vector<Tensor> images;
      json files = json::array();
      for (auto s : seeds) {
        images.push_back(forward(g, latent_for_seed(s, g.latent_dim)));
        const fs::path p = fs::path(rd_out) / ("seed-" + std::to_string(s) + ".png");
        png::write(p, images.back());
        files.push_back(p.string());
      }
      if (rd_sheet) {
        const fs::path p = fs::path(rd_out) / "sheet.png";
        png::write(p, png::contact_sheet(images, std::min<int>(8, static_cast<int>(images.size()))));
        files.push_back(p.string());
      }
      ctx.report({{"files", files}}, "wrote " + std::to_string(files.size()) + " images to " + rd_out);
    };
  });

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP API");
  int sv_port = 8080, sv_preview = 201;
  std::string sv_host = "127.0.0.1";
  serve_cmd->add_option("--port", sv_port, "Port");
  serve_cmd->add_option("--host", sv_host, "Bind address");
  serve_cmd->add_option("--preview-iterations", sv_preview, "Iterations for previews");
  serve_cmd->callback([&] {
    action = [&] {
      service::Options o;
      o.models_dir = ctx.models_dir.empty() ? "." : ctx.models_dir;
      o.cache_dir = cache_dir;
      o.preview_iterations = sv_preview;
      out << "serving " << o.models_dir.string() << " on http://" << sv_host << ":" << sv_port << "\n" << std::flush;
      if (service::serve(o, sv_host, sv_port) != 0) throw ValidationError("server stopped with an error");
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  try {
    if (action) action();
    return kOk;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const json::exception& e) {
    err << "error: malformed JSON: " << e.what() << "\n";
    return kValidation;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
}

}  // namespace remem::cli
