#include "remem/planted.hpp"

#include <array>
#include <algorithm>
#include <cmath>
#include <cstdio>

#include "remem/error.hpp"
#include "remem/gtf.hpp"
#include "remem/rng.hpp"

namespace remem {

namespace {

constexpr int kLatent = 32;
constexpr int kKeyChannels = 32;
constexpr int kValueChannels = 16;
constexpr float kGateGain = 1e4f;
constexpr float kGateThreshold = 0.25f;
constexpr float kSuppress = 4.0f;
constexpr int kMaxSeedSearch = 100000;

const std::array<Location, 4> kCorners = {{{0, 0}, {0, 3}, {3, 0}, {3, 3}}};

// Memory-layer cell that keeps the key for each corner, and the two
// neighbours whose activity suppresses the other cells of the 2x2 block.
struct CornerGeometry {
  Location key_cell;
  std::array<Location, 2> suppress_taps;  // kernel tap (a, b)
  std::array<float, 3> beta_row;
  std::array<float, 3> beta_col;
};

CornerGeometry geometry(int corner) {
  const bool bottom = corner >= 2, right = corner % 2 == 1;
  CornerGeometry g;
  g.key_cell = {bottom ? 6 : 1, right ? 6 : 1};
  g.suppress_taps = {Location{bottom ? 0 : 2, 1}, Location{1, right ? 0 : 2}};
  g.beta_row = bottom ? std::array<float, 3>{0, 1, -1} : std::array<float, 3>{-1, 1, 0};
  g.beta_col = right ? std::array<float, 3>{0, 1, -1} : std::array<float, 3>{-1, 1, 0};
  return g;
}

float& w_at(Tensor& w, int o, int i, int a, int b) {
  return w.data[((static_cast<std::size_t>(o) * w.dim(1) + i) * w.dim(2) + a) * w.dim(3) + b];
}

Tensor tensor_from_json(const nlohmann::json& j) {
  Tensor t;
  t.shape = j.at("shape").get<std::vector<int>>();
  t.data = j.at("data").get<std::vector<float>>();
  if (t.data.size() != Tensor::element_count(t.shape)) throw FormatError("manifest: tensor data/shape mismatch");
  return t;
}

Vector vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

nlohmann::json PlantedManifest::to_json() const {
  nlohmann::json rules_json = nlohmann::json::array();
  for (const auto& r : rules) {
    rules_json.push_back({{"id", r.id},
                          {"corner", {r.corner.y, r.corner.x}},
                          {"location", {r.location.y, r.location.x}},
                          {"seed", r.seed},
                          {"key", to_std(r.key)},
                          {"value", to_std(r.value)},
                          {"footprint", {r.footprint.y0, r.footprint.x0, r.footprint.h, r.footprint.w}},
                          {"motif", {{"shape", r.motif.shape}, {"data", r.motif.data}}}});
  }
  return {{"seed", seed}, {"memory_layer", memory_layer}, {"rules", rules_json}};
}

PlantedManifest PlantedManifest::from_json(const nlohmann::json& j) {
  PlantedManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.memory_layer = j.at("memory_layer").get<int>();
    for (const auto& rj : j.at("rules")) {
      PlantedRule r;
      r.id = rj.at("id").get<int>();
      r.corner = {rj.at("corner")[0].get<int>(), rj.at("corner")[1].get<int>()};
      r.location = {rj.at("location")[0].get<int>(), rj.at("location")[1].get<int>()};
      r.seed = rj.at("seed").get<std::uint64_t>();
      r.key = vector_from_json(rj.at("key"));
      r.value = vector_from_json(rj.at("value"));
      const auto& f = rj.at("footprint");
      r.footprint = {f[0].get<int>(), f[1].get<int>(), f[2].get<int>(), f[3].get<int>()};
      r.motif = tensor_from_json(rj.at("motif"));
      m.rules.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("planted manifest: ") + e.what());
  }
  return m;
}

std::vector<Location> find_key_occurrences(const Tensor& keys, const Vector& key, double tol) {
  if (keys.dim(0) != key.size()) throw ValidationError("find_key_occurrences: key length mismatch");
  std::vector<Location> out;
  for (int y = 0; y < keys.dim(1); ++y)
    for (int x = 0; x < keys.dim(2); ++x) {
      double err = 0.0;
      for (int c = 0; c < keys.dim(0) && err < tol; ++c) err = std::max(err, std::abs(keys.at(c, y, x) - key(c)));
      if (err < tol) out.push_back({y, x});
    }
  return out;
}

Tensor render_value_patch(const Generator& gen, int layer, const Vector& value, Location location) {
  const auto& spec = gen.layer(layer);
  const int res = gen.resolution(layer);
  if (value.size() != static_cast<Eigen::Index>(spec.out_channels()) * spec.kh() * spec.kw()) {
    throw ValidationError("render_value_patch: value has wrong length");
  }
  Tensor v_map({spec.out_channels(), res, res});
  const int ry = spec.kh() / 2, rx = spec.kw() / 2;
  for (int o = 0; o < spec.out_channels(); ++o)
    for (int py = 0; py < spec.kh(); ++py)
      for (int px = 0; px < spec.kw(); ++px) {
        const int y = location.y + py - ry, x = location.x + px - rx;
        if (y >= 0 && y < res && x >= 0 && x < res) {
          v_map.at(o, y, x) = static_cast<float>(value((o * spec.kh() + py) * spec.kw() + px));
        }
      }
  kernels::activate_inplace(v_map, spec.act);
  return continue_from(gen, v_map, layer);
}

PlantedGenerator build_planted_generator(std::uint64_t seed, int n_rules) {
  if (n_rules < 1 || n_rules > kKeyChannels) {
    throw ValidationError("build_planted_generator: n_rules must be in 1.." + std::to_string(kKeyChannels));
  }
  const int n = n_rules;
  const int gate0 = 0, konst = n, tex1_0 = n + 1;
  const int width1 = std::max(32, n + 1 + 8);
  const int n_tex1 = width1 - tex1_0;
  const int n_tex2 = kKeyChannels - n;

  CounterRng rng(derive_seed(seed, 0x91a7));

  // Rule gate directions in latent space.
  std::vector<Vector> u(static_cast<std::size_t>(n));
  for (auto& ur : u) {
    ur.resize(kLatent);
    for (int j = 0; j < kLatent; ++j) ur(j) = rng.normal();
    ur.normalize();
  }

  Generator g;
  g.latent_dim = kLatent;
  g.base_size = 4;

  // Layer 1.
  LayerSpec l1;
  l1.act = Nonlinearity::tanh;
  l1.upsample = 1;
  l1.weight = Tensor({width1, kLatent, 3, 3});
  l1.bias = Tensor({width1});
  for (int r = 0; r < n; ++r) {
    const auto geo = geometry(r % 4);
    for (int j = 0; j < kLatent; ++j)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          const float beta = geo.beta_row[a] * geo.beta_col[b];
          if (beta != 0.0f) w_at(l1.weight, gate0 + r, j, a, b) = kGateGain * beta * static_cast<float>(u[r](j));
        }
    l1.bias.data[gate0 + r] = -kGateGain * kGateThreshold;
  }
  l1.bias.data[konst] = 20.0f;
  const double tex1_sd = 1.0 / std::sqrt(kLatent * 9.0);
  for (int c = tex1_0; c < width1; ++c) {
    for (int j = 0; j < kLatent; ++j)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) w_at(l1.weight, c, j, a, b) = static_cast<float>(rng.normal(0.0, tex1_sd));
    l1.bias.data[c] = static_cast<float>(rng.normal(0.0, 0.1));
  }
  g.layers.push_back(l1);

  // Rule keys: dyadic, non-negative, unit diagonal, off-diagonal row sum <= 1/2.
  std::vector<Vector> keys(static_cast<std::size_t>(n), Vector::Zero(kKeyChannels));
  for (int r = 0; r < n; ++r) {
    keys[r](r) = 1.0;
    if (n > 1) {
      for (int extra = 0; extra < 2; ++extra) {
        int m = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(n));
        if (m == r) continue;
        keys[r](m) += static_cast<double>(1 + rng.next_u64() % 4) / 16.0;
      }
    }
  }

  // Layer 2.
  LayerSpec l2;
  l2.act = Nonlinearity::relu;
  l2.upsample = 2;
  l2.weight = Tensor({kKeyChannels, width1, 3, 3});
  l2.bias = Tensor({kKeyChannels});
  for (int r = 0; r < n; ++r) {
    const auto geo = geometry(r % 4);
    for (int m = 0; m < n; ++m) {
      const float a = static_cast<float>(keys[r](m));
      if (a == 0.0f) continue;
      w_at(l2.weight, m, gate0 + r, 1, 1) += 0.5f * a;
      w_at(l2.weight, m, konst, 1, 1) += 0.5f * a;
      for (const auto& tap : geo.suppress_taps) {
        w_at(l2.weight, m, gate0 + r, tap.y, tap.x) += -0.5f * kSuppress;
        w_at(l2.weight, m, konst, tap.y, tap.x) += -0.5f * kSuppress;
      }
    }
  }
  const double tex2_sd = std::sqrt(2.0 / (n_tex1 * 9.0));
  for (int t = n; t < kKeyChannels; ++t) {
    double bound = 1.0;
    for (int c = tex1_0; c < width1; ++c)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          const float w = static_cast<float>(rng.normal(0.0, tex2_sd));
          w_at(l2.weight, t, c, a, b) = w;
          bound += std::abs(w);
        }
    l2.bias.data[t] = static_cast<float>(rng.normal(0.1, 0.05));
    bound += std::abs(l2.bias.data[t]);
    const float s_t = static_cast<float>(std::ceil(bound));
    for (int r = 0; r < n; ++r)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          w_at(l2.weight, t, gate0 + r, a, b) += -0.5f * s_t;
          w_at(l2.weight, t, konst, a, b) += -0.5f * s_t;
        }
  }
  g.layers.push_back(l2);

  // Layer 3: memory fit to planted rules plus centre-only texture values.
  const int m_rows = kValueChannels * 9;
  Matrix k_all = Matrix::Zero(kKeyChannels, kKeyChannels);
  Matrix v_all = Matrix::Zero(m_rows, kKeyChannels);
  std::vector<Vector> values(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    Vector profile(kValueChannels);
    for (int o = 0; o < kValueChannels; ++o) profile(o) = rng.uniform(0.0, 1.0);
    std::array<double, 9> pattern;
    for (auto& p : pattern) p = rng.uniform(0.1, 1.0);
    values[r] = Vector(m_rows);
    for (int o = 0; o < kValueChannels; ++o)
      for (int q = 0; q < 9; ++q) values[r](o * 9 + q) = 1.5 * profile(o) * pattern[q];
    k_all.col(r) = keys[r];
    v_all.col(r) = values[r];
  }
  for (int t = n; t < kKeyChannels; ++t) {
    k_all(t, t) = 1.0;
    for (int o = 0; o < kValueChannels; ++o) v_all(o * 9 + 4, t) = rng.normal(0.0, 0.4);
  }
  (void)n_tex2;
  const AssocView memory = fit_memory(k_all, v_all, 3, 3);
  LayerSpec l3;
  l3.act = Nonlinearity::leaky_relu;
  l3.upsample = 1;
  l3.weight = to_layer(memory);
  l3.bias = Tensor({kValueChannels});
  g.layers.push_back(l3);

  // Layer 4.
  LayerSpec l4;
  l4.act = Nonlinearity::tanh;
  l4.upsample = 4;
  l4.weight = Tensor({3, kValueChannels, 3, 3});
  l4.bias = Tensor({3});
  for (int o = 0; o < 3; ++o) {
    for (int i = 0; i < kValueChannels; ++i)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          w_at(l4.weight, o, i, a, b) = static_cast<float>(rng.normal(0.0, a == 1 && b == 1 ? 0.6 : 0.1));
    l4.bias.data[o] = static_cast<float>(rng.normal(0.0, 0.05));
  }
  g.layers.push_back(l4);
  g.validate();

  PlantedGenerator out;
  out.gen = std::move(g);
  out.manifest.seed = seed;
  out.manifest.memory_layer = kPlantedMemoryLayer;
  for (int r = 0; r < n; ++r) {
    const auto geo = geometry(r % 4);
    PlantedRule rule;
    rule.id = r;
    rule.corner = kCorners[r % 4];
    rule.location = geo.key_cell;
    bool found = false;
    for (std::uint64_t s = 0; s < static_cast<std::uint64_t>(kMaxSeedSearch) && !found; ++s) {
      const auto f = features(out.gen, latent_for_seed(s, kLatent), kPlantedMemoryLayer);
      const Vector k = key_at(f.keys, rule.location);
      if ((k - keys[r]).cwiseAbs().maxCoeff() < 1e-6) {
        rule.seed = s;
        rule.key = k;
        found = true;
      }
    }
    if (!found) throw NumericalError("build_planted_generator: no latent activates rule " + std::to_string(r));
    rule.value = values[r];
    rule.footprint =
        image_footprint(out.gen, kPlantedMemoryLayer, {rule.location.y - 1, rule.location.x - 1, 3, 3});
    rule.motif = crop(render_value_patch(out.gen, kPlantedMemoryLayer, rule.value, rule.location), rule.footprint);
    out.manifest.rules.push_back(std::move(rule));
  }
  return out;
}

void save_planted(const std::filesystem::path& path, const PlantedGenerator& p) {
  auto c = gtf::from_generator(p.gen);
  c.metadata["planted_manifest"] = p.manifest.to_json();
  gtf::write_file(path, c);
}

PlantedGenerator load_planted(const std::filesystem::path& path) {
  const auto c = gtf::read_file(path);
  if (!c.metadata.contains("planted_manifest")) throw FormatError(path.string() + " carries no planted manifest");
  return {gtf::to_generator(c), PlantedManifest::from_json(c.metadata["planted_manifest"])};
}

DiscoveryFixture build_discovery_fixture(std::uint64_t seed, int layer, int n_pairs) {
  if (n_pairs < 1) throw ValidationError("discovery fixture: need at least one pair");
  DiscoveryFixture f;
  f.gen = build_random_generator(seed);
  f.layer = layer;
  const AssocView view = as_assoc_view(f.gen.layer(layer));
  CounterRng rng(derive_seed(seed, 0xd15c));
  Vector u(view.rows()), v(view.cols());
  for (auto i = 0; i < u.size(); ++i) u(i) = rng.normal();
  for (auto i = 0; i < v.size(); ++i) v(i) = rng.normal();
  const double scale = view.matrix.norm() / std::sqrt(static_cast<double>(view.rows()));
  const Matrix w = view.matrix + scale * u.normalized() * v.normalized().transpose();
  f.changed = with_layer_weights(f.gen, layer, w);
  const int plane = f.gen.image_size() * f.gen.image_size();
  for (int i = 0; i < n_pairs; ++i) {
    const Latent z = latent_for_seed(1000 + static_cast<std::uint64_t>(i), f.gen.latent_dim);
    f.pairs.push_back({z, forward(f.changed, z), std::vector<std::uint8_t>(static_cast<std::size_t>(plane), 1)});
  }
  return f;
}

OptimConfig discovery_fixture_config() {
  OptimConfig cfg;
  cfg.learning_rate = 0.003;
  cfg.iterations = 301;
  return cfg;
}

void save_discovery_pairs(const std::filesystem::path& dir, const std::vector<DiscoveryPair>& pairs) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    gtf::Container c;
    c.kind = "discovery_pair";
    Tensor z({static_cast<int>(p.z.size())});
    z.data = p.z;
    Tensor mask({static_cast<int>(p.mask.size())});
    std::transform(p.mask.begin(), p.mask.end(), mask.data.begin(), [](std::uint8_t m) { return m ? 1.0f : 0.0f; });
    c.add("latent", z);
    c.add("target", p.target);
    c.add("mask", mask);
    char name[32];
    std::snprintf(name, sizeof name, "pair-%03zu.gtf", i);
    gtf::write_file(dir / name, c);
  }
}

std::vector<DiscoveryPair> load_discovery_pairs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("pairs directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".gtf") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no .gtf pair files in " + dir.string());
  std::vector<DiscoveryPair> pairs;
  for (const auto& path : files) {
    const auto c = gtf::read_file(path);
    if (c.kind != "discovery_pair") throw FormatError(path.string() + " is not a discovery pair");
    DiscoveryPair p;
    p.z = c.get("latent").data;
    p.target = c.get("target");
    for (float m : c.get("mask").data) p.mask.push_back(m != 0.0f ? 1 : 0);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace remem
