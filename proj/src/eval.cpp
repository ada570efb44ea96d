#include "remem/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "remem/error.hpp"
#include "remem/linalg.hpp"
#include "remem/rng.hpp"

namespace remem {

namespace {

constexpr double kShrinkage = 1e-3;

// Layer-cell box of a kernel patch centred at loc, clipped to the grid.
Box patch_box(const Generator& gen, int layer, Location loc) {
  const auto& spec = gen.layer(layer);
  const int res = gen.resolution(layer);
  const int y0 = std::max(0, loc.y - spec.kh() / 2), x0 = std::max(0, loc.x - spec.kw() / 2);
  const int y1 = std::min(res, loc.y + spec.kh() / 2 + 1), x1 = std::min(res, loc.x + spec.kw() / 2 + 1);
  return {y0, x0, y1 - y0, x1 - x0};
}

void gaussian_fit(const std::vector<Vector>& samples, Vector& mu, Matrix& cov) {
  const auto d = samples.front().size();
  const double n = static_cast<double>(samples.size());
  mu = Vector::Zero(d);
  for (const auto& s : samples) mu += s;
  mu /= n;
  cov = Matrix::Zero(d, d);
  for (const auto& s : samples) {
    const Vector c = s - mu;
    cov.selfadjointView<Eigen::Lower>().rankUpdate(c);
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= std::max(1.0, n - 1.0);
  cov.diagonal().array() += kShrinkage;
}

Vector flatten(const Tensor& t) {
  Vector v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) v(static_cast<Eigen::Index>(i)) = t.data[i];
  return v;
}

}  // namespace

int default_crop_size(const Generator& gen, int layer) {
  const int res = gen.resolution(layer);
  const int loc = std::min(res - 1, gen.layer(layer).kh() / 2);
  const Box cells = patch_box(gen, layer, {loc, loc});
  return image_cells(gen, layer, cells).h;
}

double patch_independence_score(const Generator& gen, int layer, const std::vector<std::uint64_t>& seeds,
                                int crop_size) {
  if (seeds.size() < 2) throw ValidationError("patch_independence_score: need at least 2 samples");
  const int image = gen.image_size();
  const int res = gen.resolution(layer);
  const int crop_px = crop_size > 0 ? crop_size : default_crop_size(gen, layer);
  if (crop_px > image) {
    throw ValidationError("patch_independence_score: crop " + std::to_string(crop_px) + " larger than image " +
                          std::to_string(image));
  }
  const auto& spec = gen.layer(layer);
  const int ry = spec.kh() / 2, rx = spec.kw() / 2;
  std::vector<Vector> isolated, full;
  for (auto s : seeds) {
    CounterRng rng(derive_seed(s, 0x150));
    const Latent z = latent_for_seed(s, gen.latent_dim);
    const auto f = features(gen, z, layer);
    // Patch location with the whole kernel patch inside the grid when possible.
    const int lo_y = res > 2 * ry ? ry : 0, hi_y = res > 2 * ry ? res - 1 - ry : 0;
    const int lo_x = res > 2 * rx ? rx : 0, hi_x = res > 2 * rx ? res - 1 - rx : 0;
    const Location loc{lo_y + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(hi_y - lo_y + 1)),
                       lo_x + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(hi_x - lo_x + 1))};
    const Tensor iso = render_isolated_patch(gen, f.values, loc, layer);
    const Box px = image_cells(gen, layer, patch_box(gen, layer, loc));
    // Centre the crop on the patch, kept inside the image.
    const int cy = std::clamp(px.y0 + px.h / 2 - crop_px / 2, 0, image - crop_px);
    const int cx = std::clamp(px.x0 + px.w / 2 - crop_px / 2, 0, image - crop_px);
    isolated.push_back(flatten(crop(iso, {cy, cx, crop_px, crop_px})));
    const Tensor whole = continue_from(gen, f.values.data, layer);
    const int fy = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(image - crop_px + 1));
    const int fx = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(image - crop_px + 1));
    full.push_back(flatten(crop(whole, {fy, fx, crop_px, crop_px})));
  }
  Vector mu1, mu2;
  Matrix c1, c2;
  gaussian_fit(isolated, mu1, c1);
  gaussian_fit(full, mu2, c2);
  return linalg::frechet_gaussian(mu1, c1, mu2, c2);
}

double patch_independence_score(const Generator& gen, int layer, int n_samples, std::uint64_t seed, int crop_size) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n_samples; ++i) seeds.push_back(seed + static_cast<std::uint64_t>(i));
  return patch_independence_score(gen, layer, seeds, crop_size);
}

std::vector<int> LayerReport::recommended() const {
  std::vector<int> out;
  for (const auto& l : layers)
    if (l.recommended) out.push_back(l.layer);
  return out;
}

nlohmann::json LayerReport::to_json() const {
  nlohmann::json ls = nlohmann::json::array();
  for (const auto& l : layers) ls.push_back({{"layer", l.layer}, {"score", l.score}, {"recommended", l.recommended}});
  return {{"layers", ls}, {"n_samples", n_samples}, {"seed", seed}, {"median", median}, {"recommended", recommended()}};
}

std::string LayerReport::to_text() const {
  std::ostringstream os;
  os << "layer  patch-independence  recommended\n";
  for (const auto& l : layers) {
    os << std::setw(5) << l.layer << "  " << std::setw(18) << std::setprecision(6) << l.score << "  "
       << (l.recommended ? "yes" : "no") << "\n";
  }
  os << "samples " << n_samples << ", seed " << seed << ", median " << std::setprecision(6) << median << "\n";
  return os.str();
}

LayerReport layer_selection_report(const Generator& gen, int n_samples, std::uint64_t seed, int crop_size) {
  LayerReport r;
  r.n_samples = n_samples;
  r.seed = seed;
  std::vector<double> scores;
  for (int l = 1; l <= gen.layer_count(); ++l) {
    const double s = patch_independence_score(gen, l, n_samples, seed, crop_size);
    r.layers.push_back({l, s, false});
    scores.push_back(s);
  }
  std::sort(scores.begin(), scores.end());
  const std::size_t n = scores.size();
  r.median = n % 2 ? scores[n / 2] : 0.5 * (scores[n / 2 - 1] + scores[n / 2]);
  for (auto& l : r.layers) l.recommended = l.score <= r.median;
  return r;
}

nlohmann::json MaskedChange::to_json() const { return {{"mean", mean}, {"max", max}, {"per_image", per_image}}; }

MaskedChange masked_change(const std::vector<Tensor>& before, const std::vector<Tensor>& after,
                           const std::vector<std::vector<std::uint8_t>>& masks) {
  if (before.size() != after.size() || before.size() != masks.size()) {
    throw ValidationError("masked_change: before, after and masks must have the same count");
  }
  if (before.empty()) throw ValidationError("masked_change: no images");
  MaskedChange out;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const Tensor& a = before[i];
    const Tensor& b = after[i];
    if (!a.same_shape(b) || a.rank() != 3) throw ValidationError("masked_change: image shapes differ");
    const int plane = a.dim(1) * a.dim(2);
    if (static_cast<int>(masks[i].size()) != plane) throw ValidationError("masked_change: mask size mismatch");
    double total = 0.0;
    int count = 0;
    for (int p = 0; p < plane; ++p) {
      if (masks[i][static_cast<std::size_t>(p)]) continue;
      double sq = 0.0;
      for (int c = 0; c < a.dim(0); ++c) {
        const double d = static_cast<double>(b.data[static_cast<std::size_t>(c) * plane + p]) -
                         a.data[static_cast<std::size_t>(c) * plane + p];
        sq += d * d;
      }
      total += std::sqrt(sq);
      ++count;
    }
    if (count == 0) throw ValidationError("masked_change: mask " + std::to_string(i) + " covers the whole image");
    out.per_image.push_back(total / count);
  }
  double sum = 0.0;
  for (double v : out.per_image) {
    sum += v;
    out.max = std::max(out.max, v);
  }
  out.mean = sum / static_cast<double>(out.per_image.size());
  return out;
}

std::vector<std::uint8_t> occurrence_mask(const Generator& gen, int layer, const Latent& z, const Vector& key) {
  const auto f = features(gen, z, layer);
  const int image = gen.image_size();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(image) * image, 0);
  const auto& spec = gen.layer(layer);
  for (const auto& loc : find_key_occurrences(f.keys.data, key)) {
    const Box px = image_footprint(gen, layer, {loc.y - spec.kh() / 2, loc.x - spec.kw() / 2, spec.kh(), spec.kw()});
    for (int y = px.y0; y < px.y1(); ++y)
      for (int x = px.x0; x < px.x1(); ++x) mask[static_cast<std::size_t>(y) * image + x] = 1;
  }
  return mask;
}

nlohmann::json Efficacy::to_json() const {
  return {{"fraction", fraction}, {"changed", changed}, {"locations", locations}};
}

Efficacy efficacy_planted_rule(const Generator& gen_before, const Generator& gen_after,
                               const PlantedManifest& manifest, int rule, const Vector& v_new,
                               std::uint64_t first_seed, int n) {
  if (rule < 0 || rule >= static_cast<int>(manifest.rules.size())) {
    throw ValidationError("efficacy: rule " + std::to_string(rule) + " not in manifest");
  }
  const int layer = manifest.memory_layer;
  const auto& spec = gen_before.layer(layer);
  const auto& r = manifest.rules[static_cast<std::size_t>(rule)];
  if (v_new.size() != r.value.size()) throw ValidationError("efficacy: new value has wrong length");
  const AssocView w0 = as_assoc_view(spec);
  const int ry = spec.kh() / 2, rx = spec.kw() / 2;
  Efficacy out;
  for (int i = 0; i < n; ++i) {
    const Latent z = latent_for_seed(first_seed + static_cast<std::uint64_t>(i), gen_before.latent_dim);
    const auto f = features(gen_before, z, layer);
    const auto locs = find_key_occurrences(f.keys.data, r.key);
    if (locs.empty()) continue;
    const Tensor old_image = continue_from(gen_before, f.values.data, layer);
    const Tensor new_image = forward(gen_after, z);
    const Tensor pre = kernels::conv2d(f.keys.data, spec.weight, spec.bias);
    for (const auto& loc : locs) {
      // Reference with this occurrence's stored value swapped for v_new.
      const Vector delta = v_new - w0.matrix * key_at(f.keys, loc);
      Tensor v_map = pre;
      for (int o = 0; o < spec.out_channels(); ++o)
        for (int py = 0; py < spec.kh(); ++py)
          for (int px = 0; px < spec.kw(); ++px) {
            const int y = loc.y + py - ry, x = loc.x + px - rx;
            if (y < 0 || y >= v_map.dim(1) || x < 0 || x >= v_map.dim(2)) continue;
            v_map.at(o, y, x) += static_cast<float>(delta(w0.row(o, py, px)));
          }
      kernels::activate_inplace(v_map, spec.act);
      const Tensor target_image = continue_from(gen_before, v_map, layer);
      const Box box = image_footprint(gen_before, layer, {loc.y - ry, loc.x - rx, spec.kh(), spec.kw()});
      const Tensor after = crop(new_image, box), old_ref = crop(old_image, box), new_ref = crop(target_image, box);
      double d_new = 0.0, d_old = 0.0;
      for (std::size_t k = 0; k < after.size(); ++k) {
        d_new += std::pow(static_cast<double>(after.data[k]) - new_ref.data[k], 2);
        d_old += std::pow(static_cast<double>(after.data[k]) - old_ref.data[k], 2);
      }
      ++out.locations;
      if (d_new < d_old) ++out.changed;
    }
  }
  if (out.locations == 0) throw ValidationError("efficacy: rule " + std::to_string(rule) + " never occurs in the sampled latents");
  out.fraction = static_cast<double>(out.changed) / out.locations;
  return out;
}

}  // namespace remem
