#include "gloria/synthdata.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gloria/errors.hpp"

namespace gloria {

const char* to_string(MixingStyle s) {
  switch (s) {
    case MixingStyle::dominant: return "dominant";
    case MixingStyle::bilinear: return "bilinear";
    case MixingStyle::quadrants: return "quadrants";
    case MixingStyle::identity: return "identity";
    case MixingStyle::ones: return "ones";
  }
  return "?";
}

MixingStyle parse_mixing(const std::string& name) {
  if (name == "dominant") return MixingStyle::dominant;
  if (name == "bilinear") return MixingStyle::bilinear;
  if (name == "quadrants") return MixingStyle::quadrants;
  if (name == "identity") return MixingStyle::identity;
  if (name == "ones") return MixingStyle::ones;
  throw InputError("unknown mixing style '" + name + "'");
}

WorldSpec extrapolation_preset() {
  WorldSpec s;
  s.regions = 16;
  s.k_true = 4;
  s.mixing = MixingStyle::quadrants;
  return s;
}

std::vector<Coord> grid_centers(std::size_t regions) {
  std::size_t cols = 1;
  while (cols * cols < regions) ++cols;
  const std::size_t rows = (regions + cols - 1) / cols;
  std::vector<Coord> centers;
  centers.reserve(regions);
  for (std::size_t r = 0; r < regions; ++r) {
    const double lng = (static_cast<double>(r % cols) + 0.5) / static_cast<double>(cols);
    const double lat = (static_cast<double>(r / cols) + 0.5) / static_cast<double>(rows);
    centers.push_back({lat, lng});
  }
  return centers;
}

namespace {

// k orthonormal vectors in R^dim by Gram-Schmidt over Gaussian draws.
std::vector<Vector> orthonormal_set(std::size_t k, std::size_t dim, Rng& rng) {
  std::vector<Vector> out;
  while (out.size() < k) {
    Vector v(dim);
    for (double& e : v) e = rng.normal();
    for (const Vector& prev : out) {
      const double p = dot(v, prev);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= p * prev[i];
    }
    const double n = norm2(v);
    if (n < 1e-8) continue;
    for (double& e : v) e /= n;
    out.push_back(std::move(v));
  }
  return out;
}

Matrix make_mixing(const WorldSpec& spec, const std::vector<Coord>& centers, Rng& rng) {
  Matrix m(spec.regions, spec.k_true);
  switch (spec.mixing) {
    case MixingStyle::dominant:
      for (std::size_t r = 0; r < spec.regions; ++r)
        for (std::size_t j = 0; j < spec.k_true; ++j)
          m(r, j) = (j == r % spec.k_true) ? 1.0 : rng.uniform(0.0, spec.offdiag_max);
      break;
    case MixingStyle::bilinear:
      if (spec.k_true != 4) throw InputError("bilinear mixing needs k_true = 4");
      for (std::size_t r = 0; r < spec.regions; ++r) {
        const double x = centers[r].lng;
        const double y = centers[r].lat;
        m(r, 0) = (1 - x) * (1 - y);
        m(r, 1) = x * (1 - y);
        m(r, 2) = (1 - x) * y;
        m(r, 3) = x * y;
      }
      break;
    case MixingStyle::quadrants: {
      if (spec.k_true != 4) throw InputError("quadrants mixing needs k_true = 4");
      for (std::size_t r = 0; r < spec.regions; ++r) {
        const std::size_t q = 2 * (centers[r].lat > 0.5) + (centers[r].lng > 0.5);
        for (std::size_t j = 0; j < 4; ++j) m(r, j) = (j == q) ? 1.0 : rng.uniform(0.0, spec.offdiag_max);
      }
      break;
    }
    case MixingStyle::identity:
      if (spec.k_true != spec.regions) throw InputError("identity mixing needs k_true = regions");
      for (std::size_t r = 0; r < spec.regions; ++r) m(r, r) = 1.0;
      break;
    case MixingStyle::ones:
      for (double& v : m.values()) v = 1.0;
      break;
  }
  return m;
}

void validate_spec(const WorldSpec& spec) {
  if (spec.regions < 2) throw InputError("world needs at least 2 regions");
  if (spec.k_true < 1) throw InputError("world needs k_true >= 1");
  if (spec.sites < 1 || spec.dim < 1) throw InputError("world needs sites >= 1 and dim >= 1");
  if (spec.k_true > spec.dim) throw InputError("k_true cannot exceed dim");
  if (spec.sigma_c < 0 || spec.sigma_y < 0 || spec.offdiag_max < 0) {
    throw InputError("world noise levels must be non-negative");
  }
}

}  // namespace

PlantedWorld gen_world(const WorldSpec& spec, std::uint64_t seed,
                       const std::optional<Matrix>& mixing_override) {
  validate_spec(spec);
  PlantedWorld w;
  w.spec = spec;
  w.seed = seed;
  Rng base_rng = Rng(seed).fork(1);
  Rng comp_rng = Rng(seed).fork(2);
  Rng mix_rng = Rng(seed).fork(3);
  for (std::size_t s = 0; s < spec.sites; ++s) {
    w.base_weights.push_back(xavier_uniform(spec.dim, spec.dim, base_rng));
    Vector b(spec.dim);
    for (double& v : b) v = base_rng.uniform(-0.1, 0.1);
    w.base_biases.push_back(std::move(b));
  }
  w.components.resize(spec.k_true);
  for (std::size_t s = 0; s < spec.sites; ++s) {
    const auto us = orthonormal_set(spec.k_true, spec.dim, comp_rng);
    const auto vs = orthonormal_set(spec.k_true, spec.dim, comp_rng);
    for (std::size_t j = 0; j < spec.k_true; ++j) {
      w.components[j].u.push_back(us[j]);
      w.components[j].v.push_back(vs[j]);
    }
  }
  w.centers = grid_centers(spec.regions);
  if (mixing_override) {
    if (mixing_override->rows() != spec.regions || mixing_override->cols() != spec.k_true) {
      throw InputError("mixing override must be regions x k_true, got " +
                       mixing_override->shape_str());
    }
    for (double v : mixing_override->values())
      if (!(v >= 0.0)) throw InputError("mixing weights must be non-negative");
    w.mixing = *mixing_override;
  } else {
    w.mixing = make_mixing(spec, w.centers, mix_rng);
  }
  return w;
}

ToyBackbone make_backbone(const PlantedWorld& w, std::size_t rank, std::size_t hidden, Rng& rng,
                          AdaptMode mode) {
  std::vector<GloriaSite> sites;
  for (std::size_t s = 0; s < w.base_weights.size(); ++s) {
    sites.push_back(make_site(w.base_weights[s], w.base_biases[s], rank, hidden, rng));
  }
  return ToyBackbone(std::move(sites), mode);
}

Matrix region_weight(const PlantedWorld& w, std::size_t region, std::size_t site) {
  if (region >= w.spec.regions) throw InputError("unknown region " + std::to_string(region));
  Matrix eff = w.base_weights.at(site);
  for (std::size_t j = 0; j < w.spec.k_true; ++j) {
    const double weight = w.spec.component_scale * w.mixing(region, j);
    if (weight == 0.0) continue;
    add_outer(eff, w.components[j].u[site], w.components[j].v[site], weight);
  }
  return eff;
}

namespace {

Vector chain(const std::vector<Matrix>& weights, const std::vector<Vector>& biases,
             std::span<const double> x) {
  Vector h(x.begin(), x.end());
  for (std::size_t s = 0; s < weights.size(); ++s) {
    Vector y = matvec(weights[s], h);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] += biases[s][i];
      if (s + 1 < weights.size()) y[i] = gelu(y[i]);
    }
    h = std::move(y);
  }
  return h;
}

}  // namespace

Vector region_forward(const PlantedWorld& w, std::size_t region, std::span<const double> x) {
  std::vector<Matrix> eff;
  for (std::size_t s = 0; s < w.spec.sites; ++s) eff.push_back(region_weight(w, region, s));
  return chain(eff, w.base_biases, x);
}

CoordBounds GeoDataset::bounds() const {
  CoordBounds b;
  if (samples.empty()) return b;
  b.lat_min = b.lat_max = samples.front().c.lat;
  b.lng_min = b.lng_max = samples.front().c.lng;
  for (const auto& s : samples) {
    b.lat_min = std::min(b.lat_min, s.c.lat);
    b.lat_max = std::max(b.lat_max, s.c.lat);
    b.lng_min = std::min(b.lng_min, s.c.lng);
    b.lng_max = std::max(b.lng_max, s.c.lng);
  }
  return b;
}

std::vector<std::size_t> GeoDataset::region_counts() const {
  std::vector<std::size_t> counts(region_count, 0);
  for (const auto& s : samples) ++counts.at(s.region);
  return counts;
}

Location sample_location(const PlantedWorld& w, Rng& rng) {
  Location loc;
  loc.region = rng.below(w.spec.regions);
  const Coord& center = w.centers[loc.region];
  const double jlat = w.spec.sigma_c * rng.normal();
  const double jlng = w.spec.sigma_c * rng.normal();
  loc.c.lat = std::clamp(center.lat + jlat, 0.0, 1.0);
  loc.c.lng = std::clamp(center.lng + jlng, 0.0, 1.0);
  return loc;
}

GeoDataset sample_dataset(const PlantedWorld& w, std::size_t n, Rng& rng) {
  if (n == 0) throw InputError("sample_dataset: n must be >= 1");
  std::vector<std::vector<Matrix>> eff(w.spec.regions);
  for (std::size_t r = 0; r < w.spec.regions; ++r)
    for (std::size_t s = 0; s < w.spec.sites; ++s) eff[r].push_back(region_weight(w, r, s));

  GeoDataset data;
  data.region_count = w.spec.regions;
  data.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    const Location loc = sample_location(w, rng);
    s.region = loc.region;
    s.c = loc.c;
    s.x.resize(w.spec.dim);
    for (double& v : s.x) v = rng.normal();
    s.y = chain(eff[s.region], w.base_biases, s.x);
    if (w.spec.sigma_y > 0) {
      for (double& v : s.y) v += w.spec.sigma_y * rng.normal();
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

Splits split(const GeoDataset& data, const SplitSpec& spec, Rng& rng) {
  if (spec.holdout_region && *spec.holdout_region >= data.region_count) {
    throw InputError("split: unknown holdout region " + std::to_string(*spec.holdout_region));
  }
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);

  Splits out;
  out.train.region_count = out.val.region_count = out.test.region_count = data.region_count;
  std::vector<std::size_t> pool;
  for (std::size_t i : idx) {
    if (spec.holdout_region && data.samples[i].region == *spec.holdout_region) {
      out.test.samples.push_back(data.samples[i]);
    } else {
      pool.push_back(i);
    }
  }
  const std::size_t n = pool.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  if (n_train == 0 || n_val == 0 || n - n_train - n_val == 0) {
    throw InputError("split: " + std::to_string(n) + " samples are too few for 80/10/10");
  }
  for (std::size_t k = 0; k < n; ++k) {
    const Sample& s = data.samples[pool[k]];
    if (k < n_train) {
      out.train.samples.push_back(s);
    } else if (k < n_train + n_val) {
      out.val.samples.push_back(s);
    } else {
      out.test.samples.push_back(s);
    }
  }
  return out;
}

KeyValues world_spec_to_kv(const WorldSpec& spec) {
  KeyValues kv;
  kv["regions"] = std::to_string(spec.regions);
  kv["k_true"] = std::to_string(spec.k_true);
  kv["sites"] = std::to_string(spec.sites);
  kv["dim"] = std::to_string(spec.dim);
  kv["mixing"] = to_string(spec.mixing);
  kv["offdiag_max"] = fmt_full(spec.offdiag_max);
  kv["component_scale"] = fmt_full(spec.component_scale);
  kv["sigma_c"] = fmt_full(spec.sigma_c);
  kv["sigma_y"] = fmt_full(spec.sigma_y);
  return kv;
}

WorldSpec world_spec_from_kv(const KeyValues& kv) {
  WorldSpec s;
  s.regions = static_cast<std::size_t>(kv_int(kv, "regions"));
  s.k_true = static_cast<std::size_t>(kv_int(kv, "k_true"));
  s.sites = static_cast<std::size_t>(kv_int(kv, "sites"));
  s.dim = static_cast<std::size_t>(kv_int(kv, "dim"));
  s.mixing = parse_mixing(kv_require(kv, "mixing"));
  s.offdiag_max = kv_real(kv, "offdiag_max");
  s.component_scale = kv_real(kv, "component_scale");
  s.sigma_c = kv_real(kv, "sigma_c");
  s.sigma_y = kv_real(kv, "sigma_y");
  return s;
}

void save_dataset(const std::filesystem::path& dir, const GeoDataset& data, const WorldSpec& spec,
                  std::uint64_t world_seed, std::uint64_t sample_seed) {
  std::filesystem::create_directories(dir);
  const std::size_t d = data.empty() ? spec.dim : data.samples.front().x.size();
  {
    std::ofstream os(dir / "dataset.csv");
    if (!os) throw InputError("cannot write " + (dir / "dataset.csv").string());
    os << "lat,lng,region";
    for (std::size_t i = 0; i < d; ++i) os << ",x" << i;
    for (std::size_t i = 0; i < d; ++i) os << ",y" << i;
    os << '\n';
    for (const auto& s : data.samples) {
      os << fmt_full(s.c.lat) << ',' << fmt_full(s.c.lng) << ',' << s.region;
      for (double v : s.x) os << ',' << fmt_full(v);
      for (double v : s.y) os << ',' << fmt_full(v);
      os << '\n';
    }
  }
  KeyValues kv = world_spec_to_kv(spec);
  kv["world_seed"] = std::to_string(world_seed);
  kv["sample_seed"] = std::to_string(sample_seed);
  kv["n"] = std::to_string(data.size());
  kv["region_count"] = std::to_string(data.region_count);
  write_kv(dir / "manifest.txt", kv);
}

GeoDataset load_dataset_csv(const std::filesystem::path& csv, std::size_t region_count) {
  std::ifstream is(csv);
  if (!is) throw InputError("cannot read " + csv.string());
  std::string line;
  if (!std::getline(is, line)) throw InputError(csv.string() + ": empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) header.push_back(tok);
  }
  if (header.size() < 5 || header[0] != "lat" || header[1] != "lng" || header[2] != "region" ||
      (header.size() - 3) % 2 != 0) {
    throw InputError(csv.string() + ": header must be lat,lng,region,x0..,y0..");
  }
  const std::size_t d = (header.size() - 3) / 2;
  for (std::size_t i = 0; i < d; ++i) {
    if (header[3 + i] != "x" + std::to_string(i) || header[3 + d + i] != "y" + std::to_string(i)) {
      throw InputError(csv.string() + ": unexpected column names");
    }
  }
  GeoDataset data;
  data.region_count = region_count;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != header.size()) {
      throw InputError(csv.string() + ":" + std::to_string(lineno) + ": wrong field count");
    }
    Sample s;
    s.c.lat = parse_real(f[0]);
    s.c.lng = parse_real(f[1]);
    const long long region = std::stoll(f[2]);
    if (region < 0 || static_cast<std::size_t>(region) >= region_count) {
      throw InputError(csv.string() + ":" + std::to_string(lineno) + ": region out of range");
    }
    s.region = static_cast<std::size_t>(region);
    s.x.resize(d);
    s.y.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
      s.x[i] = parse_real(f[3 + i]);
      s.y[i] = parse_real(f[3 + d + i]);
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

DatasetBundle load_dataset(const std::filesystem::path& dir) {
  const KeyValues kv = read_kv(dir / "manifest.txt");
  DatasetBundle b;
  b.spec = world_spec_from_kv(kv);
  b.world_seed = static_cast<std::uint64_t>(kv_int(kv, "world_seed"));
  b.sample_seed = static_cast<std::uint64_t>(kv_int(kv, "sample_seed"));
  b.data = load_dataset_csv(dir / "dataset.csv",
                            static_cast<std::size_t>(kv_int(kv, "region_count")));
  if (static_cast<long long>(b.data.size()) != kv_int(kv, "n")) {
    throw InputError(dir.string() + ": sample count disagrees with manifest");
  }
  return b;
}

}  // namespace gloria
