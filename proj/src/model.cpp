#include "gloria/model.hpp"

#include <algorithm>
#include <cstdio>

#include "gloria/errors.hpp"
#include "gloria/kvfile.hpp"

namespace gloria {

namespace {

bool same_site(const GloriaSite& a, const GloriaSite& b) {
  return a.weight == b.weight && a.bias == b.bias && a.pair.a == b.pair.a &&
         a.pair.b == b.pair.b && a.gate.w1 == b.gate.w1 && a.gate.b1 == b.gate.b1 &&
         a.gate.w2 == b.gate.w2 && a.gate.b2 == b.gate.b2;
}

std::string site_key(std::size_t i, const char* tensor) {
  return "site" + std::to_string(i) + "." + tensor;
}

std::string site_dirname(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "site_%03zu", i);
  return buf;
}

bool adapted(AdaptMode m) { return m == AdaptMode::lora || m == AdaptMode::gloria; }

}  // namespace

ToyBackbone::ToyBackbone(std::vector<GloriaSite> sites, AdaptMode mode)
    : sites_(std::move(sites)), mode_(mode) {
  if (sites_.empty()) throw DimensionError("backbone needs at least one site");
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    sites_[i].validate();
    if (i + 1 < sites_.size() && sites_[i].d_out() != sites_[i + 1].d_in()) {
      throw DimensionError("backbone: site " + std::to_string(i) + " d_out " +
                           std::to_string(sites_[i].d_out()) + " != site " +
                           std::to_string(i + 1) + " d_in " +
                           std::to_string(sites_[i + 1].d_in()));
    }
  }
}

ToyBackbone ToyBackbone::random(const BackboneShape& shape, Rng& rng, AdaptMode mode) {
  std::vector<GloriaSite> sites;
  sites.reserve(shape.sites);
  for (std::size_t i = 0; i < shape.sites; ++i) {
    Matrix w = xavier_uniform(shape.dim, shape.dim, rng);
    sites.push_back(make_site(std::move(w), Vector(shape.dim, 0.0), shape.rank, shape.hidden, rng));
  }
  return ToyBackbone(std::move(sites), mode);
}

std::size_t ToyBackbone::input_dim() const { return sites_.empty() ? 0 : sites_.front().d_in(); }
std::size_t ToyBackbone::output_dim() const { return sites_.empty() ? 0 : sites_.back().d_out(); }

GloriaSite& ToyBackbone::mutable_site(std::size_t i) {
  touch();
  return sites_.at(i);
}

bool ToyBackbone::operator==(const ToyBackbone& other) const {
  if (sites_.size() != other.sites_.size() || !(bounds_ == other.bounds_)) return false;
  for (std::size_t i = 0; i < sites_.size(); ++i)
    if (!same_site(sites_[i], other.sites_[i])) return false;
  return true;
}

Vector backbone_forward(const ToyBackbone& m, std::span<const double> x, Coord raw,
                        ForwardCache* cache) {
  if (x.size() != m.input_dim()) {
    throw DimensionError("backbone_forward: input length " + std::to_string(x.size()) +
                         " != " + std::to_string(m.input_dim()));
  }
  const Coord c = m.coord_bounds().scale(raw);
  const std::size_t n = m.site_count();
  if (cache) {
    cache->generation = m.generation();
    cache->mode = m.mode();
    cache->sites.assign(n, SiteCache{});
  }
  Vector h(x.begin(), x.end());
  for (std::size_t s = 0; s < n; ++s) {
    Vector y = site_forward(m.site(s), m.mode(), h, c, cache ? &cache->sites[s] : nullptr);
    if (s + 1 < n) {
      for (double& v : y) v = gelu(v);
    }
    h = std::move(y);
  }
  if (cache) cache->prediction = h;
  return h;
}

double task_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw DimensionError("task_loss: length mismatch " + std::to_string(pred.size()) + " vs " +
                         std::to_string(target.size()));
  }
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

std::vector<Vector> cached_gammas(const ForwardCache& cache) {
  std::vector<Vector> out;
  if (cache.mode != AdaptMode::gloria) return out;
  for (const auto& sc : cache.sites) out.push_back(sc.gate.gamma);
  return out;
}

double orth_loss_sum(const ToyBackbone& m) {
  double s = 0.0;
  for (const auto& site : m.sites()) s += orth_loss(site.pair);
  return s;
}

double orth_residual_sum(const ToyBackbone& m) {
  double s = 0.0;
  for (const auto& site : m.sites()) s += orth_residual_a(site.pair);
  return s;
}

double total_loss(double task, const ToyBackbone& m, const std::vector<Vector>& gammas,
                  double lambda_orth, double lambda_sp) {
  if (lambda_orth < 0.0 || lambda_sp < 0.0) throw DomainError("total_loss: negative lambda");
  if (m.mode() != AdaptMode::gloria) return task;
  double loss = task;
  if (lambda_orth != 0.0) loss += lambda_orth * orth_loss_sum(m);
  if (lambda_sp != 0.0 && !gammas.empty()) {
    double sp = 0.0;
    for (const auto& g : gammas) sp += sparsity_loss(g);
    loss += lambda_sp * sp / static_cast<double>(gammas.size());
  }
  return loss;
}

std::vector<std::string> trainable_names(const ToyBackbone& m) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < m.site_count(); ++i) {
    switch (m.mode()) {
      case AdaptMode::frozen: break;
      case AdaptMode::full: names.push_back(site_key(i, "weight")); break;
      case AdaptMode::lora:
        names.push_back(site_key(i, "a"));
        names.push_back(site_key(i, "b"));
        break;
      case AdaptMode::gloria:
        names.push_back(site_key(i, "a"));
        names.push_back(site_key(i, "b"));
        names.push_back(site_key(i, "gate.w1"));
        names.push_back(site_key(i, "gate.b1"));
        names.push_back(site_key(i, "gate.w2"));
        names.push_back(site_key(i, "gate.b2"));
        break;
    }
  }
  return names;
}

std::vector<ParamRef> trainable_params(ToyBackbone& m) {
  std::vector<ParamRef> refs;
  const AdaptMode mode = m.mode();
  for (std::size_t i = 0; i < m.site_count(); ++i) {
    GloriaSite& s = m.mutable_site(i);
    switch (mode) {
      case AdaptMode::frozen: break;
      case AdaptMode::full: refs.push_back({site_key(i, "weight"), s.weight.values()}); break;
      case AdaptMode::lora:
        refs.push_back({site_key(i, "a"), s.pair.a.values()});
        refs.push_back({site_key(i, "b"), s.pair.b.values()});
        break;
      case AdaptMode::gloria:
        refs.push_back({site_key(i, "a"), s.pair.a.values()});
        refs.push_back({site_key(i, "b"), s.pair.b.values()});
        refs.push_back({site_key(i, "gate.w1"), s.gate.w1.values()});
        refs.push_back({site_key(i, "gate.b1"), s.gate.b1});
        refs.push_back({site_key(i, "gate.w2"), s.gate.w2.values()});
        refs.push_back({site_key(i, "gate.b2"), s.gate.b2});
        break;
    }
  }
  return refs;
}

namespace {

Vector flat(const Matrix& m) { return Vector(m.values().begin(), m.values().end()); }

}  // namespace

GradSet backbone_backward(const ToyBackbone& m, const ForwardCache& cache,
                          std::span<const double> target, LossWeights w) {
  if (cache.generation != m.generation() || cache.mode != m.mode() ||
      cache.sites.size() != m.site_count()) {
    throw ConsistencyError("backbone_backward: forward cache is stale");
  }
  const Vector& pred = cache.prediction;
  if (pred.size() != target.size()) {
    throw DimensionError("backbone_backward: target length " + std::to_string(target.size()) +
                         " != " + std::to_string(pred.size()));
  }
  GradSet grads;
  if (m.mode() == AdaptMode::frozen) return grads;

  const std::size_t n = m.site_count();
  const bool gloria = m.mode() == AdaptMode::gloria;
  RegWeights reg;
  if (gloria) {
    reg.orth = w.include_orth ? w.orth : 0.0;
    reg.sp = w.sp / static_cast<double>(n);
  }

  Vector g(pred.size());
  const double scale = 2.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) g[i] = scale * (pred[i] - target[i]);

  for (std::size_t s = n; s-- > 0;) {
    const SiteCache& sc = cache.sites[s];
    if (s + 1 < n) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= gelu_grad(sc.y[i]);
    }
    SiteGrads sg = site_backward(m.site(s), g, sc, reg);
    if (m.mode() == AdaptMode::full) {
      grads[site_key(s, "weight")] = flat(sg.weight);
    } else if (adapted(m.mode())) {
      grads[site_key(s, "a")] = flat(sg.a);
      grads[site_key(s, "b")] = flat(sg.b);
      if (gloria) {
        grads[site_key(s, "gate.w1")] = flat(sg.gate.w1);
        grads[site_key(s, "gate.b1")] = std::move(sg.gate.b1);
        grads[site_key(s, "gate.w2")] = flat(sg.gate.w2);
        grads[site_key(s, "gate.b2")] = std::move(sg.gate.b2);
      }
    }
    g = std::move(sg.x);
  }
  return grads;
}

void add_orth_gradient(const ToyBackbone& m, double scale, GradSet& grads) {
  if (m.mode() != AdaptMode::gloria || scale == 0.0) return;
  for (std::size_t s = 0; s < m.site_count(); ++s) {
    const OrthGrads og = orth_loss_grad(m.site(s).pair);
    Vector& ga = grads[site_key(s, "a")];
    Vector& gb = grads[site_key(s, "b")];
    ga.resize(og.a.size(), 0.0);
    gb.resize(og.b.size(), 0.0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += scale * og.a.values()[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += scale * og.b.values()[i];
  }
}

void save_backbone(const std::filesystem::path& dir, const ToyBackbone& m) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < m.site_count(); ++i) {
    save_site(dir / site_dirname(i), m.site(i), m.coord_bounds());
  }
  const CoordBounds& b = m.coord_bounds();
  KeyValues kv;
  kv["sites"] = std::to_string(m.site_count());
  kv["activation"] = "gelu";
  kv["lat_min"] = fmt_full(b.lat_min);
  kv["lat_max"] = fmt_full(b.lat_max);
  kv["lng_min"] = fmt_full(b.lng_min);
  kv["lng_max"] = fmt_full(b.lng_max);
  write_kv(dir / "manifest.txt", kv);
}

ToyBackbone load_backbone(const std::filesystem::path& dir, AdaptMode mode) {
  const KeyValues kv = read_kv(dir / "manifest.txt");
  const long long n = kv_int(kv, "sites");
  if (n < 1) throw InputError(dir.string() + ": manifest needs sites >= 1");
  if (kv_require(kv, "activation") != "gelu") {
    throw InputError(dir.string() + ": unsupported activation " + kv.at("activation"));
  }
  std::vector<GloriaSite> sites;
  for (long long i = 0; i < n; ++i) sites.push_back(load_site(dir / site_dirname(i)));
  ToyBackbone m;
  try {
    m = ToyBackbone(std::move(sites), mode);
  } catch (const DimensionError& e) {
    throw InputError(dir.string() + ": " + e.what());
  }
  m.set_coord_bounds({kv_real(kv, "lat_min"), kv_real(kv, "lat_max"), kv_real(kv, "lng_min"),
                      kv_real(kv, "lng_max")});
  return m;
}

}  // namespace gloria

namespace gloria {

GradCheck gradient_check(const ToyBackbone& m0, std::span<const double> x, Coord raw,
                         std::span<const double> target, LossWeights w, double h) {
  if (!w.include_orth) throw InputError("gradient_check: the orth term must be included");
  ToyBackbone m = m0;
  ForwardCache cache;
  backbone_forward(m, x, raw, &cache);
  const GradSet analytic = backbone_backward(m, cache, target, w);

  auto loss = [&]() {
    ForwardCache c;
    const Vector pred = backbone_forward(m, x, raw, &c);
    return total_loss(task_loss(pred, target), m, cached_gammas(c), w.orth, w.sp);
  };

  GradCheck out;
  const std::vector<std::string> names = trainable_names(m);
  for (std::size_t t = 0; t < names.size(); ++t) {
    const std::span<double> values = trainable_params(m)[t].values;
    const Vector original(values.begin(), values.end());
    const ScalarFn f = [&](std::span<const double> v) {
      std::copy(v.begin(), v.end(), values.begin());
      m.touch();
      return loss();
    };
    const Vector numeric = central_diff(f, original, h);
    std::copy(original.begin(), original.end(), values.begin());
    m.touch();
    const double err = relative_error(analytic.at(names[t]), numeric);
    out.rel_error[names[t]] = err;
    out.max_rel_error = std::max(out.max_rel_error, err);
  }
  return out;
}

}  // namespace gloria
