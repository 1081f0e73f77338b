#include "gloria/adapter.hpp"

#include <algorithm>

#include "gloria/errors.hpp"
#include "gloria/kvfile.hpp"

namespace gloria {

const char* to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::frozen: return "frozen";
    case AdaptMode::lora: return "lora";
    case AdaptMode::gloria: return "gloria";
    case AdaptMode::full: return "full";
  }
  return "?";
}

AdaptMode parse_mode(const std::string& name) {
  if (name == "frozen") return AdaptMode::frozen;
  if (name == "lora") return AdaptMode::lora;
  if (name == "gloria") return AdaptMode::gloria;
  if (name == "full") return AdaptMode::full;
  throw InputError("unknown mode '" + name + "' (expected frozen|lora|gloria|full)");
}

Coord CoordBounds::scale(Coord raw) const {
  auto axis = [](double v, double lo, double hi) {
    if (!(hi > lo)) return 0.0;
    return std::clamp(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0);
  };
  return {axis(raw.lat, lat_min, lat_max), axis(raw.lng, lng_min, lng_max)};
}

GateMlp make_gate(std::size_t rank, std::size_t hidden, Rng& rng) {
  if (rank == 0 || hidden == 0) throw DimensionError("make_gate: rank and hidden must be >= 1");
  GateMlp g;
  g.w1 = xavier_uniform(hidden, 2, rng);
  g.b1.assign(hidden, 0.0);
  g.w2 = Matrix(rank, hidden);
  g.b2.assign(rank, 0.0);
  return g;
}

GateCache gate_forward_cached(const GateMlp& gate, Coord c) {
  GateCache cache;
  cache.input = c;
  const double in[2] = {c.lat, c.lng};
  cache.hidden_pre = matvec(gate.w1, in);
  for (std::size_t i = 0; i < cache.hidden_pre.size(); ++i) cache.hidden_pre[i] += gate.b1[i];
  cache.hidden.resize(cache.hidden_pre.size());
  std::transform(cache.hidden_pre.begin(), cache.hidden_pre.end(), cache.hidden.begin(), gelu);
  cache.out_pre = matvec(gate.w2, cache.hidden);
  for (std::size_t i = 0; i < cache.out_pre.size(); ++i) cache.out_pre[i] += gate.b2[i];
  cache.gamma.resize(cache.out_pre.size());
  std::transform(cache.out_pre.begin(), cache.out_pre.end(), cache.gamma.begin(), softplus);
  return cache;
}

Vector gate_forward(const GateMlp& gate, Coord c) { return gate_forward_cached(gate, c).gamma; }

void GloriaSite::validate() const {
  const std::size_t r = pair.a.cols();
  auto fail = [&](const std::string& what) {
    throw DimensionError("site: " + what + " (W " + weight.shape_str() + ", A " +
                         pair.a.shape_str() + ", B " + pair.b.shape_str() + ")");
  };
  if (bias.size() != d_out()) fail("bias length " + std::to_string(bias.size()));
  if (pair.a.rows() != d_out()) fail("A rows must equal d_out");
  if (pair.b.rows() != r || pair.b.cols() != d_in()) fail("B must be r x d_in");
  if (r == 0 || r > std::min(d_in(), d_out())) fail("rank must be in [1, min(d_in, d_out)]");
  if (gate.w1.cols() != 2 || gate.b1.size() != gate.w1.rows()) fail("gate hidden layer shape");
  if (gate.w2.rows() != r || gate.w2.cols() != gate.w1.rows() || gate.b2.size() != r) {
    fail("gate output layer must be r x hidden");
  }
}

GloriaSite make_site(Matrix weight, Vector bias, std::size_t rank, std::size_t hidden, Rng& rng) {
  GloriaSite site;
  const std::size_t d_out = weight.rows();
  const std::size_t d_in = weight.cols();
  site.weight = std::move(weight);
  site.bias = std::move(bias);
  if (rank == 0 || rank > std::min(d_in, d_out)) {
    throw DimensionError("make_site: rank " + std::to_string(rank) + " not in [1, " +
                         std::to_string(std::min(d_in, d_out)) + "]");
  }
  site.pair.a = xavier_uniform(d_out, rank, rng);
  site.pair.b = xavier_uniform(rank, d_in, rng);
  site.gate = make_gate(rank, hidden, rng);
  site.validate();
  return site;
}

Vector base_forward(const GloriaSite& site, std::span<const double> x) {
  Vector y = matvec(site.weight, x);
  if (site.bias.size() != y.size()) throw DimensionError("base_forward: bias length mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += site.bias[i];
  return y;
}

Vector lora_forward(const GloriaSite& site, std::span<const double> x) {
  Vector y = base_forward(site, x);
  const Vector bx = matvec(site.pair.b, x);
  const Vector update = matvec(site.pair.a, bx);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += update[i];
  return y;
}

Vector gloria_forward(const GloriaSite& site, std::span<const double> x,
                      std::span<const double> gamma) {
  if (gamma.size() != site.rank()) {
    throw DimensionError("gloria_forward: gamma length " + std::to_string(gamma.size()) +
                         " != rank " + std::to_string(site.rank()));
  }
  Vector y = base_forward(site, x);
  Vector scaled = matvec(site.pair.b, x);
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= gamma[i];
  const Vector update = matvec(site.pair.a, scaled);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += update[i];
  return y;
}

double orth_loss(const LowRankPair& pair) {
  const std::size_t r = pair.rank();
  Matrix ata = matmul_tn(pair.a, pair.a);
  Matrix bbt = matmul_nt(pair.b, pair.b);
  for (std::size_t i = 0; i < r; ++i) {
    ata(i, i) -= 1.0;
    bbt(i, i) -= 1.0;
  }
  return frobenius_sq(ata) + frobenius_sq(bbt);
}

double orth_residual_a(const LowRankPair& pair) {
  Matrix ata = matmul_tn(pair.a, pair.a);
  for (std::size_t i = 0; i < ata.rows(); ++i) ata(i, i) -= 1.0;
  return frobenius_norm(ata);
}

OrthGrads orth_loss_grad(const LowRankPair& pair) {
  const std::size_t r = pair.rank();
  Matrix ata = matmul_tn(pair.a, pair.a);
  Matrix bbt = matmul_nt(pair.b, pair.b);
  for (std::size_t i = 0; i < r; ++i) {
    ata(i, i) -= 1.0;
    bbt(i, i) -= 1.0;
  }
  // d/dA ||A^T A - I||^2 = 4 A (A^T A - I); d/dB ||B B^T - I||^2 = 4 (B B^T - I) B
  return {4.0 * matmul(pair.a, ata), 4.0 * matmul(bbt, pair.b)};
}

double sparsity_loss(std::span<const double> gamma) {
  const std::size_t r = gamma.size();
  if (r <= 1) return 0.0;
  double total = 0.0;
  for (double g : gamma) total += g;
  const double denom = total + kSparsityEps;
  double h = 0.0;
  for (double g : gamma) {
    const double p = g / denom;
    h -= p * std::log(p + kSparsityEps);
  }
  return h / std::log(static_cast<double>(r));
}

Vector sparsity_loss_grad(std::span<const double> gamma) {
  const std::size_t r = gamma.size();
  Vector grad(r, 0.0);
  if (r <= 1) return grad;
  double total = 0.0;
  for (double g : gamma) total += g;
  const double denom = total + kSparsityEps;
  const double inv_log_r = 1.0 / std::log(static_cast<double>(r));
  Vector q(r);
  double qp = 0.0;
  for (std::size_t j = 0; j < r; ++j) {
    const double p = gamma[j] / denom;
    q[j] = -inv_log_r * (std::log(p + kSparsityEps) + p / (p + kSparsityEps));
    qp += q[j] * p;
  }
  for (std::size_t k = 0; k < r; ++k) grad[k] = (q[k] - qp) / denom;
  return grad;
}

Vector site_forward(const GloriaSite& site, AdaptMode mode, std::span<const double> x, Coord c,
                    SiteCache* cache) {
  if (x.size() != site.d_in()) {
    throw DimensionError("site_forward: input length " + std::to_string(x.size()) +
                         " != d_in " + std::to_string(site.d_in()));
  }
  Vector y;
  Vector bx;
  GateCache gc;
  switch (mode) {
    case AdaptMode::frozen:
    case AdaptMode::full:
      y = base_forward(site, x);
      break;
    case AdaptMode::lora:
      y = base_forward(site, x);
      bx = matvec(site.pair.b, x);
      {
        const Vector update = matvec(site.pair.a, bx);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += update[i];
      }
      break;
    case AdaptMode::gloria:
      gc = gate_forward_cached(site.gate, c);
      y = base_forward(site, x);
      bx = matvec(site.pair.b, x);
      {
        Vector scaled = bx;
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= gc.gamma[i];
        const Vector update = matvec(site.pair.a, scaled);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += update[i];
      }
      break;
  }
  if (cache) {
    cache->mode = mode;
    cache->x.assign(x.begin(), x.end());
    cache->bx = std::move(bx);
    cache->gate = std::move(gc);
    cache->y = y;
  }
  return y;
}

SiteGrads site_backward(const GloriaSite& site, std::span<const double> upstream,
                        const SiteCache& cache, RegWeights reg) {
  const std::size_t r = site.rank();
  const bool adapted = cache.mode == AdaptMode::lora || cache.mode == AdaptMode::gloria;
  if (cache.x.size() != site.d_in() || cache.y.size() != site.d_out() ||
      (adapted && cache.bx.size() != r) ||
      (cache.mode == AdaptMode::gloria && cache.gate.gamma.size() != r)) {
    throw ConsistencyError("site_backward: cache does not match site shape");
  }
  if (upstream.size() != site.d_out()) {
    throw DimensionError("site_backward: upstream length " + std::to_string(upstream.size()) +
                         " != d_out " + std::to_string(site.d_out()));
  }

  SiteGrads grads;
  grads.x = matvec_t(site.weight, upstream);

  if (cache.mode == AdaptMode::full) {
    grads.weight = Matrix(site.d_out(), site.d_in());
    add_outer(grads.weight, upstream, cache.x);
    return grads;
  }
  if (!adapted) return grads;

  const Vector gs = matvec_t(site.pair.a, upstream);  // dL / d(scaled Bx)
  Vector gbx(r);
  grads.a = Matrix(site.d_out(), r);

  if (cache.mode == AdaptMode::lora) {
    add_outer(grads.a, upstream, cache.bx);
    gbx = gs;
  } else {
    const Vector& gamma = cache.gate.gamma;
    Vector scaled(r);
    for (std::size_t i = 0; i < r; ++i) scaled[i] = gamma[i] * cache.bx[i];
    add_outer(grads.a, upstream, scaled);

    Vector ggamma(r);
    for (std::size_t i = 0; i < r; ++i) {
      ggamma[i] = gs[i] * cache.bx[i];
      gbx[i] = gs[i] * gamma[i];
    }
    if (reg.sp != 0.0) {
      const Vector gsp = sparsity_loss_grad(gamma);
      for (std::size_t i = 0; i < r; ++i) ggamma[i] += reg.sp * gsp[i];
    }

    const GateMlp& gate = site.gate;
    const GateCache& gc = cache.gate;
    Vector gout(r);
    for (std::size_t i = 0; i < r; ++i) gout[i] = ggamma[i] * sigmoid(gc.out_pre[i]);
    grads.gate.w2 = Matrix(r, gate.hidden());
    add_outer(grads.gate.w2, gout, gc.hidden);
    grads.gate.b2 = gout;
    Vector ghid = matvec_t(gate.w2, gout);
    for (std::size_t h = 0; h < ghid.size(); ++h) ghid[h] *= gelu_grad(gc.hidden_pre[h]);
    const double in[2] = {gc.input.lat, gc.input.lng};
    grads.gate.w1 = Matrix(gate.hidden(), 2);
    add_outer(grads.gate.w1, ghid, in);
    grads.gate.b1 = std::move(ghid);
  }

  grads.b = Matrix(r, site.d_in());
  add_outer(grads.b, gbx, cache.x);
  const Vector gx_low = matvec_t(site.pair.b, gbx);
  for (std::size_t j = 0; j < grads.x.size(); ++j) grads.x[j] += gx_low[j];

  if (reg.orth != 0.0) {
    const OrthGrads og = orth_loss_grad(site.pair);
    auto ga = grads.a.values();
    auto gb = grads.b.values();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += reg.orth * og.a.values()[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += reg.orth * og.b.values()[i];
  }
  return grads;
}

ParamCount param_count(std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t hidden,
                       AdaptMode mode) {
  if (d_in == 0 || d_out == 0) throw DimensionError("param_count: dims must be positive");
  ParamCount pc;
  pc.frozen = d_out * d_in + d_out;
  if (mode == AdaptMode::lora || mode == AdaptMode::gloria) {
    if (rank == 0) throw DimensionError("param_count: rank must be >= 1");
    pc.low_rank = d_out * rank + rank * d_in;
  }
  if (mode == AdaptMode::gloria) pc.gate = 2 * hidden + hidden + hidden * rank + rank;
  pc.trainable = pc.low_rank + pc.gate;
  if (mode == AdaptMode::full) {
    pc.trainable = d_out * d_in;
    pc.frozen = d_out;
  }
  pc.fraction = static_cast<double>(pc.trainable) / static_cast<double>(pc.trainable + pc.frozen);
  return pc;
}

namespace {

Matrix as_column(const Vector& v) { return Matrix(v.size(), 1, v); }

Vector from_column(const Matrix& m, const std::string& what) {
  if (m.cols() != 1) throw InputError(what + ": expected a column vector, got " + m.shape_str());
  auto vals = m.values();
  return Vector(vals.begin(), vals.end());
}

}  // namespace

void save_site(const std::filesystem::path& dir, const GloriaSite& site, const CoordBounds& bounds) {
  site.validate();
  std::filesystem::create_directories(dir);
  save_matrix((dir / "weight.txt").string(), site.weight);
  save_matrix((dir / "bias.txt").string(), as_column(site.bias));
  save_matrix((dir / "a.txt").string(), site.pair.a);
  save_matrix((dir / "b.txt").string(), site.pair.b);
  save_matrix((dir / "gate_w1.txt").string(), site.gate.w1);
  save_matrix((dir / "gate_b1.txt").string(), as_column(site.gate.b1));
  save_matrix((dir / "gate_w2.txt").string(), site.gate.w2);
  save_matrix((dir / "gate_b2.txt").string(), as_column(site.gate.b2));
  KeyValues kv;
  kv["d_in"] = std::to_string(site.d_in());
  kv["d_out"] = std::to_string(site.d_out());
  kv["rank"] = std::to_string(site.rank());
  kv["hidden"] = std::to_string(site.gate.hidden());
  kv["lat_min"] = fmt_full(bounds.lat_min);
  kv["lat_max"] = fmt_full(bounds.lat_max);
  kv["lng_min"] = fmt_full(bounds.lng_min);
  kv["lng_max"] = fmt_full(bounds.lng_max);
  write_kv(dir / "manifest.txt", kv);
}

GloriaSite load_site(const std::filesystem::path& dir, CoordBounds* bounds) {
  const KeyValues kv = read_kv(dir / "manifest.txt");
  GloriaSite site;
  site.weight = load_matrix((dir / "weight.txt").string());
  site.bias = from_column(load_matrix((dir / "bias.txt").string()), "bias");
  site.pair.a = load_matrix((dir / "a.txt").string());
  site.pair.b = load_matrix((dir / "b.txt").string());
  site.gate.w1 = load_matrix((dir / "gate_w1.txt").string());
  site.gate.b1 = from_column(load_matrix((dir / "gate_b1.txt").string()), "gate_b1");
  site.gate.w2 = load_matrix((dir / "gate_w2.txt").string());
  site.gate.b2 = from_column(load_matrix((dir / "gate_b2.txt").string()), "gate_b2");
  try {
    site.validate();
  } catch (const DimensionError& e) {
    throw InputError(dir.string() + ": " + e.what());
  }
  if (static_cast<std::size_t>(kv_int(kv, "d_in")) != site.d_in() ||
      static_cast<std::size_t>(kv_int(kv, "d_out")) != site.d_out() ||
      static_cast<std::size_t>(kv_int(kv, "rank")) != site.rank() ||
      static_cast<std::size_t>(kv_int(kv, "hidden")) != site.gate.hidden()) {
    throw InputError(dir.string() + ": manifest dims disagree with matrix files");
  }
  if (bounds) {
    bounds->lat_min = kv_real(kv, "lat_min");
    bounds->lat_max = kv_real(kv, "lat_max");
    bounds->lng_min = kv_real(kv, "lng_min");
    bounds->lng_max = kv_real(kv, "lng_max");
  }
  return site;
}

}  // namespace gloria
