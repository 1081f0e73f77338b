#include "gloria/interp.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "gloria/errors.hpp"
#include "gloria/kvfile.hpp"

namespace gloria {

GateMatrix extract_gates(const ToyBackbone& m, const std::vector<Location>& locations) {
  if (locations.empty()) throw InputError("extract_gates: empty location list");
  if (m.mode() != AdaptMode::gloria) throw InputError("extract_gates: model must be in gloria mode");
  std::size_t rows = 0;
  for (const auto& site : m.sites()) rows += site.rank();
  GateMatrix gm;
  gm.g = Matrix(rows, locations.size());
  gm.locations = locations;
  for (std::size_t j = 0; j < locations.size(); ++j) {
    const Coord c = m.coord_bounds().scale(locations[j].c);
    std::size_t row = 0;
    for (const auto& site : m.sites()) {
      for (double v : gate_forward(site.gate, c)) gm.g(row++, j) = v;
    }
  }
  return gm;
}

std::vector<Location> dataset_locations(const GeoDataset& data, std::size_t max_locations) {
  std::vector<Location> out;
  std::set<std::pair<double, double>> seen;
  for (const auto& s : data.samples) {
    if (out.size() >= max_locations) break;
    if (!seen.insert({s.c.lat, s.c.lng}).second) continue;
    out.push_back({s.c, s.region});
  }
  return out;
}

double kl_divergence(const Matrix& g, const Matrix& s, const Matrix& l) {
  const Matrix sl = matmul(s, l);
  if (sl.rows() != g.rows() || sl.cols() != g.cols()) {
    throw DimensionError("kl_divergence: G " + g.shape_str() + " vs SL " + sl.shape_str());
  }
  auto gv = g.values();
  auto rv = sl.values();
  double total = 0.0;
  for (std::size_t i = 0; i < gv.size(); ++i) {
    const double x = gv[i];
    const double y = rv[i];
    if (x > 0.0) total += x * std::log(x / std::max(y, kNmfEps));
    total += y - x;
  }
  return total;
}

namespace {

void orthogonalize(Vector& x, const std::vector<Vector>& basis) {
  for (const Vector& b : basis) {
    const double p = dot(x, b);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= p * b[i];
  }
}

bool normalize(Vector& x) {
  const double n = norm2(x);
  if (!(n > 0.0)) return false;
  for (double& v : x) v /= n;
  return true;
}

}  // namespace

SvdTriplets top_singular_triplets(const Matrix& g, std::size_t k, Rng& rng, PowerIterOptions opts) {
  const std::size_t m = g.rows();
  const std::size_t n = g.cols();
  if (k == 0 || k > std::min(m, n)) {
    throw InputError("top_singular_triplets: k = " + std::to_string(k) + " must be in [1, " +
                     std::to_string(std::min(m, n)) + "]");
  }
  const bool left_gram = m <= n;
  const Matrix gram = left_gram ? matmul_nt(g, g) : matmul_tn(g, g);
  const std::size_t dim = gram.rows();

  SvdTriplets out;
  std::vector<Vector> eig;
  std::vector<double> lambda;
  double lambda_max = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    Vector x(dim);
    for (double& v : x) v = rng.normal();
    orthogonalize(x, eig);
    if (!normalize(x)) throw NumericError("top_singular_triplets: degenerate start vector");
    double lam = 0.0;
    bool converged = false;
    std::size_t it = 0;
    for (; it < opts.max_iters; ++it) {
      Vector y = matvec(gram, x);
      orthogonalize(y, eig);
      lam = dot(x, y);
      double res = 0.0;
      for (std::size_t i = 0; i < dim; ++i) res += (y[i] - lam * x[i]) * (y[i] - lam * x[i]);
      res = std::sqrt(res);
      const double scale = j == 0 ? std::abs(lam) : lambda_max;
      if (res <= opts.tol * scale || norm2(y) <= opts.tol * lambda_max) {
        converged = true;
        if (normalize(y)) {
          orthogonalize(y, eig);
          if (normalize(y)) x = std::move(y);
        }
        ++it;
        break;
      }
      x = std::move(y);
      normalize(x);
      orthogonalize(x, eig);
      normalize(x);
    }
    out.iterations += it;
    if (!converged) {
      throw NumericError("top_singular_triplets: no convergence for triplet " + std::to_string(j) +
                         " after " + std::to_string(it) + " iterations");
    }
    lam = std::max(lam, 0.0);
    if (j == 0) lambda_max = lam;
    eig.push_back(x);
    lambda.push_back(lam);
  }

  for (std::size_t j = 0; j < k; ++j) {
    const double sigma = std::sqrt(lambda[j]);
    out.sigma.push_back(sigma);
    Vector other = left_gram ? matvec_t(g, eig[j]) : matvec(g, eig[j]);
    if (sigma > 0.0) {
      for (double& v : other) v /= sigma;
    } else {
      std::fill(other.begin(), other.end(), 0.0);
    }
    if (left_gram) {
      out.u.push_back(eig[j]);
      out.v.push_back(std::move(other));
    } else {
      out.u.push_back(std::move(other));
      out.v.push_back(eig[j]);
    }
  }
  return out;
}

NmfFactors nndsvda_init(const Matrix& g, std::size_t k, Rng& rng, PowerIterOptions opts) {
  for (double v : g.values())
    if (!(v >= 0.0)) throw InputError("nndsvda_init: matrix must be non-negative and finite");
  const SvdTriplets svd = top_singular_triplets(g, k, rng, opts);
  const std::size_t m = g.rows();
  const std::size_t n = g.cols();
  NmfFactors f{Matrix(m, k), Matrix(k, n)};

  {
    const double sq = std::sqrt(svd.sigma[0]);
    for (std::size_t i = 0; i < m; ++i) f.s(i, 0) = sq * std::abs(svd.u[0][i]);
    for (std::size_t i = 0; i < n; ++i) f.l(0, i) = sq * std::abs(svd.v[0][i]);
  }
  for (std::size_t j = 1; j < k; ++j) {
    const Vector& x = svd.u[j];
    const Vector& y = svd.v[j];
    Vector xp(m), xn(m), yp(n), yn(n);
    for (std::size_t i = 0; i < m; ++i) {
      xp[i] = std::max(x[i], 0.0);
      xn[i] = std::max(-x[i], 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      yp[i] = std::max(y[i], 0.0);
      yn[i] = std::max(-y[i], 0.0);
    }
    const double xpn = norm2(xp), xnn = norm2(xn), ypn = norm2(yp), ynn = norm2(yn);
    const double mp = xpn * ypn;
    const double mn = xnn * ynn;
    const bool use_pos = mp > mn;
    const Vector& uu = use_pos ? xp : xn;
    const Vector& vv = use_pos ? yp : yn;
    const double un = use_pos ? xpn : xnn;
    const double vn = use_pos ? ypn : ynn;
    const double sigma = use_pos ? mp : mn;
    if (!(un > 0.0) || !(vn > 0.0)) continue;  // column stays zero, filled below
    const double lbd = std::sqrt(svd.sigma[j] * sigma);
    for (std::size_t i = 0; i < m; ++i) f.s(i, j) = lbd * uu[i] / un;
    for (std::size_t i = 0; i < n; ++i) f.l(j, i) = lbd * vv[i] / vn;
  }

  double mean = 0.0;
  for (double v : g.values()) mean += v;
  mean /= static_cast<double>(g.size());
  for (double& v : f.s.values())
    if (v == 0.0) v = mean;
  for (double& v : f.l.values())
    if (v == 0.0) v = mean;
  return f;
}

NmfFactors nmf_kl(const Matrix& g, std::size_t iters, NmfFactors f, std::vector<double>* kl_trace) {
  const std::size_t m = g.rows();
  const std::size_t n = g.cols();
  const std::size_t k = f.s.cols();
  if (f.s.rows() != m || f.l.rows() != k || f.l.cols() != n) {
    throw DimensionError("nmf_kl: G " + g.shape_str() + " vs S " + f.s.shape_str() + ", L " +
                         f.l.shape_str());
  }
  for (double v : f.s.values())
    if (!(v > 0.0)) throw InputError("nmf_kl: initial S must be strictly positive");
  for (double v : f.l.values())
    if (!(v > 0.0)) throw InputError("nmf_kl: initial L must be strictly positive");
  for (double v : g.values())
    if (!(v >= 0.0)) throw InputError("nmf_kl: G must be non-negative");

  if (kl_trace) {
    kl_trace->clear();
    kl_trace->push_back(kl_divergence(g, f.s, f.l));
  }
  Matrix ratio(m, n);
  auto fill_ratio = [&](const Matrix& sl) {
    auto gv = g.values();
    auto sv = sl.values();
    auto rv = ratio.values();
    for (std::size_t i = 0; i < rv.size(); ++i) rv[i] = gv[i] / std::max(sv[i], kNmfEps);
  };

  for (std::size_t it = 0; it < iters; ++it) {
    // S <- S .* ((G ./ SL) L^T) ./ (1 L^T)
    fill_ratio(matmul(f.s, f.l));
    const Matrix num_s = matmul_nt(ratio, f.l);  // m x k
    Vector lsum(k, 0.0);
    for (std::size_t j = 0; j < k; ++j)
      for (double v : f.l.row(j)) lsum[j] += v;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) f.s(i, j) *= num_s(i, j) / std::max(lsum[j], kNmfEps);

    // L <- L .* (S^T (G ./ SL)) ./ (S^T 1)
    fill_ratio(matmul(f.s, f.l));
    const Matrix num_l = matmul_tn(f.s, ratio);  // k x n
    Vector ssum(k, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) ssum[j] += f.s(i, j);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < n; ++c) f.l(j, c) *= num_l(j, c) / std::max(ssum[j], kNmfEps);

    if (!f.s.all_finite() || !f.l.all_finite()) {
      throw NumericError("nmf_kl: non-finite factors at iteration " + std::to_string(it + 1));
    }
    if (kl_trace) kl_trace->push_back(kl_divergence(g, f.s, f.l));
  }
  return f;
}

std::size_t knee_index(const std::vector<ElbowPoint>& curve) {
  if (curve.size() < 3) throw InputError("knee_index: need at least 3 points");
  const double x0 = static_cast<double>(curve.front().k);
  const double x1 = static_cast<double>(curve.back().k);
  double ymin = curve.front().kl, ymax = curve.front().kl;
  for (const auto& p : curve) {
    ymin = std::min(ymin, p.kl);
    ymax = std::max(ymax, p.kl);
  }
  const double xs = x1 > x0 ? x1 - x0 : 1.0;
  const double ys = ymax > ymin ? ymax - ymin : 1.0;
  auto nx = [&](const ElbowPoint& p) { return (static_cast<double>(p.k) - x0) / xs; };
  auto ny = [&](const ElbowPoint& p) { return (p.kl - ymin) / ys; };
  const double ax = nx(curve.front()), ay = ny(curve.front());
  const double dx = nx(curve.back()) - ax, dy = ny(curve.back()) - ay;
  const double len = std::hypot(dx, dy);
  std::size_t best = 0;
  double best_d = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const double px = nx(curve[i]) - ax, py = ny(curve[i]) - ay;
    const double d = len > 0.0 ? std::abs(dx * py - dy * px) / len : 0.0;
    if (d > best_d + 1e-12) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

ElbowResult elbow_select(const Matrix& g, const std::vector<std::size_t>& candidates,
                         std::size_t iters, std::uint64_t seed) {
  if (candidates.size() < 3) throw InputError("elbow_select: need at least 3 candidates");
  if (!std::is_sorted(candidates.begin(), candidates.end()) ||
      std::adjacent_find(candidates.begin(), candidates.end()) != candidates.end()) {
    throw InputError("elbow_select: candidates must be strictly ascending");
  }
  ElbowResult out;
  for (std::size_t k : candidates) {
    Rng rng(seed);
    const NmfFactors f = nmf_kl(g, iters, nndsvda_init(g, k, rng));
    out.curve.push_back({k, kl_divergence(g, f.s, f.l)});
  }
  std::vector<ElbowPoint> err;
  for (const auto& p : out.curve) err.push_back({p.k, reconstruction_error(p.kl)});
  out.k_star = out.curve[knee_index(err)].k;
  return out;
}

RegionAggregate aggregate_by_region(const NmfFactors& f, const std::vector<std::size_t>& regions,
                                    std::size_t region_count) {
  const std::size_t k = f.l.rows();
  if (regions.size() != f.l.cols()) {
    throw DimensionError("aggregate_by_region: " + std::to_string(regions.size()) +
                         " region ids for " + std::to_string(f.l.cols()) + " locations");
  }
  RegionAggregate out{Matrix(k, region_count), std::vector<bool>(region_count, false)};
  std::vector<std::size_t> counts(region_count, 0);
  for (std::size_t c = 0; c < regions.size(); ++c) {
    const std::size_t r = regions[c];
    if (r >= region_count) throw InputError("aggregate_by_region: region id out of range");
    ++counts[r];
    for (std::size_t j = 0; j < k; ++j) out.mean(j, r) += f.l(j, c);
  }
  for (std::size_t r = 0; r < region_count; ++r) {
    if (counts[r] == 0) continue;
    out.present[r] = true;
    for (std::size_t j = 0; j < k; ++j) out.mean(j, r) /= static_cast<double>(counts[r]);
  }
  return out;
}

Dendrogram cluster_order(const Matrix& m, Axis axis) {
  const Matrix vecs = axis == Axis::rows ? m : m.transposed();
  const std::size_t n = vecs.rows();
  if (n < 2) throw InputError("cluster_order: need at least 2 vectors");

  std::vector<Vector> unit(n);
  for (std::size_t i = 0; i < n; ++i) {
    unit[i].assign(vecs.row(i).begin(), vecs.row(i).end());
    normalize(unit[i]);
  }
  const std::size_t total = 2 * n - 1;
  std::vector<std::vector<double>> dist(total, std::vector<double>(total, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < unit[i].size(); ++c) s += (unit[i][c] - unit[j][c]) * (unit[i][c] - unit[j][c]);
      dist[i][j] = dist[j][i] = std::sqrt(s);
    }

  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), 0);
  std::vector<std::size_t> size(total, 1);
  std::vector<std::pair<std::size_t, std::size_t>> children(total, {0, 0});
  Dendrogram out;
  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t ba = 0, bb = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < active.size(); ++i)
      for (std::size_t j = i + 1; j < active.size(); ++j) {
        const double d = dist[active[i]][active[j]];
        if (d < best) {
          best = d;
          ba = i;
          bb = j;
        }
      }
    const std::size_t a = active[ba];
    const std::size_t b = active[bb];
    const std::size_t id = n + step;
    size[id] = size[a] + size[b];
    children[id] = {a, b};
    out.merges.push_back({a, b, best, size[id]});
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bb));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(ba));
    for (std::size_t c : active) {
      const double d = (static_cast<double>(size[a]) * dist[a][c] +
                        static_cast<double>(size[b]) * dist[b][c]) /
                       static_cast<double>(size[id]);
      dist[id][c] = dist[c][id] = d;
    }
    active.push_back(id);
  }

  std::vector<std::size_t> stack{total - 1};
  while (!stack.empty()) {
    const std::size_t node = stack.back();
    stack.pop_back();
    if (node < n) {
      out.order.push_back(node);
    } else {
      stack.push_back(children[node].second);
      stack.push_back(children[node].first);
    }
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
  const std::size_t n = a.size();
  if (n == 0) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

ComponentMatch component_match(const Matrix& recovered, const Matrix& mixing) {
  const std::size_t k = recovered.rows();
  if (mixing.cols() != k) {
    throw InputError("component_match: " + std::to_string(k) + " recovered vs " +
                     std::to_string(mixing.cols()) + " planted components");
  }
  if (recovered.cols() != mixing.rows()) {
    throw DimensionError("component_match: region counts differ (" +
                         std::to_string(recovered.cols()) + " vs " +
                         std::to_string(mixing.rows()) + ")");
  }
  if (k == 0 || k > 20) throw InputError("component_match: k must be in [1, 20]");

  std::vector<std::vector<double>> corr(k, std::vector<double>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) corr[i][j] = pearson(recovered.row(i), mixing.col(j));
  }

  // best[mask]: max total correlation assigning recovered 0..popcount(mask)-1 to planted `mask`.
  const std::size_t full = std::size_t{1} << k;
  std::vector<double> best(full, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> choice(full, 0);
  best[0] = 0.0;
  for (std::size_t mask = 0; mask < full; ++mask) {
    if (best[mask] == -std::numeric_limits<double>::infinity()) continue;
    const auto i = static_cast<std::size_t>(__builtin_popcountll(mask));
    if (i >= k) continue;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask & (std::size_t{1} << j)) continue;
      const std::size_t next = mask | (std::size_t{1} << j);
      const double v = best[mask] + corr[i][j];
      if (v > best[next]) {
        best[next] = v;
        choice[next] = j;
      }
    }
  }
  ComponentMatch out;
  out.assignment.assign(k, 0);
  out.correlation.assign(k, 0.0);
  std::size_t mask = full - 1;
  for (std::size_t i = k; i-- > 0;) {
    const std::size_t j = choice[mask];
    out.assignment[i] = j;
    out.correlation[i] = corr[i][j];
    mask &= ~(std::size_t{1} << j);
  }
  out.mean_correlation =
      std::accumulate(out.correlation.begin(), out.correlation.end(), 0.0) / static_cast<double>(k);
  return out;
}

void save_gate_matrix(const std::filesystem::path& dir, const GateMatrix& gm) {
  if (gm.locations.size() != gm.g.cols()) {
    throw DimensionError("save_gate_matrix: location count does not match columns");
  }
  std::filesystem::create_directories(dir);
  save_matrix((dir / "gates.txt").string(), gm.g);
  std::ofstream os(dir / "locations.csv");
  if (!os) throw InputError("cannot write " + (dir / "locations.csv").string());
  os << "index,lat,lng,region\n";
  for (std::size_t i = 0; i < gm.locations.size(); ++i) {
    const auto& loc = gm.locations[i];
    os << i << ',' << fmt_full(loc.c.lat) << ',' << fmt_full(loc.c.lng) << ',' << loc.region << '\n';
  }
}

GateMatrix load_gate_matrix(const std::filesystem::path& dir) {
  GateMatrix gm;
  gm.g = load_matrix((dir / "gates.txt").string());
  std::ifstream is(dir / "locations.csv");
  if (!is) throw InputError("cannot read " + (dir / "locations.csv").string());
  std::string line;
  std::getline(is, line);
  if (line != "index,lat,lng,region") throw InputError("locations.csv: unexpected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 4 || std::stoull(f[0]) != gm.locations.size()) {
      throw InputError("locations.csv: bad row '" + line + "'");
    }
    gm.locations.push_back({{parse_real(f[1]), parse_real(f[2])},
                            static_cast<std::size_t>(std::stoull(f[3]))});
  }
  if (gm.locations.size() != gm.g.cols()) {
    throw InputError("gate matrix has " + std::to_string(gm.g.cols()) + " columns but " +
                     std::to_string(gm.locations.size()) + " locations");
  }
  return gm;
}

void save_nmf(const std::filesystem::path& dir, const NmfFactors& f, const NmfSummary& summary) {
  std::filesystem::create_directories(dir);
  save_matrix((dir / "S.txt").string(), f.s);
  save_matrix((dir / "L.txt").string(), f.l);
  KeyValues kv;
  kv["k"] = std::to_string(summary.k);
  kv["final_kl"] = fmt_full(summary.final_kl);
  kv["iterations"] = std::to_string(summary.iterations);
  write_kv(dir / "summary.txt", kv);
}

NmfFactors load_nmf(const std::filesystem::path& dir, NmfSummary* summary) {
  NmfFactors f{load_matrix((dir / "S.txt").string()), load_matrix((dir / "L.txt").string())};
  if (f.s.cols() != f.l.rows()) throw InputError(dir.string() + ": S and L disagree on k");
  if (summary) {
    const KeyValues kv = read_kv(dir / "summary.txt");
    summary->k = static_cast<std::size_t>(kv_int(kv, "k"));
    summary->final_kl = kv_real(kv, "final_kl");
    summary->iterations = static_cast<std::size_t>(kv_int(kv, "iterations"));
  }
  return f;
}

void write_elbow_csv(const std::filesystem::path& path, const std::vector<ElbowPoint>& curve) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "k,kl\n";
  for (const auto& p : curve) os << p.k << ',' << fmt_full(p.kl) << '\n';
}

std::vector<ElbowPoint> read_elbow_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "k,kl") throw InputError(path.string() + ": unexpected header");
  std::vector<ElbowPoint> curve;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw InputError(path.string() + ": bad row");
    curve.push_back({static_cast<std::size_t>(std::stoull(line.substr(0, comma))),
                     parse_real(line.substr(comma + 1))});
  }
  return curve;
}

}  // namespace gloria
