#include "gloria/cli.hpp"

#include <CLI11.hpp>

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>

#include "gloria/errors.hpp"
#include "gloria/geoviz.hpp"
#include "gloria/interp.hpp"

namespace gloria {

Rng sample_stream(std::uint64_t sample_seed) { return Rng(sample_seed).fork(0x53414d50); }
Rng split_stream(std::uint64_t sample_seed) { return Rng(sample_seed).fork(0x53504c54); }
Rng init_stream(std::uint64_t train_seed) { return Rng(train_seed).fork(0x494e4954); }

Splits make_splits(const GeoDataset& data, std::uint64_t sample_seed,
                   std::optional<std::size_t> holdout) {
  Rng rng = split_stream(sample_seed);
  return split(data, SplitSpec{holdout}, rng);
}

PlantedData make_planted_data(const WorldSpec& spec, std::uint64_t world_seed,
                              std::uint64_t sample_seed, std::size_t n,
                              std::optional<std::size_t> holdout) {
  PlantedData p;
  p.world = gen_world(spec, world_seed);
  Rng rng = sample_stream(sample_seed);
  p.data = sample_dataset(p.world, n, rng);
  p.splits = make_splits(p.data, sample_seed, holdout);
  return p;
}

ToyBackbone initial_model(const PlantedWorld& w, const GeoDataset& train, std::size_t rank,
                          std::size_t hidden, std::uint64_t seed) {
  Rng rng = init_stream(seed);
  ToyBackbone m = make_backbone(w, rank, hidden, rng, AdaptMode::gloria);
  m.set_coord_bounds(train.bounds());
  return m;
}

GradCheck random_gradient_check(std::uint64_t seed, std::size_t sites, std::size_t dim,
                                std::size_t rank, std::size_t hidden) {
  Rng rng(seed);
  ToyBackbone m = ToyBackbone::random({sites, dim, rank, hidden}, rng, AdaptMode::gloria);
  // Move away from the neutral gate start and the zero bias so every term is exercised.
  for (std::size_t s = 0; s < m.site_count(); ++s) {
    GloriaSite& site = m.mutable_site(s);
    for (double& v : site.gate.w2.values()) v = 0.5 * rng.normal();
    for (double& v : site.gate.b2) v = 0.5 * rng.normal();
    for (double& v : site.bias) v = 0.1 * rng.normal();
  }
  Vector x(dim), target(dim);
  for (double& v : x) v = rng.normal();
  for (double& v : target) v = rng.normal();
  const Coord c{rng.uniform(), rng.uniform()};

  const LossWeights w{0.8, 5.0, true};
  GradCheck out = gradient_check(m, x, c, target, w);
  m.set_mode(AdaptMode::full);
  const GradCheck full = gradient_check(m, x, c, target, w);
  for (const auto& [k, v] : full.rel_error) out.rel_error[k] = v;
  out.max_rel_error = std::max(out.max_rel_error, full.max_rel_error);
  return out;
}

namespace {

// Shortest text that parses back to the same double, for help defaults.
std::string fmt_short(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Bad flags or flag values; reported with exit code 2.
class UsageError : public std::invalid_argument {
 public:
  explicit UsageError(const std::string& what) : std::invalid_argument(what) {}
};

std::string kebab(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

std::string snake(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  return s;
}

class Args {
 public:
  explicit Args(KeyValues kv) : kv_(std::move(kv)) {}

  bool has(const std::string& k) const { return kv_.count(k) != 0; }

  std::string str(const std::string& k) const {
    const auto it = kv_.find(k);
    if (it == kv_.end()) throw UsageError("missing required flag --" + kebab(k));
    return it->second;
  }
  std::string str(const std::string& k, const std::string& def) const {
    return has(k) ? str(k) : def;
  }

  std::uint64_t u64(const std::string& k, std::uint64_t def) const {
    if (!has(k)) return def;
    const std::string v = str(k);
    char* end = nullptr;
    errno = 0;
    const unsigned long long r = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || v[0] == '-' || *end != '\0' || errno == ERANGE) {
      throw UsageError("--" + kebab(k) + " expects a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::uint64_t>(r);
  }
  std::size_t count(const std::string& k, std::size_t def) const {
    return static_cast<std::size_t>(u64(k, def));
  }
  double real(const std::string& k, double def) const {
    if (!has(k)) return def;
    try {
      return parse_real(str(k));
    } catch (const InputError&) {
      throw UsageError("--" + kebab(k) + " expects a number, got '" + str(k) + "'");
    }
  }
  bool flag(const std::string& k) const {
    if (!has(k)) return false;
    const std::string v = str(k);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw UsageError("--" + kebab(k) + " expects a boolean, got '" + v + "'");
  }

  AdaptMode mode(const std::string& k, AdaptMode def) const {
    if (!has(k)) return def;
    try {
      return parse_mode(str(k));
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
  }

 private:
  KeyValues kv_;
};

// Refuses to replace an existing output unless forced; a forced directory is cleared first.
void claim_output(const std::filesystem::path& p, bool force) {
  if (!std::filesystem::exists(p)) return;
  if (!force) throw InputError(p.string() + " already exists; pass --force to overwrite");
  std::filesystem::remove_all(p);
}

WorldSpec world_from_args(const Args& a) {
  const std::string preset = a.str("preset", "default");
  WorldSpec s;
  if (preset == "extrapolation") {
    s = extrapolation_preset();
  } else if (preset != "default") {
    throw UsageError("--preset must be default or extrapolation, got '" + preset + "'");
  }
  s.regions = a.count("regions", s.regions);
  s.k_true = a.count("k_true", s.k_true);
  s.sites = a.count("sites", s.sites);
  s.dim = a.count("dim", s.dim);
  if (a.has("mixing")) {
    try {
      s.mixing = parse_mixing(a.str("mixing"));
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
  }
  s.offdiag_max = a.real("offdiag_max", s.offdiag_max);
  s.component_scale = a.real("component_scale", s.component_scale);
  s.sigma_c = a.real("sigma_c", s.sigma_c);
  s.sigma_y = a.real("sigma_y", s.sigma_y);
  return s;
}

TrainConfig train_from_args(const Args& a) {
  TrainConfig c;
  c.base_lr = a.real("base_lr", c.base_lr);
  c.warmup_steps = a.count("warmup_steps", c.warmup_steps);
  c.lambda_orth = a.real("lambda_orth", c.lambda_orth);
  c.lambda_sp = a.real("lambda_sp", c.lambda_sp);
  c.epochs = a.count("epochs", c.epochs);
  c.batch_size = a.count("batch_size", c.batch_size);
  c.grad_accum = a.count("grad_accum", c.grad_accum);
  c.seed = a.u64("seed", c.seed);
  c.mode = a.mode("mode", c.mode);
  c.warm_start_epochs = a.count("warm_start_epochs", c.warm_start_epochs);
  return c;
}

struct Trained {
  ToyBackbone model;
  TrainConfig cfg;
  std::size_t rank = 0;
  std::size_t hidden = 0;
  std::optional<std::size_t> holdout;
};

Trained load_trained(const std::filesystem::path& dir) {
  KeyValues kv = read_kv(dir / "train.txt");
  Trained t;
  t.rank = static_cast<std::size_t>(kv_int(kv, "rank"));
  t.hidden = static_cast<std::size_t>(kv_int(kv, "hidden"));
  const std::string holdout = kv_require(kv, "holdout");
  if (holdout != "none") t.holdout = static_cast<std::size_t>(kv_int(kv, "holdout"));
  kv.erase("rank");
  kv.erase("hidden");
  kv.erase("holdout");
  apply_train_config(kv, t.cfg);
  t.model = load_backbone(dir / "model", t.cfg.mode);
  return t;
}

struct Dataset {
  DatasetBundle bundle;
  PlantedWorld world;
};

Dataset load_data(const std::filesystem::path& dir) {
  Dataset d;
  d.bundle = load_dataset(dir);
  d.world = gen_world(d.bundle.spec, d.bundle.world_seed);
  return d;
}

// ---- commands ----------------------------------------------------------------------------

int cmd_gen_data(const Args& a, std::ostream& out) {
  const std::filesystem::path dir = a.str("out");
  const WorldSpec spec = world_from_args(a);
  const std::uint64_t seed = a.u64("seed", 0);
  const std::uint64_t sample_seed = a.u64("sample_seed", seed);
  const std::size_t n = a.count("n", 4000);
  claim_output(dir, a.flag("force"));

  const PlantedWorld w = gen_world(spec, seed);
  Rng rng = sample_stream(sample_seed);
  const GeoDataset data = sample_dataset(w, n, rng);
  save_dataset(dir, data, spec, seed, sample_seed);
  save_matrix((dir / "mixing.txt").string(), w.mixing);
  out << "gen-data: " << data.size() << " samples, " << spec.regions << " regions -> "
      << dir.string() << '\n';
  return 0;
}

RunLog do_train(const Args& a, std::ostream& out) {
  const std::filesystem::path dir = a.str("out");
  const Dataset d = load_data(a.str("data"));
  const TrainConfig cfg = train_from_args(a);
  const std::size_t rank = a.count("rank", 8);
  const std::size_t hidden = a.count("hidden", kDefaultGateHidden);
  std::optional<std::size_t> holdout;
  if (a.has("holdout")) holdout = a.count("holdout", 0);
  claim_output(dir, a.flag("force"));

  const Splits s = make_splits(d.bundle.data, d.bundle.sample_seed, holdout);
  const ToyBackbone init = initial_model(d.world, s.train, rank, hidden, cfg.seed);
  const TrainResult r = train(cfg, init, s.train, s.val);

  std::filesystem::create_directories(dir);
  save_backbone(dir / "model", r.model);
  write_runlog(dir / "runlog.csv", r.log);
  KeyValues kv = train_config_to_kv(cfg);
  kv["rank"] = std::to_string(rank);
  kv["hidden"] = std::to_string(hidden);
  kv["holdout"] = holdout ? std::to_string(*holdout) : "none";
  write_kv(dir / "train.txt", kv);

  out << "train: mode " << to_string(cfg.mode) << ", " << r.log.size() << " epochs";
  if (!r.log.empty()) out << ", final val_loss " << fmt_full(r.log.back().val_loss);
  out << " -> " << dir.string() << '\n';
  return r.log;
}

int cmd_train(const Args& a, std::ostream& out) {
  do_train(a, out);
  return 0;
}

EvalMetrics do_eval(const Args& a, std::ostream& out) {
  Trained t = load_trained(a.str("model"));
  const Dataset d = load_data(a.str("data"));
  const std::string which = a.str("split", "val");
  t.model.set_mode(a.mode("mode", t.cfg.mode));
  if (a.has("out")) claim_output(a.str("out"), a.flag("force"));

  GeoDataset subset;
  if (which == "all") {
    subset = d.bundle.data;
  } else {
    Splits s = make_splits(d.bundle.data, d.bundle.sample_seed, t.holdout);
    if (which == "train") subset = std::move(s.train);
    else if (which == "val") subset = std::move(s.val);
    else if (which == "test") subset = std::move(s.test);
    else throw UsageError("--split must be train, val, test or all, got '" + which + "'");
  }
  const EvalMetrics m = evaluate(t.model, subset);

  KeyValues kv;
  kv["mode"] = to_string(t.model.mode());
  kv["split"] = which;
  kv["count"] = std::to_string(m.count);
  kv["overall"] = fmt_full(m.overall);
  out << "eval: " << to_string(t.model.mode()) << " on " << which << " (" << m.count
      << " samples) mse " << fmt_full(m.overall) << '\n';
  for (std::size_t r = 0; r < m.per_region.size(); ++r) {
    const std::string key = "region_" + std::to_string(r);
    kv[key + "_count"] = std::to_string(m.region_counts[r]);
    kv[key] = m.per_region[r] ? fmt_full(*m.per_region[r]) : "omitted";
    out << "  region " << r << ": " << kv[key] << " (" << m.region_counts[r] << ")\n";
  }
  for (const auto& n : m.notices) out << "  note: " << n << '\n';
  if (a.has("out")) {
    const std::filesystem::path p = a.str("out");
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    write_kv(p, kv);
  }
  return m;
}

int cmd_eval(const Args& a, std::ostream& out) {
  do_eval(a, out);
  return 0;
}

int cmd_extract_gates(const Args& a, std::ostream& out) {
  const std::filesystem::path dir = a.str("out");
  const Trained t = load_trained(a.str("model"));
  const Dataset d = load_data(a.str("data"));
  const std::size_t max_loc = a.count("max_locations", 488);
  claim_output(dir, a.flag("force"));
  const GateMatrix gm = extract_gates(t.model, dataset_locations(d.bundle.data, max_loc));
  save_gate_matrix(dir, gm);
  out << "extract-gates: " << gm.g.shape_str() << " -> " << dir.string() << '\n';
  return 0;
}

std::size_t do_elbow(const Args& a, std::ostream& out) {
  const std::filesystem::path path = a.str("out");
  const GateMatrix gm = load_gate_matrix(a.str("gates"));
  const std::size_t k_min = a.count("k_min", 1);
  const std::size_t k_max = a.count("k_max", 8);
  const std::size_t iters = a.count("iters", kNmfIters);
  const std::uint64_t seed = a.u64("seed", 0);
  if (k_min == 0 || k_max < k_min + 2) throw UsageError("elbow needs 1 <= k-min and k-max >= k-min + 2");
  claim_output(path, a.flag("force"));
  std::vector<std::size_t> ks;
  for (std::size_t k = k_min; k <= k_max; ++k) ks.push_back(k);
  const ElbowResult r = elbow_select(gm.g, ks, iters, seed);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_elbow_csv(path, r.curve);
  for (const auto& p : r.curve) out << "  k " << p.k << ": kl " << fmt_full(p.kl) << '\n';
  out << "elbow: k* = " << r.k_star << '\n';
  return r.k_star;
}

int cmd_elbow(const Args& a, std::ostream& out) {
  do_elbow(a, out);
  return 0;
}

int cmd_nmf(const Args& a, std::ostream& out) {
  const std::filesystem::path dir = a.str("out");
  const GateMatrix gm = load_gate_matrix(a.str("gates"));
  const std::size_t k = a.count("k", 4);
  const std::size_t iters = a.count("iters", kNmfIters);
  const std::uint64_t seed = a.u64("seed", 0);
  claim_output(dir, a.flag("force"));
  Rng rng(seed);
  const NmfFactors f = nmf_kl(gm.g, iters, nndsvda_init(gm.g, k, rng));
  const NmfSummary summary{k, kl_divergence(gm.g, f.s, f.l), iters};
  save_nmf(dir, f, summary);
  out << "nmf: k " << k << ", " << iters << " iterations, kl " << fmt_full(summary.final_kl)
      << " -> " << dir.string() << '\n';
  return 0;
}

std::optional<double> do_aggregate(const Args& a, std::ostream& out) {
  const std::filesystem::path dir = a.str("out");
  const GateMatrix gm = load_gate_matrix(a.str("gates"));
  const NmfFactors f = load_nmf(a.str("nmf"));
  std::optional<Dataset> d;
  if (a.has("data")) d = load_data(a.str("data"));
  std::size_t regions = 0;
  for (const auto& l : gm.locations) regions = std::max(regions, l.region + 1);
  if (d) regions = std::max(regions, d->bundle.data.region_count);
  regions = a.count("regions", regions);
  claim_output(dir, a.flag("force"));

  std::vector<std::size_t> ids;
  for (const auto& l : gm.locations) ids.push_back(l.region);
  const RegionAggregate agg = aggregate_by_region(f, ids, regions);
  std::filesystem::create_directories(dir);
  save_matrix((dir / "aggregate.txt").string(), agg.mean);
  {
    std::ofstream os(dir / "regions.csv");
    os << "region,present\n";
    for (std::size_t r = 0; r < regions; ++r) os << r << ',' << (agg.present[r] ? 1 : 0) << '\n';
  }
  out << "aggregate: " << agg.mean.shape_str() << " -> " << dir.string() << '\n';

  if (d && d->world.mixing.cols() == agg.mean.rows() && d->world.mixing.rows() == regions) {
    const ComponentMatch cm = component_match(agg.mean, d->world.mixing);
    KeyValues kv;
    kv["mean_correlation"] = fmt_full(cm.mean_correlation);
    for (std::size_t i = 0; i < cm.assignment.size(); ++i) {
      kv["component_" + std::to_string(i)] = std::to_string(cm.assignment[i]);
      kv["correlation_" + std::to_string(i)] = fmt_full(cm.correlation[i]);
    }
    write_kv(dir / "match.txt", kv);
    out << "  planted match: mean pearson " << fmt_full(cm.mean_correlation) << '\n';
    return cm.mean_correlation;
  }
  return std::nullopt;
}

int cmd_aggregate(const Args& a, std::ostream& out) {
  do_aggregate(a, out);
  return 0;
}

int cmd_map(const Args& a, std::ostream& out) {
  const std::filesystem::path dir = a.str("out");
  const GateMatrix gm = load_gate_matrix(a.str("gates"));
  const NmfFactors f = load_nmf(a.str("nmf"));
  MapStyle style;
  style.radius = a.real("radius", style.radius);
  style.color = a.str("color", style.color);
  std::vector<std::size_t> comps;
  if (a.has("component")) {
    comps.push_back(a.count("component", 0));
  } else {
    for (std::size_t i = 0; i < f.k(); ++i) comps.push_back(i);
  }
  claim_output(dir, a.flag("force"));
  std::filesystem::create_directories(dir);
  for (std::size_t c : comps) {
    const std::string stem = "component_" + std::to_string(c);
    export_map_csv(f, gm.locations, c, dir / (stem + ".csv"));
    export_map_svg(make_map_layer(f, gm.locations, c), dir / (stem + ".svg"), style);
  }
  out << "map: " << comps.size() << " component map(s) -> " << dir.string() << '\n';
  return 0;
}

int cmd_heatmap(const Args& a, std::ostream& out) {
  const std::filesystem::path path = a.str("out");
  const Matrix agg = load_matrix((std::filesystem::path(a.str("aggregate")) / "aggregate.txt").string());
  claim_output(path, a.flag("force"));
  auto order = [&](Axis axis, std::size_t n) {
    if (n < 2) return std::vector<std::size_t>(n, 0);
    return cluster_order(agg, axis).order;
  };
  const auto rows = order(Axis::rows, agg.rows());
  const auto cols = order(Axis::cols, agg.cols());
  export_heatmap_svg(agg, rows, cols, {}, {}, path);
  out << "heatmap: " << agg.shape_str() << " -> " << path.string() << '\n';
  return 0;
}

int cmd_grad_check(const Args& a, std::ostream& out) {
  const std::uint64_t seed = a.u64("seed", 0);
  const std::size_t dims = a.count("dims", 8);
  const std::size_t rank = a.count("rank", 4);
  const std::size_t sites = a.count("sites", 4);
  const std::size_t hidden = a.count("hidden", kDefaultGateHidden);
  const double tol = a.real("tol", 1e-4);
  const GradCheck g = random_gradient_check(seed, sites, dims, rank, hidden);
  std::map<std::string, double> by_kind;
  for (const auto& [name, err] : g.rel_error) {
    const std::string kind = name.substr(name.find('.') + 1);
    by_kind[kind] = std::max(by_kind[kind], err);
  }
  for (const auto& [kind, err] : by_kind) out << "  " << kind << ": " << fmt_full(err) << '\n';
  out << "max relative error: " << fmt_full(g.max_rel_error) << '\n';
  return g.max_rel_error <= tol ? 0 : 1;
}

std::string utc_stamp(const char* fmt) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

int cmd_demo(const Args& a, std::ostream& out) {
  const std::uint64_t seed = a.u64("seed", 1);
  const std::filesystem::path root = a.str("out_root", "runs");
  const std::string epochs = std::to_string(a.count("epochs", TrainConfig{}.epochs));
  const std::string n = std::to_string(a.count("n", 4000));
  const std::string rank = std::to_string(a.count("rank", 8));
  const std::string s = std::to_string(seed);
  const std::filesystem::path dir =
      root / ("demo-seed" + s + "-" + utc_stamp("%Y%m%dT%H%M%SZ"));
  claim_output(dir, a.flag("force"));
  std::filesystem::create_directories(dir);
  out << "demo: run directory " << dir.string() << '\n';

  auto p = [&](const char* rel) { return (dir / rel).string(); };
  cmd_gen_data(Args({{"out", p("data")}, {"seed", s}, {"n", n}}), out);
  const KeyValues train_common{{"data", p("data")}, {"seed", s}, {"epochs", epochs}, {"rank", rank}};
  KeyValues tg = train_common, tl = train_common;
  tg["out"] = p("gloria");
  tg["mode"] = "gloria";
  tl["out"] = p("lora");
  tl["mode"] = "lora";
  do_train(Args(tg), out);
  do_train(Args(tl), out);
  const double mse_g =
      do_eval(Args({{"model", p("gloria")}, {"data", p("data")}, {"out", p("eval/gloria.txt")}}), out).overall;
  const double mse_l =
      do_eval(Args({{"model", p("lora")}, {"data", p("data")}, {"out", p("eval/lora.txt")}}), out).overall;
  const double mse_f = do_eval(Args({{"model", p("gloria")}, {"data", p("data")}, {"mode", "frozen"},
                                     {"out", p("eval/frozen.txt")}}),
                               out).overall;
  cmd_extract_gates(Args({{"model", p("gloria")}, {"data", p("data")}, {"out", p("gates")}}), out);
  const std::size_t k = do_elbow(Args({{"gates", p("gates")}, {"out", p("elbow.csv")}}), out);
  cmd_nmf(Args({{"gates", p("gates")}, {"k", std::to_string(k)}, {"out", p("nmf")}}), out);
  const auto match = do_aggregate(
      Args({{"gates", p("gates")}, {"nmf", p("nmf")}, {"data", p("data")}, {"out", p("aggregate")}}), out);
  cmd_map(Args({{"gates", p("gates")}, {"nmf", p("nmf")}, {"out", p("maps")}}), out);
  cmd_heatmap(Args({{"aggregate", p("aggregate")}, {"out", p("heatmap.svg")}}), out);

  KeyValues manifest;
  manifest["created"] = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
  manifest["seed"] = s;
  manifest["n"] = n;
  manifest["epochs"] = epochs;
  manifest["rank"] = rank;
  manifest["k_star"] = std::to_string(k);
  manifest["val_mse_gloria"] = fmt_full(mse_g);
  manifest["val_mse_lora"] = fmt_full(mse_l);
  manifest["val_mse_frozen"] = fmt_full(mse_f);
  manifest["planted_match"] = match ? fmt_full(*match) : "n/a";
  write_kv(dir / "manifest.txt", manifest);
  out << "demo: done, val mse gloria " << fmt_full(mse_g) << ", lora " << fmt_full(mse_l)
      << ", frozen " << fmt_full(mse_f) << '\n';
  return 0;
}

// ---- command table -----------------------------------------------------------------------

struct FlagSpec {
  std::string name;  // kebab-case, without dashes
  std::string help;
  std::string def;   // shown in --help; empty when there is no default
  bool is_flag = false;
};

struct CommandSpec {
  std::string name;
  std::string help;
  std::vector<FlagSpec> flags;
  std::function<int(const Args&, std::ostream&)> fn;
};

std::vector<FlagSpec> world_flags() {
  const WorldSpec w;
  return {
      {"preset", "world preset: default or extrapolation (4x4 grid, quadrants)", "default"},
      {"regions", "number of map regions", std::to_string(w.regions)},
      {"k-true", "number of planted components", std::to_string(w.k_true)},
      {"sites", "adaptation sites in the backbone", std::to_string(w.sites)},
      {"dim", "feature dimension", std::to_string(w.dim)},
      {"mixing", "mixing style: dominant, bilinear, quadrants, identity, ones", to_string(w.mixing)},
      {"offdiag-max", "upper bound of off-diagonal dominant mixing weights", fmt_short(w.offdiag_max)},
      {"component-scale", "magnitude of the planted rank-1 perturbations", fmt_short(w.component_scale)},
      {"sigma-c", "coordinate jitter around region centers", fmt_short(w.sigma_c)},
      {"sigma-y", "target noise", fmt_short(w.sigma_y)},
  };
}

std::vector<FlagSpec> train_flags() {
  const TrainConfig c;
  return {
      {"mode", "lora, gloria or full", to_string(c.mode)},
      {"rank", "adapter rank", "8"},
      {"hidden", "gate MLP hidden width", std::to_string(kDefaultGateHidden)},
      {"holdout", "region held out of train/val (all of it goes to test)", ""},
      {"base-lr", "peak learning rate", fmt_short(c.base_lr)},
      {"warmup-steps", "warmup steps of the inverse-sqrt schedule", std::to_string(c.warmup_steps)},
      {"lambda-orth", "orthonormality loss weight", fmt_short(c.lambda_orth)},
      {"lambda-sp", "sparsity loss weight", fmt_short(c.lambda_sp)},
      {"epochs", "training epochs", std::to_string(c.epochs)},
      {"batch-size", "samples per micro-batch", std::to_string(c.batch_size)},
      {"grad-accum", "micro-batches per optimizer step", std::to_string(c.grad_accum)},
      {"seed", "adapter init and shuffle seed (falls back to GLORIA_SEED)", std::to_string(c.seed)},
      {"warm-start-epochs", "lora-mode epochs before gating (gloria only)",
       std::to_string(c.warm_start_epochs)},
  };
}

std::vector<CommandSpec> commands() {
  const FlagSpec force{"force", "overwrite existing outputs", "", true};
  std::vector<CommandSpec> cmds;

  {
    std::vector<FlagSpec> f{{"out", "output dataset directory", ""},
                            {"seed", "world seed (falls back to GLORIA_SEED)", "0"},
                            {"sample-seed", "sampling and split seed", "same as --seed"},
                            {"n", "number of samples", "4000"}};
    for (auto& w : world_flags()) f.push_back(w);
    f.push_back(force);
    cmds.push_back({"gen-data", "Generate a planted geo-conditioned dataset", f, cmd_gen_data});
  }
  {
    std::vector<FlagSpec> f{{"data", "dataset directory from gen-data", ""},
                            {"out", "output run directory", ""}};
    for (auto& t : train_flags()) f.push_back(t);
    f.push_back(force);
    cmds.push_back({"train", "Train adapters on a dataset", f, cmd_train});
  }
  cmds.push_back({"eval",
                  "Evaluate a trained model (overall and per-region MSE)",
                  {{"model", "run directory from train", ""},
                   {"data", "dataset directory", ""},
                   {"split", "train, val, test or all", "val"},
                   {"mode", "override the trained mode (e.g. frozen)", ""},
                   {"out", "metrics file to write", ""},
                   force},
                  cmd_eval});
  cmds.push_back({"extract-gates",
                  "Stack gate outputs over dataset locations into a gate matrix",
                  {{"model", "run directory of a gloria model", ""},
                   {"data", "dataset directory", ""},
                   {"out", "output directory", ""},
                   {"max-locations", "maximum number of distinct locations", "488"},
                   force},
                  cmd_extract_gates});
  cmds.push_back({"nmf",
                  "KL-NMF of a gate matrix with NNDSVDA initialization",
                  {{"gates", "gate matrix directory", ""},
                   {"k", "number of components", "4"},
                   {"iters", "multiplicative-update iterations", std::to_string(kNmfIters)},
                   {"seed", "power-iteration seed", "0"},
                   {"out", "output directory", ""},
                   force},
                  cmd_nmf});
  cmds.push_back({"elbow",
                  "Reconstruction-loss curve over k and its elbow",
                  {{"gates", "gate matrix directory", ""},
                   {"k-min", "smallest k", "1"},
                   {"k-max", "largest k", "8"},
                   {"iters", "multiplicative-update iterations per k", std::to_string(kNmfIters)},
                   {"seed", "power-iteration seed", "0"},
                   {"out", "output CSV", ""},
                   force},
                  cmd_elbow});
  cmds.push_back({"aggregate",
                  "Average component loadings by region",
                  {{"gates", "gate matrix directory", ""},
                   {"nmf", "NMF directory", ""},
                   {"data", "dataset directory; enables matching against the planted mixing", ""},
                   {"regions", "region count", "from the data"},
                   {"out", "output directory", ""},
                   force},
                  cmd_aggregate});
  cmds.push_back({"map",
                  "Per-component geospatial maps (CSV and SVG)",
                  {{"gates", "gate matrix directory", ""},
                   {"nmf", "NMF directory", ""},
                   {"component", "single component index", "all"},
                   {"radius", "point radius in coordinate units", fmt_full(MapStyle{}.radius)},
                   {"color", "point color", MapStyle{}.color},
                   {"out", "output directory", ""},
                   force},
                  cmd_map});
  cmds.push_back({"heatmap",
                  "Clustered component-by-region heatmap (SVG)",
                  {{"aggregate", "aggregate directory", ""}, {"out", "output SVG", ""}, force},
                  cmd_heatmap});
  cmds.push_back({"grad-check",
                  "Finite-difference check of every analytic gradient on a random instance",
                  {{"seed", "instance seed (falls back to GLORIA_SEED)", "0"},
                   {"dims", "feature dimension", "8"},
                   {"rank", "adapter rank", "4"},
                   {"sites", "adaptation sites", "4"},
                   {"hidden", "gate MLP hidden width", std::to_string(kDefaultGateHidden)},
                   {"tol", "maximum accepted relative error", "0.0001"}},
                  cmd_grad_check});
  cmds.push_back({"demo",
                  "End-to-end pipeline into a timestamped run directory",
                  {{"seed", "seed for data and training (falls back to GLORIA_SEED)", "1"},
                   {"out-root", "parent of the run directory", "runs"},
                   {"n", "number of samples", "4000"},
                   {"epochs", "training epochs per model", std::to_string(TrainConfig{}.epochs)},
                   {"rank", "adapter rank", "8"},
                   force},
                  cmd_demo});
  return cmds;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"gloria: gated low-rank geo-conditioned adaptation toolkit", "gloria"};
  app.require_subcommand(1);
  const std::vector<CommandSpec> cmds = commands();
  std::vector<CLI::App*> subs;
  std::vector<std::vector<std::pair<std::string, CLI::Option*>>> options;
  for (const auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    std::vector<std::pair<std::string, CLI::Option*>> opts;
    for (const auto& f : c.flags) {
      CLI::Option* o = f.is_flag ? sub->add_flag("--" + f.name, f.help)
                                 : sub->add_option("--" + f.name, f.help);
      if (!f.def.empty()) o->default_str(f.def);
      opts.emplace_back(f.name, o);
    }
    opts.emplace_back("config", sub->add_option("--config", "key = value file supplying flags"));
    subs.push_back(sub);
    options.push_back(std::move(opts));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  std::size_t ci = 0;
  while (ci < subs.size() && !subs[ci]->parsed()) ++ci;
  if (ci == subs.size()) {
    err << "error: no command given\n";
    return 2;
  }
  const auto& opts = options[ci];
  auto find = [&](const std::string& name) -> CLI::Option* {
    for (const auto& [n, o] : opts)
      if (n == name) return o;
    return nullptr;
  };

  try {
    KeyValues kv;
    if (CLI::Option* cfg = find("config"); cfg->count() > 0) {
      for (const auto& [key, value] : read_kv(cfg->results().back())) {
        const std::string name = kebab(key);
        if (name == "config" || find(name) == nullptr) {
          throw UsageError("config key '" + key + "' is not a flag of " + cmds[ci].name);
        }
        kv[snake(name)] = value;
      }
    }
    for (const auto& [name, o] : opts) {
      if (name == "config" || o->count() == 0) continue;
      kv[snake(name)] = o->get_expected_max() == 0 ? "1" : o->results().back();
    }
    if (find("seed") != nullptr && kv.count("seed") == 0) {
      if (const char* env = std::getenv("GLORIA_SEED"); env != nullptr && *env != '\0') {
        kv["seed"] = env;
      }
    }
    return cmds[ci].fn(Args(std::move(kv)), out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\nRun with --help for more information.\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace gloria
