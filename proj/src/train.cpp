#include "gloria/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gloria/errors.hpp"

namespace gloria {

double warmup_lr(std::size_t step, double base_lr, std::size_t warmup) {
  if (step == 0) throw DomainError("warmup_lr: step must be >= 1");
  if (warmup == 0) throw DomainError("warmup_lr: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  if (step == warmup) return base_lr;
  return base_lr * std::sqrt(w) * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

void adam_step(AdamState& state, const std::vector<ParamRef>& params, const GradSet& grads,
               double lr) {
  for (const auto& p : params) {
    const auto it = grads.find(p.name);
    if (it == grads.end()) throw DimensionError("adam_step: no gradient for " + p.name);
    if (it->second.size() != p.values.size()) {
      throw DimensionError("adam_step: gradient for " + p.name + " has length " +
                           std::to_string(it->second.size()) + ", parameter has " +
                           std::to_string(p.values.size()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& p : params) {
    const Vector& g = grads.at(p.name);
    Vector& m = state.m[p.name];
    Vector& v = state.v[p.name];
    m.resize(g.size(), 0.0);
    v.resize(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.values[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

KeyValues train_config_to_kv(const TrainConfig& cfg) {
  KeyValues kv;
  kv["base_lr"] = fmt_full(cfg.base_lr);
  kv["warmup_steps"] = std::to_string(cfg.warmup_steps);
  kv["lambda_orth"] = fmt_full(cfg.lambda_orth);
  kv["lambda_sp"] = fmt_full(cfg.lambda_sp);
  kv["epochs"] = std::to_string(cfg.epochs);
  kv["batch_size"] = std::to_string(cfg.batch_size);
  kv["grad_accum"] = std::to_string(cfg.grad_accum);
  kv["seed"] = std::to_string(cfg.seed);
  kv["mode"] = to_string(cfg.mode);
  kv["warm_start_epochs"] = std::to_string(cfg.warm_start_epochs);
  return kv;
}

void apply_train_config(const KeyValues& kv, TrainConfig& cfg) {
  auto count = [&](const std::string& k) {
    const long long v = kv_int(kv, k);
    if (v < 0) throw InputError("config key '" + k + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  for (const auto& [key, value] : kv) {
    if (key == "base_lr") cfg.base_lr = kv_real(kv, key);
    else if (key == "warmup_steps") cfg.warmup_steps = count(key);
    else if (key == "lambda_orth") cfg.lambda_orth = kv_real(kv, key);
    else if (key == "lambda_sp") cfg.lambda_sp = kv_real(kv, key);
    else if (key == "epochs") cfg.epochs = count(key);
    else if (key == "batch_size") cfg.batch_size = count(key);
    else if (key == "grad_accum") cfg.grad_accum = count(key);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(count(key));
    else if (key == "mode") cfg.mode = parse_mode(value);
    else if (key == "warm_start_epochs") cfg.warm_start_epochs = count(key);
    else throw InputError("unknown config key '" + key + "'");
  }
}

void write_runlog(const std::filesystem::path& path, const RunLog& log) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "epoch,lr,train_loss,val_loss,orth_loss,mean_entropy\n";
  for (const auto& e : log) {
    os << e.epoch << ',' << fmt_full(e.lr) << ',' << fmt_full(e.train_loss) << ','
       << fmt_full(e.val_loss) << ',' << fmt_full(e.orth_loss) << ',' << fmt_full(e.mean_entropy)
       << '\n';
  }
}

RunLog read_runlog(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "epoch,lr,train_loss,val_loss,orth_loss,mean_entropy") {
    throw InputError(path.string() + ": unexpected run log header");
  }
  RunLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 6) throw InputError(path.string() + ": bad run log row");
    EpochLog e;
    e.epoch = static_cast<std::size_t>(std::stoull(f[0]));
    e.lr = parse_real(f[1]);
    e.train_loss = parse_real(f[2]);
    e.val_loss = parse_real(f[3]);
    e.orth_loss = parse_real(f[4]);
    e.mean_entropy = parse_real(f[5]);
    log.push_back(e);
  }
  return log;
}

EvalMetrics evaluate(const ToyBackbone& m, const GeoDataset& data) {
  if (data.empty()) throw InputError("evaluate: empty dataset");
  EvalMetrics out;
  std::vector<double> sums(data.region_count, 0.0);
  out.region_counts.assign(data.region_count, 0);
  double total = 0.0;
  for (const auto& s : data.samples) {
    const Vector pred = backbone_forward(m, s.x, s.c);
    const double l = task_loss(pred, s.y);
    total += l;
    sums.at(s.region) += l;
    ++out.region_counts[s.region];
  }
  out.count = data.size();
  out.overall = total / static_cast<double>(data.size());
  out.per_region.resize(data.region_count);
  for (std::size_t r = 0; r < data.region_count; ++r) {
    if (out.region_counts[r] == 0) {
      out.notices.push_back("region " + std::to_string(r) + " has no samples; omitted");
      continue;
    }
    out.per_region[r] = sums[r] / static_cast<double>(out.region_counts[r]);
  }
  return out;
}

double mean_gate_entropy(const ToyBackbone& m, const GeoDataset& data) {
  if (data.empty()) return 0.0;
  if (m.mode() == AdaptMode::lora) return 1.0;  // gamma == 1 everywhere
  if (m.mode() != AdaptMode::gloria) return 0.0;
  double total = 0.0;
  for (const auto& s : data.samples) {
    const Coord c = m.coord_bounds().scale(s.c);
    double site_mean = 0.0;
    for (const auto& site : m.sites()) site_mean += sparsity_loss(gate_forward(site.gate, c));
    total += site_mean / static_cast<double>(m.site_count());
  }
  return total / static_cast<double>(data.size());
}

namespace {

void accumulate(GradSet& into, const GradSet& g) {
  for (const auto& [k, v] : g) {
    Vector& dst = into[k];
    if (dst.empty()) dst.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] += v[i];
  }
}

void run_epochs(const TrainConfig& cfg, ToyBackbone& m, const GeoDataset& data,
                const GeoDataset& val, std::size_t epochs, Rng& shuffle_rng, AdamState& adam,
                std::size_t& global_step, RunLog& log) {
  const bool gloria = m.mode() == AdaptMode::gloria;
  const LossWeights weights{cfg.lambda_orth, cfg.lambda_sp, false};
  const std::size_t chunk = cfg.batch_size * cfg.grad_accum;
  std::vector<std::size_t> order(data.size());
  ForwardCache cache;

  for (std::size_t e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double task_sum = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += chunk) {
      const std::size_t end = std::min(order.size(), start + chunk);
      GradSet grads;
      // Micro-batches of batch_size are accumulated in sample order, then averaged once.
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = data.samples[order[k]];
        backbone_forward(m, s.x, s.c, &cache);
        const double l = task_loss(cache.prediction, s.y);
        if (!std::isfinite(l)) {
          throw NumericError("train: non-finite loss at epoch " + std::to_string(log.size() + 1));
        }
        task_sum += l;
        accumulate(grads, backbone_backward(m, cache, s.y, weights));
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& [k, v] : grads)
        for (double& g : v) g *= inv;
      if (gloria) add_orth_gradient(m, cfg.lambda_orth, grads);

      ++global_step;
      lr = warmup_lr(global_step, cfg.base_lr, cfg.warmup_steps);
      adam_step(adam, trainable_params(m), grads, lr);
    }

    EpochLog entry;
    entry.epoch = log.size() + 1;
    entry.lr = lr;
    entry.train_loss = task_sum / static_cast<double>(data.size());
    entry.val_loss = val.empty() ? 0.0 : evaluate(m, val).overall;
    entry.orth_loss = (m.mode() == AdaptMode::lora || gloria) ? orth_loss_sum(m) : 0.0;
    entry.mean_entropy = mean_gate_entropy(m, val.empty() ? data : val);
    if (!std::isfinite(entry.val_loss) || !std::isfinite(entry.orth_loss)) {
      throw NumericError("train: non-finite metrics at epoch " + std::to_string(entry.epoch));
    }
    log.push_back(entry);
  }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, ToyBackbone m, const GeoDataset& data,
                  const GeoDataset& val) {
  if (data.empty()) throw InputError("train: empty training data");
  if (cfg.batch_size == 0 || cfg.grad_accum == 0) {
    throw InputError("train: batch_size and grad_accum must be >= 1");
  }
  if (cfg.warmup_steps == 0) throw InputError("train: warmup_steps must be >= 1");
  if (cfg.mode == AdaptMode::frozen) throw InputError("train: frozen mode has no trainable parameters");
  if (cfg.lambda_orth < 0 || cfg.lambda_sp < 0) throw InputError("train: lambdas must be >= 0");

  TrainResult out;
  if (cfg.epochs == 0 && cfg.warm_start_epochs == 0) {
    m.set_mode(cfg.mode);
    out.model = std::move(m);
    return out;
  }
  Rng shuffle_rng = Rng(cfg.seed).fork(0x5348);
  std::size_t global_step = 0;

  if (cfg.mode == AdaptMode::gloria && cfg.warm_start_epochs > 0) {
    AdamState warm;
    m.set_mode(AdaptMode::lora);
    run_epochs(cfg, m, data, val, cfg.warm_start_epochs, shuffle_rng, warm, global_step, out.log);
  }
  AdamState adam;
  m.set_mode(cfg.mode);
  run_epochs(cfg, m, data, val, cfg.epochs, shuffle_rng, adam, global_step, out.log);
  out.model = std::move(m);
  return out;
}

}  // namespace gloria
