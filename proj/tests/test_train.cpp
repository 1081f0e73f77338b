#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gloria/cli.hpp"
#include "gloria/errors.hpp"
#include "gloria/train.hpp"

using namespace gloria;

namespace {

struct Small {
  PlantedWorld world;
  Splits splits;
  ToyBackbone init;
};

Small small_task(std::uint64_t seed, std::size_t n = 200, WorldSpec spec = {}) {
  spec.dim = 8;
  spec.sites = 2;
  PlantedData p = make_planted_data(spec, seed, seed, n);
  ToyBackbone init = initial_model(p.world, p.splits.train, 4, 8, seed);
  return {std::move(p.world), std::move(p.splits), std::move(init)};
}

// Textbook Adam written independently of the library version.
struct RefAdam {
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& p, const std::vector<double>& g, double lr) {
    if (m.empty()) m.assign(p.size(), 0.0), v.assign(p.size(), 0.0);
    ++t;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      p[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

}  // namespace

TEST_CASE("warmup schedule") {
  CHECK(warmup_lr(1500, 0.001, 1500) == 0.001);
  CHECK(warmup_lr(1, 0.001, 1500) == doctest::Approx(0.001 / 1500).epsilon(1e-12));
  CHECK(warmup_lr(6000, 0.001, 1500) == doctest::Approx(0.0005).epsilon(1e-12));
  CHECK(warmup_lr(750, 0.001, 1500) == doctest::Approx(0.0005).epsilon(1e-12));
  CHECK_THROWS_AS(warmup_lr(0, 0.001, 1500), DomainError);
  double prev = 0.0;
  for (std::size_t s = 1; s <= 1500; ++s) {
    const double lr = warmup_lr(s, 0.001, 1500);
    CHECK(lr > prev);
    prev = lr;
  }
}

TEST_CASE("adam: zero gradient, first step and a reference trace") {
  Vector p{1.0, -2.0, 0.5};
  AdamState st;
  adam_step(st, {{"p", p}}, {{"p", Vector(3, 0.0)}}, 0.01);
  CHECK(p == Vector{1.0, -2.0, 0.5});

  Vector q{0.0, 0.0, 0.0};
  AdamState st2;
  adam_step(st2, {{"q", q}}, {{"q", Vector{0.3, -4.0, 1e-3}}}, 0.01);
  CHECK(q[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(q[1] == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(q[2] == doctest::Approx(-0.01).epsilon(1e-4));

  Rng rng(3);
  Vector a(6), b(4);
  for (double& v : a) v = rng.normal();
  for (double& v : b) v = rng.normal();
  std::vector<double> ra(a), rb(b);
  RefAdam refa, refb;
  AdamState st3;
  for (int t = 1; t <= 100; ++t) {
    Vector ga(6), gb(4);
    for (double& v : ga) v = rng.normal();
    for (double& v : gb) v = rng.normal();
    const double lr = warmup_lr(static_cast<std::size_t>(t), 0.01, 10);
    adam_step(st3, {{"a", a}, {"b", b}}, {{"a", ga}, {"b", gb}}, lr);
    refa.step(ra, ga, lr);
    refb.step(rb, gb, lr);
  }
  for (int i = 0; i < 6; ++i) CHECK(std::abs(a[i] - ra[i]) < 1e-10);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(b[i] - rb[i]) < 1e-10);

  CHECK_THROWS_AS(adam_step(st3, {{"a", a}}, {{"b", Vector(4)}}, 0.1), DimensionError);
  CHECK_THROWS_AS(adam_step(st3, {{"a", a}}, {{"a", Vector(5)}}, 0.1), DimensionError);
}

TEST_CASE("train config round-trips through key-value text") {
  TrainConfig c;
  c.base_lr = 0.002;
  c.epochs = 7;
  c.mode = AdaptMode::lora;
  c.seed = 99;
  TrainConfig back;
  apply_train_config(train_config_to_kv(c), back);
  CHECK(train_config_to_kv(back) == train_config_to_kv(c));
  CHECK_THROWS_AS(apply_train_config({{"learning_rate", "1"}}, back), InputError);
  CHECK_THROWS_AS(apply_train_config({{"epochs", "-3"}}, back), InputError);
  const TrainConfig d;
  CHECK(d.lambda_sp == 5.0);
  CHECK(d.lambda_orth == 0.8);
  CHECK(d.base_lr == 0.001);
  CHECK(d.warmup_steps == 1500);
}

TEST_CASE("zero epochs returns the model unchanged; empty data is rejected") {
  const Small s = small_task(1);
  TrainConfig c;
  c.epochs = 0;
  const TrainResult r = train(c, s.init, s.splits.train, s.splits.val);
  CHECK(r.model == s.init);
  CHECK(r.log.empty());
  CHECK_THROWS_AS(train(TrainConfig{}, s.init, GeoDataset{}), InputError);
  c.mode = AdaptMode::frozen;
  c.epochs = 1;
  CHECK_THROWS_AS(train(c, s.init, s.splits.train), InputError);
}

TEST_CASE("training is deterministic and never touches frozen tensors") {
  const Small s = small_task(2);
  for (AdaptMode mode : {AdaptMode::lora, AdaptMode::gloria}) {
    TrainConfig c;
    c.epochs = 3;
    c.mode = mode;
    c.seed = 5;
    const TrainResult a = train(c, s.init, s.splits.train, s.splits.val);
    const TrainResult b = train(c, s.init, s.splits.train, s.splits.val);
    CHECK(a.log == b.log);
    CHECK(a.model == b.model);
    CHECK(a.log.size() == 3);
    for (std::size_t i = 0; i < s.init.site_count(); ++i) {
      CHECK(a.model.site(i).weight == s.init.site(i).weight);
      CHECK(a.model.site(i).bias == s.init.site(i).bias);
      CHECK(!(a.model.site(i).pair.a == s.init.site(i).pair.a));
    }
    if (mode == AdaptMode::lora) {
      for (std::size_t i = 0; i < s.init.site_count(); ++i) {
        CHECK(a.model.site(i).gate.w2 == s.init.site(i).gate.w2);
      }
    }
  }
}

TEST_CASE("gradient accumulation matches the equivalent larger batch") {
  const Small s = small_task(3);
  TrainConfig big;
  big.epochs = 2;
  big.batch_size = 16;
  TrainConfig acc = big;
  acc.batch_size = 8;
  acc.grad_accum = 2;
  const TrainResult a = train(big, s.init, s.splits.train);
  const TrainResult b = train(acc, s.init, s.splits.train);
  for (std::size_t i = 0; i < s.init.site_count(); ++i) {
    const auto& pa = a.model.site(i).pair.a.values();
    const auto& pb = b.model.site(i).pair.a.values();
    for (std::size_t j = 0; j < pa.size(); ++j) CHECK(std::abs(pa[j] - pb[j]) < 1e-9);
    const auto& ga = a.model.site(i).gate.w1.values();
    const auto& gb = b.model.site(i).gate.w1.values();
    for (std::size_t j = 0; j < ga.size(); ++j) CHECK(std::abs(ga[j] - gb[j]) < 1e-9);
  }
}

TEST_CASE("default config loss trajectories stay finite over 50 seeds") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Small s = small_task(seed, 100);
    TrainConfig c;
    c.seed = seed;
    c.epochs = 10;
    const TrainResult r = train(c, s.init, s.splits.train, s.splits.val);
    for (const auto& e : r.log) {
      CHECK(std::isfinite(e.train_loss));
      CHECK(std::isfinite(e.val_loss));
      CHECK(std::isfinite(e.orth_loss));
      CHECK(std::isfinite(e.mean_entropy));
    }
  }
}

TEST_CASE("regularizers do their job") {
  const Small s = small_task(4, 400);
  TrainConfig c;
  c.epochs = 15;
  TrainConfig no_sp = c;
  no_sp.lambda_sp = 0.0;
  const TrainResult with = train(c, s.init, s.splits.train, s.splits.val);
  const TrainResult without = train(no_sp, s.init, s.splits.train, s.splits.val);
  CHECK(with.log.back().mean_entropy < without.log.back().mean_entropy);

  TrainConfig no_orth = c;
  no_orth.lambda_orth = 0.0;
  const TrainResult no_o = train(no_orth, s.init, s.splits.train, s.splits.val);
  CHECK(orth_residual_sum(with.model) < orth_residual_sum(no_o.model));
}

TEST_CASE("evaluate: perfect model, frozen energy and region recombination") {
  WorldSpec spec;
  spec.dim = 6;
  spec.sites = 3;
  spec.sigma_y = 0.0;
  const PlantedWorld w = gen_world(spec, 7);
  Rng rng(8);
  const GeoDataset data = sample_dataset(w, 300, rng);

  // A full-mode model carrying region 0's weights is exact on region 0.
  Rng init(9);
  ToyBackbone exact = make_backbone(w, 2, 4, init, AdaptMode::frozen);
  for (std::size_t s = 0; s < exact.site_count(); ++s) exact.mutable_site(s).weight = region_weight(w, 0, s);
  GeoDataset r0;
  r0.region_count = data.region_count;
  for (const auto& smp : data.samples)
    if (smp.region == 0) r0.samples.push_back(smp);
  const EvalMetrics em = evaluate(exact, r0);
  CHECK(em.overall < 1e-20);
  CHECK(em.per_region[0].has_value());
  CHECK(!em.per_region[1].has_value());
  CHECK(em.notices.size() == data.region_count - 1);

  // Frozen base: loss is the energy of the planted perturbation, computed directly.
  ToyBackbone frozen = make_backbone(w, 2, 4, init, AdaptMode::frozen);
  double direct = 0.0;
  for (const auto& smp : data.samples) {
    Vector h = smp.x;
    for (std::size_t s = 0; s < w.base_weights.size(); ++s) {
      Vector y = w.base_biases[s];
      for (std::size_t o = 0; o < y.size(); ++o)
        for (std::size_t i = 0; i < h.size(); ++i) y[o] += w.base_weights[s](o, i) * h[i];
      if (s + 1 < w.base_weights.size())
        for (double& v : y) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
      h = y;
    }
    double se = 0.0;
    for (std::size_t o = 0; o < h.size(); ++o) se += (h[o] - smp.y[o]) * (h[o] - smp.y[o]);
    direct += se / static_cast<double>(h.size());
  }
  direct /= static_cast<double>(data.size());
  const EvalMetrics fm = evaluate(frozen, data);
  CHECK(fm.overall == doctest::Approx(direct).epsilon(1e-12));
  CHECK(fm.overall > 0.0);

  double weighted = 0.0;
  for (std::size_t r = 0; r < data.region_count; ++r) {
    weighted += *fm.per_region[r] * static_cast<double>(fm.region_counts[r]);
  }
  CHECK(weighted / static_cast<double>(data.size()) == doctest::Approx(fm.overall).epsilon(1e-12));
  CHECK_THROWS_AS(evaluate(frozen, GeoDataset{}), InputError);
}

TEST_CASE("run logs round-trip") {
  const Small s = small_task(5);
  TrainConfig c;
  c.epochs = 2;
  const TrainResult r = train(c, s.init, s.splits.train, s.splits.val);
  const auto path = std::filesystem::temp_directory_path() / "gloria_test_runlog.csv";
  write_runlog(path, r.log);
  CHECK(read_runlog(path) == r.log);
  std::filesystem::remove(path);
}
