#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gloria/adapter.hpp"
#include "gloria/errors.hpp"

using namespace gloria;

namespace {

Matrix randn(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = s * rng.normal();
  return m;
}

Vector randv(std::size_t n, Rng& rng, double s = 1.0) {
  Vector v(n);
  for (double& x : v) x = s * rng.normal();
  return v;
}

GloriaSite random_site(std::size_t d_in, std::size_t d_out, std::size_t r, std::size_t h, Rng& rng) {
  GloriaSite s = make_site(randn(d_out, d_in, rng, 0.3), randv(d_out, rng, 0.1), r, h, rng);
  s.gate.w2 = randn(r, h, rng, 0.5);
  s.gate.b2 = randv(r, rng, 0.5);
  return s;
}

// Hand evaluation of the two gate layers, written out element by element.
Vector gate_by_hand(const GateMlp& g, double lat, double lng) {
  Vector hid(g.hidden());
  for (std::size_t i = 0; i < g.hidden(); ++i) {
    const double z = g.w1(i, 0) * lat + g.w1(i, 1) * lng + g.b1[i];
    hid[i] = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
  }
  Vector out(g.rank());
  for (std::size_t j = 0; j < g.rank(); ++j) {
    double z = g.b2[j];
    for (std::size_t i = 0; i < g.hidden(); ++i) z += g.w2(j, i) * hid[i];
    out[j] = std::log1p(std::exp(z));
  }
  return out;
}

double max_abs(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("mode names round-trip") {
  for (AdaptMode m : {AdaptMode::frozen, AdaptMode::lora, AdaptMode::gloria, AdaptMode::full}) {
    CHECK(parse_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_mode("dora"), InputError);
}

TEST_CASE("coordinate scaling maps bounds to [-1, 1] and clamps") {
  const CoordBounds b{10.0, 20.0, -5.0, 5.0};
  CHECK(b.scale({10.0, -5.0}) == Coord{-1.0, -1.0});
  CHECK(b.scale({20.0, 5.0}) == Coord{1.0, 1.0});
  CHECK(b.scale({15.0, 0.0}) == Coord{0.0, 0.0});
  CHECK(b.scale({100.0, -100.0}) == Coord{1.0, -1.0});
  const CoordBounds flat{3.0, 3.0, 0.0, 1.0};
  CHECK(flat.scale({3.0, 0.5}).lat == 0.0);
}

TEST_CASE("neutral gate gives ln 2 everywhere") {
  Rng rng(1);
  const GateMlp g = make_gate(8, 32, rng);
  CHECK(g.w1.rows() == 32);
  CHECK(g.w2.rows() == 8);
  for (Coord c : {Coord{0, 0}, Coord{1, -1}, Coord{-0.3, 0.9}}) {
    for (double v : gate_forward(g, c)) CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }
}

TEST_CASE("gate forward matches a hand evaluation and stays positive") {
  Rng rng(7);
  GateMlp g = make_gate(4, 32, rng);
  g.w2 = randn(4, 32, rng);
  g.b2 = randv(4, rng);
  const Vector got = gate_forward(g, {0.3, -0.4});
  CHECK(max_abs(got, gate_by_hand(g, 0.3, -0.4)) < 1e-13);

  GateMlp neg = g;
  neg.w2 = Matrix(4, 32);
  neg.b2.assign(4, -50.0);
  for (double v : gate_forward(neg, {0.1, 0.2})) {
    CHECK(v > 0.0);
    CHECK(v == doctest::Approx(1.9287498479639178e-22).epsilon(1e-6));
  }

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng r(seed);
    GateMlp q = make_gate(5, 16, r);
    q.w2 = randn(5, 16, r, 10.0);
    q.b2 = randv(5, r, 10.0);
    for (double v : gate_forward(q, {r.uniform(-1, 1), r.uniform(-1, 1)})) CHECK(v > 0.0);
  }
}

TEST_CASE("gloria forward special cases and the rank-1 sum") {
  Rng rng(2);
  const GloriaSite s = random_site(6, 5, 3, 8, rng);
  const Vector x = randv(6, rng);
  CHECK(max_abs(gloria_forward(s, x, Vector(3, 1.0)), lora_forward(s, x)) < 1e-12);
  CHECK(max_abs(gloria_forward(s, x, Vector(3, 0.0)), base_forward(s, x)) < 1e-15);

  const Vector gamma{0.2, 1.7, 0.05};
  Vector expect = base_forward(s, x);
  for (std::size_t i = 0; i < 3; ++i) {
    double bx = 0.0;
    for (std::size_t j = 0; j < 6; ++j) bx += s.pair.b(i, j) * x[j];
    for (std::size_t o = 0; o < 5; ++o) expect[o] += gamma[i] * s.pair.a(o, i) * bx;
  }
  CHECK(max_abs(gloria_forward(s, x, gamma), expect) < 1e-10);
  CHECK_THROWS_AS(gloria_forward(s, x, Vector(2, 1.0)), DimensionError);
  CHECK_THROWS_AS(lora_forward(s, Vector(5)), DimensionError);
}

TEST_CASE("gloria forward is linear in gamma") {
  Rng rng(3);
  const GloriaSite s = random_site(7, 4, 3, 8, rng);
  const Vector x = randv(7, rng);
  const Vector base = base_forward(s, x);
  const Vector g1{0.3, 0.1, 2.0}, g2{1.0, 0.7, 0.2};
  const double al = 0.6, be = -1.3;
  Vector mix(3);
  for (int i = 0; i < 3; ++i) mix[i] = al * g1[i] + be * g2[i];
  const Vector f1 = gloria_forward(s, x, g1), f2 = gloria_forward(s, x, g2), fm = gloria_forward(s, x, mix);
  for (int o = 0; o < 4; ++o) {
    CHECK(std::abs((fm[o] - base[o]) - al * (f1[o] - base[o]) - be * (f2[o] - base[o])) < 1e-9);
  }
}

TEST_CASE("lora forward matches explicit assembly") {
  Rng rng(4);
  const GloriaSite s = random_site(5, 6, 2, 4, rng);
  const Vector x = randv(5, rng);
  Matrix w = s.weight;
  for (std::size_t o = 0; o < 6; ++o)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t k = 0; k < 2; ++k) w(o, i) += s.pair.a(o, k) * s.pair.b(k, i);
  Vector expect(6);
  for (std::size_t o = 0; o < 6; ++o) {
    expect[o] = s.bias[o];
    for (std::size_t i = 0; i < 5; ++i) expect[o] += w(o, i) * x[i];
  }
  CHECK(max_abs(lora_forward(s, x), expect) < 1e-12);

  GloriaSite z = s;
  z.pair.a = Matrix(6, 2);
  CHECK(max_abs(lora_forward(z, x), base_forward(s, x)) == 0.0);

  GloriaSite id = make_site(Matrix::identity(3), Vector{1, 2, 3}, 3, 4, rng);
  id.pair.a = Matrix::identity(3);
  id.pair.b = Matrix::identity(3);
  const Vector y = lora_forward(id, Vector{1, 1, 1});
  CHECK(y == Vector{3, 4, 5});
}

TEST_CASE("orth loss: orthonormal, hand case and elementwise oracle") {
  LowRankPair p{Matrix(5, 2), Matrix(2, 4)};
  p.a(0, 0) = p.a(1, 1) = 1.0;
  p.b(0, 0) = p.b(1, 1) = 1.0;
  CHECK(std::abs(orth_loss(p)) < 1e-12);

  LowRankPair dup = p;
  dup.a(1, 1) = 0.0;
  dup.a(0, 1) = 1.0;
  CHECK(orth_loss(dup) == doctest::Approx(2.0));
  CHECK(orth_residual_a(dup) == doctest::Approx(std::sqrt(2.0)));

  Rng rng(5);
  const LowRankPair q{randn(6, 3, rng), randn(3, 5, rng)};
  double expect = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double ata = 0.0, bbt = 0.0;
      for (std::size_t k = 0; k < 6; ++k) ata += q.a(k, i) * q.a(k, j);
      for (std::size_t k = 0; k < 5; ++k) bbt += q.b(i, k) * q.b(j, k);
      const double d = i == j ? 1.0 : 0.0;
      expect += (ata - d) * (ata - d) + (bbt - d) * (bbt - d);
    }
  CHECK(orth_loss(q) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("orth gradient matches finite differences") {
  Rng rng(6);
  const LowRankPair p{randn(6, 3, rng), randn(3, 5, rng)};
  const OrthGrads g = orth_loss_grad(p);
  const ScalarFn fa = [&](std::span<const double> v) {
    LowRankPair q = p;
    std::copy(v.begin(), v.end(), q.a.values().begin());
    return orth_loss(q);
  };
  const ScalarFn fb = [&](std::span<const double> v) {
    LowRankPair q = p;
    std::copy(v.begin(), v.end(), q.b.values().begin());
    return orth_loss(q);
  };
  const Vector av(p.a.values().begin(), p.a.values().end());
  const Vector bv(p.b.values().begin(), p.b.values().end());
  CHECK(relative_error(g.a.values(), central_diff(fa, av)) < 1e-7);
  CHECK(relative_error(g.b.values(), central_diff(fb, bv)) < 1e-7);
}

TEST_CASE("sparsity loss analytics") {
  CHECK(std::abs(sparsity_loss(Vector(8, 0.37)) - 1.0) < 1e-9);
  CHECK(std::abs(sparsity_loss(Vector(2, 5.0)) - 1.0) < 1e-9);
  Vector onehot(8, 0.0);
  onehot[3] = 1.0;
  CHECK(sparsity_loss(onehot) <= 1e-9);
  CHECK(sparsity_loss(Vector{4.2}) == 0.0);
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    Vector g(6);
    for (double& v : g) v = std::exp(3.0 * rng.normal());
    const double s = sparsity_loss(g);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0 + 1e-12);
    CHECK(s < 1.0 - 1e-9);  // a random draw is never exactly uniform
  }
}

TEST_CASE("sparsity gradient matches finite differences") {
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    Vector g(5);
    for (double& v : g) v = 0.1 + rng.uniform();
    const ScalarFn f = [](std::span<const double> v) { return sparsity_loss(v); };
    CHECK(relative_error(sparsity_loss_grad(g), central_diff(f, g)) < 1e-7);
  }
}

TEST_CASE("site backward: zero upstream and detached-gate gradient") {
  Rng rng(10);
  const GloriaSite s = random_site(4, 3, 2, 6, rng);
  const Vector x = randv(4, rng);
  SiteCache cache;
  site_forward(s, AdaptMode::gloria, x, {0.2, -0.1}, &cache);

  const SiteGrads z = site_backward(s, Vector(3, 0.0), cache);
  for (double v : z.a.values()) CHECK(v == 0.0);
  for (double v : z.b.values()) CHECK(v == 0.0);
  for (double v : z.gate.w1.values()) CHECK(v == 0.0);
  for (double v : z.gate.b2) CHECK(v == 0.0);
  CHECK(z.weight.empty());

  const Vector up{0.5, -1.0, 2.0};
  const SiteGrads g = site_backward(s, up, cache);
  const Vector& gamma = cache.gate.gamma;
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t k = 0; k < 2; ++k) {
      double bx = 0.0;
      for (std::size_t j = 0; j < 4; ++j) bx += s.pair.b(k, j) * x[j];
      CHECK(g.a(o, k) == doctest::Approx(up[o] * gamma[k] * bx).epsilon(1e-12));
    }

  SiteCache wrong = cache;
  wrong.x.pop_back();
  CHECK_THROWS_AS(site_backward(s, up, wrong), ConsistencyError);
  CHECK_THROWS_AS(site_backward(s, Vector(2), cache), DimensionError);
}

TEST_CASE("every site gradient matches central differences") {
  // L = 0.5 |y - t|^2 + lambda_orth * orth + lambda_sp * sparsity(gamma)
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const GloriaSite s0 = random_site(5, 4, 3, 6, rng);
    const Vector x = randv(5, rng);
    const Vector t = randv(4, rng);
    const Coord c{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const RegWeights reg{0.8, 1.25};

    auto loss = [&](const GloriaSite& s, std::span<const double> xin) {
      const Vector gamma = gate_forward(s.gate, c);
      const Vector y = gloria_forward(s, xin, gamma);
      double l = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) l += 0.5 * (y[i] - t[i]) * (y[i] - t[i]);
      return l + reg.orth * orth_loss(s.pair) + reg.sp * sparsity_loss(gamma);
    };
    SiteCache cache;
    const Vector y = site_forward(s0, AdaptMode::gloria, x, c, &cache);
    Vector up(4);
    for (int i = 0; i < 4; ++i) up[i] = y[i] - t[i];
    const SiteGrads g = site_backward(s0, up, cache, reg);

    auto check = [&](auto select, std::span<const double> analytic) {
      GloriaSite s = s0;
      std::span<double> p = select(s);
      const Vector p0(p.begin(), p.end());
      const ScalarFn f = [&](std::span<const double> v) {
        std::copy(v.begin(), v.end(), p.begin());
        return loss(s, x);
      };
      CHECK(relative_error(analytic, central_diff(f, p0)) <= 1e-4);
    };
    check([](GloriaSite& s) { return s.pair.a.values(); }, g.a.values());
    check([](GloriaSite& s) { return s.pair.b.values(); }, g.b.values());
    check([](GloriaSite& s) { return s.gate.w1.values(); }, g.gate.w1.values());
    check([](GloriaSite& s) { return std::span<double>(s.gate.b1); }, g.gate.b1);
    check([](GloriaSite& s) { return s.gate.w2.values(); }, g.gate.w2.values());
    check([](GloriaSite& s) { return std::span<double>(s.gate.b2); }, g.gate.b2);

    const ScalarFn fx = [&](std::span<const double> v) { return loss(s0, v); };
    CHECK(relative_error(g.x, central_diff(fx, x)) <= 1e-4);
  }
}

TEST_CASE("lora and full mode gradients") {
  Rng rng(21);
  const GloriaSite s = random_site(4, 3, 2, 4, rng);
  const Vector x = randv(4, rng);
  const Vector up{1.0, -0.5, 0.25};
  SiteCache lc;
  site_forward(s, AdaptMode::lora, x, {}, &lc);
  const SiteGrads lg = site_backward(s, up, lc);
  CHECK(lg.gate.w1.empty());
  CHECK(lg.a.rows() == 3);

  SiteCache fc;
  site_forward(s, AdaptMode::full, x, {}, &fc);
  const SiteGrads fg = site_backward(s, up, fc);
  CHECK(fg.a.empty());
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 4; ++i) CHECK(fg.weight(o, i) == doctest::Approx(up[o] * x[i]));
}

TEST_CASE("parameter counts") {
  const ParamCount pc = param_count(32, 32, 8, 32);
  CHECK(pc.low_rank == 512);
  CHECK(pc.gate == 360);
  CHECK(pc.trainable == 872);
  CHECK(pc.frozen == 32 * 32 + 32);
  CHECK(pc.fraction == doctest::Approx(872.0 / (872.0 + 1056.0)));
  const ParamCount r1 = param_count(4, 3, 1, 2);
  CHECK(r1.trainable == 3 + 4 + (2 * 2 + 2 + 2 + 1));
  CHECK(param_count(32, 32, 8, 32).trainable - param_count(32, 32, 8, 32, AdaptMode::lora).trainable ==
        pc.gate);
  CHECK_THROWS_AS(param_count(32, 32, 0, 32), DimensionError);
}

TEST_CASE("site rank must fit the dimensions") {
  Rng rng(1);
  CHECK_THROWS_AS(make_site(Matrix(3, 4), Vector(3), 4, 8, rng), DimensionError);
  CHECK_THROWS_AS(make_site(Matrix(3, 4), Vector(3), 0, 8, rng), DimensionError);
  GloriaSite s = make_site(Matrix(3, 4), Vector(3), 2, 8, rng);
  s.pair.b = Matrix(2, 5);
  CHECK_THROWS_AS(s.validate(), DimensionError);
}

TEST_CASE("site files round-trip") {
  Rng rng(12);
  const GloriaSite s = random_site(5, 4, 3, 6, rng);
  const CoordBounds b{50.5, 51.25, 2.5, 6.0};
  const auto dir = std::filesystem::temp_directory_path() / "gloria_test_site";
  std::filesystem::remove_all(dir);
  save_site(dir, s, b);
  CoordBounds back;
  const GloriaSite l = load_site(dir, &back);
  CHECK(back == b);
  CHECK(l.weight == s.weight);
  CHECK(l.bias == s.bias);
  CHECK(l.pair.a == s.pair.a);
  CHECK(l.pair.b == s.pair.b);
  CHECK(l.gate.w1 == s.gate.w1);
  CHECK(l.gate.b1 == s.gate.b1);
  CHECK(l.gate.w2 == s.gate.w2);
  CHECK(l.gate.b2 == s.gate.b2);
  std::filesystem::remove_all(dir);
}
