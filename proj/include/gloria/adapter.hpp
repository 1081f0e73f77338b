#pragma once

#include <cstddef>
#include <filesystem>

#include "gloria/matcore.hpp"

namespace gloria {

// Which parts of a site participate in the forward pass.
//   frozen: W x + bias
//   lora:   W x + bias + A (B x)
//   gloria: W x + bias + A (gamma(c) .* (B x))
//   full:   W x + bias with W itself trainable
enum class AdaptMode { frozen, lora, gloria, full };

const char* to_string(AdaptMode mode);
AdaptMode parse_mode(const std::string& name);

// Gate input coordinate. Callers pass scaled values in [-1, 1].
struct Coord {
  double lat = 0.0;
  double lng = 0.0;
  bool operator==(const Coord&) const = default;
};

// Min-max bounds of raw training coordinates; maps them onto [-1, 1].
struct CoordBounds {
  double lat_min = 0.0;
  double lat_max = 1.0;
  double lng_min = 0.0;
  double lng_max = 1.0;

  // Values outside the bounds are clamped. A degenerate axis maps to 0.
  Coord scale(Coord raw) const;
  bool operator==(const CoordBounds&) const = default;
};

struct GateMlp {
  Matrix w1;  // hidden x 2
  Vector b1;  // hidden
  Matrix w2;  // rank x hidden
  Vector b2;  // rank

  std::size_t rank() const { return w2.rows(); }
  std::size_t hidden() const { return w1.rows(); }
};

inline constexpr std::size_t kDefaultGateHidden = 32;

// Hidden layer Xavier-uniform; output layer zero so every gate starts at softplus(0) = ln 2.
// (Zeroing the hidden layer too would leave w1, b1 and w2 with identically zero gradients.)
GateMlp make_gate(std::size_t rank, std::size_t hidden, Rng& rng);

struct GateCache {
  Coord input;
  Vector hidden_pre;
  Vector hidden;
  Vector out_pre;
  Vector gamma;
};

Vector gate_forward(const GateMlp& gate, Coord c);
GateCache gate_forward_cached(const GateMlp& gate, Coord c);

struct LowRankPair {
  Matrix a;  // d_out x r
  Matrix b;  // r x d_in
  std::size_t rank() const { return a.cols(); }
};

struct GloriaSite {
  Matrix weight;  // d_out x d_in, frozen in lora and gloria modes
  Vector bias;    // d_out, always frozen
  LowRankPair pair;
  GateMlp gate;

  std::size_t d_in() const { return weight.cols(); }
  std::size_t d_out() const { return weight.rows(); }
  std::size_t rank() const { return pair.rank(); }

  // Throws DimensionError when any component disagrees with the others.
  void validate() const;
};

// Frozen W/bias as given; A, B Xavier-uniform; gate per make_gate.
GloriaSite make_site(Matrix weight, Vector bias, std::size_t rank, std::size_t hidden, Rng& rng);

Vector base_forward(const GloriaSite& site, std::span<const double> x);
Vector lora_forward(const GloriaSite& site, std::span<const double> x);
// Evaluated as B x, elementwise gamma scaling, then A (.); diag(gamma) is never formed.
Vector gloria_forward(const GloriaSite& site, std::span<const double> x,
                      std::span<const double> gamma);

double orth_loss(const LowRankPair& pair);
// ||A^T A - I||_F (not squared); used to report direction orthonormality.
double orth_residual_a(const LowRankPair& pair);

inline constexpr double kSparsityEps = 1e-12;

// Entropy of gamma / sum(gamma), divided by log r. Zero for r = 1.
double sparsity_loss(std::span<const double> gamma);
Vector sparsity_loss_grad(std::span<const double> gamma);

// d orth_loss / dA and d orth_loss / dB.
struct OrthGrads {
  Matrix a;
  Matrix b;
};
OrthGrads orth_loss_grad(const LowRankPair& pair);

struct SiteCache {
  AdaptMode mode = AdaptMode::frozen;
  Vector x;
  Vector bx;
  GateCache gate;  // filled in gloria mode only
  Vector y;
};

Vector site_forward(const GloriaSite& site, AdaptMode mode, std::span<const double> x, Coord c,
                    SiteCache* cache = nullptr);

struct GateGrads {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
};

// Gradients of a site. Members that are not trainable in the cache's mode stay empty.
struct SiteGrads {
  Matrix a;
  Matrix b;
  GateGrads gate;
  Matrix weight;  // full mode only
  Vector x;
};

struct RegWeights {
  double orth = 0.0;
  double sp = 0.0;
};

// Backpropagates `upstream` = dL/dy through the site. Regularizer terms
// reg.orth * orth_loss(pair) and reg.sp * sparsity_loss(gamma) are included when nonzero
// (gloria mode only).
SiteGrads site_backward(const GloriaSite& site, std::span<const double> upstream,
                        const SiteCache& cache, RegWeights reg = {});

struct ParamCount {
  std::size_t low_rank = 0;  // A and B
  std::size_t gate = 0;
  std::size_t trainable = 0;
  std::size_t frozen = 0;  // W and bias
  double fraction = 0.0;
};

ParamCount param_count(std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t hidden,
                       AdaptMode mode = AdaptMode::gloria);

// Directory with weight.txt, bias.txt, a.txt, b.txt, gate_{w1,b1,w2,b2}.txt and manifest.txt.
void save_site(const std::filesystem::path& dir, const GloriaSite& site, const CoordBounds& bounds);
GloriaSite load_site(const std::filesystem::path& dir, CoordBounds* bounds = nullptr);

}  // namespace gloria
