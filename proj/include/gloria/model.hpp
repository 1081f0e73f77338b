#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gloria/adapter.hpp"

namespace gloria {

struct BackboneShape {
  std::size_t sites = 4;
  std::size_t dim = 32;
  std::size_t rank = 8;
  std::size_t hidden = kDefaultGateHidden;
};

// 48 adapted feed-forward sites at rank 128, only used to check gate-matrix shapes.
inline constexpr BackboneShape kPaperShape{48, 128, 128, kDefaultGateHidden};

// Chain of adaptation sites with GeLU between consecutive sites (none after the last).
// Every site's gate is conditioned on the same coordinate.
class ToyBackbone {
 public:
  ToyBackbone() = default;
  ToyBackbone(std::vector<GloriaSite> sites, AdaptMode mode = AdaptMode::gloria);

  // Random frozen weights (Xavier, zero bias) plus fresh adapters.
  static ToyBackbone random(const BackboneShape& shape, Rng& rng,
                            AdaptMode mode = AdaptMode::gloria);

  AdaptMode mode() const { return mode_; }
  void set_mode(AdaptMode mode) { mode_ = mode; }

  const CoordBounds& coord_bounds() const { return bounds_; }
  void set_coord_bounds(const CoordBounds& b) { bounds_ = b; }

  std::size_t site_count() const { return sites_.size(); }
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  const GloriaSite& site(std::size_t i) const { return sites_.at(i); }
  const std::vector<GloriaSite>& sites() const { return sites_; }
  // Mutable access invalidates outstanding forward caches.
  GloriaSite& mutable_site(std::size_t i);

  // Incremented on every mutable access; forward caches record it.
  std::uint64_t generation() const { return generation_; }
  void touch() { ++generation_; }

  bool operator==(const ToyBackbone& other) const;

 private:
  std::vector<GloriaSite> sites_;
  AdaptMode mode_ = AdaptMode::gloria;
  CoordBounds bounds_;
  std::uint64_t generation_ = 0;
};

struct ForwardCache {
  std::uint64_t generation = 0;
  AdaptMode mode = AdaptMode::frozen;
  std::vector<SiteCache> sites;
  Vector prediction;
};

// `raw` is an unscaled coordinate; the backbone applies its stored bounds.
Vector backbone_forward(const ToyBackbone& m, std::span<const double> x, Coord raw,
                        ForwardCache* cache = nullptr);

double task_loss(std::span<const double> pred, std::span<const double> target);

// Gate outputs per site, as recorded in a forward cache (empty outside gloria mode).
std::vector<Vector> cached_gammas(const ForwardCache& cache);

// task + lambda_orth * sum over sites of orth_loss + lambda_sp * mean over sites of
// sparsity_loss. Regularizers only apply in gloria mode.
double total_loss(double task, const ToyBackbone& m, const std::vector<Vector>& gammas,
                  double lambda_orth, double lambda_sp);

// Gradients keyed by "site<i>.<tensor>", e.g. "site0.a", "site2.gate.w1", "site1.weight".
using GradSet = std::map<std::string, Vector>;

// Key set of the trainable tensors in the backbone's current mode.
std::vector<std::string> trainable_names(const ToyBackbone& m);

struct ParamRef {
  std::string name;
  std::span<double> values;
};
// Views over the trainable tensors, ordered like trainable_names. Bumps the generation.
std::vector<ParamRef> trainable_params(ToyBackbone& m);

struct LossWeights {
  double orth = 0.0;
  double sp = 0.0;
  // When false the orth term is left out, e.g. to add it once per batch.
  bool include_orth = true;
};

// Gradient of the single-sample total_loss(task_loss(pred, target), ...).
GradSet backbone_backward(const ToyBackbone& m, const ForwardCache& cache,
                          std::span<const double> target, LossWeights w = {});

// Adds scale * d(sum_sites orth_loss)/d(A, B) into `grads` (gloria mode).
void add_orth_gradient(const ToyBackbone& m, double scale, GradSet& grads);

double orth_loss_sum(const ToyBackbone& m);

// Analytic gradients of the single-sample total loss against central differences, per tensor.
struct GradCheck {
  std::map<std::string, double> rel_error;  // norm-wise, see relative_error
  double max_rel_error = 0.0;
};
GradCheck gradient_check(const ToyBackbone& m, std::span<const double> x, Coord raw,
                         std::span<const double> target, LossWeights w = {}, double h = 1e-5);

double orth_residual_sum(const ToyBackbone& m);

// Checkpoint: manifest.txt plus site_000/, site_001/, ... (see save_site). Mode not stored.
void save_backbone(const std::filesystem::path& dir, const ToyBackbone& m);
ToyBackbone load_backbone(const std::filesystem::path& dir, AdaptMode mode = AdaptMode::gloria);

}  // namespace gloria
