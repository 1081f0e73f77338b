#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gloria/adapter.hpp"
#include "gloria/kvfile.hpp"
#include "gloria/model.hpp"

namespace gloria {

// How per-region component weights are drawn.
//   dominant: region r leans on component r mod k (weight 1), others U[0, offdiag_max]
//   bilinear: k = 4 corner components, weights are bilinear tent values at the center
//   quadrants: k = 4; a region leans on the component of its grid quadrant (weight 1),
//             others U[0, offdiag_max], so neighbours share a dominant trait
//   identity: region r is the pure component r (needs k == regions)
//   ones:     every weight is 1
enum class MixingStyle { dominant, bilinear, quadrants, identity, ones };

const char* to_string(MixingStyle s);
MixingStyle parse_mixing(const std::string& name);

struct WorldSpec {
  std::size_t regions = 4;
  std::size_t k_true = 4;
  std::size_t sites = 4;
  std::size_t dim = 32;
  MixingStyle mixing = MixingStyle::dominant;
  double offdiag_max = 0.2;
  double component_scale = 5.0;
  double sigma_c = 0.02;
  double sigma_y = 0.01;
};

// 4x4 grid, quadrant mixing; the top-right corner region (15) is the one to hold out.
// Its three quadrant neighbours stay in training.
WorldSpec extrapolation_preset();
inline constexpr std::size_t kExtrapolationHoldout = 15;

struct Component {
  // Per site: unit-norm output and input directions of the rank-1 perturbation u v^T.
  std::vector<Vector> u;
  std::vector<Vector> v;
};

struct PlantedWorld {
  WorldSpec spec;
  std::uint64_t seed = 0;
  // Frozen base network shared by every region.
  std::vector<Matrix> base_weights;
  std::vector<Vector> base_biases;
  std::vector<Component> components;
  std::vector<Coord> centers;  // raw coordinates in the unit square
  Matrix mixing;               // regions x k_true, non-negative
};

// Region centers on a ceil(sqrt(R))-column grid with cell-centered coordinates.
std::vector<Coord> grid_centers(std::size_t regions);

PlantedWorld gen_world(const WorldSpec& spec, std::uint64_t seed,
                       const std::optional<Matrix>& mixing_override = std::nullopt);

// Backbone over the world's frozen base weights with fresh adapters drawn from `rng`.
ToyBackbone make_backbone(const PlantedWorld& w, std::size_t rank, std::size_t hidden, Rng& rng,
                          AdaptMode mode = AdaptMode::gloria);

// Effective weight of `site` in `region`: W + scale * sum_j mixing[r, j] u_j v_j^T.
Matrix region_weight(const PlantedWorld& w, std::size_t region, std::size_t site);
// Noise-free target for input x in the given region.
Vector region_forward(const PlantedWorld& w, std::size_t region, std::span<const double> x);

struct Sample {
  Vector x;
  Vector y;
  Coord c;  // raw
  std::size_t region = 0;
};

struct GeoDataset {
  std::vector<Sample> samples;
  std::size_t region_count = 0;

  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
  // Min-max of the raw sample coordinates.
  CoordBounds bounds() const;
  std::vector<std::size_t> region_counts() const;
};

struct Location {
  Coord c;  // raw
  std::size_t region = 0;
};

// Region uniform, then center + N(0, sigma_c^2) jitter clipped to the unit square.
Location sample_location(const PlantedWorld& w, Rng& rng);

GeoDataset sample_dataset(const PlantedWorld& w, std::size_t n, Rng& rng);

struct SplitSpec {
  std::optional<std::size_t> holdout_region;  // nullopt: plain 80/10/10
};

struct Splits {
  GeoDataset train;
  GeoDataset val;
  GeoDataset test;
};

// Shuffled 80/10/10 partition. With a holdout region, all of its samples go to test and the
// rest is split 80/10/10.
Splits split(const GeoDataset& data, const SplitSpec& spec, Rng& rng);

// Dataset CSV (lat,lng,region,x0..,y0..) plus a manifest carrying the world spec and seeds.
void save_dataset(const std::filesystem::path& dir, const GeoDataset& data, const WorldSpec& spec,
                  std::uint64_t world_seed, std::uint64_t sample_seed);
GeoDataset load_dataset_csv(const std::filesystem::path& csv, std::size_t region_count);

struct DatasetBundle {
  WorldSpec spec;
  std::uint64_t world_seed = 0;
  std::uint64_t sample_seed = 0;
  GeoDataset data;
};
DatasetBundle load_dataset(const std::filesystem::path& dir);

KeyValues world_spec_to_kv(const WorldSpec& spec);
WorldSpec world_spec_from_kv(const KeyValues& kv);

}  // namespace gloria
