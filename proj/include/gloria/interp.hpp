#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "gloria/model.hpp"
#include "gloria/synthdata.hpp"

namespace gloria {

// Stacked gate outputs: rows are site-major then rank index, columns are locations.
struct GateMatrix {
  Matrix g;
  std::vector<Location> locations;
};

GateMatrix extract_gates(const ToyBackbone& m, const std::vector<Location>& locations);

// Distinct sample coordinates in dataset order, at most `max_locations` of them.
std::vector<Location> dataset_locations(const GeoDataset& data, std::size_t max_locations);

inline constexpr double kNmfEps = 1e-12;

// Generalized KL divergence D(G || S L), with 0 log 0 = 0.
double kl_divergence(const Matrix& g, const Matrix& s, const Matrix& l);

struct NmfFactors {
  Matrix s;  // gate dims x k
  Matrix l;  // k x locations
  std::size_t k() const { return s.cols(); }
};

struct SvdTriplets {
  Vector sigma;
  std::vector<Vector> u;
  std::vector<Vector> v;
  std::size_t iterations = 0;
};

struct PowerIterOptions {
  std::size_t max_iters = 20000;
  // Converged when ||C x - lambda x|| <= tol * lambda_max on the Gram matrix C.
  double tol = 1e-10;
};

// Leading k singular triplets via power iteration with deflation on the smaller Gram matrix.
SvdTriplets top_singular_triplets(const Matrix& g, std::size_t k, Rng& rng,
                                  PowerIterOptions opts = {});

// NNDSVD from the top-k triplets, then every zero entry replaced by mean(G).
NmfFactors nndsvda_init(const Matrix& g, std::size_t k, Rng& rng, PowerIterOptions opts = {});

inline constexpr std::size_t kNmfIters = 3000;

// KL multiplicative updates; each iteration updates S then L. When `kl_trace` is given it
// receives the objective before the first and after every iteration (iters + 1 values).
NmfFactors nmf_kl(const Matrix& g, std::size_t iters, NmfFactors init,
                  std::vector<double>* kl_trace = nullptr);

struct ElbowPoint {
  std::size_t k = 0;
  double kl = 0.0;
};

struct ElbowResult {
  std::size_t k_star = 0;
  std::vector<ElbowPoint> curve;
};

// Index of the point farthest from the chord between the curve's endpoints, both axes
// min-max normalized first. Ties go to the earliest point.
std::size_t knee_index(const std::vector<ElbowPoint>& curve);

// sqrt(2 KL), the usual "reconstruction error" reported for KL-NMF.
inline double reconstruction_error(double kl) { return std::sqrt(2.0 * std::max(kl, 0.0)); }

// Runs nndsvda_init + nmf_kl for each candidate; each candidate uses Rng(seed). The curve keeps
// the KL values; the knee is taken on reconstruction_error of them.
ElbowResult elbow_select(const Matrix& g, const std::vector<std::size_t>& candidates,
                         std::size_t iters, std::uint64_t seed = 0);

struct RegionAggregate {
  Matrix mean;               // k x regions
  std::vector<bool> present;  // false where a region had no locations (column left at 0)
};

RegionAggregate aggregate_by_region(const NmfFactors& f, const std::vector<std::size_t>& regions,
                                    std::size_t region_count);

enum class Axis { rows, cols };

struct Merge {
  std::size_t left = 0;   // cluster ids: leaves 0..n-1, merge i creates n + i
  std::size_t right = 0;
  double distance = 0.0;
  std::size_t size = 0;
};

struct Dendrogram {
  std::vector<Merge> merges;
  std::vector<std::size_t> order;  // leaf order, left subtree first
};

// Average-linkage agglomerative clustering of unit-normalized rows or columns.
Dendrogram cluster_order(const Matrix& m, Axis axis);

double pearson(std::span<const double> a, std::span<const double> b);

struct ComponentMatch {
  std::vector<std::size_t> assignment;  // recovered component i -> planted component
  std::vector<double> correlation;      // Pearson for each matched pair
  double mean_correlation = 0.0;
};

// `recovered` is k x regions (aggregated loadings); `mixing` is regions x k.
// Exact maximum-total-correlation assignment.
ComponentMatch component_match(const Matrix& recovered, const Matrix& mixing);

// gates.txt (matrix format) plus locations.csv "index,lat,lng,region".
void save_gate_matrix(const std::filesystem::path& dir, const GateMatrix& gm);
GateMatrix load_gate_matrix(const std::filesystem::path& dir);

struct NmfSummary {
  std::size_t k = 0;
  double final_kl = 0.0;
  std::size_t iterations = 0;
};

// S.txt, L.txt and summary.txt.
void save_nmf(const std::filesystem::path& dir, const NmfFactors& f, const NmfSummary& summary);
NmfFactors load_nmf(const std::filesystem::path& dir, NmfSummary* summary = nullptr);

void write_elbow_csv(const std::filesystem::path& path, const std::vector<ElbowPoint>& curve);
std::vector<ElbowPoint> read_elbow_csv(const std::filesystem::path& path);

}  // namespace gloria
