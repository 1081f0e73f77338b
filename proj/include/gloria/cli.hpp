#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>

#include "gloria/model.hpp"
#include "gloria/synthdata.hpp"
#include "gloria/train.hpp"

namespace gloria {

// Named random streams, so that every command can regenerate the same draws.
Rng sample_stream(std::uint64_t sample_seed);
Rng split_stream(std::uint64_t sample_seed);
Rng init_stream(std::uint64_t train_seed);

Splits make_splits(const GeoDataset& data, std::uint64_t sample_seed,
                   std::optional<std::size_t> holdout);

struct PlantedData {
  PlantedWorld world;
  GeoDataset data;
  Splits splits;
};

PlantedData make_planted_data(const WorldSpec& spec, std::uint64_t world_seed,
                              std::uint64_t sample_seed, std::size_t n,
                              std::optional<std::size_t> holdout = std::nullopt);

// Fresh adapters over the world's base network; coordinate bounds come from `train`.
ToyBackbone initial_model(const PlantedWorld& w, const GeoDataset& train, std::size_t rank,
                          std::size_t hidden, std::uint64_t seed);

// One random instance: gloria-mode gradients with both regularizers, plus full-mode W.
GradCheck random_gradient_check(std::uint64_t seed, std::size_t sites, std::size_t dim,
                                std::size_t rank, std::size_t hidden = kDefaultGateHidden);

// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gloria
