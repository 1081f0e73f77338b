#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gloria/kvfile.hpp"
#include "gloria/model.hpp"
#include "gloria/synthdata.hpp"

namespace gloria {

// Noam-style warmup: base_lr * warmup^0.5 * min(step^-0.5, step * warmup^-1.5).
// Peaks at base_lr when step == warmup. step is 1-based.
double warmup_lr(std::size_t step, double base_lr, std::size_t warmup);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, Vector> m;
  std::map<std::string, Vector> v;
};

// One bias-corrected Adam update of every tensor in `params`; each needs an entry in `grads`.
void adam_step(AdamState& state, const std::vector<ParamRef>& params, const GradSet& grads,
               double lr);

struct TrainConfig {
  double base_lr = 0.001;
  std::size_t warmup_steps = 1500;
  double lambda_orth = 0.8;
  double lambda_sp = 5.0;
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  std::size_t grad_accum = 1;
  std::uint64_t seed = 0;
  AdaptMode mode = AdaptMode::gloria;
  // Epochs of lora-mode training before gating is switched on (gloria mode only).
  std::size_t warm_start_epochs = 0;
};

KeyValues train_config_to_kv(const TrainConfig& cfg);
// Unknown keys raise InputError; missing keys keep the defaults already in `cfg`.
void apply_train_config(const KeyValues& kv, TrainConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double orth_loss = 0.0;
  double mean_entropy = 0.0;
  bool operator==(const EpochLog&) const = default;
};

using RunLog = std::vector<EpochLog>;

void write_runlog(const std::filesystem::path& path, const RunLog& log);
RunLog read_runlog(const std::filesystem::path& path);

struct EvalMetrics {
  double overall = 0.0;
  std::size_t count = 0;
  // nullopt for regions without samples; see notices.
  std::vector<std::optional<double>> per_region;
  std::vector<std::size_t> region_counts;
  std::vector<std::string> notices;
};

EvalMetrics evaluate(const ToyBackbone& m, const GeoDataset& data);

// Mean over samples of the site-averaged normalized gate entropy (gloria mode).
double mean_gate_entropy(const ToyBackbone& m, const GeoDataset& data);

struct TrainResult {
  ToyBackbone model;
  RunLog log;
};

// The model's mode is set to cfg.mode. `val` may be empty, in which case val_loss is 0 and the
// entropy column is measured on the training data.
TrainResult train(const TrainConfig& cfg, ToyBackbone m, const GeoDataset& data,
                  const GeoDataset& val = {});

}  // namespace gloria
