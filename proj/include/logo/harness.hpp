#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "logo/loss.hpp"
#include "logo/model.hpp"

namespace logo {

// ---- synthetic clips --------------------------------------------------------

struct SyntheticSpec {
  std::size_t num_classes = 7;
  std::size_t clips_per_class = 4;
  std::size_t frames = 8;
  std::size_t height = 4;
  std::size_t width = 4;
  std::size_t channels = 16;
  double class_signal_scale = 1.0;
  double noise_scale = 0.25;
  // Per-clip blend toward the next frame's prototype, scaled by a random
  // phase in [0, 1): 0 keeps every clip aligned with its class prototype.
  double temporal_drift = 0.5;
  std::uint64_t seed = 1;
  // When set, class prototypes come from this seed and only the per-clip
  // phase and noise from `seed`, so a new `seed` gives a held-out set of the
  // same classes. Unset, both come from `seed`.
  std::optional<std::uint64_t> prototype_seed;

  void validate() const;
  // Geometry and class count from a model config.
  static SyntheticSpec matching(const ModelConfig& model);
};

struct Sample {
  ClipFeatures clip;
  std::size_t label = 0;
};

using Dataset = std::vector<Sample>;

// Balanced labels, interleaved class by class. Deterministic given the seed.
Dataset generate(const SyntheticSpec& spec);

// ---- training ---------------------------------------------------------------

struct TrainConfig {
  ModelConfig model;
  double lr = 0.001;
  double momentum = 0.9;
  std::size_t epochs = 200;
  std::size_t batch_size = 1;
  double lambda = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, counted from the start of training
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_compact = 0.0;
  double train_uar = 0.0;
  double train_war = 0.0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  Metrics final_metrics;
};

// Model plus optimizer state; enough to continue training bit-identically.
struct TrainState {
  Model model;
  std::vector<Tensor> velocity;  // one per parameter, canonical order
  std::size_t epochs_done = 0;

  static TrainState fresh(const ModelConfig& config);
};

// Returning false from the callback stops training after that epoch.
using EpochCallback = std::function<bool(const EpochRecord&, const TrainState&)>;

// Runs config.epochs further epochs of SGD with momentum on total_loss.
RunHistory train(TrainState& state, const TrainConfig& config, const Dataset& data,
                 const EpochCallback& on_epoch = {});
std::pair<Model, RunHistory> train(const TrainConfig& config, const Dataset& data);

std::string history_csv(const RunHistory& history);

// Full set of knobs read from a run config file.
struct RunConfig {
  TrainConfig train;
  SyntheticSpec data;

  // Plain `key = value` text; unknown keys are an error. Data geometry and
  // class count follow the model keys.
  static RunConfig parse(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);
  bool set(const std::string& key, const std::string& value);
  KeyValues to_key_values() const;  // "train." and "data." prefixed, plus model keys
  void sync_data_geometry();
};

Checkpoint to_checkpoint(const TrainState& state, const RunConfig& run);
TrainState train_state_from(const Checkpoint& checkpoint);
RunConfig run_config_from(const Checkpoint& checkpoint);

// ---- evaluation -------------------------------------------------------------

// Worker count from LOGO_EVAL_WORKERS, default 1.
std::size_t eval_workers();

std::vector<std::size_t> predict(const Model& model, const Dataset& data, std::size_t workers = 1);
Metrics evaluate_model(const Model& model, const Dataset& data, std::size_t workers = 1);

// ---- gradient check ---------------------------------------------------------

struct GradcheckOptions {
  double step = 1e-5;
  double lambda = 1.0;
  // Differentiate only the classification head, with the encoder treated as constant.
  bool head_only = false;
  std::size_t clips = 2;
  std::uint64_t data_seed = 7;
};

struct GradcheckEntry {
  std::string name;
  std::size_t size = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  std::string worst;
};

// |a - n| / max(|a|, |n|, kGradcheckFloor)
inline constexpr double kGradcheckFloor = 1e-6;
double relative_error(double analytic, double numeric);

// F=2, H=W=2, C=4, d=8, heads=2, N=1, 3 classes.
ModelConfig tiny_config();

GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options = {});

// ---- cost sweep -------------------------------------------------------------

struct CostGridRow {
  std::size_t F = 0, H = 0, W = 0, f = 0, h = 0, w = 0;
};

// One `F,H,W,f,h,w` row per line; `#` comments and blank lines skipped.
std::vector<CostGridRow> parse_cost_grid(const std::string& text);
CostGridRow parse_cost_row(const std::string& text);

std::string cost_csv_header();
// Invalid rows keep their geometry, leave the cost columns empty and carry
// "invalid" in ordering_ok.
std::string cost_sweep(std::span<const CostGridRow> grid, std::size_t workers = 1);

// ---- embedding export -------------------------------------------------------

// label, e0..e{d-1}: final-block CLS features, one row per clip.
std::string embeddings_csv(const Model& model, const Dataset& data, std::size_t workers = 1);
void export_embeddings(const Model& model, const Dataset& data, const std::filesystem::path& path);

}  // namespace logo
