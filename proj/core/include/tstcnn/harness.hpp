#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tstcnn/model.hpp"
#include "tstcnn/optim.hpp"
#include "tstcnn/synth.hpp"

namespace tstcnn::harness {

/**
 * Run settings, read from key=value text. Lines starting with '#' are
 * comments; unknown keys are rejected. Every key has a default, see
 * RunConfig::keys() for the list.
 */
struct RunConfig {
  // model
  ModelKind model = ModelKind::twin;
  BlockMode blocks = BlockMode::none;
  std::size_t n_blocks = 0;
  std::array<std::size_t, 3> filters{30, 60, 80};
  std::size_t fc_width = 500;
  // data
  std::size_t classes = 6;
  std::size_t clips_per_class = 40;
  std::size_t frames = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t jitter = 1;  // temporal jitter in frames; also the source margin
  std::array<double, 3> ratios{0.7, 0.15, 0.15};
  std::uint64_t data_seed = 1;
  std::string dataset_dir;  // empty: regenerate in memory
  bool augment = true;
  double max_rotation = 10.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_translation = 0.05;
  // training
  std::size_t epochs = 200;
  std::size_t batch_size = 10;
  std::uint64_t seed = 1;
  double lr = 0.01;
  double momentum = 0.9;
  double lr_floor = 1e-5;
  std::size_t patience = 50;
  std::size_t recent_window = 25;
  std::size_t previous_window = 35;
  double emergency_ratio = 0.7;
  double target_val_acc = 0.0;  // stop once reached; 0 = run all epochs
  // output / commands
  std::string out_dir = "run";
  std::string checkpoint;  // eval, export-masks
  synth::Split split = synth::Split::val;
  std::size_t clip = 0;
  std::size_t mask_channel = 0;
  double threshold = 0.85;
  std::size_t n_seeds = 3;
  BlockMode compare_a = BlockMode::attention;
  BlockMode compare_b = BlockMode::none;
  bool verbose = true;

  static std::vector<std::string> keys();
  /// Applies one key=value assignment; ConfigError for unknown keys or
  /// malformed values.
  void set(const std::string& key, const std::string& value);
  void set_assignment(const std::string& assignment);
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  /// Canonical text for every key. With include_paths = false the output
  /// and input locations are left out so that two runs writing to different
  /// directories produce identical text.
  std::string to_text(bool include_paths = true) const;
  void validate() const;

  ModelConfig model_config() const;
  synth::DatasetSpec dataset_spec() const;
  SchedulerConfig scheduler_config() const;
  synth::SpatialAugmentParams augment_params() const;
};

/// Columns of metrics.csv.
inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_acc,val_acc,lr,action";

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double lr = 0;  // rate used for this epoch's updates
  ScheduleAction action = ScheduleAction::continue_training;
};

std::string format_metrics_row(const EpochMetrics& m);
std::vector<EpochMetrics> read_metrics(const std::string& path);

/// Clips of a dataset, generated or loaded, grouped by split.
struct DatasetClips {
  synth::DatasetSpec spec;
  std::vector<synth::Clip> train, val, test;
  const std::vector<synth::Clip>& of(synth::Split s) const;
};

/// Loads from config.dataset_dir when set, otherwise regenerates.
DatasetClips load_dataset(const RunConfig& config, bool include_test);

/// Stacks the centered (or given) windows of clips into a model input.
ModelInput<float> make_batch(const std::vector<const synth::Clip*>& clips, ModelKind kind);

struct EvalReport {
  double accuracy = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Eval-mode accuracy on the centered windows of `clips`.
EvalReport evaluate(Network<float>& net, const std::vector<synth::Clip>& clips, std::size_t frames,
                    std::size_t batch_size);

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  std::size_t best_epoch = 0;
  double best_val_acc = 0;
  /// First epoch with val_acc >= threshold, if any.
  std::optional<std::size_t> epochs_to(double threshold) const;
};

/**
 * Full training run. Writes into config.out_dir: config.txt, metrics.csv
 * (appended and flushed per epoch), best.ckpt, last.ckpt and
 * checkpoints.log (one line per save or reload).
 */
TrainResult train(const RunConfig& config);
TrainResult train(const RunConfig& config, const DatasetClips& data);

/// Rebuilds the network recorded in a checkpoint.
struct LoadedModel {
  RunConfig config;
  Checkpoint checkpoint;
  Network<float> net;
};
LoadedModel load_model(const std::string& checkpoint_path);

/// Writes eval.txt (accuracy and confusion matrix) into out_dir.
EvalReport cmd_eval(const RunConfig& config);

struct MaskExport {
  std::vector<std::string> files;
  double min = 0;
  double max = 0;
};
/// Raw mask tensors plus per-frame PGM images of channel mask_channel for
/// every attention block, for clip `clip` of the chosen split.
MaskExport cmd_export_masks(const RunConfig& config);

struct CompareRow {
  std::uint64_t seed = 0;
  BlockMode mode = BlockMode::none;
  std::optional<std::size_t> epochs;  // empty: never reached
  double best_val_acc = 0;
};
struct CompareReport {
  std::vector<CompareRow> rows;
  double median_a = 0;  // +inf when the median run never reached it
  double median_b = 0;
  std::string text;
};
/// Runs compare_a vs compare_b for seeds seed .. seed + n_seeds - 1 with
/// early stop at `threshold`; writes compare.csv and compare.txt.
CompareReport cmd_compare(const RunConfig& config);

/// Writes the dataset described by the config to dataset_dir (or out_dir).
void cmd_gen_data(const RunConfig& config);

/// Binary 8-bit graymap of a min-max normalized plane; a constant plane is
/// all zeros.
std::vector<std::uint8_t> normalize_to_bytes(std::span<const float> plane);
void write_pgm(const std::string& path, std::size_t height, std::size_t width,
               std::span<const std::uint8_t> pixels);

double median(std::vector<double> values);

}  // namespace tstcnn::harness
