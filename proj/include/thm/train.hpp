#pragma once

// Optimization loop, learning-rate schedule, checkpointing and dev-set model
// selection.

#include <optional>
#include <string>
#include <vector>

#include "thm/data.hpp"
#include "thm/kv.hpp"
#include "thm/model.hpp"

namespace thm {

/// d_model^-0.5 · min(step^-0.5, step · warmup^-1.5). Throws ParameterError
/// for step < 1 or warmup < 1.
double lr_at(long step, std::size_t d_model, long warmup);

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  long warmup = 4000;
  double lr_scale = 1.0;  // multiplies the schedule
};

/// Everything beyond the model that a resumed run needs.
struct TrainState {
  long step = 0;
  long epoch = 0;
  std::vector<Tensor> m;  // first moments, parameter order
  std::vector<Tensor> v;  // second moments
  Rng rng{0};             // dropout stream
  double best_dev_bleu = -1.0;

  static TrainState fresh(const Model& model, std::uint64_t seed);
};

/// One optimizer update from the summed gradients of `batches` (gradient
/// accumulation when more than one), each batch's loss weighted equally.
/// THM reads both corrupted sources; the baseline reads the clean one.
/// Returns the mean loss. Throws DivergenceError on a non-finite loss.
double train_step(Model& model, std::span<const Batch> batches, TrainState& state,
                  const OptimConfig& opt);

/// Label-smoothed loss without dropout or corruption, averaged over batches
/// of at most `token_budget` units.
double evaluate_loss(const Model& model, std::span<const EncodedPair> pairs,
                     std::size_t token_budget);

// ---- run records -------------------------------------------------------------

struct EpochRecord {
  long epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double dev_bleu = 0.0;
  double test_bleu = 0.0;
  double dev_accuracy = 0.0;  // not part of the loss log
  double seconds = 0.0;       // wall time, not part of the loss log
};

using RunRecord = std::vector<EpochRecord>;

/// Epoch with the highest dev BLEU, earliest on ties. Throws DataError when
/// empty.
long select_best(const RunRecord& record);

/// True when the dev-selected epoch's test BLEU ranks within the top k,
/// where tied values share the better rank. Throws ParameterError for k < 1.
bool topk_selection(const RunRecord& record, long k);

/// "epoch train_loss valid_loss dev_bleu test_bleu", 6 significant digits.
std::string loss_log_line(const EpochRecord& row);
std::string format_loss_log(const RunRecord& record);
/// Reads the five logged columns back; extra fields stay zero.
RunRecord parse_loss_log(const std::string& text);

// ---- experiments -------------------------------------------------------------

struct TrainConfig {
  ModelConfig model = preset("tiny");
  OptimConfig optim;
  std::uint64_t seed = 0;
  long epochs = 30;
  std::size_t token_budget = 4096;
  std::size_t accum_steps = 1;
  std::size_t decode_extra_len = 10;  // greedy output limit beyond the source length
  /// Stop once the dev metrics reach both thresholds; 0 disables.
  double stop_dev_bleu = 0.0;
  double stop_dev_accuracy = 0.0;
};

/// Applies model and training keys; any other key throws ParameterError.
/// `preset` (if present) is applied first, then the remaining keys.
void apply_train_kv(TrainConfig& config, const KeyValues& kv);
KeyValues train_config_kv(const TrainConfig& config);

struct ExperimentData {
  BpeModel bpe;
  std::vector<EncodedPair> train;
  std::vector<EncodedPair> dev;
  std::vector<EncodedPair> test;
};

struct RunOptions {
  std::string out_dir;
  /// Checkpoint to continue from; must come from the same configuration.
  std::optional<std::string> resume_from;
  bool verbose = false;
};

/// Trains for config.epochs epochs (or until the stop thresholds are met),
/// writing epoch_<n>.ckpt, best.ckpt and loss.log into out_dir.
RunRecord run_experiment(const TrainConfig& config, const ExperimentData& data,
                         const RunOptions& options);

/// Model from a checkpoint written by run_experiment or make_checkpoint.
Model load_model(const std::string& path);

}  // namespace thm
