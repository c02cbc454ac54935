#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "simmt/data.hpp"
#include "simmt/rng.hpp"
#include "simmt/tensor.hpp"
#include "simmt/transformer.hpp"

namespace simmt {

// scale * model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5). Rises until
// warmup, decays as 1/sqrt(step) after.
double noam_lr(int64_t step, int warmup, int model_dim, double scale);

// Scales every gradient in place so the global L2 norm is at most
// max_norm; returns the pre-clip norm. Parameters without a touched
// gradient count as zero. Non-finite gradients abort.
double clip_gradients(std::vector<Tensor>& params, double max_norm);

struct OptimizerState {
  std::vector<std::vector<double>> m, v;  // parallel to the parameter list
  int64_t step = 0;

  static OptimizerState init(const std::vector<Tensor>& params);
};

enum class TrainRegime { Consecutive, WaitK, Prefix };

std::string regime_name(TrainRegime regime);
TrainRegime regime_from_name(const std::string& name);

// Loss mix: alpha * translation + beta * alignment.
struct SupervisionConfig {
  double alpha = 1.0;
  double beta = 0.0;
};

struct TrainConfig {
  double lr_scale = 0.2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  int warmup_steps = 4000;
  int batch_size = 32;
  double label_smoothing = 0.1;
  double clip_norm = 1.0;
  int max_epochs = 100;
  int patience = 10;
  uint64_t seed = 1;
  TrainRegime regime = TrainRegime::Consecutive;
  int wait_k = 1;         // regime == WaitK: train-time mask and val decode
  double prefix_p = 0.5;  // regime == Prefix: truncation probability
  SupervisionConfig supervision;
  bool unidirectional_encoder = true;
  // Fine-tuning switches the scheduler off for a small constant rate.
  bool constant_lr = false;
  double constant_lr_value = 1e-5;

  void validate() const;
};

// Bias-corrected Adam over the registered parameters; one step per call.
void adam_step(std::vector<Tensor>& params, OptimizerState& state, double lr,
               const TrainConfig& cfg);

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  uint64_t init_seed = 1;
  Vocabulary src_vocab, tgt_vocab;
  std::vector<std::string> param_names;
  std::vector<Shape> param_shapes;
  std::vector<std::vector<double>> param_values;
  bool has_optimizer = false;
  OptimizerState optimizer;
  int epoch = 0;
  int64_t steps = 0;
  int epochs_since_improvement = 0;
  double best_f1 = -1.0;
  double best_bleu = -1.0;
  double best_val_loss = 0.0;
  std::string rng_state;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  static Checkpoint capture(const TranslationModel& model,
                            const TrainConfig& cfg, uint64_t init_seed,
                            const Vocabulary& src_vocab,
                            const Vocabulary& tgt_vocab);
  // Rebuilds the model and overwrites its parameters from the snapshot.
  TranslationModel restore_model() const;
  void restore_into(TranslationModel& model) const;
};

struct EpochLog {
  int epoch = 0;
  int64_t steps = 0;
  double train_loss = 0.0;
  double train_mt_loss = 0.0;
  double train_align_loss = 0.0;
  double val_f1 = 0.0;
  double val_bleu = 0.0;
  double val_mt_loss = 0.0;
  double val_align_loss = 0.0;
  double val_total_loss = 0.0;
  double lr = 0.0;
  double grad_norm_mean = 0.0;
  double grad_norm_max = 0.0;
  bool improved = false;

  std::string to_json_line() const;
};

struct ValScores {
  double f1 = 0.0;
  double bleu = 0.0;
  double mt_loss = 0.0;
  double align_loss = 0.0;
  double total_loss = 0.0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> history;
  int best_epoch = 0;
  bool diverged = false;
};

// Full training recipe: deterministic in (config seed, init seed); epochs
// of shuffled mini-batches, per-epoch validation decode, best checkpoint
// by (token F1, BLEU) with validation loss breaking exact ties, early
// stopping when (F1, BLEU) fails to improve for more than `patience`
// epochs. A non-finite loss stops training with the best checkpoint so
// far retained. Passing `resume` restores parameters, optimizer moments
// and counters, continuing bit-exactly where that checkpoint stopped.
TrainResult train(TranslationModel& model, const TrainConfig& cfg,
                  const Dataset& train_data, const Dataset& val_data,
                  const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                  const Checkpoint* resume = nullptr);

// Supervision fine-tuning: constant lr (scheduler off), fresh optimizer
// moments, alpha = beta = 1, patience disabled (fixed epoch budget). The
// training data must carry alignment annotations.
TrainResult finetune_supervised(const Checkpoint& base, int max_epochs,
                                const Dataset& train_data,
                                const Dataset& val_data);

// Validation decode + losses for a model, shared by train() and the CLI.
ValScores validate_model(const TranslationModel& model, const TrainConfig& cfg,
                         const Dataset& val_data,
                         std::vector<std::vector<int>>* decoded = nullptr);

}  // namespace simmt
