#pragma once

#include <optional>
#include <string>
#include <vector>

#include "simmt/data.hpp"
#include "simmt/evaluation.hpp"
#include "simmt/training.hpp"

namespace simmt {

enum class Task { NMT, MMT };
enum class Supervision { None, Scratch, Finetune };

std::string task_name(Task task);
Task task_from_name(const std::string& name);
std::string supervision_name(Supervision s);
Supervision supervision_from_name(const std::string& name);

// Data file locations for one experiment. Empty string means "not given".
struct DataPaths {
  std::string train_src, train_tgt, train_index;
  std::string val_src, val_tgt, val_index;
  std::string features;
  std::string annotations;      // training-side alignment annotations
  std::string val_annotations;  // evaluation-side annotations
  int min_freq = 1;
};

// One experiment, as read from a flat-sectioned key=value config file.
// Sections: [experiment], [model], [train], [data]. `--set section.key=value`
// overrides are applied after the file, in order.
struct ExperimentConfig {
  Task task = Task::NMT;
  Supervision supervision = Supervision::None;
  std::string output_dir;
  std::string init_checkpoint;  // finetune: the beta=0 base to start from
  int finetune_epochs = 20;

  ModelConfig model;     // vocab sizes and region_dim resolved from data
  TrainConfig train;
  DataPaths data;

  static ExperimentConfig parse_file(const std::string& path,
                                     const std::vector<std::string>& overrides = {});
  static ExperimentConfig parse_text(const std::string& text,
                                     const std::vector<std::string>& overrides = {});

  // Canonical key=value rendering; parse_text(snapshot()) reproduces the
  // config exactly, which is what makes reruns possible.
  std::string snapshot() const;

  // Cross-field rules that individual setters cannot see.
  void validate() const;
};

struct TrainSummary {
  double best_f1 = 0.0;
  double best_bleu = 0.0;
  double best_val_loss = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  bool diverged = false;
  std::string checkpoint_path, log_path, config_path;
};

// Trains per the config and writes checkpoint.bin, log.jsonl and config.txt
// into output_dir. Finetune mode loads init_checkpoint and reuses its
// vocabularies; other modes build vocabularies from the training corpus.
TrainSummary run_train(const ExperimentConfig& cfg);

struct TranslateOptions {
  int k = 1;
  bool consecutive = false;
  bool collect_traces = false;
  std::string image_index;  // required for multimodal checkpoints
  std::string features;
};

struct TranslateResult {
  std::vector<std::string> lines;
  std::vector<std::string> trace_lines;  // one JSON object per input line
};

TranslateResult run_translate(const std::string& checkpoint_path,
                              const std::string& src_path,
                              const TranslateOptions& opts);

struct EvaluateOptions {
  bool bleu = true;
  bool prefix_acc = false;
  std::vector<int> prefix_n = {1, 2, 3};
};

struct EvaluateReport {
  std::optional<double> bleu;
  std::vector<std::pair<int, double>> prefix_acc;  // (n, score)
  int lines = 0;

  std::string to_json() const;
};

EvaluateReport run_evaluate(const std::string& hyp_path,
                            const std::string& ref_path,
                            const EvaluateOptions& opts);

enum class FeatureSource { Gold, Detector };
FeatureSource feature_source_from_name(const std::string& name);

struct GroundEvalOptions {
  FeatureSource source = FeatureSource::Gold;
  std::string embeddings;  // label embedding table for the cosine score
  int k = 1;
};

struct GroundEvalReport {
  double mean_iou = 0.0;
  double accuracy = 0.0;  // IoU at 0.5
  double exact_match = 0.0;
  std::optional<double> mean_cosine;
  int words_scored = 0;
  int words_skipped = 0;  // annotated words with no usable gold target

  std::string to_json() const;
};

// Scores region attention against annotations. The attention row for word
// j comes from the full unidirectional encode, which agrees bit-for-bit
// with the wait-k decode-time row at the step where j was the newest read
// (the encoder never looks right of j, and masked softmax zeroes padded
// regions exactly), so one code path serves both this and attention dumps.
GroundEvalReport run_ground_eval(const std::string& checkpoint_path,
                                 const std::string& src_path,
                                 const std::string& image_index,
                                 const std::string& features,
                                 const std::string& annotations,
                                 const GroundEvalOptions& opts);

// Per-word region attention for one example, as a JSON document with the
// token strings, region boxes/labels, and for each row the wait-k write
// step at which that row first becomes available.
std::string run_attention_dump(const std::string& checkpoint_path,
                               const std::string& src_path,
                               const std::string& image_index,
                               const std::string& features,
                               int example_id, int k);

}  // namespace simmt
