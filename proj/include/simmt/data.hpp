#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "simmt/evaluation.hpp"
#include "simmt/multimodal.hpp"
#include "simmt/rng.hpp"
#include "simmt/tensor.hpp"

namespace simmt {

// Whitespace tokenizer over lowercased text, ids 0..3 reserved.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> id_to_token;

  static std::vector<std::string> tokenize(const std::string& line);

  // Token inventory from a corpus: specials first, then tokens seen at
  // least min_freq times, most frequent first (ties alphabetical).
  static Vocabulary build(const std::vector<std::string>& lines,
                          int min_freq = 1);
  static Vocabulary from_tokens(std::vector<std::string> id_to_token);

  int size() const { return static_cast<int>(id_to_token.size()); }
  int token_id(const std::string& token) const;  // kUnk when unknown
  const std::string& token(int id) const;

  // Source form: tokens + EOS. Target form adds BOS in front.
  std::vector<int> encode(const std::string& line, bool add_bos) const;
  std::vector<int> encode_tokens(const std::vector<std::string>& tokens,
                                 bool add_bos) const;

  // Surface tokens with PAD/BOS/EOS dropped; UNK keeps its marker.
  std::vector<std::string> decode(const std::vector<int>& ids) const;
  std::string decode_string(const std::vector<int>& ids) const;

 private:
  mutable std::unordered_map<std::string, int> lookup_;
  void rebuild_lookup() const;
};

// Per-image detector output: a fixed-capacity region grid of features,
// optional boxes and labels. Stored as float32 on disk, widened on load.
class RegionFeatureBank {
 public:
  RegionFeatureBank() = default;
  RegionFeatureBank(int image_count, int max_regions, int feature_dim);

  int image_count() const { return image_count_; }
  int max_regions() const { return max_regions_; }
  int feature_dim() const { return feature_dim_; }
  bool has_boxes() const { return !boxes_.empty(); }
  bool has_labels() const { return !labels_.empty(); }

  int valid_count(int image) const;
  void set_valid_count(int image, int count);

  double* features(int image);  // [max_regions * feature_dim]
  const double* features(int image) const;

  BoundingBox box(int image, int region) const;
  void set_box(int image, int region, const BoundingBox& box);

  const std::string& label(int image, int region) const;
  void set_label(int image, int region, const std::string& label);
  void enable_boxes();
  void enable_labels();

  // Feature rows of one image as a [valid_count, feature_dim] tensor.
  Tensor image_tensor(int image) const;

  void save(const std::string& path) const;
  static RegionFeatureBank load(const std::string& path);

 private:
  void check_image(int image) const;

  int image_count_ = 0;
  int max_regions_ = 0;
  int feature_dim_ = 0;
  std::vector<int> valid_counts_;
  std::vector<double> features_;      // [image, region, dim]
  std::vector<double> boxes_;         // [image, region, 4]
  std::vector<std::string> labels_;   // [image, region]
};

// Grounding annotation for one example: which source words align to which
// regions, plus the gold boxes and label used for evaluation.
struct AnnotationEntry {
  std::vector<int> word_indices;     // source token positions, 0-based
  std::vector<int> region_indices;   // rows of the example's image
  std::vector<BoundingBox> gold_boxes;
  std::string gold_label;            // empty when absent
};

struct ExampleAnnotation {
  int example = -1;
  std::vector<AnnotationEntry> entries;
};

std::vector<ExampleAnnotation> load_annotations(const std::string& path);
void save_annotations(const std::vector<ExampleAnnotation>& annotations,
                      const std::string& path);

struct MultimodalExample {
  std::vector<int> src;  // ... EOS
  std::vector<int> tgt;  // BOS ... EOS
  int image_id = -1;
  std::optional<AlignmentMatrix> alignment;
  std::vector<AnnotationEntry> annotation;  // empty when unannotated
};

struct Dataset {
  std::vector<MultimodalExample> examples;
  std::shared_ptr<RegionFeatureBank> features;  // null for text-only corpora

  bool multimodal() const { return features != nullptr; }
  size_t size() const { return examples.size(); }
};

struct CorpusPaths {
  std::string src;
  std::string tgt;
  std::string image_index;  // optional: one image id per line
  std::string features;     // optional: region feature bank
  std::string annotations;  // optional: grounding JSONL
};

// Whole file as lines, CR-LF tolerant. Missing file is a DataError.
std::vector<std::string> read_lines(const std::string& path);

// Reads a parallel corpus, wiring image features and annotations when
// given. Line-count or index mismatches are DataErrors naming the counts.
Dataset load_corpus(const CorpusPaths& paths, const Vocabulary& src_vocab,
                    const Vocabulary& tgt_vocab,
                    std::shared_ptr<RegionFeatureBank> shared_features = nullptr);

// Deterministic epoch batching: a permutation keyed by (seed, epoch) when
// shuffling, identity otherwise, cut into consecutive batches.
std::vector<std::vector<int>> make_batches(int n_examples, int batch_size,
                                           bool shuffle, uint64_t seed,
                                           int epoch);

// Examples padded to a rectangular batch. Target ids are split into the
// decoder input (BOS-led) and the shifted prediction targets; kPad fills
// all unused cells and marks untrained target positions.
struct PaddedBatch {
  int batch = 0;
  int src_len = 0;   // n
  int tgt_len = 0;   // t, decoder input length
  int regions = 0;
  std::vector<int> src;      // [batch * n]
  std::vector<int> src_lens;
  std::vector<int> tgt_in;   // [batch * t]
  std::vector<int> tgt_out;  // [batch * t]
  std::vector<int> tgt_lens;
  Tensor features;           // [batch, regions, dim]; numel 0 when text-only
  std::vector<int> region_counts;
  std::vector<std::optional<AlignmentMatrix>> alignments;
};

PaddedBatch make_padded_batch(const std::vector<MultimodalExample>& examples,
                              const RegionFeatureBank* bank);

// Synthetic grounding corpus. Sentences mix plain tokens, which translate
// deterministically, with ambiguous tokens whose translation depends on an
// archetype recoverable only from the paired image. Every ambiguous token
// owns a gold region (type, archetype, slot = its position) and one
// distractor sharing type and archetype at a different slot, so plain
// translation gives no reason to prefer the gold region.
struct SyntheticCorpusSpec {
  int train_examples = 2000;
  int val_examples = 200;
  int ambiguous_types = 8;
  int plain_types = 8;
  int archetypes = 4;
  int min_len = 3;
  int max_len = 7;
  double ambiguity = 0.5;
  double feature_noise = 0.1;
  uint64_t seed = 1;

  void validate() const;
  int feature_dim() const;  // type + archetype + slot one-hot blocks
};

struct SyntheticCorpus {
  std::string train_src, train_tgt, train_idx, train_ann;
  std::string val_src, val_tgt, val_idx, val_ann;
  std::string features;
  std::string embeddings;
  std::string manifest;
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec,
                                          const std::string& out_dir);

}  // namespace simmt
