#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "simmt/error.hpp"

namespace simmt {

// Corpus BLEU with one reference per hypothesis: clipped modified n-gram
// precision, geometric mean over orders 1..max_order, brevity penalty on
// corpus lengths. Orders with zero candidate n-grams corpus-wide drop out
// of the mean; for n >= 2 an order with zero matches is smoothed by adding
// one to both match and total. An all-empty hypothesis corpus scores 0.
template <class Token>
double bleu(const std::vector<std::vector<Token>>& hyps,
            const std::vector<std::vector<Token>>& refs, int max_order = 4);

// Mean over sentences of (positional matches within the first n tokens) / n.
// Positions past either sentence's end count as mismatches.
template <class Token>
double prefix_accuracy(const std::vector<std::vector<Token>>& hyps,
                       const std::vector<std::vector<Token>>& refs, int n);

// Exact-match rate at explicitly marked positions, pooled over the corpus.
template <class Token>
double position_accuracy(const std::vector<std::vector<Token>>& hyps,
                         const std::vector<std::vector<Token>>& refs,
                         const std::vector<std::vector<int>>& positions);

// Mean over sentences of the multiset token F1 between hypothesis and
// reference: 2 |overlap| / (|h| + |r|). Two empty sides count as 1.
template <class Token>
double token_f1(const std::vector<std::vector<Token>>& hyps,
                const std::vector<std::vector<Token>>& refs);

struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Intersection over union of two boxes; degenerate boxes (no positive
// extent) are a NumericError.
double iou(const BoundingBox& a, const BoundingBox& b);

// One grounded word: the region the model picked and the gold boxes the
// annotation allows. IoU is taken as the best match over gold boxes.
struct GroundingRecord {
  BoundingBox predicted_box;
  std::vector<BoundingBox> gold_boxes;
  std::string predicted_label;  // empty when the region bank has no labels
  std::string gold_label;       // empty when the annotation has none
};

struct GroundingScore {
  double mean_iou = 0.0;
  double accuracy = 0.0;  // IoU >= threshold rate
  int count = 0;
};

GroundingScore grounding_score(const std::vector<GroundingRecord>& records,
                               double iou_threshold = 0.5);

struct LabelSimilarity {
  bool exact = false;
  std::optional<double> cosine;  // absent when either label lacks a vector
};

using EmbeddingTable = std::unordered_map<std::string, std::vector<double>>;

// Text-format embeddings: one token followed by its vector per line.
EmbeddingTable load_embeddings(const std::string& path);

LabelSimilarity label_similarity(const std::string& predicted,
                                 const std::string& gold,
                                 const EmbeddingTable& embeddings);

// Mean exact-match and mean cosine (over pairs where both vectors exist).
struct LabelScore {
  double exact_rate = 0.0;
  std::optional<double> mean_cosine;
  int count = 0;
  int cosine_count = 0;
};

LabelScore label_score(const std::vector<std::pair<std::string, std::string>>&
                           predicted_gold_pairs,
                       const EmbeddingTable& embeddings);

// --- template implementations ---

namespace detail_eval {

template <class Token>
std::map<std::vector<Token>, int64_t> ngram_counts(
    const std::vector<Token>& tokens, int n) {
  std::map<std::vector<Token>, int64_t> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    counts[std::vector<Token>(tokens.begin() + i, tokens.begin() + i + n)]++;
  }
  return counts;
}

}  // namespace detail_eval

template <class Token>
double bleu(const std::vector<std::vector<Token>>& hyps,
            const std::vector<std::vector<Token>>& refs, int max_order) {
  if (hyps.size() != refs.size()) {
    throw DataError("bleu got " + std::to_string(hyps.size()) +
                    " hypotheses for " + std::to_string(refs.size()) +
                    " references");
  }
  if (hyps.empty()) throw DataError("bleu needs at least one sentence pair");
  if (max_order < 1) throw ConfigError("bleu max_order must be >= 1");

  std::vector<int64_t> matches(static_cast<size_t>(max_order), 0);
  std::vector<int64_t> totals(static_cast<size_t>(max_order), 0);
  int64_t hyp_len = 0, ref_len = 0;
  for (size_t s = 0; s < hyps.size(); ++s) {
    hyp_len += static_cast<int64_t>(hyps[s].size());
    ref_len += static_cast<int64_t>(refs[s].size());
    for (int n = 1; n <= max_order; ++n) {
      const auto hyp_counts = detail_eval::ngram_counts(hyps[s], n);
      if (hyp_counts.empty()) continue;
      const auto ref_counts = detail_eval::ngram_counts(refs[s], n);
      for (const auto& [gram, count] : hyp_counts) {
        totals[static_cast<size_t>(n - 1)] += count;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) {
          matches[static_cast<size_t>(n - 1)] += std::min(count, it->second);
        }
      }
    }
  }
  if (hyp_len == 0) return 0.0;

  double log_precision_sum = 0.0;
  int included = 0;
  for (int n = 1; n <= max_order; ++n) {
    int64_t m = matches[static_cast<size_t>(n - 1)];
    int64_t t = totals[static_cast<size_t>(n - 1)];
    if (t == 0) continue;  // no candidate n-grams of this order exist
    if (m == 0) {
      if (n == 1) return 0.0;  // unigram failure is not smoothed
      m = 1;
      t += 1;
    }
    log_precision_sum +=
        std::log(static_cast<double>(m) / static_cast<double>(t));
    ++included;
  }
  if (included == 0) return 0.0;
  const double geo_mean = std::exp(log_precision_sum / included);
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) /
                               static_cast<double>(hyp_len));
  return bp * geo_mean;
}

template <class Token>
double prefix_accuracy(const std::vector<std::vector<Token>>& hyps,
                       const std::vector<std::vector<Token>>& refs, int n) {
  if (hyps.size() != refs.size()) {
    throw DataError("prefix_accuracy got " + std::to_string(hyps.size()) +
                    " hypotheses for " + std::to_string(refs.size()) +
                    " references");
  }
  if (hyps.empty()) throw DataError("prefix_accuracy needs sentences");
  if (n < 1) throw ConfigError("prefix_accuracy needs n >= 1");
  double acc = 0.0;
  for (size_t s = 0; s < hyps.size(); ++s) {
    int hits = 0;
    for (int j = 0; j < n; ++j) {
      if (j < static_cast<int>(hyps[s].size()) &&
          j < static_cast<int>(refs[s].size()) &&
          hyps[s][static_cast<size_t>(j)] == refs[s][static_cast<size_t>(j)]) {
        ++hits;
      }
    }
    acc += static_cast<double>(hits) / n;
  }
  return acc / static_cast<double>(hyps.size());
}

template <class Token>
double position_accuracy(const std::vector<std::vector<Token>>& hyps,
                         const std::vector<std::vector<Token>>& refs,
                         const std::vector<std::vector<int>>& positions) {
  if (hyps.size() != refs.size() || hyps.size() != positions.size()) {
    throw DataError("position_accuracy input sizes disagree");
  }
  int64_t hits = 0, total = 0;
  for (size_t s = 0; s < hyps.size(); ++s) {
    for (int j : positions[s]) {
      if (j < 0 || j >= static_cast<int>(refs[s].size())) {
        throw DataError("position " + std::to_string(j) +
                        " outside reference of length " +
                        std::to_string(refs[s].size()));
      }
      ++total;
      if (j < static_cast<int>(hyps[s].size()) &&
          hyps[s][static_cast<size_t>(j)] == refs[s][static_cast<size_t>(j)]) {
        ++hits;
      }
    }
  }
  if (total == 0) throw DataError("position_accuracy got no positions");
  return static_cast<double>(hits) / static_cast<double>(total);
}

template <class Token>
double token_f1(const std::vector<std::vector<Token>>& hyps,
                const std::vector<std::vector<Token>>& refs) {
  if (hyps.size() != refs.size()) {
    throw DataError("token_f1 got " + std::to_string(hyps.size()) +
                    " hypotheses for " + std::to_string(refs.size()) +
                    " references");
  }
  if (hyps.empty()) throw DataError("token_f1 needs sentences");
  double acc = 0.0;
  for (size_t s = 0; s < hyps.size(); ++s) {
    if (hyps[s].empty() && refs[s].empty()) {
      acc += 1.0;
      continue;
    }
    std::map<Token, int64_t> ref_counts;
    for (const Token& t : refs[s]) ref_counts[t]++;
    int64_t overlap = 0;
    for (const Token& t : hyps[s]) {
      auto it = ref_counts.find(t);
      if (it != ref_counts.end() && it->second > 0) {
        --it->second;
        ++overlap;
      }
    }
    acc += 2.0 * static_cast<double>(overlap) /
           static_cast<double>(hyps[s].size() + refs[s].size());
  }
  return acc / static_cast<double>(hyps.size());
}

}  // namespace simmt
