#pragma once

#include <cstdint>
#include <vector>

#include "simmt/tensor.hpp"
#include "simmt/transformer.hpp"

namespace simmt {

// Linear map from detector feature space into the text model space:
// features [.., regions, region_dim] -> [.., regions, model_dim].
Tensor project_regions(const Tensor& features, const Tensor& proj_w,
                       const Tensor& proj_b);

struct CmiResult {
  Tensor states;     // [.., n, model_dim], layer-normed residual merge
  Tensor attention;  // [.., n, regions], one distribution per text position
};

// One attention read of the projected regions per text position:
//   out = LN(h + MHA(q=h, k=v=projected)).
// The single head's softmax rows come back for supervision and analysis.
// A fully masked region row (no valid region) is an error.
CmiResult cross_modal_interaction(const Tensor& h_text, const Tensor& projected,
                                  const Mask* region_mask,
                                  const CmiParams& params);

// Region visibility for a padded batch: every text row of example b may
// attend regions r < region_counts[b].
Mask batch_region_mask(int n, int regions,
                       const std::vector<int>& region_counts);

// Word-to-region supervision for one sentence. m is column-stochastic over
// annotated columns: column j holds 1/k at each of the k regions aligned
// to word j; columns without annotation are all-zero and flagged off.
struct AlignmentMatrix {
  int regions = 0;
  int words = 0;
  std::vector<double> m;           // row-major [regions, words]
  std::vector<uint8_t> annotated;  // per word column

  double at(int region, int word) const {
    return m[static_cast<size_t>(region) * words + word];
  }
  bool has_any() const {
    for (uint8_t a : annotated) {
      if (a) return true;
    }
    return false;
  }
};

struct AlignmentEntry {
  std::vector<int> word_indices;
  std::vector<int> region_indices;
};

// Builds M from annotation entries. Out-of-range indices, a word claimed by
// two entries, or an entry with no regions are DataErrors.
AlignmentMatrix build_alignment_matrix(const std::vector<AlignmentEntry>& entries,
                                       int n_words, int n_regions);

// Mean over annotated word columns of KL(M[:, j] || attention[j, :]),
// then mean over the sentences that have at least one annotated column.
// attention is [n, regions] with one alignment, or [batch, n, regions] with
// one (possibly null) alignment per batch row. Gradient reaches the
// attention only; a batch with no annotations yields a constant zero.
Tensor alignment_loss(const Tensor& attention,
                      const std::vector<const AlignmentMatrix*>& alignments);

// alpha * translation_loss + beta * alignment_loss.
Tensor multitask_loss(const Tensor& translation_loss,
                      const Tensor& align_loss, double alpha, double beta);

}  // namespace simmt
