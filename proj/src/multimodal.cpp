#include "simmt/multimodal.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "simmt/error.hpp"

namespace simmt {

Tensor project_regions(const Tensor& features, const Tensor& proj_w,
                       const Tensor& proj_b) {
  if (features.ndim() < 2) {
    throw DimensionError("project_regions expects rank >= 2 features, got " +
                         shape_str(features.shape()));
  }
  if (features.dim(-1) != proj_w.dim(0)) {
    throw DimensionError("region feature dim " +
                         std::to_string(features.dim(-1)) +
                         " does not match projection " +
                         shape_str(proj_w.shape()));
  }
  return add(matmul(features, proj_w), proj_b);
}

CmiResult cross_modal_interaction(const Tensor& h_text, const Tensor& projected,
                                  const Mask* region_mask,
                                  const CmiParams& params) {
  if (h_text.dim(-1) != projected.dim(-1)) {
    throw DimensionError("text states " + shape_str(h_text.shape()) +
                         " and projected regions " +
                         shape_str(projected.shape()) +
                         " disagree on model dim");
  }
  MultiHeadResult attn = multi_head_attention(h_text, projected, projected,
                                              region_mask, params.attn);
  Tensor merged =
      layer_norm(add(h_text, attn.output), params.ln.gain, params.ln.bias);
  return {merged, attn.head_weights[0]};
}

Mask batch_region_mask(int n, int regions,
                       const std::vector<int>& region_counts) {
  if (region_counts.empty()) throw DimensionError("batched mask needs examples");
  const auto batch = static_cast<int64_t>(region_counts.size());
  Mask m({batch, n, regions}, false);
  for (int64_t b = 0; b < batch; ++b) {
    const int count = region_counts[static_cast<size_t>(b)];
    if (count < 1 || count > regions) {
      throw DimensionError("region count " + std::to_string(count) +
                           " outside [1, " + std::to_string(regions) + "]");
    }
    for (int i = 0; i < n; ++i) {
      for (int r = 0; r < count; ++r) {
        m.allowed[static_cast<size_t>((b * n + i) * regions + r)] = 1;
      }
    }
  }
  return m;
}

AlignmentMatrix build_alignment_matrix(const std::vector<AlignmentEntry>& entries,
                                       int n_words, int n_regions) {
  if (n_words <= 0 || n_regions <= 0) {
    throw DimensionError("alignment matrix needs positive dims, got " +
                         std::to_string(n_regions) + " regions x " +
                         std::to_string(n_words) + " words");
  }
  AlignmentMatrix out;
  out.regions = n_regions;
  out.words = n_words;
  out.m.assign(static_cast<size_t>(n_regions) * n_words, 0.0);
  out.annotated.assign(static_cast<size_t>(n_words), 0);
  for (const auto& entry : entries) {
    if (entry.word_indices.empty()) continue;
    if (entry.region_indices.empty()) {
      throw DataError("alignment entry names words but no regions");
    }
    const double mass = 1.0 / static_cast<double>(entry.region_indices.size());
    for (int w : entry.word_indices) {
      if (w < 0 || w >= n_words) {
        throw DataError("alignment word index " + std::to_string(w) +
                        " out of range [0, " + std::to_string(n_words) + ")");
      }
      if (out.annotated[static_cast<size_t>(w)]) {
        throw DataError("word " + std::to_string(w) +
                        " appears in more than one alignment entry");
      }
      out.annotated[static_cast<size_t>(w)] = 1;
      for (int r : entry.region_indices) {
        if (r < 0 || r >= n_regions) {
          throw DataError("alignment region index " + std::to_string(r) +
                          " out of range [0, " + std::to_string(n_regions) +
                          ")");
        }
        out.m[static_cast<size_t>(r) * n_words + w] = mass;
      }
    }
  }
  return out;
}

Tensor alignment_loss(const Tensor& attention,
                      const std::vector<const AlignmentMatrix*>& alignments) {
  int64_t batch = 0, n = 0, regions = 0;
  if (attention.ndim() == 2) {
    batch = 1;
    n = attention.dim(0);
    regions = attention.dim(1);
  } else if (attention.ndim() == 3) {
    batch = attention.dim(0);
    n = attention.dim(1);
    regions = attention.dim(2);
  } else {
    throw DimensionError("alignment_loss expects rank 2 or 3 attention, got " +
                         shape_str(attention.shape()));
  }
  if (static_cast<int64_t>(alignments.size()) != batch) {
    throw DimensionError("alignment_loss got " +
                         std::to_string(alignments.size()) +
                         " alignments for batch " + std::to_string(batch));
  }
  for (const AlignmentMatrix* a : alignments) {
    if (!a) continue;
    if (a->words > n || a->regions > regions) {
      throw DimensionError("alignment matrix " + std::to_string(a->regions) +
                           "x" + std::to_string(a->words) +
                           " exceeds attention grid " + std::to_string(n) +
                           "x" + std::to_string(regions));
    }
  }

  const auto& av = attention.data();
  const int64_t sent_stride = n * regions;
  double total = 0.0;
  int sentences = 0;
  std::vector<int> col_counts(static_cast<size_t>(batch), 0);
  for (int64_t b = 0; b < batch; ++b) {
    const AlignmentMatrix* a = alignments[static_cast<size_t>(b)];
    if (!a) continue;
    int cols = 0;
    double acc = 0.0;
    for (int j = 0; j < a->words; ++j) {
      if (!a->annotated[static_cast<size_t>(j)]) continue;
      ++cols;
      for (int i = 0; i < a->regions; ++i) {
        const double p = a->at(i, j);
        if (p <= 0.0) continue;
        const double q =
            av[static_cast<size_t>(b * sent_stride + j * regions + i)];
        acc += p * (std::log(p) - std::log(std::max(q, kKlFloor)));
      }
    }
    col_counts[static_cast<size_t>(b)] = cols;
    if (cols > 0) {
      total += acc / cols;
      ++sentences;
    }
  }
  Tensor out = Tensor::scalar(sentences > 0 ? total / sentences : 0.0);

  Tape* tape = active_tape();
  if (tape && attention.requires_grad() && sentences > 0) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    std::vector<AlignmentMatrix> held;
    held.reserve(alignments.size());
    std::vector<int> live;
    for (int64_t b = 0; b < batch; ++b) {
      if (alignments[static_cast<size_t>(b)] &&
          col_counts[static_cast<size_t>(b)] > 0) {
        held.push_back(*alignments[static_cast<size_t>(b)]);
        live.push_back(static_cast<int>(b));
      }
    }
    tape->push([attention, out, held = std::move(held),
                live = std::move(live), col_counts = std::move(col_counts),
                sentences, sent_stride, regions]() {
      if (!out.has_grad()) return;
      const double g = out.impl()->grad[0] / sentences;
      const auto& av = attention.data();
      auto* impl = attention.impl();
      if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
      auto& ga = impl->grad;
      for (size_t s = 0; s < live.size(); ++s) {
        const int b = live[s];
        const AlignmentMatrix& a = held[s];
        const double per_col = g / col_counts[static_cast<size_t>(b)];
        for (int j = 0; j < a.words; ++j) {
          if (!a.annotated[static_cast<size_t>(j)]) continue;
          for (int i = 0; i < a.regions; ++i) {
            const double p = a.at(i, j);
            if (p <= 0.0) continue;
            const size_t idx = static_cast<size_t>(
                static_cast<int64_t>(b) * sent_stride + j * regions + i);
            if (av[idx] > kKlFloor) ga[idx] -= per_col * p / av[idx];
          }
        }
      }
    });
  }
  return out;
}

Tensor multitask_loss(const Tensor& translation_loss, const Tensor& align_loss,
                      double alpha, double beta) {
  if (translation_loss.numel() != 1 || align_loss.numel() != 1) {
    throw DimensionError("multitask_loss expects scalar losses");
  }
  return add(scale(translation_loss, alpha), scale(align_loss, beta));
}

}  // namespace simmt
