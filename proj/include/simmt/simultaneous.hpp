#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "simmt/rng.hpp"
#include "simmt/tensor.hpp"
#include "simmt/transformer.hpp"

namespace simmt {

// Wait-k read schedule: source tokens visible before emitting target token
// t (1-based), capped at the source length.
int g_waitk(int k, int t, int src_len);

// Encoder self-attention restricted to j <= i, so the encoding of a prefix
// never changes when more source arrives.
Mask unidirectional_encoder_mask(int n);

// Decoder-to-source visibility under wait-k: target row t (0-based) may
// read source positions j < g_waitk(k, t + 1, src_len).
Mask waitk_cross_mask(int k, int tgt_len, int src_len);

Mask causal_mask(int n);

// Batched variants over right-padded batches: example b sees only its own
// j < src_lens[b] columns. Encoder rows add j <= i when unidirectional.
Mask batch_encoder_self_mask(int n, const std::vector<int>& src_lens,
                             bool unidirectional);
Mask batch_cross_mask(int tgt_len, int src_len,
                      const std::vector<int>& src_lens);
Mask batch_waitk_cross_mask(int k, int tgt_len, int src_len,
                            const std::vector<int>& src_lens);

enum class Action : uint8_t { Read, Write };

// One simultaneous decode: the interleaved action sequence plus everything
// emitted. region_attention, when collected, holds for each write the
// grounding row of the newest read source position.
struct DecodeTrace {
  std::vector<Action> actions;
  std::vector<int> emitted;      // token ids, final EOS included when produced
  std::vector<int> read_counts;  // source tokens visible at each write
  std::vector<std::vector<double>> region_attention;
  bool truncated = false;

  std::string action_string() const;  // "RRWRW..."
  std::string to_json_line() const;
  static DecodeTrace from_json_line(const std::string& line);
};

// With probability p, truncates (x, y) to (x[:lx], y[:ly]) where lx is
// uniform on {1..|x|} and ly = max(2, round(lx * |y| / |x|)), rounding half
// away from zero. Draws one uniform always, one more when truncating.
bool prefix_truncate_pair(std::vector<int>& x, std::vector<int>& y, double p,
                          Rng& rng);

// Applies prefix_truncate_pair to every pair in order; returns how many
// were truncated.
int prefix_truncate_batch(
    std::vector<std::pair<std::vector<int>, std::vector<int>>>& batch,
    double p, Rng& rng);

struct DecodeOptions {
  int k = 1;
  int max_len = -1;            // -1 picks 2 * src_len + 10
  bool collect_attention = false;
  bool unidirectional = true;  // encoder self-attention masking
  int bos_id = 1;
  int eos_id = 2;
};

// Greedy wait-k decoding with re-encoding after each read. `features` is
// [regions, region_dim] and mandatory iff the model is multimodal.
DecodeTrace greedy_waitk_decode(const TranslationModel& model,
                                const std::vector<int>& src,
                                const Tensor* features,
                                const DecodeOptions& opts);

// Full-source greedy decoding (wait-k with k = |src|).
std::vector<int> consecutive_decode(const TranslationModel& model,
                                    const std::vector<int>& src,
                                    const Tensor* features, int max_len = -1,
                                    bool unidirectional = true);

}  // namespace simmt
