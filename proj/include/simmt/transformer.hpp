#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "simmt/rng.hpp"
#include "simmt/tensor.hpp"

namespace simmt {

struct ModelConfig {
  int num_layers = 6;
  int model_dim = 512;
  int ff_dim = 2048;
  int num_heads = 8;
  int src_vocab = 0;
  int tgt_vocab = 0;
  int region_dim = 0;  // 0 disables the visual pathway
  double dropout = 0.1;

  void validate() const;
};

// Sinusoidal table [length, model_dim]: even columns sine, odd cosine,
// wavelengths geometric from 2*pi to 10000*2*pi.
Tensor positional_encoding(int length, int model_dim);

struct AttentionResult {
  Tensor output;
  Tensor weights;  // post-softmax rows, one distribution per query
};

// softmax(q k^T / sqrt(d_k)) v over the last two dims; leading dims batch.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v,
                                     const Mask* mask = nullptr);

// Per-head projections [model_dim, head_dim]; w_o merges the concatenation.
struct MultiHeadAttentionParams {
  std::vector<Tensor> w_q, w_k, w_v;
  Tensor w_o;
};

struct MultiHeadResult {
  Tensor output;
  std::vector<Tensor> head_weights;  // pre-dropout softmax weights per head
};

MultiHeadResult multi_head_attention(const Tensor& q_in, const Tensor& k_in,
                                     const Tensor& v_in, const Mask* mask,
                                     const MultiHeadAttentionParams& params,
                                     double attn_dropout = 0.0,
                                     Rng* rng = nullptr);

struct LayerNormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  LayerNormParams ln_attn, ln_ff;
  MultiHeadAttentionParams attn;
  FeedForwardParams ff;
};

struct DecoderLayerParams {
  LayerNormParams ln_self, ln_cross, ln_ff;
  MultiHeadAttentionParams self_attn, cross_attn;
  FeedForwardParams ff;
};

// Visual conditioning block: regions project into the text space, one
// attention head reads them per text position, a residual layer norm merges.
struct CmiParams {
  Tensor proj_w, proj_b;
  MultiHeadAttentionParams attn;
  LayerNormParams ln;
};

struct EncodedSource {
  Tensor states;         // [n, d] or [batch, n, d]
  Tensor cmi_attention;  // [n, regions] or [batch, n, regions]; empty if text-only

  bool has_cmi() const { return cmi_attention.numel() > 0; }
};

// Pre-norm encoder/decoder pair with shared target input/output embeddings.
// All parameters live in a named registry whose order is fixed by
// construction; optimizer state and checkpoints key off those names.
class TranslationModel {
 public:
  TranslationModel(const ModelConfig& cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  uint64_t init_seed() const { return init_seed_; }
  bool multimodal() const { return cfg_.region_dim > 0; }

  const std::vector<std::string>& param_names() const { return names_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  Tensor param(const std::string& name) const;
  int64_t param_count() const;
  void zero_grads();

  // Batched text encoder. `ids` is row-major [batch, n] with padding;
  // self_mask is [n, n] shared or [batch, n, n]. Returns states [batch, n, d].
  EncodedSource encode_batch(const std::vector<int>& ids, int64_t batch,
                             int64_t n, const Mask& self_mask,
                             Rng* dropout_rng = nullptr) const;

  // Text encoder plus visual conditioning. features is [batch, regions,
  // region_dim]; region_mask is [batch, n, regions] (empty mask = all valid).
  EncodedSource encode_batch_regions(const std::vector<int>& ids,
                                     int64_t batch, int64_t n,
                                     const Mask& self_mask,
                                     const Tensor& features,
                                     const Mask* region_mask = nullptr,
                                     Rng* dropout_rng = nullptr) const;

  // Decoder logits [batch, t, tgt_vocab]. `tgt_ids` is [batch, t] of
  // BOS-led inputs; cross_mask is [t, n] shared or [batch, t, n].
  Tensor decode_batch(const std::vector<int>& tgt_ids, int64_t batch,
                      int64_t t, const Tensor& enc_states,
                      const Mask& cross_mask, Rng* dropout_rng = nullptr) const;

  // Single-sentence surfaces used by incremental decoding and tests.
  EncodedSource encode(const std::vector<int>& src,
                       const Mask& self_mask) const;
  EncodedSource encode_regions(const std::vector<int>& src,
                               const Mask& self_mask,
                               const Tensor& features /* [regions, region_dim] */) const;
  Tensor decoder_forward(const std::vector<int>& tgt,
                         const EncodedSource& enc,
                         const Mask& cross_mask) const;  // [t, tgt_vocab]

 private:
  Tensor register_param(const std::string& name, Tensor t);
  MultiHeadAttentionParams make_attention(const std::string& prefix,
                                          int heads, int head_dim, Rng& rng);
  LayerNormParams make_layer_norm(const std::string& prefix);
  FeedForwardParams make_feed_forward(const std::string& prefix, Rng& rng);

  ModelConfig cfg_;
  uint64_t init_seed_ = 0;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::map<std::string, size_t> index_;

  Tensor src_embed_, tgt_embed_;
  std::vector<EncoderLayerParams> enc_layers_;
  std::vector<DecoderLayerParams> dec_layers_;
  LayerNormParams enc_final_ln_, dec_final_ln_;
  CmiParams cmi_;
};

}  // namespace simmt
