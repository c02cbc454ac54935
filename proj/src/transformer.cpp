#include "simmt/transformer.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "simmt/error.hpp"
#include "simmt/multimodal.hpp"

namespace simmt {

void ModelConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (model_dim < 1) throw ConfigError("model_dim must be >= 1");
  if (ff_dim < 1) throw ConfigError("ff_dim must be >= 1");
  if (num_heads < 1) throw ConfigError("num_heads must be >= 1");
  if (model_dim % num_heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) +
                      " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (src_vocab < 4 || tgt_vocab < 4) {
    throw ConfigError("vocab sizes must cover the four special tokens");
  }
  if (region_dim < 0) throw ConfigError("region_dim must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("dropout must be in [0, 1)");
  }
}

Tensor positional_encoding(int length, int model_dim) {
  if (length < 1 || model_dim < 1) {
    throw DimensionError("positional_encoding needs positive dims");
  }
  Tensor pe({length, model_dim});
  auto& v = pe.data();
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i + 1 < model_dim; i += 2) {
      const double angle =
          pos * std::exp(-std::log(10000.0) * i / model_dim);
      v[static_cast<size_t>(pos) * model_dim + i] = std::sin(angle);
      v[static_cast<size_t>(pos) * model_dim + i + 1] = std::cos(angle);
    }
    if (model_dim % 2 == 1) {
      const double angle =
          pos * std::exp(-std::log(10000.0) * (model_dim - 1) / model_dim);
      v[static_cast<size_t>(pos) * model_dim + model_dim - 1] =
          std::sin(angle);
    }
  }
  return pe;
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v, const Mask* mask) {
  if (q.ndim() < 2 || k.ndim() < 2 || v.ndim() < 2) {
    throw DimensionError("attention operands must have rank >= 2");
  }
  if (q.dim(-1) != k.dim(-1)) {
    throw DimensionError("query dim " + std::to_string(q.dim(-1)) +
                         " does not match key dim " +
                         std::to_string(k.dim(-1)));
  }
  if (k.dim(-2) != v.dim(-2)) {
    throw DimensionError("key count " + std::to_string(k.dim(-2)) +
                         " does not match value count " +
                         std::to_string(v.dim(-2)));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Tensor weights = softmax(scores, -1, mask);
  return {matmul(weights, v), weights};
}

MultiHeadResult multi_head_attention(const Tensor& q_in, const Tensor& k_in,
                                     const Tensor& v_in, const Mask* mask,
                                     const MultiHeadAttentionParams& params,
                                     double attn_dropout, Rng* rng) {
  const size_t heads = params.w_q.size();
  if (heads == 0 || params.w_k.size() != heads || params.w_v.size() != heads) {
    throw DimensionError("attention parameter lists disagree on head count");
  }
  MultiHeadResult result;
  std::vector<Tensor> mixed;
  mixed.reserve(heads);
  for (size_t h = 0; h < heads; ++h) {
    Tensor qh = matmul(q_in, params.w_q[h]);
    Tensor kh = matmul(k_in, params.w_k[h]);
    Tensor vh = matmul(v_in, params.w_v[h]);
    const double inv_sqrt_d =
        1.0 / std::sqrt(static_cast<double>(qh.dim(-1)));
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
    Tensor weights = softmax(scores, -1, mask);
    result.head_weights.push_back(weights);
    Tensor applied = (attn_dropout > 0.0 && rng)
                         ? dropout(weights, attn_dropout, *rng)
                         : weights;
    mixed.push_back(matmul(applied, vh));
  }
  Tensor cat = heads == 1 ? mixed[0] : concat(mixed, -1);
  result.output = matmul(cat, params.w_o);
  return result;
}

namespace {

Tensor maybe_dropout(const Tensor& x, double p, Rng* rng) {
  if (p <= 0.0 || !rng) return x;
  return dropout(x, p, *rng);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  Tensor inner = relu(add(matmul(x, p.w1), p.b1));
  return add(matmul(inner, p.w2), p.b2);
}

Tensor encoder_layer(const Tensor& h, const EncoderLayerParams& layer,
                     const Mask* mask, double drop, Rng* rng) {
  Tensor normed = layer_norm(h, layer.ln_attn.gain, layer.ln_attn.bias);
  MultiHeadResult attn =
      multi_head_attention(normed, normed, normed, mask, layer.attn, drop, rng);
  Tensor after_attn = add(h, maybe_dropout(attn.output, drop, rng));
  Tensor normed2 =
      layer_norm(after_attn, layer.ln_ff.gain, layer.ln_ff.bias);
  Tensor ff = feed_forward(normed2, layer.ff);
  return add(after_attn, maybe_dropout(ff, drop, rng));
}

Tensor decoder_layer(const Tensor& x, const Tensor& enc_states,
                     const DecoderLayerParams& layer, const Mask* self_mask,
                     const Mask* cross_mask, double drop, Rng* rng) {
  Tensor normed = layer_norm(x, layer.ln_self.gain, layer.ln_self.bias);
  MultiHeadResult self_attn = multi_head_attention(
      normed, normed, normed, self_mask, layer.self_attn, drop, rng);
  Tensor after_self = add(x, maybe_dropout(self_attn.output, drop, rng));

  Tensor normed2 =
      layer_norm(after_self, layer.ln_cross.gain, layer.ln_cross.bias);
  MultiHeadResult cross = multi_head_attention(
      normed2, enc_states, enc_states, cross_mask, layer.cross_attn, drop, rng);
  Tensor after_cross = add(after_self, maybe_dropout(cross.output, drop, rng));

  Tensor normed3 =
      layer_norm(after_cross, layer.ln_ff.gain, layer.ln_ff.bias);
  Tensor ff = feed_forward(normed3, layer.ff);
  return add(after_cross, maybe_dropout(ff, drop, rng));
}

void check_grid_mask(const Mask& mask, int64_t batch, int64_t rows,
                     int64_t cols, const char* what) {
  const bool shared = mask.shape == Shape{rows, cols};
  const bool per_batch = mask.shape == Shape{batch, rows, cols};
  if (!shared && !per_batch) {
    throw DimensionError(std::string(what) + " mask shaped " +
                         shape_str(mask.shape) + " does not fit grid [" +
                         std::to_string(batch) + ", " + std::to_string(rows) +
                         ", " + std::to_string(cols) + "]");
  }
}

}  // namespace

TranslationModel::TranslationModel(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_(cfg), init_seed_(init_seed) {
  cfg_.validate();
  Rng rng(init_seed);
  const int d = cfg_.model_dim;
  const int head_dim = d / cfg_.num_heads;

  src_embed_ = register_param(
      "src_embed", Tensor::xavier_uniform(cfg_.src_vocab, d, rng));
  tgt_embed_ = register_param(
      "tgt_embed", Tensor::xavier_uniform(cfg_.tgt_vocab, d, rng));

  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string base = "enc.layer" + std::to_string(l);
    EncoderLayerParams layer;
    layer.ln_attn = make_layer_norm(base + ".ln_attn");
    layer.attn = make_attention(base + ".attn", cfg_.num_heads, head_dim, rng);
    layer.ln_ff = make_layer_norm(base + ".ln_ff");
    layer.ff = make_feed_forward(base + ".ff", rng);
    enc_layers_.push_back(layer);
  }
  enc_final_ln_ = make_layer_norm("enc.final_ln");

  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string base = "dec.layer" + std::to_string(l);
    DecoderLayerParams layer;
    layer.ln_self = make_layer_norm(base + ".ln_self");
    layer.self_attn =
        make_attention(base + ".self_attn", cfg_.num_heads, head_dim, rng);
    layer.ln_cross = make_layer_norm(base + ".ln_cross");
    layer.cross_attn =
        make_attention(base + ".cross_attn", cfg_.num_heads, head_dim, rng);
    layer.ln_ff = make_layer_norm(base + ".ln_ff");
    layer.ff = make_feed_forward(base + ".ff", rng);
    dec_layers_.push_back(layer);
  }
  dec_final_ln_ = make_layer_norm("dec.final_ln");

  if (cfg_.region_dim > 0) {
    cmi_.proj_w = register_param(
        "cmi.proj_w", Tensor::xavier_uniform(cfg_.region_dim, d, rng));
    cmi_.proj_b = register_param("cmi.proj_b", Tensor({d}, 0.0));
    cmi_.attn = make_attention("cmi.attn", 1, d, rng);
    cmi_.ln = make_layer_norm("cmi.ln");
  }
}

Tensor TranslationModel::register_param(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  index_[name] = params_.size();
  names_.push_back(name);
  params_.push_back(t);
  return t;
}

MultiHeadAttentionParams TranslationModel::make_attention(
    const std::string& prefix, int heads, int head_dim, Rng& rng) {
  MultiHeadAttentionParams p;
  const int d = cfg_.model_dim;
  for (int h = 0; h < heads; ++h) {
    const std::string hb = prefix + ".head" + std::to_string(h);
    p.w_q.push_back(
        register_param(hb + ".w_q", Tensor::xavier_uniform(d, head_dim, rng)));
    p.w_k.push_back(
        register_param(hb + ".w_k", Tensor::xavier_uniform(d, head_dim, rng)));
    p.w_v.push_back(
        register_param(hb + ".w_v", Tensor::xavier_uniform(d, head_dim, rng)));
  }
  p.w_o = register_param(prefix + ".w_o", Tensor::xavier_uniform(d, d, rng));
  return p;
}

LayerNormParams TranslationModel::make_layer_norm(const std::string& prefix) {
  LayerNormParams p;
  p.gain = register_param(prefix + ".gain", Tensor({cfg_.model_dim}, 1.0));
  p.bias = register_param(prefix + ".bias", Tensor({cfg_.model_dim}, 0.0));
  return p;
}

FeedForwardParams TranslationModel::make_feed_forward(const std::string& prefix,
                                                      Rng& rng) {
  FeedForwardParams p;
  const int d = cfg_.model_dim, f = cfg_.ff_dim;
  p.w1 = register_param(prefix + ".w1", Tensor::xavier_uniform(d, f, rng));
  p.b1 = register_param(prefix + ".b1", Tensor({f}, 0.0));
  p.w2 = register_param(prefix + ".w2", Tensor::xavier_uniform(f, d, rng));
  p.b2 = register_param(prefix + ".b2", Tensor({d}, 0.0));
  return p;
}

Tensor TranslationModel::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("unknown parameter: " + name);
  }
  return params_[it->second];
}

int64_t TranslationModel::param_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

void TranslationModel::zero_grads() {
  for (auto& p : params_) p.zero_grad();
}

EncodedSource TranslationModel::encode_batch(const std::vector<int>& ids,
                                             int64_t batch, int64_t n,
                                             const Mask& self_mask,
                                             Rng* dropout_rng) const {
  if (static_cast<int64_t>(ids.size()) != batch * n) {
    throw DimensionError("encode_batch got " + std::to_string(ids.size()) +
                         " ids for grid [" + std::to_string(batch) + ", " +
                         std::to_string(n) + "]");
  }
  check_grid_mask(self_mask, batch, n, n, "encoder self");
  const int d = cfg_.model_dim;
  Tensor h = embedding(src_embed_, ids);
  h = scale(h, std::sqrt(static_cast<double>(d)));
  h = reshape(h, {batch, n, d});
  h = add(h, positional_encoding(static_cast<int>(n), d));
  h = maybe_dropout(h, cfg_.dropout, dropout_rng);
  for (const auto& layer : enc_layers_) {
    h = encoder_layer(h, layer, &self_mask, cfg_.dropout, dropout_rng);
  }
  h = layer_norm(h, enc_final_ln_.gain, enc_final_ln_.bias);
  return {h, Tensor()};
}

EncodedSource TranslationModel::encode_batch_regions(
    const std::vector<int>& ids, int64_t batch, int64_t n,
    const Mask& self_mask, const Tensor& features, const Mask* region_mask,
    Rng* dropout_rng) const {
  if (!multimodal()) {
    throw ConfigError("model has no visual pathway (region_dim is 0)");
  }
  if (features.ndim() != 3 || features.dim(0) != batch ||
      features.dim(-1) != cfg_.region_dim) {
    throw DimensionError("region features shaped " +
                         shape_str(features.shape()) + " do not fit batch " +
                         std::to_string(batch) + " with region_dim " +
                         std::to_string(cfg_.region_dim));
  }
  if (region_mask) {
    check_grid_mask(*region_mask, batch, n, features.dim(1), "region");
  }
  EncodedSource text = encode_batch(ids, batch, n, self_mask, dropout_rng);
  Tensor projected = project_regions(features, cmi_.proj_w, cmi_.proj_b);
  CmiResult cmi =
      cross_modal_interaction(text.states, projected, region_mask, cmi_);
  return {cmi.states, cmi.attention};
}

Tensor TranslationModel::decode_batch(const std::vector<int>& tgt_ids,
                                      int64_t batch, int64_t t,
                                      const Tensor& enc_states,
                                      const Mask& cross_mask,
                                      Rng* dropout_rng) const {
  if (static_cast<int64_t>(tgt_ids.size()) != batch * t) {
    throw DimensionError("decode_batch got " + std::to_string(tgt_ids.size()) +
                         " ids for grid [" + std::to_string(batch) + ", " +
                         std::to_string(t) + "]");
  }
  if (enc_states.ndim() != 3 || enc_states.dim(0) != batch ||
      enc_states.dim(-1) != cfg_.model_dim) {
    throw DimensionError("encoder states shaped " +
                         shape_str(enc_states.shape()) +
                         " do not fit the decoder batch");
  }
  const int64_t n = enc_states.dim(1);
  check_grid_mask(cross_mask, batch, t, n, "cross");

  Mask causal({t, t}, false);
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j <= i; ++j) causal.set(i, j, true);
  }

  const int d = cfg_.model_dim;
  Tensor x = embedding(tgt_embed_, tgt_ids);
  x = scale(x, std::sqrt(static_cast<double>(d)));
  x = reshape(x, {batch, t, d});
  x = add(x, positional_encoding(static_cast<int>(t), d));
  x = maybe_dropout(x, cfg_.dropout, dropout_rng);
  for (const auto& layer : dec_layers_) {
    x = decoder_layer(x, enc_states, layer, &causal, &cross_mask, cfg_.dropout,
                      dropout_rng);
  }
  x = layer_norm(x, dec_final_ln_.gain, dec_final_ln_.bias);
  // Shared target embeddings double as the output projection.
  return matmul(x, transpose(tgt_embed_));
}

EncodedSource TranslationModel::encode(const std::vector<int>& src,
                                       const Mask& self_mask) const {
  const int64_t n = static_cast<int64_t>(src.size());
  EncodedSource batched = encode_batch(src, 1, n, self_mask);
  return {reshape(batched.states, {n, cfg_.model_dim}), Tensor()};
}

EncodedSource TranslationModel::encode_regions(const std::vector<int>& src,
                                               const Mask& self_mask,
                                               const Tensor& features) const {
  if (features.ndim() != 2) {
    throw DimensionError("encode_regions expects [regions, region_dim], got " +
                         shape_str(features.shape()));
  }
  const int64_t n = static_cast<int64_t>(src.size());
  const int64_t regions = features.dim(0);
  Tensor expanded = reshape(features, {1, regions, features.dim(1)});
  EncodedSource batched =
      encode_batch_regions(src, 1, n, self_mask, expanded, nullptr);
  return {reshape(batched.states, {n, cfg_.model_dim}),
          reshape(batched.cmi_attention, {n, regions})};
}

Tensor TranslationModel::decoder_forward(const std::vector<int>& tgt,
                                         const EncodedSource& enc,
                                         const Mask& cross_mask) const {
  if (enc.states.ndim() != 2) {
    throw DimensionError("decoder_forward expects [n, d] encoder states, got " +
                         shape_str(enc.states.shape()));
  }
  const int64_t t = static_cast<int64_t>(tgt.size());
  const int64_t n = enc.states.dim(0);
  Tensor expanded = reshape(enc.states, {1, n, cfg_.model_dim});
  Tensor logits = decode_batch(tgt, 1, t, expanded, cross_mask);
  return reshape(logits, {t, cfg_.tgt_vocab});
}

}  // namespace simmt
