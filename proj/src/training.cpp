#include "simmt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "simmt/error.hpp"
#include "simmt/multimodal.hpp"
#include "simmt/simultaneous.hpp"

namespace simmt {

double noam_lr(int64_t step, int warmup, int model_dim, double scale) {
  if (step < 1) throw ConfigError("noam_lr needs step >= 1");
  if (warmup < 1) throw ConfigError("noam_lr needs warmup >= 1");
  if (model_dim < 1) throw ConfigError("noam_lr needs model_dim >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return scale * std::pow(static_cast<double>(model_dim), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

double clip_gradients(std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_norm must be positive");
  double sq = 0.0;
  for (auto& p : params) {
    for (double g : p.impl()->grad) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient encountered while clipping");
      }
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      for (double& g : p.impl()->grad) g *= factor;
    }
  }
  return norm;
}

OptimizerState OptimizerState::init(const std::vector<Tensor>& params) {
  OptimizerState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const auto& p : params) {
    state.m.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    state.v.emplace_back(static_cast<size_t>(p.numel()), 0.0);
  }
  return state;
}

void adam_step(std::vector<Tensor>& params, OptimizerState& state, double lr,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("optimizer state does not match parameter list");
  }
  ++state.step;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) {
      throw DimensionError("optimizer moments for parameter " +
                           std::to_string(i) + " have wrong size");
    }
    const auto& grad = params[i].impl()->grad;
    for (size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      data[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
}

std::string regime_name(TrainRegime regime) {
  switch (regime) {
    case TrainRegime::Consecutive: return "consecutive";
    case TrainRegime::WaitK: return "waitk";
    case TrainRegime::Prefix: return "prefix";
  }
  throw ConfigError("unknown train regime");
}

TrainRegime regime_from_name(const std::string& name) {
  if (name == "consecutive") return TrainRegime::Consecutive;
  if (name == "waitk") return TrainRegime::WaitK;
  if (name == "prefix") return TrainRegime::Prefix;
  throw ConfigError("unknown train regime: " + name +
                    " (expected consecutive, waitk or prefix)");
}

void TrainConfig::validate() const {
  if (lr_scale <= 0.0) throw ConfigError("lr_scale must be positive");
  if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 ||
      adam_beta2 >= 1.0) {
    throw ConfigError("adam betas must be in (0, 1)");
  }
  if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("label_smoothing must be in [0, 1)");
  }
  if (clip_norm <= 0.0) throw ConfigError("clip_norm must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (wait_k < 1) throw ConfigError("wait_k must be >= 1");
  if (prefix_p < 0.0 || prefix_p > 1.0) {
    throw ConfigError("prefix_p must be in [0, 1]");
  }
  if (supervision.alpha < 0.0 || supervision.beta < 0.0) {
    throw ConfigError("supervision weights must be >= 0");
  }
  if (constant_lr_value <= 0.0) {
    throw ConfigError("constant_lr_value must be positive");
  }
}

namespace {

nlohmann::json model_config_json(const ModelConfig& cfg) {
  return {{"num_layers", cfg.num_layers}, {"model_dim", cfg.model_dim},
          {"ff_dim", cfg.ff_dim},         {"num_heads", cfg.num_heads},
          {"src_vocab", cfg.src_vocab},   {"tgt_vocab", cfg.tgt_vocab},
          {"region_dim", cfg.region_dim}, {"dropout", cfg.dropout}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.num_layers = j.at("num_layers").get<int>();
  cfg.model_dim = j.at("model_dim").get<int>();
  cfg.ff_dim = j.at("ff_dim").get<int>();
  cfg.num_heads = j.at("num_heads").get<int>();
  cfg.src_vocab = j.at("src_vocab").get<int>();
  cfg.tgt_vocab = j.at("tgt_vocab").get<int>();
  cfg.region_dim = j.at("region_dim").get<int>();
  cfg.dropout = j.at("dropout").get<double>();
  return cfg;
}

nlohmann::json train_config_json(const TrainConfig& cfg) {
  return {{"lr_scale", cfg.lr_scale},
          {"adam_beta1", cfg.adam_beta1},
          {"adam_beta2", cfg.adam_beta2},
          {"adam_eps", cfg.adam_eps},
          {"warmup_steps", cfg.warmup_steps},
          {"batch_size", cfg.batch_size},
          {"label_smoothing", cfg.label_smoothing},
          {"clip_norm", cfg.clip_norm},
          {"max_epochs", cfg.max_epochs},
          {"patience", cfg.patience},
          {"seed", cfg.seed},
          {"regime", regime_name(cfg.regime)},
          {"wait_k", cfg.wait_k},
          {"prefix_p", cfg.prefix_p},
          {"alpha", cfg.supervision.alpha},
          {"beta", cfg.supervision.beta},
          {"unidirectional_encoder", cfg.unidirectional_encoder},
          {"constant_lr", cfg.constant_lr},
          {"constant_lr_value", cfg.constant_lr_value}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.lr_scale = j.at("lr_scale").get<double>();
  cfg.adam_beta1 = j.at("adam_beta1").get<double>();
  cfg.adam_beta2 = j.at("adam_beta2").get<double>();
  cfg.adam_eps = j.at("adam_eps").get<double>();
  cfg.warmup_steps = j.at("warmup_steps").get<int>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.label_smoothing = j.at("label_smoothing").get<double>();
  cfg.clip_norm = j.at("clip_norm").get<double>();
  cfg.max_epochs = j.at("max_epochs").get<int>();
  cfg.patience = j.at("patience").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.regime = regime_from_name(j.at("regime").get<std::string>());
  cfg.wait_k = j.at("wait_k").get<int>();
  cfg.prefix_p = j.at("prefix_p").get<double>();
  cfg.supervision.alpha = j.at("alpha").get<double>();
  cfg.supervision.beta = j.at("beta").get<double>();
  cfg.unidirectional_encoder = j.at("unidirectional_encoder").get<bool>();
  cfg.constant_lr = j.at("constant_lr").get<bool>();
  cfg.constant_lr_value = j.at("constant_lr_value").get<double>();
  return cfg;
}

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_i64(std::ofstream& out, int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64s(std::ofstream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError("truncated checkpoint: " + path);
  return v;
}

int64_t read_i64(std::ifstream& in, const std::string& path) {
  int64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError("truncated checkpoint: " + path);
  return v;
}

void read_f64s(std::ifstream& in, std::vector<double>& v, size_t n,
               const std::string& path) {
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint: " + path);
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);

  nlohmann::json header;
  header["model"] = model_config_json(model_config);
  header["train"] = train_config_json(train_config);
  header["init_seed"] = init_seed;
  header["epoch"] = epoch;
  header["steps"] = steps;
  header["epochs_since_improvement"] = epochs_since_improvement;
  header["best_f1"] = best_f1;
  header["best_bleu"] = best_bleu;
  header["best_val_loss"] = best_val_loss;
  header["rng_state"] = rng_state;
  header["src_vocab"] = src_vocab.id_to_token;
  header["tgt_vocab"] = tgt_vocab.id_to_token;
  header["has_optimizer"] = has_optimizer;
  const std::string header_text = header.dump();

  out.write("SMCK", 4);
  write_u32(out, 1);  // version
  write_u32(out, static_cast<uint32_t>(header_text.size()));
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));

  write_u32(out, static_cast<uint32_t>(param_names.size()));
  for (size_t i = 0; i < param_names.size(); ++i) {
    write_u32(out, static_cast<uint32_t>(param_names[i].size()));
    out.write(param_names[i].data(),
              static_cast<std::streamsize>(param_names[i].size()));
    write_u32(out, static_cast<uint32_t>(param_shapes[i].size()));
    for (int64_t dim : param_shapes[i]) write_i64(out, dim);
    write_i64(out, static_cast<int64_t>(param_values[i].size()));
    write_f64s(out, param_values[i]);
  }
  out.put(has_optimizer ? 1 : 0);
  if (has_optimizer) {
    write_i64(out, optimizer.step);
    for (size_t i = 0; i < param_names.size(); ++i) {
      write_f64s(out, optimizer.m[i]);
      write_f64s(out, optimizer.v[i]);
    }
  }
  if (!out) throw DataError("failed while writing checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SMCK", 4) != 0) {
    throw DataError("not a checkpoint file: " + path);
  }
  const uint32_t version = read_u32(in, path);
  if (version != 1) {
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version) + ": " + path);
  }
  const uint32_t header_len = read_u32(in, path);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw DataError("truncated checkpoint: " + path);

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(header_text);
    ck.model_config = model_config_from_json(header.at("model"));
    ck.train_config = train_config_from_json(header.at("train"));
    ck.init_seed = header.at("init_seed").get<uint64_t>();
    ck.epoch = header.at("epoch").get<int>();
    ck.steps = header.at("steps").get<int64_t>();
    ck.epochs_since_improvement =
        header.at("epochs_since_improvement").get<int>();
    ck.best_f1 = header.at("best_f1").get<double>();
    ck.best_bleu = header.at("best_bleu").get<double>();
    ck.best_val_loss = header.at("best_val_loss").get<double>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.src_vocab = Vocabulary::from_tokens(
        header.at("src_vocab").get<std::vector<std::string>>());
    ck.tgt_vocab = Vocabulary::from_tokens(
        header.at("tgt_vocab").get<std::vector<std::string>>());
    ck.has_optimizer = header.at("has_optimizer").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint header in " + path + ": " + e.what());
  }

  const uint32_t count = read_u32(in, path);
  ck.param_names.resize(count);
  ck.param_shapes.resize(count);
  ck.param_values.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_u32(in, path);
    ck.param_names[i].resize(name_len);
    in.read(ck.param_names[i].data(), name_len);
    const uint32_t rank = read_u32(in, path);
    ck.param_shapes[i].resize(rank);
    for (uint32_t d = 0; d < rank; ++d) {
      ck.param_shapes[i][d] = read_i64(in, path);
    }
    const int64_t numel = read_i64(in, path);
    if (numel < 0 || numel != shape_numel(ck.param_shapes[i])) {
      throw DataError("corrupt parameter payload in checkpoint: " + path);
    }
    read_f64s(in, ck.param_values[i], static_cast<size_t>(numel), path);
  }
  const int opt_flag = in.get();
  if (opt_flag == EOF) throw DataError("truncated checkpoint: " + path);
  if ((opt_flag != 0) != ck.has_optimizer) {
    throw DataError("checkpoint optimizer flag disagrees with header: " + path);
  }
  if (ck.has_optimizer) {
    ck.optimizer.step = read_i64(in, path);
    ck.optimizer.m.resize(count);
    ck.optimizer.v.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
      read_f64s(in, ck.optimizer.m[i], ck.param_values[i].size(), path);
      read_f64s(in, ck.optimizer.v[i], ck.param_values[i].size(), path);
    }
  }
  return ck;
}

Checkpoint Checkpoint::capture(const TranslationModel& model,
                               const TrainConfig& cfg, uint64_t init_seed,
                               const Vocabulary& src_vocab,
                               const Vocabulary& tgt_vocab) {
  Checkpoint ck;
  ck.model_config = model.config();
  ck.train_config = cfg;
  ck.init_seed = init_seed;
  ck.src_vocab = src_vocab;
  ck.tgt_vocab = tgt_vocab;
  ck.param_names = model.param_names();
  const auto& params = model.params();
  ck.param_shapes.reserve(params.size());
  ck.param_values.reserve(params.size());
  for (const auto& p : params) {
    ck.param_shapes.push_back(p.shape());
    ck.param_values.push_back(p.data());
  }
  ck.rng_state = Rng(cfg.seed).state();
  return ck;
}

TranslationModel Checkpoint::restore_model() const {
  TranslationModel model(model_config, init_seed);
  restore_into(model);
  return model;
}

void Checkpoint::restore_into(TranslationModel& model) const {
  if (model.param_names() != param_names) {
    throw DataError(
        "checkpoint parameters do not match the model architecture");
  }
  auto& params = model.params();
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != param_shapes[i]) {
      throw DataError("checkpoint parameter " + param_names[i] +
                      " has shape " + shape_str(param_shapes[i]) +
                      ", model expects " + shape_str(params[i].shape()));
    }
    params[i].data() = param_values[i];
  }
}

std::string EpochLog::to_json_line() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["steps"] = steps;
  j["train_loss"] = train_loss;
  j["train_mt_loss"] = train_mt_loss;
  j["train_align_loss"] = train_align_loss;
  j["val_f1"] = val_f1;
  j["val_bleu"] = val_bleu;
  j["val_mt_loss"] = val_mt_loss;
  j["val_align_loss"] = val_align_loss;
  j["val_total_loss"] = val_total_loss;
  j["lr"] = lr;
  j["grad_norm_mean"] = grad_norm_mean;
  j["grad_norm_max"] = grad_norm_max;
  j["improved"] = improved;
  return j.dump();
}

namespace {

struct BatchLosses {
  Tensor total, mt, align;
  bool has_align = false;
};

BatchLosses batch_forward_loss(const TranslationModel& model,
                               const TrainConfig& cfg,
                               const PaddedBatch& batch, Rng* dropout_rng) {
  const Mask self_mask = batch_encoder_self_mask(
      batch.src_len, batch.src_lens, cfg.unidirectional_encoder);
  const Mask cross_mask =
      cfg.regime == TrainRegime::WaitK
          ? batch_waitk_cross_mask(cfg.wait_k, batch.tgt_len, batch.src_len,
                                   batch.src_lens)
          : batch_cross_mask(batch.tgt_len, batch.src_len, batch.src_lens);

  EncodedSource enc;
  if (model.multimodal()) {
    if (batch.features.numel() == 0) {
      throw ConfigError("multimodal model requires region features");
    }
    const Mask region_mask = batch_region_mask(batch.src_len, batch.regions,
                                               batch.region_counts);
    enc = model.encode_batch_regions(batch.src, batch.batch, batch.src_len,
                                     self_mask, batch.features, &region_mask,
                                     dropout_rng);
  } else {
    enc = model.encode_batch(batch.src, batch.batch, batch.src_len, self_mask,
                             dropout_rng);
  }
  const Tensor logits = model.decode_batch(batch.tgt_in, batch.batch,
                                           batch.tgt_len, enc.states,
                                           cross_mask, dropout_rng);
  BatchLosses out;
  out.mt = cross_entropy_label_smoothed(logits, batch.tgt_out,
                                        cfg.label_smoothing, Vocabulary::kPad);
  if (enc.has_cmi()) {
    std::vector<const AlignmentMatrix*> alignments;
    alignments.reserve(batch.alignments.size());
    for (const auto& a : batch.alignments) {
      alignments.push_back(a.has_value() ? &*a : nullptr);
    }
    out.align = alignment_loss(enc.cmi_attention, alignments);
    out.has_align = true;
    out.total = multitask_loss(out.mt, out.align, cfg.supervision.alpha,
                               cfg.supervision.beta);
  } else {
    out.align = Tensor::scalar(0.0);
    out.total = scale(out.mt, cfg.supervision.alpha);
  }
  return out;
}

std::vector<int> strip_specials(const std::vector<int>& ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos ||
        id == Vocabulary::kEos) {
      continue;
    }
    out.push_back(id);
  }
  return out;
}

void check_dataset(const TranslationModel& model, const Dataset& data,
                   const char* which) {
  if (data.examples.empty()) {
    throw DataError(std::string(which) + " dataset is empty");
  }
  if (model.multimodal() != data.multimodal()) {
    throw ConfigError(std::string(which) + " dataset is " +
                      (data.multimodal() ? "multimodal" : "text-only") +
                      " but the model is " +
                      (model.multimodal() ? "multimodal" : "text-only"));
  }
}

double current_lr(const TrainConfig& cfg, const ModelConfig& mcfg,
                  int64_t next_step) {
  if (cfg.constant_lr) return cfg.constant_lr_value;
  return noam_lr(next_step, cfg.warmup_steps, mcfg.model_dim, cfg.lr_scale);
}

}  // namespace

ValScores validate_model(const TranslationModel& model, const TrainConfig& cfg,
                         const Dataset& val_data,
                         std::vector<std::vector<int>>* decoded) {
  check_dataset(model, val_data, "validation");
  ValScores scores;

  // Losses over fixed-order batches, no dropout, no tape.
  const auto batches = make_batches(static_cast<int>(val_data.size()),
                                    cfg.batch_size, false, 0, 0);
  double weight = 0.0;
  for (const auto& idx : batches) {
    std::vector<MultimodalExample> items;
    items.reserve(idx.size());
    for (int i : idx) items.push_back(val_data.examples[static_cast<size_t>(i)]);
    const auto padded = make_padded_batch(items, val_data.features.get());
    const auto losses = batch_forward_loss(model, cfg, padded, nullptr);
    const double w = static_cast<double>(idx.size());
    scores.mt_loss += losses.mt.item() * w;
    scores.align_loss += losses.align.item() * w;
    scores.total_loss += losses.total.item() * w;
    weight += w;
  }
  scores.mt_loss /= weight;
  scores.align_loss /= weight;
  scores.total_loss /= weight;

  // Greedy decode under the regime's policy.
  std::vector<std::vector<int>> hyps, refs;
  hyps.reserve(val_data.size());
  for (const auto& ex : val_data.examples) {
    Tensor features;
    const Tensor* features_ptr = nullptr;
    if (model.multimodal()) {
      features = val_data.features->image_tensor(ex.image_id);
      features_ptr = &features;
    }
    std::vector<int> emitted;
    if (cfg.regime == TrainRegime::WaitK) {
      DecodeOptions opts;
      opts.k = cfg.wait_k;
      opts.unidirectional = cfg.unidirectional_encoder;
      emitted = greedy_waitk_decode(model, ex.src, features_ptr, opts).emitted;
    } else {
      emitted = consecutive_decode(model, ex.src, features_ptr, -1,
                                   cfg.unidirectional_encoder);
    }
    hyps.push_back(strip_specials(emitted));
    refs.push_back(strip_specials(ex.tgt));
  }
  scores.f1 = token_f1(hyps, refs);
  scores.bleu = bleu(hyps, refs);
  if (decoded) *decoded = std::move(hyps);
  return scores;
}

TrainResult train(TranslationModel& model, const TrainConfig& cfg,
                  const Dataset& train_data, const Dataset& val_data,
                  const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                  const Checkpoint* resume) {
  cfg.validate();
  check_dataset(model, train_data, "train");
  check_dataset(model, val_data, "validation");
  if (cfg.supervision.beta != 0.0) {
    if (!model.multimodal()) {
      throw ConfigError("alignment supervision requires a multimodal model");
    }
    const bool any = std::any_of(
        train_data.examples.begin(), train_data.examples.end(),
        [](const MultimodalExample& ex) { return ex.alignment.has_value(); });
    if (!any) {
      throw ConfigError(
          "alignment supervision requires annotated training examples");
    }
  }

  OptimizerState state = OptimizerState::init(model.params());
  int start_epoch = 1;
  TrainResult result;
  result.best = Checkpoint::capture(model, cfg, model.init_seed(), src_vocab,
                                    tgt_vocab);
  int since_improvement = 0;
  if (resume) {
    if (!resume->has_optimizer) {
      throw ConfigError("resume checkpoint lacks optimizer state");
    }
    resume->restore_into(model);
    state = resume->optimizer;
    start_epoch = resume->epoch + 1;
    since_improvement = resume->epochs_since_improvement;
    result.best = *resume;
    result.best_epoch = resume->epoch;
  }

  for (int epoch = start_epoch; epoch <= cfg.max_epochs; ++epoch) {
    Rng dropout_rng = Rng(cfg.seed).child("dropout-" + std::to_string(epoch));
    Rng trunc_rng = Rng(cfg.seed).child("trunc-" + std::to_string(epoch));
    const auto batches = make_batches(static_cast<int>(train_data.size()),
                                      cfg.batch_size, true, cfg.seed, epoch);

    double loss_sum = 0.0, mt_sum = 0.0, align_sum = 0.0, weight = 0.0;
    double norm_sum = 0.0, norm_max = 0.0;
    double last_lr = 0.0;
    int steps_this_epoch = 0;
    bool diverged = false;

    for (const auto& idx : batches) {
      std::vector<MultimodalExample> items;
      items.reserve(idx.size());
      for (int i : idx) {
        items.push_back(train_data.examples[static_cast<size_t>(i)]);
      }
      if (cfg.regime == TrainRegime::Prefix) {
        for (auto& item : items) {
          // A truncated pair no longer matches its alignment columns.
          if (prefix_truncate_pair(item.src, item.tgt, cfg.prefix_p,
                                   trunc_rng)) {
            item.alignment.reset();
          }
        }
      }
      const auto padded = make_padded_batch(items, train_data.features.get());

      Tape tape;
      TapeScope scope(tape);
      const auto losses = batch_forward_loss(
          model, cfg, padded, model.config().dropout > 0 ? &dropout_rng
                                                         : nullptr);
      const double loss_val = losses.total.item();
      if (!std::isfinite(loss_val)) {
        diverged = true;
        break;
      }
      const double w = static_cast<double>(idx.size());
      loss_sum += loss_val * w;
      mt_sum += losses.mt.item() * w;
      align_sum += losses.align.item() * w;
      weight += w;

      tape.backward(losses.total);
      const double norm = clip_gradients(model.params(), cfg.clip_norm);
      norm_sum += norm;
      norm_max = std::max(norm_max, norm);
      last_lr = current_lr(cfg, model.config(), state.step + 1);
      adam_step(model.params(), state, last_lr, cfg);
      model.zero_grads();
      ++steps_this_epoch;
    }

    if (!diverged) {
      for (const auto& p : model.params()) {
        if (!p.all_finite()) {
          diverged = true;
          break;
        }
      }
    }
    if (diverged) {
      result.diverged = true;
      break;
    }

    const ValScores val = validate_model(model, cfg, val_data);
    const bool improved = val.f1 > result.best.best_f1 ||
                          (val.f1 == result.best.best_f1 &&
                           val.bleu > result.best.best_bleu);
    const bool tie_break = !improved && val.f1 == result.best.best_f1 &&
                           val.bleu == result.best.best_bleu &&
                           val.total_loss < result.best.best_val_loss;
    if (improved) {
      since_improvement = 0;
    } else {
      ++since_improvement;
    }
    if (improved || tie_break) {
      result.best = Checkpoint::capture(model, cfg, model.init_seed(),
                                        src_vocab, tgt_vocab);
      result.best.has_optimizer = true;
      result.best.optimizer = state;
      result.best.epoch = epoch;
      result.best.steps = state.step;
      result.best.best_f1 = val.f1;
      result.best.best_bleu = val.bleu;
      result.best.best_val_loss = val.total_loss;
      result.best.epochs_since_improvement = since_improvement;
      result.best_epoch = epoch;
    }

    EpochLog log;
    log.epoch = epoch;
    log.steps = state.step;
    log.train_loss = loss_sum / weight;
    log.train_mt_loss = mt_sum / weight;
    log.train_align_loss = align_sum / weight;
    log.val_f1 = val.f1;
    log.val_bleu = val.bleu;
    log.val_mt_loss = val.mt_loss;
    log.val_align_loss = val.align_loss;
    log.val_total_loss = val.total_loss;
    log.lr = last_lr;
    log.grad_norm_mean = steps_this_epoch > 0 ? norm_sum / steps_this_epoch
                                              : 0.0;
    log.grad_norm_max = norm_max;
    log.improved = improved;
    result.history.push_back(log);

    if (since_improvement > cfg.patience) break;
  }
  return result;
}

TrainResult finetune_supervised(const Checkpoint& base, int max_epochs,
                                const Dataset& train_data,
                                const Dataset& val_data) {
  if (max_epochs < 1) throw ConfigError("finetune needs max_epochs >= 1");
  const bool any = std::any_of(
      train_data.examples.begin(), train_data.examples.end(),
      [](const MultimodalExample& ex) { return ex.alignment.has_value(); });
  if (!any) {
    throw ConfigError("fine-tuning requires annotated training examples");
  }
  TranslationModel model = base.restore_model();
  if (!model.multimodal()) {
    throw ConfigError("fine-tuning requires a multimodal checkpoint");
  }

  TrainConfig cfg = base.train_config;
  cfg.constant_lr = true;
  cfg.constant_lr_value = 1e-5;
  cfg.supervision.alpha = 1.0;
  cfg.supervision.beta = 1.0;
  cfg.max_epochs = max_epochs;
  cfg.patience = max_epochs;  // fixed budget, early stopping off
  return train(model, cfg, train_data, val_data, base.src_vocab,
               base.tgt_vocab);
}

}  // namespace simmt
