#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "simmt/data.hpp"
#include "simmt/error.hpp"
#include "simmt/multimodal.hpp"
#include "simmt/simultaneous.hpp"
#include "simmt/training.hpp"
#include "simmt/transformer.hpp"

using namespace simmt;

namespace {

// Copy task over a small vocabulary: the model must echo the source.
struct ToyTask {
  Vocabulary vocab;
  Dataset train, val;
};

ToyTask make_toy_task(int pairs, int max_len, uint64_t seed) {
  ToyTask task;
  std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int i = 0; i < 8; ++i) tokens.push_back("w" + std::to_string(i));
  task.vocab = Vocabulary::from_tokens(tokens);

  Rng rng(seed);
  for (int i = 0; i < pairs; ++i) {
    const int len = static_cast<int>(rng.uniform_int(1, max_len));
    MultimodalExample ex;
    for (int j = 0; j < len; ++j) {
      ex.src.push_back(static_cast<int>(rng.uniform_int(4, 11)));
    }
    ex.tgt.push_back(Vocabulary::kBos);
    ex.tgt.insert(ex.tgt.end(), ex.src.begin(), ex.src.end());
    ex.src.push_back(Vocabulary::kEos);
    ex.tgt.push_back(Vocabulary::kEos);
    task.train.examples.push_back(ex);
  }
  task.val = task.train;  // overfit setting: validate on the training pairs
  return task;
}

ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.model_dim = 32;
  cfg.ff_dim = 64;
  cfg.num_heads = 2;
  cfg.src_vocab = 12;
  cfg.tgt_vocab = 12;
  cfg.dropout = 0.0;
  return cfg;
}

TrainConfig toy_train_config(int epochs) {
  TrainConfig cfg;
  cfg.warmup_steps = 30;
  cfg.lr_scale = 1.0;
  cfg.batch_size = 64;  // larger than the corpus: one step per epoch
  cfg.label_smoothing = 0.1;
  cfg.max_epochs = epochs;
  cfg.patience = epochs;  // no early stop unless the test wants it
  cfg.seed = 5;
  return cfg;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("noam schedule matches frozen values") {
  CHECK(noam_lr(1, 4000, 512, 0.2) ==
        doctest::Approx(3.4938562148434224e-08).epsilon(1e-12));
  CHECK(noam_lr(4000, 4000, 512, 0.2) ==
        doctest::Approx(0.00013975424859373687).epsilon(1e-12));
  CHECK(noam_lr(8000, 4000, 512, 0.2) ==
        doctest::Approx(9.882117688026187e-05).epsilon(1e-12));
  CHECK(noam_lr(100, 50, 64, 1.0) == doctest::Approx(0.0125).epsilon(1e-12));
}

TEST_CASE("noam schedule rises to warmup then decays as inverse sqrt") {
  const double before = noam_lr(3999, 4000, 512, 0.2);
  const double peak = noam_lr(4000, 4000, 512, 0.2);
  const double after = noam_lr(4001, 4000, 512, 0.2);
  CHECK(before < peak);
  CHECK(after < peak);
  // Doubling the step after warmup divides the rate by sqrt(2).
  CHECK(noam_lr(8000, 4000, 512, 0.2) / peak ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  // Linear in step during warmup.
  CHECK(noam_lr(200, 4000, 512, 0.2) ==
        doctest::Approx(2.0 * noam_lr(100, 4000, 512, 0.2)).epsilon(1e-12));
}

TEST_CASE("noam schedule rejects bad arguments") {
  CHECK_THROWS_AS(noam_lr(0, 4000, 512, 0.2), ConfigError);
  CHECK_THROWS_AS(noam_lr(-3, 4000, 512, 0.2), ConfigError);
  CHECK_THROWS_AS(noam_lr(1, 0, 512, 0.2), ConfigError);
  CHECK_THROWS_AS(noam_lr(1, 4000, 0, 0.2), ConfigError);
}

TEST_CASE("gradient clipping scales only above the threshold") {
  std::vector<Tensor> params;
  params.push_back(Tensor({2}, {1.0, 2.0}));
  params.push_back(Tensor({1}, {3.0}));
  params[0].impl()->grad = {0.3, 0.0};
  params[1].impl()->grad = {0.4};

  // Norm 0.5 is under the limit: untouched, returned as-is.
  CHECK(clip_gradients(params, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(params[0].impl()->grad[0] == 0.3);
  CHECK(params[1].impl()->grad[0] == 0.4);

  params[0].impl()->grad = {4.0, 0.0};
  params[1].impl()->grad = {3.0};
  const double norm = clip_gradients(params, 1.0);
  CHECK(norm == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(params[0].impl()->grad[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(params[1].impl()->grad[0] == doctest::Approx(0.6).epsilon(1e-12));
  // Direction preserved, new norm equals the cap.
  double sq = 0.0;
  for (auto& p : params) {
    for (double g : p.impl()->grad) sq += g * g;
  }
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gradient clipping treats missing grads as zero and rejects NaN") {
  std::vector<Tensor> params;
  params.push_back(Tensor({2}, {1.0, 2.0}));  // never touched: grad empty
  params.push_back(Tensor({1}, {3.0}));
  params[1].impl()->grad = {2.0};
  CHECK(clip_gradients(params, 5.0) == doctest::Approx(2.0).epsilon(1e-12));

  params[1].impl()->grad = {std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(clip_gradients(params, 5.0), NumericError);
  params[1].impl()->grad = {std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(clip_gradients(params, 5.0), NumericError);
  params[1].impl()->grad = {1.0};
  CHECK_THROWS_AS(clip_gradients(params, 0.0), ConfigError);
}

TEST_CASE("adam takes signed steps with bias correction") {
  TrainConfig cfg;
  std::vector<Tensor> params;
  params.push_back(Tensor({3}, {1.0, -2.0, 0.5}));
  auto state = OptimizerState::init(params);
  CHECK(state.m.size() == 1);
  CHECK(state.m[0].size() == 3);
  CHECK(state.step == 0);

  // First step: m_hat = g, v_hat = g^2, so the update is about
  // -lr * sign(g) regardless of magnitude.
  params[0].impl()->grad = {0.25, -3.0, 0.0};
  adam_step(params, state, 0.01, cfg);
  CHECK(state.step == 1);
  CHECK(params[0].data()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(params[0].data()[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  CHECK(params[0].data()[2] == 0.5);  // zero grad, zero moments: no motion

  // Untouched grads count as zero.
  params[0].zero_grad();
  params[0].impl()->grad.clear();
  const double before = params[0].data()[2];
  adam_step(params, state, 0.01, cfg);
  CHECK(state.step == 2);
  CHECK(params[0].data()[2] == before);
}

TEST_CASE("adam rejects mismatched optimizer state") {
  TrainConfig cfg;
  std::vector<Tensor> params;
  params.push_back(Tensor({3}, {1.0, 2.0, 3.0}));
  std::vector<Tensor> other;
  other.push_back(Tensor({2}, {1.0, 2.0}));
  auto state = OptimizerState::init(other);
  CHECK_THROWS_AS(adam_step(params, state, 0.01, cfg), DimensionError);
}

TEST_CASE("regime names round-trip") {
  for (auto r : {TrainRegime::Consecutive, TrainRegime::WaitK,
                 TrainRegime::Prefix}) {
    CHECK(regime_from_name(regime_name(r)) == r);
  }
  CHECK_THROWS_AS(regime_from_name("streaming"), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.lr_scale = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.adam_beta2 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.label_smoothing = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.prefix_p = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.wait_k = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.patience = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.supervision.beta = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("batched encoder masks match the single-sentence builders") {
  const int n = 5;
  const std::vector<int> lens = {5, 3, 1};

  const Mask uni = batch_encoder_self_mask(n, lens, true);
  CHECK(uni.shape == Shape{3, n, n});
  const Mask single = unidirectional_encoder_mask(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      // Full-length sentence reproduces the plain causal pattern.
      CHECK(uni.allowed[static_cast<size_t>(i * n + j)] ==
            single.at(i, j));
      for (size_t b = 0; b < lens.size(); ++b) {
        const bool want = j <= i && j < lens[b];
        CHECK(uni.allowed[b * n * n + static_cast<size_t>(i * n + j)] ==
              static_cast<uint8_t>(want));
      }
    }
  }

  const Mask bi = batch_encoder_self_mask(n, lens, false);
  for (size_t b = 0; b < lens.size(); ++b) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        CHECK(bi.allowed[b * n * n + static_cast<size_t>(i * n + j)] ==
              static_cast<uint8_t>(j < lens[b]));
      }
    }
  }

  CHECK_THROWS_AS(batch_encoder_self_mask(n, {}, true), DimensionError);
  CHECK_THROWS_AS(batch_encoder_self_mask(n, {0}, true), DimensionError);
  CHECK_THROWS_AS(batch_encoder_self_mask(n, {6}, true), DimensionError);
}

TEST_CASE("batched cross masks match the wait-k rule") {
  const int tgt = 4, src = 5;
  const std::vector<int> lens = {5, 2};

  const Mask full = batch_cross_mask(tgt, src, lens);
  CHECK(full.shape == Shape{2, tgt, src});
  for (size_t b = 0; b < lens.size(); ++b) {
    for (int t = 0; t < tgt; ++t) {
      for (int j = 0; j < src; ++j) {
        CHECK(full.allowed[b * tgt * src + static_cast<size_t>(t * src + j)] ==
              static_cast<uint8_t>(j < lens[b]));
      }
    }
  }

  for (int k = 1; k <= 3; ++k) {
    const Mask wk = batch_waitk_cross_mask(k, tgt, src, lens);
    for (size_t b = 0; b < lens.size(); ++b) {
      const Mask single = waitk_cross_mask(k, tgt, lens[b]);
      for (int t = 0; t < tgt; ++t) {
        const int visible = g_waitk(k, t + 1, lens[b]);
        for (int j = 0; j < src; ++j) {
          const uint8_t got =
              wk.allowed[b * tgt * src + static_cast<size_t>(t * src + j)];
          CHECK(got == static_cast<uint8_t>(j < visible));
          if (j < lens[b]) CHECK(got == single.at(t, j));
        }
      }
    }
  }
  CHECK_THROWS_AS(batch_waitk_cross_mask(1, tgt, src, {7}), DimensionError);
}

TEST_CASE("batched region masks hide padded regions") {
  const Mask m = batch_region_mask(3, 4, {4, 2});
  CHECK(m.shape == Shape{2, 3, 4});
  for (int i = 0; i < 3; ++i) {
    for (int r = 0; r < 4; ++r) {
      CHECK(m.allowed[static_cast<size_t>(i * 4 + r)] == 1);
      CHECK(m.allowed[12 + static_cast<size_t>(i * 4 + r)] ==
            static_cast<uint8_t>(r < 2));
    }
  }
  CHECK_THROWS_AS(batch_region_mask(3, 4, {5}), DimensionError);
  CHECK_THROWS_AS(batch_region_mask(3, 4, {0}), DimensionError);
}

TEST_CASE("overfit toy: loss falls monotonically over the first 20 steps") {
  auto task = make_toy_task(16, 4, 11);
  TranslationModel model(toy_model_config(), 3);
  auto cfg = toy_train_config(20);
  cfg.warmup_steps = 100;  // keep early steps small enough to stay monotone
  const auto result = train(model, cfg, task.train, task.val, task.vocab,
                            task.vocab);
  REQUIRE(result.history.size() == 20);
  // batch_size exceeds the corpus, so epoch e is exactly step e.
  for (const auto& log : result.history) {
    CHECK(log.steps == log.epoch);
  }
  for (size_t i = 1; i < result.history.size(); ++i) {
    CAPTURE(i);
    CHECK(result.history[i].train_loss < result.history[i - 1].train_loss);
  }
  CHECK_FALSE(result.diverged);
  CHECK(result.history.front().grad_norm_max > 0.0);
}

TEST_CASE("training is bit-identical across reruns") {
  auto task = make_toy_task(8, 3, 21);
  auto cfg = toy_train_config(4);

  TranslationModel m1(toy_model_config(), 3);
  const auto r1 = train(m1, cfg, task.train, task.val, task.vocab, task.vocab);
  TranslationModel m2(toy_model_config(), 3);
  const auto r2 = train(m2, cfg, task.train, task.val, task.vocab, task.vocab);

  REQUIRE(m1.params().size() == m2.params().size());
  for (size_t i = 0; i < m1.params().size(); ++i) {
    CHECK(m1.params()[i].data() == m2.params()[i].data());
  }
  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].to_json_line() == r2.history[i].to_json_line());
  }
  CHECK(r1.best.param_values == r2.best.param_values);
}

TEST_CASE("checkpoint save and load round-trips bit-exactly") {
  auto task = make_toy_task(8, 3, 21);
  auto cfg = toy_train_config(2);
  TranslationModel model(toy_model_config(), 9);
  const auto result = train(model, cfg, task.train, task.val, task.vocab,
                            task.vocab);
  REQUIRE(result.best.has_optimizer);

  const std::string path = temp_path("simmt_ck_roundtrip.bin");
  result.best.save(path);
  const auto loaded = Checkpoint::load(path);
  std::remove(path.c_str());

  CHECK(loaded.param_names == result.best.param_names);
  CHECK(loaded.param_shapes == result.best.param_shapes);
  CHECK(loaded.param_values == result.best.param_values);
  CHECK(loaded.optimizer.step == result.best.optimizer.step);
  CHECK(loaded.optimizer.m == result.best.optimizer.m);
  CHECK(loaded.optimizer.v == result.best.optimizer.v);
  CHECK(loaded.epoch == result.best.epoch);
  CHECK(loaded.steps == result.best.steps);
  CHECK(loaded.epochs_since_improvement ==
        result.best.epochs_since_improvement);
  CHECK(loaded.best_f1 == result.best.best_f1);
  CHECK(loaded.best_bleu == result.best.best_bleu);
  CHECK(loaded.best_val_loss == result.best.best_val_loss);
  CHECK(loaded.init_seed == result.best.init_seed);
  CHECK(loaded.rng_state == result.best.rng_state);
  CHECK(loaded.src_vocab.id_to_token == result.best.src_vocab.id_to_token);
  CHECK(loaded.tgt_vocab.id_to_token == result.best.tgt_vocab.id_to_token);
  CHECK(loaded.model_config.model_dim == result.best.model_config.model_dim);
  CHECK(loaded.train_config.seed == result.best.train_config.seed);
  CHECK(regime_name(loaded.train_config.regime) ==
        regime_name(result.best.train_config.regime));

  // Restoring into the wrong architecture is rejected.
  ModelConfig other = toy_model_config();
  other.model_dim = 16;
  other.ff_dim = 32;
  TranslationModel wrong(other, 1);
  CHECK_THROWS_AS(loaded.restore_into(wrong), DataError);
}

TEST_CASE("checkpoint load rejects corrupt files") {
  const std::string path = temp_path("simmt_ck_corrupt.bin");
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("NOPE", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(Checkpoint::load(path), DataError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(Checkpoint::load(path), DataError);  // missing file
}

TEST_CASE("resumed training matches an uninterrupted run bit-exactly") {
  auto task = make_toy_task(12, 3, 33);
  auto cfg_full = toy_train_config(3);

  TranslationModel straight(toy_model_config(), 7);
  const auto full = train(straight, cfg_full, task.train, task.val, task.vocab,
                          task.vocab);
  REQUIRE(full.history.size() == 3);

  // Stop after the first epoch; epoch 1 always improves on the initial
  // sentinel scores, so `best` is the end-of-epoch-1 state.
  auto cfg_short = cfg_full;
  cfg_short.max_epochs = 1;
  TranslationModel first(toy_model_config(), 7);
  const auto part = train(first, cfg_short, task.train, task.val, task.vocab,
                          task.vocab);
  REQUIRE(part.best.epoch == 1);
  REQUIRE(part.best.has_optimizer);

  const std::string path = temp_path("simmt_ck_resume.bin");
  part.best.save(path);
  const auto loaded = Checkpoint::load(path);
  std::remove(path.c_str());

  TranslationModel resumed(toy_model_config(), 7);
  const auto rest = train(resumed, cfg_full, task.train, task.val, task.vocab,
                          task.vocab, &loaded);

  REQUIRE(straight.params().size() == resumed.params().size());
  for (size_t i = 0; i < straight.params().size(); ++i) {
    CAPTURE(i);
    CHECK(straight.params()[i].data() == resumed.params()[i].data());
  }
  // The continued run logs epochs 2 and 3, matching the straight run.
  REQUIRE(rest.history.size() == 2);
  CHECK(rest.history[0].to_json_line() == full.history[1].to_json_line());
  CHECK(rest.history[1].to_json_line() == full.history[2].to_json_line());
  CHECK(rest.best.param_values == full.best.param_values);
}

TEST_CASE("patience zero stops one epoch after improvement stalls") {
  auto task = make_toy_task(8, 3, 41);
  auto cfg = toy_train_config(60);
  cfg.patience = 0;
  TranslationModel model(toy_model_config(), 3);
  const auto result = train(model, cfg, task.train, task.val, task.vocab,
                            task.vocab);
  REQUIRE(!result.history.empty());
  CHECK(result.history.size() < 60);  // stopped early
  // Exactly the final epoch failed to improve; every prior one improved.
  for (size_t i = 0; i + 1 < result.history.size(); ++i) {
    CHECK(result.history[i].improved);
  }
  CHECK_FALSE(result.history.back().improved);
  // The final epoch may still have claimed `best` through the exact-tie
  // lower-validation-loss rule, which never resets patience.
  CHECK(result.best_epoch >= static_cast<int>(result.history.size()) - 1);
  CHECK(result.best_epoch <= static_cast<int>(result.history.size()));
}

TEST_CASE("non-finite training aborts with the last good checkpoint") {
  auto task = make_toy_task(8, 3, 51);
  auto cfg = toy_train_config(10);
  cfg.constant_lr = true;
  cfg.constant_lr_value = std::numeric_limits<double>::infinity();
  TranslationModel model(toy_model_config(), 3);
  const auto result = train(model, cfg, task.train, task.val, task.vocab,
                            task.vocab);
  CHECK(result.diverged);
  for (const auto& values : result.best.param_values) {
    for (double v : values) CHECK(std::isfinite(v));
  }
  CHECK(result.best.epoch == 0);  // no epoch survived
}

TEST_CASE("training rejects inconsistent supervision settings") {
  auto task = make_toy_task(4, 3, 61);
  auto cfg = toy_train_config(1);
  cfg.supervision.beta = 0.5;
  TranslationModel model(toy_model_config(), 3);
  // Text-only model cannot take alignment supervision.
  CHECK_THROWS_AS(train(model, cfg, task.train, task.val, task.vocab,
                        task.vocab),
                  ConfigError);
}

TEST_CASE("wait-k regime trains and validates with the wait-k policy") {
  auto task = make_toy_task(8, 3, 71);
  auto cfg = toy_train_config(2);
  cfg.regime = TrainRegime::WaitK;
  cfg.wait_k = 2;
  TranslationModel model(toy_model_config(), 3);
  const auto result = train(model, cfg, task.train, task.val, task.vocab,
                            task.vocab);
  CHECK(result.history.size() == 2);
  CHECK(std::isfinite(result.history.back().val_bleu));
}

TEST_CASE("prefix regime trains with on-the-fly truncation") {
  auto task = make_toy_task(8, 4, 81);
  auto cfg = toy_train_config(2);
  cfg.regime = TrainRegime::Prefix;
  cfg.prefix_p = 0.5;
  TranslationModel model(toy_model_config(), 3);
  const auto result = train(model, cfg, task.train, task.val, task.vocab,
                            task.vocab);
  CHECK(result.history.size() == 2);
  CHECK(std::isfinite(result.history.back().train_loss));
}

TEST_CASE("validate_model reports losses and decode metrics") {
  auto task = make_toy_task(6, 3, 91);
  TranslationModel model(toy_model_config(), 3);
  TrainConfig cfg = toy_train_config(1);
  std::vector<std::vector<int>> decoded;
  const auto scores = validate_model(model, cfg, task.val, &decoded);
  CHECK(decoded.size() == task.val.size());
  CHECK(std::isfinite(scores.mt_loss));
  CHECK(scores.mt_loss > 0.0);
  CHECK(scores.align_loss == 0.0);  // text-only model
  CHECK(scores.f1 >= 0.0);
  CHECK(scores.f1 <= 1.0);
  // An untrained model should be far from the references.
  CHECK(scores.bleu < 0.5);
}

TEST_CASE("finetune requires annotations") {
  auto task = make_toy_task(4, 3, 95);
  TranslationModel model(toy_model_config(), 3);
  auto ck = Checkpoint::capture(model, toy_train_config(1), 3, task.vocab,
                                task.vocab);
  CHECK_THROWS_AS(finetune_supervised(ck, 2, task.train, task.val),
                  ConfigError);
}
