#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "simmt/multimodal.hpp"
#include "simmt/simultaneous.hpp"
#include "simmt/transformer.hpp"

using namespace simmt;

namespace {

ModelConfig tiny_config(int region_dim = 0) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 8;
  cfg.ff_dim = 16;
  cfg.num_heads = 2;
  cfg.src_vocab = 11;
  cfg.tgt_vocab = 13;
  cfg.region_dim = region_dim;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("positional encoding matches the sinusoid definition") {
  Tensor pe = positional_encoding(4, 6);
  CHECK(pe.shape() == Shape{4, 6});
  // Position 0: sin(0) = 0 on even columns, cos(0) = 1 on odd columns.
  for (int i = 0; i < 6; i += 2) CHECK(pe.at({0, i}) == 0.0);
  for (int i = 1; i < 6; i += 2) CHECK(pe.at({0, i}) == 1.0);
  CHECK(pe.at({1, 0}) == doctest::Approx(0.8414709848078965).epsilon(1e-15));
  CHECK(pe.at({1, 1}) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  const double angle = 2.0 * std::exp(-std::log(10000.0) * 2.0 / 6.0);
  CHECK(pe.at({2, 2}) == doctest::Approx(std::sin(angle)).epsilon(1e-12));
  CHECK_THROWS_AS(positional_encoding(0, 4), DimensionError);
}

TEST_CASE("scaled dot attention reproduces the frozen two-key example") {
  Tensor q({1, 2}, {1.0, 0.0});
  Tensor k({2, 2}, {10.0, 0.0, 0.0, 10.0});
  Tensor v({2, 2}, {1.0, 2.0, 3.0, 4.0});
  AttentionResult r = scaled_dot_attention(q, k, v);
  const double w0 = 0.9991513950372888;
  CHECK(r.weights.at({0, 0}) == doctest::Approx(w0).epsilon(1e-12));
  CHECK(r.weights.at({0, 1}) == doctest::Approx(1.0 - w0).epsilon(1e-9));
  CHECK(r.output.at({0, 0}) ==
        doctest::Approx(w0 * 1.0 + (1.0 - w0) * 3.0).epsilon(1e-12));
  CHECK(r.output.at({0, 1}) ==
        doctest::Approx(w0 * 2.0 + (1.0 - w0) * 4.0).epsilon(1e-12));

  CHECK_THROWS_AS(scaled_dot_attention(q, Tensor({2, 3}, 0.0), v),
                  DimensionError);
  CHECK_THROWS_AS(scaled_dot_attention(q, k, Tensor({3, 2}, 0.0)),
                  DimensionError);
}

TEST_CASE("scaled dot attention respects masks") {
  Tensor q({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor k({3, 2}, {1.0, 0.0, 0.0, 1.0, 1.0, 1.0});
  Tensor v({3, 2}, {1.0, 0.0, 0.0, 1.0, 5.0, 5.0});
  Mask m({2, 3}, true);
  m.set(0, 2, false);
  m.set(1, 2, false);
  AttentionResult r = scaled_dot_attention(q, k, v, &m);
  CHECK(r.weights.at({0, 2}) == 0.0);
  CHECK(r.weights.at({1, 2}) == 0.0);
  CHECK(r.weights.at({0, 0}) + r.weights.at({0, 1}) ==
        doctest::Approx(1.0).epsilon(1e-12));
  // Row sums of the value mix never see v[2].
  CHECK(r.output.at({0, 0}) <= 1.0);
}

TEST_CASE("multi-head attention shapes, weights, and errors") {
  Rng rng(5);
  const int d = 8, heads = 2, hd = 4;
  MultiHeadAttentionParams p;
  for (int h = 0; h < heads; ++h) {
    p.w_q.push_back(Tensor::xavier_uniform(d, hd, rng));
    p.w_k.push_back(Tensor::xavier_uniform(d, hd, rng));
    p.w_v.push_back(Tensor::xavier_uniform(d, hd, rng));
  }
  p.w_o = Tensor::xavier_uniform(d, d, rng);

  Tensor x = Tensor::uniform({3, d}, -1.0, 1.0, rng);
  MultiHeadResult r = multi_head_attention(x, x, x, nullptr, p);
  CHECK(r.output.shape() == Shape{3, d});
  CHECK(r.head_weights.size() == 2);
  for (const auto& w : r.head_weights) {
    CHECK(w.shape() == Shape{3, 3});
    for (int i = 0; i < 3; ++i) {
      double s = 0;
      for (int j = 0; j < 3; ++j) s += w.at({i, j});
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  // Batched input broadcasts through every projection.
  Tensor xb = Tensor::uniform({2, 3, d}, -1.0, 1.0, rng);
  MultiHeadResult rb = multi_head_attention(xb, xb, xb, nullptr, p);
  CHECK(rb.output.shape() == Shape{2, 3, d});
  CHECK(rb.head_weights[0].shape() == Shape{2, 3, 3});

  MultiHeadAttentionParams broken = p;
  broken.w_k.pop_back();
  CHECK_THROWS_AS(multi_head_attention(x, x, x, nullptr, broken),
                  DimensionError);
}

TEST_CASE("model config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  ModelConfig bad = cfg;
  bad.model_dim = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.src_vocab = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.num_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("model construction is deterministic and names are unique") {
  TranslationModel a(tiny_config(), 99);
  TranslationModel b(tiny_config(), 99);
  TranslationModel c(tiny_config(), 100);
  CHECK(a.param_count() == b.param_count());
  CHECK(a.param_count() > 1000);

  std::set<std::string> names(a.param_names().begin(), a.param_names().end());
  CHECK(names.size() == a.param_names().size());

  bool all_equal = true, any_diff_seed = false;
  for (size_t i = 0; i < a.params().size(); ++i) {
    if (a.params()[i].data() != b.params()[i].data()) all_equal = false;
    if (a.params()[i].data() != c.params()[i].data()) any_diff_seed = true;
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);

  CHECK(a.param("enc.layer0.attn.head0.w_q").shape() == Shape{8, 4});
  CHECK(a.param("dec.final_ln.gain").shape() == Shape{8});
}

TEST_CASE("unknown parameter lookups throw") {
  TranslationModel m(tiny_config(), 1);
  CHECK_THROWS_AS(m.param("nope"), ConfigError);
  CHECK_THROWS_AS(m.param("cmi.proj_w"), ConfigError);  // text-only model
}

TEST_CASE("encoder and decoder produce finite, well-shaped outputs") {
  TranslationModel m(tiny_config(), 7);
  const std::vector<int> src{4, 5, 6, 2};
  EncodedSource enc = m.encode(src, unidirectional_encoder_mask(4));
  CHECK(enc.states.shape() == Shape{4, 8});
  CHECK(enc.states.all_finite());
  CHECK_FALSE(enc.has_cmi());

  const std::vector<int> tgt{1, 7, 8};
  Tensor logits = m.decoder_forward(tgt, enc, Mask::full(3, 4));
  CHECK(logits.shape() == Shape{3, 13});
  CHECK(logits.all_finite());

  CHECK_THROWS_AS(m.encode_batch({4, 5}, 1, 3, Mask::full(3, 3)),
                  DimensionError);
  CHECK_THROWS_AS(m.decoder_forward(tgt, enc, Mask::full(2, 4)),
                  DimensionError);
}

TEST_CASE("unidirectional encoding is prefix stable") {
  TranslationModel m(tiny_config(), 11);
  const std::vector<int> full{4, 5, 6, 7, 2};
  const std::vector<int> prefix{4, 5, 6};
  EncodedSource ef = m.encode(full, unidirectional_encoder_mask(5));
  EncodedSource ep = m.encode(prefix, unidirectional_encoder_mask(3));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(ep.states.at({i, j}) ==
            doctest::Approx(ef.states.at({i, j})).epsilon(1e-12));
    }
  }
  // A bidirectional mask breaks prefix stability.
  EncodedSource bf = m.encode(full, Mask::full(5, 5));
  EncodedSource bp = m.encode(prefix, Mask::full(3, 3));
  double diff = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 8; ++j) {
      diff += std::abs(bp.states.at({i, j}) - bf.states.at({i, j}));
    }
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("batched encoding agrees with single-sentence encoding") {
  TranslationModel m(tiny_config(), 13);
  const std::vector<int> s1{4, 5, 6, 2};
  const std::vector<int> s2{7, 8, 2};
  // Pad the second sentence to length 4; pad columns must not leak.
  std::vector<int> ids{4, 5, 6, 2, 7, 8, 2, 0};
  Mask batched({2, 4, 4}, false);
  const int lens[2] = {4, 3};
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j <= i && j < 4; ++j) {
        if (j < lens[b]) {
          batched.allowed[static_cast<size_t>(b * 16 + i * 4 + j)] = 1;
        }
      }
      if (i >= lens[b]) {
        batched.allowed[static_cast<size_t>(b * 16 + i * 4)] = 1;
      }
    }
  }
  EncodedSource eb = m.encode_batch(ids, 2, 4, batched);
  EncodedSource e1 = m.encode(s1, unidirectional_encoder_mask(4));
  EncodedSource e2 = m.encode(s2, unidirectional_encoder_mask(3));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(eb.states.at({0, i, j}) == e1.states.at({i, j}));
    }
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(eb.states.at({1, i, j}) == e2.states.at({i, j}));
    }
  }
}

TEST_CASE("multimodal encoding attends over regions") {
  TranslationModel m(tiny_config(6), 21);
  CHECK(m.multimodal());
  Rng rng(3);
  Tensor feats = Tensor::uniform({5, 6}, -1.0, 1.0, rng);
  const std::vector<int> src{4, 5, 2};
  EncodedSource enc =
      m.encode_regions(src, unidirectional_encoder_mask(3), feats);
  CHECK(enc.states.shape() == Shape{3, 8});
  CHECK(enc.has_cmi());
  CHECK(enc.cmi_attention.shape() == Shape{3, 5});
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int r = 0; r < 5; ++r) s += enc.cmi_attention.at({i, r});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Dimension and pathway misuse.
  CHECK_THROWS_AS(
      m.encode_regions(src, unidirectional_encoder_mask(3),
                       Tensor({5, 4}, 0.0)),
      DimensionError);
  TranslationModel text(tiny_config(), 21);
  CHECK_THROWS_AS(text.encode_regions(src, unidirectional_encoder_mask(3),
                                      feats),
                  ConfigError);
}

TEST_CASE("project_regions validates the feature dimension") {
  Rng rng(4);
  Tensor w = Tensor::xavier_uniform(6, 8, rng);
  Tensor b({8}, 0.0);
  Tensor feats = Tensor::uniform({4, 6}, -1.0, 1.0, rng);
  Tensor out = project_regions(feats, w, b);
  CHECK(out.shape() == Shape{4, 8});
  CHECK_THROWS_AS(project_regions(Tensor({4, 5}, 0.0), w, b), DimensionError);
}

TEST_CASE("cross_modal_interaction merges text and regions") {
  Rng rng(6);
  const int d = 8;
  CmiParams cmi;
  cmi.proj_w = Tensor::xavier_uniform(6, d, rng);
  cmi.proj_b = Tensor({d}, 0.0);
  cmi.attn.w_q.push_back(Tensor::xavier_uniform(d, d, rng));
  cmi.attn.w_k.push_back(Tensor::xavier_uniform(d, d, rng));
  cmi.attn.w_v.push_back(Tensor::xavier_uniform(d, d, rng));
  cmi.attn.w_o = Tensor::xavier_uniform(d, d, rng);
  cmi.ln.gain = Tensor({d}, 1.0);
  cmi.ln.bias = Tensor({d}, 0.0);

  Tensor h = Tensor::uniform({3, d}, -1.0, 1.0, rng);
  Tensor feats = Tensor::uniform({4, 6}, -1.0, 1.0, rng);
  Tensor projected = project_regions(feats, cmi.proj_w, cmi.proj_b);
  CmiResult r = cross_modal_interaction(h, projected, nullptr, cmi);
  CHECK(r.states.shape() == Shape{3, d});
  CHECK(r.attention.shape() == Shape{3, 4});
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += r.attention.at({i, j});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Rows are layer-normed: zero mean under unit gain and zero bias.
  for (int i = 0; i < 3; ++i) {
    double mean = 0;
    for (int j = 0; j < d; ++j) mean += r.states.at({i, j});
    CHECK(mean / d == doctest::Approx(0.0).epsilon(1e-9).scale(1.0));
  }
}

TEST_CASE("alignment matrix construction and invariants") {
  std::vector<AlignmentEntry> entries;
  entries.push_back({{1}, {0, 2}});
  entries.push_back({{3, 4}, {1}});
  AlignmentMatrix m = build_alignment_matrix(entries, 5, 3);
  CHECK(m.regions == 3);
  CHECK(m.words == 5);
  CHECK(m.at(0, 1) == doctest::Approx(0.5));
  CHECK(m.at(2, 1) == doctest::Approx(0.5));
  CHECK(m.at(1, 1) == 0.0);
  CHECK(m.at(1, 3) == doctest::Approx(1.0));
  CHECK(m.at(1, 4) == doctest::Approx(1.0));
  CHECK(m.annotated == std::vector<uint8_t>{0, 1, 0, 1, 1});
  // Annotated columns sum to one.
  for (int j : {1, 3, 4}) {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += m.at(i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(build_alignment_matrix({{{0}, {}}}, 5, 3), DataError);
  CHECK_THROWS_AS(build_alignment_matrix({{{5}, {0}}}, 5, 3), DataError);
  CHECK_THROWS_AS(build_alignment_matrix({{{0}, {3}}}, 5, 3), DataError);
  CHECK_THROWS_AS(build_alignment_matrix({{{1}, {0}}, {{1}, {2}}}, 5, 3),
                  DataError);
}

TEST_CASE("alignment loss equals hand-computed KL means") {
  // Uniform attention over two regions against a point alignment: ln 2.
  Tensor attn({2, 2}, {0.5, 0.5, 0.5, 0.5});
  AlignmentMatrix m = build_alignment_matrix({{{0}, {0}}}, 2, 2);
  Tensor loss = alignment_loss(attn, {&m});
  CHECK(loss.item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  // Uniform attention over four regions: exactly ln 4 per column.
  Tensor attn4({1, 3, 4}, 0.25);
  AlignmentMatrix m4 = build_alignment_matrix({{{0}, {2}}, {{2}, {1}}}, 3, 4);
  Tensor loss4 = alignment_loss(attn4, {&m4});
  CHECK(loss4.item() == doctest::Approx(1.3862943611198906).epsilon(1e-12));

  // Perfectly matching attention drives the loss to zero.
  Tensor sharp({2, 2}, {1.0, 0.0, 0.25, 0.75});
  AlignmentMatrix point = build_alignment_matrix({{{0}, {0}}}, 2, 2);
  CHECK(alignment_loss(sharp, {&point}).item() == 0.0);

  // Batch semantics: mean over annotated sentences only.
  Tensor batch({3, 2, 2}, 0.5);
  AlignmentMatrix a = build_alignment_matrix({{{0}, {0}}}, 2, 2);
  AlignmentMatrix b = build_alignment_matrix({{{0}, {0}}, {{1}, {1}}}, 2, 2);
  Tensor lb = alignment_loss(batch, {&a, nullptr, &b});
  CHECK(lb.item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  Tensor none = alignment_loss(batch, {nullptr, nullptr, nullptr});
  CHECK(none.item() == 0.0);

  CHECK_THROWS_AS(alignment_loss(attn, {&m, &m}), DimensionError);
}

TEST_CASE("alignment loss gradient flows to attention only") {
  AlignmentMatrix m = build_alignment_matrix({{{0}, {0, 1}}}, 2, 3);
  auto f = [&](const Tensor& t) { return alignment_loss(t, {&m}); };
  Tensor attn({2, 3}, {0.5, 0.3, 0.2, 0.1, 0.1, 0.8});
  CHECK(grad_check(f, attn, 1e-6) < 1e-4);

  // Closed form on the annotated column: -p_i / q_i scaled by column mean.
  Tensor a2 = attn.clone();
  a2.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(alignment_loss(a2, {&m}));
  }
  CHECK(a2.grad()[0] == doctest::Approx(-0.5 / 0.5).epsilon(1e-12));
  CHECK(a2.grad()[1] == doctest::Approx(-0.5 / 0.3).epsilon(1e-12));
  CHECK(a2.grad()[2] == 0.0);
  CHECK(a2.grad()[3] == 0.0);
}

TEST_CASE("multitask loss is the weighted sum with flowing gradients") {
  Tensor mt = Tensor::scalar(2.0);
  Tensor al = Tensor::scalar(0.5);
  CHECK(multitask_loss(mt, al, 1.0, 1.0).item() == doctest::Approx(2.5));
  CHECK(multitask_loss(mt, al, 0.5, 2.0).item() == doctest::Approx(2.0));
  CHECK(multitask_loss(mt, al, 1.0, 0.0).item() == doctest::Approx(2.0));
  CHECK_THROWS_AS(multitask_loss(Tensor({2}, 0.0), al, 1.0, 1.0),
                  DimensionError);
}
