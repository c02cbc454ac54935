#include "simmt/simultaneous.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "json.hpp"
#include "simmt/error.hpp"

namespace simmt {

int g_waitk(int k, int t, int src_len) {
  if (k < 1) throw ConfigError("wait-k requires k >= 1, got " + std::to_string(k));
  if (t < 1) throw ConfigError("g_waitk requires t >= 1, got " + std::to_string(t));
  if (src_len < 1) {
    throw ConfigError("g_waitk requires src_len >= 1, got " +
                      std::to_string(src_len));
  }
  return std::min(k + t - 1, src_len);
}

Mask unidirectional_encoder_mask(int n) {
  if (n < 1) throw DimensionError("mask size must be >= 1");
  Mask m({n, n}, false);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

Mask causal_mask(int n) { return unidirectional_encoder_mask(n); }

Mask waitk_cross_mask(int k, int tgt_len, int src_len) {
  if (tgt_len < 1) throw DimensionError("waitk_cross_mask needs tgt_len >= 1");
  Mask m({tgt_len, src_len}, false);
  for (int t = 0; t < tgt_len; ++t) {
    const int visible = g_waitk(k, t + 1, src_len);
    for (int j = 0; j < visible; ++j) m.set(t, j, true);
  }
  return m;
}

namespace {

void check_lens(int limit, const std::vector<int>& lens, const char* what) {
  if (lens.empty()) throw DimensionError("batched mask needs examples");
  for (int len : lens) {
    if (len < 1 || len > limit) {
      throw DimensionError(std::string(what) + " length " +
                           std::to_string(len) + " outside [1, " +
                           std::to_string(limit) + "]");
    }
  }
}

}  // namespace

Mask batch_encoder_self_mask(int n, const std::vector<int>& src_lens,
                             bool unidirectional) {
  check_lens(n, src_lens, "source");
  const auto batch = static_cast<int64_t>(src_lens.size());
  Mask m({batch, n, n}, false);
  for (int64_t b = 0; b < batch; ++b) {
    const int len = src_lens[static_cast<size_t>(b)];
    for (int i = 0; i < n; ++i) {
      const int cols = unidirectional ? std::min(i + 1, len) : len;
      for (int j = 0; j < cols; ++j) {
        m.allowed[static_cast<size_t>((b * n + i) * n + j)] = 1;
      }
    }
  }
  return m;
}

Mask batch_cross_mask(int tgt_len, int src_len,
                      const std::vector<int>& src_lens) {
  check_lens(src_len, src_lens, "source");
  if (tgt_len < 1) throw DimensionError("batch_cross_mask needs tgt_len >= 1");
  const auto batch = static_cast<int64_t>(src_lens.size());
  Mask m({batch, tgt_len, src_len}, false);
  for (int64_t b = 0; b < batch; ++b) {
    const int len = src_lens[static_cast<size_t>(b)];
    for (int t = 0; t < tgt_len; ++t) {
      for (int j = 0; j < len; ++j) {
        m.allowed[static_cast<size_t>((b * tgt_len + t) * src_len + j)] = 1;
      }
    }
  }
  return m;
}

Mask batch_waitk_cross_mask(int k, int tgt_len, int src_len,
                            const std::vector<int>& src_lens) {
  check_lens(src_len, src_lens, "source");
  if (tgt_len < 1) throw DimensionError("batch_cross_mask needs tgt_len >= 1");
  const auto batch = static_cast<int64_t>(src_lens.size());
  Mask m({batch, tgt_len, src_len}, false);
  for (int64_t b = 0; b < batch; ++b) {
    const int len = src_lens[static_cast<size_t>(b)];
    for (int t = 0; t < tgt_len; ++t) {
      const int visible = g_waitk(k, t + 1, len);
      for (int j = 0; j < visible; ++j) {
        m.allowed[static_cast<size_t>((b * tgt_len + t) * src_len + j)] = 1;
      }
    }
  }
  return m;
}

std::string DecodeTrace::action_string() const {
  std::string s;
  s.reserve(actions.size());
  for (Action a : actions) s.push_back(a == Action::Read ? 'R' : 'W');
  return s;
}

std::string DecodeTrace::to_json_line() const {
  nlohmann::json j;
  j["actions"] = action_string();
  j["emitted"] = emitted;
  j["read_counts"] = read_counts;
  j["truncated"] = truncated;
  if (!region_attention.empty()) j["region_attention"] = region_attention;
  return j.dump();
}

DecodeTrace DecodeTrace::from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad trace line: ") + e.what());
  }
  DecodeTrace trace;
  try {
    const std::string acts = j.at("actions").get<std::string>();
    for (char c : acts) {
      if (c == 'R') {
        trace.actions.push_back(Action::Read);
      } else if (c == 'W') {
        trace.actions.push_back(Action::Write);
      } else {
        throw DataError(std::string("bad action character '") + c + "'");
      }
    }
    trace.emitted = j.at("emitted").get<std::vector<int>>();
    trace.read_counts = j.at("read_counts").get<std::vector<int>>();
    trace.truncated = j.at("truncated").get<bool>();
    if (j.contains("region_attention")) {
      trace.region_attention =
          j.at("region_attention").get<std::vector<std::vector<double>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad trace line: ") + e.what());
  }
  const size_t writes = static_cast<size_t>(
      std::count(trace.actions.begin(), trace.actions.end(), Action::Write));
  if (writes != trace.emitted.size() ||
      trace.emitted.size() != trace.read_counts.size()) {
    throw DataError("trace line is inconsistent: " + std::to_string(writes) +
                    " writes, " + std::to_string(trace.emitted.size()) +
                    " tokens, " + std::to_string(trace.read_counts.size()) +
                    " read counts");
  }
  if (!trace.region_attention.empty() &&
      trace.region_attention.size() != trace.emitted.size()) {
    throw DataError("trace line has mismatched region attention rows");
  }
  return trace;
}

bool prefix_truncate_pair(std::vector<int>& x, std::vector<int>& y, double p,
                          Rng& rng) {
  if (p < 0.0 || p > 1.0) {
    throw ConfigError("truncation probability must be in [0, 1], got " +
                      std::to_string(p));
  }
  if (x.empty() || y.size() < 2) {
    throw DataError("prefix truncation needs |x| >= 1 and |y| >= 2");
  }
  if (rng.uniform() >= p) return false;
  const auto nx = static_cast<int64_t>(x.size());
  const auto ny = static_cast<int64_t>(y.size());
  const int64_t lx = rng.uniform_int(1, nx);
  const auto ly = std::max<int64_t>(
      2, static_cast<int64_t>(std::round(
             static_cast<double>(lx) * static_cast<double>(ny) /
             static_cast<double>(nx))));
  x.resize(static_cast<size_t>(lx));
  y.resize(static_cast<size_t>(std::min(ly, ny)));
  return true;
}

int prefix_truncate_batch(
    std::vector<std::pair<std::vector<int>, std::vector<int>>>& batch,
    double p, Rng& rng) {
  int truncated = 0;
  for (auto& [x, y] : batch) {
    if (prefix_truncate_pair(x, y, p, rng)) ++truncated;
  }
  return truncated;
}

namespace {

int argmax_row(const Tensor& logits, int64_t row) {
  const int64_t vocab = logits.dim(-1);
  const auto& v = logits.data();
  const double* base = v.data() + row * vocab;
  int best = 0;
  for (int64_t j = 1; j < vocab; ++j) {
    if (base[j] > base[best]) best = static_cast<int>(j);
  }
  return best;
}

EncodedSource encode_prefix(const TranslationModel& model,
                            const std::vector<int>& src, int visible,
                            const Tensor* features, bool unidirectional) {
  const std::vector<int> prefix(src.begin(), src.begin() + visible);
  const Mask self = unidirectional ? unidirectional_encoder_mask(visible)
                                   : Mask({visible, visible}, true);
  if (model.multimodal()) return model.encode_regions(prefix, self, *features);
  return model.encode(prefix, self);
}

}  // namespace

DecodeTrace greedy_waitk_decode(const TranslationModel& model,
                                const std::vector<int>& src,
                                const Tensor* features,
                                const DecodeOptions& opts) {
  if (src.empty()) throw DataError("cannot decode an empty source");
  if (model.multimodal() && !features) {
    throw ConfigError("multimodal model requires region features to decode");
  }
  if (!model.multimodal() && features) {
    throw ConfigError("text-only model was given region features");
  }
  const int n = static_cast<int>(src.size());
  const int max_len = opts.max_len > 0 ? opts.max_len : 2 * n + 10;

  DecodeTrace trace;
  int visible = g_waitk(opts.k, 1, n);
  trace.actions.assign(static_cast<size_t>(visible), Action::Read);
  EncodedSource enc =
      encode_prefix(model, src, visible, features, opts.unidirectional);

  std::vector<int> dec_input{opts.bos_id};
  for (int t = 1;; ++t) {
    // Rows keep their own wait-k visibility so this replay equals true
    // incremental decoding state for state.
    const Mask cross = waitk_cross_mask(opts.k, t, visible);
    Tensor logits = model.decoder_forward(dec_input, enc, cross);
    const int next = argmax_row(logits, t - 1);
    trace.emitted.push_back(next);
    trace.read_counts.push_back(visible);
    trace.actions.push_back(Action::Write);
    if (opts.collect_attention && enc.has_cmi()) {
      const int64_t regions = enc.cmi_attention.dim(-1);
      const auto& av = enc.cmi_attention.data();
      trace.region_attention.emplace_back(
          av.begin() + (visible - 1) * regions,
          av.begin() + visible * regions);
    }
    if (next == opts.eos_id) break;
    if (static_cast<int>(trace.emitted.size()) >= max_len) {
      trace.truncated = true;
      break;
    }
    dec_input.push_back(next);
    const int next_visible = g_waitk(opts.k, t + 1, n);
    if (next_visible > visible) {
      for (int r = visible; r < next_visible; ++r) {
        trace.actions.push_back(Action::Read);
      }
      visible = next_visible;
      enc = encode_prefix(model, src, visible, features, opts.unidirectional);
    }
  }
  return trace;
}

std::vector<int> consecutive_decode(const TranslationModel& model,
                                    const std::vector<int>& src,
                                    const Tensor* features, int max_len,
                                    bool unidirectional) {
  DecodeOptions opts;
  opts.k = static_cast<int>(src.size());
  opts.max_len = max_len;
  opts.unidirectional = unidirectional;
  return greedy_waitk_decode(model, src, features, opts).emitted;
}

}  // namespace simmt
