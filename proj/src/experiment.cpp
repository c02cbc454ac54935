#include "simmt/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "simmt/error.hpp"
#include "simmt/multimodal.hpp"
#include "simmt/simultaneous.hpp"

namespace simmt {

std::string task_name(Task task) {
  return task == Task::NMT ? "nmt" : "mmt";
}

Task task_from_name(const std::string& name) {
  if (name == "nmt") return Task::NMT;
  if (name == "mmt") return Task::MMT;
  throw ConfigError("unknown task: " + name + " (expected nmt or mmt)");
}

std::string supervision_name(Supervision s) {
  switch (s) {
    case Supervision::None: return "none";
    case Supervision::Scratch: return "scratch";
    case Supervision::Finetune: return "finetune";
  }
  throw ConfigError("unknown supervision mode");
}

Supervision supervision_from_name(const std::string& name) {
  if (name == "none") return Supervision::None;
  if (name == "scratch") return Supervision::Scratch;
  if (name == "finetune") return Supervision::Finetune;
  throw ConfigError("unknown supervision mode: " + name +
                    " (expected none, scratch or finetune)");
}

FeatureSource feature_source_from_name(const std::string& name) {
  if (name == "gold") return FeatureSource::Gold;
  if (name == "detector") return FeatureSource::Detector;
  throw ConfigError("unknown feature source: " + name +
                    " (expected gold or detector)");
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& value, const std::string& where) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": not a number: '" + value + "'");
  }
}

int parse_int(const std::string& value, const std::string& where) {
  try {
    size_t used = 0;
    const long v = std::stol(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw ConfigError(where + ": not an integer: '" + value + "'");
  }
}

uint64_t parse_u64(const std::string& value, const std::string& where) {
  try {
    size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError(where + ": not an unsigned integer: '" + value + "'");
  }
}

bool parse_bool(const std::string& value, const std::string& where) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(where + ": not a boolean: '" + value + "'");
}

void apply_key(ExperimentConfig& cfg, const std::string& section,
               const std::string& key, const std::string& value,
               const std::string& where) {
  if (section == "experiment") {
    if (key == "task") cfg.task = task_from_name(value);
    else if (key == "policy") cfg.train.regime = regime_from_name(value);
    else if (key == "supervision")
      cfg.supervision = supervision_from_name(value);
    else if (key == "output_dir") cfg.output_dir = value;
    else if (key == "init_checkpoint") cfg.init_checkpoint = value;
    else if (key == "finetune_epochs")
      cfg.finetune_epochs = parse_int(value, where);
    else
      throw ConfigError(where + ": unknown key 'experiment." + key + "'");
  } else if (section == "model") {
    if (key == "layers") cfg.model.num_layers = parse_int(value, where);
    else if (key == "dim") cfg.model.model_dim = parse_int(value, where);
    else if (key == "ff_dim") cfg.model.ff_dim = parse_int(value, where);
    else if (key == "heads") cfg.model.num_heads = parse_int(value, where);
    else if (key == "dropout") cfg.model.dropout = parse_double(value, where);
    else
      throw ConfigError(where + ": unknown key 'model." + key + "'");
  } else if (section == "train") {
    if (key == "seed") cfg.train.seed = parse_u64(value, where);
    else if (key == "batch_size")
      cfg.train.batch_size = parse_int(value, where);
    else if (key == "max_epochs")
      cfg.train.max_epochs = parse_int(value, where);
    else if (key == "patience") cfg.train.patience = parse_int(value, where);
    else if (key == "warmup") cfg.train.warmup_steps = parse_int(value, where);
    else if (key == "lr_scale") cfg.train.lr_scale = parse_double(value, where);
    else if (key == "adam_beta1")
      cfg.train.adam_beta1 = parse_double(value, where);
    else if (key == "adam_beta2")
      cfg.train.adam_beta2 = parse_double(value, where);
    else if (key == "adam_eps") cfg.train.adam_eps = parse_double(value, where);
    else if (key == "label_smoothing")
      cfg.train.label_smoothing = parse_double(value, where);
    else if (key == "clip_norm")
      cfg.train.clip_norm = parse_double(value, where);
    else if (key == "wait_k") cfg.train.wait_k = parse_int(value, where);
    else if (key == "prefix_p") cfg.train.prefix_p = parse_double(value, where);
    else if (key == "alpha")
      cfg.train.supervision.alpha = parse_double(value, where);
    else if (key == "beta")
      cfg.train.supervision.beta = parse_double(value, where);
    else if (key == "constant_lr")
      cfg.train.constant_lr = parse_bool(value, where);
    else if (key == "constant_lr_value")
      cfg.train.constant_lr_value = parse_double(value, where);
    else
      throw ConfigError(where + ": unknown key 'train." + key + "'");
  } else if (section == "data") {
    if (key == "train_src") cfg.data.train_src = value;
    else if (key == "train_tgt") cfg.data.train_tgt = value;
    else if (key == "train_index") cfg.data.train_index = value;
    else if (key == "val_src") cfg.data.val_src = value;
    else if (key == "val_tgt") cfg.data.val_tgt = value;
    else if (key == "val_index") cfg.data.val_index = value;
    else if (key == "features") cfg.data.features = value;
    else if (key == "annotations") cfg.data.annotations = value;
    else if (key == "val_annotations") cfg.data.val_annotations = value;
    else if (key == "min_freq") cfg.data.min_freq = parse_int(value, where);
    else
      throw ConfigError(where + ": unknown key 'data." + key + "'");
  } else {
    throw ConfigError(where + ": unknown section '[" + section + "]'");
  }
}

void apply_override(ExperimentConfig& cfg, const std::string& spec) {
  const std::string where = "--set " + spec;
  const size_t eq = spec.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(where + ": expected section.key=value");
  }
  const std::string path = trim(spec.substr(0, eq));
  const std::string value = trim(spec.substr(eq + 1));
  const size_t dot = path.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == path.size()) {
    throw ConfigError(where + ": expected section.key=value");
  }
  apply_key(cfg, path.substr(0, dot), path.substr(dot + 1), value, where);
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_text(
    const std::string& text, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw ConfigError(where + ": malformed section header '" + t + "'");
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected key = value, got '" + t + "'");
    }
    if (section.empty()) {
      throw ConfigError(where + ": key before any [section] header");
    }
    apply_key(cfg, section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)),
              where);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(
    const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), overrides);
}

std::string ExperimentConfig::snapshot() const {
  std::ostringstream out;
  out.precision(17);
  out << "[experiment]\n";
  out << "task = " << task_name(task) << "\n";
  out << "policy = " << regime_name(train.regime) << "\n";
  out << "supervision = " << supervision_name(supervision) << "\n";
  out << "output_dir = " << output_dir << "\n";
  out << "init_checkpoint = " << init_checkpoint << "\n";
  out << "finetune_epochs = " << finetune_epochs << "\n";
  out << "\n[model]\n";
  out << "layers = " << model.num_layers << "\n";
  out << "dim = " << model.model_dim << "\n";
  out << "ff_dim = " << model.ff_dim << "\n";
  out << "heads = " << model.num_heads << "\n";
  out << "dropout = " << model.dropout << "\n";
  out << "\n[train]\n";
  out << "seed = " << train.seed << "\n";
  out << "batch_size = " << train.batch_size << "\n";
  out << "max_epochs = " << train.max_epochs << "\n";
  out << "patience = " << train.patience << "\n";
  out << "warmup = " << train.warmup_steps << "\n";
  out << "lr_scale = " << train.lr_scale << "\n";
  out << "adam_beta1 = " << train.adam_beta1 << "\n";
  out << "adam_beta2 = " << train.adam_beta2 << "\n";
  out << "adam_eps = " << train.adam_eps << "\n";
  out << "label_smoothing = " << train.label_smoothing << "\n";
  out << "clip_norm = " << train.clip_norm << "\n";
  out << "wait_k = " << train.wait_k << "\n";
  out << "prefix_p = " << train.prefix_p << "\n";
  out << "alpha = " << train.supervision.alpha << "\n";
  out << "beta = " << train.supervision.beta << "\n";
  out << "constant_lr = " << (train.constant_lr ? "true" : "false") << "\n";
  out << "constant_lr_value = " << train.constant_lr_value << "\n";
  out << "\n[data]\n";
  out << "train_src = " << data.train_src << "\n";
  out << "train_tgt = " << data.train_tgt << "\n";
  out << "train_index = " << data.train_index << "\n";
  out << "val_src = " << data.val_src << "\n";
  out << "val_tgt = " << data.val_tgt << "\n";
  out << "val_index = " << data.val_index << "\n";
  out << "features = " << data.features << "\n";
  out << "annotations = " << data.annotations << "\n";
  out << "val_annotations = " << data.val_annotations << "\n";
  out << "min_freq = " << data.min_freq << "\n";
  return out.str();
}

void ExperimentConfig::validate() const {
  train.validate();
  if (model.num_layers < 1 || model.model_dim < 1 || model.ff_dim < 1 ||
      model.num_heads < 1) {
    throw ConfigError("model dimensions must all be positive");
  }
  if (model.model_dim % model.num_heads != 0) {
    throw ConfigError("model.dim must be divisible by model.heads");
  }
  if (model.dropout < 0.0 || model.dropout >= 1.0) {
    throw ConfigError("model.dropout must be in [0, 1)");
  }
  if (output_dir.empty()) throw ConfigError("experiment.output_dir is required");
  if (data.train_src.empty() || data.train_tgt.empty() ||
      data.val_src.empty() || data.val_tgt.empty()) {
    throw ConfigError("data.train_src/train_tgt/val_src/val_tgt are required");
  }
  if (data.min_freq < 1) throw ConfigError("data.min_freq must be >= 1");
  if (finetune_epochs < 1) {
    throw ConfigError("experiment.finetune_epochs must be >= 1");
  }
  if (task == Task::MMT) {
    if (data.features.empty()) {
      throw ConfigError("task mmt requires data.features");
    }
    if (data.train_index.empty() || data.val_index.empty()) {
      throw ConfigError("task mmt requires data.train_index and data.val_index");
    }
  } else {
    if (supervision != Supervision::None) {
      throw ConfigError("task nmt cannot use alignment supervision");
    }
    if (train.supervision.beta > 0.0) {
      throw ConfigError("task nmt cannot use train.beta > 0");
    }
  }
  if (supervision != Supervision::None && data.annotations.empty()) {
    throw ConfigError("supervision " + supervision_name(supervision) +
                      " requires data.annotations");
  }
  if (supervision == Supervision::Finetune && init_checkpoint.empty()) {
    throw ConfigError(
        "supervision finetune requires experiment.init_checkpoint");
  }
  if (supervision == Supervision::Scratch && train.supervision.beta <= 0.0) {
    throw ConfigError("supervision scratch requires train.beta > 0");
  }
  if (supervision == Supervision::None && train.supervision.beta > 0.0) {
    throw ConfigError("train.beta > 0 requires supervision scratch or finetune");
  }
}

namespace {

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << content;
  if (!out) throw DataError("failed while writing file: " + path);
}

struct LoadedModel {
  Checkpoint checkpoint;
  TranslationModel model;
};

LoadedModel load_model(const std::string& checkpoint_path) {
  Checkpoint ck = Checkpoint::load(checkpoint_path);
  TranslationModel model = ck.restore_model();
  return {std::move(ck), std::move(model)};
}

// Image ids for a source file, one per line, validated against the bank.
std::vector<int> load_image_index(const std::string& path, size_t n_lines,
                                  const RegionFeatureBank& bank) {
  const auto lines = read_lines(path);
  if (lines.size() != n_lines) {
    throw DataError("image index " + path + " has " +
                    std::to_string(lines.size()) + " lines, expected " +
                    std::to_string(n_lines));
  }
  std::vector<int> ids;
  ids.reserve(lines.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    int id = 0;
    try {
      size_t used = 0;
      id = std::stoi(trim(lines[i]), &used);
      if (used != trim(lines[i]).size()) throw std::invalid_argument(lines[i]);
    } catch (const std::exception&) {
      throw DataError("image index line " + std::to_string(i + 1) +
                      " is not an integer: '" + lines[i] + "'");
    }
    if (id < 0 || id >= bank.image_count()) {
      throw DataError("image index line " + std::to_string(i + 1) +
                      " out of range: " + std::to_string(id));
    }
    ids.push_back(id);
  }
  return ids;
}

}  // namespace

TrainSummary run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);

  CorpusPaths train_paths;
  train_paths.src = cfg.data.train_src;
  train_paths.tgt = cfg.data.train_tgt;
  train_paths.annotations = cfg.data.annotations;
  CorpusPaths val_paths;
  val_paths.src = cfg.data.val_src;
  val_paths.tgt = cfg.data.val_tgt;
  val_paths.annotations = cfg.data.val_annotations;
  if (cfg.task == Task::MMT) {
    train_paths.image_index = cfg.data.train_index;
    train_paths.features = cfg.data.features;
    val_paths.image_index = cfg.data.val_index;
  }

  TrainResult result;
  Vocabulary src_vocab, tgt_vocab;
  if (cfg.supervision == Supervision::Finetune) {
    const Checkpoint base = Checkpoint::load(cfg.init_checkpoint);
    src_vocab = base.src_vocab;
    tgt_vocab = base.tgt_vocab;
    const Dataset train_data =
        load_corpus(train_paths, src_vocab, tgt_vocab);
    const Dataset val_data =
        load_corpus(val_paths, src_vocab, tgt_vocab, train_data.features);
    result = finetune_supervised(base, cfg.finetune_epochs, train_data,
                                 val_data);
  } else {
    src_vocab = Vocabulary::build(read_lines(cfg.data.train_src),
                                  cfg.data.min_freq);
    tgt_vocab = Vocabulary::build(read_lines(cfg.data.train_tgt),
                                  cfg.data.min_freq);
    const Dataset train_data = load_corpus(train_paths, src_vocab, tgt_vocab);
    const Dataset val_data =
        load_corpus(val_paths, src_vocab, tgt_vocab, train_data.features);

    ModelConfig mcfg = cfg.model;
    mcfg.src_vocab = src_vocab.size();
    mcfg.tgt_vocab = tgt_vocab.size();
    mcfg.region_dim =
        cfg.task == Task::MMT ? train_data.features->feature_dim() : 0;
    mcfg.validate();
    TranslationModel model(mcfg, cfg.train.seed);
    result = train(model, cfg.train, train_data, val_data, src_vocab,
                   tgt_vocab);
  }

  TrainSummary summary;
  summary.checkpoint_path =
      (std::filesystem::path(cfg.output_dir) / "checkpoint.bin").string();
  summary.log_path =
      (std::filesystem::path(cfg.output_dir) / "log.jsonl").string();
  summary.config_path =
      (std::filesystem::path(cfg.output_dir) / "config.txt").string();
  result.best.save(summary.checkpoint_path);
  std::string log_text;
  for (const auto& entry : result.history) {
    log_text += entry.to_json_line();
    log_text += "\n";
  }
  write_text_file(summary.log_path, log_text);
  write_text_file(summary.config_path, cfg.snapshot());

  summary.best_f1 = result.best.best_f1;
  summary.best_bleu = result.best.best_bleu;
  summary.best_val_loss = result.best.best_val_loss;
  summary.best_epoch = result.best_epoch;
  summary.epochs_run = static_cast<int>(result.history.size());
  summary.diverged = result.diverged;
  return summary;
}

TranslateResult run_translate(const std::string& checkpoint_path,
                              const std::string& src_path,
                              const TranslateOptions& opts) {
  if (!opts.consecutive && opts.k < 1) {
    throw ConfigError("wait-k decoding needs k >= 1");
  }
  auto loaded = load_model(checkpoint_path);
  const auto lines = read_lines(src_path);

  RegionFeatureBank bank;
  std::vector<int> image_ids;
  if (loaded.model.multimodal()) {
    if (opts.features.empty() || opts.image_index.empty()) {
      throw ConfigError(
          "multimodal checkpoint requires --features and --index");
    }
    bank = RegionFeatureBank::load(opts.features);
    if (bank.feature_dim() != loaded.model.config().region_dim) {
      throw DataError("feature bank dimension " +
                      std::to_string(bank.feature_dim()) +
                      " does not match the checkpoint's " +
                      std::to_string(loaded.model.config().region_dim));
    }
    image_ids = load_image_index(opts.image_index, lines.size(), bank);
  }

  TranslateResult out;
  out.lines.reserve(lines.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    const std::vector<int> src =
        loaded.checkpoint.src_vocab.encode(lines[i], false);
    Tensor features;
    const Tensor* features_ptr = nullptr;
    if (loaded.model.multimodal()) {
      features = bank.image_tensor(image_ids[i]);
      features_ptr = &features;
    }
    if (opts.consecutive) {
      const auto ids = consecutive_decode(loaded.model, src, features_ptr);
      out.lines.push_back(loaded.checkpoint.tgt_vocab.decode_string(ids));
      if (opts.collect_traces) {
        // Synthesize the read-then-write trace consecutive decoding implies.
        DecodeTrace trace;
        trace.actions.assign(src.size(), Action::Read);
        for (int id : ids) {
          trace.actions.push_back(Action::Write);
          trace.read_counts.push_back(static_cast<int>(src.size()));
          (void)id;
        }
        trace.emitted = ids;
        trace.truncated = ids.empty() || ids.back() != Vocabulary::kEos;
        out.trace_lines.push_back(trace.to_json_line());
      }
    } else {
      DecodeOptions dopts;
      dopts.k = opts.k;
      dopts.collect_attention = loaded.model.multimodal();
      const DecodeTrace trace =
          greedy_waitk_decode(loaded.model, src, features_ptr, dopts);
      out.lines.push_back(
          loaded.checkpoint.tgt_vocab.decode_string(trace.emitted));
      if (opts.collect_traces) out.trace_lines.push_back(trace.to_json_line());
    }
  }
  return out;
}

std::string EvaluateReport::to_json() const {
  nlohmann::json j;
  j["lines"] = lines;
  if (bleu.has_value()) j["bleu"] = *bleu;
  for (const auto& [n, score] : prefix_acc) {
    j["prefix_acc"][std::to_string(n)] = score;
  }
  return j.dump();
}

EvaluateReport run_evaluate(const std::string& hyp_path,
                            const std::string& ref_path,
                            const EvaluateOptions& opts) {
  const auto hyp_lines = read_lines(hyp_path);
  const auto ref_lines = read_lines(ref_path);
  if (hyp_lines.size() != ref_lines.size()) {
    throw DataError("hypothesis has " + std::to_string(hyp_lines.size()) +
                    " lines, reference has " +
                    std::to_string(ref_lines.size()));
  }
  if (hyp_lines.empty()) throw DataError("nothing to evaluate: empty files");
  std::vector<std::vector<std::string>> hyps, refs;
  hyps.reserve(hyp_lines.size());
  refs.reserve(ref_lines.size());
  for (const auto& l : hyp_lines) hyps.push_back(Vocabulary::tokenize(l));
  for (const auto& l : ref_lines) refs.push_back(Vocabulary::tokenize(l));

  EvaluateReport report;
  report.lines = static_cast<int>(hyp_lines.size());
  if (opts.bleu) report.bleu = bleu(hyps, refs);
  if (opts.prefix_acc) {
    for (int n : opts.prefix_n) {
      report.prefix_acc.emplace_back(n, prefix_accuracy(hyps, refs, n));
    }
  }
  return report;
}

namespace {

// Row j of the CMI attention from one full unidirectional encode. The
// encoder never attends right of j, so this equals the wait-k decode row
// produced when word j was the newest read, bit for bit.
Tensor example_attention(const TranslationModel& model,
                         const std::vector<int>& src, const Tensor& features) {
  const Mask self_mask = unidirectional_encoder_mask(
      static_cast<int>(src.size()));
  const EncodedSource enc = model.encode_regions(src, self_mask, features);
  if (!enc.has_cmi()) {
    throw ConfigError("checkpoint has no region attention to inspect");
  }
  return enc.cmi_attention;  // [n, R]
}

}  // namespace

std::string GroundEvalReport::to_json() const {
  nlohmann::json j;
  j["mean_iou"] = mean_iou;
  j["accuracy"] = accuracy;
  j["exact_match"] = exact_match;
  if (mean_cosine.has_value()) j["mean_cosine"] = *mean_cosine;
  j["words_scored"] = words_scored;
  j["words_skipped"] = words_skipped;
  return j.dump();
}

GroundEvalReport run_ground_eval(const std::string& checkpoint_path,
                                 const std::string& src_path,
                                 const std::string& image_index,
                                 const std::string& features,
                                 const std::string& annotations,
                                 const GroundEvalOptions& opts) {
  if (opts.k < 1) throw ConfigError("ground-eval needs k >= 1");
  auto loaded = load_model(checkpoint_path);
  if (!loaded.model.multimodal()) {
    throw ConfigError(
        "ground-eval needs a multimodal checkpoint (this one has no region "
        "attention)");
  }
  if (annotations.empty()) {
    throw ConfigError("ground-eval requires an annotations file");
  }
  auto bank = std::make_shared<RegionFeatureBank>(
      RegionFeatureBank::load(features));
  if (!bank->has_boxes()) {
    throw DataError("feature bank carries no region boxes: " + features);
  }

  const auto src_lines = read_lines(src_path);
  const auto image_ids = load_image_index(image_index, src_lines.size(), *bank);
  const auto annotation_entries = load_annotations(annotations);

  EmbeddingTable embeddings;
  const bool use_embeddings = !opts.embeddings.empty();
  if (use_embeddings) embeddings = load_embeddings(opts.embeddings);

  GroundEvalReport report;
  std::vector<GroundingRecord> records;
  std::vector<std::pair<std::string, std::string>> label_pairs;
  for (const auto& ann : annotation_entries) {
    if (ann.example < 0 ||
        ann.example >= static_cast<int>(src_lines.size())) {
      throw DataError("annotation references example " +
                      std::to_string(ann.example) + " but the corpus has " +
                      std::to_string(src_lines.size()) + " lines");
    }
    const std::vector<int> src =
        loaded.checkpoint.src_vocab.encode(src_lines[ann.example], false);
    const int image = image_ids[static_cast<size_t>(ann.example)];
    const int valid = bank->valid_count(image);
    const Tensor feat = bank->image_tensor(image);
    const Tensor attention = example_attention(loaded.model, src, feat);
    const auto regions = attention.shape().back();

    for (const auto& entry : ann.entries) {
      std::vector<BoundingBox> gold;
      if (opts.source == FeatureSource::Gold) {
        gold = entry.gold_boxes;
      } else {
        for (int r : entry.region_indices) {
          if (r < 0 || r >= valid) {
            throw DataError("annotation region " + std::to_string(r) +
                            " out of range for image " +
                            std::to_string(image));
          }
          gold.push_back(bank->box(image, r));
        }
      }
      for (int word : entry.word_indices) {
        if (word < 0 || word >= static_cast<int>(src.size())) {
          throw DataError("annotated word " + std::to_string(word) +
                          " out of range in example " +
                          std::to_string(ann.example));
        }
        if (gold.empty()) {
          ++report.words_skipped;
          continue;
        }
        // Argmax over the image's real regions; padded rows carry exact
        // zeros and can never win.
        int best_region = 0;
        double best_weight = -1.0;
        for (int r = 0; r < valid && r < static_cast<int>(regions); ++r) {
          const double w = attention.at({word, r});
          if (w > best_weight) {
            best_weight = w;
            best_region = r;
          }
        }
        GroundingRecord rec;
        rec.predicted_box = bank->box(image, best_region);
        rec.gold_boxes = gold;
        if (bank->has_labels()) {
          rec.predicted_label = bank->label(image, best_region);
          rec.gold_label = entry.gold_label;
          label_pairs.emplace_back(rec.predicted_label, rec.gold_label);
        }
        records.push_back(std::move(rec));
      }
    }
  }
  if (records.empty()) {
    throw DataError("no annotated words could be scored");
  }
  const GroundingScore score = grounding_score(records, 0.5);
  report.mean_iou = score.mean_iou;
  report.accuracy = score.accuracy;
  report.words_scored = score.count;
  if (!label_pairs.empty()) {
    const LabelScore ls = label_score(label_pairs, embeddings);
    report.exact_match = ls.exact_rate;
    report.mean_cosine = ls.mean_cosine;
  }
  return report;
}

std::string run_attention_dump(const std::string& checkpoint_path,
                               const std::string& src_path,
                               const std::string& image_index,
                               const std::string& features, int example_id,
                               int k) {
  if (k < 1) throw ConfigError("attention-dump needs k >= 1");
  auto loaded = load_model(checkpoint_path);
  if (!loaded.model.multimodal()) {
    throw ConfigError("attention-dump needs a multimodal checkpoint");
  }
  auto bank = RegionFeatureBank::load(features);
  const auto src_lines = read_lines(src_path);
  if (example_id < 0 || example_id >= static_cast<int>(src_lines.size())) {
    throw DataError("unknown example id " + std::to_string(example_id) +
                    ": corpus has " + std::to_string(src_lines.size()) +
                    " lines");
  }
  const auto image_ids = load_image_index(image_index, src_lines.size(), bank);
  const int image = image_ids[static_cast<size_t>(example_id)];

  const std::vector<int> src =
      loaded.checkpoint.src_vocab.encode(src_lines[example_id], false);
  const Tensor feat = bank.image_tensor(image);
  const Tensor attention = example_attention(loaded.model, src, feat);
  const int n = static_cast<int>(src.size());
  const int regions = static_cast<int>(attention.shape().back());

  nlohmann::json j;
  j["example"] = example_id;
  j["image"] = image;
  j["k"] = k;
  for (int id : src) {
    j["tokens"].push_back(loaded.checkpoint.src_vocab.token(id));
  }
  for (int r = 0; r < regions; ++r) {
    nlohmann::json region;
    region["index"] = r;
    if (bank.has_boxes()) {
      const BoundingBox box = bank.box(image, r);
      region["box"] = {box.x1, box.y1, box.x2, box.y2};
    }
    if (bank.has_labels()) region["label"] = bank.label(image, r);
    j["regions"].push_back(region);
  }
  for (int i = 0; i < n; ++i) {
    nlohmann::json row;
    // First wait-k write step whose visible prefix ends at word i; words
    // inside the initial k-token wait surface at the first write.
    row["word"] = i;
    row["available_at_write"] = std::max(1, i + 2 - k);
    for (int r = 0; r < regions; ++r) {
      row["attention"].push_back(attention.at({i, r}));
    }
    j["rows"].push_back(row);
  }
  return j.dump(2);
}

}  // namespace simmt
