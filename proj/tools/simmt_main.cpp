#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "simmt/data.hpp"
#include "simmt/error.hpp"
#include "simmt/experiment.hpp"

namespace {

using namespace simmt;

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--seeds: not an integer: '" + item + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds: no seeds given");
  return seeds;
}

void write_lines(const std::string& path,
                 const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  for (const auto& l : lines) out << l << "\n";
  if (!out) throw DataError("failed while writing file: " + path);
}

struct MeanSd {
  double mean = 0.0, sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& xs) {
  MeanSd out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double sq = 0.0;
    for (double x : xs) sq += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(sq / static_cast<double>(xs.size() - 1));
  }
  return out;
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& seeds_text) {
  if (seeds_text.empty()) {
    const auto cfg = ExperimentConfig::parse_file(config_path, overrides);
    const TrainSummary s = run_train(cfg);
    std::cout << "checkpoint: " << s.checkpoint_path << "\n"
              << "log: " << s.log_path << "\n"
              << "config: " << s.config_path << "\n"
              << "best_epoch: " << s.best_epoch << " of " << s.epochs_run
              << "\n"
              << "best_f1: " << s.best_f1 << "\n"
              << "best_bleu: " << s.best_bleu << "\n";
    if (s.diverged) {
      std::cerr << "training diverged; best checkpoint retained\n";
      return 3;
    }
    return 0;
  }

  const auto seeds = parse_seed_list(seeds_text);
  std::vector<double> f1s, bleus;
  bool any_diverged = false;
  for (uint64_t seed : seeds) {
    auto cfg = ExperimentConfig::parse_file(config_path, overrides);
    cfg.train.seed = seed;
    cfg.output_dir = (std::filesystem::path(cfg.output_dir) /
                      ("seed_" + std::to_string(seed)))
                         .string();
    const TrainSummary s = run_train(cfg);
    std::cout << "seed " << seed << ": f1 " << s.best_f1 << " bleu "
              << s.best_bleu << " (" << s.checkpoint_path << ")\n";
    f1s.push_back(s.best_f1);
    bleus.push_back(s.best_bleu);
    any_diverged = any_diverged || s.diverged;
  }
  const MeanSd f1 = mean_sd(f1s);
  const MeanSd bl = mean_sd(bleus);
  std::cout << "f1: " << f1.mean << " +- " << f1.sd << "\n"
            << "bleu: " << bl.mean << " +- " << bl.sd << "\n";
  return any_diverged ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simultaneous multimodal translation toolkit"};
  app.require_subcommand(1);

  // train
  std::string config_path, seeds_text;
  std::vector<std::string> overrides;
  auto* train_cmd =
      app.add_subcommand("train", "Train or fine-tune a model from a config");
  train_cmd->add_option("--config", config_path, "Experiment config file")
      ->required();
  train_cmd->add_option("--set", overrides,
                        "Override a config value: section.key=value");
  train_cmd->add_option("--seeds", seeds_text,
                        "Comma-separated seeds; runs each and reports "
                        "mean +- sd");

  // translate
  std::string ck_path, src_path, out_path, trace_path, index_path, feat_path;
  int wait_k = 1;
  bool consecutive = false;
  auto* translate_cmd =
      app.add_subcommand("translate", "Decode a source file");
  translate_cmd->add_option("--checkpoint", ck_path, "Trained checkpoint")
      ->required();
  translate_cmd->add_option("--input", src_path, "Source text, one per line")
      ->required();
  translate_cmd->add_option("--output", out_path,
                            "Write translations here instead of stdout");
  auto* k_opt = translate_cmd->add_option("--k", wait_k, "Wait-k lag");
  auto* consecutive_flag = translate_cmd->add_flag(
      "--consecutive", consecutive, "Full-sentence decoding");
  k_opt->excludes(consecutive_flag);
  translate_cmd->add_option("--dump-trace", trace_path,
                            "Write one JSON decode trace per line");
  translate_cmd->add_option("--index", index_path,
                            "Image id per input line (multimodal)");
  translate_cmd->add_option("--features", feat_path,
                            "Region feature bank (multimodal)");

  // evaluate
  std::string hyp_path, ref_path, metrics_text = "bleu", report_path;
  std::vector<int> prefix_n = {1, 2, 3};
  auto* eval_cmd =
      app.add_subcommand("evaluate", "Score hypotheses against references");
  eval_cmd->add_option("--hyp", hyp_path, "Hypothesis file")->required();
  eval_cmd->add_option("--ref", ref_path, "Reference file")->required();
  eval_cmd->add_option("--metrics", metrics_text,
                       "Comma list from: bleu, prefix-acc");
  eval_cmd->add_option("--n", prefix_n, "Prefix lengths for prefix-acc")
      ->delimiter(',');
  eval_cmd->add_option("--report", report_path, "Also write the JSON here");

  // ground-eval
  std::string ann_path, emb_path, source_text = "gold";
  int ground_k = 1;
  auto* ground_cmd = app.add_subcommand(
      "ground-eval", "Score region attention against annotations");
  ground_cmd->add_option("--checkpoint", ck_path, "Multimodal checkpoint")
      ->required();
  ground_cmd->add_option("--input", src_path, "Source text")->required();
  ground_cmd->add_option("--index", index_path, "Image id per line")
      ->required();
  ground_cmd->add_option("--features", feat_path, "Region feature bank")
      ->required();
  ground_cmd->add_option("--annotations", ann_path, "Grounding JSONL")
      ->required();
  ground_cmd->add_option("--feature-source", source_text,
                         "gold: annotation boxes; detector: bank boxes of "
                         "the annotated regions");
  ground_cmd->add_option("--embeddings", emb_path,
                         "Label embedding table for the cosine score");
  ground_cmd->add_option("--k", ground_k, "Wait-k lag for the report");
  ground_cmd->add_option("--report", report_path, "Also write the JSON here");

  // attention-dump
  int example_id = 0, dump_k = 1;
  auto* dump_cmd = app.add_subcommand(
      "attention-dump", "Per-word region attention for one example");
  dump_cmd->add_option("--checkpoint", ck_path, "Multimodal checkpoint")
      ->required();
  dump_cmd->add_option("--input", src_path, "Source text")->required();
  dump_cmd->add_option("--index", index_path, "Image id per line")->required();
  dump_cmd->add_option("--features", feat_path, "Region feature bank")
      ->required();
  dump_cmd->add_option("--example", example_id, "0-based example id")
      ->required();
  dump_cmd->add_option("--k", dump_k, "Wait-k lag annotated on the rows");
  dump_cmd->add_option("--output", out_path,
                       "Write the JSON here instead of stdout");

  // synth
  std::string synth_dir;
  SyntheticCorpusSpec synth_spec;
  auto* synth_cmd = app.add_subcommand(
      "synth", "Generate the synthetic grounding corpus");
  synth_cmd->add_option("--out", synth_dir, "Output directory")->required();
  synth_cmd->add_option("--train", synth_spec.train_examples,
                        "Training examples");
  synth_cmd->add_option("--val", synth_spec.val_examples, "Validation examples");
  synth_cmd->add_option("--ambiguous-types", synth_spec.ambiguous_types,
                        "Distinct ambiguous word types");
  synth_cmd->add_option("--plain-types", synth_spec.plain_types,
                        "Distinct unambiguous word types");
  synth_cmd->add_option("--archetypes", synth_spec.archetypes,
                        "Visual senses per ambiguous type");
  synth_cmd->add_option("--min-len", synth_spec.min_len, "Shortest sentence");
  synth_cmd->add_option("--max-len", synth_spec.max_len, "Longest sentence");
  synth_cmd->add_option("--ambiguity", synth_spec.ambiguity,
                        "Chance a position is ambiguous");
  synth_cmd->add_option("--noise", synth_spec.feature_noise,
                        "Gaussian feature noise");
  synth_cmd->add_option("--seed", synth_spec.seed, "Corpus seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage errors all map to the config exit code
  }

  try {
    if (train_cmd->parsed()) {
      return cmd_train(config_path, overrides, seeds_text);
    }
    if (translate_cmd->parsed()) {
      TranslateOptions opts;
      opts.k = wait_k;
      opts.consecutive = consecutive;
      opts.collect_traces = !trace_path.empty();
      opts.image_index = index_path;
      opts.features = feat_path;
      const TranslateResult result = run_translate(ck_path, src_path, opts);
      if (out_path.empty()) {
        for (const auto& l : result.lines) std::cout << l << "\n";
      } else {
        write_lines(out_path, result.lines);
      }
      if (!trace_path.empty()) write_lines(trace_path, result.trace_lines);
      return 0;
    }
    if (eval_cmd->parsed()) {
      EvaluateOptions opts;
      opts.bleu = false;
      opts.prefix_acc = false;
      opts.prefix_n = prefix_n;
      std::istringstream metrics(metrics_text);
      std::string m;
      while (std::getline(metrics, m, ',')) {
        if (m == "bleu") opts.bleu = true;
        else if (m == "prefix-acc") opts.prefix_acc = true;
        else if (!m.empty())
          throw ConfigError("unknown metric: " + m +
                            " (expected bleu or prefix-acc)");
      }
      if (!opts.bleu && !opts.prefix_acc) {
        throw ConfigError("--metrics selected nothing to compute");
      }
      const EvaluateReport report = run_evaluate(hyp_path, ref_path, opts);
      std::cout << report.to_json() << "\n";
      if (!report_path.empty()) write_lines(report_path, {report.to_json()});
      return 0;
    }
    if (ground_cmd->parsed()) {
      GroundEvalOptions opts;
      opts.source = feature_source_from_name(source_text);
      opts.embeddings = emb_path;
      opts.k = ground_k;
      const GroundEvalReport report = run_ground_eval(
          ck_path, src_path, index_path, feat_path, ann_path, opts);
      std::cout << report.to_json() << "\n";
      if (!report_path.empty()) write_lines(report_path, {report.to_json()});
      return 0;
    }
    if (dump_cmd->parsed()) {
      const std::string doc = run_attention_dump(
          ck_path, src_path, index_path, feat_path, example_id, dump_k);
      if (out_path.empty()) {
        std::cout << doc << "\n";
      } else {
        write_lines(out_path, {doc});
      }
      return 0;
    }
    if (synth_cmd->parsed()) {
      const SyntheticCorpus corpus =
          generate_synthetic_corpus(synth_spec, synth_dir);
      std::cout << "manifest: " << corpus.manifest << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
